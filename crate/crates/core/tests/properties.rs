use mfm_core::cost::{cost_matrix, CostFn, CostMatrix};
use mfm_core::coupling::{couple_batches, emit_pairs, BatchCoupling, Coupler, CouplerKind, Epsilon};
use mfm_core::data::{batch_to_csv, checkerboard_contains, parse_batch, Batch, Gmm, Source};
use mfm_core::flow::{jcfm_loss_value, make_train_samples};
use mfm_core::coupling::PairBatch;
use mfm_core::matching::{count_blocking_pairs, rankings_from_cost, stable_coupling};
use mfm_core::metrics::straightness;
use mfm_core::nn::{Checkpoint, NetSpec, TimeEmbedding, VectorFieldModel};
use mfm_core::ode::{flow_map, FnField, Method};
use mfm_core::ot::{assignment_cost, sinkhorn, solve_exact_assignment};
use mfm_core::Rng;
use ndarray::{array, Array2, ArrayView2};
use proptest::prelude::*;
use std::path::Path;

fn batch(seed: u64, k: usize, d: usize, shift: f64) -> Batch {
    let mut rng = Rng::new(seed);
    Batch::new(Array2::from_shape_fn((k, d), |_| rng.normal() + shift)).unwrap()
}

fn sorted(a: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = a.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.sort_by(|x, y| x.partial_cmp(y).unwrap());
    rows
}

fn permutation_cost(c: &Coupler, x0: &Batch, x1: &Batch, eval: &CostMatrix) -> f64 {
    match couple_batches(c, x0, x1).unwrap().0 {
        BatchCoupling::Permutation(p) => assignment_cost(eval, &p).unwrap(),
        BatchCoupling::Plan(_) => unreachable!("permutation coupler"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_exact(seed in any::<u64>(), k in 1usize..20, d in 1usize..6, scale in -30i32..30) {
        let mut rng = Rng::new(seed);
        let s = 2f64.powi(scale);
        let b = Batch::new(Array2::from_shape_fn((k, d), |_| rng.normal() * s)).unwrap();
        let back = parse_batch(&batch_to_csv(&b, Some("note")), Path::new("mem")).unwrap();
        prop_assert_eq!(back, b);
    }

    #[test]
    fn batch_ot_is_cheapest_permutation_coupler(seed in any::<u64>(), k in 1usize..24, d in 1usize..5) {
        let (x0, x1) = (batch(seed, k, d, 0.0), batch(seed ^ 1, k, d, 0.7));
        let cost = CostFn::SquaredEuclidean;
        let eval = cost_matrix(&x0, &x1, &cost).unwrap();
        let best = permutation_cost(&Coupler::batch_ot(cost.clone()), &x0, &x1, &eval);
        for kind in [CouplerKind::Uniform, CouplerKind::Stable, CouplerKind::Heuristic] {
            let other = permutation_cost(&Coupler::new(kind, cost.clone()).unwrap(), &x0, &x1, &eval);
            prop_assert!(best <= other + 1e-9, "{} > {}", best, other);
        }
    }

    #[test]
    fn permutation_couplers_preserve_batches(seed in any::<u64>(), k in 1usize..24, which in 0usize..4) {
        let kind = [CouplerKind::Uniform, CouplerKind::BatchOt, CouplerKind::Stable, CouplerKind::Heuristic][which].clone();
        let c = Coupler::new(kind, CostFn::L1).unwrap();
        let (x0, x1) = (batch(seed, k, 3, 0.0), batch(seed.wrapping_add(9), k, 3, 1.0));
        let (coupling, _) = couple_batches(&c, &x0, &x1).unwrap();
        let pairs = emit_pairs(&coupling, &x0, &x1, &mut Rng::new(0));
        prop_assert_eq!(sorted(pairs.x0()), sorted(x0.points()));
        prop_assert_eq!(sorted(pairs.x1()), sorted(x1.points()));
    }

    #[test]
    fn exact_assignment_is_a_lower_bound(seed in any::<u64>(), k in 1usize..30) {
        let mut rng = Rng::new(seed);
        let c = CostMatrix::from_array(Array2::from_shape_fn((k, k), |_| rng.uniform())).unwrap();
        let (p, total) = solve_exact_assignment(&c).unwrap();
        prop_assert!((assignment_cost(&c, &p).unwrap() - total).abs() < 1e-12);
        for _ in 0..10 {
            let mut sigma: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut sigma);
            let q = mfm_core::ot::Permutation::new(sigma).unwrap();
            prop_assert!(total <= assignment_cost(&c, &q).unwrap() + 1e-12);
        }
    }

    #[test]
    fn sinkhorn_plans_are_doubly_stochastic(seed in any::<u64>(), k in 2usize..20, rel in 0.01f64..10.0) {
        let c = cost_matrix(&batch(seed, k, 2, 0.0), &batch(seed ^ 7, k, 2, 0.5), &CostFn::SquaredEuclidean).unwrap();
        let out = sinkhorn(&c, rel * c.mean().max(1e-12), 10_000, 1e-9).unwrap();
        prop_assert!(out.converged);
        prop_assert!(out.pi.marginal_violation() <= 1e-9);
        prop_assert!(out.pi.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn stable_matching_has_no_blocking_pair(seed in any::<u64>(), k in 1usize..40) {
        let c = cost_matrix(&batch(seed, k, 2, 0.0), &batch(seed ^ 3, k, 2, 0.0), &CostFn::Cosine).unwrap();
        let r = rankings_from_cost(&c);
        prop_assert_eq!(count_blocking_pairs(&stable_coupling(&r), &r).unwrap(), 0);
    }

    #[test]
    fn checkerboard_samples_stay_on_board(seed in any::<u64>()) {
        let b = Source::Checkerboard.sample(&mut Rng::new(seed), 500).unwrap();
        prop_assert!(b.points().rows().into_iter().all(|r| checkerboard_contains(r.as_slice().unwrap())));
    }

    #[test]
    fn split_streams_replay(seed in any::<u64>(), i in any::<u64>()) {
        let (mut a, mut b) = (Rng::new(seed).split(i), Rng::new(seed).split(i));
        for _ in 0..8 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn jcfm_loss_ignores_sample_order(seed in any::<u64>(), n in 2usize..16) {
        let mut rng = Rng::new(seed);
        let x0 = Array2::from_shape_fn((n, 2), |_| rng.normal());
        let x1 = Array2::from_shape_fn((n, 2), |_| rng.normal() + 1.0);
        let s = make_train_samples(&PairBatch::new(x0, x1).unwrap(), &mut rng).unwrap();
        let m = VectorFieldModel::init(NetSpec::new(2, vec![8], TimeEmbedding::Concat).unwrap(), &mut rng).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let (a, b) = (jcfm_loss_value(&m, &s).unwrap(), jcfm_loss_value(&m, &s.permuted(&order)).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn checkpoint_text_round_trip(seed in any::<u64>(), w in 1usize..12, sin in any::<bool>()) {
        let emb = if sin { TimeEmbedding::Sinusoidal { n_freq: 3 } } else { TimeEmbedding::Concat };
        let model = VectorFieldModel::init(NetSpec::new(3, vec![w, w], emb).unwrap(), &mut Rng::new(seed)).unwrap();
        let ck = Checkpoint { model, adam: None, seed, step: 17 };
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        prop_assert_eq!(back.model, ck.model);
        prop_assert_eq!((back.seed, back.step), (seed, 17));
    }

    #[test]
    fn rk4_round_trip_on_rotation(x in -3.0f64..3.0, y in -3.0f64..3.0) {
        let rot = FnField::new(2, |p: ArrayView2<'_, f64>, _t: &[f64]| {
            Array2::from_shape_fn(p.dim(), |(i, j)| if j == 0 { -p[[i, 1]] } else { p[[i, 0]] })
        });
        let x0 = array![[x, y]];
        let fwd = flow_map(&rot, x0.view(), Method::Rk4 { nfe: 400 }, 0.0, 1.0).unwrap();
        let back = flow_map(&rot, fwd.view(), Method::Rk4 { nfe: 400 }, 1.0, 0.0).unwrap();
        prop_assert!((&back - &x0).iter().all(|v| v.abs() < 1e-9));
        // exact rotation by one radian
        let (c, s) = (1f64.cos(), 1f64.sin());
        prop_assert!((fwd[[0, 0]] - (c * x - s * y)).abs() < 1e-8);
        prop_assert!((fwd[[0, 1]] - (s * x + c * y)).abs() < 1e-8);
    }
}

#[test]
fn constant_field_is_perfectly_straight() {
    let f = FnField::new(2, |x: ArrayView2<'_, f64>, _t: &[f64]| Array2::from_elem(x.dim(), 1.5));
    let q0 = Source::Gmm(Gmm::standard_normal(2));
    let r = straightness(&f, &q0, 64, Method::adaptive(1e-6), &mut Rng::new(0)).unwrap();
    assert!(r.value.abs() < 1e-12, "{}", r.value);
}

#[test]
fn entropic_coupler_interpolates_between_plans() {
    let (x0, x1) = (batch(1, 12, 2, 0.0), batch(2, 12, 2, 1.0));
    let eval = cost_matrix(&x0, &x1, &CostFn::SquaredEuclidean).unwrap();
    let (_, exact) = solve_exact_assignment(&eval).unwrap();
    let mut last = exact / 12.0;
    for rel in [0.01, 0.1, 1.0, 10.0] {
        let c = Coupler::new(CouplerKind::batch_eot(Epsilon::RelativeToMean(rel)), CostFn::SquaredEuclidean).unwrap();
        let BatchCoupling::Plan(pi) = couple_batches(&c, &x0, &x1).unwrap().0 else {
            panic!("entropic coupler returns a plan");
        };
        let cost = pi.transport_cost(&eval);
        assert!(cost >= last - 1e-9, "{cost} < {last}");
        last = cost;
    }
    assert!(last <= eval.mean() + 1e-9);
}
