//! Ground costs `c(x0, x1)` and cost-matrix assembly.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Norm below which the cosine cost refuses its input.
pub const COSINE_MIN_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum CostFn {
    /// `|x1 - x0|_2^2`
    SquaredEuclidean,
    /// `|x1 - x0|_1`
    L1,
    /// `1 - <x0, x1> / (|x0| |x1|)`
    Cosine,
    /// `|A (x1 - x0)|_2^2` for a fixed square matrix `A`.
    WeightedSquared(Array2<f64>),
}

impl CostFn {
    pub fn tag(&self) -> &'static str {
        match self {
            CostFn::SquaredEuclidean => "sqeuclidean",
            CostFn::L1 => "l1",
            CostFn::Cosine => "cosine",
            CostFn::WeightedSquared(_) => "weighted",
        }
    }

    /// Builds a cost from its config tag. `weight` is required for `weighted`.
    pub fn from_tag(tag: &str, weight: Option<Array2<f64>>) -> Result<Self> {
        match tag {
            "sqeuclidean" | "squared_euclidean" => Ok(CostFn::SquaredEuclidean),
            "l1" => Ok(CostFn::L1),
            "cosine" => Ok(CostFn::Cosine),
            "weighted" => {
                let a = weight.ok_or_else(|| {
                    Error::InvalidArgument("weighted cost needs a matrix".into())
                })?;
                CostFn::weighted(a)
            }
            other => Err(Error::InvalidArgument(format!("unknown cost {other:?}"))),
        }
    }

    pub fn weighted(a: Array2<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape("weighted cost matrix must be square".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weighted cost matrix".into()));
        }
        Ok(CostFn::WeightedSquared(a))
    }

    pub fn is_symmetric(&self) -> bool {
        // |A(x1-x0)| = |A(x0-x1)|, so every supported cost is symmetric.
        true
    }

    pub fn eval(&self, x0: ArrayView1<'_, f64>, x1: ArrayView1<'_, f64>) -> Result<f64> {
        if x0.len() != x1.len() {
            return Err(Error::Shape(format!(
                "cost arguments have dimensions {} and {}",
                x0.len(),
                x1.len()
            )));
        }
        match self {
            CostFn::SquaredEuclidean => Ok(x0
                .iter()
                .zip(x1.iter())
                .map(|(a, b)| (b - a) * (b - a))
                .sum()),
            CostFn::L1 => Ok(x0.iter().zip(x1.iter()).map(|(a, b)| (b - a).abs()).sum()),
            CostFn::Cosine => {
                let n0 = x0.dot(&x0).sqrt();
                let n1 = x1.dot(&x1).sqrt();
                if n0 < COSINE_MIN_NORM || n1 < COSINE_MIN_NORM {
                    return Err(Error::Domain(
                        "cosine cost of a (near) zero vector".into(),
                    ));
                }
                Ok(1.0 - x0.dot(&x1) / (n0 * n1))
            }
            CostFn::WeightedSquared(a) => {
                if a.ncols() != x0.len() {
                    return Err(Error::Shape(format!(
                        "weight matrix is {}x{}, points have dimension {}",
                        a.nrows(),
                        a.ncols(),
                        x0.len()
                    )));
                }
                let diff = &x1 - &x0;
                let ad = a.dot(&diff);
                Ok(ad.dot(&ad))
            }
        }
    }
}

pub fn eval_cost(cost: &CostFn, x0: &[f64], x1: &[f64]) -> Result<f64> {
    cost.eval(ArrayView1::from(x0), ArrayView1::from(x1))
}

/// Square matrix with entries uniform in `[-1, 1]`.
pub fn random_weight_matrix(dim: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((dim, dim), || rng.uniform_range(-1.0, 1.0))
}

/// `values[i][j] = c(x0_i, x1_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    /// Wraps a raw square matrix, rejecting non-finite entries.
    pub fn from_array(values: Array2<f64>) -> Result<Self> {
        if !values.is_square() || values.nrows() == 0 {
            return Err(Error::Shape(format!(
                "cost matrix must be square and nonempty, got {:?}",
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix entry".into()));
        }
        Ok(CostMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("cost matrix rows must have length k".into()));
        }
        let flat = rows.iter().flatten().copied().collect();
        Self::from_array(
            Array2::from_shape_vec((k, k), flat).map_err(|e| Error::Shape(e.to_string()))?,
        )
    }

    pub fn k(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().expect("nonempty")
    }

    pub fn median(&self) -> f64 {
        let mut v: Vec<f64> = self.values.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

pub fn cost_matrix(x0: &Batch, x1: &Batch, cost: &CostFn) -> Result<CostMatrix> {
    if x0.k() != x1.k() {
        return Err(Error::Shape(format!(
            "batches have {} and {} points",
            x0.k(),
            x1.k()
        )));
    }
    if x0.dim() != x1.dim() {
        return Err(Error::Shape(format!(
            "batches have dimensions {} and {}",
            x0.dim(),
            x1.dim()
        )));
    }
    let k = x0.k();
    let values = match cost {
        CostFn::SquaredEuclidean => {
            // Direct differences rather than |a|^2 + |b|^2 - 2ab keeps exact zeros on the diagonal.
            let (p0, p1) = (x0.points(), x1.points());
            Array2::from_shape_fn((k, k), |(i, j)| {
                p0.row(i)
                    .iter()
                    .zip(p1.row(j).iter())
                    .map(|(a, b)| (b - a) * (b - a))
                    .sum()
            })
        }
        _ => {
            let mut values = Array2::zeros((k, k));
            for i in 0..k {
                for j in 0..k {
                    values[[i, j]] = cost.eval(x0.row(i), x1.row(j))?;
                }
            }
            values
        }
    };
    CostMatrix::from_array(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Gmm;
    use ndarray::array;

    #[test]
    fn scalar_examples() {
        assert_eq!(
            eval_cost(&CostFn::SquaredEuclidean, &[1.5, -2.0], &[1.5, -2.0]).unwrap(),
            0.0
        );
        assert_eq!(eval_cost(&CostFn::L1, &[0.0, 0.0], &[1.0, -2.0]).unwrap(), 3.0);
        assert_eq!(eval_cost(&CostFn::Cosine, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let w = CostFn::weighted(array![[2.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(eval_cost(&w, &[0.0, 0.0], &[1.0, 3.0]).unwrap(), 13.0);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let err = eval_cost(&CostFn::Cosine, &[0.0, 0.0], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        assert!(eval_cost(&CostFn::Cosine, &[1e-13, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn single_entry_matrix() {
        let a = Batch::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Batch::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let c = cost_matrix(&a, &b, &CostFn::SquaredEuclidean).unwrap();
        assert_eq!(c.k(), 1);
        assert_eq!(c.get(0, 0), 5.0);
    }

    #[test]
    fn self_cost_has_zero_diagonal() {
        let x = Gmm::standard_normal(3).sample(&mut Rng::new(0), 6).unwrap();
        let c = cost_matrix(&x, &x, &CostFn::SquaredEuclidean).unwrap();
        for i in 0..6 {
            assert_eq!(c.get(i, i), 0.0);
        }
    }

    #[test]
    fn matrix_matches_scalar_loop() {
        let mut rng = Rng::new(1);
        let g = Gmm::standard_normal(3);
        let (x0, x1) = (g.sample(&mut rng, 4).unwrap(), g.sample(&mut rng, 4).unwrap());
        let a = random_weight_matrix(3, &mut rng);
        for cost in [
            CostFn::SquaredEuclidean,
            CostFn::L1,
            CostFn::Cosine,
            CostFn::weighted(a).unwrap(),
        ] {
            let c = cost_matrix(&x0, &x1, &cost).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let direct = eval_cost(
                        &cost,
                        x0.row(i).as_slice().unwrap(),
                        x1.row(j).as_slice().unwrap(),
                    )
                    .unwrap();
                    assert!((c.get(i, j) - direct).abs() <= 1e-15 * direct.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn identity_weight_agrees_with_squared() {
        let mut rng = Rng::new(2);
        let g = Gmm::standard_normal(4);
        let (x0, x1) = (g.sample(&mut rng, 8).unwrap(), g.sample(&mut rng, 8).unwrap());
        let sq = cost_matrix(&x0, &x1, &CostFn::SquaredEuclidean).unwrap();
        let w = cost_matrix(&x0, &x1, &CostFn::weighted(Array2::eye(4)).unwrap()).unwrap();
        for (a, b) in sq.values().iter().zip(w.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_symmetry() {
        let mut rng = Rng::new(3);
        let g = Gmm::standard_normal(2);
        let (x0, x1) = (g.sample(&mut rng, 5).unwrap(), g.sample(&mut rng, 5).unwrap());
        for cost in [CostFn::SquaredEuclidean, CostFn::L1, CostFn::Cosine] {
            let ab = cost_matrix(&x0, &x1, &cost).unwrap();
            let ba = cost_matrix(&x1, &x0, &cost).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    assert!((ab.get(i, j) - ba.get(j, i)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = Batch::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let b = Batch::from_rows(&[vec![0.0]]).unwrap();
        assert!(matches!(
            cost_matrix(&a, &b, &CostFn::L1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn tags_round_trip() {
        for tag in ["sqeuclidean", "l1", "cosine"] {
            assert_eq!(CostFn::from_tag(tag, None).unwrap().tag(), tag);
        }
        assert!(CostFn::from_tag("weighted", None).is_err());
        assert!(CostFn::from_tag("manhattan", None).is_err());
    }
}
