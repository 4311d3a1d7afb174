use mfm_core::data::{Batch, Source};
use mfm_core::flow::variance_proxy;
use mfm_core::metrics::{
    consistency, flow_transport_cost, kl_model, kl_static_samplebased, push_forward,
    static_transport_cost, straightness, MetricReport,
};
use mfm_core::nn::VectorFieldModel;
use mfm_core::ode::Method;
use mfm_core::Rng;

use crate::config::{ExperimentConfig, MetricName};
use crate::error::CliError;
use crate::train::streams;

fn metric_rng(cfg: &ExperimentConfig, m: &MetricName) -> Rng {
    let slot = match m {
        MetricName::Straightness => 0,
        MetricName::TransportCost => 1,
        MetricName::Kl => 2,
        MetricName::Consistency => 3,
        MetricName::VarianceProxy => 4,
    };
    Rng::new(cfg.seed).split(streams::EVAL + slot)
}

fn analytic<'a>(s: &'a Source, which: &str) -> Result<&'a mfm_core::data::Gmm, CliError> {
    s.gmm()
        .ok_or_else(|| CliError::Usage(format!("kl needs an analytic (gmm) {which}")))
}

/// Runs one metric on a trained flow.
pub fn flow_metric(
    cfg: &ExperimentConfig,
    model: &VectorFieldModel,
    metric: &MetricName,
) -> Result<Vec<MetricReport>, CliError> {
    let (q0, q1) = cfg.sources()?;
    let dim = q0.dim();
    let ev = &cfg.eval;
    let method = Method::adaptive(ev.tol);
    let mut rng = metric_rng(cfg, metric);
    Ok(match metric {
        MetricName::Straightness => vec![straightness(model, &q0, ev.n, method, &mut rng)?],
        MetricName::TransportCost => {
            let cost = cfg.cost.build(dim)?;
            vec![flow_transport_cost(model, &q0, ev.n, method, &mut rng, &cost)?]
        }
        MetricName::Kl => {
            let (base, target) = (analytic(&q0, "q0")?, analytic(&q1, "q1")?);
            vec![kl_model(target, model, base, ev.n, method, &mut rng)?]
        }
        MetricName::Consistency => consistency(model, &q0, &ev.consistency_m, ev.n, &mut rng)?,
        MetricName::VarianceProxy => {
            let coupler = cfg.coupler(dim)?;
            let est = variance_proxy(
                model,
                &coupler,
                &q0,
                &q1,
                cfg.train.coupling_k(),
                cfg.train.batch_size,
                ev.proxy_batches,
                &rng,
            )?;
            vec![MetricReport::from_estimate("variance_proxy", est)]
        }
    })
}

/// All metrics listed in the config, in order.
pub fn evaluate(cfg: &ExperimentConfig, model: &VectorFieldModel) -> Result<Vec<MetricReport>, CliError> {
    let mut out = Vec::new();
    for m in &cfg.eval.metrics {
        out.extend(flow_metric(cfg, model, m)?);
    }
    Ok(out)
}

/// Transport cost and sample-based KL of a static map.
pub fn evaluate_static(
    cfg: &ExperimentConfig,
    psi: &VectorFieldModel,
    n_fit: usize,
) -> Result<Vec<MetricReport>, CliError> {
    let (q0, q1) = cfg.sources()?;
    let cost = cfg.cost.build(q0.dim())?;
    let root = Rng::new(cfg.seed);
    let mut out = vec![static_transport_cost(
        psi,
        &q0,
        cfg.eval.n,
        &mut root.split(streams::EVAL + 1),
        &cost,
    )?];
    if let Some(target) = q1.gmm() {
        out.push(kl_static_samplebased(
            target,
            psi,
            &q0,
            n_fit,
            cfg.eval.n,
            &mut root.split(streams::EVAL + 2),
        )?);
    }
    Ok(out)
}

/// Samples generated with `m` Euler steps from shared initial points, one batch per `m`.
pub fn generate_samples(
    cfg: &ExperimentConfig,
    model: &VectorFieldModel,
    nfe_grid: &[usize],
) -> Result<Vec<(usize, Batch)>, CliError> {
    let (q0, _) = cfg.sources()?;
    let mut rng = Rng::new(cfg.seed).split(streams::EVAL + 8);
    let x0 = q0.sample(&mut rng, cfg.eval.n)?;
    nfe_grid
        .iter()
        .map(|&m| {
            let x1 = push_forward(model, x0.points(), Method::Euler { nfe: m })?;
            Ok((m, Batch::new(x1)?))
        })
        .collect()
}
