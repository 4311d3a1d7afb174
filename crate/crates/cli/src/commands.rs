//! Subcommand implementations. Each writes its artifacts under the run
//! directory `<out_dir>/<config hash>/` and returns a short summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mfm_core::coupling::{couple_batches, emit_pairs, mean_coupling_cost};
use mfm_core::data::{batch_to_csv, fmt_f64, load_batch, save_batch, Batch};
use mfm_core::metrics::{flow_transport_cost, kl_model, MetricReport};
use mfm_core::nn::{load_checkpoint, save_checkpoint, Checkpoint, VectorFieldModel};
use mfm_core::ode::Method;
use mfm_core::Rng;
use serde::Serialize;

use crate::config::{CostConfig, CouplerConfig, CouplerName, ExperimentConfig, SourceConfig};
use crate::error::CliError;
use crate::eval::{evaluate, evaluate_static, generate_samples};
use crate::train::{self, streams, TrainOutcome};

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Creates the run directory and stores the resolved config in it.
pub fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok(dir)
}

fn loss_curve_csv(hash: &str, losses: &[f64]) -> String {
    let mut out = format!("# config_hash={hash}\n# step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", fmt_f64(*l));
    }
    out
}

#[derive(Debug, Serialize)]
struct MetricLine<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    report: &'a MetricReport,
}

/// One JSON object per report.
pub fn metrics_jsonl(hash: &str, reports: &[MetricReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let line = serde_json::to_string(&MetricLine {
            config_hash: hash,
            report: r,
        })
        .expect("report serializes");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[derive(Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub outcome: TrainOutcome,
    /// `(lr, final loss)` per candidate when sweeping.
    pub lr_table: Vec<(f64, f64)>,
}

fn train_with_artifacts(
    cfg: &ExperimentConfig,
    do_sweep: bool,
    prefix: &str,
    train_fn: fn(&ExperimentConfig, f64, Option<&mut train::CheckpointHook<'_>>) -> Result<TrainOutcome, CliError>,
) -> Result<TrainSummary, CliError> {
    let dir = prepare_run_dir(cfg)?;
    let hash = cfg.hash();
    let run_one = |cfg: &ExperimentConfig, lr: f64| {
        let sub = if do_sweep {
            let d = dir.join(format!("{prefix}lr_{}", fmt_f64(lr)));
            fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
            d
        } else {
            dir.clone()
        };
        let mut hook = |step: usize, model: &VectorFieldModel, adam: &mfm_core::nn::AdamState| {
            let ck = Checkpoint {
                model: model.clone(),
                adam: Some(adam.clone()),
                seed: cfg.seed,
                step: step as u64,
            };
            save_checkpoint(sub.join(format!("{prefix}step_{step}.ckpt")), &ck).map_err(CliError::from)
        };
        let out = train_fn(cfg, lr, Some(&mut hook))?;
        if do_sweep {
            write(&sub.join(format!("{prefix}loss_curve.csv")), &loss_curve_csv(&hash, &out.losses))?;
        }
        Ok(out)
    };
    let (outcome, lr_table) = if do_sweep {
        let (best, table) = train::sweep_lr(cfg, run_one)?;
        let mut csv = format!("# config_hash={hash}\n# lr,final_loss\n");
        for (lr, fl) in &table {
            let _ = writeln!(csv, "{},{}", fmt_f64(*lr), fmt_f64(*fl));
        }
        write(&dir.join(format!("{prefix}lr_sweep.csv")), &csv)?;
        (best, table)
    } else {
        (run_one(cfg, cfg.train.lr[0])?, Vec::new())
    };
    write(&dir.join(format!("{prefix}loss_curve.csv")), &loss_curve_csv(&hash, &outcome.losses))?;
    save_checkpoint(dir.join(format!("{prefix}model.ckpt")), &outcome.checkpoint(cfg))?;
    Ok(TrainSummary {
        run_dir: dir,
        outcome,
        lr_table,
    })
}

/// Trains the flow; writes `model.ckpt` and `loss_curve.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, sweep_lr: bool) -> Result<TrainSummary, CliError> {
    train_with_artifacts(cfg, sweep_lr, "", train::train_flow)
}

/// Trains the static map; writes `static_model.ckpt` and `static_loss_curve.csv`.
pub fn cmd_train_static(cfg: &ExperimentConfig, sweep_lr: bool) -> Result<TrainSummary, CliError> {
    train_with_artifacts(cfg, sweep_lr, "static_", train::train_static)
}

#[derive(Debug)]
pub struct EvalSummary {
    pub reports: Vec<MetricReport>,
    pub sample_files: Vec<PathBuf>,
}

/// Evaluates a flow checkpoint (default `model.ckpt` in the run directory);
/// with `static_map`, evaluates `static_model.ckpt` instead.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    static_map: bool,
) -> Result<EvalSummary, CliError> {
    let dir = prepare_run_dir(cfg)?;
    let hash = cfg.hash();
    let (q0, _) = cfg.sources()?;
    let dim = q0.dim();
    let default_name = if static_map { "static_model.ckpt" } else { "model.ckpt" };
    let path = checkpoint.map_or_else(|| dir.join(default_name), Path::to_path_buf);
    let spec = if static_map {
        cfg.net.static_spec(dim)?
    } else {
        cfg.net.flow_spec(dim)?
    };
    let model = load_checkpoint(&path, Some(&spec))?.model;
    let started = Instant::now();
    let mut sample_files = Vec::new();
    let reports = if static_map {
        evaluate_static(cfg, &model, 10_000)?
    } else {
        for (m, batch) in generate_samples(cfg, &model, &cfg.eval.nfe_grid)? {
            let file = dir.join(format!("samples_nfe{m}.csv"));
            save_batch(&file, &batch, Some(&format!("config_hash={hash} nfe={m}")))?;
            sample_files.push(file);
        }
        evaluate(cfg, &model)?
    };
    let name = if static_map { "static_metrics.jsonl" } else { "metrics.jsonl" };
    write(&dir.join(name), &metrics_jsonl(&hash, &reports))?;
    let timing = serde_json::json!({
        "config_hash": hash,
        "command": if static_map { "eval-static" } else { "eval" },
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    write(&dir.join("timings.jsonl"), &format!("{timing}\n"))?;
    Ok(EvalSummary {
        reports,
        sample_files,
    })
}

#[derive(Debug, Serialize)]
pub struct CoupleSummary {
    pub pairs_file: PathBuf,
    pub diagnostics: mfm_core::coupling::CouplingDiagnostics,
}

/// Couples two CSV batches; writes `pairs.csv` (x0 columns then x1 columns)
/// and `stats.json` into `out`.
pub fn cmd_couple(
    x0_path: &Path,
    x1_path: &Path,
    coupler: &CouplerConfig,
    cost: &CostConfig,
    seed: u64,
    out: &Path,
) -> Result<CoupleSummary, CliError> {
    let x0 = load_batch(x0_path)?;
    let x1 = load_batch(x1_path)?;
    if x0.k() != x1.k() || x0.dim() != x1.dim() {
        return Err(CliError::Core(mfm_core::Error::Shape(format!(
            "batches are {}x{} and {}x{}",
            x0.k(),
            x0.dim(),
            x1.k(),
            x1.dim()
        ))));
    }
    let c = coupler.build(cost.build(x0.dim())?)?;
    let (coupling, diagnostics) = couple_batches(&c, &x0, &x1)?;
    let pairs = emit_pairs(&coupling, &x0, &x1, &mut Rng::new(seed));
    let joined = ndarray::concatenate(ndarray::Axis(1), &[pairs.x0(), pairs.x1()])
        .map_err(|e| CliError::Core(mfm_core::Error::Shape(e.to_string())))?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let pairs_file = out.join("pairs.csv");
    save_batch(&pairs_file, &Batch::new(joined)?, Some(&format!("coupler={} cost={}", c.name(), cost.kind)))?;
    let stats = serde_json::to_string_pretty(&diagnostics).expect("diagnostics serialize");
    write(&out.join("stats.json"), &(stats + "\n"))?;
    Ok(CoupleSummary {
        pairs_file,
        diagnostics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    /// Coupler name, or `flow` for the trained BatchOT flow.
    pub kind: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
}

/// Coupling cost per `(coupler, k)` and, optionally, the transport cost of a
/// BatchOT flow trained at each `k`. Writes `sweep_k.csv`.
pub fn cmd_sweep_k(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Usage("sweep-k needs a [sweep] section".into()))?;
    let dir = prepare_run_dir(cfg)?;
    let hash = cfg.hash();
    let (q0, q1) = cfg.sources()?;
    let dim = q0.dim();
    let cost = cfg.cost.build(dim)?;
    let root = Rng::new(cfg.seed).split(streams::SWEEP);
    let mut rows = Vec::new();
    for (ki, &k) in sweep.k_list.iter().enumerate() {
        // every coupler sees the same batches at a given k
        for name in &sweep.couplers {
            let c = CouplerConfig {
                kind: name.clone(),
                ..cfg.coupler.clone()
            }
            .build(cost.clone())?;
            let est = mean_coupling_cost(&c, &q0, &q1, k, sweep.resamples, &root.split(ki as u64), &cost)?;
            rows.push(SweepRow {
                k,
                kind: c.name().to_string(),
                mean: est.mean,
                stderr: est.stderr,
                n: est.n,
                kl: None,
            });
        }
        if sweep.train_flows {
            let mut sub = cfg.clone();
            sub.coupler = CouplerConfig {
                kind: CouplerName::BatchOt,
                ..cfg.coupler.clone()
            };
            sub.train.k = Some(k);
            sub.sweep = None;
            sub.validate()?;
            let out = train::train_flow(&sub, sub.train.lr[0], None)?;
            let method = Method::adaptive(cfg.eval.tol);
            let mut rng = Rng::new(cfg.seed).split(streams::EVAL + 1);
            let r = flow_transport_cost(&out.model, &q0, cfg.eval.n, method, &mut rng, &cost)?;
            let kl = match (q0.gmm(), q1.gmm()) {
                (Some(base), Some(target)) if dim <= 8 => {
                    let mut rng = Rng::new(cfg.seed).split(streams::EVAL + 2);
                    Some(kl_model(target, &out.model, base, cfg.eval.n, method, &mut rng)?.value)
                }
                _ => None,
            };
            rows.push(SweepRow {
                k,
                kind: "flow".into(),
                mean: r.value,
                stderr: r.stderr,
                n: r.n,
                kl,
            });
        }
    }
    let mut csv = format!("# config_hash={hash}\n# k,kind,mean,stderr,n,kl\n");
    for r in &rows {
        let kl = r.kl.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{},{},{kl}", r.k, r.kind, fmt_f64(r.mean), fmt_f64(r.stderr), r.n);
    }
    write(&dir.join("sweep_k.csv"), &csv)?;
    Ok(rows)
}

/// Writes `n` draws from `source` to `out`.
pub fn cmd_gen_data(source: &SourceConfig, n: usize, seed: u64, out: &Path) -> Result<Batch, CliError> {
    let batch = source.build()?.sample(&mut Rng::new(seed), n)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    write(out, &batch_to_csv(&batch, None))?;
    Ok(batch)
}
