//! End-to-end runs: load or generate calibration samples, split token positions
//! into calibration and evaluation parts, then evaluate the baseline, Hadamard,
//! PSOT (with ASOT weights) and LAC stages on the held-out positions.

mod config;

pub use config::{BlockSource, InputSource, LacSettings, PipelineConfig, Stages};

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::activations::{channel_stats, generate_calibration_set, read_dump, ActivationBatch};
use crate::asot::{select_threshold, AsotConfig};
use crate::error::{Error, Result};
use crate::infometrics::{dispersion_bn, pooled_metrics, MetricsReport};
use crate::lac::{block_forward, optimize_clipping, output_mse, ClipParams, DeskBlock, MsePoint};
use crate::numeric::CompensatedSum;
use crate::psot::{centering_project, train_psot, write_transform, OrthoTransform};
use crate::quantizer::{fake_quantize_batch, QuantizerSpec};

pub const LOCK_FILE: &str = ".quantlab.lock";
pub const STAGES_CSV: &str = "stages.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TIMING_CSV: &str = "timing.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub name: String,
    pub eval_tokens: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Mean squared error of per-token affine fake quantization.
    pub quant_mse: f64,
    /// Mean `||y||_inf` of the centered rotated tokens.
    pub mean_peak: f64,
    /// Mean dispersion `b_n` of the centered rotated tokens.
    pub mean_bn: f64,
    /// Block output error, when the LAC stage is enabled.
    pub block_mse: Option<f64>,
    pub metrics: MetricsReport,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    pub eta_curve: Option<Vec<(f64, f64)>>,
    pub mean_set_sizes: Option<Vec<f64>>,
    pub k_star: Option<f64>,
    pub selected_per_sample: Option<Vec<usize>>,
    pub loss_trace: Option<Vec<f64>>,
    pub max_orthogonality_error: Option<f64>,
    pub clip: Option<ClipParams>,
    pub lac_trace: Option<Vec<MsePoint>>,
}

impl RunReport {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Calibration samples from the configured source, tagged `0..m`.
pub fn load_samples(input: &InputSource) -> Result<Vec<ActivationBatch>> {
    match input {
        InputSource::Synthetic { spec, samples } => Ok(generate_calibration_set(spec, *samples)?
            .into_iter()
            .map(|p| p.batch)
            .collect()),
        InputSource::Files { paths } => paths
            .iter()
            .enumerate()
            .map(|(r, p)| Ok(read_dump(p)?.with_sample_id(r as u64)))
            .collect(),
    }
}

/// Seeded split of token positions `0..n` into ascending (calibration, evaluation) lists.
pub fn split_positions(n: usize, eval_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_eval = (n as f64 * eval_fraction).round() as usize;
    if n_eval == 0 || n_eval >= n {
        return Err(Error::InvalidSpec(format!(
            "cannot hold out {eval_fraction} of {n} tokens with both parts non-empty"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut eval = perm[..n_eval].to_vec();
    let mut calib = perm[n_eval..].to_vec();
    eval.sort_unstable();
    calib.sort_unstable();
    Ok((calib, eval))
}

fn concat(samples: &[ActivationBatch]) -> Result<ActivationBatch> {
    let dim = samples[0].dim();
    let data: Vec<f64> = samples.iter().flat_map(|s| s.data().iter().copied()).collect();
    ActivationBatch::new(data, data_len_tokens(samples), dim, 0)
}

fn data_len_tokens(samples: &[ActivationBatch]) -> usize {
    samples.iter().map(ActivationBatch::n_tokens).sum()
}

fn base_weight(settings: &LacSettings, dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    match &settings.block {
        BlockSource::Identity => Ok(DMatrix::identity(dim, dim)),
        BlockSource::Random { out_dim } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1AC0_B10C);
            let scale = 1.0 / (dim as f64).sqrt();
            Ok(DMatrix::from_fn(dim, *out_dim, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))
        }
        BlockSource::File { path } => {
            let w = read_dump(path)?;
            if w.n_tokens() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: w.n_tokens(),
                });
            }
            Ok(DMatrix::from_row_slice(w.n_tokens(), w.dim(), w.data()))
        }
    }
}

// The block seen by rotated activations: `R^T W`, so that `x R R^T W = x W`.
fn fused_block(settings: &LacSettings, w: &DMatrix<f64>, r: Option<&OrthoTransform>) -> Result<DeskBlock> {
    let fused = match r {
        Some(r) => r.to_dense().transpose() * w,
        None => w.clone(),
    };
    DeskBlock::new(fused, settings.nonlinearity, settings.weight_bits)
}

struct Evaluator<'a> {
    cfg: &'a PipelineConfig,
    eval: &'a [ActivationBatch],
    weight: Option<DMatrix<f64>>,
}

impl Evaluator<'_> {
    fn stage(&self, name: &str, r: Option<&OrthoTransform>, clip: ClipParams, started: Instant) -> Result<StageReport> {
        let rotated: Vec<ActivationBatch> = match r {
            Some(r) => self.eval.iter().map(|b| r.apply_batch(b)).collect::<Result<_>>()?,
            None => self.eval.to_vec(),
        };
        let spec = QuantizerSpec::affine(self.cfg.bits).with_clip(clip.alpha, clip.beta);
        let mut sq = CompensatedSum::new();
        let mut peak = CompensatedSum::new();
        let mut bn = CompensatedSum::new();
        let mut entries = 0usize;
        for b in &rotated {
            let q = fake_quantize_batch(b, &spec)?;
            for (u, v) in b.data().iter().zip(q.data()) {
                sq.add((u - v) * (u - v));
            }
            entries += b.data().len();
            for t in b.tokens() {
                let y = centering_project(t);
                peak.add(y.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
                bn.add(dispersion_bn(&y)?);
            }
        }
        let tokens = data_len_tokens(&rotated);
        let block_mse = match &self.weight {
            Some(w) => {
                let block = fused_block(&self.cfg.lac, w, r)?;
                let x = concat(&rotated)?;
                let reference = block_forward(&x, &block)?;
                let quant = block_forward(&fake_quantize_batch(&x, &spec)?, &block)?;
                Some(output_mse(&reference, &quant))
            }
            None => None,
        };
        Ok(StageReport {
            name: name.to_string(),
            eval_tokens: tokens,
            alpha: clip.alpha,
            beta: clip.beta,
            quant_mse: sq.value() / entries as f64,
            mean_peak: peak.value() / tokens as f64,
            mean_bn: bn.value() / tokens as f64,
            block_mse,
            metrics: pooled_metrics(&rotated, &self.cfg.metrics)?,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(
                None,
                format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Runs all enabled stages and writes the reports into `config.output`.
///
/// Refuses to touch a directory that already holds a report unless `force` is set.
/// On a stage failure the rows finished so far and a summary naming the failed
/// stage are still written.
pub fn run_pipeline(config: &PipelineConfig, force: bool) -> Result<RunReport> {
    config.validate()?;
    let out = &config.output;
    fs::create_dir_all(out)?;
    let _lock = LockGuard::acquire(out)?;
    if !force && (out.join(SUMMARY_JSON).exists() || out.join(STAGES_CSV).exists()) {
        return Err(Error::config(
            None,
            format!("{} already holds a report; pass --force to overwrite", out.display()),
        ));
    }
    for f in ["eta_curve.csv", "loss_trace.csv", "lac_trace.csv", "transform.ortm", TIMING_CSV] {
        let p = out.join(f);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }

    let mut report = RunReport::default();
    let result = run_stages(config, &mut report);
    write_reports(config, &report, result.as_ref().err())?;
    result.map(|_| report)
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        },
    })
}

fn run_stages(cfg: &PipelineConfig, report: &mut RunReport) -> Result<()> {
    let samples = staged("load", load_samples(&cfg.input))?;
    let n = samples[0].n_tokens();
    let dim = samples[0].dim();
    if let Some(s) = samples.iter().find(|s| s.n_tokens() != n || s.dim() != dim) {
        return staged(
            "load",
            Err(Error::InvalidSpec(format!(
                "all samples must share one shape ({n} x {dim}), sample {} is {} x {}",
                s.sample_id(),
                s.n_tokens(),
                s.dim()
            ))),
        );
    }
    let (calib_pos, eval_pos) = staged("split", split_positions(n, cfg.eval_fraction, cfg.seed))?;
    let calib: Vec<ActivationBatch> = samples.iter().map(|s| s.select_tokens(&calib_pos)).collect::<Result<_>>()?;
    let eval: Vec<ActivationBatch> = samples.iter().map(|s| s.select_tokens(&eval_pos)).collect::<Result<_>>()?;

    let weight = if cfg.stages.lac {
        Some(staged("lac", base_weight(&cfg.lac, dim, cfg.seed))?)
    } else {
        None
    };
    let ev = Evaluator {
        cfg,
        eval: &eval,
        weight,
    };

    let t = Instant::now();
    report.stages.push(staged("baseline", ev.stage("baseline", None, ClipParams::NEUTRAL, t))?);

    let mut current: Option<(String, OrthoTransform)> = None;
    if cfg.stages.hadamard {
        let t = Instant::now();
        let r = staged("hadamard", OrthoTransform::block_hadamard(dim, cfg.psot.blocks))?;
        report.stages.push(staged("hadamard", ev.stage("hadamard", Some(&r), ClipParams::NEUTRAL, t))?);
        current = Some(("hadamard".into(), r));
    }

    if cfg.stages.psot {
        let t = Instant::now();
        let total = data_len_tokens(&calib);
        let weights = if cfg.stages.asot {
            let sel = staged("asot", (|| {
                let stats = channel_stats(&calib)?;
                let asot = AsotConfig {
                    m: calib.len(),
                    ..cfg.asot.clone()
                };
                select_threshold(&calib, &stats, &asot)
            })())?;
            report.eta_curve = Some(sel.eta_curve.clone());
            report.mean_set_sizes = Some(sel.mean_set_sizes.clone());
            report.k_star = Some(sel.k_star);
            report.selected_per_sample = Some(sel.per_sample_sets.iter().map(Vec::len).collect());
            sel.weights
        } else {
            vec![1.0; total]
        };
        let outcome = staged("psot", train_psot(&calib, &weights, &cfg.psot))?;
        report.loss_trace = Some(outcome.loss_trace.clone());
        report.max_orthogonality_error = Some(outcome.max_orthogonality_error);
        report.stages.push(staged("psot", ev.stage("psot", Some(&outcome.transform), ClipParams::NEUTRAL, t))?);
        current = Some(("psot".into(), outcome.transform));
    }

    if let (true, Some(w)) = (cfg.stages.lac, &ev.weight) {
        let t = Instant::now();
        let name = match &current {
            Some((prev, _)) => format!("{prev}+lac"),
            None => "lac".to_string(),
        };
        let r = current.as_ref().map(|c| &c.1);
        let outcome = staged("lac", (|| {
            let block = fused_block(&cfg.lac, w, r)?;
            let rotated: Vec<ActivationBatch> = match r {
                Some(r) => calib.iter().map(|b| r.apply_batch(b)).collect::<Result<_>>()?,
                None => calib.clone(),
            };
            optimize_clipping(&concat(&rotated)?, &block, cfg.bits, &cfg.lac.search)
        })())?;
        report.clip = Some(outcome.clip);
        report.lac_trace = Some(outcome.trace);
        report.stages.push(staged("lac", ev.stage(&name, r, outcome.clip, t))?);
    }

    if let Some(("psot", r)) = current.as_ref().map(|(n, r)| (n.as_str(), r)) {
        write_transform(r, cfg.output.join("transform.ortm"))?;
    }
    Ok(())
}

fn write_reports(cfg: &PipelineConfig, report: &RunReport, failure: Option<&Error>) -> Result<()> {
    let out = &cfg.output;
    let mut w = csv::Writer::from_writer(File::create(out.join(STAGES_CSV))?);
    let mut header = vec!["stage", "eval_tokens", "bits", "alpha", "beta", "quant_mse", "mean_peak", "mean_bn", "block_mse"];
    header.extend(MetricsReport::HEADER);
    w.write_record(&header)?;
    for s in &report.stages {
        let mut row = vec![
            s.name.clone(),
            s.eval_tokens.to_string(),
            cfg.bits.to_string(),
            s.alpha.to_string(),
            s.beta.to_string(),
            s.quant_mse.to_string(),
            s.mean_peak.to_string(),
            s.mean_bn.to_string(),
            s.block_mse.map(|v| v.to_string()).unwrap_or_default(),
        ];
        row.extend(s.metrics.csv_fields());
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(File::create(out.join(TIMING_CSV))?);
    w.write_record(["stage", "seconds"])?;
    for s in &report.stages {
        w.write_record([s.name.clone(), format!("{:.6}", s.seconds)])?;
    }
    w.flush()?;

    if let (Some(curve), Some(sizes)) = (&report.eta_curve, &report.mean_set_sizes) {
        let mut w = csv::Writer::from_writer(File::create(out.join("eta_curve.csv"))?);
        w.write_record(["k", "eta", "mean_set_size"])?;
        for ((k, eta), size) in curve.iter().zip(sizes) {
            w.write_record([k.to_string(), eta.to_string(), size.to_string()])?;
        }
        w.flush()?;
    }
    if let Some(trace) = &report.loss_trace {
        let mut w = csv::Writer::from_writer(File::create(out.join("loss_trace.csv"))?);
        w.write_record(["epoch", "loss"])?;
        for (e, l) in trace.iter().enumerate() {
            w.write_record([(e + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;
    }
    if let Some(trace) = &report.lac_trace {
        let mut w = csv::Writer::from_writer(File::create(out.join("lac_trace.csv"))?);
        w.write_record(["alpha", "beta", "mse"])?;
        for p in trace {
            w.write_record([p.alpha.to_string(), p.beta.to_string(), p.mse.to_string()])?;
        }
        w.flush()?;
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        status: &'a str,
        failed_stage: Option<&'a str>,
        error: Option<String>,
        config: &'a PipelineConfig,
        report: &'a RunReport,
    }
    let (status, failed_stage, error) = match failure {
        None => ("ok", None, None),
        Some(Error::Stage { stage, source }) => ("failed", Some(stage.as_str()), Some(source.to_string())),
        Some(e) => ("failed", None, Some(e.to_string())),
    };
    let summary = Summary {
        status,
        failed_stage,
        error,
        config: cfg,
        report,
    };
    fs::write(out.join(SUMMARY_JSON), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (c, e) = split_positions(100, 0.2, 5).unwrap();
        assert_eq!((c.len(), e.len()), (80, 20));
        let mut all: Vec<usize> = c.iter().chain(&e).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_positions(100, 0.2, 5).unwrap(), (c, e.clone()));
        assert_ne!(split_positions(100, 0.2, 6).unwrap().1, e);
        assert!(split_positions(2, 0.1, 0).is_err());
    }
}
