use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use quantlab_core::activations::{
    generate_calibration_set, read_dump, write_dump_as, ActivationBatch, DumpDtype, Family,
    OutlierMode, SyntheticSpec,
};
use quantlab_core::asot::{parse_grid, select_threshold, AsotConfig};
use quantlab_core::infometrics::{
    bound_f, critical_kappa, pooled_metrics, tau_closed_form, token_metrics, MetricsOptions,
    MetricsReport,
};
use quantlab_core::lac::{optimize_clipping, DeskBlock, LacConfig, LacMethod, Nonlinearity};
use quantlab_core::pipeline::{run_pipeline, PipelineConfig, STAGES_CSV, SUMMARY_JSON};
use quantlab_core::psot::{read_transform, train_psot, write_transform, Init, PsotConfig};
use quantlab_core::quantizer::{batch_mse, fake_quantize_batch, QuantizerSpec};
use quantlab_core::{Error, Result};

/// Activation quantization lab: synthetic activations, quantizer error analysis,
/// learned rotations, outlier-token selection and clipping search.
#[derive(Parser)]
#[command(name = "quantlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic activations as ACTD files.
    Gen(GenArgs),
    /// Fake-quantize activations and report the mean squared error.
    Quantize(QuantizeArgs),
    /// Quantizer-facing metrics (dispersion, error bound, smoothed KL) as CSV.
    Metrics(MetricsArgs),
    /// Tail term, error bound and critical clipping scale over a kappa grid.
    Bounds(BoundsArgs),
    /// Train a peak-suppression rotation.
    Psot(PsotArgs),
    /// Select outlier tokens and write PSOT weights.
    Asot(AsotArgs),
    /// Search activation clipping ratios for a block.
    Lac(LacArgs),
    /// Run the staged pipeline and write reports.
    Pipeline(PipelineArgs),
    /// Print the stage table of a finished run.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Laplace,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Gaussian => Family::Gaussian,
            FamilyArg::Laplace => Family::Laplace,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PerChannel,
    PerToken,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Affine,
    Centered,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Hadamard,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum NonlinearityArg {
    Identity,
    Gelu,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    family: FamilyArg,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 2048)]
    tokens: usize,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    outlier_gain: f64,
    #[arg(long, value_enum, default_value = "per-channel")]
    outlier_mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of calibration samples; more than one writes `<stem>_<r>.<ext>`.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DtypeArg,
    /// Also write planted ground truth (`sample,kind,index`) here.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, value_enum, default_value = "affine")]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Optional transform applied before quantization.
    #[arg(long)]
    transform: Option<PathBuf>,
    /// Write the dequantized activations here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// ACTD file or glob pattern.
    #[arg(long = "in")]
    input: String,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    /// Family whose tail closed form enters the bound column.
    #[arg(long, value_enum, default_value = "gaussian")]
    family: FamilyArg,
    /// Kernel width as a fraction of the step size.
    #[arg(long, default_value_t = 0.05)]
    theta_ratio: f64,
    #[arg(long, default_value_t = 15000)]
    bins: usize,
    /// One row per token instead of one per file.
    #[arg(long)]
    per_token: bool,
    #[arg(long)]
    transform: Option<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    family: FamilyArg,
    /// Comma-separated bit widths.
    #[arg(long, default_value = "2,3,4,8", value_delimiter = ',')]
    bits: Vec<u32>,
    /// `start:end:step`.
    #[arg(long, default_value = "0:5:0.25")]
    kappa: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PsotArgs {
    /// ACTD file or glob pattern; each file is one calibration sample.
    #[arg(long = "in")]
    input: String,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 2.0)]
    temperature: f64,
    #[arg(long, default_value_t = 2.0)]
    lr: f64,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, value_enum, default_value = "hadamard")]
    init: InitArg,
    /// Disable the `1 / ||A||_1` step cap.
    #[arg(long)]
    no_step_cap: bool,
    #[arg(long)]
    fd_check: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Token weights from `quantlab asot --weights-out`; all ones when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct AsotArgs {
    #[arg(long = "in")]
    input: String,
    #[arg(long, default_value_t = 0.02)]
    delta: f64,
    #[arg(long, default_value_t = 0.4)]
    tau: f64,
    #[arg(long, default_value_t = 30.0)]
    gamma: f64,
    #[arg(long, default_value = "2:8:0.25")]
    grid: String,
    /// Number of samples; defaults to the number of input files.
    #[arg(long)]
    m: Option<usize>,
    /// Weight selected tokens 1 and all others 0.
    #[arg(long)]
    outliers_only: bool,
    #[arg(long)]
    weights_out: Option<PathBuf>,
    #[arg(long)]
    curve_out: Option<PathBuf>,
}

#[derive(Args)]
struct LacArgs {
    #[arg(long = "in")]
    input: String,
    /// Block weight `W` as an ACTD matrix (dim rows); identity when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "identity")]
    nonlinearity: NonlinearityArg,
    /// Pre-quantize `W` per output channel.
    #[arg(long)]
    weight_bits: Option<u32>,
    /// Rotation applied to the activations (and fused into `W`).
    #[arg(long)]
    transform: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, default_value_t = 11)]
    grid: usize,
    /// Finite-difference descent steps instead of golden-section refinement.
    #[arg(long)]
    fd_steps: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    fd_lr: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// ACTD file or glob pattern (overrides `input.paths`).
    #[arg(long = "in")]
    input: Option<String>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, e.g. `--set psot.temperature=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overwrite an existing report.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory written by `quantlab pipeline`.
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("QUANTLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(None, format!("QUANTLAB_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(None, format!("cannot size thread pool: {e}")))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Quantize(a) => quantize(a),
        Command::Metrics(a) => metrics(a),
        Command::Bounds(a) => bounds(a),
        Command::Psot(a) => psot(a),
        Command::Asot(a) => asot(a),
        Command::Lac(a) => lac(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Report(a) => report(a),
    }
}

/// Sorted paths matching `pattern`; a plain path is returned as is.
fn expand(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Error::config(None, format!("bad pattern {pattern:?}: {e}")))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Io(e.into()))?;
    if paths.is_empty() {
        return Err(Error::config(None, format!("no files match {pattern:?}")));
    }
    Ok(paths)
}

fn load_all(pattern: &str) -> Result<Vec<ActivationBatch>> {
    expand(pattern)?
        .iter()
        .enumerate()
        .map(|(r, p)| Ok(read_dump(p)?.with_sample_id(r as u64)))
        .collect()
}

fn load_one(pattern: &str) -> Result<ActivationBatch> {
    let samples = load_all(pattern)?;
    let dim = samples[0].dim();
    let data: Vec<f64> = samples.iter().flat_map(|s| s.data().iter().copied()).collect();
    let n = samples.iter().map(ActivationBatch::n_tokens).sum();
    ActivationBatch::new(data, n, dim, 0)
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn sample_path(out: &Path, r: usize, total: usize) -> PathBuf {
    if total == 1 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}_{r}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{r}"),
    };
    out.with_file_name(name)
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        family: a.family.into(),
        dim: a.dim,
        n_tokens: a.tokens,
        scale: a.scale,
        outlier_rate: a.outlier_rate,
        outlier_gain: a.outlier_gain,
        outlier_mode: match a.outlier_mode {
            ModeArg::PerChannel => OutlierMode::PerChannel,
            ModeArg::PerToken => OutlierMode::PerToken,
        },
        seed: a.seed,
    };
    let dtype = match a.dtype {
        DtypeArg::F32 => DumpDtype::F32,
        DtypeArg::F64 => DumpDtype::F64,
    };
    let set = generate_calibration_set(&spec, a.samples)?;
    for (r, p) in set.iter().enumerate() {
        write_dump_as(&p.batch, sample_path(&a.out, r, a.samples), dtype)?;
    }
    if let Some(path) = &a.truth {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample", "kind", "index"])?;
        for (r, p) in set.iter().enumerate() {
            for c in &p.boosted_channels {
                w.write_record([r.to_string(), "channel".into(), c.to_string()])?;
            }
            for t in &p.boosted_tokens {
                w.write_record([r.to_string(), "token".into(), t.to_string()])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn maybe_rotate(x: ActivationBatch, transform: &Option<PathBuf>) -> Result<ActivationBatch> {
    match transform {
        Some(p) => read_transform(p)?.apply_batch(&x),
        None => Ok(x),
    }
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let x = maybe_rotate(read_dump(&a.input)?, &a.transform)?;
    let spec = match a.scheme {
        SchemeArg::Affine => QuantizerSpec::affine(a.bits),
        SchemeArg::Centered => QuantizerSpec::centered(a.bits),
    }
    .with_clip(a.alpha, a.beta);
    let mse = batch_mse(&x, &spec)?;
    if let Some(out) = &a.out {
        quantlab_core::activations::write_dump(&fake_quantize_batch(&x, &spec)?, out)?;
    }
    println!("mse,{mse}");
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let opts = MetricsOptions {
        bits: a.bits,
        bound_family: a.family.into(),
        theta_ratio: a.theta_ratio,
        bins: a.bins,
        ..Default::default()
    };
    let mut w = csv::Writer::from_writer(sink(&a.out)?);
    let mut header = vec!["file", "token"];
    header.extend(MetricsReport::HEADER);
    w.write_record(&header)?;
    for path in expand(&a.input)? {
        let x = maybe_rotate(read_dump(&path)?, &a.transform)?;
        let name = path.display().to_string();
        let rows: Vec<(String, MetricsReport)> = if a.per_token {
            token_metrics(&x, &opts)?
                .into_iter()
                .enumerate()
                .map(|(i, m)| (i.to_string(), m))
                .collect()
        } else {
            vec![(String::new(), pooled_metrics(std::slice::from_ref(&x), &opts)?)]
        };
        for (token, m) in rows {
            let mut row = vec![name.clone(), token];
            row.extend(m.csv_fields());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bounds(a: BoundsArgs) -> Result<()> {
    let family: Family = a.family.into();
    let kappas = parse_grid(&a.kappa)?;
    let mut w = csv::Writer::from_writer(sink(&a.out)?);
    w.write_record(["bits", "kappa", "tau", "bound", "critical_kappa"])?;
    for &bits in &a.bits {
        let critical = critical_kappa(family, bits)?;
        for &k in &kappas {
            w.write_record([
                bits.to_string(),
                k.to_string(),
                tau_closed_form(family, k)?.to_string(),
                bound_f(family, bits, k)?.to_string(),
                critical.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_weights(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == "weight")
        .ok_or_else(|| Error::format(0, format!("{} has no `weight` column", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: f64 = rec
            .get(col)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::format(i as u64 + 1, format!("bad weight on data row {}", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

fn psot(a: PsotArgs) -> Result<()> {
    let samples = load_all(&a.input)?;
    let total: usize = samples.iter().map(ActivationBatch::n_tokens).sum();
    let weights = match &a.weights {
        Some(p) => read_weights(p)?,
        None => vec![1.0; total],
    };
    let cfg = PsotConfig {
        temperature: a.temperature,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        blocks: a.blocks,
        init: match a.init {
            InitArg::Hadamard => Init::Hadamard,
            InitArg::Random => Init::Random,
        },
        momentum: a.momentum,
        adaptive_cap: !a.no_step_cap,
        seed: a.seed,
        fd_check: a.fd_check,
        ..Default::default()
    };
    let out = train_psot(&samples, &weights, &cfg)?;
    write_transform(&out.transform, &a.out)?;
    if let Some(p) = &a.trace {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["epoch", "loss"])?;
        for (e, l) in out.loss_trace.iter().enumerate() {
            w.write_record([(e + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;
    }
    println!("steps,{}", out.steps);
    println!("final_loss,{}", out.loss_trace.last().copied().unwrap_or(f64::NAN));
    println!("max_orthogonality_error,{:e}", out.max_orthogonality_error);
    if let Some(fd) = out.fd_audit {
        println!("fd_relative_error,{fd:e}");
    }
    Ok(())
}

fn asot(a: AsotArgs) -> Result<()> {
    let samples = load_all(&a.input)?;
    let cfg = AsotConfig {
        grid: parse_grid(&a.grid)?,
        delta: a.delta,
        tau: a.tau,
        gamma: a.gamma,
        m: a.m.unwrap_or(samples.len()),
        outliers_only: a.outliers_only,
    };
    let stats = quantlab_core::activations::channel_stats(&samples)?;
    let result = select_threshold(&samples, &stats, &cfg);
    let curve = match &result {
        Ok(sel) => Some(sel.eta_curve.clone()),
        Err(Error::SelectionFailure { curve }) => Some(curve.clone()),
        Err(_) => None,
    };
    if let (Some(p), Some(curve)) = (&a.curve_out, curve) {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["k", "eta"])?;
        for (k, e) in curve {
            w.write_record([k.to_string(), e.to_string()])?;
        }
        w.flush()?;
    }
    let sel = result?;
    if let Some(p) = &a.weights_out {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["sample", "token", "weight"])?;
        for (i, wt) in sel.weights.iter().enumerate() {
            w.write_record([
                (i / sel.n_tokens).to_string(),
                (i % sel.n_tokens).to_string(),
                wt.to_string(),
            ])?;
        }
        w.flush()?;
    }
    println!("k_star,{}", sel.k_star);
    let sizes: Vec<String> = sel.per_sample_sets.iter().map(|s| s.len().to_string()).collect();
    println!("selected_per_sample,{}", sizes.join(";"));
    Ok(())
}

fn lac(a: LacArgs) -> Result<()> {
    let x = load_one(&a.input)?;
    let dim = x.dim();
    let w = match &a.weights {
        Some(p) => {
            let m = read_dump(p)?;
            if m.n_tokens() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: m.n_tokens(),
                });
            }
            nalgebra::DMatrix::from_row_slice(m.n_tokens(), m.dim(), m.data())
        }
        None => nalgebra::DMatrix::identity(dim, dim),
    };
    let (x, w) = match &a.transform {
        Some(p) => {
            let r = read_transform(p)?;
            let fused = r.to_dense().transpose() * &w;
            (r.apply_batch(&x)?, fused)
        }
        None => (x, w),
    };
    let nonlinearity = match a.nonlinearity {
        NonlinearityArg::Identity => Nonlinearity::Identity,
        NonlinearityArg::Gelu => Nonlinearity::Gelu,
    };
    let block = DeskBlock::new(w, nonlinearity, a.weight_bits)?;
    let cfg = LacConfig {
        grid: a.grid,
        method: match a.fd_steps {
            Some(steps) => LacMethod::FdDescent { steps, lr: a.fd_lr },
            None => LacMethod::GridGolden,
        },
        ..Default::default()
    };
    let out = optimize_clipping(&x, &block, a.bits, &cfg)?;
    let mut w = csv::Writer::from_writer(sink(&a.out)?);
    w.write_record(["alpha", "beta", "mse"])?;
    w.write_record([out.clip.alpha.to_string(), out.clip.beta.to_string(), out.mse.to_string()])?;
    w.flush()?;
    if let Some(p) = &a.trace {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["alpha", "beta", "mse"])?;
        for pt in &out.trace {
            w.write_record([pt.alpha.to_string(), pt.beta.to_string(), pt.mse.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::config(None, format!("--set expects KEY=VALUE, got {s:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(b) = a.bits {
        overrides.push(("bits".into(), b.to_string()));
    }
    if let Some(s) = a.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &a.out {
        overrides.push(("output".into(), o.display().to_string()));
    }
    if let Some(pattern) = &a.input {
        let paths: Vec<String> = expand(pattern)?.iter().map(|p| p.display().to_string()).collect();
        overrides.push(("input.paths".into(), paths.join(",")));
    }
    let cfg = base.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
    let report = run_pipeline(&cfg, a.force)?;
    for s in &report.stages {
        println!("{},quant_mse={},mean_peak={},mean_bn={}", s.name, s.quant_mse, s.mean_peak, s.mean_bn);
    }
    println!("report,{}", cfg.output.join(STAGES_CSV).display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let path = a.run.join(STAGES_CSV);
    let mut r = csv::Reader::from_path(&path)?;
    let wanted = ["stage", "quant_mse", "mean_peak", "mean_bn", "alpha", "beta", "lambda", "kl_direct"];
    let headers = r.headers()?.clone();
    let cols: Vec<usize> = wanted
        .iter()
        .map(|h| {
            headers
                .iter()
                .position(|x| x == *h)
                .ok_or_else(|| Error::format(0, format!("{} lacks column {h}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut rows = vec![wanted.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    for rec in r.records() {
        let rec = rec?;
        rows.push(
            cols.iter()
                .map(|&c| {
                    let v = rec.get(c).unwrap_or("");
                    match v.parse::<f64>() {
                        Ok(x) if c != cols[0] => format!("{x:.6}"),
                        _ => v.to_string(),
                    }
                })
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..wanted.len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = io::stdout().lock();
    for row in &rows {
        let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
        writeln!(out, "{}", line.join("  "))?;
    }
    let summary = a.run.join(SUMMARY_JSON);
    if summary.exists() {
        writeln!(out, "summary: {}", summary.display())?;
    }
    Ok(())
}
