//! Single executable exposing the toolkit: depth colorization, synthetic
//! dataset generation, dataset ingestion, experiment runs, distance sweeps,
//! discrepancy estimation, and result reporting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid usage or config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use shiftbench_core::mkmmd::{
    beta_qp, g_values_per_kernel, mmd_linear, mmd_quadratic_oracle, variance_q, KernelBank,
};
use shiftbench_core::tensor::Tensor;
use shiftbench_depthcolor::{colorize, DepthImage, Method, SnPlusConfig};
use shiftbench_harness::{
    apply_filters, distance_sweep, ingest, prepare, run_experiment, synth_shift_dataset,
    train_algorithm, ExperimentConfig, ResultTable, SynthKind, SynthParams,
};

#[derive(Parser)]
#[command(name = "shiftbench", version, about = "Domain-shift benchmark toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Colorize a 16-bit depth image into a surface-normal RGB image.
    Colorize(ColorizeArgs),
    /// Generate a seeded synthetic source/target dataset pair as CSV.
    Synth(SynthArgs),
    /// Scan a class/instance/frame directory tree into a manifest CSV.
    Ingest(IngestArgs),
    /// Run one experiment config and write its result rows.
    Run(RunArgs),
    /// Evaluate a trained model over nested distance ranges.
    Sweep(SweepArgs),
    /// Estimate the kernel discrepancy between two sample files.
    Mmd(MmdArgs),
    /// Merge result CSVs into a comparison table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Sn,
    SnPlus,
}

#[derive(Args)]
struct ColorizeArgs {
    /// Input 16-bit binary PGM depth image (0 = missing).
    #[arg(long)]
    input: PathBuf,
    /// Output binary PPM.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "sn-plus")]
    method: MethodArg,
    /// Median-fill neighborhood side (odd).
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 3.0)]
    sigma_spatial: f64,
    #[arg(long, default_value_t = 0.05)]
    sigma_range: f64,
    #[arg(long, default_value_t = 1.5)]
    unsharp_amount: f64,
    #[arg(long, default_value_t = 1.0)]
    unsharp_radius: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    MoonsRotate,
    BlobsShift,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Samples per domain.
    #[arg(long, default_value_t = 600)]
    n: usize,
    /// Rotation angle (degrees) or translation magnitude.
    #[arg(long)]
    shift: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory for source.csv and target.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Dataset root laid out as root/<class>/<instance>/<frame>.(ppm|pgm).
    #[arg(long)]
    root: PathBuf,
    /// Manifest CSV path; defaults to stdout summary only.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Drop depth images with a null fraction strictly above this value.
    #[arg(long)]
    null_threshold: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving <name>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate and print the plan without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config JSON (must use an ingested data source).
    #[arg(long)]
    config: PathBuf,
    /// Distance range in millimeters as lo-hi, repeatable; half-open [lo, hi).
    #[arg(long = "range", required = true)]
    ranges: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MmdArgs {
    /// CSV of source samples, one comma-separated row per line.
    #[arg(long)]
    source: PathBuf,
    /// CSV of target samples with the same width.
    #[arg(long)]
    target: PathBuf,
    /// Kernel count; 1 skips the bandwidth fan-out around the median.
    #[arg(long, default_value_t = 5)]
    kernels: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSVs to merge.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// Directory of config JSONs used to label fingerprints.
    #[arg(long)]
    configs: Option<PathBuf>,
}

enum CliError {
    /// Bad flags, unreadable/invalid config: exit 2.
    Usage(String),
    /// Failure while executing a valid request: exit 1.
    Runtime(String),
}

type CliResult = Result<(), CliError>;

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Colorize(a) => cmd_colorize(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Mmd(a) => cmd_mmd(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_colorize(args: &ColorizeArgs) -> CliResult {
    let config = SnPlusConfig {
        window: args.window,
        max_iter: args.max_iter,
        sigma_spatial: args.sigma_spatial,
        sigma_range: args.sigma_range,
        unsharp_amount: args.unsharp_amount,
        unsharp_radius: args.unsharp_radius,
    };
    config.validate().map_err(usage)?;
    let depth = DepthImage::read_pgm(&args.input).map_err(usage)?;
    let method = match args.method {
        MethodArg::Sn => Method::Sn,
        MethodArg::SnPlus => Method::SnPlus,
    };
    let color = colorize(&depth, method, &config).map_err(runtime)?;
    color.write_ppm(&args.output).map_err(runtime)?;
    println!(
        "{} -> {} ({}x{}, fingerprint {:016x})",
        args.input.display(),
        args.output.display(),
        color.width(),
        color.height(),
        color.fingerprint()
    );
    Ok(())
}

fn effective_seed(flag: u64) -> u64 {
    match std::env::var("SHIFTBENCH_SEED") {
        Ok(v) => v.trim().parse().unwrap_or(flag),
        Err(_) => flag,
    }
}

fn cmd_synth(args: &SynthArgs) -> CliResult {
    let params = SynthParams {
        kind: match args.kind {
            KindArg::MoonsRotate => SynthKind::MoonsRotate,
            KindArg::BlobsShift => SynthKind::BlobsShift,
        },
        n: args.n,
        shift: args.shift,
        noise: args.noise,
    };
    let seed = effective_seed(args.seed);
    let pair = synth_shift_dataset(&params, seed).map_err(usage)?;
    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    for (name, set) in [("source", &pair.source), ("target", &pair.target)] {
        let mut csv = String::from("x0,x1,label\n");
        for (r, &y) in set.y.iter().enumerate() {
            let row = set.x.row(r);
            let _ = writeln!(csv, "{},{},{y}", row[0], row[1]);
        }
        std::fs::write(args.out.join(format!("{name}.csv")), csv).map_err(runtime)?;
    }
    println!("wrote {} samples per domain to {} (seed {seed})", args.n, args.out.display());
    Ok(())
}

fn cmd_ingest(args: &IngestArgs) -> CliResult {
    let mut manifest = ingest(&args.root).map_err(usage)?;
    if let Some(t) = args.null_threshold {
        manifest = apply_filters(&manifest, t, None).map_err(runtime)?;
    }
    let mut csv =
        String::from("id,class,instance,rgb_path,depth_path,median_distance_mm,null_fraction\n");
    for r in &manifest.records {
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        };
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.id,
            r.class,
            r.instance,
            path_str(&r.rgb_path),
            path_str(&r.depth_path),
            opt(r.median_distance_mm),
            opt(r.null_fraction)
        );
    }
    if let Some(out) = &args.out {
        std::fs::write(out, csv).map_err(runtime)?;
    }
    println!(
        "{} records across {} classes",
        manifest.len(),
        manifest.classes().len()
    );
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(path).map_err(usage)
}

fn cmd_run(args: &RunArgs) -> CliResult {
    let config = load_config(&args.config)?;
    let fp = config.fingerprint();
    if args.dry_run {
        println!("plan: {}", config.name);
        println!("  algorithm:   {}", config.algorithm.tag());
        println!("  modality:    {:?}", config.modality);
        println!("  epochs:      {}", config.epochs);
        println!("  batch size:  {}", config.batch_size);
        println!("  lr:          {}", config.lr);
        println!("  seed:        {}", config.effective_seed());
        println!("  fingerprint: {fp}");
        return Ok(());
    }
    let table = run_experiment(&config).map_err(runtime)?;
    print!("{}", render_rows(&table));
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(runtime)?;
        let path = out.join(format!("{}.csv", config.name));
        table.save(&path).map_err(runtime)?;
        println!("wrote {}", path.display());
    }
    if table.rows.iter().any(|r| r.metric == "failed") {
        return Err(CliError::Runtime(format!("experiment {} failed", config.name)));
    }
    Ok(())
}

fn render_rows(table: &ResultTable) -> String {
    let mut s = String::new();
    for r in &table.rows {
        let _ = writeln!(s, "{}  {:<32} {:.4}", r.fingerprint, r.metric, r.value);
    }
    s
}

fn cmd_sweep(args: &SweepArgs) -> CliResult {
    let config = load_config(&args.config)?;
    let mut ranges = Vec::new();
    for spec in &args.ranges {
        let (lo, hi) = spec
            .split_once('-')
            .and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)))
            .ok_or_else(|| CliError::Usage(format!("bad range '{spec}', expected lo-hi")))?;
        if hi <= lo {
            return Err(CliError::Usage(format!("empty range '{spec}'")));
        }
        ranges.push((lo, hi));
    }
    let seed = config.effective_seed();
    let data = prepare(&config, seed).map_err(usage)?;
    let distances = data.test_distances.clone().ok_or_else(|| {
        CliError::Usage("distance sweep needs an ingested data source with depth statistics".into())
    })?;
    let (mut model, _) =
        train_algorithm(config.algorithm, &data, &config, seed).map_err(runtime)?;
    let (table, notes) =
        distance_sweep(&mut model, &data.test, &distances, &ranges, &config.fingerprint())
            .map_err(runtime)?;
    for note in &notes {
        eprintln!("note: {note}");
    }
    print!("{}", render_rows(&table));
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(runtime)?;
        let path = out.join(format!("{}-sweep.csv", config.name));
        table.save(&path).map_err(runtime)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<Tensor, CliError> {
    let text = std::fs::read_to_string(path).map_err(usage)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse()).collect();
        let row = row.map_err(|_| {
            CliError::Usage(format!("{}: non-numeric value on line {}", path.display(), i + 1))
        })?;
        rows.push(row);
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Tensor::from_rows(&refs).map_err(usage)
}

fn cmd_mmd(args: &MmdArgs) -> CliResult {
    let source = read_matrix_csv(&args.source)?;
    let target = read_matrix_csv(&args.target)?;
    if source.cols() != target.cols() {
        return Err(CliError::Usage(format!(
            "dimension mismatch: {} vs {} columns",
            source.cols(),
            target.cols()
        )));
    }
    let stacked = Tensor::vcat(&source, &target).map_err(usage)?;
    let mut bank = KernelBank::median_heuristic(&stacked).map_err(runtime)?;
    if args.kernels == 1 {
        // Keep only the median-bandwidth kernel.
        let mid = bank.gammas().len() / 2;
        bank = KernelBank::uniform(vec![bank.gammas()[mid]]).map_err(runtime)?;
    } else if args.kernels != bank.gammas().len() {
        return Err(CliError::Usage(format!(
            "supported kernel counts: 1 or {}",
            bank.gammas().len()
        )));
    }
    // The linear estimator needs equal even counts; trim both sides.
    let n = (source.rows().min(target.rows()) / 2) * 2;
    if n < 4 {
        return Err(CliError::Usage("need at least 4 samples per domain".into()));
    }
    let s = source.slice_rows(0, n);
    let t = target.slice_rows(0, n);
    let linear = mmd_linear(&bank, &s, &t).map_err(runtime)?;
    let quadratic = mmd_quadratic_oracle(&bank, &source, &target).map_err(runtime)?;
    let g = g_values_per_kernel(&bank, &s, &t).map_err(runtime)?;
    let d: Vec<f64> = g
        .iter()
        .map(|gs| 2.0 * gs.iter().sum::<f64>() / (gs.len() as f64 * 2.0))
        .collect();
    let q = variance_q(&g).map_err(runtime)?;
    let (betas, _) = beta_qp(&d, &q, 1e-3).map_err(runtime)?;
    println!("linear estimate:    {linear:.6}");
    println!("quadratic oracle:   {quadratic:.6}");
    println!(
        "optimized weights:  [{}]",
        betas.iter().map(|b| format!("{b:.4}")).collect::<Vec<_>>().join(", ")
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> CliResult {
    let mut merged = ResultTable::default();
    for path in &args.results {
        let table = ResultTable::load(path).map_err(usage)?;
        merged.merge(&table).map_err(runtime)?;
    }
    // Optional fingerprint -> "name (algorithm)" labels from config files.
    let mut labels: Vec<(String, String)> = Vec::new();
    if let Some(dir) = &args.configs {
        for entry in std::fs::read_dir(dir).map_err(usage)? {
            let path = entry.map_err(runtime)?.path();
            if path.extension().is_some_and(|e| e == "json") {
                if let Ok(c) = ExperimentConfig::load(&path) {
                    labels.push((c.fingerprint(), format!("{} ({})", c.name, c.algorithm.tag())));
                }
            }
        }
    }
    print!("{}", render_report(&merged, &labels));
    Ok(())
}

/// Pivot: one row per fingerprint, one column per metric, best value per
/// column marked with '*'.
fn render_report(table: &ResultTable, labels: &[(String, String)]) -> String {
    let mut fps: Vec<&str> = Vec::new();
    let mut metrics: Vec<&str> = Vec::new();
    for r in &table.rows {
        if !fps.contains(&r.fingerprint.as_str()) {
            fps.push(&r.fingerprint);
        }
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    metrics.sort();
    let best: Vec<Option<f64>> = metrics
        .iter()
        .map(|m| {
            fps.iter()
                .filter_map(|fp| table.get(fp, m))
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        })
        .collect();
    let label = |fp: &str| -> String {
        labels
            .iter()
            .find(|(k, _)| k == fp)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| fp.to_string())
    };
    let name_w = fps.iter().map(|fp| label(fp).len()).max().unwrap_or(3).max(3);
    let mut s = format!("{:<name_w$}", "run");
    for m in &metrics {
        let _ = write!(s, "  {m:>24}");
    }
    s.push('\n');
    for fp in &fps {
        let _ = write!(s, "{:<name_w$}", label(fp));
        for (m, best) in metrics.iter().zip(&best) {
            match table.get(fp, m) {
                Some(v) => {
                    let mark = if Some(v) == *best { "*" } else { " " };
                    let _ = write!(s, "  {:>23}{mark}", format!("{v:.4}"));
                }
                None => {
                    let _ = write!(s, "  {:>24}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}
