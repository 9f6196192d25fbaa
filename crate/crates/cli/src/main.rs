use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use superlab::bessel::{besq_hits_zero_exact, lemma23_bound_check, simulate_besq, zero_gap_closed, zero_gap_nested, zero_gap_reduced};
use superlab::branching::Label;
use superlab::decomposition::coupled_simulate;
use superlab::dirichlet_kernel::{check_lemma34, check_lemma35, check_lemma36, BoundReport, KernelBoundParams, Lemma35Params};
use superlab::experiments::{run_theorem11, run_theorem12, simulate_total_mass, ExperimentConfig, RunRecord, Summary};
use superlab::moments::{check_delta0, check_vn_envelopes, moments_of, v_all_extrapolated, FullSpaceOracle, MomentRow};
use superlab::rng::{run_replicas, stream};
use superlab::stats::proportion;
use superlab::{LabError, Result};

/// Bumped whenever a CSV column layout changes.
const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "superlab", version, about = "Stable superprocess simulation and verification pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key=value configuration file (`#` comments allowed).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $SUPERLAB_OUT or ./superlab-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set alpha=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    replicas: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replica parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Total mass of the branching particle system at ten grid times.
    Simulate,
    /// Moment recursion for the constant test function and envelope ratios.
    VerifyMoments,
    /// Sup ratios of the killed-kernel bounds under refinement.
    VerifyKernels,
    /// Zero-gap probabilities, hit fractions and a zero-set sample.
    Bessel,
    /// Coupled V/W decomposition of the particle system.
    Decompose,
    /// Split-mass pipeline with support-collapse detection.
    ExceptionalTimes,
    /// Stopping-time pipeline near extinction.
    NearExtinction,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::VerifyMoments => "verify-moments",
            Command::VerifyKernels => "verify-kernels",
            Command::Bessel => "bessel",
            Command::Decompose => "decompose",
            Command::ExceptionalTimes => "exceptional-times",
            Command::NearExtinction => "near-extinction",
        }
    }
}

/// Names of the files written by a command.
type Outputs = Vec<String>;

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| LabError::Parse(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for pair in &cli.overrides {
        cfg.apply_pair(pair)?;
    }
    if let Some(n) = cli.replicas {
        cfg.n_replicas = n;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn header_of(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).ok().and_then(|s| s.lines().next().map(str::to_string)).unwrap_or_default()
}

fn write_manifest(dir: &Path, command: Command, cfg: &ExperimentConfig, outputs: &[String]) -> Result<()> {
    let mut f = create(dir, "manifest.txt")?;
    writeln!(f, "command={}", command.name())?;
    writeln!(f, "schema_version={SCHEMA_VERSION}")?;
    writeln!(f, "config_hash={}", cfg.hash())?;
    writeln!(f, "seed={}", cfg.seed)?;
    writeln!(f, "[config]")?;
    write!(f, "{}", cfg.to_text())?;
    writeln!(f, "[outputs]")?;
    for name in outputs {
        writeln!(f, "{name}: {}", header_of(dir, name))?;
    }
    f.flush()?;
    Ok(())
}

fn run_simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<Outputs> {
    let times: Vec<f64> = (0..=10).map(|k| cfg.horizon * k as f64 / 10.0).collect();
    let rows = simulate_total_mass(cfg, &times)?;
    let mut w = csv::Writer::from_writer(create(dir, "total_mass.csv")?);
    w.write_record(["replica", "time", "mass"])?;
    for (i, t, m) in &rows {
        w.write_record([i.to_string(), t.to_string(), m.to_string()])?;
    }
    w.flush()?;
    let mut out = vec![];
    for &t in &times[1..] {
        let alive = rows.iter().filter(|r| r.1 == t && r.2 > 0.0).count();
        let (p, se) = proportion(alive, cfg.n_replicas);
        out.push(format!("t={t} survival={p:.4} se={se:.4}"));
    }
    eprintln!("{}", out.join("\n"));
    Ok(vec!["total_mass.csv".into()])
}

fn run_verify_moments(cfg: &ExperimentConfig, dir: &Path) -> Result<Outputs> {
    check_delta0(cfg.alpha, cfg.delta0)?;
    let law = cfg.law()?;
    let oracle = FullSpaceOracle::new(law, 8.0, 9);
    let ones = vec![1.0; 512];
    let sol = v_all_extrapolated(&ones, &oracle, cfg.s, 16, 1.0, 4)?;
    let table = moments_of(&[(0.0, cfg.m0)], "one", &sol, &oracle);
    let rows: Vec<MomentRow> = (0..4)
        .map(|n| MomentRow {
            s: cfg.s,
            phi_id: "one".into(),
            order: n + 1,
            recursion_value: table.raw[n],
            mc_value: None,
            mc_stderr: None,
        })
        .collect();
    MomentRow::write_csv(&rows, create(dir, "moments.csv")?)?;
    let s_grid = [0.5 * cfg.s, cfg.s];
    let reports = check_vn_envelopes(cfg.big_r, &law, &s_grid, cfg.delta0, 4, cfg.levels)?;
    BoundReport::write_csv(&reports, create(dir, "envelopes.csv")?)?;
    for r in &reports {
        eprintln!("{} sup_ratio={:.4e} divergent={}", r.lemma_id, r.sup_ratio, r.divergent);
    }
    Ok(vec!["moments.csv".into(), "envelopes.csv".into()])
}

fn run_verify_kernels(cfg: &ExperimentConfig, dir: &Path) -> Result<Outputs> {
    let law = cfg.law()?;
    let mut params = KernelBoundParams::standard(law, cfg.big_r);
    params.levels = cfg.levels.max(2);
    let mut reports = vec![];
    if cfg.gamma > 0.0 {
        reports.push(check_lemma34(cfg.gamma, &params)?);
    }
    reports.push(check_lemma36(cfg.gamma, cfg.rho, &params)?);
    let lp = Lemma35Params {
        law,
        radius: cfg.big_r,
        s_grid: vec![0.05, 0.2],
        x_grid: [0.0, 0.5, 0.9].iter().map(|f| f * cfg.big_r).collect(),
        n_paths: 2000,
        substeps: vec![10, 40],
        seed: cfg.seed,
    };
    reports.push(check_lemma35(&lp)?);
    for r in &reports {
        eprintln!("{} sup_ratio={:.4e} divergent={}", r.lemma_id, r.sup_ratio, r.divergent);
    }
    BoundReport::write_csv(&reports, create(dir, "bounds.csv")?)?;
    Ok(vec!["bounds.csv".into()])
}

fn run_bessel(cfg: &ExperimentConfig, dir: &Path) -> Result<Outputs> {
    let (a, b, d) = (cfg.a, cfg.b, cfg.delta);
    let nested = zero_gap_nested(a, b, d)?;
    let reduced = zero_gap_reduced(a, b, d)?;
    let closed = zero_gap_closed(a, b, d);
    let hits = run_replicas(cfg.n_replicas, cfg.seed, |_, rng| besq_hits_zero_exact(d, a, b, 8, rng));
    let (p, se) = proportion(hits.iter().filter(|&&h| h).count(), hits.len());
    let mut w = csv::Writer::from_writer(create(dir, "zero_gap.csv")?);
    w.write_record(["delta", "a", "b", "nested", "reduced", "closed", "hit_fraction", "hit_se", "paths"])?;
    w.write_record([d, a, b, nested, reduced, closed, p, se].map(|v| v.to_string()).into_iter().chain([hits.len().to_string()]))?;
    w.flush()?;
    eprintln!("zero-gap miss probability {reduced:.6}, hit fraction {p:.4} ± {se:.4} (expected {:.4})", 1.0 - reduced);
    let report = lemma23_bound_check(d, cfg.levels)?;
    BoundReport::write_csv(&[report], create(dir, "zero_gap_bound.csv")?)?;
    let (_, zeros) = simulate_besq(d, 1.0, cfg.dt, &mut stream(cfg.seed, u64::MAX))?;
    zeros.write_csv(create(dir, "zero_set.csv")?)?;
    Ok(vec![
        "zero_gap.csv".into(),
        "zero_gap_bound.csv".into(),
        "zero_set.csv".into(),
    ])
}

fn run_decompose(cfg: &ExperimentConfig, dir: &Path) -> Result<Outputs> {
    let law = cfg.law()?;
    let x0 = cfg.initial_population(Label::V, Label::V);
    let trajs = run_replicas(cfg.n_replicas, cfg.seed, |_, rng| coupled_simulate(&x0, &law, cfg.big_r, cfg.horizon, cfg.dt, rng))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    trajs[0].write_csv(create(dir, "trajectory.csv")?)?;
    let mut w = csv::Writer::from_writer(create(dir, "decomposition.csv")?);
    w.write_record(["replica", "final_v_mass", "final_w_mass", "relabeled_mass", "extinction_time"])?;
    for (i, t) in trajs.iter().enumerate() {
        let last = t.times.len() - 1;
        let relabeled: usize = t.relabeled.iter().sum();
        w.write_record([
            i.to_string(),
            t.v_mass(last).to_string(),
            t.w_mass(last).to_string(),
            (relabeled as f64 * t.mass_unit).to_string(),
            t.extinction_time().map(|z| z.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(vec!["trajectory.csv".into(), "decomposition.csv".into()])
}

fn write_pipeline(summary: Summary, dir: &Path) -> Result<Outputs> {
    eprintln!(
        "epsilon={} split={:.4}±{:.4} (bound {:.4}) detection={:.4}±{:.4} excluded={}",
        summary.epsilon, summary.split.p, summary.split.se, summary.split_bound, summary.detection.p, summary.detection.se, summary.excluded
    );
    RunRecord::write_csv(&summary.records, create(dir, "records.csv")?)?;
    Summary::write_csv(&[summary], create(dir, "summary.csv")?)?;
    Ok(vec!["records.csv".into(), "summary.csv".into()])
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| LabError::Input(format!("thread pool: {e}")))?;
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("SUPERLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("superlab-out"));
    fs::create_dir_all(&dir)?;
    eprintln!("{}: config {} -> {}", cli.command.name(), cfg.hash(), dir.display());
    let outputs = match cli.command {
        Command::Simulate => run_simulate(&cfg, &dir),
        Command::VerifyMoments => run_verify_moments(&cfg, &dir),
        Command::VerifyKernels => run_verify_kernels(&cfg, &dir),
        Command::Bessel => run_bessel(&cfg, &dir),
        Command::Decompose => run_decompose(&cfg, &dir),
        Command::ExceptionalTimes => run_theorem11(&cfg).and_then(|s| write_pipeline(s, &dir)),
        Command::NearExtinction => run_theorem12(&cfg).and_then(|s| write_pipeline(s, &dir)),
    };
    // the manifest is written even when the pipeline fails
    let names: Vec<String> = outputs.as_ref().cloned().unwrap_or_default();
    write_manifest(&dir, cli.command, &cfg, &names)?;
    outputs.map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
