//! `muesli` — operator surface for the tabular regularized-policy-optimization
//! laboratory: training runs, analytic verifiers, exact oracle queries, and
//! parameter sweeps.
//!
//! Exit codes: 0 success, 1 verification or run failure, 2 usage/config error.

mod config;

use clap::{Args, Parser, Subcommand};
use config::RunConfigFile;
use muesli_core::env::TabularMDP;
use muesli_core::oracle::{evaluate, obs_q, obs_v};
use muesli_core::trainer::{MetricsRow, Trainer, TrainerError};
use muesli_core::verify::{
    bound_battery, gradient_battery, lemma_battery, theorem_grid, THEOREM_CLIP_GRID,
};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, or input files (exit 2).
    Usage(String),
    /// A run or verification failed (exit 1).
    Failure(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => write!(f, "{m}"),
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> CliError {
        match e {
            TrainerError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Failure(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "muesli",
    version,
    about = "Tabular laboratory for the Muesli update family: exact MDP oracles, \
             regularized policy optimization, and analytic verifiers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy and write metrics.csv, summary.toml, and checkpoint.bin.
    Run(RunArgs),
    /// Numerically re-check the analytic results.
    Verify {
        #[command(subcommand)]
        what: VerifyCmd,
    },
    /// Print exact v, q, visitation, and J for an MDP file and a policy file.
    Oracle(OracleArgs),
    /// Run a grid of configurations and aggregate their summaries.
    Sweep(SweepArgs),
    /// Print the default run configuration as TOML.
    PrintConfig,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration (defaults are used when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $MUESLI_OUT_DIR or ./muesli-out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run. The config must
    /// match the one the checkpoint was created with; raise total_steps to
    /// train further.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress per-row progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Maximum TV of the clipped-advantage target vs tanh(c/2).
    Theorem {
        /// Clip thresholds (repeatable; defaults to 0.1, 0.5, 1, 2).
        #[arg(long = "c")]
        c: Vec<f64>,
    },
    /// Performance-difference identity on seeded random MDPs.
    Lemma {
        #[arg(long, default_value_t = 100)]
        seeds: usize,
    },
    /// Trust-region improvement lower bound on seeded random MDPs.
    Bound {
        #[arg(long, default_value_t = 100)]
        seeds: usize,
    },
    /// Finite-difference checks of every hand-derived gradient.
    Gradients {
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
}

#[derive(Args)]
struct OracleArgs {
    /// MDP in the line-based text format (see README).
    #[arg(long)]
    mdp: PathBuf,
    /// Policy file: one "obs p0 p1 ..." line per observation.
    #[arg(long)]
    policy: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Base TOML configuration for every cell.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $MUESLI_OUT_DIR or ./muesli-out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Regularizer-strength grid (comma-separated).
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    /// Reward-scale grid (comma-separated).
    #[arg(long, value_delimiter = ',')]
    scale: Vec<f64>,
    /// Variant grid (comma-separated).
    #[arg(long, value_delimiter = ',')]
    variant: Vec<String>,
    /// Seed grid (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Run cells as this many concurrent child processes (0 = in-process,
    /// sequential; artifacts are identical).
    #[arg(long, default_value_t = 0)]
    processes: usize,
}

/// Per-run results file, also read back by `sweep` to build its aggregate.
#[derive(Debug, Serialize, Deserialize)]
struct SummaryFile {
    variant: String,
    seed: u64,
    steps: u64,
    final_j: f64,
    tv_max_overall: f64,
    /// Argmax action per observation.
    greedy: Vec<usize>,
    /// Final policy rows per observation.
    policy: Vec<Vec<f64>>,
    lambda_cmpo: f64,
    reward_scale: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Verify { what } => cmd_verify(what),
        Cmd::Oracle(args) => cmd_oracle(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::PrintConfig => {
            print!("{}", RunConfigFile::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfigFile, CliError> {
    match path {
        None => Ok(RunConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            RunConfigFile::parse(&text)
        }
    }
}

fn resolve_out_dir(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag
        .or_else(|| std::env::var_os("MUESLI_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("muesli-out"));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Execute one training run into `out_dir`; shared by `run` and in-process
/// sweep cells.
fn run_to_dir(
    file_cfg: &RunConfigFile,
    seed_override: Option<u64>,
    out_dir: &Path,
    resume: Option<&Path>,
    quiet: bool,
) -> Result<SummaryFile, CliError> {
    let mut cfg = file_cfg.train_config()?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    let mdp: TabularMDP = file_cfg.build_mdp()?;
    let mut trainer = match resume {
        Some(path) => {
            let bytes = fs::read(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            Trainer::resume(mdp, cfg.clone(), &bytes[..])?
        }
        None => Trainer::new(mdp, cfg.clone())?,
    };
    if !quiet {
        println!("{}", MetricsRow::csv_header());
    }
    let result = trainer.run(|row| {
        if !quiet {
            println!("{}", row.to_csv());
        }
    })?;

    let mut csv = String::from(MetricsRow::csv_header());
    csv.push('\n');
    for row in &result.metrics {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    fs::write(out_dir.join("metrics.csv"), csv)?;

    let mut chk = fs::File::create(out_dir.join("checkpoint.bin"))?;
    trainer.save_checkpoint(&mut chk)?;
    chk.flush()?;

    let summary = SummaryFile {
        variant: file_cfg.train.variant.clone(),
        seed: cfg.seed,
        steps: result.summary.steps,
        final_j: result.summary.final_j,
        tv_max_overall: result.summary.tv_max_overall,
        greedy: result.summary.greedy.clone(),
        policy: result.summary.final_policy.clone(),
        lambda_cmpo: cfg.update.lambda_cmpo,
        reward_scale: file_cfg.mdp.reward_scale,
    };
    let text = toml::to_string_pretty(&summary)
        .map_err(|e| CliError::Failure(format!("summary serialization: {e}")))?;
    fs::write(out_dir.join("summary.toml"), text)?;
    if !quiet {
        println!(
            "final J {:.6}, TV max {:.6}, greedy {:?} -> {}",
            summary.final_j,
            summary.tv_max_overall,
            summary.greedy,
            out_dir.display()
        );
    }
    Ok(summary)
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let file_cfg = load_config(&args.config)?;
    let out_dir = resolve_out_dir(args.out_dir)?;
    run_to_dir(&file_cfg, args.seed, &out_dir, args.resume.as_deref(), args.quiet)?;
    Ok(())
}

fn cmd_verify(what: VerifyCmd) -> Result<(), CliError> {
    let pass = match what {
        VerifyCmd::Theorem { c } => {
            let clips = if c.is_empty() { THEOREM_CLIP_GRID.to_vec() } else { c };
            for &clip in &clips {
                if !(clip > 0.0) {
                    return Err(CliError::Usage(format!(
                        "clip thresholds must be positive, got {clip}"
                    )));
                }
            }
            let grid = theorem_grid(&clips);
            println!("max TV of the clipped-advantage target vs analytic tanh(c/2):");
            for r in &grid.reports {
                println!(
                    "  c={:<5} numeric {:.9} analytic {:.9} |d|={:.2e}  argmax {:.7} vs {:.7} |d|={:.2e}  {}",
                    r.clip,
                    r.numeric_max,
                    r.analytic_max,
                    r.max_err,
                    r.numeric_argmax,
                    r.analytic_argmax,
                    r.argmax_err,
                    verdict(r.pass)
                );
            }
            grid.pass
        }
        VerifyCmd::Lemma { seeds } => {
            let b = lemma_battery(seeds, 1e-8, 0).map_err(|e| CliError::Failure(e.to_string()))?;
            println!(
                "performance-difference identity: {}/{} instances within {:.0e} (max gap {:.2e})  {}",
                b.instances - b.failures,
                b.instances,
                b.tolerance,
                b.max_abs_gap,
                verdict(b.pass)
            );
            b.pass
        }
        VerifyCmd::Bound { seeds } => {
            let b = bound_battery(seeds, 0).map_err(|e| CliError::Failure(e.to_string()))?;
            println!(
                "trust-region lower bound: {} violations in {} instances (min slack {:.3e})  {}",
                b.violations,
                b.instances,
                b.min_slack,
                verdict(b.pass)
            );
            b.pass
        }
        VerifyCmd::Gradients { points } => {
            if points == 0 {
                return Err(CliError::Usage("--points must be positive".to_string()));
            }
            let reports = gradient_battery(points, 1e-4, 2024);
            println!("finite-difference checks ({points} points per loss, tolerance 1e-4):");
            let mut all = true;
            for r in &reports {
                all &= r.pass;
                println!(
                    "  {:<22} max rel error {:.3e}  {}",
                    r.loss,
                    r.max_rel_error,
                    verdict(r.pass)
                );
            }
            all
        }
    };
    if pass {
        println!("overall: PASS");
        Ok(())
    } else {
        Err(CliError::Failure("verification failed".to_string()))
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Parse "obs p0 p1 ..." lines into per-observation policy rows.
fn parse_policy_file(text: &str, num_obs: usize, num_actions: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; num_obs];
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let err = |m: String| CliError::Usage(format!("policy line {}: {m}", lineno + 1));
        let obs: usize = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|_| err("expected an observation index".to_string()))?;
        if obs >= num_obs {
            return Err(err(format!("observation {obs} out of range (MDP has {num_obs})")));
        }
        let probs: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| err("expected probabilities".to_string()))?;
        if probs.len() != num_actions {
            return Err(err(format!(
                "expected {num_actions} probabilities, got {}",
                probs.len()
            )));
        }
        if rows[obs].replace(probs).is_some() {
            return Err(err(format!("duplicate row for observation {obs}")));
        }
    }
    rows.into_iter()
        .enumerate()
        .map(|(o, row)| {
            row.ok_or_else(|| CliError::Usage(format!("policy file is missing observation {o}")))
        })
        .collect()
}

fn cmd_oracle(args: OracleArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.mdp)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", args.mdp.display())))?;
    let mdp = muesli_core::env::parse_mdp(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.mdp.display())))?;
    let ptext = fs::read_to_string(&args.policy)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", args.policy.display())))?;
    let per_obs = parse_policy_file(&ptext, mdp.num_obs(), mdp.num_actions())?;
    let per_state = mdp
        .expand_policy(&per_obs)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let eval = evaluate(&mdp, &per_state).map_err(|e| CliError::Failure(e.to_string()))?;

    println!("state  obs  v            d            occupancy    q(a0) q(a1) ...");
    for s in 0..mdp.num_states() {
        let q: Vec<String> = eval.q[s].iter().map(|x| format!("{x:.6}")).collect();
        println!(
            "{:<6} {:<4} {:<12.6} {:<12.6} {:<12.6} {}",
            s,
            mdp.obs(s),
            eval.v[s],
            eval.d[s],
            eval.occupancy[s],
            q.join(" ")
        );
    }
    let ov = obs_v(&mdp, &eval);
    let oq = obs_q(&mdp, &eval);
    println!("\nobs    v_obs        q_obs(a0) q_obs(a1) ...");
    for o in 0..mdp.num_obs() {
        let q: Vec<String> = oq[o].iter().map(|x| format!("{x:.6}")).collect();
        println!("{:<6} {:<12.6} {}", o, ov[o], q.join(" "));
    }
    println!("\nJ = {:.9}", eval.j);
    Ok(())
}

/// One sweep cell: the base config with a grid point applied.
struct Cell {
    name: String,
    cfg: RunConfigFile,
    seed: Option<u64>,
}

fn build_cells(base: &RunConfigFile, args: &SweepArgs) -> Result<Vec<Cell>, CliError> {
    // Cells are the cartesian product of the provided axes; no axes means an
    // empty sweep (aggregate with zero rows).
    let axes_given =
        !(args.lambda.is_empty() && args.scale.is_empty() && args.variant.is_empty() && args.seed.is_empty());
    if !axes_given {
        return Ok(Vec::new());
    }
    let one = |v: Vec<String>| if v.is_empty() { vec![None] } else { v.into_iter().map(Some).collect::<Vec<_>>() };
    let variants = one(args.variant.clone());
    let lambdas: Vec<Option<f64>> =
        if args.lambda.is_empty() { vec![None] } else { args.lambda.iter().copied().map(Some).collect() };
    let scales: Vec<Option<f64>> =
        if args.scale.is_empty() { vec![None] } else { args.scale.iter().copied().map(Some).collect() };
    let seeds: Vec<Option<u64>> =
        if args.seed.is_empty() { vec![None] } else { args.seed.iter().copied().map(Some).collect() };

    let mut cells = Vec::new();
    for variant in &variants {
        for lambda in &lambdas {
            for scale in &scales {
                for seed in &seeds {
                    let mut cfg = base.clone();
                    let mut name_parts = Vec::new();
                    if let Some(v) = variant {
                        cfg.train.variant = v.clone();
                        name_parts.push(format!("v_{v}"));
                    }
                    if let Some(l) = lambda {
                        cfg.update.lambda_cmpo = *l;
                        name_parts.push(format!("lambda_{l}"));
                    }
                    if let Some(s) = scale {
                        cfg.mdp.reward_scale = *s;
                        name_parts.push(format!("scale_{s}"));
                    }
                    if let Some(s) = seed {
                        cfg.train.seed = *s;
                        name_parts.push(format!("seed_{s}"));
                    }
                    // Validate the cell's variant early so a typo in --variant
                    // is a usage error before anything runs.
                    cfg.variant()?;
                    cells.push(Cell { name: name_parts.join("_"), cfg, seed: *seed });
                }
            }
        }
    }
    Ok(cells)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let base = load_config(&args.config)?;
    let out_dir = resolve_out_dir(args.out_dir.clone())?;
    let cells = build_cells(&base, &args)?;

    let mut rows: Vec<String> = Vec::new();
    let mut any_failed = false;

    if args.processes == 0 {
        for cell in &cells {
            let cell_dir = out_dir.join("cells").join(&cell.name);
            fs::create_dir_all(&cell_dir)?;
            fs::write(cell_dir.join("cell.toml"), cell.cfg.to_toml())?;
            match run_to_dir(&cell.cfg, cell.seed, &cell_dir, None, true) {
                Ok(s) => rows.push(aggregate_row(&cell.name, "ok", &s)),
                Err(e) => {
                    eprintln!("cell {}: {e}", cell.name);
                    any_failed = true;
                    rows.push(format!("{},error,,,,,,", cell.name));
                }
            }
            println!("cell {} done", cell.name);
        }
    } else {
        // Child-process mode: every cell is an independent `muesli run`.
        let exe = std::env::current_exe().map_err(|e| CliError::Failure(e.to_string()))?;
        let mut pending: Vec<(usize, std::process::Child)> = Vec::new();
        let mut statuses = vec![None::<bool>; cells.len()];
        let mut next = 0;
        while next < cells.len() || !pending.is_empty() {
            while next < cells.len() && pending.len() < args.processes {
                let cell = &cells[next];
                let cell_dir = out_dir.join("cells").join(&cell.name);
                fs::create_dir_all(&cell_dir)?;
                let cfg_path = cell_dir.join("cell.toml");
                fs::write(&cfg_path, cell.cfg.to_toml())?;
                let mut cmd = std::process::Command::new(&exe);
                cmd.arg("run")
                    .arg("--config")
                    .arg(&cfg_path)
                    .arg("--out-dir")
                    .arg(&cell_dir)
                    .arg("--quiet");
                if let Some(seed) = cell.seed {
                    cmd.arg("--seed").arg(seed.to_string());
                }
                let child = cmd.spawn().map_err(|e| CliError::Failure(e.to_string()))?;
                pending.push((next, child));
                next += 1;
            }
            if let Some((idx, mut child)) = pending.pop() {
                let status = child.wait().map_err(|e| CliError::Failure(e.to_string()))?;
                statuses[idx] = Some(status.success());
                println!("cell {} done", cells[idx].name);
            }
        }
        for (cell, status) in cells.iter().zip(statuses) {
            let ok = status.unwrap_or(false);
            let cell_dir = out_dir.join("cells").join(&cell.name);
            if ok {
                let text = fs::read_to_string(cell_dir.join("summary.toml"))?;
                let s: SummaryFile = toml::from_str(&text)
                    .map_err(|e| CliError::Failure(format!("cell {}: {e}", cell.name)))?;
                rows.push(aggregate_row(&cell.name, "ok", &s));
            } else {
                any_failed = true;
                rows.push(format!("{},error,,,,,,", cell.name));
            }
        }
    }

    let mut csv = String::from(
        "cell,status,variant,lambda_cmpo,reward_scale,seed,final_j,tv_max,greedy\n",
    );
    for row in &rows {
        csv.push_str(row);
        csv.push('\n');
    }
    fs::write(out_dir.join("sweep.csv"), csv)?;
    println!("sweep aggregate: {} cells -> {}", cells.len(), out_dir.join("sweep.csv").display());
    if any_failed {
        Err(CliError::Failure("one or more sweep cells failed".to_string()))
    } else {
        Ok(())
    }
}

fn aggregate_row(name: &str, status: &str, s: &SummaryFile) -> String {
    let greedy: Vec<String> = s.greedy.iter().map(|a| a.to_string()).collect();
    format!(
        "{name},{status},{},{},{},{},{},{},{}",
        s.variant,
        s.lambda_cmpo,
        s.reward_scale,
        s.seed,
        s.final_j,
        s.tv_max_overall,
        greedy.join(";")
    )
}
