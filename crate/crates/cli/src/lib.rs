//! Subcommands of the `atrl` binary.
//!
//! Configuration resolves in three layers: built-in defaults, then the
//! `key=value` file given by `--config`, then command-line flags. The seed
//! falls back to `ATRL_SEED` when neither the file nor a flag sets it.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use atrl_core::calib::{self, default_top_layers};
use atrl_core::credit::{Engine, WeightingMode};
use atrl_core::numfmt::sig9;
use atrl_core::partitioner;
use atrl_core::pipeline::{run_sequence, PipelineConfig, PipelineError};
use atrl_core::report::{AnchorStats, AssignmentReport, CreditReport, Histogram};
use atrl_core::tensor_io::{load_attention, load_token_meta_for, save_attention, AttentionTensor, TokenMeta};
use atrl_core::token_graph;
use atrl_toy::experiments::{ablate, parse_axis, sweep};
use atrl_toy::train::{parse_seeds, train, TrainConfig, TrainError};

pub const SEED_ENV: &str = "ATRL_SEED";

/// File names written by `analyze` into its output directory.
pub const CREDIT_REPORT_FILE: &str = "credit_report.tsv";
pub const HISTOGRAM_FILE: &str = "connectivity_hist.tsv";

#[derive(Debug, Parser)]
#[command(name = "atrl", version, about = "Attention-calibrated token credit assignment")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key=value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Global seed; falls back to the config file, then ATRL_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// ATN1 attention tensor of one sequence.
    #[arg(long)]
    pub attention: PathBuf,
    /// Token metadata JSON marking the visual context positions.
    #[arg(long)]
    pub meta: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ToyArgs {
    /// grpo, grpo-klfree or reinforce.
    #[arg(long)]
    pub engine: Option<Engine>,
    /// at-rl, uniform, random, reverse or hard.
    #[arg(long)]
    pub mode: Option<WeightingMode>,
    /// Fraction kept by the hard mode.
    #[arg(long)]
    pub hard_p: Option<f64>,
    /// Lower clip range of the ratio.
    #[arg(long)]
    pub eps_low: Option<f64>,
    /// Upper clip range of the ratio.
    #[arg(long)]
    pub eps_high: Option<f64>,
    /// KL penalty coefficient.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Seed list: `a..b` (inclusive), `a,b,c` or a single seed.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Optimizer steps per seed.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full pipeline on one sequence: credit report, connectivity histogram
    /// and anchor fraction.
    Analyze {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Sequence advantage written into the credit report.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        seq_adv: f64,
    },
    /// Aggregate and bias-correct attention; writes an ATN1 matrix.
    Debias {
        #[arg(long)]
        attention: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster the generated tokens of one sequence.
    Partition {
        #[arg(long)]
        attention: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-token credit report for one sequence.
    Credit {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        seq_adv: f64,
    },
    /// Train the toy policy; writes a JSON report.
    TrainToy {
        #[command(flatten)]
        toy: ToyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every weighting mode on shared seeds; writes a comparison table.
    Ablate {
        #[command(flatten)]
        toy: ToyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a grid of configurations; writes deltas against the default.
    Sweep {
        #[command(flatten)]
        toy: ToyArgs,
        /// Grid axis `key=v1,v2,...`; repeatable.
        #[arg(long = "grid", value_name = "KEY=V1,V2")]
        grid: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Errors caused by the inputs exit with 1, violated internal invariants
/// with 2.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        let invariant = match cause.downcast_ref::<PipelineError>() {
            Some(e) => e.is_invariant_violation(),
            None => matches!(
                cause.downcast_ref::<TrainError>(),
                Some(TrainError::Pipeline(e)) if e.is_invariant_violation()
            ),
        };
        if invariant {
            return 2;
        }
    }
    1
}

fn read_config_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))
}

/// Defaults, then the config file, then `--set` overrides and the seed.
pub fn resolve_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seed_from_file = false;
    if let Some(path) = &common.config {
        let text = read_config_file(path)?;
        let extra = cfg
            .pipeline
            .apply_text(&text, TrainConfig::is_key)
            .with_context(|| format!("in config {}", path.display()))?;
        for (k, v) in extra {
            cfg.set(&k, &v)
                .map_err(anyhow::Error::msg)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        seed_from_file = text
            .lines()
            .filter_map(|l| l.split('#').next()?.split_once('='))
            .any(|(k, _)| k.trim() == "seed");
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
        cfg.set(k.trim(), v).map_err(anyhow::Error::msg)?;
    }
    match common.seed {
        Some(s) => cfg.pipeline.seed = s,
        None if !seed_from_file => {
            if let Ok(v) = std::env::var(SEED_ENV) {
                cfg.pipeline.seed = v.trim().parse().with_context(|| format!("bad {SEED_ENV}={v:?}"))?;
            }
        }
        None => {}
    }
    cfg.pipeline.validate()?;
    Ok(cfg)
}

fn apply_toy_args(cfg: &mut TrainConfig, toy: &ToyArgs, seed_given: bool) -> Result<()> {
    if let Some(e) = toy.engine {
        cfg.pipeline.engine = e;
    }
    if let Some(m) = toy.mode {
        cfg.pipeline.mode = m;
    }
    if let Some(s) = toy.steps {
        cfg.steps = s;
    }
    if let Some(lr) = toy.lr {
        cfg.lr = lr;
    }
    if let Some(b) = toy.beta {
        cfg.pipeline.surrogate.beta = b;
    }
    if let Some(p) = toy.hard_p {
        cfg.pipeline.hard_p = p;
    }
    if let Some(e) = toy.eps_low {
        cfg.pipeline.surrogate.eps_low = e;
    }
    if let Some(e) = toy.eps_high {
        cfg.pipeline.surrogate.eps_high = e;
    }
    match &toy.seeds {
        Some(s) => cfg.seeds = parse_seeds(s).map_err(anyhow::Error::msg)?,
        None if seed_given => cfg.seeds = vec![cfg.pipeline.seed],
        None => {}
    }
    cfg.validate()?;
    Ok(())
}

fn load_inputs(inputs: &Inputs) -> Result<(AttentionTensor, TokenMeta)> {
    let tensor = load_attention(&inputs.attention)
        .with_context(|| format!("loading attention {}", inputs.attention.display()))?;
    let meta = load_token_meta_for(&inputs.meta, &tensor)
        .with_context(|| format!("loading token metadata {}", inputs.meta.display()))?;
    Ok((tensor, meta))
}

fn write_report(path: &Path, result: std::result::Result<(), atrl_core::report::ReportError>) -> Result<()> {
    result.with_context(|| format!("writing {}", path.display()))
}

/// Outcome of `analyze`, also printed.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeSummary {
    pub tokens: usize,
    pub clusters: usize,
    pub anchors: AnchorStats,
    pub report: PathBuf,
    pub histogram: PathBuf,
}

pub fn cmd_analyze(cfg: &PipelineConfig, inputs: &Inputs, out_dir: &Path, seq_adv: f64, out: &mut dyn Write) -> Result<AnalyzeSummary> {
    let (tensor, meta) = load_inputs(inputs)?;
    let seq = run_sequence(&tensor, &meta.visual_index_set(), cfg, cfg.seed)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let report_path = out_dir.join(CREDIT_REPORT_FILE);
    let hist_path = out_dir.join(HISTOGRAM_FILE);
    let report = CreditReport::from_sequence(&seq, cfg.mode, seq_adv);
    write_report(&report_path, report.save(&report_path))?;
    let hist = Histogram::compute(seq.connectivity.as_slice(), cfg.hist_bins, cfg.anchor_p);
    write_report(&hist_path, hist.save(&hist_path))?;

    let stats = hist.anchors;
    writeln!(out, "tokens {}", seq.gen_len())?;
    writeln!(out, "clusters {}", seq.clustering.k())?;
    writeln!(out, "threshold {}", sig9(stats.threshold))?;
    writeln!(out, "anchors {}/{}", stats.above, stats.total)?;
    writeln!(out, "anchor fraction {:.3}", stats.fraction())?;
    writeln!(out, "total_ms {}", sig9(seq.timings.total().as_secs_f64() * 1e3))?;
    Ok(AnalyzeSummary {
        tokens: seq.gen_len(),
        clusters: seq.clustering.k(),
        anchors: stats,
        report: report_path,
        histogram: hist_path,
    })
}

fn calibrated(cfg: &PipelineConfig, path: &Path) -> Result<calib::CalibratedMatrix> {
    let tensor = load_attention(path).with_context(|| format!("loading attention {}", path.display()))?;
    let top = cfg.top_layers.unwrap_or_else(|| default_top_layers(tensor.layers()));
    Ok(calib::calibrate(&tensor, top, &cfg.bias, cfg.bias_axis)?)
}

pub fn cmd_debias(cfg: &PipelineConfig, attention: &Path, dest: &Path, out: &mut dyn Write) -> Result<()> {
    let cal = calibrated(cfg, attention)?;
    save_attention(&cal.to_tensor(), dest).with_context(|| format!("writing {}", dest.display()))?;
    writeln!(out, "wrote {} x {} calibrated matrix to {}", cal.gen_len(), cal.ctx_len(), dest.display())?;
    Ok(())
}

pub fn cmd_partition(cfg: &PipelineConfig, attention: &Path, dest: &Path, out: &mut dyn Write) -> Result<AssignmentReport> {
    let cal = calibrated(cfg, attention)?;
    let graph = token_graph::build_graph(&cal, cfg.tau_sim);
    let k = cfg.cluster_count(cal.gen_len());
    let c = partitioner::partition(&graph, k, cfg.eps_bal, cfg.seed)?;
    let report = AssignmentReport {
        k: c.k(),
        edge_cut: c.edge_cut(),
        balance: c.balance(),
        assignment: c.assignment().to_vec(),
    };
    write_report(dest, report.save(dest))?;
    writeln!(out, "k {} edge_cut {} balance {}", report.k, sig9(report.edge_cut), sig9(report.balance))?;
    Ok(report)
}

pub fn cmd_credit(cfg: &PipelineConfig, inputs: &Inputs, dest: &Path, seq_adv: f64, out: &mut dyn Write) -> Result<CreditReport> {
    let (tensor, meta) = load_inputs(inputs)?;
    let seq = run_sequence(&tensor, &meta.visual_index_set(), cfg, cfg.seed)?;
    let report = CreditReport::from_sequence(&seq, cfg.mode, seq_adv);
    write_report(dest, report.save(dest))?;
    writeln!(out, "tokens {} clusters {} mode {}", seq.gen_len(), seq.clustering.k(), cfg.mode)?;
    Ok(report)
}

pub fn cmd_train_toy(cfg: &TrainConfig, dest: &Path, out: &mut dyn Write) -> Result<()> {
    let report = train(cfg)?;
    std::fs::write(dest, report.to_json()).with_context(|| format!("writing {}", dest.display()))?;
    for run in &report.runs {
        let c = &run.curve;
        let stt = c.steps_to_threshold.map_or_else(|| "-".to_string(), |s| s.to_string());
        writeln!(
            out,
            "seed {} mode {} engine {} final_reward {} steps_to_threshold {} anchor_answer_share {}",
            c.seed,
            c.mode,
            c.engine,
            sig9(c.final_reward),
            stt,
            sig9(c.final_anchors.answer_share)
        )?;
        writeln!(out, "  timings_s")?;
        for (stage, secs) in &run.timings {
            writeln!(out, "    {stage} {}", sig9(*secs))?;
        }
        writeln!(out, "  credit_share {}", sig9(run.credit_share))?;
    }
    Ok(())
}

fn write_table(table: &atrl_core::report::Table, dest: &Path, out: &mut dyn Write) -> Result<()> {
    write_report(dest, table.save(dest))?;
    out.write_all(table.to_text().as_bytes())?;
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    let seed_given = cli.common.seed.is_some() || std::env::var(SEED_ENV).is_ok();
    match cli.command {
        Command::Analyze { inputs, out_dir, seq_adv } => {
            cmd_analyze(&cfg.pipeline, &inputs, &out_dir, seq_adv, out)?;
        }
        Command::Debias { attention, out: dest } => cmd_debias(&cfg.pipeline, &attention, &dest, out)?,
        Command::Partition { attention, out: dest } => {
            cmd_partition(&cfg.pipeline, &attention, &dest, out)?;
        }
        Command::Credit { inputs, out: dest, seq_adv } => {
            cmd_credit(&cfg.pipeline, &inputs, &dest, seq_adv, out)?;
        }
        Command::TrainToy { toy, out: dest } => {
            apply_toy_args(&mut cfg, &toy, seed_given)?;
            cmd_train_toy(&cfg, &dest, out)?;
        }
        Command::Ablate { toy, out: dest } => {
            apply_toy_args(&mut cfg, &toy, seed_given)?;
            let (table, _) = ablate(&cfg)?;
            write_table(&table, &dest, out)?;
        }
        Command::Sweep { toy, grid, out: dest } => {
            apply_toy_args(&mut cfg, &toy, seed_given)?;
            let axes = grid
                .iter()
                .map(|g| parse_axis(g).map_err(anyhow::Error::msg))
                .collect::<Result<Vec<_>>>()?;
            if axes.iter().any(|(k, _)| !PipelineConfig::KEYS.contains(&k.as_str()) && !TrainConfig::is_key(k)) {
                bail!("sweep axis names an unknown key");
            }
            let table = sweep(&cfg, &axes)?;
            write_table(&table, &dest, out)?;
        }
    }
    Ok(())
}
