//! `ham`: cost tables, routing traces, threshold sweeps and needle demos.
//!
//! Exit status is 0 on success, 2 for configuration or input errors and 3 for
//! numerical failures.

mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ham_core::analysis::{
    collect_scores, control_stack, gen_niah, niah_layer_config, niah_scores, retentive_weights, seeded_stack,
    stack_controller_config, sweep, synthetic_corpus, tau_grid, trace, write_sweep_csv, ControlSpec, RunManifest,
    SyntheticSpec,
};
use ham_core::cost::{flop_rows, param_rows, report, training_table, ModelRow, TRAIN_T};
use ham_core::io::{stack_from_checkpoint, stack_to_checkpoint, Checkpoint, Corpus};
use ham_core::layer::Block;
use ham_core::{HamError, Result};
use serde::Serialize;

use crate::config::Config;

#[derive(Parser, Debug)]
#[command(name = "ham", version, about = "Hybrid associative memory analysis tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// ham, gdn, transformer, gsa or gsa:K.
    #[arg(long, global = true)]
    family: Option<String>,
    /// Fixed routing threshold for every layer.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Target KV fraction; drives the threshold controller.
    #[arg(long, global = true)]
    target_rho: Option<f64>,
    /// Emit one row per cost-table entry.
    #[arg(long, global = true)]
    itemize: bool,
    /// Sequence length for the cost tables.
    #[arg(long = "T", global = true)]
    t: Option<f64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Parameter, FLOP and memory tables plus the training-compute comparison.
    Cost,
    /// Per-token routing scores, cache growth and gate resets.
    Trace,
    /// Realized KV fraction over a threshold grid, or controller mode.
    Sweep,
    /// Prediction-error spike on synthetic needle sequences.
    Niah,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Cost => "cost",
            Command::Trace => "trace",
            Command::Sweep => "sweep",
            Command::Niah => "niah",
        }
    }
}

fn exit_code(e: &HamError) -> u8 {
    match e {
        HamError::NonFinite { .. } | HamError::NoBracket(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(f) = &cli.family {
        cfg.family = f.clone();
    }
    if cli.tau.is_some() {
        cfg.tau = cli.tau;
    }
    if cli.target_rho.is_some() {
        cfg.target_rho = cli.target_rho;
    }
    if let Some(t) = cli.t {
        cfg.cost_t = t;
    }
    cfg.itemize |= cli.itemize;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut manifest = RunManifest::new(cli.command.name(), cli.config.as_deref(), serde_json::to_value(&cfg)?, cfg.seed);
    let outputs = match cli.command {
        Command::Cost => cmd_cost(&cfg)?,
        Command::Trace => cmd_trace(&cfg)?,
        Command::Sweep => cmd_sweep(&cfg)?,
        Command::Niah => cmd_niah(&cfg)?,
    };
    manifest.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    let path = cfg.out_dir.join("manifest.json");
    manifest.save(&path)?;
    for p in outputs.iter().chain([&path]) {
        println!("{}", p.display());
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainingLine {
    family: String,
    zflops: String,
    relative_pct: String,
    d: f64,
    layers: f64,
    params: f64,
    t_kv: f64,
}

#[derive(Serialize)]
struct ItemLine<'a> {
    kind: &'static str,
    table: &'a str,
    item: &'a str,
    per_layer: f64,
    multiplicity: f64,
    total: f64,
}

impl<'a> ItemLine<'a> {
    fn new(kind: &'static str, r: &'a ModelRow) -> Self {
        Self {
            kind,
            table: &r.table,
            item: &r.item,
            per_layer: r.per_layer,
            multiplicity: r.multiplicity,
            total: r.total,
        }
    }
}

fn cmd_cost(cfg: &Config) -> Result<Vec<PathBuf>> {
    let dir = &cfg.out_dir;
    let arch = cfg.arch()?;
    let t_kv = cfg.cost_t_kv();
    let rep = report(&arch, cfg.cost_t, t_kv, cfg.ranks, cfg.steps as f64, cfg.route)?;
    let table = training_table(cfg.target_rho.unwrap_or(0.5), cfg.route)?;
    let lines: Vec<TrainingLine> = table
        .iter()
        .map(|r| TrainingLine {
            family: r.family.clone(),
            zflops: format!("{:.4}", r.zflops),
            relative_pct: format!("{:.1}", r.relative_pct),
            d: r.d,
            layers: r.layers,
            params: r.params,
            t_kv: r.t_kv,
        })
        .collect();

    let mut out = Vec::new();
    let p = dir.join("training.csv");
    write_rows(&p, &lines)?;
    out.push(p);
    let p = dir.join("report.csv");
    write_rows(&p, std::slice::from_ref(&rep))?;
    out.push(p);

    let mut json = serde_json::json!({
        "report": rep,
        "training": table,
        "training_sequence_length": TRAIN_T,
    });
    if cfg.itemize {
        let params = param_rows(&arch)?;
        let flops = flop_rows(&arch, cfg.cost_t, t_kv)?;
        let items: Vec<ItemLine> = params
            .iter()
            .map(|r| ItemLine::new("params", r))
            .chain(flops.iter().map(|r| ItemLine::new("flops", r)))
            .collect();
        let p = dir.join("itemized.csv");
        write_rows(&p, &items)?;
        out.push(p);
        json["itemized"] = serde_json::json!({ "params": params, "flops": flops });
    }
    let p = dir.join("cost.json");
    write_json(&p, &json)?;
    out.push(p);
    Ok(out)
}

fn with_path(e: HamError, p: &Path) -> HamError {
    match e {
        HamError::Io(io) => HamError::Config(format!("{}: {io}", p.display())),
        other => other,
    }
}

/// Blocks from the configured checkpoint, or freshly seeded ones that are
/// also saved so the run can be replayed.
fn load_model(cfg: &Config, out: &mut Vec<PathBuf>) -> Result<Vec<Block>> {
    match &cfg.checkpoint {
        Some(p) => stack_from_checkpoint(&Checkpoint::load(p).map_err(|e| with_path(e, p))?),
        None => {
            let blocks = seeded_stack(&cfg.layer()?, cfg.num_layers, cfg.seed)?;
            let p = cfg.out_dir.join("model.ckpt");
            stack_to_checkpoint(&blocks)?.save(&p)?;
            out.push(p);
            Ok(blocks)
        }
    }
}

fn load_corpus(cfg: &Config, d: usize, out: &mut Vec<PathBuf>) -> Result<Corpus> {
    let corpus = match &cfg.corpus {
        Some(p) => Corpus::load(p).map_err(|e| with_path(e, p))?,
        None => {
            let c = synthetic_corpus(&SyntheticSpec { d, ..cfg.synthetic() })?;
            let p = cfg.out_dir.join("corpus.bin");
            c.save(&p)?;
            out.push(p);
            c
        }
    };
    if corpus.d != d {
        return Err(HamError::Config(format!("corpus width {} does not match model width {d}", corpus.d)));
    }
    Ok(corpus)
}

fn control_spec(cfg: &Config, d: usize) -> ControlSpec {
    let base = ControlSpec::default();
    ControlSpec {
        steps: cfg.control_steps,
        fine_steps: cfg.control_fine_steps,
        batch: SyntheticSpec { d, t: cfg.seq_len, seed: cfg.seed.wrapping_add(base.batch.seed), ..base.batch },
        heldout: SyntheticSpec { d, t: cfg.seq_len, seed: cfg.seed.wrapping_add(base.heldout.seed), ..base.heldout },
        ..base
    }
}

#[derive(Serialize)]
struct ControlSummary {
    target_rho: f64,
    tau: f64,
    p_tau: f64,
    steps: u64,
    heldout_rho: f64,
}

/// Runs the controller, writes its trace and summary, returns the threshold.
fn run_controller(cfg: &Config, blocks: &[Block], target: f64, out: &mut Vec<PathBuf>) -> Result<f64> {
    let scale = blocks[0].cfg.router.kind.scale();
    let res = control_stack(blocks, stack_controller_config(target, scale), &control_spec(cfg, blocks[0].cfg.d_hidden))?;
    let p = cfg.out_dir.join("controller_trace.csv");
    write_rows(&p, &res.trace)?;
    out.push(p);
    let summary = ControlSummary {
        target_rho: target,
        tau: res.final_state.tau(),
        p_tau: res.final_state.p_tau,
        steps: res.final_state.step,
        heldout_rho: res.heldout_rho,
    };
    let p = cfg.out_dir.join("control.json");
    write_json(&p, &summary)?;
    out.push(p);
    Ok(summary.tau)
}

fn default_tau(blocks: &[Block]) -> f64 {
    blocks[0].cfg.threshold.effective()
}

fn cmd_trace(cfg: &Config) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let blocks = load_model(cfg, &mut out)?;
    if blocks.is_empty() {
        return Err(HamError::Empty("model"));
    }
    let corpus = load_corpus(cfg, blocks[0].cfg.d_hidden, &mut out)?;
    let tau = match (cfg.tau, cfg.target_rho) {
        (Some(t), _) => t,
        (None, Some(r)) => run_controller(cfg, &blocks, r, &mut out)?,
        (None, None) => default_tau(&blocks),
    };
    let tr = trace(&blocks, &corpus, &vec![tau; blocks.len()])?;
    let p = cfg.out_dir.join("trace.csv");
    tr.write_points_csv(create(&p)?)?;
    out.push(p);
    let p = cfg.out_dir.join("alpha_events.csv");
    tr.write_alpha_csv(create(&p)?)?;
    out.push(p);
    Ok(out)
}

fn cmd_sweep(cfg: &Config) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let blocks = load_model(cfg, &mut out)?;
    if blocks.is_empty() {
        return Err(HamError::Empty("model"));
    }
    let corpus = load_corpus(cfg, blocks[0].cfg.d_hidden, &mut out)?;
    if let Some(target) = cfg.target_rho {
        run_controller(cfg, &blocks, target, &mut out)?;
        return Ok(out);
    }
    let reference = cfg.tau.unwrap_or_else(|| default_tau(&blocks));
    let scores = collect_scores(&blocks, &corpus, &vec![reference; blocks.len()])?;
    let scale = blocks.iter().map(|b| b.cfg.router.kind.scale()).fold(0.0, f64::max);
    let mut grid = tau_grid(scale, cfg.grid_points);
    // one point past the top of the score range
    grid.push(1.25 * scale);
    let points = sweep(&scores, &grid)?;
    let p = cfg.out_dir.join("sweep.csv");
    write_sweep_csv(&points, create(&p)?)?;
    out.push(p);
    Ok(out)
}

#[derive(Serialize)]
struct NiahLine {
    seed: u64,
    t: usize,
    token: usize,
    needle: u8,
    score: f64,
}

#[derive(Serialize)]
struct NiahSummary {
    seed: u64,
    needle_mean: f64,
    pattern_p95: f64,
    spike: bool,
}

fn cmd_niah(cfg: &Config) -> Result<Vec<PathBuf>> {
    let base = cfg.niah();
    let layer = niah_layer_config(base.embed_dim);
    let mut lines = Vec::new();
    let mut summaries = Vec::new();
    for s in 0..cfg.niah_seeds.max(1) {
        let spec = ham_core::analysis::NiahSpec { seed: base.seed + s, ..base };
        let niah = gen_niah(&spec)?;
        let w = retentive_weights(&layer, spec.seed.wrapping_add(0x5eed))?;
        let sc = niah_scores(&niah, &spec, &w, &layer)?;
        for (t, score) in sc.scores.iter().enumerate() {
            lines.push(NiahLine {
                seed: spec.seed,
                t,
                token: niah.tokens[t],
                needle: u8::from(niah.needle_mask[t]),
                score: *score,
            });
        }
        summaries.push(NiahSummary {
            seed: spec.seed,
            needle_mean: sc.needle_mean,
            pattern_p95: sc.pattern_p95,
            spike: sc.spike,
        });
    }
    let rate = summaries.iter().filter(|s| s.spike).count() as f64 / summaries.len() as f64;
    let p_csv = cfg.out_dir.join("niah.csv");
    write_rows(&p_csv, &lines)?;
    let p_json = cfg.out_dir.join("niah.json");
    write_json(&p_json, &serde_json::json!({ "spike_rate": rate, "seeds": summaries }))?;
    Ok(vec![p_csv, p_json])
}
