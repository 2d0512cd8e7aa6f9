mod pipeline;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pipecut::blocks::{BlockSet, DEFAULT_K};
use pipecut::graph::{count_params, save_graph};
use pipecut::models::{gen_bert_like, gen_resnet_like};
use pipecut::sim::{render_gantt, simulate, GanttFormat};
use pipecut::stages::{DpOptions, Plan};

use crate::pipeline::{
    block_profiler, make_blocks, plan_stages, prepare, read_cluster, read_cost_model, read_graph, report, Infeasible,
};
use crate::sweep::{Grid, Mode, Model};

#[derive(Parser)]
#[command(name = "pipecut", version, about = "Pipeline-stage partitioning for annotated training graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic model graph.
    Generate(GenerateArgs),
    /// Partition a graph into blocks and pipeline stages.
    Partition(PartitionArgs),
    /// Replay a plan as a pipeline schedule.
    Simulate(SimulateArgs),
    /// Partition and simulate a grid of generated models into a CSV.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gantt {
    Text,
    Svg,
}

#[derive(Args)]
struct CostArgs {
    /// Cost-model settings (JSON); defaults apply when omitted.
    #[arg(long, env = "PIPECUT_COST_CONFIG")]
    cost_config: Option<PathBuf>,
    /// Measured per-signature timings and activation sizes (JSON).
    #[arg(long, env = "PIPECUT_COST_TABLE")]
    cost_table: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, env = "PIPECUT_K", default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, env = "PIPECUT_BATCH_SIZE", default_value_t = 256, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    #[arg(long, env = "PIPECUT_CHECKPOINTING", value_enum, default_value = "on")]
    checkpointing: OnOff,
    /// Search without d_min pruning.
    #[arg(long, env = "PIPECUT_DISABLE_PRUNING")]
    disable_pruning: bool,
}

impl SearchArgs {
    fn options(&self) -> DpOptions {
        DpOptions {
            pruning: !self.disable_pruning,
            checkpointing: matches!(self.checkpointing, OnOff::On),
            budget: None,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(value_enum)]
    model: Model,
    /// Hidden size (bert).
    #[arg(long, default_value_t = 1024)]
    hidden: usize,
    #[arg(long, default_value_t = 24)]
    layers: usize,
    #[arg(long, default_value_t = 512)]
    seq_len: usize,
    #[arg(long, default_value_t = 30522)]
    vocab: usize,
    /// Filter-count multiplier (resnet).
    #[arg(long, default_value_t = 1)]
    width: usize,
    #[arg(long, env = "PIPECUT_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long, env = "PIPECUT_GRAPH")]
    graph: PathBuf,
    #[arg(long, env = "PIPECUT_CLUSTER")]
    cluster: PathBuf,
    #[command(flatten)]
    cost: CostArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Compare the chosen plan with exhaustive search when the instance is small enough.
    #[arg(long, env = "PIPECUT_ORACLE_CHECK")]
    oracle_check: bool,
    /// Output directory for plan.json, blocks.json and report.txt.
    #[arg(long, env = "PIPECUT_OUT", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, env = "PIPECUT_PLAN")]
    plan: PathBuf,
    /// Defaults to blocks.json next to the plan.
    #[arg(long, env = "PIPECUT_BLOCKS")]
    blocks: Option<PathBuf>,
    #[arg(long, env = "PIPECUT_GRAPH")]
    graph: PathBuf,
    #[arg(long, env = "PIPECUT_CLUSTER")]
    cluster: PathBuf,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long, env = "PIPECUT_GANTT", value_enum)]
    gantt: Option<Gantt>,
    /// Directory for the Gantt chart; defaults to the plan's directory.
    #[arg(long, env = "PIPECUT_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "bert")]
    model: Model,
    /// Hidden sizes (bert) or width factors (resnet).
    #[arg(long, value_delimiter = ',', required = true)]
    width: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 512)]
    seq_len: usize,
    #[arg(long, default_value_t = 30522)]
    vocab: usize,
    #[arg(long, env = "PIPECUT_CLUSTER", value_delimiter = ',', required = true)]
    cluster: Vec<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "partitioned")]
    mode: Vec<Mode>,
    #[command(flatten)]
    cost: CostArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// CSV destination; standard output when omitted.
    #[arg(long, env = "PIPECUT_OUT")]
    out: Option<PathBuf>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let g = match a.model {
        Model::Bert => gen_bert_like(a.hidden, a.layers, a.seq_len, a.vocab)?,
        Model::Resnet => gen_resnet_like(a.layers, a.width)?,
    };
    let file = fs::File::create(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    save_graph(&g, std::io::BufWriter::new(file))?;
    let n = count_params(&g, 4).elements;
    println!("{} nodes, {} parameters ({:.3}B)", g.len(), n, n as f64 / 1e9);
    Ok(())
}

fn partition(a: &PartitionArgs) -> Result<()> {
    let g = read_graph(&a.graph)?;
    let cluster = read_cluster(&a.cluster)?;
    let cfg = read_cost_model(a.cost.cost_config.as_deref(), a.cost.cost_table.as_deref())?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let prep = prepare(&g, &cfg)?;
    let mut notes = Vec::new();
    let blocks = make_blocks(&prep, &cluster, a.search.k, &mut notes)?;
    write(&a.out.join("blocks.json"), serde_json::to_string_pretty(&blocks.to_json())?)?;
    let prof = block_profiler(&prep, &blocks);
    let planned = plan_stages(&prof, &cluster, a.search.batch_size, &a.search.options(), a.oracle_check)?;
    write(&a.out.join("plan.json"), serde_json::to_string_pretty(&planned.plan)?)?;
    let text = format!(
        "{} atoms, {} blocks\n{}",
        prep.part.len(),
        blocks.len(),
        report(&planned, &blocks, &cluster, &notes)
    );
    write(&a.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn simulate_cmd(a: &SimulateArgs) -> Result<()> {
    let plan: Plan = serde_json::from_str(&fs::read_to_string(&a.plan).with_context(|| format!("cannot read {}", a.plan.display()))?)
        .with_context(|| format!("bad plan {}", a.plan.display()))?;
    let dir = a.plan.parent().map(Path::to_path_buf).unwrap_or_default();
    let blocks_path = a.blocks.clone().unwrap_or_else(|| dir.join("blocks.json"));
    let g = read_graph(&a.graph)?;
    let cluster = read_cluster(&a.cluster)?;
    let cfg = read_cost_model(a.cost.cost_config.as_deref(), a.cost.cost_table.as_deref())?;
    let prep = prepare(&g, &cfg)?;
    let raw = fs::read_to_string(&blocks_path).with_context(|| format!("cannot read {}", blocks_path.display()))?;
    let blocks = BlockSet::from_json(&prep.part, serde_json::from_str(&raw)?)
        .with_context(|| format!("bad blocks {}", blocks_path.display()))?;
    let prof = block_profiler(&prep, &blocks);
    let sched = simulate(&plan, &prof, &cluster)?;
    println!("iteration_time_sec {:.6e}", sched.iteration_time_sec);
    println!("throughput_samples_per_sec {:.6}", plan.batch_size as f64 / sched.iteration_time_sec);
    println!("bubble_fraction {:.6}", sched.bubble_fraction);
    if let Some(fmt) = a.gantt {
        let out = a.out.clone().unwrap_or(dir);
        fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
        let (name, f) = match fmt {
            Gantt::Text => ("gantt.txt", GanttFormat::Text),
            Gantt::Svg => ("gantt.svg", GanttFormat::Svg),
        };
        let path = out.join(name);
        write(&path, render_gantt(&sched, f))?;
        println!("gantt {}", path.display());
    }
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> Result<ExitCode> {
    let clusters = a.cluster.iter().map(|p| Ok((p.clone(), read_cluster(p)?))).collect::<Result<Vec<_>>>()?;
    let cost = read_cost_model(a.cost.cost_config.as_deref(), a.cost.cost_table.as_deref())?;
    if a.width.contains(&0) || a.layers.contains(&0) {
        bail!("grid sizes must be positive");
    }
    let grid = Grid {
        model: a.model,
        widths: a.width.clone(),
        layers: a.layers.clone(),
        seq_len: a.seq_len,
        vocab: a.vocab,
        clusters,
        modes: a.mode.clone(),
        batch_size: a.search.batch_size,
        k: a.search.k,
        opts: a.search.options(),
        cost,
    };
    let rows = grid.run()?;
    match &a.out {
        Some(p) => {
            let f = fs::File::create(p).with_context(|| format!("cannot write {}", p.display()))?;
            sweep::write_csv(&rows, f)?;
        }
        None => sweep::write_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(if rows.iter().any(|r| r.succeeded()) { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a).map(|_| ExitCode::SUCCESS),
        Command::Partition(a) => partition(a).map(|_| ExitCode::SUCCESS),
        Command::Simulate(a) => simulate_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<Infeasible>().is_some() => {
            eprintln!("pipecut: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("pipecut: {e:#}");
            ExitCode::from(1)
        }
    }
}
