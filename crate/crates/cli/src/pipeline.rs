use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pipecut::atomic::{build_atomic_subcomponents, AtomicPartition};
use pipecut::blocks::{partition_blocks, BlockContext, BlockError, BlockSet};
use pipecut::cost::{load_cost_table, AtomCosts};
use pipecut::graph::{load_graph, validate_graph};
use pipecut::sim::{simulate, Schedule};
use pipecut::stages::{
    brute_force_partition, form_stage, form_stage_dp, validate_plan, BlockProfiler, DpArgs, DpOptions, Plan,
    StageError, StageProfiler, BRUTE_FORCE_MAX_BLOCKS, BRUTE_FORCE_MAX_DEVICES,
};
use pipecut::{ClusterSpec, CostModel, CostModelConfig, TaskGraph};

/// A run that finished without input errors but found no plan.
#[derive(Debug)]
pub struct Infeasible(pub String);

impl std::fmt::Display for Infeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "infeasible: {}", self.0)
    }
}

impl std::error::Error for Infeasible {}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

pub fn read_graph(path: &Path) -> Result<TaskGraph> {
    let g = load_graph(open(path)?).with_context(|| format!("bad graph {}", path.display()))?;
    let bad = validate_graph(&g);
    if !bad.is_empty() {
        let msg: Vec<String> = bad.iter().map(|v| v.to_string()).collect();
        bail!("invalid graph {}: {}", path.display(), msg.join("; "));
    }
    Ok(g)
}

pub fn read_cluster(path: &Path) -> Result<ClusterSpec> {
    ClusterSpec::load(open(path)?).with_context(|| format!("bad cluster {}", path.display()))
}

pub fn read_cost_model(config: Option<&Path>, table: Option<&Path>) -> Result<CostModelConfig> {
    let mut cfg = match config {
        Some(p) => CostModelConfig::load(open(p)?).with_context(|| format!("bad cost config {}", p.display()))?,
        None => CostModelConfig::default(),
    };
    if let Some(p) = table {
        cfg.cost_table = Some(load_cost_table(open(p)?).with_context(|| format!("bad cost table {}", p.display()))?);
    }
    Ok(cfg)
}

pub struct Prepared {
    pub part: AtomicPartition,
    pub costs: AtomCosts,
}

pub fn prepare(g: &TaskGraph, cfg: &CostModelConfig) -> Result<Prepared> {
    let part = build_atomic_subcomponents(g).context("atomic partitioning failed")?;
    let costs = AtomCosts::new(&part, &CostModel::new(cfg.clone()));
    Ok(Prepared { part, costs })
}

/// Blocks for `k` (clamped to the atom count). When memory leaves more groups
/// than `k`, the surplus groups are kept as blocks.
pub fn make_blocks(prep: &Prepared, cluster: &ClusterSpec, k: usize, notes: &mut Vec<String>) -> Result<BlockSet> {
    let ctx = BlockContext::new(&prep.part, &prep.costs, cluster);
    let k_eff = k.min(prep.part.len());
    if k_eff < k {
        notes.push(format!("k={k} exceeds the {} atoms; using k={k_eff}", prep.part.len()));
    }
    match partition_blocks(&ctx, k_eff) {
        Ok(b) => Ok(b),
        Err(BlockError::InfeasibleAtom { atom, mem, limit }) => {
            Err(Infeasible(format!("atom {atom} needs {mem} bytes, device has {limit}")).into())
        }
        Err(BlockError::CompactionStuck { groups, k }) => {
            notes.push(format!("device memory allows no more than {groups} blocks merged down from k={k}"));
            Ok(partition_blocks(&ctx, groups)?)
        }
        Err(e) => Err(e.into()),
    }
}

pub struct Planned {
    pub plan: Plan,
    pub schedule: Schedule,
    pub evaluations: u64,
    pub oracle: Option<String>,
}

pub fn plan_stages(
    prof: &dyn StageProfiler,
    cluster: &ClusterSpec,
    batch_size: u64,
    opts: &DpOptions,
    oracle_check: bool,
) -> Result<Planned> {
    let out = form_stage(prof, batch_size, cluster, opts)?;
    let Some(plan) = out.plan else {
        return Err(Infeasible(format!(
            "no pipeline of {} blocks fits {} bytes per device at batch size {batch_size}",
            prof.num_blocks(),
            cluster.device_memory_bytes
        ))
        .into());
    };
    let bad = validate_plan(&plan, prof, cluster);
    if !bad.is_empty() {
        bail!("internal error: search produced an invalid plan: {bad:?}");
    }
    let oracle = if oracle_check { Some(check_against_oracle(prof, cluster, &plan, opts)?) } else { None };
    let schedule = simulate(&plan, prof, cluster)?;
    Ok(Planned { plan, schedule, evaluations: out.stats.evaluations, oracle })
}

fn check_against_oracle(prof: &dyn StageProfiler, cluster: &ClusterSpec, plan: &Plan, opts: &DpOptions) -> Result<String> {
    let args = DpArgs {
        stages: plan.num_stages(),
        devices: plan.devices(),
        batch_size: plan.batch_size,
        replica_factor: plan.replica_factor,
        microbatches: plan.microbatches,
    };
    match brute_force_partition(prof, &args, cluster, opts) {
        Err(StageError::TooLarge { blocks, devices }) => Ok(format!(
            "skipped ({blocks} blocks, {devices} devices; limits {BRUTE_FORCE_MAX_BLOCKS} and {BRUTE_FORCE_MAX_DEVICES})"
        )),
        Err(e) => Err(e.into()),
        Ok((best, count)) => {
            let v = best.map(|p| p.objective).unwrap_or(f64::INFINITY);
            if (v - plan.objective).abs() > 1e-9 * v.abs() {
                bail!("oracle mismatch: search objective {} but exhaustive optimum {v}", plan.objective);
            }
            Ok(format!("agrees with exhaustive search over {count} candidates"))
        }
    }
}

/// Every device holds a full replica: one stage, replica factor = device count.
pub fn plan_data_parallel(prof: &dyn StageProfiler, cluster: &ClusterSpec, batch_size: u64) -> Result<Planned> {
    let r = cluster.total_devices();
    let mut best: Option<(Plan, Schedule)> = None;
    let mut evaluations = 0;
    let mut mb = 1;
    while mb <= batch_size / r as u64 {
        let args = DpArgs { stages: 1, devices: 1, batch_size, replica_factor: r, microbatches: mb };
        let (plan, st) = form_stage_dp(prof, &args, cluster, &DpOptions::default())?;
        evaluations += st.evaluations;
        if let Some(p) = plan {
            let s = simulate(&p, prof, cluster)?;
            if best.as_ref().map_or(true, |(_, b)| s.iteration_time_sec < b.iteration_time_sec) {
                best = Some((p, s));
            }
        }
        mb *= 2;
    }
    match best {
        Some((plan, schedule)) => Ok(Planned { plan, schedule, evaluations, oracle: None }),
        None => Err(Infeasible(format!(
            "a full replica does not fit {} bytes per device at batch size {batch_size} over {r} devices",
            cluster.device_memory_bytes
        ))
        .into()),
    }
}

pub fn block_profiler<'a>(prep: &'a Prepared, blocks: &BlockSet) -> BlockProfiler<'a> {
    BlockProfiler::new(&prep.part, &prep.costs, blocks)
}

fn gib(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 30) as f64
}

pub fn report(planned: &Planned, blocks: &BlockSet, cluster: &ClusterSpec, notes: &[String]) -> String {
    let p = &planned.plan;
    let s = &planned.schedule;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "stages {}  microbatches {}  replica factor {}  devices {}/{}  checkpointing {}",
        p.num_stages(),
        p.microbatches,
        p.replica_factor,
        p.devices() * p.replica_factor,
        cluster.total_devices(),
        if p.checkpointing { "on" } else { "off" },
    );
    let _ = writeln!(out, "{:>5}  {:>11}  {:>7}  {:>8}  {:>5}  {:>12}  {:>12}  {:>9}", "stage", "blocks", "devices", "replicas", "batch", "t_fwd (s)", "t_bwd (s)", "mem (GiB)");
    for (i, st) in p.stages.iter().enumerate() {
        let first = &blocks.blocks[st.blocks[0]].id;
        let last = &blocks.blocks[st.blocks[1] - 1].id;
        let _ = writeln!(
            out,
            "{i:>5}  {:>11}  {:>7}  {:>8}  {:>5}  {:>12.6e}  {:>12.6e}  {:>9.3}",
            format!("{first}-{last}"),
            st.devices,
            st.replicas,
            st.batch,
            st.t_fwd,
            st.t_bwd,
            gib(st.mem)
        );
    }
    let _ = writeln!(out, "objective (max t_fwd + max t_bwd) {:.6e} s", p.objective);
    let _ = writeln!(out, "simulated iteration {:.6e} s  throughput {:.3} samples/s  bubble {:.3}", s.iteration_time_sec, p.batch_size as f64 / s.iteration_time_sec, s.bubble_fraction);
    let _ = writeln!(out, "candidate evaluations {}", planned.evaluations);
    if let Some(o) = &planned.oracle {
        let _ = writeln!(out, "oracle check: {o}");
    }
    for n in notes {
        let _ = writeln!(out, "note: {n}");
    }
    out
}
