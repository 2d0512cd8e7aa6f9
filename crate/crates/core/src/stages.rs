//! Stage formation: contiguous block ranges with per-stage replica counts.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::AtomicPartition;
use crate::blocks::BlockSet;
use crate::cluster::ClusterSpec;
use crate::cost::{comm_time, AtomCosts, Lin};

/// Cost of running blocks `from..to` as one stage replica.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpanCost {
    pub t_fwd: f64,
    pub t_bwd: f64,
    pub mem_bytes: u64,
    /// Bytes received from earlier stages.
    pub in_bytes: u64,
    /// Bytes sent to later stages.
    pub out_bytes: u64,
    pub param_bytes: u64,
}

pub trait StageProfiler: Sync {
    fn num_blocks(&self) -> usize;
    fn profile_span(&self, from: usize, to: usize, batch: u64, checkpointing: bool) -> SpanCost;
}

/// Profiles block spans of a real graph, memoized per `(from, to, batch, checkpointing)`.
pub struct BlockProfiler<'a> {
    costs: &'a AtomCosts,
    blocks: Vec<Vec<usize>>,
    block_of: Vec<usize>,
    cut: Vec<(usize, Vec<usize>, Lin)>,
    memo: Mutex<HashMap<(usize, usize, u64, bool), SpanCost>>,
}

impl<'a> BlockProfiler<'a> {
    pub fn new(part: &AtomicPartition, costs: &'a AtomCosts, blocks: &BlockSet) -> Self {
        let block_of = blocks.block_of_atom(part.len());
        let g = &part.graph;
        let mut cut = Vec::new();
        for v in g.value_indices() {
            let info = g.value(v).unwrap();
            if info.is_param {
                continue;
            }
            let src = block_of[part.owner(v)];
            let mut dst: Vec<usize> = g.succ(v).iter().map(|&t| block_of[part.owner(t)]).filter(|&b| b != src).collect();
            dst.sort_unstable();
            dst.dedup();
            if !dst.is_empty() {
                cut.push((src, dst, Lin::from(info)));
            }
        }
        BlockProfiler {
            costs,
            blocks: blocks.blocks.iter().map(|b| b.atoms.clone()).collect(),
            block_of,
            cut,
            memo: Mutex::new(HashMap::new()),
        }
    }

    /// One block per atom.
    pub fn atoms(part: &AtomicPartition, costs: &'a AtomCosts) -> Self {
        let blocks = BlockSet {
            blocks: (0..part.len())
                .map(|a| crate::blocks::Block { id: crate::atomic::atom_id(a), atoms: vec![a], cost: Default::default() })
                .collect(),
        };
        Self::new(part, costs, &blocks)
    }
}

impl StageProfiler for BlockProfiler<'_> {
    fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn profile_span(&self, from: usize, to: usize, batch: u64, checkpointing: bool) -> SpanCost {
        let key = (from, to, batch, checkpointing);
        if let Some(c) = self.memo.lock().unwrap().get(&key) {
            return *c;
        }
        let atoms = self.blocks[from..to].iter().flatten().copied();
        let inside = |a: usize| (from..to).contains(&self.block_of[a]);
        let rec = self.costs.profile_set(atoms.clone(), inside, batch, checkpointing);
        let (mut in_bytes, mut out_bytes) = (0, 0);
        for (src, dst, size) in &self.cut {
            let src_in = (from..to).contains(src);
            if src_in && dst.last().map_or(false, |&d| d >= to) {
                out_bytes += size.at(batch);
            } else if *src < from && dst.iter().any(|d| (from..to).contains(d)) {
                in_bytes += size.at(batch);
            }
        }
        let c = SpanCost {
            t_fwd: rec.t_fwd_sec,
            t_bwd: rec.t_bwd_sec,
            mem_bytes: rec.mem_bytes,
            in_bytes,
            out_bytes,
            param_bytes: atoms.map(|a| self.costs.param_bytes(a)).sum(),
        };
        self.memo.lock().unwrap().insert(key, c);
        c
    }
}

/// Hand-specified chain of blocks, used by tests and benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBlock {
    pub fwd_per_sample: f64,
    pub bwd_per_sample: f64,
    pub param_bytes: u64,
    pub act_per_sample: u64,
    /// Bytes per sample sent to the next block.
    pub out_per_sample: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticProfiler {
    pub blocks: Vec<SyntheticBlock>,
    pub param_memory_factor: f64,
}

impl StageProfiler for SyntheticProfiler {
    fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn profile_span(&self, from: usize, to: usize, batch: u64, checkpointing: bool) -> SpanCost {
        let span = &self.blocks[from..to];
        let b = batch as f64;
        let params: u64 = span.iter().map(|x| x.param_bytes).sum();
        let in_bytes = if from > 0 { self.blocks[from - 1].out_per_sample * batch } else { 0 };
        let out_bytes = if to < self.blocks.len() { self.blocks[to - 1].out_per_sample * batch } else { 0 };
        let acts = span.iter().map(|x| x.act_per_sample * batch);
        let act = if checkpointing { acts.max().unwrap_or(0) } else { acts.sum() };
        SpanCost {
            t_fwd: span.iter().map(|x| x.fwd_per_sample * b).sum(),
            t_bwd: span.iter().map(|x| x.bwd_per_sample * b).sum(),
            mem_bytes: (params as f64 * self.param_memory_factor).ceil() as u64 + in_bytes + act,
            in_bytes,
            out_bytes,
            param_bytes: params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    /// Zero-based half-open block range.
    pub blocks: [usize; 2],
    pub devices: usize,
    pub replicas: usize,
    /// Samples per replica per microbatch.
    pub batch: u64,
    /// Forward time including sending outputs onward.
    pub t_fwd: f64,
    /// Backward time including sending input gradients back.
    pub t_bwd: f64,
    pub mem: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub stages: Vec<Stage>,
    pub microbatches: u64,
    pub replica_factor: usize,
    pub objective: f64,
    pub batch_size: u64,
    pub checkpointing: bool,
}

impl Plan {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn devices(&self) -> usize {
        self.stages.iter().map(|s| s.devices).sum()
    }

    pub fn boundaries(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.blocks[1]).collect()
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("instance too large for exhaustive search ({blocks} blocks, {devices} devices)")]
    TooLarge { blocks: usize, devices: usize },
    #[error("evaluation budget of {budget} candidates exceeded")]
    BudgetExceeded { budget: u64, stats: DpStats },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpArgs {
    pub stages: usize,
    pub devices: usize,
    pub batch_size: u64,
    pub replica_factor: usize,
    pub microbatches: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpOptions {
    pub pruning: bool,
    /// Recompute activations in the backward pass when there are several stages.
    pub checkpointing: bool,
    /// Maximum number of candidate evaluations before giving up.
    pub budget: Option<u64>,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions { pruning: true, checkpointing: true, budget: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DpStats {
    /// Inner-loop `(b', d')` iterations.
    pub visits: u64,
    /// Candidate stages profiled.
    pub evaluations: u64,
}

impl std::ops::AddAssign for DpStats {
    fn add_assign(&mut self, o: DpStats) {
        self.visits += o.visits;
        self.evaluations += o.evaluations;
    }
}

/// Samples per replica per microbatch, `None` when it rounds down to zero.
pub fn replica_batch(args: &DpArgs, devices: usize) -> Option<u64> {
    let div = args.replica_factor as u64 * args.microbatches * devices as u64;
    let b = args.batch_size / div;
    (b > 0).then_some(b)
}

fn link_time(bytes: u64, cluster: &ClusterSpec) -> f64 {
    if bytes == 0 {
        0.0
    } else {
        comm_time(bytes, cluster)
    }
}

/// Times, memory and batch of one candidate stage, or `None` when it cannot run.
fn stage_candidate(
    prof: &dyn StageProfiler,
    args: &DpArgs,
    from: usize,
    to: usize,
    devices: usize,
    ckpt: bool,
    cluster: &ClusterSpec,
) -> Option<Stage> {
    let batch = replica_batch(args, devices)?;
    let c = prof.profile_span(from, to, batch, ckpt);
    if c.mem_bytes > cluster.device_memory_bytes {
        return None;
    }
    Some(Stage {
        blocks: [from, to],
        devices,
        replicas: devices * args.replica_factor,
        batch,
        t_fwd: c.t_fwd + link_time(c.out_bytes, cluster),
        t_bwd: c.t_bwd + link_time(c.in_bytes, cluster),
        mem: c.mem_bytes,
    })
}

fn check_args(nb: usize, args: &DpArgs) -> Result<(), StageError> {
    let DpArgs { stages: s, devices: d, .. } = *args;
    if s == 0 || s > d || s > nb {
        return Err(StageError::InvalidArgs(format!("need 1 <= S <= min(D, |B|), got S={s}, D={d}, |B|={nb}")));
    }
    if args.replica_factor == 0 || args.microbatches == 0 {
        return Err(StageError::InvalidArgs("R and MB must be at least 1".into()));
    }
    Ok(())
}

/// Dynamic program over (stages, blocks, devices).
pub fn form_stage_dp(
    prof: &dyn StageProfiler,
    args: &DpArgs,
    cluster: &ClusterSpec,
    opts: &DpOptions,
) -> Result<(Option<Plan>, DpStats), StageError> {
    let nb = prof.num_blocks();
    check_args(nb, args)?;
    let (big_s, big_d) = (args.stages, args.devices);
    let ckpt = opts.checkpointing && big_s > 1;
    let inf = f64::INFINITY;
    let idx = |s: usize, b: usize, d: usize| (s * (nb + 1) + b) * (big_d + 1) + d;
    let cells = (big_s + 1) * (nb + 1) * (big_d + 1);
    let mut v = vec![inf; cells];
    let mut tf = vec![0.0f64; cells];
    let mut tb = vec![0.0f64; cells];
    let mut back: Vec<Option<(usize, usize, Stage)>> = vec![None; cells];
    v[idx(0, 0, 0)] = 0.0;
    let mut stats = DpStats::default();

    // fewest devices with a feasible cell, per (s, b)
    let mut fewest = vec![usize::MAX; (big_s + 1) * (nb + 1)];
    fewest[0] = 0;
    let mut d_min = 1;
    for s in 1..=big_s {
        for b in s..=nb - big_s + s {
            let mut lo = s;
            if opts.pruning {
                let prefix = (s - 1..b).map(|bp| fewest[(s - 1) * (nb + 1) + bp]).min().unwrap_or(usize::MAX);
                lo = lo.max(prefix.saturating_add(1));
                if s == 1 {
                    lo = lo.max(d_min);
                }
            }
            let mut d = big_d - (big_s - s);
            while d >= lo {
                let cell = idx(s, b, d);
                let mut zero_batch = false;
                for bp in s - 1..b {
                    for dp in s - 1..d {
                        stats.visits += 1;
                        let prev = idx(s - 1, bp, dp);
                        if v[prev] == inf {
                            continue;
                        }
                        if let Some(budget) = opts.budget {
                            if stats.evaluations >= budget {
                                return Err(StageError::BudgetExceeded { budget, stats });
                            }
                        }
                        stats.evaluations += 1;
                        if replica_batch(args, d - dp).is_none() {
                            zero_batch = true;
                            continue;
                        }
                        let Some(st) = stage_candidate(prof, args, bp, b, d - dp, ckpt, cluster) else {
                            continue;
                        };
                        let f = tf[prev].max(st.t_fwd);
                        let g = tb[prev].max(st.t_bwd);
                        if f + g < v[cell] {
                            v[cell] = f + g;
                            tf[cell] = f;
                            tb[cell] = g;
                            back[cell] = Some((bp, dp, st));
                        }
                    }
                }
                if v[cell] < inf {
                    fewest[s * (nb + 1) + b] = d;
                } else if opts.pruning && !zero_batch {
                    // Every assignment with fewer devices would fit here with one
                    // more device on the last stage, so none of them is feasible.
                    // A single stage only grows with b, so the floor carries over.
                    if s == 1 {
                        d_min = d + 1;
                    }
                    break;
                }
                if d == 0 {
                    break;
                }
                d -= 1;
            }
        }
    }

    let end = idx(big_s, nb, big_d);
    if v[end] == inf {
        return Ok((None, stats));
    }
    let mut stages = Vec::with_capacity(big_s);
    let (mut s, mut b, mut d) = (big_s, nb, big_d);
    while s > 0 {
        let (bp, dp, st) = back[idx(s, b, d)].clone().expect("finite cell has a back-pointer");
        stages.push(st);
        s -= 1;
        b = bp;
        d = dp;
    }
    stages.reverse();
    Ok((Some(make_plan(stages, args, v[end], ckpt)), stats))
}

fn make_plan(stages: Vec<Stage>, args: &DpArgs, objective: f64, checkpointing: bool) -> Plan {
    Plan {
        stages,
        microbatches: args.microbatches,
        replica_factor: args.replica_factor,
        objective,
        batch_size: args.batch_size,
        checkpointing,
    }
}

pub const BRUTE_FORCE_MAX_BLOCKS: usize = 12;
pub const BRUTE_FORCE_MAX_DEVICES: usize = 8;

/// Exhaustive search over all contiguous splits and device assignments that
/// use exactly `D` devices. Returns the best plan and the number of candidates.
pub fn brute_force_partition(
    prof: &dyn StageProfiler,
    args: &DpArgs,
    cluster: &ClusterSpec,
    opts: &DpOptions,
) -> Result<(Option<Plan>, u64), StageError> {
    let nb = prof.num_blocks();
    if nb > BRUTE_FORCE_MAX_BLOCKS || args.devices > BRUTE_FORCE_MAX_DEVICES {
        return Err(StageError::TooLarge { blocks: nb, devices: args.devices });
    }
    check_args(nb, args)?;
    let s = args.stages;
    let ckpt = opts.checkpointing && s > 1;
    let cuts = compositions(nb, s);
    let devs = compositions(args.devices, s);
    let mut best: Option<Plan> = None;
    let mut count = 0;
    for cut in &cuts {
        for dv in &devs {
            count += 1;
            let mut from = 0;
            let mut stages = Vec::with_capacity(s);
            for (&len, &d) in cut.iter().zip(dv) {
                match stage_candidate(prof, args, from, from + len, d, ckpt, cluster) {
                    Some(st) => stages.push(st),
                    None => break,
                }
                from += len;
            }
            if stages.len() < s {
                continue;
            }
            let f = stages.iter().map(|x| x.t_fwd).fold(0.0, f64::max);
            let g = stages.iter().map(|x| x.t_bwd).fold(0.0, f64::max);
            if best.as_ref().map_or(true, |p| f + g < p.objective) {
                best = Some(make_plan(stages, args, f + g, ckpt));
            }
        }
    }
    Ok((best, count))
}

/// All ways to write `total` as an ordered sum of `parts` positive integers.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    fn go(left: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for first in 1..=left.saturating_sub(parts - 1) {
            cur.push(first);
            go(left - first, parts - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if parts >= 1 && total >= parts {
        go(total, parts, &mut Vec::new(), &mut out);
    }
    out
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub plan: Option<Plan>,
    /// Simulated iteration time of the chosen plan.
    pub iteration_time: Option<f64>,
    pub stats: DpStats,
    /// Number of feasible `(S, MB)` solutions compared for the returned plan.
    pub candidates: usize,
}

/// Searches node counts, stage counts and microbatch counts, returning the
/// best plan for the first stage count that admits any.
pub fn form_stage(
    prof: &dyn StageProfiler,
    batch_size: u64,
    cluster: &ClusterSpec,
    opts: &DpOptions,
) -> Result<SearchOutcome, StageError> {
    let (nodes, per_node) = (cluster.num_nodes, cluster.devices_per_node);
    if nodes == 0 || per_node == 0 || batch_size == 0 {
        return Err(StageError::InvalidArgs("N, D_node and BS must be at least 1".into()));
    }
    let nb = prof.num_blocks();
    let mut stats = DpStats::default();
    let mut n = 1;
    while n <= nodes {
        let devices = per_node * n;
        let r = nodes / n;
        for s in per_node * (n - 1) + 1..=devices {
            if s > nb {
                break;
            }
            let mut found: Vec<(f64, Plan)> = Vec::new();
            let mut mb = 1;
            while mb <= batch_size / r as u64 {
                let args = DpArgs { stages: s, devices, batch_size, replica_factor: r, microbatches: mb };
                let budget_left = opts.budget.map(|b| b.saturating_sub(stats.evaluations));
                let o = DpOptions { budget: budget_left, ..*opts };
                match form_stage_dp(prof, &args, cluster, &o) {
                    Ok((plan, st)) => {
                        stats += st;
                        if let Some(p) = plan {
                            let t = crate::sim::simulate(&p, prof, cluster)
                                .expect("plans from the search are valid")
                                .iteration_time_sec;
                            found.push((t, p));
                        }
                    }
                    Err(StageError::BudgetExceeded { stats: st, .. }) => {
                        stats += st;
                        return Err(StageError::BudgetExceeded { budget: opts.budget.unwrap_or(0), stats });
                    }
                    Err(e) => return Err(e),
                }
                mb *= 2;
            }
            if !found.is_empty() {
                let candidates = found.len();
                let (t, p) = found
                    .into_iter()
                    .min_by(|a, b| {
                        a.0.total_cmp(&b.0)
                            .then(a.1.objective.total_cmp(&b.1.objective))
                            .then(a.1.microbatches.cmp(&b.1.microbatches))
                    })
                    .unwrap();
                return Ok(SearchOutcome { plan: Some(p), iteration_time: Some(t), stats, candidates });
            }
        }
        n *= 2;
    }
    Ok(SearchOutcome { plan: None, iteration_time: None, stats, candidates: 0 })
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanViolation {
    BoundaryViolation(String),
    DeviceViolation(String),
    BatchViolation { stage: usize },
    MemoryViolation { stage: usize, mem: u64, limit: u64 },
    CostMismatch { stage: usize },
}

impl std::fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlanViolation::BoundaryViolation(m) => write!(f, "bad stage boundaries: {m}"),
            PlanViolation::DeviceViolation(m) => write!(f, "bad device assignment: {m}"),
            PlanViolation::BatchViolation { stage } => write!(f, "stage {stage} has an inconsistent batch"),
            PlanViolation::MemoryViolation { stage, mem, limit } => {
                write!(f, "stage {stage} needs {mem} bytes, limit is {limit}")
            }
            PlanViolation::CostMismatch { stage } => write!(f, "stage {stage} times disagree with the profile"),
        }
    }
}

/// Checks a plan against the blocks it was built from. Empty means valid.
pub fn validate_plan(plan: &Plan, prof: &dyn StageProfiler, cluster: &ClusterSpec) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    let nb = prof.num_blocks();
    if plan.stages.is_empty() {
        out.push(PlanViolation::BoundaryViolation("no stages".into()));
        return out;
    }
    let mut expect = 0;
    for (i, st) in plan.stages.iter().enumerate() {
        let [from, to] = st.blocks;
        if from != expect || to <= from || to > nb {
            out.push(PlanViolation::BoundaryViolation(format!("stage {i} covers [{from}, {to}) after {expect}")));
        }
        expect = to;
    }
    if expect != nb {
        out.push(PlanViolation::BoundaryViolation(format!("stages end at {expect}, expected {nb}")));
    }
    if plan.replica_factor == 0 || plan.microbatches == 0 {
        out.push(PlanViolation::DeviceViolation("replica factor and microbatches must be positive".into()));
        return out;
    }
    let total: usize = plan.stages.iter().map(|s| s.replicas).sum();
    if total > cluster.total_devices() {
        out.push(PlanViolation::DeviceViolation(format!("{total} devices used, cluster has {}", cluster.total_devices())));
    }
    if plan.checkpointing && plan.stages.len() == 1 {
        out.push(PlanViolation::DeviceViolation("single-stage plans run without checkpointing".into()));
    }
    if !out.is_empty() {
        return out;
    }
    let args = DpArgs {
        stages: plan.stages.len(),
        devices: plan.devices(),
        batch_size: plan.batch_size,
        replica_factor: plan.replica_factor,
        microbatches: plan.microbatches,
    };
    for (i, st) in plan.stages.iter().enumerate() {
        if st.devices == 0 || st.replicas != st.devices * plan.replica_factor {
            out.push(PlanViolation::DeviceViolation(format!("stage {i}: {} devices, {} replicas", st.devices, st.replicas)));
            continue;
        }
        if replica_batch(&args, st.devices) != Some(st.batch) {
            out.push(PlanViolation::BatchViolation { stage: i });
            continue;
        }
        let c = prof.profile_span(st.blocks[0], st.blocks[1], st.batch, plan.checkpointing);
        if c.mem_bytes > cluster.device_memory_bytes {
            out.push(PlanViolation::MemoryViolation { stage: i, mem: c.mem_bytes, limit: cluster.device_memory_bytes });
        }
        let f = c.t_fwd + link_time(c.out_bytes, cluster);
        let b = c.t_bwd + link_time(c.in_bytes, cluster);
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-30);
        if !close(f, st.t_fwd) || !close(b, st.t_bwd) || c.mem_bytes != st.mem {
            out.push(PlanViolation::CostMismatch { stage: i });
        }
    }
    out
}
