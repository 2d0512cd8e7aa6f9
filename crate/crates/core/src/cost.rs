//! Analytic stand-in for profiling subcomponents.
//!
//! Forward time is FLOPs over device throughput, backward time a fixed
//! multiple of it. Memory is parameters plus gradient and optimizer copies plus
//! activations. A measured cost table can replace the analytic numbers of
//! individual tasks.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::{AtomicPartition, Subcomponent};
use crate::cluster::ClusterSpec;
use crate::graph::TaskGraph;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostRecord {
    pub t_fwd_sec: f64,
    pub t_bwd_sec: f64,
    pub mem_bytes: u64,
}

impl CostRecord {
    pub fn compute_time(&self) -> f64 {
        self.t_fwd_sec + self.t_bwd_sec
    }
}

/// One measured entry: times and retained activation bytes of a task at
/// `microbatch` samples. Other batch sizes scale linearly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub microbatch: u64,
    pub t_fwd: f64,
    pub t_bwd: f64,
    pub act_bytes: u64,
}

/// Measured costs keyed by [`crate::graph::TaskInfo::signature`].
pub type CostTable = BTreeMap<String, TableEntry>;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid cost configuration: {0}")]
    Invalid(String),
}

pub fn load_cost_table<R: Read>(reader: R) -> Result<CostTable, CostError> {
    let t: CostTable = serde_json::from_reader(reader)?;
    if let Some((k, _)) = t.iter().find(|(_, e)| e.microbatch == 0) {
        return Err(CostError::Invalid(format!("table entry {k:?} has microbatch 0")));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModelConfig {
    pub device_flops_per_sec: f64,
    pub bwd_fwd_ratio: f64,
    pub optimizer_state_factor: f64,
    pub grad_factor: f64,
    pub bytes_per_element: u64,
    /// Recompute activations in the backward pass of multi-stage plans.
    pub checkpointing: bool,
    #[serde(skip)]
    pub cost_table: Option<CostTable>,
}

impl Default for CostModelConfig {
    fn default() -> Self {
        CostModelConfig {
            device_flops_per_sec: 15e12,
            bwd_fwd_ratio: 2.0,
            optimizer_state_factor: 2.0,
            grad_factor: 1.0,
            bytes_per_element: 4,
            checkpointing: true,
            cost_table: None,
        }
    }
}

impl CostModelConfig {
    pub fn load<R: Read>(reader: R) -> Result<Self, CostError> {
        let c: CostModelConfig = serde_json::from_reader(reader)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CostError> {
        if !(self.device_flops_per_sec > 0.0) || !(self.bwd_fwd_ratio > 0.0) {
            return Err(CostError::Invalid("device_flops_per_sec and bwd_fwd_ratio must be positive".into()));
        }
        if !(self.optimizer_state_factor >= 0.0) || !(self.grad_factor >= 0.0) || self.bytes_per_element == 0 {
            return Err(CostError::Invalid("negative memory factor or zero element size".into()));
        }
        Ok(())
    }

    /// Multiplier applied to parameter bytes: weights, gradients and optimizer state.
    pub fn param_memory_factor(&self) -> f64 {
        1.0 + self.grad_factor + self.optimizer_state_factor
    }

    pub fn param_memory(&self, param_bytes: u64) -> u64 {
        (param_bytes as f64 * self.param_memory_factor()).ceil() as u64
    }
}

/// `link_latency + bytes / intra-node bandwidth`.
pub fn comm_time(bytes: u64, cluster: &ClusterSpec) -> f64 {
    comm_time_over(bytes, cluster.bw_intra_bytes_per_sec, cluster.link_latency_sec)
}

pub fn comm_time_over(bytes: u64, bytes_per_sec: f64, latency: f64) -> f64 {
    latency + bytes as f64 / bytes_per_sec
}

/// Bytes of values produced in one subcomponent and consumed by the other,
/// in either direction, at `microbatch` samples.
pub fn cut_bytes(g: &TaskGraph, a: &Subcomponent, b: &Subcomponent, microbatch: u64) -> u64 {
    let one_way = |from: &Subcomponent, to: &Subcomponent| -> u64 {
        let dst: HashSet<usize> = to.indices(g).into_iter().collect();
        from.indices(g)
            .into_iter()
            .filter(|&v| !g.is_task(v) && g.succ(v).iter().any(|c| dst.contains(c)))
            .map(|v| g.value(v).unwrap().bytes_at(microbatch))
            .sum()
    };
    one_way(a, b) + one_way(b, a)
}

/// Per-sample time rates of one task, and its retained output bytes when a
/// measured entry overrides them.
struct TaskRates {
    fwd_per_sample: f64,
    bwd_per_sample: f64,
    out_per_sample: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct CostModel {
    pub cfg: CostModelConfig,
}

impl CostModel {
    pub fn new(cfg: CostModelConfig) -> Self {
        CostModel { cfg }
    }

    fn rates(&self, g: &TaskGraph, t: usize) -> TaskRates {
        let info = g.task(t).expect("task node");
        if let Some(e) = self.cfg.cost_table.as_ref().and_then(|tab| tab.get(&info.signature())) {
            let mb = e.microbatch as f64;
            return TaskRates {
                fwd_per_sample: e.t_fwd / mb,
                bwd_per_sample: e.t_bwd / mb,
                out_per_sample: Some((e.act_bytes as f64 / mb).round() as u64),
            };
        }
        let fwd = info.flops_per_sample / self.cfg.device_flops_per_sec;
        TaskRates {
            fwd_per_sample: fwd,
            bwd_per_sample: fwd * self.cfg.bwd_fwd_ratio,
            out_per_sample: None,
        }
    }

    fn task_out(&self, g: &TaskGraph, t: usize, rates: &TaskRates) -> Lin {
        match rates.out_per_sample {
            Some(ps) => Lin { fixed: 0, per_sample: ps },
            None => g
                .succ(t)
                .iter()
                .filter_map(|&v| g.value(v))
                .fold(Lin::default(), |acc, v| acc + Lin::from(v)),
        }
    }

    /// Profiles an arbitrary subcomponent of `g` at `microbatch` samples.
    pub fn profile(&self, g: &TaskGraph, sub: &Subcomponent, microbatch: u64) -> CostRecord {
        self.profile_with(g, sub, microbatch, self.cfg.checkpointing)
    }

    pub fn profile_with(&self, g: &TaskGraph, sub: &Subcomponent, microbatch: u64, checkpointing: bool) -> CostRecord {
        let inside: HashSet<usize> = sub.indices(g).into_iter().collect();
        let mut members: Vec<usize> = inside.iter().copied().collect();
        members.sort_unstable();

        let (mut tf, mut tb) = (0.0, 0.0);
        let mut params = 0u64;
        let mut owned = Lin::default();
        let mut worst_task = 0u64;
        for &n in &members {
            if g.is_task(n) {
                let r = self.rates(g, n);
                tf += r.fwd_per_sample * microbatch as f64;
                tb += r.bwd_per_sample * microbatch as f64;
                let out = self.task_out(g, n, &r);
                owned = owned + out;
                let internal_in: u64 = g
                    .pred(n)
                    .iter()
                    .filter(|v| inside.contains(v))
                    .filter_map(|&v| g.value(v))
                    .filter(|v| !v.is_param)
                    .map(|v| v.bytes_at(microbatch))
                    .sum();
                worst_task = worst_task.max(internal_in + out.at(microbatch));
            } else {
                let v = g.value(n).unwrap();
                if v.is_param {
                    params += v.fixed_bytes;
                } else if g.producer(n).map_or(true, |p| !inside.contains(&p)) {
                    owned = owned + Lin::from(v);
                }
            }
        }
        let boundary: u64 = sub
            .input_values
            .iter()
            .filter_map(|id| g.index_of(id))
            .filter_map(|v| g.value(v))
            .filter(|v| !v.is_param)
            .map(|v| v.bytes_at(microbatch))
            .sum();
        let act = if checkpointing { boundary + worst_task } else { boundary + owned.at(microbatch) };
        CostRecord {
            t_fwd_sec: tf,
            t_bwd_sec: tb,
            mem_bytes: self.cfg.param_memory(params) + act,
        }
    }
}

/// Byte size affine in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Lin {
    pub fixed: u64,
    pub per_sample: u64,
}

impl Lin {
    pub fn at(&self, batch: u64) -> u64 {
        self.fixed + batch * self.per_sample
    }
}

impl From<&crate::graph::ValueInfo> for Lin {
    fn from(v: &crate::graph::ValueInfo) -> Self {
        Lin { fixed: v.fixed_bytes, per_sample: v.bytes_per_sample }
    }
}

impl std::ops::Add for Lin {
    type Output = Lin;
    fn add(self, o: Lin) -> Lin {
        Lin { fixed: self.fixed + o.fixed, per_sample: self.per_sample + o.per_sample }
    }
}

#[derive(Debug, Clone)]
struct AtomAgg {
    fwd_per_sample: f64,
    bwd_per_sample: f64,
    param_bytes: u64,
    owned: Lin,
    tasks: std::ops::Range<usize>,
}

#[derive(Debug, Clone)]
struct TaskAgg {
    out: Lin,
    /// Non-parameter inputs owned by another atom: (value, owning atom, size).
    foreign_inputs: Vec<(usize, usize, Lin)>,
    /// Non-parameter inputs owned by the task's own atom.
    local_inputs: Lin,
}

/// Precomputed per-atom aggregates so that any union of atoms can be
/// profiled in time linear in its size. Agrees with [`CostModel::profile`]
/// on the corresponding merged subcomponent.
#[derive(Debug, Clone)]
pub struct AtomCosts {
    atoms: Vec<AtomAgg>,
    tasks: Vec<TaskAgg>,
    param_factor_cfg: CostModelConfig,
}

impl AtomCosts {
    pub fn new(part: &AtomicPartition, model: &CostModel) -> Self {
        let g = &part.graph;
        let mut atoms = Vec::with_capacity(part.len());
        let mut tasks = Vec::new();
        for a in 0..part.len() {
            let start = tasks.len();
            let mut agg = AtomAgg {
                fwd_per_sample: 0.0,
                bwd_per_sample: 0.0,
                param_bytes: 0,
                owned: Lin::default(),
                tasks: 0..0,
            };
            for &n in part.members(a) {
                if g.is_task(n) {
                    let r = model.rates(g, n);
                    agg.fwd_per_sample += r.fwd_per_sample;
                    agg.bwd_per_sample += r.bwd_per_sample;
                    let out = model.task_out(g, n, &r);
                    agg.owned = agg.owned + out;
                    let mut t = TaskAgg { out, foreign_inputs: Vec::new(), local_inputs: Lin::default() };
                    for &v in g.pred(n) {
                        let info = g.value(v).unwrap();
                        if info.is_param {
                            continue;
                        }
                        let o = part.owner(v);
                        if o == a {
                            t.local_inputs = t.local_inputs + Lin::from(info);
                        } else {
                            t.foreign_inputs.push((v, o, Lin::from(info)));
                        }
                    }
                    tasks.push(t);
                } else {
                    let v = g.value(n).unwrap();
                    if v.is_param {
                        agg.param_bytes += v.fixed_bytes;
                    } else if g.producer(n).map_or(true, |p| part.owner(p) != a) {
                        agg.owned = agg.owned + Lin::from(v);
                    }
                }
            }
            agg.tasks = start..tasks.len();
            atoms.push(agg);
        }
        AtomCosts { atoms, tasks, param_factor_cfg: model.cfg.clone() }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Forward plus backward seconds per sample of one atom.
    pub fn time_per_sample(&self, a: usize) -> f64 {
        self.atoms[a].fwd_per_sample + self.atoms[a].bwd_per_sample
    }

    pub fn param_bytes(&self, a: usize) -> u64 {
        self.atoms[a].param_bytes
    }

    /// Profiles the union of `atoms`. `contains` must answer membership for
    /// exactly that set.
    pub fn profile_set(
        &self,
        atoms: impl IntoIterator<Item = usize> + Clone,
        contains: impl Fn(usize) -> bool,
        batch: u64,
        checkpointing: bool,
    ) -> CostRecord {
        let (mut tf, mut tb) = (0.0, 0.0);
        let mut params = 0u64;
        let mut owned = 0u64;
        let mut worst = 0u64;
        let mut boundary: Vec<(usize, u64)> = Vec::new();
        for a in atoms {
            let agg = &self.atoms[a];
            tf += agg.fwd_per_sample * batch as f64;
            tb += agg.bwd_per_sample * batch as f64;
            params += agg.param_bytes;
            owned += agg.owned.at(batch);
            for t in &self.tasks[agg.tasks.clone()] {
                let mut ws = t.out.at(batch) + t.local_inputs.at(batch);
                for &(v, o, size) in &t.foreign_inputs {
                    if contains(o) {
                        ws += size.at(batch);
                    } else {
                        boundary.push((v, size.at(batch)));
                    }
                }
                worst = worst.max(ws);
            }
        }
        boundary.sort_unstable();
        boundary.dedup_by_key(|x| x.0);
        let boundary: u64 = boundary.iter().map(|x| x.1).sum();
        let act = if checkpointing { boundary + worst } else { boundary + owned };
        CostRecord {
            t_fwd_sec: tf,
            t_bwd_sec: tb,
            mem_bytes: self.param_factor_cfg.param_memory(params) + act,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atomic::build_atomic_subcomponents;
    use crate::graph::GraphBuilder;

    fn one_matmul() -> TaskGraph {
        let mut b = GraphBuilder::new();
        b.input("x", 8)
            .param("w", 1 << 20)
            .value("y", 0, 8)
            .task("mm", "matmul", 2e12, &["x", "w"], &["y"])
            .output("y");
        b.build().unwrap()
    }

    #[test]
    fn empty_subcomponent_is_free() {
        let g = one_matmul();
        let empty = Subcomponent::from_nodes(&g, "e", &[]);
        assert_eq!(CostModel::new(CostModelConfig::default()).profile(&g, &empty, 4), CostRecord::default());
    }

    #[test]
    fn matmul_time_arithmetic() {
        let g = one_matmul();
        let cfg = CostModelConfig { device_flops_per_sec: 1e12, ..Default::default() };
        let all: Vec<usize> = (0..g.len()).collect();
        let r = CostModel::new(cfg).profile(&g, &Subcomponent::from_nodes(&g, "s", &all), 1);
        assert_eq!(r.t_fwd_sec, 2.0);
        assert_eq!(r.t_bwd_sec, 4.0);
    }

    #[test]
    fn adam_parameter_memory() {
        let mut b = GraphBuilder::new();
        b.input("x", 0).value("y", 0, 0);
        // 10^9 elements split over uneven tensors
        let sizes = [400_000_000u64, 350_000_000, 249_999_000, 1_000];
        let ids: Vec<String> = (0..sizes.len()).map(|i| format!("w{i}")).collect();
        for (id, n) in ids.iter().zip(sizes) {
            b.param(id, n * 4);
        }
        let mut inputs: Vec<&str> = ids.iter().map(String::as_str).collect();
        inputs.push("x");
        b.task("t", "matmul", 0.0, &inputs, &["y"]).output("y");
        let g = b.build().unwrap();
        let enumerated: u64 = g
            .value_indices()
            .filter_map(|v| g.value(v))
            .filter(|v| v.is_param)
            .map(|v| v.fixed_bytes)
            .sum();
        assert_eq!(enumerated, 4_000_000_000);
        let all: Vec<usize> = (0..g.len()).collect();
        let r = CostModel::new(CostModelConfig::default()).profile(&g, &Subcomponent::from_nodes(&g, "s", &all), 1);
        assert_eq!(r.mem_bytes, 16_000_000_000);
    }

    #[test]
    fn comm_arithmetic() {
        let mut c = ClusterSpec::v100_nodes(1);
        assert_eq!(comm_time(0, &c), 0.0);
        assert_eq!(comm_time(25_000_000_000, &c), 1.0);
        c.bw_intra_bytes_per_sec = 1e9;
        c.bw_inter_bytes_per_sec = 1e9;
        c.link_latency_sec = 1e-5;
        assert!((comm_time(1_000_000, &c) - 1.01e-3).abs() < 1e-15);
    }

    fn diamond() -> TaskGraph {
        let mut b = GraphBuilder::new();
        b.input("x", 4)
            .value("p", 0, 100)
            .value("q", 0, 30)
            .value("r", 0, 7)
            .value("z", 0, 4)
            .task("t0", "split", 1.0, &["x"], &["p", "q"])
            .task("t1", "f", 1.0, &["p"], &["r"])
            .task("t2", "g", 1.0, &["q", "r"], &["z"])
            .output("z");
        b.build().unwrap()
    }

    #[test]
    fn cut_bytes_matches_edge_scan() {
        let g = diamond();
        let ids = |names: &[&str]| names.iter().map(|n| g.index_of(n).unwrap()).collect::<Vec<_>>();
        let a = Subcomponent::from_nodes(&g, "a", &ids(&["x", "t0", "p", "q"]));
        let b = Subcomponent::from_nodes(&g, "b", &ids(&["t1", "r", "t2", "z"]));
        // brute force over edges: value in one side, consumer task in the other
        let side = |n: usize| a.node_ids.contains(&g.id(n).to_string());
        let mut crossing: Vec<usize> = g
            .edges()
            .iter()
            .filter(|&&(u, v)| !g.is_task(u) && side(u) != side(v))
            .map(|&(u, _)| u)
            .collect();
        crossing.sort_unstable();
        crossing.dedup();
        let expected: u64 = crossing.iter().map(|&v| g.value(v).unwrap().bytes_at(3)).sum();
        assert_eq!(expected, 3 * 130);
        assert_eq!(cut_bytes(&g, &a, &b, 3), expected);
        assert_eq!(cut_bytes(&g, &b, &a, 3), expected);
        let none = Subcomponent::from_nodes(&g, "n", &[]);
        assert_eq!(cut_bytes(&g, &a, &none, 3), 0);
    }

    #[test]
    fn boundary_value_bytes() {
        let mut b = GraphBuilder::new();
        b.input("x", 4)
            .value("h", 0, 4096)
            .value("y", 0, 4)
            .task("t1", "f", 1.0, &["x"], &["h"])
            .task("t2", "g", 1.0, &["h"], &["y"])
            .output("y");
        let g = b.build().unwrap();
        let ids = |names: &[&str]| names.iter().map(|n| g.index_of(n).unwrap()).collect::<Vec<_>>();
        let a = Subcomponent::from_nodes(&g, "a", &ids(&["x", "t1", "h"]));
        let c = Subcomponent::from_nodes(&g, "b", &ids(&["t2", "y"]));
        assert_eq!(cut_bytes(&g, &a, &c, 8), 32768);
    }

    #[test]
    fn table_overrides_analytic_costs() {
        let g = one_matmul();
        let mut table = CostTable::new();
        table.insert("matmul".into(), TableEntry { microbatch: 2, t_fwd: 0.5, t_bwd: 3.0, act_bytes: 64 });
        let cfg = CostModelConfig { cost_table: Some(table), checkpointing: false, ..Default::default() };
        let all: Vec<usize> = (0..g.len()).collect();
        let r = CostModel::new(cfg.clone()).profile(&g, &Subcomponent::from_nodes(&g, "s", &all), 4);
        assert_eq!(r.t_fwd_sec, 1.0);
        assert_eq!(r.t_bwd_sec, 6.0);
        // x (owned input, 4*8) + table output bytes (4*32)
        assert_eq!(r.mem_bytes, cfg.param_memory(1 << 20) + 32 + 128);
    }

    #[test]
    fn atom_fast_path_agrees_with_subcomponent_profile() {
        let g = crate::models::gen_bert_like(64, 2, 8, 40).unwrap();
        let p = build_atomic_subcomponents(&g).unwrap();
        let model = CostModel::new(CostModelConfig::default());
        let fast = AtomCosts::new(&p, &model);
        for (lo, hi) in [(0, 1), (0, p.len()), (3, 17), (10, 11), (20, p.len())] {
            let nodes: Vec<usize> = (lo..hi).flat_map(|a| p.members(a).iter().copied()).collect();
            let sub = Subcomponent::from_nodes(&p.graph, "s", &nodes);
            for ckpt in [false, true] {
                for mb in [1, 3] {
                    let slow = model.profile_with(&p.graph, &sub, mb, ckpt);
                    let quick = fast.profile_set(lo..hi, |a| (lo..hi).contains(&a), mb, ckpt);
                    assert_eq!(slow.mem_bytes, quick.mem_bytes, "span {lo}..{hi} ckpt={ckpt} mb={mb}");
                    assert!((slow.t_fwd_sec - quick.t_fwd_sec).abs() <= 1e-12 * slow.t_fwd_sec.max(1e-30));
                }
            }
        }
    }
}
