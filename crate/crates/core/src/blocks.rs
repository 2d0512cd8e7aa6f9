//! Multilevel grouping of atomic subcomponents into `k` balanced convex blocks.
//!
//! Coarsening merges cheap groups with adjacent groups level by level,
//! uncoarsening moves single child groups between parents when that cuts
//! communication, and compaction merges neighbours of a topological order of
//! the remaining groups until exactly `k` are left.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::{atom_id, AtomicPartition, SubId};
use crate::cluster::ClusterSpec;
use crate::cost::{comm_time, AtomCosts, CostRecord};

pub const DEFAULT_K: usize = 32;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("k must be between 1 and the number of atoms ({atoms}), got {k}")]
    InvalidK { k: usize, atoms: usize },
    #[error("atom {atom} needs {mem} bytes, more than the {limit} bytes of device memory")]
    InfeasibleAtom { atom: SubId, mem: u64, limit: u64 },
    #[error("compaction stuck at {groups} groups, no neighbouring pair fits in memory (k = {k})")]
    CompactionStuck { groups: usize, k: usize },
    #[error("block file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("block file names unknown atom {0}")]
    UnknownAtom(String),
    #[error("block file does not partition the atoms: {0}")]
    NotPartition(String),
}

/// True iff no directed path between two members of `group` passes through
/// an atom outside it. `group` holds atom indices.
pub fn is_convex(p: &AtomicPartition, group: &[usize]) -> bool {
    let mut inside = vec![false; p.len()];
    for &a in group {
        inside[a] = true;
    }
    convex_with(p, group, |a| inside[a])
}

fn convex_with(p: &AtomicPartition, group: &[usize], inside: impl Fn(usize) -> bool) -> bool {
    let Some(&hi) = group.iter().max() else { return true };
    let mut seen = HashMap::new();
    let mut stack: Vec<usize> = Vec::new();
    for &a in group {
        for &s in p.succ(a) {
            if !inside(s) && s < hi && seen.insert(s, ()).is_none() {
                stack.push(s);
            }
        }
    }
    while let Some(x) = stack.pop() {
        for &s in p.succ(x) {
            if inside(s) {
                return false;
            }
            // atom indices are a topological order, so nothing past `hi` leads back
            if s < hi && seen.insert(s, ()).is_none() {
                stack.push(s);
            }
        }
    }
    true
}

/// Groups at every coarsening level. Level 0 holds one singleton per atom.
/// Within a level, groups are sorted by their smallest atom.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupHierarchy {
    pub levels: Vec<Vec<Vec<usize>>>,
    /// `parents[l][g]` is the index in level `l + 1` of the group containing group `g` of level `l`.
    pub parents: Vec<Vec<usize>>,
}

impl GroupHierarchy {
    fn from_levels(levels: Vec<Vec<Vec<usize>>>, num_atoms: usize) -> Self {
        let mut levels: Vec<Vec<Vec<usize>>> = levels
            .into_iter()
            .map(|mut lv| {
                for g in lv.iter_mut() {
                    g.sort_unstable();
                }
                lv.sort_unstable_by_key(|g| g[0]);
                lv
            })
            .collect();
        levels.retain(|lv| !lv.is_empty() || num_atoms == 0);
        let assigns: Vec<Vec<usize>> = levels.iter().map(|lv| assignment(lv, num_atoms)).collect();
        let parents = (0..levels.len().saturating_sub(1))
            .map(|l| levels[l].iter().map(|g| assigns[l + 1][g[0]]).collect())
            .collect();
        GroupHierarchy { levels, parents }
    }

    pub fn top(&self) -> &[Vec<usize>] {
        self.levels.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn assignment(groups: &[Vec<usize>], num_atoms: usize) -> Vec<usize> {
    let mut a = vec![usize::MAX; num_atoms];
    for (i, g) in groups.iter().enumerate() {
        for &x in g {
            a[x] = i;
        }
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: String,
    pub atoms: Vec<usize>,
    /// Cost at microbatch 1 with checkpointing.
    pub cost: CostRecord,
}

/// Blocks in topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSet {
    pub blocks: Vec<Block>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockSetFile {
    k: usize,
    blocks: Vec<BlockRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRecord {
    id: String,
    atoms: Vec<String>,
    t_fwd: f64,
    t_bwd: f64,
    mem: u64,
}

impl BlockSet {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block_of_atom(&self, num_atoms: usize) -> Vec<usize> {
        let groups: Vec<Vec<usize>> = self.blocks.iter().map(|b| b.atoms.clone()).collect();
        assignment(&groups, num_atoms)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let file = BlockSetFile {
            k: self.blocks.len(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockRecord {
                    id: b.id.clone(),
                    atoms: b.atoms.iter().map(|&a| atom_id(a)).collect(),
                    t_fwd: b.cost.t_fwd_sec,
                    t_bwd: b.cost.t_bwd_sec,
                    mem: b.cost.mem_bytes,
                })
                .collect(),
        };
        serde_json::to_value(file).expect("block set serializes")
    }

    /// Reads a block file written by [`BlockSet::to_json`] against the atoms of `p`.
    pub fn from_json(p: &AtomicPartition, value: serde_json::Value) -> Result<Self, BlockError> {
        let file: BlockSetFile = serde_json::from_value(value)?;
        if file.k != file.blocks.len() {
            return Err(BlockError::NotPartition(format!("k = {} but {} blocks", file.k, file.blocks.len())));
        }
        let mut seen = vec![false; p.len()];
        let mut blocks = Vec::with_capacity(file.blocks.len());
        for r in file.blocks {
            let mut atoms = Vec::with_capacity(r.atoms.len());
            for id in &r.atoms {
                let a = id
                    .strip_prefix('a')
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&a| a < p.len() && atom_id(a) == *id)
                    .ok_or_else(|| BlockError::UnknownAtom(id.clone()))?;
                if std::mem::replace(&mut seen[a], true) {
                    return Err(BlockError::NotPartition(format!("atom {id} appears twice")));
                }
                atoms.push(a);
            }
            atoms.sort_unstable();
            blocks.push(Block {
                id: r.id,
                atoms,
                cost: CostRecord { t_fwd_sec: r.t_fwd, t_bwd_sec: r.t_bwd, mem_bytes: r.mem },
            });
        }
        if let Some(a) = seen.iter().position(|s| !s) {
            return Err(BlockError::NotPartition(format!("atom {} is in no block", atom_id(a))));
        }
        Ok(BlockSet { blocks })
    }
}

/// A non-parameter value produced in one atom and consumed in others.
#[derive(Debug, Clone)]
struct CutValue {
    owner: usize,
    consumers: Vec<usize>,
    bytes: u64,
}

/// Shared state of one partitioning run.
pub struct BlockContext<'a> {
    pub part: &'a AtomicPartition,
    pub costs: &'a AtomCosts,
    pub cluster: &'a ClusterSpec,
    cut: Vec<CutValue>,
    /// Cut values each atom produces or consumes.
    touching: Vec<Vec<usize>>,
}

impl<'a> BlockContext<'a> {
    pub fn new(part: &'a AtomicPartition, costs: &'a AtomCosts, cluster: &'a ClusterSpec) -> Self {
        let g = &part.graph;
        let mut cut = Vec::new();
        let mut touching = vec![Vec::new(); part.len()];
        for v in g.value_indices() {
            let info = g.value(v).unwrap();
            if info.is_param {
                continue;
            }
            let owner = part.owner(v);
            let mut consumers: Vec<usize> = g.succ(v).iter().map(|&t| part.owner(t)).filter(|&a| a != owner).collect();
            consumers.sort_unstable();
            consumers.dedup();
            if consumers.is_empty() {
                continue;
            }
            let idx = cut.len();
            touching[owner].push(idx);
            for &c in &consumers {
                touching[c].push(idx);
            }
            cut.push(CutValue { owner, consumers, bytes: info.bytes_at(1) });
        }
        BlockContext { part, costs, cluster, cut, touching }
    }

    pub fn memory_limit(&self) -> u64 {
        self.cluster.device_memory_bytes
    }

    /// Forward plus backward time of a group at microbatch 1.
    pub fn time(&self, atoms: &[usize]) -> f64 {
        atoms.iter().map(|&a| self.costs.time_per_sample(a)).sum()
    }

    pub fn profile(&self, atoms: &[usize], inside: impl Fn(usize) -> bool) -> CostRecord {
        self.costs.profile_set(atoms.iter().copied(), inside, 1, true)
    }

    fn fits(&self, atoms: &[usize], inside: impl Fn(usize) -> bool) -> bool {
        self.profile(atoms, inside).mem_bytes <= self.memory_limit()
    }

    /// Bytes per unordered group pair at microbatch 1 under `assign`.
    fn pair_bytes(&self, assign: &[usize]) -> BTreeMap<(usize, usize), u64> {
        let mut m = BTreeMap::new();
        for i in 0..self.cut.len() {
            for (pair, b) in self.value_pairs(i, assign, None) {
                *m.entry(pair).or_insert(0) += b;
            }
        }
        m
    }

    /// Group pairs a cut value crosses, with `moved` atoms reassigned to a new group.
    fn value_pairs(&self, i: usize, assign: &[usize], moved: Option<(&[bool], usize)>) -> Vec<((usize, usize), u64)> {
        let cv = &self.cut[i];
        let group = |a: usize| match moved {
            Some((m, to)) if m[a] => to,
            _ => assign[a],
        };
        let src = group(cv.owner);
        let mut dst: Vec<usize> = cv.consumers.iter().map(|&c| group(c)).filter(|&g| g != src).collect();
        dst.sort_unstable();
        dst.dedup();
        dst.into_iter().map(|d| ((src.min(d), src.max(d)), cv.bytes)).collect()
    }

    fn pair_time(&self, bytes: u64) -> f64 {
        if bytes == 0 {
            0.0
        } else {
            comm_time(bytes, self.cluster)
        }
    }

    /// Total inter-group communication time under an atom-to-group assignment.
    pub fn total_comm(&self, assign: &[usize]) -> f64 {
        self.pair_bytes(assign).values().map(|&b| self.pair_time(b)).sum()
    }

    /// Change of total communication time when `atoms` move to group `to`.
    fn comm_delta(&self, assign: &[usize], pairs: &BTreeMap<(usize, usize), u64>, atoms: &[usize], to: usize) -> f64 {
        let mut moved = vec![false; assign.len()];
        for &a in atoms {
            moved[a] = true;
        }
        let mut values: Vec<usize> = atoms.iter().flat_map(|&a| self.touching[a].iter().copied()).collect();
        values.sort_unstable();
        values.dedup();
        let mut delta: BTreeMap<(usize, usize), i128> = BTreeMap::new();
        for i in values {
            for (p, b) in self.value_pairs(i, assign, None) {
                *delta.entry(p).or_insert(0) -= b as i128;
            }
            for (p, b) in self.value_pairs(i, assign, Some((&moved, to))) {
                *delta.entry(p).or_insert(0) += b as i128;
            }
        }
        delta
            .into_iter()
            .map(|(p, d)| {
                let old = pairs.get(&p).copied().unwrap_or(0);
                let new = (old as i128 + d) as u64;
                self.pair_time(new) - self.pair_time(old)
            })
            .sum()
    }
}

fn check_k(ctx: &BlockContext, k: usize) -> Result<(), BlockError> {
    let n = ctx.part.len();
    if k == 0 || k > n {
        return Err(BlockError::InvalidK { k, atoms: n });
    }
    for a in 0..n {
        let r = ctx.profile(&[a], |x| x == a);
        if r.mem_bytes > ctx.memory_limit() {
            return Err(BlockError::InfeasibleAtom { atom: atom_id(a), mem: r.mem_bytes, limit: ctx.memory_limit() });
        }
    }
    Ok(())
}

/// Working quotient graph of one coarsening level.
struct Level {
    members: Vec<Vec<usize>>,
    time: Vec<f64>,
    lo: Vec<usize>,
    succ: Vec<BTreeSet<usize>>,
    pred: Vec<BTreeSet<usize>>,
    gid: Vec<usize>,
}

impl Level {
    fn new(ctx: &BlockContext, groups: &[Vec<usize>]) -> Self {
        let gid = assignment(groups, ctx.part.len());
        let n = groups.len();
        let mut succ = vec![BTreeSet::new(); n];
        let mut pred = vec![BTreeSet::new(); n];
        for a in 0..ctx.part.len() {
            for &b in ctx.part.succ(a) {
                let (x, y) = (gid[a], gid[b]);
                if x != y {
                    succ[x].insert(y);
                    pred[y].insert(x);
                }
            }
        }
        Level {
            members: groups.to_vec(),
            time: groups.iter().map(|g| ctx.time(g)).collect(),
            lo: groups.iter().map(|g| g[0]).collect(),
            succ,
            pred,
            gid,
        }
    }

    /// Whether a path `from -> x -> ... -> to` exists with `x != to`.
    fn reaches_indirectly(&self, from: usize, to: usize) -> bool {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<usize> = self.succ[from].iter().copied().filter(|&x| x != to).collect();
        while let Some(x) = stack.pop() {
            if x == to {
                return true;
            }
            if !seen.insert(x) {
                continue;
            }
            stack.extend(self.succ[x].iter().copied());
        }
        false
    }

    fn merge_keeps_dag(&self, v: usize, w: usize) -> bool {
        !self.reaches_indirectly(v, w) && !self.reaches_indirectly(w, v)
    }

    fn merge(&mut self, v: usize, w: usize) {
        let moved = std::mem::take(&mut self.members[w]);
        for &a in &moved {
            self.gid[a] = v;
        }
        self.members[v].extend(moved);
        self.members[v].sort_unstable();
        self.time[v] += self.time[w];
        self.lo[v] = self.lo[v].min(self.lo[w]);
        for x in std::mem::take(&mut self.succ[w]) {
            self.pred[x].remove(&w);
            if x != v {
                self.pred[x].insert(v);
                self.succ[v].insert(x);
            }
        }
        for x in std::mem::take(&mut self.pred[w]) {
            self.succ[x].remove(&w);
            if x != v {
                self.succ[x].insert(v);
                self.pred[v].insert(x);
            }
        }
        self.succ[v].remove(&v);
        self.pred[v].remove(&v);
    }
}

/// Builds coarser levels until `k` groups remain or a level makes no merge.
pub fn coarsen(ctx: &BlockContext, k: usize) -> Result<GroupHierarchy, BlockError> {
    check_k(ctx, k)?;
    let n = ctx.part.len();
    let mut levels: Vec<Vec<Vec<usize>>> = vec![(0..n).map(|a| vec![a]).collect()];
    while levels.last().unwrap().len() > k {
        let cur = levels.last().unwrap();
        let mut lv = Level::new(ctx, cur);
        let mut live = cur.len();
        let mut consumed = vec![false; cur.len()];
        let mut order: Vec<usize> = (0..cur.len()).collect();
        order.sort_by(|&a, &b| lv.time[a].total_cmp(&lv.time[b]).then(lv.lo[a].cmp(&lv.lo[b])));
        for v in order {
            if live == k {
                break;
            }
            if consumed[v] {
                continue;
            }
            let mut cands: Vec<usize> =
                lv.succ[v].iter().chain(lv.pred[v].iter()).copied().filter(|&w| !consumed[w]).collect();
            cands.sort_by(|&a, &b| lv.time[a].total_cmp(&lv.time[b]).then(lv.lo[a].cmp(&lv.lo[b])));
            cands.dedup();
            for w in cands {
                if !lv.merge_keeps_dag(v, w) {
                    continue;
                }
                let mut union = lv.members[v].clone();
                union.extend_from_slice(&lv.members[w]);
                let gid = &lv.gid;
                if !ctx.fits(&union, |a| gid[a] == v || gid[a] == w) {
                    continue;
                }
                lv.merge(v, w);
                debug_assert!(is_convex(ctx.part, &lv.members[v]));
                consumed[v] = true;
                consumed[w] = true;
                live -= 1;
                break;
            }
        }
        if live == cur.len() {
            break;
        }
        let next: Vec<Vec<usize>> = lv.members.into_iter().filter(|g| !g.is_empty()).collect();
        levels.push(next);
    }
    Ok(GroupHierarchy::from_levels(levels, n))
}

/// Moves single children between parents when that strictly lowers the
/// communication time of the parent level without raising it at the top.
pub fn uncoarsen(ctx: &BlockContext, h: &GroupHierarchy) -> GroupHierarchy {
    let n = ctx.part.len();
    let mut groups = h.levels.clone();
    let mut assign: Vec<Vec<usize>> = groups.iter().map(|lv| assignment(lv, n)).collect();
    let top = groups.len().saturating_sub(1);
    let mut pairs: Vec<BTreeMap<(usize, usize), u64>> = assign.iter().map(|a| ctx.pair_bytes(a)).collect();

    for l in (0..top).rev() {
        let up = l + 1;
        for u in 0..groups[up].len() {
            let children: Vec<usize> = {
                let mut c: Vec<usize> = groups[up][u].iter().map(|&a| assign[l][a]).collect();
                c.dedup();
                c.sort_unstable();
                c.dedup();
                c
            };
            if children.len() != 2 {
                continue;
            }
            let mut best: Option<(f64, usize, usize)> = None;
            for &c in &children {
                let atoms = &groups[l][c];
                let mut targets: BTreeSet<usize> = BTreeSet::new();
                for &a in atoms {
                    for &i in &ctx.touching[a] {
                        let cv = &ctx.cut[i];
                        for x in std::iter::once(cv.owner).chain(cv.consumers.iter().copied()) {
                            if assign[up][x] != u {
                                targets.insert(assign[up][x]);
                            }
                        }
                    }
                }
                for t in targets {
                    let d = ctx.comm_delta(&assign[up], &pairs[up], atoms, t);
                    if d < -1e-15 && best.map_or(true, |(bd, _, _)| d < bd) {
                        if move_is_feasible(ctx, &groups, &assign, &pairs, up, u, t, atoms) {
                            best = Some((d, c, t));
                        }
                    }
                }
            }
            if let Some((_, c, t)) = best {
                let atoms = groups[l][c].clone();
                let (rf, rt) = representatives(&groups[up], u, t, &atoms);
                for lv in up..groups.len() {
                    let (from, to) = (assign[lv][rf], assign[lv][rt]);
                    if from == to {
                        break;
                    }
                    groups[lv][from].retain(|a| atoms.binary_search(a).is_err());
                    groups[lv][to].extend_from_slice(&atoms);
                    groups[lv][to].sort_unstable();
                    for &a in &atoms {
                        assign[lv][a] = to;
                    }
                    pairs[lv] = ctx.pair_bytes(&assign[lv]);
                }
            }
        }
    }
    GroupHierarchy::from_levels(groups, n)
}

#[allow(clippy::too_many_arguments)]
fn move_is_feasible(
    ctx: &BlockContext,
    groups: &[Vec<Vec<usize>>],
    assign: &[Vec<usize>],
    pairs: &[BTreeMap<(usize, usize), u64>],
    up: usize,
    u: usize,
    t: usize,
    atoms: &[usize],
) -> bool {
    let top = groups.len() - 1;
    let (rf, rt) = representatives(&groups[up], u, t, atoms);
    for lv in up..groups.len() {
        let asg = &assign[lv];
        let (from, to) = (asg[rf], asg[rt]);
        if from == to {
            return true;
        }
        if lv == top && ctx.comm_delta(asg, &pairs[lv], atoms, to) > 1e-15 {
            return false;
        }
        let remaining: Vec<usize> = groups[lv][from].iter().copied().filter(|a| atoms.binary_search(a).is_err()).collect();
        let mut grown = groups[lv][to].clone();
        grown.extend_from_slice(atoms);
        grown.sort_unstable();
        let in_rem = |a: usize| asg[a] == from && atoms.binary_search(&a).is_err();
        let in_grown = |a: usize| asg[a] == to || atoms.binary_search(&a).is_ok();
        if !convex_with(ctx.part, &remaining, in_rem) || !convex_with(ctx.part, &grown, in_grown) {
            return false;
        }
        if !ctx.fits(&remaining, in_rem) || !ctx.fits(&grown, in_grown) {
            return false;
        }
        let mut moved = asg.clone();
        for &a in atoms {
            moved[a] = to;
        }
        if !quotient_is_acyclic(ctx.part, &moved, groups[lv].len()) {
            return false;
        }
    }
    true
}

/// Kahn's algorithm on the group quotient of an atom assignment.
fn quotient_is_acyclic(p: &AtomicPartition, assign: &[usize], groups: usize) -> bool {
    let mut succ = vec![BTreeSet::new(); groups];
    for a in 0..p.len() {
        for &b in p.succ(a) {
            if assign[a] != assign[b] {
                succ[assign[a]].insert(assign[b]);
            }
        }
    }
    let mut indeg = vec![0usize; groups];
    for s in &succ {
        for &y in s {
            indeg[y] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..groups).filter(|&g| indeg[g] == 0).collect();
    let mut seen = 0;
    while let Some(g) = ready.pop() {
        seen += 1;
        for &y in &succ[g] {
            indeg[y] -= 1;
            if indeg[y] == 0 {
                ready.push(y);
            }
        }
    }
    seen == groups
}

/// An atom that stays in `u` and an atom of `t`, used to follow both groups up the hierarchy.
fn representatives(level: &[Vec<usize>], u: usize, t: usize, moved: &[usize]) -> (usize, usize) {
    let stay = *level[u].iter().find(|a| moved.binary_search(a).is_err()).expect("a child stays behind");
    (stay, level[t][0])
}

/// Topological order of the top-level groups, ties broken by smallest atom.
fn topo_groups(ctx: &BlockContext, groups: &[Vec<usize>]) -> Vec<usize> {
    let lv = Level::new(ctx, groups);
    let mut indeg: Vec<usize> = lv.pred.iter().map(BTreeSet::len).collect();
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..groups.len()).filter(|&g| indeg[g] == 0).map(|g| Reverse((lv.lo[g], g))).collect();
    let mut order = Vec::with_capacity(groups.len());
    while let Some(Reverse((_, g))) = heap.pop() {
        order.push(g);
        for &s in &lv.succ[g] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                heap.push(Reverse((lv.lo[s], s)));
            }
        }
    }
    assert_eq!(order.len(), groups.len(), "group quotient must be acyclic");
    order
}

/// Merges topological-list neighbours of the top level until `k` remain.
pub fn compact(ctx: &BlockContext, h: &GroupHierarchy, k: usize) -> Result<BlockSet, BlockError> {
    let top = h.top();
    let mut list: Vec<Vec<usize>> = topo_groups(ctx, top).into_iter().map(|g| top[g].clone()).collect();
    let mut times: Vec<f64> = list.iter().map(|g| ctx.time(g)).collect();
    let fits_union = |x: &[usize], y: &[usize]| {
        let mut u = x.to_vec();
        u.extend_from_slice(y);
        u.sort_unstable();
        ctx.fits(&u, |a| u.binary_search(&a).is_ok())
    };
    while list.len() > k {
        let mut order: Vec<usize> = (0..list.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(list[a][0].cmp(&list[b][0])));
        let mut merged = None;
        'pick: for v in order {
            let mut nbrs: Vec<usize> = [v.checked_sub(1), (v + 1 < list.len()).then_some(v + 1)].into_iter().flatten().collect();
            nbrs.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(list[a][0].cmp(&list[b][0])));
            for w in nbrs {
                if fits_union(&list[v], &list[w]) {
                    merged = Some((v.min(w), v.max(w)));
                    break 'pick;
                }
            }
        }
        let Some((i, j)) = merged else {
            return Err(BlockError::CompactionStuck { groups: list.len(), k });
        };
        let tail = list.remove(j);
        list[i].extend(tail);
        list[i].sort_unstable();
        times[i] += times.remove(j);
    }
    let blocks = list
        .into_iter()
        .enumerate()
        .map(|(i, atoms)| {
            let cost = ctx.profile(&atoms, |a| atoms.binary_search(&a).is_ok());
            Block { id: format!("b{i:03}"), atoms, cost }
        })
        .collect();
    Ok(BlockSet { blocks })
}

/// Shifts atoms between neighbouring blocks to lower the largest block time.
///
/// Blocks are taken in list order, which is a topological order of the block
/// quotient. A sink of block `i` may move to `i + 1` and a source of block `i`
/// to `i - 1`; such moves keep every block convex and the list topological.
/// A move may cascade through several blocks and is applied only when every
/// block it touches ends strictly below the current maximum and fits memory.
pub fn rebalance(ctx: &BlockContext, blocks: &BlockSet) -> BlockSet {
    let n = ctx.part.len();
    let mut list: Vec<Vec<usize>> = blocks.blocks.iter().map(|b| b.atoms.clone()).collect();
    let mut assign = assignment(&list, n);
    let mut times: Vec<f64> = list.iter().map(|g| ctx.time(g)).collect();
    loop {
        let max = times.iter().copied().fold(0.0, f64::max);
        let best = (0..list.len()).filter(|&i| times[i] == max).find_map(|i| {
            (1..list.len()).find_map(|m| {
                let fwd = shift_path(ctx, &list, &assign, &times, i, m, true, max);
                let bwd = shift_path(ctx, &list, &assign, &times, i, m, false, max);
                match (fwd, bwd) {
                    (Some(f), Some(b)) => Some(if b.1 < f.1 { b } else { f }),
                    (f, b) => f.or(b),
                }
            })
        });
        let Some((moves, _)) = best else { break };
        let mut touched = Vec::new();
        for &(a, to) in &moves {
            touched.push(assign[a]);
            touched.push(to);
            assign[a] = to;
        }
        touched.sort_unstable();
        touched.dedup();
        for g in touched {
            list[g] = (0..n).filter(|&a| assign[a] == g).collect();
            times[g] = ctx.time(&list[g]);
            debug_assert!(is_convex(ctx.part, &list[g]));
        }
    }
    let blocks = list
        .into_iter()
        .enumerate()
        .map(|(i, atoms)| {
            let cost = ctx.profile(&atoms, |a| atoms.binary_search(&a).is_ok());
            Block { id: format!("b{i:03}"), atoms, cost }
        })
        .collect();
    BlockSet { blocks }
}

/// Moves for a cascade of `m` single-atom hops starting at block `start`,
/// with the largest resulting time among the touched blocks.
#[allow(clippy::too_many_arguments)]
fn shift_path(
    ctx: &BlockContext,
    list: &[Vec<usize>],
    assign: &[usize],
    times: &[f64],
    start: usize,
    m: usize,
    forward: bool,
    max: f64,
) -> Option<(Vec<(usize, usize)>, f64)> {
    let end = if forward { start + m } else { start.checked_sub(m)? };
    if end >= list.len() || (list[start].len() < 2) {
        return None;
    }
    let mut asg = assign.to_vec();
    let mut moves = Vec::with_capacity(m);
    let mut incoming = 0.0;
    let mut worst: f64 = 0.0;
    let mut cur = start;
    for _ in 0..m {
        let next = if forward { cur + 1 } else { cur - 1 };
        let members: Vec<usize> = list[cur]
            .iter()
            .copied()
            .chain(moves.last().map(|&(a, _)| a))
            .filter(|&a| asg[a] == cur)
            .collect();
        let leaves = |a: usize| {
            let nb = if forward { ctx.part.succ(a) } else { ctx.part.pred(a) };
            nb.iter().all(|&x| asg[x] != cur)
        };
        let floor = times[cur] + incoming - max;
        let mut cands: Vec<(f64, usize)> = members
            .iter()
            .copied()
            .filter(|&a| leaves(a))
            .map(|a| (ctx.costs.time_per_sample(a), a))
            .filter(|&(w, _)| w > floor && w > 0.0)
            .collect();
        cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let (pick, t) = cands.into_iter().find_map(|(w, a)| {
            let rest: Vec<usize> = members.iter().copied().filter(|&x| x != a).collect();
            let t = ctx.time(&rest);
            (t < max && ctx.fits(&rest, |x| asg[x] == cur && x != a)).then_some(((w, a), t))
        })?;
        worst = worst.max(t);
        asg[pick.1] = next;
        moves.push((pick.1, next));
        incoming = pick.0;
        cur = next;
    }
    let mut last: Vec<usize> = list[cur].clone();
    last.push(moves.last()?.0);
    last.sort_unstable();
    let t = ctx.time(&last);
    if t >= max || !ctx.fits(&last, |x| asg[x] == cur) {
        return None;
    }
    Some((moves, worst.max(t)))
}

/// Coarsen, uncoarsen, compact into `k` blocks and rebalance them.
pub fn partition_blocks(ctx: &BlockContext, k: usize) -> Result<BlockSet, BlockError> {
    let h = coarsen(ctx, k)?;
    let h = uncoarsen(ctx, &h);
    Ok(rebalance(ctx, &compact(ctx, &h, k)?))
}
