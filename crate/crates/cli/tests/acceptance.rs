#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::VecDeque;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::random_instance;
use pipecut::atomic::{build_atomic_subcomponents, AtomicPartition};
use pipecut::blocks::{coarsen, is_convex, partition_blocks, uncoarsen, BlockContext, BlockSet};
use pipecut::cost::{AtomCosts, CostModel, CostModelConfig};
use pipecut::graph::{count_params, TaskGraph};
use pipecut::models::{gen_bert_like, gen_resnet_like};
use pipecut::sim::{check_schedule, simulate};
use pipecut::stages::*;
use pipecut::ClusterSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 200;
const DP_TIME_LIMIT: Duration = Duration::from_secs(60);
const FEWER_VISITS_MIN: f64 = 0.90;
const PARAM_TOL_BERT: f64 = 0.03;
const PARAM_TOL_RESNET: f64 = 0.05;
const PARAM_TIME_LIMIT: Duration = Duration::from_secs(5);
const FORMULA_TOL: f64 = 1e-9;
const BLOCK_SEARCH_LIMIT: Duration = Duration::from_secs(600);
const BUDGET_FACTOR: u64 = 10;
const BALANCE_MAX: f64 = 1.5;
const NAIVE_MIN: f64 = 1.66;
const BALANCE_MIN_CONFIGS: usize = 4;
const DEVICE_MEMORY: u64 = 32 << 30;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("{} C{id} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

/// Structural checks accumulated from every other criterion.
#[derive(Default)]
struct Invariants {
    plans: usize,
    groups: usize,
    schedules: usize,
    violations: Vec<String>,
}

impl Invariants {
    fn plan(&mut self, what: &str, plan: &Plan, prof: &dyn StageProfiler, cluster: &ClusterSpec) {
        self.plans += 1;
        let bad = validate_plan(plan, prof, cluster);
        if !bad.is_empty() {
            self.violations.push(format!("{what}: {bad:?}"));
            return;
        }
        match simulate(plan, prof, cluster) {
            Ok(s) => {
                self.schedules += 1;
                let bad = check_schedule(&s);
                if !bad.is_empty() {
                    self.violations.push(format!("{what}: {bad:?}"));
                }
            }
            Err(e) => self.violations.push(format!("{what}: {e}")),
        }
    }

    fn groups(&mut self, what: &str, ctx: &BlockContext, groups: &[Vec<usize>]) {
        let n = ctx.part.len();
        let mut assign = vec![usize::MAX; n];
        for (i, g) in groups.iter().enumerate() {
            for &a in g {
                assign[a] = i;
            }
        }
        if assign.contains(&usize::MAX) || groups.iter().map(Vec::len).sum::<usize>() != n {
            self.violations.push(format!("{what}: groups do not partition the atoms"));
        }
        if !quotient_is_acyclic(ctx.part, &assign, groups.len()) {
            self.violations.push(format!("{what}: cyclic quotient"));
        }
        for g in groups {
            self.groups += 1;
            if !is_convex(ctx.part, g) {
                self.violations.push(format!("{what}: non-convex group starting at atom {}", g[0]));
            }
            let mem = ctx.profile(g, |x| assign[x] == assign[g[0]]).mem_bytes;
            if mem > ctx.memory_limit() {
                self.violations.push(format!("{what}: group at atom {} needs {mem} bytes", g[0]));
            }
        }
    }
}

fn quotient_is_acyclic(p: &AtomicPartition, assign: &[usize], groups: usize) -> bool {
    let mut indeg = vec![0usize; groups];
    let mut edges = vec![Vec::new(); groups];
    for a in 0..p.len() {
        for &b in p.succ(a) {
            let (x, y) = (assign[a], assign[b]);
            if x != y && !edges[x].contains(&y) {
                edges[x].push(y);
                indeg[y] += 1;
            }
        }
    }
    let mut queue: VecDeque<usize> = (0..groups).filter(|&g| indeg[g] == 0).collect();
    let mut seen = 0;
    while let Some(g) = queue.pop_front() {
        seen += 1;
        for &y in &edges[g] {
            indeg[y] -= 1;
            if indeg[y] == 0 {
                queue.push_back(y);
            }
        }
    }
    seen == groups
}

fn prepared(g: &TaskGraph) -> (AtomicPartition, AtomCosts) {
    let part = build_atomic_subcomponents(g).unwrap();
    let costs = AtomCosts::new(&part, &CostModel::new(CostModelConfig::default()));
    (part, costs)
}

fn cluster_32gb(nodes: usize) -> ClusterSpec {
    ClusterSpec { device_memory_bytes: DEVICE_MEMORY, ..ClusterSpec::v100_nodes(nodes) }
}

fn dp_oracle(r: &mut Report, inv: &mut Invariants) {
    let start = Instant::now();
    let (mut equal, mut identical, mut fewer, mut feasible) = (0, 0, 0, 0);
    for seed in 0..INSTANCES {
        let inst = random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let on = DpOptions { pruning: true, ..DpOptions::default() };
        let off = DpOptions { pruning: false, ..on };
        let (dp, s_on) = form_stage_dp(&inst.prof, &inst.args, &inst.cluster, &on).unwrap();
        let (bf, _) = brute_force_partition(&inst.prof, &inst.args, &inst.cluster, &on).unwrap();
        let (unpruned, s_off) = form_stage_dp(&inst.prof, &inst.args, &inst.cluster, &off).unwrap();
        match (&dp, &bf) {
            (Some(a), Some(b)) if a.objective == b.objective => equal += 1,
            (None, None) => equal += 1,
            _ => {}
        }
        if dp == unpruned {
            identical += 1;
        }
        if s_on.visits < s_off.visits {
            fewer += 1;
        }
        if let Some(p) = &dp {
            feasible += 1;
            inv.plan(&format!("random instance {seed}"), p, &inst.prof, &inst.cluster);
        }
    }
    let elapsed = start.elapsed();
    let n = INSTANCES as usize;
    r.line(
        1,
        "DP matches exhaustive search",
        equal == n && elapsed < DP_TIME_LIMIT,
        format!("{equal}/{n} objectives equal ({feasible} feasible), {:.2} s (limit {} s)", elapsed.as_secs_f64(), DP_TIME_LIMIT.as_secs()),
    );
    let frac = fewer as f64 / n as f64;
    r.line(
        2,
        "pruning is sound",
        identical == n && frac >= FEWER_VISITS_MIN,
        format!("{identical}/{n} plans identical, strictly fewer visits on {:.1}% (min {:.0}%)", 100.0 * frac, 100.0 * FEWER_VISITS_MIN),
    );
}

fn param_counts(r: &mut Report) {
    let start = Instant::now();
    let count = |g: TaskGraph| count_params(&g, 4).elements as f64;
    let cases = [
        ("bert 1024x24", count(gen_bert_like(1024, 24, 512, 30522).unwrap()), 340e6, PARAM_TOL_BERT),
        ("bert 2048x256", count(gen_bert_like(2048, 256, 512, 30522).unwrap()), 12.9e9, PARAM_TOL_BERT),
        ("resnet 152x8", count(gen_resnet_like(152, 8).unwrap()), 3.7e9, PARAM_TOL_RESNET),
    ];
    let elapsed = start.elapsed();
    let ok = cases.iter().all(|(_, n, t, tol)| (n / t - 1.0).abs() <= *tol) && elapsed < PARAM_TIME_LIMIT;
    let detail: Vec<String> = cases
        .iter()
        .map(|(name, n, t, tol)| format!("{name} {:.4}B vs {:.3}B ({:+.2}%, tol {:.0}%)", n / 1e9, t / 1e9, 100.0 * (n / t - 1.0), 100.0 * tol))
        .collect();
    r.line(3, "parameter counts", ok, format!("{}; {:.2} s", detail.join(", "), elapsed.as_secs_f64()));
}

fn pipeline_formula(r: &mut Report, inv: &mut Invariants) {
    let cluster = common::small_cluster(u64::MAX);
    let (tf, tb) = (1.3e-3, 2.9e-3);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for s in 1..=4usize {
        for mb in [1u64, 2, 4, 8] {
            let b = SyntheticBlock { fwd_per_sample: tf, bwd_per_sample: tb, param_bytes: 0, act_per_sample: 1, out_per_sample: 0 };
            let prof = SyntheticProfiler { blocks: vec![b; s], param_memory_factor: 1.0 };
            let args = DpArgs { stages: s, devices: s, batch_size: mb, replica_factor: 1, microbatches: mb };
            let opts = DpOptions { checkpointing: false, ..DpOptions::default() };
            let plan = form_stage_dp(&prof, &args, &cluster, &opts).unwrap().0.unwrap();
            inv.plan(&format!("uniform S={s} MB={mb}"), &plan, &prof, &cluster);
            let t = simulate(&plan, &prof, &cluster).unwrap().iteration_time_sec;
            let expect = (mb as f64 + s as f64 - 1.0) * (tf + tb);
            worst = worst.max((t - expect).abs() / expect);
            cases += 1;
        }
    }
    r.line(
        4,
        "uniform pipeline closed form",
        worst <= FORMULA_TOL,
        format!("{cases} (S, MB) pairs, max relative error {worst:.2e} (tol {FORMULA_TOL:.0e})"),
    );
}

fn coarsening_effect(r: &mut Report, inv: &mut Invariants) {
    let g = gen_bert_like(2048, 96, 512, 30522).unwrap();
    let (part, costs) = prepared(&g);
    let cluster = cluster_32gb(4);
    let start = Instant::now();
    let ctx = BlockContext::new(&part, &costs, &cluster);
    let blocks = partition_blocks(&ctx, 32).unwrap();
    let prof = BlockProfiler::new(&part, &costs, &blocks);
    let out = form_stage(&prof, 256, &cluster, &DpOptions::default()).unwrap();
    let elapsed = start.elapsed();
    inv.groups("96-layer blocks", &ctx, &blocks.blocks.iter().map(|b| b.atoms.clone()).collect::<Vec<_>>());
    let Some(plan) = out.plan else {
        r.line(5, "blocks shrink the search", false, "no plan over blocks".into());
        return;
    };
    inv.plan("96-layer plan", &plan, &prof, &cluster);
    let budget = BUDGET_FACTOR * out.stats.evaluations;
    let atoms = BlockProfiler::atoms(&part, &costs);
    let direct = form_stage(&atoms, 256, &cluster, &DpOptions { budget: Some(budget), ..DpOptions::default() });
    let exceeded = matches!(direct, Err(StageError::BudgetExceeded { .. }));
    r.line(
        5,
        "blocks shrink the search",
        elapsed < BLOCK_SEARCH_LIMIT && exceeded,
        format!(
            "{} atoms -> 32 blocks, S={} MB={} R={}, {} evaluations in {:.2} s (limit {} s); atom-level search {} a {budget}-evaluation budget",
            part.len(),
            plan.num_stages(),
            plan.microbatches,
            plan.replica_factor,
            out.stats.evaluations,
            elapsed.as_secs_f64(),
            BLOCK_SEARCH_LIMIT.as_secs(),
            if exceeded { "exceeds" } else { "stays within" },
        ),
    );
}

/// Best achievable max part sum when cutting `w` into `k` contiguous parts.
fn contiguous_min_max(w: &[f64], k: usize) -> f64 {
    let n = w.len();
    let mut pre = vec![0.0; n + 1];
    for i in 0..n {
        pre[i + 1] = pre[i] + w[i];
    }
    let mut best = vec![f64::INFINITY; n + 1];
    best[0] = 0.0;
    for _ in 0..k {
        let mut next = vec![f64::INFINITY; n + 1];
        for j in 1..=n {
            for i in 0..j {
                next[j] = next[j].min(best[i].max(pre[j] - pre[i]));
            }
        }
        best = next;
    }
    best[n]
}

/// Block per atom when cutting by transformer layer: embeddings go first,
/// the head goes last, layer `l` of `L` goes to block `l * k / L`.
fn layer_block(part: &AtomicPartition, atom: usize, layers: usize, k: usize) -> usize {
    let ids = &part.atoms[atom].node_ids;
    if ids.iter().any(|id| id.starts_with("head/")) {
        return k - 1;
    }
    ids.iter()
        .find_map(|id| id.strip_prefix('l').and_then(|r| r.split('/').next()).and_then(|l| l.parse::<usize>().ok()))
        .map_or(0, |l| l * k / layers)
}

fn ratio(times: &[f64]) -> f64 {
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    times.iter().copied().fold(0.0, f64::max) / mean
}

fn balance(r: &mut Report, inv: &mut Invariants) {
    let k = 8;
    let cluster = cluster_32gb(4);
    let (mut qualifying, mut passing) = (0, 0);
    let mut worst: f64 = 0.0;
    for h in [512, 768, 1024, 1536] {
        for layers in [12, 16, 20, 24] {
            let g = gen_bert_like(h, layers, 512, 30522).unwrap();
            let (part, costs) = prepared(&g);
            let ctx = BlockContext::new(&part, &costs, &cluster);
            let hier = uncoarsen(&ctx, &coarsen(&ctx, k).unwrap());
            for (l, lv) in hier.levels.iter().enumerate() {
                inv.groups(&format!("bert {h}x{layers} level {l}"), &ctx, lv);
            }
            let blocks: BlockSet = partition_blocks(&ctx, k).unwrap();
            inv.groups(&format!("bert {h}x{layers} blocks"), &ctx, &blocks.blocks.iter().map(|b| b.atoms.clone()).collect::<Vec<_>>());

            let atom_times: Vec<f64> = (0..part.len()).map(|a| ctx.time(&[a])).collect();
            let mean = atom_times.iter().sum::<f64>() / k as f64;
            let oracle = contiguous_min_max(&atom_times, k) / mean;
            let mut naive = vec![0.0; k];
            for (a, t) in atom_times.iter().enumerate() {
                naive[layer_block(&part, a, layers, k)] += t;
            }
            let naive = ratio(&naive);
            let ours = ratio(&blocks.blocks.iter().map(|b| ctx.time(&b.atoms)).collect::<Vec<_>>());
            let q = oracle <= BALANCE_MAX && naive >= NAIVE_MIN;
            println!(
                "     bert {h:>4}x{layers:<2} {:>3} atoms  blocks {ours:.3}  contiguous optimum {oracle:.3}  layer split {naive:.3}{}",
                part.len(),
                if q { "" } else { "  (not a qualifying configuration)" }
            );
            if q {
                qualifying += 1;
                worst = worst.max(ours);
                if ours <= BALANCE_MAX {
                    passing += 1;
                }
            }
        }
    }
    r.line(
        6,
        "block balance",
        qualifying >= BALANCE_MIN_CONFIGS && passing == qualifying,
        format!(
            "{passing}/{qualifying} qualifying graphs have max/mean <= {BALANCE_MAX} (worst {worst:.3}); qualifying means contiguous optimum <= {BALANCE_MAX} and layer split >= {NAIVE_MIN}; at least {BALANCE_MIN_CONFIGS} required"
        ),
    );
}

fn pipecut(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pipecut")).args(args).output().expect("run pipecut")
}

fn write_cluster(dir: &Path, nodes: usize) -> String {
    let path = dir.join(format!("v100x{nodes}.json"));
    std::fs::write(&path, serde_json::to_string(&cluster_32gb(nodes)).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn cli_plan(inv: &mut Invariants, dir: &Path) -> Result<(), String> {
    let cluster = write_cluster(dir, 1);
    let graph = dir.join("bert.json").to_string_lossy().into_owned();
    let out = dir.join("plan").to_string_lossy().into_owned();
    let gen = pipecut(&["generate", "bert", "--hidden", "512", "--layers", "8", "--out", &graph]);
    let part = pipecut(&["partition", "--graph", &graph, "--cluster", &cluster, "--k", "16", "--batch-size", "64", "--out", &out]);
    if !gen.status.success() || !part.status.success() {
        return Err(String::from_utf8_lossy(&part.stderr).into_owned());
    }
    let g = pipecut::graph::load_graph(std::fs::File::open(&graph).unwrap()).unwrap();
    let (p, costs) = prepared(&g);
    let read = |f: &str| serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(Path::new(&out).join(f)).unwrap()).unwrap();
    let blocks = BlockSet::from_json(&p, read("blocks.json")).map_err(|e| e.to_string())?;
    let plan: Plan = serde_json::from_value(read("plan.json")).map_err(|e| e.to_string())?;
    let spec = cluster_32gb(1);
    let ctx = BlockContext::new(&p, &costs, &spec);
    inv.groups("cli blocks", &ctx, &blocks.blocks.iter().map(|b| b.atoms.clone()).collect::<Vec<_>>());
    inv.plan("cli plan.json", &plan, &BlockProfiler::new(&p, &costs, &blocks), &spec);
    Ok(())
}

fn infeasibility_ordering(r: &mut Report, dir: &Path) {
    let cluster = write_cluster(dir, 4);
    let csv_path = dir.join("sweep.csv").to_string_lossy().into_owned();
    let layers = [24usize, 48, 96, 144, 192];
    let list = layers.map(|l| l.to_string()).join(",");
    let out = pipecut(&[
        "sweep", "--model", "bert", "--width", "1024", "--layers", &list, "--cluster", &cluster,
        "--mode", "partitioned,data-parallel", "--batch-size", "256", "--k", "32", "--out", &csv_path,
    ]);
    if !out.status.success() {
        r.line(8, "partitioning extends model scale", false, format!("sweep failed: {}", String::from_utf8_lossy(&out.stderr)));
        return;
    }
    let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let first_infeasible = |mode: &str| {
        rows.iter()
            .filter(|row| &row[6] == mode && &row[7] == "INFEASIBLE")
            .map(|row| (row[2].parse::<usize>().unwrap(), row[3].parse::<u64>().unwrap()))
            .min()
    };
    let dp = first_infeasible("data-parallel");
    let pp = first_infeasible("partitioned");
    let fmt = |x: Option<(usize, u64)>| match x {
        Some((l, p)) => format!("{l} layers ({:.2}B params)", p as f64 / 1e9),
        None => format!("none up to {} layers", layers[layers.len() - 1]),
    };
    let ok = match (dp, pp) {
        (Some(a), Some(b)) => a.1 < b.1,
        (Some(_), None) => true,
        _ => false,
    };
    r.line(
        8,
        "partitioning extends model scale",
        ok,
        format!("bert h=1024 on 4x8 devices with 32 GiB: data parallel first infeasible at {}, partitioned at {}", fmt(dp), fmt(pp)),
    );
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Report { failed: 0 };
    let mut inv = Invariants::default();
    dp_oracle(&mut r, &mut inv);
    param_counts(&mut r);
    pipeline_formula(&mut r, &mut inv);
    coarsening_effect(&mut r, &mut inv);
    balance(&mut r, &mut inv);
    if let Err(e) = cli_plan(&mut inv, dir.path()) {
        inv.violations.push(format!("cli partition: {e}"));
    }
    r.line(
        7,
        "structural invariants",
        inv.violations.is_empty(),
        format!(
            "{} plans, {} schedules, {} groups checked; {} violations{}",
            inv.plans,
            inv.schedules,
            inv.groups,
            inv.violations.len(),
            inv.violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    );
    infeasibility_ordering(&mut r, dir.path());
    println!("acceptance: {} of 8 criteria failed", r.failed);
    if r.failed > 0 {
        std::process::exit(1);
    }
}
