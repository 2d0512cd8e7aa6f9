#![allow(dead_code)]

use pipecut::cluster::ClusterSpec;
use pipecut::graph::{GraphBuilder, TaskGraph};
use pipecut::stages::{DpArgs, StageProfiler, SyntheticBlock, SyntheticProfiler};
use rand::Rng;

pub fn small_cluster(memory: u64) -> ClusterSpec {
    ClusterSpec {
        num_nodes: 2,
        devices_per_node: 8,
        device_memory_bytes: memory,
        bw_intra_bytes_per_sec: 1e9,
        bw_inter_bytes_per_sec: 1e9,
        link_latency_sec: 1e-6,
    }
}

/// Block chain whose backward time is twice the forward time, as in the cost model.
pub fn random_blocks(rng: &mut impl Rng, n: usize) -> SyntheticProfiler {
    let blocks = (0..n)
        .map(|_| {
            let f = rng.gen_range(0.1..2.0) * 1e-3;
            SyntheticBlock {
                fwd_per_sample: f,
                bwd_per_sample: 2.0 * f,
                param_bytes: rng.gen_range(0..2000),
                act_per_sample: rng.gen_range(1..500),
                out_per_sample: rng.gen_range(0..400),
            }
        })
        .collect();
    SyntheticProfiler { blocks, param_memory_factor: 4.0 }
}

fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 1..=total.saturating_sub(parts - 1) {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Smallest device memory under which some plan with exactly `args.devices`
/// devices fits, found by enumerating every split and device assignment.
pub fn memory_threshold(prof: &dyn StageProfiler, args: &DpArgs, checkpointing: bool) -> Option<u64> {
    let nb = prof.num_blocks();
    let mut best: Option<u64> = None;
    for cut in compositions(nb, args.stages) {
        for dv in compositions(args.devices, args.stages) {
            let mut from = 0;
            let mut worst = 0;
            let mut ok = true;
            for (&len, &d) in cut.iter().zip(&dv) {
                let b = args.batch_size / (args.replica_factor as u64 * args.microbatches * d as u64);
                if b == 0 {
                    ok = false;
                    break;
                }
                worst = worst.max(prof.profile_span(from, from + len, b, checkpointing).mem_bytes);
                from += len;
            }
            if ok {
                best = Some(best.map_or(worst, |x: u64| x.min(worst)));
            }
        }
    }
    best
}

pub struct Instance {
    pub prof: SyntheticProfiler,
    pub args: DpArgs,
    pub cluster: ClusterSpec,
}

/// Instances with at most 10 blocks, 4 stages and 6 devices. Memory sits
/// just above the feasibility threshold so that the device bound matters.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let nb = rng.gen_range(2..=10);
    let stages = rng.gen_range(1..=nb.min(4));
    let devices = rng.gen_range(stages + 1..=6);
    let prof = random_blocks(rng, nb);
    let args = DpArgs {
        stages,
        devices,
        batch_size: [64, 128, 256][rng.gen_range(0..3)],
        replica_factor: rng.gen_range(1..=2),
        microbatches: [1, 2, 4][rng.gen_range(0..3)],
    };
    let threshold = memory_threshold(&prof, &args, stages > 1).unwrap_or(1);
    let cluster = small_cluster((threshold as f64 * rng.gen_range(1.0..1.05)) as u64);
    Instance { prof, args, cluster }
}

/// Random DAG of `n` tasks. Each task reads one or two earlier values and
/// its own parameter; some parameters pass through a constant transpose.
pub fn random_dag(rng: &mut impl Rng, n: usize) -> TaskGraph {
    let mut b = GraphBuilder::new();
    b.input("x", rng.gen_range(1..64));
    let mut values = vec!["x".to_string()];
    let mut consumed = vec![false];
    for i in 0..n {
        let out = format!("v{i}");
        let w = format!("w{i}");
        b.value(&out, 0, rng.gen_range(1..256));
        b.param(&w, rng.gen_range(1..512));
        let mut weight = w.clone();
        if rng.gen_bool(0.2) {
            weight = format!("wt{i}");
            b.value(&weight, rng.gen_range(1..512), 0);
            b.task(&format!("tr{i}"), "transpose", 0.0, &[&w], &[&weight]);
        }
        let lo = values.len().saturating_sub(4);
        let a = rng.gen_range(lo..values.len());
        let mut ins = vec![values[a].clone()];
        consumed[a] = true;
        if values.len() > 1 && rng.gen_bool(0.4) {
            let c = rng.gen_range(0..values.len());
            if c != a {
                ins.push(values[c].clone());
                consumed[c] = true;
            }
        }
        ins.push(weight);
        let refs: Vec<&str> = ins.iter().map(String::as_str).collect();
        b.task(&format!("t{i}"), "op", rng.gen_range(1.0..1000.0) * 1e6, &refs, &[&out]);
        values.push(out);
        consumed.push(false);
    }
    for (v, c) in values.iter().zip(&consumed) {
        if !c {
            b.output(v);
        }
    }
    b.build().unwrap()
}

pub fn chain(flops: &[f64], param_bytes: u64, act_bytes: u64) -> TaskGraph {
    let mut b = GraphBuilder::new();
    b.input("x", act_bytes);
    let mut prev = "x".to_string();
    for (i, &f) in flops.iter().enumerate() {
        let (v, w) = (format!("v{i}"), format!("w{i}"));
        b.value(&v, 0, act_bytes).param(&w, param_bytes);
        b.task(&format!("t{i}"), "op", f, &[&prev, &w], &[&v]);
        prev = v;
    }
    b.output(&prev);
    b.build().unwrap()
}
