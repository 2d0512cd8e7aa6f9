//! Event-level replay of a plan as a synchronous fill-and-drain pipeline.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::cluster::ClusterSpec;
use crate::cost::comm_time_over;
use crate::stages::{validate_plan, Plan, PlanViolation, StageProfiler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Fwd,
    Recompute,
    Bwd,
    Comm,
    Allreduce,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    /// First device of the stage's replica group.
    pub device: usize,
    pub stage: usize,
    pub microbatch: Option<u64>,
    pub phase: Phase,
    pub start_sec: f64,
    pub end_sec: f64,
}

/// One lane per stage. All replicas of a stage follow the same timeline, so
/// a lane stands for every device of its replica group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lane {
    pub stage: usize,
    pub devices: Vec<usize>,
    pub busy_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub events: Vec<Event>,
    pub lanes: Vec<Lane>,
    pub microbatches: u64,
    pub iteration_time_sec: f64,
    pub bubble_fraction: f64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid plan: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidPlan(Vec<PlanViolation>),
}

/// Device ids of each stage: the stages of one pipeline copy are packed
/// contiguously, and copy `j` is offset by `j` times the pipeline width.
pub fn place_devices(plan: &Plan) -> Vec<Vec<usize>> {
    let width = plan.devices();
    let mut off = 0;
    plan.stages
        .iter()
        .map(|st| {
            let mut d: Vec<usize> = (0..plan.replica_factor)
                .flat_map(|j| (off..off + st.devices).map(move |x| x + j * width))
                .collect();
            d.sort_unstable();
            off += st.devices;
            d
        })
        .collect()
}

fn same_node(a: &[usize], b: &[usize], per_node: usize) -> bool {
    let node = a[0] / per_node;
    a.iter().chain(b).all(|&d| d / per_node == node)
}

pub fn simulate(plan: &Plan, prof: &dyn StageProfiler, cluster: &ClusterSpec) -> Result<Schedule, SimError> {
    let bad = validate_plan(plan, prof, cluster);
    if !bad.is_empty() {
        return Err(SimError::InvalidPlan(bad));
    }
    let s_count = plan.stages.len();
    let mb = plan.microbatches as usize;
    let ckpt = plan.checkpointing;
    let devices = place_devices(plan);
    let lead: Vec<usize> = devices.iter().map(|d| d[0]).collect();
    let costs: Vec<_> = plan
        .stages
        .iter()
        .map(|st| prof.profile_span(st.blocks[0], st.blocks[1], st.batch, ckpt))
        .collect();
    // link s carries stage s's outputs forward and stage s+1's input gradients back
    let link: Vec<(f64, f64)> = (0..s_count.saturating_sub(1))
        .map(|s| {
            let bw = if same_node(&devices[s], &devices[s + 1], cluster.devices_per_node) {
                cluster.bw_intra_bytes_per_sec
            } else {
                cluster.bw_inter_bytes_per_sec
            };
            let t = |bytes: u64| if bytes == 0 { 0.0 } else { comm_time_over(bytes, bw, cluster.link_latency_sec) };
            (t(costs[s].out_bytes), t(costs[s + 1].in_bytes))
        })
        .collect();

    let mut events = Vec::new();
    let mut free = vec![0.0f64; s_count];
    let push = |events: &mut Vec<Event>, free: &mut [f64], s: usize, m: Option<u64>, phase, start: f64, dur: f64| {
        let end = start + dur;
        events.push(Event { device: lead[s], stage: s, microbatch: m, phase, start_sec: start, end_sec: end });
        free[s] = end;
        end
    };

    let mut arrive = vec![0.0f64; mb];
    for m in 0..mb {
        let mut ready = 0.0;
        for s in 0..s_count {
            let start = free[s].max(ready);
            let done = push(&mut events, &mut free, s, Some(m as u64), Phase::Fwd, start, costs[s].t_fwd);
            ready = if s + 1 < s_count && link[s].0 > 0.0 {
                push(&mut events, &mut free, s, Some(m as u64), Phase::Comm, done, link[s].0)
            } else {
                done
            };
        }
        arrive[m] = ready;
    }
    for m in (0..mb).rev() {
        let mut ready = arrive[m];
        for s in (0..s_count).rev() {
            let mut start = free[s].max(ready);
            if ckpt {
                start = push(&mut events, &mut free, s, Some(m as u64), Phase::Recompute, start, costs[s].t_fwd);
            }
            let done = push(&mut events, &mut free, s, Some(m as u64), Phase::Bwd, start, costs[s].t_bwd);
            ready = if s > 0 && link[s - 1].1 > 0.0 {
                push(&mut events, &mut free, s, Some(m as u64), Phase::Comm, done, link[s - 1].1)
            } else {
                done
            };
        }
    }
    for s in 0..s_count {
        let r = devices[s].len() as u64;
        if r > 1 && costs[s].param_bytes > 0 {
            let bytes = 2 * costs[s].param_bytes * (r - 1) / r;
            let dur = comm_time_over(bytes, cluster.bw_inter_bytes_per_sec, cluster.link_latency_sec);
            let start = free[s];
            push(&mut events, &mut free, s, None, Phase::Allreduce, start, dur);
        }
    }

    let iteration = events.iter().map(|e| e.end_sec).fold(0.0, f64::max);
    let lanes: Vec<Lane> = (0..s_count)
        .map(|s| {
            let busy: f64 = events.iter().filter(|e| e.stage == s).map(|e| e.end_sec - e.start_sec).sum();
            Lane {
                stage: s,
                devices: devices[s].clone(),
                busy_fraction: if iteration > 0.0 { busy / iteration } else { 0.0 },
            }
        })
        .collect();
    let mean_busy = if lanes.is_empty() {
        0.0
    } else {
        lanes.iter().map(|l| l.busy_fraction).sum::<f64>() / lanes.len() as f64
    };
    Ok(Schedule {
        events,
        lanes,
        microbatches: plan.microbatches,
        iteration_time_sec: iteration,
        bubble_fraction: if iteration > 0.0 { 1.0 - mean_busy } else { 0.0 },
    })
}

pub fn throughput(s: &Schedule, batch_size: u64) -> f64 {
    batch_size as f64 / s.iteration_time_sec
}

/// Broken synchronous-pipeline guarantees. Empty means the schedule is sound.
pub fn check_schedule(s: &Schedule) -> Vec<String> {
    let mut out = Vec::new();
    let lanes = s.lanes.len();
    let mb = s.microbatches as usize;
    let eps = 1e-12 * s.iteration_time_sec.max(1.0);
    let find = |stage: usize, m: usize, phase: Phase| {
        s.events.iter().find(|e| e.stage == stage && e.microbatch == Some(m as u64) && e.phase == phase)
    };
    for lane in 0..lanes {
        let mut ev: Vec<&Event> = s.events.iter().filter(|e| e.stage == lane).collect();
        ev.sort_by(|a, b| a.start_sec.total_cmp(&b.start_sec));
        for w in ev.windows(2) {
            if w[1].start_sec < w[0].end_sec - eps {
                out.push(format!("stage {lane}: overlapping events at {}", w[1].start_sec));
            }
        }
        for phase in [Phase::Fwd, Phase::Bwd] {
            let n = ev.iter().filter(|e| e.phase == phase).count();
            if n != mb {
                out.push(format!("stage {lane}: {n} {phase:?} events, expected {mb}"));
            }
        }
        let last_bwd = ev.iter().filter(|e| e.phase == Phase::Bwd).map(|e| e.end_sec).fold(0.0, f64::max);
        if ev.iter().any(|e| e.phase == Phase::Allreduce && e.start_sec < last_bwd - eps) {
            out.push(format!("stage {lane}: gradient sync before the last backward"));
        }
    }
    for m in 0..mb {
        for st in 0..lanes {
            let (Some(f), Some(b)) = (find(st, m, Phase::Fwd), find(st, m, Phase::Bwd)) else {
                continue;
            };
            if b.start_sec < f.end_sec - eps {
                out.push(format!("microbatch {m}: backward on stage {st} before its forward"));
            }
            if st > 0 {
                if let Some(prev) = find(st - 1, m, Phase::Fwd) {
                    if f.start_sec < prev.end_sec - eps {
                        out.push(format!("microbatch {m}: forward on stage {st} before stage {}", st - 1));
                    }
                }
            }
            if st + 1 < lanes {
                if let Some(next) = find(st + 1, m, Phase::Bwd) {
                    if b.start_sec < next.end_sec - eps {
                        out.push(format!("microbatch {m}: backward on stage {st} before stage {}", st + 1));
                    }
                }
                if let Some(last_fwd) = find(lanes - 1, m, Phase::Fwd) {
                    if b.start_sec < last_fwd.end_sec - eps {
                        out.push(format!("microbatch {m}: backward on stage {st} before the forward pass ended"));
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanttFormat {
    Text,
    Svg,
}

pub const GANTT_COLUMNS: usize = 80;

pub fn render_gantt(s: &Schedule, format: GanttFormat) -> String {
    match format {
        GanttFormat::Text => render_text(s),
        GanttFormat::Svg => render_svg(s),
    }
}

fn glyph(e: &Event) -> char {
    let m = e.microbatch.unwrap_or(0) as u8;
    match e.phase {
        Phase::Fwd => (b'0' + m % 10) as char,
        Phase::Bwd => (b'a' + m % 26) as char,
        Phase::Recompute => 'r',
        Phase::Comm => '~',
        Phase::Allreduce => '#',
    }
}

fn render_text(s: &Schedule) -> String {
    let mut out = String::new();
    if s.lanes.is_empty() || s.iteration_time_sec <= 0.0 {
        return out;
    }
    let step = s.iteration_time_sec / GANTT_COLUMNS as f64;
    for lane in &s.lanes {
        let mut row = vec!['.'; GANTT_COLUMNS];
        for e in s.events.iter().filter(|e| e.stage == lane.stage) {
            for (c, cell) in row.iter_mut().enumerate() {
                let mid = (c as f64 + 0.5) * step;
                if e.start_sec <= mid && mid < e.end_sec {
                    *cell = glyph(e);
                }
            }
        }
        let _ = writeln!(out, "dev{:>4} |{}|", lane.devices[0], row.into_iter().collect::<String>());
    }
    out
}

fn render_svg(s: &Schedule) -> String {
    const W: f64 = 960.0;
    const ROW: f64 = 24.0;
    const LEFT: f64 = 64.0;
    let h = ROW * s.lanes.len() as f64 + 8.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{h}" font-family="monospace" font-size="11">"#,
        W + LEFT
    );
    let scale = if s.iteration_time_sec > 0.0 { W / s.iteration_time_sec } else { 0.0 };
    for (i, lane) in s.lanes.iter().enumerate() {
        let y = 4.0 + i as f64 * ROW;
        let _ = writeln!(out, r#"<text x="2" y="{}">dev {}</text>"#, y + 15.0, lane.devices[0]);
        for e in s.events.iter().filter(|e| e.stage == lane.stage) {
            let fill = match e.phase {
                Phase::Fwd => "#4c78a8",
                Phase::Bwd => "#f58518",
                Phase::Recompute => "#9ecae9",
                Phase::Comm => "#bab0ac",
                Phase::Allreduce => "#54a24b",
            };
            let x = LEFT + e.start_sec * scale;
            let w = (e.end_sec - e.start_sec) * scale;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.3}" y="{y}" width="{w:.3}" height="{}" fill="{fill}" stroke="white" stroke-width="0.5"/>"#,
                ROW - 4.0
            );
            if matches!(e.phase, Phase::Fwd | Phase::Bwd) && w >= 10.0 {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.3}" y="{}" fill="white">{}</text>"#,
                    x + 2.0,
                    y + 14.0,
                    e.microbatch.unwrap_or(0)
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}
