use std::path::PathBuf;

use anyhow::Result;
use pipecut::graph::count_params;
use pipecut::models::{gen_bert_like, gen_resnet_like};
use pipecut::stages::DpOptions;
use pipecut::{ClusterSpec, CostModelConfig, TaskGraph};
use rayon::prelude::*;
use serde::Serialize;

use crate::pipeline::{block_profiler, make_blocks, plan_data_parallel, plan_stages, prepare, Infeasible};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    Bert,
    Resnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Blocks, stages and replicas chosen by the search.
    Partitioned,
    /// One stage, every device a replica.
    DataParallel,
}

pub struct Grid {
    pub model: Model,
    /// Hidden sizes (bert) or width factors (resnet).
    pub widths: Vec<usize>,
    pub layers: Vec<usize>,
    pub seq_len: usize,
    pub vocab: usize,
    pub clusters: Vec<(PathBuf, ClusterSpec)>,
    pub modes: Vec<Mode>,
    pub batch_size: u64,
    pub k: usize,
    pub opts: DpOptions,
    pub cost: CostModelConfig,
}

#[derive(Debug, Serialize)]
pub struct Row {
    pub model: Model,
    pub width: usize,
    pub layers: usize,
    pub params: u64,
    pub cluster: String,
    pub devices: usize,
    pub mode: Mode,
    pub status: String,
    pub stages: Option<usize>,
    pub microbatches: Option<u64>,
    pub replicas: Option<usize>,
    pub iteration_sec: Option<f64>,
    pub throughput: Option<f64>,
}

impl Row {
    pub fn succeeded(&self) -> bool {
        self.status == "OK"
    }
}

struct Point {
    width: usize,
    layers: usize,
    cluster: usize,
    mode: Mode,
}

impl Grid {
    fn points(&self) -> Vec<Point> {
        let mut out = Vec::new();
        for &width in &self.widths {
            for &layers in &self.layers {
                for cluster in 0..self.clusters.len() {
                    for &mode in &self.modes {
                        out.push(Point { width, layers, cluster, mode });
                    }
                }
            }
        }
        out
    }

    fn graph(&self, width: usize, layers: usize) -> Result<TaskGraph> {
        Ok(match self.model {
            Model::Bert => gen_bert_like(width, layers, self.seq_len, self.vocab)?,
            Model::Resnet => gen_resnet_like(layers, width)?,
        })
    }

    /// Rows in grid order. Errors other than infeasibility abort the sweep.
    pub fn run(&self) -> Result<Vec<Row>> {
        self.points().par_iter().map(|p| self.row(p)).collect()
    }

    fn row(&self, p: &Point) -> Result<Row> {
        let g = self.graph(p.width, p.layers)?;
        let (path, cluster) = &self.clusters[p.cluster];
        let mut row = Row {
            model: self.model,
            width: p.width,
            layers: p.layers,
            params: count_params(&g, self.cost.bytes_per_element).elements,
            cluster: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            devices: cluster.total_devices(),
            mode: p.mode,
            status: String::new(),
            stages: None,
            microbatches: None,
            replicas: None,
            iteration_sec: None,
            throughput: None,
        };
        let prep = prepare(&g, &self.cost)?;
        let planned = match p.mode {
            Mode::Partitioned => make_blocks(&prep, cluster, self.k, &mut Vec::new()).and_then(|blocks| {
                let prof = block_profiler(&prep, &blocks);
                plan_stages(&prof, cluster, self.batch_size, &self.opts, false)
            }),
            Mode::DataParallel => {
                let prof = pipecut::stages::BlockProfiler::atoms(&prep.part, &prep.costs);
                plan_data_parallel(&prof, cluster, self.batch_size)
            }
        };
        match planned {
            Ok(pl) => {
                row.status = "OK".into();
                row.stages = Some(pl.plan.num_stages());
                row.microbatches = Some(pl.plan.microbatches);
                row.replicas = Some(pl.plan.replica_factor);
                row.iteration_sec = Some(pl.schedule.iteration_time_sec);
                row.throughput = Some(self.batch_size as f64 / pl.schedule.iteration_time_sec);
            }
            Err(e) if e.downcast_ref::<Infeasible>().is_some() => row.status = "INFEASIBLE".into(),
            Err(e) => return Err(e),
        }
        Ok(row)
    }
}

pub const HEADER: [&str; 13] = [
    "model",
    "width",
    "layers",
    "params",
    "cluster",
    "devices",
    "mode",
    "status",
    "stages",
    "microbatches",
    "replicas",
    "iteration_sec",
    "throughput",
];

pub fn write_csv<W: std::io::Write>(rows: &[Row], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
