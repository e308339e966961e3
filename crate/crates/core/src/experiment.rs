//! Experiment drivers behind the command line: dataset assembly, full
//! training runs, ablation grids and op micro-benchmarks.

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{load_split, Manifest};
use crate::lrp::{LrpConfig, OpKind, Placement, Selection};
use crate::metrics::EvalReport;
use crate::network::{closed_form_param_count, Network, NetworkConfig};
use crate::ops::{self, submanifold_map, Tape};
use crate::selfcheck::random_scene;
use crate::seed;
use crate::synth::synth_scene;
use crate::train::{evaluate_scenes, make_batch, train, LogRow};
use crate::voxel::PointCloud;

/// Generator seed of scene `index` under experiment seed `seed`.
pub fn scene_seed(seed_value: u64, index: usize) -> u64 {
    seed::substream(seed_value, "data", index as u64).random()
}

/// Scenes `0..train_scenes` form the train split, the next `val_scenes` the val split.
pub fn synth_dataset(cfg: &ExperimentConfig) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
    let d = &cfg.data;
    let all = (0..d.train_scenes + d.val_scenes)
        .map(|i| Ok(synth_scene(&d.scene, scene_seed(cfg.train.seed, i))?.cloud))
        .collect::<Result<Vec<_>>>()?;
    let mut train_set = all;
    let val = train_set.split_off(d.train_scenes);
    Ok((train_set, val))
}

/// Dataset from `data.dir` when set, otherwise generated in memory.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
    if cfg.data.dir.is_empty() {
        return synth_dataset(cfg);
    }
    let dir = Path::new(&cfg.data.dir);
    let m = Manifest::read(dir)?;
    Ok((load_split(dir, &m.train)?, load_split(dir, &m.val)?))
}

pub struct TrainOutcome {
    pub net: Network,
    pub rows: Vec<LogRow>,
    pub report: EvalReport,
}

/// Initialize from the `init` stream, train, and score on the val split.
pub fn run_training(
    cfg: &ExperimentConfig,
    train_set: &[PointCloud],
    val_set: &[PointCloud],
    on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = Network::init(cfg.network_config(), &mut seed::stream(cfg.train.seed, "init"))?;
    let rows = train(&mut net, &cfg.train, train_set, val_set, on_row)?;
    let eval_set = if val_set.is_empty() { train_set } else { val_set };
    let report = evaluate_scenes(&mut net, eval_set, cfg.train.voxel_size)?;
    Ok(TrainOutcome { net, rows, report })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Position,
    Op,
    Range,
    Component,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [Self::Position, Self::Op, Self::Range, Self::Component];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Position => "position",
            Self::Op => "op",
            Self::Range => "range",
            Self::Component => "component",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub lrp: Option<LrpConfig>,
}

/// Branch dilations of every range row for `op`.
pub fn range_ladders(op: OpKind) -> Vec<Vec<u32>> {
    match op {
        OpKind::Max => vec![vec![1], vec![3], vec![9], vec![3, 9], vec![1, 3, 9]],
        OpKind::Avg | OpKind::Conv => vec![vec![9], vec![3, 9], vec![1, 3, 9]],
    }
}

fn with(base: &LrpConfig, f: impl FnOnce(&mut LrpConfig)) -> LrpConfig {
    let mut c = base.clone();
    f(&mut c);
    c
}

/// Variant rows of one axis. `op` picks the op for the `range` axis.
pub fn ablation_grid(axis: AblationAxis, base: &LrpConfig, op: OpKind) -> Vec<Variant> {
    let full = LrpConfig {
        placement: base.placement,
        ..LrpConfig::default()
    };
    let row = |name: String, lrp: Option<LrpConfig>| Variant { name, lrp };
    match axis {
        AblationAxis::Position => [Placement::Before, Placement::Middle, Placement::Parallel, Placement::After]
            .into_iter()
            .map(|p| row(p.to_string(), Some(with(&full, |c| c.placement = p))))
            .collect(),
        AblationAxis::Range => range_ladders(op)
            .into_iter()
            .map(|d| {
                let c = with(&full, |c| {
                    c.op_kind = op;
                    c.dilations = d;
                });
                row(format!("{op} {}", c.range_label()), Some(c))
            })
            .collect(),
        AblationAxis::Op => [OpKind::Max, OpKind::Avg, OpKind::Conv]
            .into_iter()
            .flat_map(|op| ablation_grid(AblationAxis::Range, base, op))
            .collect(),
        AblationAxis::Component => {
            let parts = [
                ("maxpool", false, Selection::None),
                ("maxpool+dilation", true, Selection::None),
                ("maxpool+selection", false, Selection::PerChannel),
                ("maxpool+dilation+selection", true, Selection::PerChannel),
            ];
            let mut v = vec![row("baseline".into(), None)];
            v.extend(parts.into_iter().map(|(name, dilated, selection)| {
                row(
                    name.into(),
                    Some(with(&full, |c| {
                        c.dilated = dilated;
                        c.selection = selection;
                    })),
                )
            }));
            v
        }
    }
}

pub const ABLATION_HEADER: &str = "variant,op,range,dilated,selection,placement,params,runtime_ms,miou";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    /// Mean eval-mode forward time per val scene.
    pub runtime_ms: f64,
    pub miou: f64,
}

impl AblationRow {
    pub fn csv(&self) -> String {
        let (op, range, dilated, sel, place) = match &self.variant.lrp {
            None => ("none".to_string(), "-".to_string(), "-".to_string(), "-".to_string(), "-".to_string()),
            Some(c) => (
                c.op_kind.to_string(),
                format!("\"{}\"", c.range_label()),
                c.dilated.to_string(),
                c.selection.to_string(),
                c.placement.to_string(),
            ),
        };
        let name = if self.variant.name.contains(',') {
            format!("\"{}\"", self.variant.name)
        } else {
            self.variant.name.clone()
        };
        format!(
            "{name},{op},{range},{dilated},{sel},{place},{},{:.3},{:.2}",
            self.params, self.runtime_ms, self.miou
        )
    }
}

/// Mean forward time per scene in milliseconds.
pub fn inference_ms(net: &mut Network, scenes: &[PointCloud], voxel_size: f64) -> Result<f64> {
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for pc in scenes {
        let (input, _) = make_batch(std::slice::from_ref(pc), voxel_size)?;
        let t = Instant::now();
        net.predict(&input, false)?;
        total += t.elapsed().as_secs_f64();
    }
    Ok(1e3 * total / scenes.len() as f64)
}

/// Train and score one variant with the shared seed and data.
pub fn run_variant(
    cfg: &ExperimentConfig,
    variant: &Variant,
    train_set: &[PointCloud],
    val_set: &[PointCloud],
) -> Result<AblationRow> {
    let mut c = cfg.clone();
    c.lrp_enabled = variant.lrp.is_some();
    if let Some(l) = &variant.lrp {
        c.lrp = l.clone();
    }
    let mut out = run_training(&c, train_set, val_set, |_| {})?;
    let params = closed_form_param_count(&c.network_config());
    if params != out.net.param_count() {
        return Err(Error::Invariant(format!(
            "{}: closed-form count {params} differs from enumerated {}",
            variant.name,
            out.net.param_count()
        )));
    }
    let eval_set = if val_set.is_empty() { train_set } else { val_set };
    let runtime_ms = inference_ms(&mut out.net, eval_set, c.train.voxel_size)?;
    Ok(AblationRow {
        variant: variant.clone(),
        params,
        runtime_ms,
        miou: out.report.miou,
    })
}

/// Baseline and configured counts for the `params` report.
pub fn param_summary(cfg: &NetworkConfig) -> (usize, usize) {
    (closed_form_param_count(&cfg.baseline()), closed_form_param_count(cfg))
}

pub const BENCH_HEADER: &str = "op,dilation,grid,voxels,median_ms";
pub const BENCH_OPS: [&str; 4] = ["kernel_map", "maxpool", "avgpool", "conv"];
pub const BENCH_DILATIONS: [u32; 3] = [1, 3, 9];
const BENCH_CHANNELS: usize = 16;
const BENCH_OCCUPANCY: f64 = 0.1;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub op: &'static str,
    pub dilation: u32,
    pub grid: usize,
    pub voxels: usize,
    pub median_ms: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{:.4}", self.op, self.dilation, self.grid, self.voxels, self.median_ms)
    }
}

/// One row per (op, dilation, grid): median of `reps` timings after 3 warmups.
pub fn bench(seed_value: u64, grids: &[usize], reps: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &g in grids {
        let mut rng = seed::substream(seed_value, "bench", g as u64);
        let t = random_scene(&mut rng, g as i32, BENCH_OCCUPANCY, BENCH_CHANNELS);
        let w = crate::lrp::random_matrix(27 * BENCH_CHANNELS, BENCH_CHANNELS, 0.1, &mut rng);
        for op in BENCH_OPS {
            for d in BENCH_DILATIONS {
                let km = Rc::new(submanifold_map(t.coords(), d)?);
                let run = || -> Result<()> {
                    match op {
                        "kernel_map" => {
                            submanifold_map(t.coords(), d)?;
                        }
                        "maxpool" | "avgpool" | "conv" => {
                            let mut tape = Tape::new();
                            let x = tape.leaf(t.features().clone());
                            match op {
                                "maxpool" => ops::sparse_maxpool(&mut tape, x, &km)?,
                                "avgpool" => ops::sparse_avgpool(&mut tape, x, &km)?,
                                _ => {
                                    let wv = tape.leaf(w.clone());
                                    ops::sparse_conv(&mut tape, x, wv, None, &km)?
                                }
                            };
                        }
                        _ => unreachable!("fixed op list"),
                    }
                    Ok(())
                };
                for _ in 0..3 {
                    run()?;
                }
                let mut times = Vec::with_capacity(reps);
                for _ in 0..reps {
                    let s = Instant::now();
                    run()?;
                    times.push(s.elapsed().as_secs_f64() * 1e3);
                }
                rows.push(BenchRow {
                    op,
                    dilation: d,
                    grid: g,
                    voxels: t.len(),
                    median_ms: median(times),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let base = LrpConfig::default();
        let n = |a| ablation_grid(a, &base, OpKind::Max).len();
        assert_eq!(n(AblationAxis::Position), 4);
        assert_eq!(n(AblationAxis::Range), 5);
        assert_eq!(n(AblationAxis::Op), 11);
        assert_eq!(n(AblationAxis::Component), 5);
        assert_eq!(ablation_grid(AblationAxis::Range, &base, OpKind::Conv).len(), 3);
    }

    #[test]
    fn range_labels_follow_table_rows() {
        let labels: Vec<String> = ablation_grid(AblationAxis::Range, &LrpConfig::default(), OpKind::Max)
            .iter()
            .map(|v| v.lrp.as_ref().unwrap().range_label())
            .collect();
        assert_eq!(labels, ["[x3]", "[x9]", "[x27]", "[x9, x27]", "[x3, x9, x27]"]);
    }

    #[test]
    fn component_rows_toggle_one_thing_at_a_time() {
        let g = ablation_grid(AblationAxis::Component, &LrpConfig::default(), OpKind::Max);
        assert!(g[0].lrp.is_none());
        let l: Vec<&LrpConfig> = g[1..].iter().map(|v| v.lrp.as_ref().unwrap()).collect();
        assert_eq!(l[0].cascade(), vec![1, 1, 1]);
        assert_eq!(l[1].cascade(), vec![1, 3, 9]);
        assert_eq!(l[2].selection, Selection::PerChannel);
        assert!(!l[2].dilated);
        assert_eq!(*l[3], LrpConfig::default());
    }

    #[test]
    fn scene_seeds_are_stable_per_index() {
        assert_eq!(scene_seed(3, 7), scene_seed(3, 7));
        assert_ne!(scene_seed(3, 7), scene_seed(3, 8));
        assert_ne!(scene_seed(3, 7), scene_seed(4, 7));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
