//! `lrp` command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::erf::{erf_export, erf_network};
use crate::error::{Error, Result};
use crate::experiment::{
    ablation_grid, bench, load_dataset, param_summary, run_training, run_variant, scene_seed, AblationAxis,
    ABLATION_HEADER, BENCH_HEADER,
};
use crate::io::{ensure_dir, format_predictions, read_point_cloud, scene_file_name, write_atomic, write_point_cloud, Manifest};
use crate::lrp::OpKind;
use crate::metrics::EvalReport;
use crate::network::{randomize_selection, Network};
use crate::params::{read_checkpoint, write_checkpoint};
use crate::selfcheck::quick_suite;
use crate::synth::{synth_scene, CLASS_NAMES};
use crate::train::{evaluate_scenes, predict_points, LOG_HEADER};
use crate::voxel::{voxelize, PointCloud, VoxelCoord};
use crate::seed;

pub const BUILD_ID: &str = env!("LRP_BUILD_ID");

#[derive(Debug, Parser)]
#[command(name = "lrp", version, about = "Sparse voxel segmentation with long range pooling")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (`[section]` + `key = value`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for the parallel kernels (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (scene files plus manifest).
    Synth,
    /// Train and write `metrics.csv` and `model.ckpt`.
    Train,
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the checkpoint's data config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Also write per-point predictions.
        #[arg(long)]
        predictions: bool,
    },
    /// Train every variant of one ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Op for the `range` axis (defaults to `lrp.op`).
        #[arg(long)]
        op: Option<String>,
    },
    /// Export the effective receptive field of one voxel.
    Erf {
        /// Trained model; without it a fresh network with random selection weights is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Point cloud file; defaults to synthetic scene 0.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Voxel `x,y,z`; defaults to the occupied voxel nearest the centroid.
        #[arg(long)]
        focus: Option<String>,
    },
    /// Compare every sparse op against its dense or numeric reference.
    OracleCheck,
    /// Parameter counts of the configured network and its baseline.
    Params,
    /// Median wall time per (op, dilation, grid).
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "16,32,48")]
        grids: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
    },
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn record(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut kv = cfg.to_kv();
    kv.insert("build".into(), BUILD_ID.into());
    kv
}

/// Resolved config with its seed and build id, written to every output dir.
pub fn config_echo(cfg: &ExperimentConfig) -> String {
    format!("# seed = {}\n# build = {BUILD_ID}\n{}", cfg.train.seed, cfg.to_text())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn report_text(r: &EvalReport) -> String {
    let mut s = format!("miou {:.2}\noa {:.2}\nmacc {:.2}\n", r.miou, r.oa, r.macc);
    for (c, iou) in r.iou.iter().enumerate() {
        let name = CLASS_NAMES.get(c).copied().unwrap_or("class");
        match iou {
            Some(v) => writeln!(s, "iou {c} {name} {:.2}", 100.0 * v),
            None => writeln!(s, "iou {c} {name} -"),
        }
        .expect("string write");
    }
    s
}

fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let d = &cfg.data;
    let mut manifest = Manifest::default();
    for i in 0..d.train_scenes + d.val_scenes {
        let scene = synth_scene(&d.scene, scene_seed(cfg.train.seed, i))?;
        let name = scene_file_name(i);
        write_point_cloud(&out.join(&name), &scene.cloud)?;
        if i < d.train_scenes {
            manifest.train.push(name);
        } else {
            manifest.val.push(name);
        }
    }
    write_text(&out.join(Manifest::FILE), &manifest.format())?;
    println!("wrote {} train and {} val scenes to {}", d.train_scenes, d.val_scenes, out.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train_set, val_set) = load_dataset(cfg)?;
    let mut csv = format!("{LOG_HEADER}\n");
    let outcome = run_training(cfg, &train_set, &val_set, |row| {
        csv.push_str(&row.csv());
        csv.push('\n');
        if let Some((m, o, _)) = row.eval {
            eprintln!("epoch {} loss {:.4} miou {m:.2} oa {o:.2}", row.epoch, row.loss);
        }
    })?;
    write_text(&out.join("metrics.csv"), &csv)?;
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &record(cfg), outcome.net.params()).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("model.ckpt"), &bytes)?;
    print!("{}", report_text(&outcome.report));
    Ok(())
}

/// Network plus the experiment config it was trained with.
pub fn load_model(path: &Path) -> Result<(Network, ExperimentConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = read_checkpoint(&mut bytes.as_slice())?;
    let cfg = ExperimentConfig::from_kv(&ck.meta)?;
    let mut net = Network::init(cfg.network_config(), &mut seed::stream(0, "init"))?;
    net.params_mut().load_tensors(&ck.tensors)?;
    Ok((net, cfg))
}

fn cmd_eval(
    out: &Path,
    checkpoint: &Path,
    data: Option<&Path>,
    split: &str,
    predictions: bool,
) -> Result<()> {
    let (mut net, mut cfg) = load_model(checkpoint)?;
    if let Some(d) = data {
        cfg.data.dir = d.display().to_string();
    }
    let (train_set, val_set) = load_dataset(&cfg)?;
    let scenes = match split {
        "train" => train_set,
        "val" => val_set,
        other => return Err(Error::Config(format!("unknown split '{other}' (train or val)"))),
    };
    write_text(&out.join("config.txt"), &config_echo(&cfg))?;
    let voxel = cfg.train.voxel_size;
    let report = evaluate_scenes(&mut net, &scenes, voxel)?;
    if predictions {
        let dir = ensure_dir(&out.join("predictions"))?;
        for (i, pc) in scenes.iter().enumerate() {
            let p = predict_points(&mut net, pc, voxel)?;
            write_text(&dir.join(scene_file_name(i)), &format_predictions(&p))?;
        }
    }
    let text = report_text(&report);
    write_text(&out.join("eval.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, axis: &str, op: Option<&str>) -> Result<()> {
    let axis: AblationAxis = axis.parse()?;
    let op: OpKind = match op {
        Some(s) => s.parse()?,
        None => cfg.lrp.op_kind,
    };
    let (train_set, val_set) = load_dataset(cfg)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    println!("{ABLATION_HEADER}");
    for v in ablation_grid(axis, &cfg.lrp, op) {
        let row = run_variant(cfg, &v, &train_set, &val_set)?;
        println!("{}", row.csv());
        csv.push_str(&row.csv());
        csv.push('\n');
    }
    write_text(&out.join(format!("ablate_{axis}.csv")), &csv)
}

fn parse_focus(s: &str) -> Result<VoxelCoord> {
    let v: Vec<i32> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("focus: bad coordinate '{p}'"))))
        .collect::<Result<_>>()?;
    match v[..] {
        [x, y, z] => Ok(VoxelCoord::new(0, x, y, z)),
        _ => Err(Error::Config("focus needs x,y,z".into())),
    }
}

fn nearest_centroid(coords: &[VoxelCoord]) -> Option<VoxelCoord> {
    let n = coords.len() as f64;
    let mean = coords.iter().fold([0.0; 3], |acc, c| {
        [acc[0] + c.x as f64 / n, acc[1] + c.y as f64 / n, acc[2] + c.z as f64 / n]
    });
    coords.iter().copied().min_by(|a, b| {
        let d = |c: &VoxelCoord| {
            (c.x as f64 - mean[0]).powi(2) + (c.y as f64 - mean[1]).powi(2) + (c.z as f64 - mean[2]).powi(2)
        };
        d(a).total_cmp(&d(b))
    })
}

fn cmd_erf(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    scene: Option<&Path>,
    focus: Option<&str>,
) -> Result<()> {
    let (mut net, cfg) = match checkpoint {
        Some(p) => load_model(p)?,
        None => {
            let mut net = Network::init(cfg.network_config(), &mut seed::stream(cfg.train.seed, "init"))?;
            let std = 1.0 / (cfg.network.stage_channels[0] as f64).sqrt();
            randomize_selection(net.params_mut(), std, &mut seed::stream(cfg.train.seed, "selection"));
            (net, cfg.clone())
        }
    };
    let pc: PointCloud = match scene {
        Some(p) => read_point_cloud(p)?,
        None => synth_scene(&cfg.data.scene, scene_seed(cfg.train.seed, 0))?.cloud,
    };
    let v = voxelize(&pc, cfg.train.voxel_size)?;
    let focus = match focus {
        Some(s) => parse_focus(s)?,
        None => nearest_centroid(v.tensor.coords()).ok_or_else(|| Error::InvalidInput("empty scene".into()))?,
    };
    let map = erf_network(&mut net, &v.tensor, focus)?;
    let mut kv = record(&cfg);
    kv.insert("erf.weights".into(), if checkpoint.is_some() { "checkpoint" } else { "random" }.into());
    erf_export(&map, &kv, &out.join("erf.csv"))?;
    write_text(&out.join("config.txt"), &config_echo(&cfg))?;
    println!(
        "focus {},{},{}: support {} of {} voxels",
        focus.x,
        focus.y,
        focus.z,
        map.support().len(),
        map.coords.len()
    );
    Ok(())
}

fn cmd_oracle_check(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let results = quick_suite(cfg.train.seed)?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&r.line());
        text.push('\n');
    }
    let ok = results.iter().all(|r| r.passed);
    text.push_str(if ok { "all checks passed\n" } else { "some checks FAILED\n" });
    write_text(&out.join("oracle_check.txt"), &text)?;
    print!("{text}");
    Ok(ok)
}

fn cmd_params(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let net = cfg.network_config();
    let (base, total) = param_summary(&net);
    let text = format!(
        "params {total}\nbaseline {base}\noverhead {} ({:.2}%)\n",
        total - base,
        100.0 * (total - base) as f64 / base as f64
    );
    write_text(&out.join("params.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_bench(cfg: &ExperimentConfig, out: &Path, grids: &[usize], reps: usize) -> Result<()> {
    if reps == 0 || grids.is_empty() {
        return Err(Error::Config("bench needs at least one grid and one repetition".into()));
    }
    let mut csv = format!("{BENCH_HEADER}\n");
    for row in bench(cfg.train.seed, grids, reps)? {
        println!("{}", row.csv());
        csv.push_str(&row.csv());
        csv.push('\n');
    }
    write_text(&out.join("bench.csv"), &csv)
}

/// Run one parsed command. `Ok(false)` means the command ran but a check failed.
pub fn run(cli: Cli) -> Result<bool> {
    if cli.common.threads > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.common.threads).build_global();
    }
    let cfg = resolve_config(&cli.common)?;
    let out = ensure_dir(&cli.common.out)?;
    if !matches!(cli.command, Command::Eval { .. } | Command::Erf { .. }) {
        write_text(&out.join("config.txt"), &config_echo(&cfg))?;
    }
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &out)?,
        Command::Train => cmd_train(&cfg, &out)?,
        Command::Eval {
            checkpoint,
            data,
            split,
            predictions,
        } => cmd_eval(&out, checkpoint, data.as_deref(), split, *predictions)?,
        Command::Ablate { axis, op } => cmd_ablate(&cfg, &out, axis, op.as_deref())?,
        Command::Erf { checkpoint, scene, focus } => {
            cmd_erf(&cfg, &out, checkpoint.as_deref(), scene.as_deref(), focus.as_deref())?
        }
        Command::OracleCheck => return cmd_oracle_check(&cfg, &out),
        Command::Params => cmd_params(&cfg, &out)?,
        Command::Bench { grids, reps } => cmd_bench(&cfg, &out, grids, *reps)?,
    }
    Ok(true)
}

/// Process entry point; returns the exit code.
pub fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(true) => std::process::ExitCode::SUCCESS,
        Ok(false) => std::process::ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_common_flags_anywhere() {
        let c = Cli::try_parse_from(["lrp", "train", "--seed", "4", "--threads", "2", "--out", "x"]).unwrap();
        assert_eq!(c.common.seed, Some(4));
        assert_eq!(c.common.threads, 2);
        assert!(matches!(c.command, Command::Train));
        let c = Cli::try_parse_from(["lrp", "--config", "c.txt", "ablate", "--axis", "range", "--op", "avg"]).unwrap();
        assert_eq!(c.common.config.as_deref(), Some(Path::new("c.txt")));
        assert!(matches!(c.command, Command::Ablate { .. }));
        assert!(Cli::try_parse_from(["lrp", "frobnicate"]).is_err());
    }

    #[test]
    fn focus_parsing() {
        assert_eq!(parse_focus("1, -2,3").unwrap(), VoxelCoord::new(0, 1, -2, 3));
        assert!(parse_focus("1,2").is_err());
        assert!(parse_focus("a,b,c").is_err());
    }

    #[test]
    fn centroid_pick() {
        let c = [VoxelCoord::new(0, 0, 0, 0), VoxelCoord::new(0, 4, 0, 0), VoxelCoord::new(0, 2, 1, 0)];
        assert_eq!(nearest_centroid(&c), Some(c[2]));
        assert_eq!(nearest_centroid(&[]), None);
    }
}
