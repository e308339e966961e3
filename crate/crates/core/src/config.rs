//! Flat `key = value` experiment configuration with `[section]` headers.
//!
//! ```text
//! [network]
//! stage_channels = 32,64,128,256
//! [lrp]
//! enabled = true
//! dilations = 1,3,9
//! ```
//!
//! Keys are addressed as `section.key`. Unknown sections or keys and
//! repeated keys are errors. Anything not given keeps its default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lrp::LrpConfig;
use crate::network::NetworkConfig;
use crate::synth::{ObjectKind, SynthSceneSpec};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset directory used by `train` and `eval`; empty means generate in memory.
    pub dir: String,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub scene: SynthSceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: String::new(),
            train_scenes: 100,
            val_scenes: 20,
            scene: SynthSceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Network shape; its `lrp` field is ignored in favor of `lrp_enabled` + `lrp`.
    pub network: NetworkConfig,
    pub lrp_enabled: bool,
    pub lrp: LrpConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut network = NetworkConfig::default();
        network.lrp = None;
        Self {
            network,
            lrp_enabled: true,
            lrp: LrpConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub const SECTIONS: [&str; 4] = ["network", "lrp", "train", "data"];

impl ExperimentConfig {
    /// Network config with the LRP block attached when enabled.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            lrp: self.lrp_enabled.then(|| self.lrp.clone()),
            ..self.network.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network_config().validate()?;
        self.train.validate()?;
        self.data.scene.validate()?;
        if let Some(w) = &self.train.class_weights {
            if w.len() != self.network.num_classes {
                return Err(Error::Config("train.class_weights needs one weight per class".into()));
            }
        }
        Ok(())
    }

    /// Apply one `section.key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        let s = &mut d.scene;
        match key {
            "network.stage_channels" => self.network.stage_channels = parse_list(key, v)?,
            "network.num_classes" => self.network.num_classes = parse(key, v)?,
            "network.in_channels" => self.network.in_channels = parse(key, v)?,
            "lrp.enabled" => self.lrp_enabled = parse_bool(key, v)?,
            "lrp.op" => self.lrp.op_kind = v.trim().parse()?,
            "lrp.dilations" => self.lrp.dilations = parse_list(key, v)?,
            "lrp.dilated" => self.lrp.dilated = parse_bool(key, v)?,
            "lrp.selection" => self.lrp.selection = v.trim().parse()?,
            "lrp.placement" => self.lrp.placement = v.trim().parse()?,
            "train.lr0" => t.lr0 = parse(key, v)?,
            "train.poly_power" => t.poly_power = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.class_weights" => {
                t.class_weights = match v.trim() {
                    "none" => None,
                    _ => Some(parse_list(key, v)?),
                }
            }
            "train.voxel_size" => t.voxel_size = parse(key, v)?,
            "train.augment_scale" => t.augment.scale = parse_bool(key, v)?,
            "train.augment_rotate" => t.augment.rotate = parse_bool(key, v)?,
            "train.augment_translate" => t.augment.translate = parse_bool(key, v)?,
            "train.augment_jitter" => t.augment.jitter = parse_bool(key, v)?,
            "data.dir" => d.dir = v.trim().to_string(),
            "data.train_scenes" => d.train_scenes = parse(key, v)?,
            "data.val_scenes" => d.val_scenes = parse(key, v)?,
            "data.extent" => {
                let e: Vec<f64> = parse_list(key, v)?;
                s.extent = e
                    .try_into()
                    .map_err(|_| Error::Config("data.extent needs two values".into()))?;
            }
            "data.wall_height" => s.wall_height = parse(key, v)?,
            "data.thickness" => s.thickness = parse(key, v)?,
            "data.min_objects" => s.min_objects = parse(key, v)?,
            "data.max_objects" => s.max_objects = parse(key, v)?,
            "data.kinds" => {
                s.kinds = if v.trim().is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|k| ObjectKind::parse(k.trim())).collect::<Result<_>>()?
                }
            }
            "data.points_per_m2" => s.points_per_m2 = parse(key, v)?,
            "data.color_noise" => s.color_noise = parse(key, v)?,
            "data.long_range_coupling" => s.long_range_coupling = parse_bool(key, v)?,
            "data.coupling_distance" => s.coupling_distance = parse(key, v)?,
            "data.coupling_max_distance" => s.coupling_max_distance = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let d = &self.data;
        let s = &d.scene;
        let entries: Vec<(&str, String)> = vec![
            ("network.stage_channels", join(&self.network.stage_channels)),
            ("network.num_classes", self.network.num_classes.to_string()),
            ("network.in_channels", self.network.in_channels.to_string()),
            ("lrp.enabled", self.lrp_enabled.to_string()),
            ("lrp.op", self.lrp.op_kind.to_string()),
            ("lrp.dilations", join(&self.lrp.dilations)),
            ("lrp.dilated", self.lrp.dilated.to_string()),
            ("lrp.selection", self.lrp.selection.to_string()),
            ("lrp.placement", self.lrp.placement.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.poly_power", t.poly_power.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            (
                "train.class_weights",
                t.class_weights.as_deref().map_or("none".to_string(), join),
            ),
            ("train.voxel_size", t.voxel_size.to_string()),
            ("train.augment_scale", t.augment.scale.to_string()),
            ("train.augment_rotate", t.augment.rotate.to_string()),
            ("train.augment_translate", t.augment.translate.to_string()),
            ("train.augment_jitter", t.augment.jitter.to_string()),
            ("data.dir", d.dir.clone()),
            ("data.train_scenes", d.train_scenes.to_string()),
            ("data.val_scenes", d.val_scenes.to_string()),
            ("data.extent", join(&s.extent)),
            ("data.wall_height", s.wall_height.to_string()),
            ("data.thickness", s.thickness.to_string()),
            ("data.min_objects", s.min_objects.to_string()),
            ("data.max_objects", s.max_objects.to_string()),
            ("data.kinds", s.kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",")),
            ("data.points_per_m2", s.points_per_m2.to_string()),
            ("data.color_noise", s.color_noise.to_string()),
            ("data.long_range_coupling", s.long_range_coupling.to_string()),
            ("data.coupling_distance", s.coupling_distance.to_string()),
            ("data.coupling_max_distance", s.coupling_max_distance.to_string()),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Sectioned text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let kv = self.to_kv();
        let mut out = String::new();
        for sec in SECTIONS {
            writeln!(out, "[{sec}]").expect("string write");
            let prefix = format!("{sec}.");
            for (k, v) in kv.iter().filter(|(k, _)| k.starts_with(&prefix)) {
                writeln!(out, "{} = {v}", &k[prefix.len()..]).expect("string write");
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<&str> = None;
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(
                    SECTIONS
                        .into_iter()
                        .find(|s| *s == name)
                        .ok_or_else(|| err(format!("unknown section [{name}]")))?,
                );
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected 'key = value'".into()))?;
            let sec = section.ok_or_else(|| err("key outside of a [section]".into()))?;
            let key = format!("{sec}.{}", k.trim());
            if seen.insert(key.clone(), i + 1).is_some() {
                return Err(err(format!("duplicate key '{key}'")));
            }
            cfg.set(&key, v).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rebuild from `to_kv` output; keys outside the config sections are skipped.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv {
            let known = SECTIONS.iter().any(|s| k.strip_prefix(s).is_some_and(|r| r.starts_with('.')));
            if known {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::io::read_text(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lrp::{OpKind, Placement};

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_text(), Path::new("c")).unwrap(), c);
    }

    #[test]
    fn kv_round_trip_skips_foreign_keys() {
        let mut c = ExperimentConfig::default();
        c.lrp.placement = crate::lrp::Placement::Middle;
        c.data.scene.extent = [1.5, 2.5];
        let mut kv = c.to_kv();
        kv.insert("build".into(), "abc".into());
        assert_eq!(ExperimentConfig::from_kv(&kv).unwrap(), c);
    }

    #[test]
    fn overrides_apply() {
        let text = "# ablation row\n[lrp]\nop = avg\nplacement = parallel # trailing\ndilations = 9\n[train]\nclass_weights = 1,1,1,1,1,1,1,1,2\n";
        let c = ExperimentConfig::parse(text, Path::new("c")).unwrap();
        assert_eq!(c.lrp.op_kind, OpKind::Avg);
        assert_eq!(c.lrp.placement, Placement::Parallel);
        assert_eq!(c.lrp.dilations, vec![9]);
        assert_eq!(c.train.class_weights.as_ref().unwrap()[8], 2.0);
        let back = ExperimentConfig::parse(&c.to_text(), Path::new("c")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        for bad in [
            "[lrp]\nsize = 3\n",
            "[model]\n",
            "op = max\n",
            "[lrp]\nop = max\nop = avg\n",
            "[lrp]\nop = median\n",
            "[lrp]\ndilations = 1,2\n",
            "[network]\nstage_channels = 8,16,32\n",
            "[train]\nclass_weights = 1,2\n",
        ] {
            assert!(ExperimentConfig::parse(bad, Path::new("c")).is_err(), "{bad}");
        }
    }
}
