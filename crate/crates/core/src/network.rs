//! Four-stage sparse U-Net and its LRP-augmented variants.
//!
//! Encoder stage `s` runs a stage block at level `s`, then a stride-2
//! convolution (2x2x2 kernel) with batch norm and ReLU to level `s + 1`.
//! Decoder stage `s` upsamples with the transposed kernel map into the stored
//! encoder sites, concatenates the encoder output and runs a stage block.
//! A pointwise linear head produces per-voxel logits.
//!
//! A stage block is a ResBlock, optionally combined with an LRP block
//! according to the placement. LRP contributions are added residually, so a
//! block whose selection weights are all zero leaves the stage unchanged:
//!
//! | placement | stage output                         |
//! |-----------|--------------------------------------|
//! | after     | `y + LRP(y)`, `y = ResBlock(x)`      |
//! | before    | `ResBlock(x + LRP(x))`               |
//! | middle    | LRP residual between the two convs   |
//! | parallel  | `ResBlock(x) + LRP(proj(x))`         |

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::lrp::{self, lrp_param_count, LrpConfig, LrpVars, OpKind, Placement, Selection};
use crate::ops::{self, build_downsample_map, BnState, KernelMap, SiteMaps, Tape, Var};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Matrix;
use crate::voxel::{stride_coords, SparseTensor, VoxelCoord};

pub const STAGES: usize = 4;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    pub in_channels: usize,
    pub lrp: Option<LrpConfig>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![32, 64, 128, 256],
            num_classes: 9,
            in_channels: 3,
            lrp: Some(LrpConfig::default()),
        }
    }
}

impl NetworkConfig {
    pub fn baseline(&self) -> Self {
        Self {
            lrp: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != STAGES {
            return Err(Error::Config(format!(
                "network needs exactly {STAGES} stages, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("stage channels must be non-decreasing".into()));
        }
        if let Some(l) = &self.lrp {
            l.validate()?;
        }
        Ok(())
    }

    /// `(name, in, out)` for every stage block in declaration order.
    pub fn stage_blocks(&self) -> Vec<(String, usize, usize)> {
        let c = &self.stage_channels;
        let mut v = vec![("enc0".to_string(), self.in_channels, c[0])];
        for s in 1..STAGES {
            v.push((format!("enc{s}"), c[s], c[s]));
        }
        for s in (0..STAGES - 1).rev() {
            v.push((format!("dec{s}"), 2 * c[s], c[s]));
        }
        v
    }

    /// Channel width seen by the LRP block of a stage with the given widths.
    pub fn lrp_width(placement: Placement, cin: usize, cout: usize) -> usize {
        match placement {
            Placement::Before => cin,
            _ => cout,
        }
    }

    /// Sum of per-stage LRP parameter counts.
    pub fn lrp_overhead(&self) -> usize {
        let Some(l) = &self.lrp else { return 0 };
        self.stage_blocks()
            .iter()
            .map(|(_, cin, cout)| lrp_param_count(l, Self::lrp_width(l.placement, *cin, *cout)))
            .sum()
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        m.insert("network.stage_channels".into(), join(&self.stage_channels));
        m.insert("network.num_classes".into(), self.num_classes.to_string());
        m.insert("network.in_channels".into(), self.in_channels.to_string());
        match &self.lrp {
            None => {
                m.insert("lrp.enabled".into(), "false".into());
            }
            Some(l) => {
                m.insert("lrp.enabled".into(), "true".into());
                m.insert("lrp.op".into(), l.op_kind.to_string());
                m.insert(
                    "lrp.dilations".into(),
                    l.dilations.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
                );
                m.insert("lrp.dilated".into(), l.dilated.to_string());
                m.insert("lrp.selection".into(), l.selection.to_string());
                m.insert("lrp.placement".into(), l.placement.to_string());
            }
        }
        m
    }

    pub fn from_kv(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Config(format!("missing key {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.trim().parse().map_err(|_| Error::Config(format!("{k} is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{k}: bad list entry '{s}'"))))
                .collect()
        };
        let lrp = if get("lrp.enabled")? == "true" {
            Some(LrpConfig {
                op_kind: get("lrp.op")?.parse()?,
                dilations: list("lrp.dilations")?.into_iter().map(|d| d as u32).collect(),
                dilated: get("lrp.dilated")? == "true",
                selection: get("lrp.selection")?.parse()?,
                placement: get("lrp.placement")?.parse()?,
            })
        } else {
            None
        };
        let cfg = Self {
            stage_channels: list("network.stage_channels")?,
            num_classes: num("network.num_classes")?,
            in_channels: num("network.in_channels")?,
            lrp,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn conv_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

fn add_conv(store: &mut ParamStore, prefix: &str, k: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    store.add(
        format!("{prefix}.w"),
        vec![k, cin, cout],
        lrp::random_matrix(k * cin, cout, conv_std(k * cin), rng),
        ParamKind::Trainable,
    )?;
    store.add(format!("{prefix}.b"), vec![cout], Matrix::zeros(1, cout), ParamKind::Trainable)?;
    Ok(())
}

fn add_linear(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, std: f64, rng: &mut impl Rng) -> Result<()> {
    store.add(
        format!("{prefix}.w"),
        vec![cin, cout],
        lrp::random_matrix(cin, cout, std, rng),
        ParamKind::Trainable,
    )?;
    store.add(format!("{prefix}.b"), vec![cout], Matrix::zeros(1, cout), ParamKind::Trainable)?;
    Ok(())
}

fn add_bn(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.add(format!("{prefix}.gamma"), vec![c], Matrix::filled(1, c, 1.0), ParamKind::Trainable)?;
    store.add(format!("{prefix}.beta"), vec![c], Matrix::zeros(1, c), ParamKind::Trainable)?;
    store.add(format!("{prefix}.running_mean"), vec![c], Matrix::zeros(1, c), ParamKind::Buffer)?;
    store.add(format!("{prefix}.running_var"), vec![c], Matrix::filled(1, c, 1.0), ParamKind::Buffer)?;
    Ok(())
}

fn add_resblock(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    add_conv(store, &format!("{prefix}.conv1"), 27, cin, cout, rng)?;
    add_bn(store, &format!("{prefix}.bn1"), cout)?;
    add_conv(store, &format!("{prefix}.conv2"), 27, cout, cout, rng)?;
    add_bn(store, &format!("{prefix}.bn2"), cout)?;
    if cin != cout {
        add_linear(store, &format!("{prefix}.proj"), cin, cout, (1.0 / cin as f64).sqrt(), rng)?;
    }
    Ok(())
}

fn add_lrp(store: &mut ParamStore, prefix: &str, cfg: &LrpConfig, width: usize, rng: &mut impl Rng) -> Result<()> {
    let p = lrp::LrpParams::init(cfg, width, rng)?;
    if let Some(sel) = p.selection {
        // zero selection: the residual block starts as the identity
        let w = sel.weights.cols();
        store.add(format!("{prefix}.sel.w"), vec![width, w], Matrix::zeros(width, w), ParamKind::Trainable)?;
        store.add(format!("{prefix}.sel.b"), vec![w], sel.bias, ParamKind::Trainable)?;
    }
    for (k, c) in p.convs.into_iter().enumerate() {
        store.add(format!("{prefix}.conv{k}.w"), vec![27, width, width], c.weights, ParamKind::Trainable)?;
        store.add(format!("{prefix}.conv{k}.b"), vec![width], c.bias, ParamKind::Trainable)?;
    }
    Ok(())
}

/// Declare the parameters of one stage block (ResBlock plus optional LRP).
pub fn add_stage(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    lrp: Option<&LrpConfig>,
    rng: &mut impl Rng,
) -> Result<()> {
    add_resblock(store, &format!("{prefix}.block"), cin, cout, rng)?;
    if let Some(l) = lrp {
        add_lrp(store, &format!("{prefix}.lrp"), l, NetworkConfig::lrp_width(l.placement, cin, cout), rng)?;
    }
    Ok(())
}

/// Redraw every LRP selection tensor from `N(0, std^2)`.
pub fn randomize_selection(store: &mut ParamStore, std: f64, rng: &mut impl Rng) {
    for i in 0..store.len() {
        let p = store.entry_mut(i);
        if p.name.contains(".lrp.sel.") {
            let (r, c) = p.value.shape();
            p.value = lrp::random_matrix(r, c, std, rng);
        }
    }
}

/// Records ops on a tape while resolving parameters by name.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a mut ParamStore,
    vars: Vec<Option<Var>>,
    training: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, training: bool) -> Self {
        let n = store.len();
        Self {
            tape,
            store,
            vars: vec![None; n],
            training,
        }
    }

    /// Leaf var of every parameter touched so far, indexed like the store.
    pub fn into_param_vars(self) -> Vec<Option<Var>> {
        self.vars
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Invariant(format!("parameter {name} not declared")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.entry(i).value.clone());
        self.vars[i] = Some(v);
        Ok(v)
    }

    fn has(&self, name: &str) -> bool {
        self.store.index_of(name).is_some()
    }

    fn conv(&mut self, x: Var, prefix: &str, km: &Rc<KernelMap>) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        ops::sparse_conv(self.tape, x, w, Some(b), km)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        ops::linear(self.tape, x, w, b)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let rm = format!("{prefix}.running_mean");
        let rv = format!("{prefix}.running_var");
        let mut state = BnState {
            running_mean: self.store.get(&rm).expect("declared").value.as_slice().to_vec(),
            running_var: self.store.get(&rv).expect("declared").value.as_slice().to_vec(),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        };
        let y = ops::batchnorm(self.tape, x, gamma, beta, &mut state, self.training)?;
        if self.training {
            self.store
                .get_mut(&rm)
                .expect("declared")
                .value
                .as_mut_slice()
                .copy_from_slice(&state.running_mean);
            self.store
                .get_mut(&rv)
                .expect("declared")
                .value
                .as_mut_slice()
                .copy_from_slice(&state.running_var);
        }
        Ok(y)
    }

    fn cbr(&mut self, x: Var, prefix: &str, conv: &str, bn: &str, km: &Rc<KernelMap>) -> Result<Var> {
        let h = self.conv(x, &format!("{prefix}.{conv}"), km)?;
        let h = self.bn(h, &format!("{prefix}.{bn}"))?;
        Ok(ops::relu(self.tape, h))
    }

    /// LRP output (without the residual) of the block under `prefix`.
    fn lrp(&mut self, x: Var, prefix: &str, maps: &SiteMaps, cfg: &LrpConfig) -> Result<Var> {
        let selection = if cfg.selection == Selection::None {
            None
        } else {
            Some((self.p(&format!("{prefix}.sel.w"))?, self.p(&format!("{prefix}.sel.b"))?))
        };
        let mut convs = Vec::new();
        if cfg.op_kind == OpKind::Conv {
            for k in 0..cfg.cascade().len() {
                convs.push((self.p(&format!("{prefix}.conv{k}.w"))?, self.p(&format!("{prefix}.conv{k}.b"))?));
            }
        }
        let vars = LrpVars { selection, convs };
        Ok(lrp::lrp_block(self.tape, x, maps, &vars, cfg)?.output)
    }

    fn lrp_residual(&mut self, x: Var, prefix: &str, maps: &SiteMaps, cfg: &LrpConfig) -> Result<Var> {
        let l = self.lrp(x, prefix, maps, cfg)?;
        ops::add(self.tape, x, l)
    }

    fn proj(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let name = format!("{prefix}.proj");
        if self.has(&format!("{name}.w")) {
            self.linear(x, &name)
        } else {
            Ok(x)
        }
    }

    /// `ReLU(BN(Conv(ReLU(BN(Conv(x)))))) + proj(x)`.
    pub fn resblock(&mut self, x: Var, prefix: &str, maps: &SiteMaps, middle: Option<(&str, &LrpConfig)>) -> Result<Var> {
        let km = maps.dilated(1)?;
        let mut h = self.cbr(x, prefix, "conv1", "bn1", &km)?;
        if let Some((lrp_prefix, cfg)) = middle {
            h = self.lrp_residual(h, lrp_prefix, maps, cfg)?;
        }
        let h = self.cbr(h, prefix, "conv2", "bn2", &km)?;
        let skip = self.proj(x, prefix)?;
        ops::add(self.tape, h, skip)
    }

    /// ResBlock combined with the optional LRP block per its placement.
    pub fn stage(&mut self, x: Var, prefix: &str, maps: &SiteMaps, lrp: Option<&LrpConfig>) -> Result<Var> {
        let block = format!("{prefix}.block");
        let lrp_prefix = format!("{prefix}.lrp");
        let Some(cfg) = lrp else {
            return self.resblock(x, &block, maps, None);
        };
        match cfg.placement {
            Placement::After => {
                let y = self.resblock(x, &block, maps, None)?;
                self.lrp_residual(y, &lrp_prefix, maps, cfg)
            }
            Placement::Before => {
                let x2 = self.lrp_residual(x, &lrp_prefix, maps, cfg)?;
                self.resblock(x2, &block, maps, None)
            }
            Placement::Middle => self.resblock(x, &block, maps, Some((&lrp_prefix, cfg))),
            Placement::Parallel => {
                let y = self.resblock(x, &block, maps, None)?;
                let px = self.proj(x, &block)?;
                let l = self.lrp(px, &lrp_prefix, maps, cfg)?;
                ops::add(self.tape, y, l)
            }
        }
    }
}

/// Per-level active sites and the maps between consecutive levels.
pub struct Pyramid {
    pub levels: Vec<SiteMaps>,
    pub down: Vec<Rc<KernelMap>>,
    pub up: Vec<Rc<KernelMap>>,
}

impl Pyramid {
    pub fn build(coords: &[VoxelCoord]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidInput("network input has no voxels".into()));
        }
        let mut levels = vec![SiteMaps::new(coords.to_vec())?];
        let mut down = Vec::new();
        let mut up = Vec::new();
        for _ in 1..STAGES {
            let fine = levels.last().expect("non-empty").coords().to_vec();
            let coarse = stride_coords(&fine, 2)?;
            let km = build_downsample_map(&fine, &coarse)?;
            up.push(Rc::new(km.transpose(&fine)?));
            down.push(Rc::new(km));
            levels.push(SiteMaps::new(coarse)?);
        }
        Ok(Self { levels, down, up })
    }
}

pub struct Forward {
    pub input: Var,
    pub logits: Var,
    /// Leaf var per store entry (None for buffers).
    pub param_vars: Vec<Option<Var>>,
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetworkConfig,
    params: ParamStore,
}

impl Network {
    pub fn init(cfg: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let c = &cfg.stage_channels;
        let lrp = cfg.lrp.as_ref();
        for (name, cin, cout) in cfg.stage_blocks() {
            if let Some(s) = name.strip_prefix("enc").and_then(|s| s.parse::<usize>().ok()) {
                if s > 0 {
                    add_conv(&mut store, &format!("down{}.conv", s - 1), 8, c[s - 1], c[s], rng)?;
                    add_bn(&mut store, &format!("down{}.bn", s - 1), c[s])?;
                }
            } else {
                let s: usize = name[3..].parse().expect("stage index");
                add_conv(&mut store, &format!("up{s}.conv"), 8, c[s + 1], c[s], rng)?;
                add_bn(&mut store, &format!("up{s}.bn"), c[s])?;
            }
            add_stage(&mut store, &name, cin, cout, lrp, rng)?;
        }
        add_linear(&mut store, "head", c[0], cfg.num_classes, (1.0 / c[0] as f64).sqrt(), rng)?;
        Ok(Self { cfg, params: store })
    }

    pub fn from_parts(cfg: NetworkConfig, params: ParamStore) -> Self {
        Self { cfg, params }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Forward from an existing input var whose rows follow `pyramid.levels[0]`.
    pub fn forward_var(&mut self, tape: &mut Tape, x: Var, pyramid: &Pyramid, training: bool) -> Result<Forward> {
        let (n, c) = tape.value(x).shape();
        if n != pyramid.levels[0].len() {
            return Err(Error::Shape("input rows differ from level-0 sites".into()));
        }
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!("input has {c} channels, network expects {}", self.cfg.in_channels)));
        }
        let lrp = self.cfg.lrp.clone();
        let lrp = lrp.as_ref();
        let mut ctx = Ctx::new(tape, &mut self.params, training);
        let mut skips = Vec::with_capacity(STAGES);
        let mut h = x;
        for s in 0..STAGES {
            if s > 0 {
                h = ctx.conv(h, &format!("down{}.conv", s - 1), &pyramid.down[s - 1])?;
                h = ctx.bn(h, &format!("down{}.bn", s - 1))?;
                h = ops::relu(ctx.tape, h);
            }
            h = ctx.stage(h, &format!("enc{s}"), &pyramid.levels[s], lrp)?;
            skips.push(h);
        }
        for s in (0..STAGES - 1).rev() {
            h = ctx.conv(h, &format!("up{s}.conv"), &pyramid.up[s])?;
            h = ctx.bn(h, &format!("up{s}.bn"))?;
            h = ops::relu(ctx.tape, h);
            h = ops::concat_cols(ctx.tape, h, skips[s])?;
            h = ctx.stage(h, &format!("dec{s}"), &pyramid.levels[s], lrp)?;
        }
        let logits = ctx.linear(h, "head")?;
        Ok(Forward {
            input: x,
            logits,
            param_vars: ctx.into_param_vars(),
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, input: &SparseTensor, training: bool) -> Result<Forward> {
        let pyramid = Pyramid::build(input.coords())?;
        let x = tape.leaf(input.features().clone());
        self.forward_var(tape, x, &pyramid, training)
    }

    /// Logits without recording gradients for later use.
    pub fn predict(&mut self, input: &SparseTensor, training: bool) -> Result<Matrix> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, input, training)?;
        Ok(tape.value(f.logits).clone())
    }
}

/// Baseline forward; rejects configs that carry an LRP block.
pub fn unet_forward(net: &mut Network, tape: &mut Tape, input: &SparseTensor, training: bool) -> Result<Forward> {
    if net.config().lrp.is_some() {
        return Err(Error::Config("unet_forward runs the baseline; use lrpnet_forward".into()));
    }
    net.forward(tape, input, training)
}

pub fn lrpnet_forward(net: &mut Network, tape: &mut Tape, input: &SparseTensor, training: bool) -> Result<Forward> {
    net.forward(tape, input, training)
}

/// Closed-form trainable parameter count of `cfg`.
pub fn closed_form_param_count(cfg: &NetworkConfig) -> usize {
    let c = &cfg.stage_channels;
    let conv = |k: usize, a: usize, b: usize| k * a * b + b;
    let bn = |a: usize| 2 * a;
    let resblock = |a: usize, b: usize| {
        conv(27, a, b) + bn(b) + conv(27, b, b) + bn(b) + if a != b { a * b + b } else { 0 }
    };
    let mut total = 0;
    for (_, cin, cout) in cfg.stage_blocks() {
        total += resblock(cin, cout);
    }
    for s in 0..STAGES - 1 {
        // down s: c[s] -> c[s+1], up s: c[s+1] -> c[s]
        total += conv(8, c[s], c[s + 1]) + bn(c[s + 1]);
        total += conv(8, c[s + 1], c[s]) + bn(c[s]);
    }
    total += c[0] * cfg.num_classes + cfg.num_classes;
    total + cfg.lrp_overhead()
}

/// Standalone stage block for receptive-field experiments.
pub struct StageModel {
    pub cin: usize,
    pub cout: usize,
    pub lrp: Option<LrpConfig>,
    pub params: ParamStore,
}

impl StageModel {
    pub fn init(cin: usize, cout: usize, lrp: Option<LrpConfig>, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        add_stage(&mut params, "stage", cin, cout, lrp.as_ref(), rng)?;
        Ok(Self { cin, cout, lrp, params })
    }

    pub fn forward_var(&mut self, tape: &mut Tape, x: Var, maps: &SiteMaps, training: bool) -> Result<Var> {
        let lrp = self.lrp.clone();
        let mut ctx = Ctx::new(tape, &mut self.params, training);
        ctx.stage(x, "stage", maps, lrp.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(lrp: Option<LrpConfig>) -> NetworkConfig {
        NetworkConfig {
            stage_channels: vec![4, 4, 6, 8],
            num_classes: 5,
            in_channels: 3,
            lrp,
        }
    }

    fn scene(rng: &mut ChaCha8Rng, dim: i32, p: f64) -> SparseTensor {
        let mut coords = Vec::new();
        for x in 0..dim {
            for y in 0..dim {
                for z in 0..dim {
                    if rng.random_bool(p) {
                        coords.push(VoxelCoord::new(0, x, y, z));
                    }
                }
            }
        }
        let f = lrp::random_matrix(coords.len(), 3, 1.0, rng);
        SparseTensor::new(coords, f, 1).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        let mut c = NetworkConfig::default();
        c.stage_channels = vec![];
        assert!(c.validate().is_err());
        c.stage_channels = vec![32, 64, 128];
        assert!(c.validate().is_err());
        c.stage_channels = vec![64, 32, 128, 256];
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        for cfg in [NetworkConfig::default(), NetworkConfig::default().baseline()] {
            assert_eq!(NetworkConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        }
    }

    #[test]
    fn logits_shape_and_batch_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = scene(&mut rng, 6, 0.3);
        let mut net = Network::init(small_cfg(Some(LrpConfig::default())), &mut rng).unwrap();
        let single = net.predict(&t, false).unwrap();
        assert_eq!(single.shape(), (t.len(), 5));
        let batch = SparseTensor::concat_batches(&[t.clone(), t.clone()]).unwrap();
        let both = net.predict(&batch, false).unwrap();
        for r in 0..t.len() {
            assert_eq!(both.row(r), both.row(r + t.len()));
            assert_eq!(both.row(r), single.row(r));
        }
    }

    #[test]
    fn closed_form_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for lrp in [
            None,
            Some(LrpConfig::default()),
            Some(LrpConfig { placement: Placement::Before, ..LrpConfig::default() }),
            Some(LrpConfig { op_kind: OpKind::Conv, dilations: vec![9], ..LrpConfig::default() }),
            Some(LrpConfig { selection: Selection::PerVoxelScalar, ..LrpConfig::default() }),
        ] {
            let cfg = small_cfg(lrp);
            let net = Network::init(cfg.clone(), &mut rng).unwrap();
            assert_eq!(net.param_count(), closed_form_param_count(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn unet_forward_rejects_lrp_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = scene(&mut rng, 4, 0.5);
        let mut net = Network::init(small_cfg(Some(LrpConfig::default())), &mut rng).unwrap();
        let mut tape = Tape::new();
        assert!(unet_forward(&mut net, &mut tape, &t, false).is_err());
        let empty = SparseTensor::new(vec![], Matrix::zeros(0, 3), 1).unwrap();
        assert!(net.forward(&mut tape, &empty, false).is_err());
    }

    #[test]
    fn decoder_output_sites_are_input_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = scene(&mut rng, 9, 0.2);
        let pyr = Pyramid::build(t.coords()).unwrap();
        assert_eq!(pyr.levels[0].coords(), t.coords());
        for s in 0..STAGES - 1 {
            assert_eq!(pyr.up[s].out_coords(), pyr.levels[s].coords());
        }
    }
}
