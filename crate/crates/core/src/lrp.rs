//! Long range pooling block.
//!
//! A cascade of 3x3x3 dilated pools `P_1 = p(x, 1)`, `P_2 = p(P_1, 3)`,
//! `P_3 = p(P_2, 9)` whose taps are blended per voxel by selection weights
//! `S = linear(x)`: `out = S_1 * P_1 + S_2 * P_2 + S_3 * P_3`.
//!
//! Branches are named by their dilation. A branch of dilation `d` is the tap
//! after the cascade stage of dilation `d`, with a receptive field of
//! `(3d)^3` on dense occupancy. The cascade always runs every rung of the
//! `1, 3, 9, ...` ladder up to the largest requested branch, so `[9]` alone
//! still pools at 1 and 3 first. With `dilated = false` every rung uses
//! dilation 1 (the "pooling without dilation" ablation).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{self, SiteMaps, Tape, Var};
use crate::tensor::Matrix;
use crate::voxel::SparseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Max,
    Avg,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Selection {
    PerChannel,
    PerVoxelScalar,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    Before,
    Middle,
    After,
    Parallel,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),*];

            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),* }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), s
                    ))),
                }
            }
        }
    };
}

keyword_enum!(OpKind { Max => "max", Avg => "avg", Conv => "conv" });
keyword_enum!(Selection { PerChannel => "per_channel", PerVoxelScalar => "per_voxel_scalar", None => "none" });
keyword_enum!(Placement { Before => "before", Middle => "middle", After => "after", Parallel => "parallel" });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LrpConfig {
    pub op_kind: OpKind,
    /// Branch dilations, strictly increasing powers of three.
    pub dilations: Vec<u32>,
    pub dilated: bool,
    pub selection: Selection,
    pub placement: Placement,
}

impl Default for LrpConfig {
    fn default() -> Self {
        Self {
            op_kind: OpKind::Max,
            dilations: vec![1, 3, 9],
            dilated: true,
            selection: Selection::PerChannel,
            placement: Placement::After,
        }
    }
}

fn ladder_rung(d: u32) -> Option<usize> {
    let mut v = 1u32;
    for k in 0..20 {
        if v == d {
            return Some(k);
        }
        v = v.checked_mul(3)?;
    }
    None
}

impl LrpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() {
            return Err(Error::Config("LRP needs at least one branch dilation".into()));
        }
        if self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("LRP dilations must be strictly increasing".into()));
        }
        if let Some(d) = self.dilations.iter().find(|&&d| ladder_rung(d).is_none()) {
            return Err(Error::Config(format!("LRP dilation {d} is not a power of three")));
        }
        Ok(())
    }

    pub fn branches(&self) -> usize {
        self.dilations.len()
    }

    /// Dilation of every cascade stage, in application order.
    pub fn cascade(&self) -> Vec<u32> {
        let top = self.dilations.iter().copied().max().and_then(ladder_rung).unwrap_or(0);
        (0..=top)
            .map(|k| if self.dilated { 3u32.pow(k as u32) } else { 1 })
            .collect()
    }

    /// Cascade stage index feeding each branch.
    pub fn branch_taps(&self) -> Vec<usize> {
        self.dilations.iter().map(|&d| ladder_rung(d).expect("validated")).collect()
    }

    /// Table-style range label, e.g. `[x3, x9, x27]`.
    pub fn range_label(&self) -> String {
        let parts: Vec<String> = self.dilations.iter().map(|d| format!("x{}", 3 * d)).collect();
        format!("[{}]", parts.join(", "))
    }

    /// Output width of the selection linear map for `channels` inputs.
    pub fn selection_width(&self, channels: usize) -> usize {
        match self.selection {
            Selection::PerChannel => self.branches() * channels,
            Selection::PerVoxelScalar => self.branches(),
            Selection::None => 0,
        }
    }
}

/// Closed-form scalar parameter count of one block at width `channels`.
pub fn lrp_param_count(cfg: &LrpConfig, channels: usize) -> usize {
    let sel = match cfg.selection {
        Selection::None => 0,
        _ => {
            let w = cfg.selection_width(channels);
            channels * w + w
        }
    };
    let conv = match cfg.op_kind {
        OpKind::Conv => cfg.cascade().len() * (27 * channels * channels + channels),
        _ => 0,
    };
    sel + conv
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionParams {
    /// `C x width`.
    pub weights: Matrix,
    /// `1 x width`.
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `(27 * C_in) x C_out`, slot-major.
    pub weights: Matrix,
    /// `1 x C_out`.
    pub bias: Matrix,
}

impl ConvParams {
    /// Kernel that copies the center voxel.
    pub fn identity(channels: usize) -> Self {
        let mut weights = Matrix::zeros(27 * channels, channels);
        for c in 0..channels {
            weights.set(13 * channels + c, c, 1.0);
        }
        Self {
            weights,
            bias: Matrix::zeros(1, channels),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrpParams {
    pub selection: Option<SelectionParams>,
    /// One kernel per cascade stage when `op_kind = conv`.
    pub convs: Vec<ConvParams>,
}

impl LrpParams {
    pub fn init(cfg: &LrpConfig, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let selection = match cfg.selection {
            Selection::None => None,
            _ => {
                let w = cfg.selection_width(channels);
                let std = (1.0 / channels.max(1) as f64).sqrt();
                Some(SelectionParams {
                    weights: random_matrix(channels, w, std, rng),
                    bias: Matrix::zeros(1, w),
                })
            }
        };
        let convs = match cfg.op_kind {
            OpKind::Conv => cfg
                .cascade()
                .iter()
                .map(|_| ConvParams {
                    weights: random_matrix(27 * channels, channels, (1.0 / (27 * channels) as f64).sqrt(), rng),
                    bias: Matrix::zeros(1, channels),
                })
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self { selection, convs })
    }

    pub fn param_count(&self) -> usize {
        self.selection.as_ref().map_or(0, |s| s.weights.len() + s.bias.len())
            + self.convs.iter().map(|c| c.weights.len() + c.bias.len()).sum::<usize>()
    }
}

pub fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Tape handles for one block's parameters.
#[derive(Clone, Debug, Default)]
pub struct LrpVars {
    pub selection: Option<(Var, Var)>,
    pub convs: Vec<(Var, Var)>,
}

impl LrpVars {
    pub fn from_params(tape: &mut Tape, p: &LrpParams) -> Self {
        Self {
            selection: p
                .selection
                .as_ref()
                .map(|s| (tape.leaf(s.weights.clone()), tape.leaf(s.bias.clone()))),
            convs: p
                .convs
                .iter()
                .map(|c| (tape.leaf(c.weights.clone()), tape.leaf(c.bias.clone())))
                .collect(),
        }
    }
}

/// Vars produced by one block: the blended output, every cascade tap and the
/// raw selection weights.
#[derive(Clone, Debug)]
pub struct LrpNodes {
    pub output: Var,
    pub taps: Vec<Var>,
    pub selection: Option<Var>,
}

/// Record the block on `tape`. `maps` must describe the sites of `x`.
pub fn lrp_block(tape: &mut Tape, x: Var, maps: &SiteMaps, vars: &LrpVars, cfg: &LrpConfig) -> Result<LrpNodes> {
    cfg.validate()?;
    let (n, c) = tape.value(x).shape();
    if n == 0 {
        return Err(Error::InvalidInput("LRP over an empty tensor".into()));
    }
    if n != maps.len() {
        return Err(Error::Shape("LRP input rows differ from site count".into()));
    }
    let cascade = cfg.cascade();
    if cfg.op_kind == OpKind::Conv && vars.convs.len() != cascade.len() {
        return Err(Error::Shape(format!(
            "conv LRP needs {} kernels, got {}",
            cascade.len(),
            vars.convs.len()
        )));
    }
    if (cfg.selection == Selection::None) != vars.selection.is_none() {
        return Err(Error::Shape("selection parameters do not match the selection mode".into()));
    }

    let mut taps = Vec::with_capacity(cascade.len());
    let mut cur = x;
    for (k, &d) in cascade.iter().enumerate() {
        let km = maps.dilated(d)?;
        cur = match cfg.op_kind {
            OpKind::Max => ops::sparse_maxpool(tape, cur, &km)?,
            OpKind::Avg => ops::sparse_avgpool(tape, cur, &km)?,
            OpKind::Conv => {
                let (w, b) = vars.convs[k];
                ops::sparse_conv(tape, cur, w, Some(b), &km)?
            }
        };
        taps.push(cur);
    }

    let tap_of = cfg.branch_taps();
    let Some((w, b)) = vars.selection else {
        let last = taps[*tap_of.last().expect("non-empty")];
        return Ok(LrpNodes {
            output: last,
            taps,
            selection: None,
        });
    };
    let width = cfg.selection_width(c);
    if tape.value(w).shape() != (c, width) {
        return Err(Error::Shape(format!(
            "selection weights {:?}, expected {:?}",
            tape.value(w).shape(),
            (c, width)
        )));
    }
    let s = ops::linear(tape, x, w, b)?;
    let mut out: Option<Var> = None;
    for (br, &t) in tap_of.iter().enumerate() {
        let term = match cfg.selection {
            Selection::PerChannel => {
                let sb = ops::slice_cols(tape, s, br * c, c)?;
                ops::mul(tape, sb, taps[t])?
            }
            Selection::PerVoxelScalar => {
                let sb = ops::slice_cols(tape, s, br, 1)?;
                ops::mul_rows(tape, sb, taps[t])?
            }
            Selection::None => unreachable!(),
        };
        out = Some(match out {
            None => term,
            Some(acc) => ops::add(tape, acc, term)?,
        });
    }
    Ok(LrpNodes {
        output: out.expect("at least one branch"),
        taps,
        selection: Some(s),
    })
}

/// Evaluated block on a standalone tensor.
#[derive(Clone, Debug)]
pub struct LrpEval {
    pub output: Matrix,
    pub taps: Vec<Matrix>,
    pub selection: Option<Matrix>,
}

fn run(x: &SparseTensor, params: &LrpParams, cfg: &LrpConfig) -> Result<LrpEval> {
    if x.is_empty() {
        return Err(Error::InvalidInput("LRP over an empty tensor".into()));
    }
    let maps = SiteMaps::new(x.coords().to_vec())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.features().clone());
    let vars = LrpVars::from_params(&mut tape, params);
    let nodes = lrp_block(&mut tape, xv, &maps, &vars, cfg)?;
    Ok(LrpEval {
        output: tape.value(nodes.output).clone(),
        taps: nodes.taps.iter().map(|&t| tape.value(t).clone()).collect(),
        selection: nodes.selection.map(|s| tape.value(s).clone()),
    })
}

/// Max-pool block.
pub fn lrp_forward(x: &SparseTensor, params: &LrpParams, cfg: &LrpConfig) -> Result<LrpEval> {
    if cfg.op_kind != OpKind::Max {
        return Err(Error::Config("lrp_forward runs the max-pool block; use lrp_variant_forward".into()));
    }
    run(x, params, cfg)
}

/// Average-pool or convolution block with the same cascade-and-select shape.
pub fn lrp_variant_forward(x: &SparseTensor, params: &LrpParams, cfg: &LrpConfig) -> Result<LrpEval> {
    if cfg.op_kind == OpKind::Max {
        return Err(Error::Config("lrp_variant_forward expects op avg or conv".into()));
    }
    run(x, params, cfg)
}

/// Raw `x W + b`, no normalization.
pub fn selection_weights(x: &Matrix, sel: &SelectionParams) -> Result<Matrix> {
    ops::nn::linear_forward(x, &sel.weights, sel.bias.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::VoxelCoord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn isolated(ch: usize) -> SparseTensor {
        let f = Matrix::from_vec(1, ch, (0..ch).map(|i| i as f64 - 1.5).collect()).unwrap();
        SparseTensor::new(vec![VoxelCoord::new(0, 5, 5, 5)], f, 1).unwrap()
    }

    fn branch_one(cfg: &LrpConfig, ch: usize) -> LrpParams {
        let w = cfg.selection_width(ch);
        let mut bias = Matrix::zeros(1, w);
        match cfg.selection {
            Selection::PerChannel => (0..ch).for_each(|c| bias.set(0, c, 1.0)),
            Selection::PerVoxelScalar => bias.set(0, 0, 1.0),
            Selection::None => {}
        }
        LrpParams {
            selection: Some(SelectionParams {
                weights: Matrix::zeros(ch, w),
                bias,
            }),
            convs: Vec::new(),
        }
    }

    #[test]
    fn cascade_layout() {
        let cfg = LrpConfig::default();
        assert_eq!(cfg.cascade(), vec![1, 3, 9]);
        assert_eq!(cfg.branch_taps(), vec![0, 1, 2]);
        assert_eq!(cfg.range_label(), "[x3, x9, x27]");
        let single = LrpConfig { dilations: vec![9], ..cfg.clone() };
        assert_eq!(single.cascade(), vec![1, 3, 9]);
        assert_eq!(single.branch_taps(), vec![2]);
        let flat = LrpConfig { dilated: false, ..cfg.clone() };
        assert_eq!(flat.cascade(), vec![1, 1, 1]);
        assert!(LrpConfig { dilations: vec![3, 1], ..cfg.clone() }.validate().is_err());
        assert!(LrpConfig { dilations: vec![2], ..cfg.clone() }.validate().is_err());
        assert!(LrpConfig { dilations: vec![], ..cfg }.validate().is_err());
    }

    #[test]
    fn isolated_voxel_branch_one_is_identity() {
        let x = isolated(4);
        for selection in [Selection::PerChannel, Selection::PerVoxelScalar] {
            let cfg = LrpConfig { selection, ..LrpConfig::default() };
            let out = lrp_forward(&x, &branch_one(&cfg, 4), &cfg).unwrap();
            assert_eq!(&out.output, x.features());
        }
        let cfg = LrpConfig { op_kind: OpKind::Avg, ..LrpConfig::default() };
        let out = lrp_variant_forward(&x, &branch_one(&cfg, 4), &cfg).unwrap();
        assert_eq!(&out.output, x.features());
    }

    #[test]
    fn conv_identity_matches_max_on_single_voxel() {
        let x = isolated(3);
        let max_cfg = LrpConfig::default();
        let conv_cfg = LrpConfig { op_kind: OpKind::Conv, ..LrpConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = LrpParams::init(&conv_cfg, 3, &mut rng).unwrap();
        p.convs = (0..3).map(|_| ConvParams::identity(3)).collect();
        let a = lrp_variant_forward(&x, &p, &conv_cfg).unwrap();
        let q = LrpParams { convs: Vec::new(), ..p };
        let b = lrp_forward(&x, &q, &max_cfg).unwrap();
        assert_eq!(a.output, b.output);
    }

    #[test]
    fn no_selection_single_dilation_is_maxpool() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut coords = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                if rng.random_bool(0.5) {
                    coords.push(VoxelCoord::new(0, x, y, 0));
                }
            }
        }
        let f = random_matrix(coords.len(), 3, 1.0, &mut rng);
        let t = SparseTensor::new(coords.clone(), f.clone(), 1).unwrap();
        let cfg = LrpConfig {
            dilations: vec![1],
            selection: Selection::None,
            ..LrpConfig::default()
        };
        let out = lrp_forward(&t, &LrpParams { selection: None, convs: vec![] }, &cfg).unwrap();
        let km = crate::ops::submanifold_map(&coords, 1).unwrap();
        let want = crate::ops::pool::maxpool_forward(&f, &km).unwrap().values;
        assert_eq!(out.output, want);
    }

    #[test]
    fn wrong_op_kind_and_empty_input_rejected() {
        let x = isolated(2);
        let cfg = LrpConfig::default();
        let p = branch_one(&cfg, 2);
        assert!(lrp_variant_forward(&x, &p, &cfg).is_err());
        let empty = SparseTensor::new(vec![], Matrix::zeros(0, 2), 1).unwrap();
        assert!(lrp_forward(&empty, &p, &cfg).is_err());
        let bad = branch_one(&LrpConfig { selection: Selection::PerVoxelScalar, ..cfg.clone() }, 2);
        assert!(matches!(lrp_forward(&x, &bad, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn param_counts() {
        let cfg = LrpConfig::default();
        assert_eq!(lrp_param_count(&cfg, 32), 3168);
        let none = LrpConfig { selection: Selection::None, ..cfg.clone() };
        assert_eq!(lrp_param_count(&none, 32), 0);
        let scalar = LrpConfig { selection: Selection::PerVoxelScalar, ..cfg.clone() };
        assert_eq!(lrp_param_count(&scalar, 32), 32 * 3 + 3);
        let conv = LrpConfig { op_kind: OpKind::Conv, ..cfg };
        assert_eq!(lrp_param_count(&conv, 8), 8 * 24 + 24 + 3 * (27 * 64 + 8));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in [conv, scalar, none] {
            assert_eq!(LrpParams::init(&c, 8, &mut rng).unwrap().param_count(), lrp_param_count(&c, 8));
        }
    }
}
