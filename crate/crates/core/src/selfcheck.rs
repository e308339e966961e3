//! Oracle comparisons shared by the `oracle-check` command and the
//! acceptance tests. Each check returns its worst observed error so callers
//! can report it next to the pass/fail verdict.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::erf::reachable_set;
use crate::error::Result;
use crate::lrp::{lrp_forward, lrp_variant_forward, random_matrix, LrpConfig, LrpParams, OpKind, Selection};
use crate::ops::{self, submanifold_map, BnState, SiteMaps, Tape, Var};
use crate::oracle::{
    dense_affine, dense_masked_conv, dense_masked_pool, dense_masked_pool_reversed, max_rel_err, numeric_gradient,
    DenseGrid, PoolMode, FD_EPS,
};
use crate::seed;
use crate::tensor::Matrix;
use crate::voxel::{SparseTensor, VoxelCoord};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst error seen (absolute or relative, per check).
    pub worst: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, worst: f64, tol: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: worst <= tol,
            worst,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: worst {:.3e} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.detail
        )
    }
}

/// Random occupancy in `[0, dim)^3` with at least one voxel; N(0, 1) features.
pub fn random_scene(rng: &mut impl Rng, dim: i32, occupancy: f64, channels: usize) -> SparseTensor {
    let mut coords = Vec::new();
    for x in 0..dim {
        for y in 0..dim {
            for z in 0..dim {
                if rng.random_bool(occupancy) {
                    coords.push(VoxelCoord::new(0, x, y, z));
                }
            }
        }
    }
    if coords.is_empty() {
        coords.push(VoxelCoord::new(0, dim / 2, dim / 2, dim / 2));
    }
    let f = random_matrix(coords.len(), channels, 1.0, rng);
    SparseTensor::new(coords, f, 1).expect("unique coords")
}

/// Features whose values are pairwise at least `gap` apart (no max-pool ties).
pub fn tie_free_features(rng: &mut impl Rng, rows: usize, cols: usize, gap: f64) -> Matrix {
    let mut vals: Vec<f64> = (0..rows * cols).map(|i| i as f64 * gap * 2.0).collect();
    vals.shuffle(rng);
    let off: f64 = rng.random_range(-1.0..1.0);
    Matrix::from_vec(rows, cols, vals.into_iter().map(|v| v + off).collect()).expect("sized")
}

fn dense(t: &SparseTensor, dim: i32) -> Result<DenseGrid> {
    DenseGrid::from_rows(dim as usize, t.coords(), t.features())
}

/// Sparse max/avg pooling against the dense masked oracle at 16^3.
pub fn pool_equivalence(seed_value: u64, scenes_per_cell: usize, dilations: &[u32], occupancies: &[f64]) -> Result<CheckResult> {
    const DIM: i32 = 16;
    let mut rng = seed::stream(seed_value, "pool-oracle");
    let mut worst_max = 0.0f64;
    let mut worst_avg = 0.0f64;
    let mut second = 0.0f64;
    let mut n = 0;
    for &d in dilations {
        for &p in occupancies {
            for _ in 0..scenes_per_cell {
                let t = random_scene(&mut rng, DIM, p, 3);
                let km = submanifold_map(t.coords(), d)?;
                let g = dense(&t, DIM)?;
                let mx = ops::pool::maxpool_forward(t.features(), &km)?.values;
                let av = ops::pool::avgpool_forward(t.features(), &km)?;
                let omx = dense_masked_pool(&g, d as i32, PoolMode::Max).rows_at(t.coords());
                let oav = dense_masked_pool(&g, d as i32, PoolMode::Mean).rows_at(t.coords());
                let rmx = dense_masked_pool_reversed(&g, d as i32, PoolMode::Max).rows_at(t.coords());
                worst_max = worst_max.max(mx.max_abs_diff(&omx));
                worst_avg = worst_avg.max(av.max_abs_diff(&oav));
                second = second.max(rmx.max_abs_diff(&omx));
                n += 1;
            }
        }
    }
    let mut r = CheckResult::new(
        "pool oracle",
        worst_avg,
        1e-12,
        format!("{n} scenes, max diff {worst_max:e}, avg diff {worst_avg:e}, oracle cross-check {second:e}"),
    );
    r.passed &= worst_max == 0.0 && second == 0.0;
    Ok(r)
}

/// Sparse convolution against the dense masked convolution.
pub fn conv_equivalence(seed_value: u64, scenes: usize) -> Result<CheckResult> {
    const DIM: i32 = 8;
    let mut rng = seed::stream(seed_value, "conv-oracle");
    let mut worst = 0.0f64;
    for k in 0..scenes {
        let d = [1u32, 2, 3][k % 3];
        let t = random_scene(&mut rng, DIM, 0.4, 3);
        let w = random_matrix(27 * 3, 4, 0.5, &mut rng);
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let km = submanifold_map(t.coords(), d)?;
        let y = ops::conv::conv_forward(t.features(), &w, Some(&b), &km)?;
        let o = dense_masked_conv(&dense(&t, DIM)?, w.as_slice(), &b, d as i32)?.rows_at(t.coords());
        worst = worst.max(y.max_abs_diff(&o));
    }
    Ok(CheckResult::new("conv oracle", worst, 1e-12, format!("{scenes} scenes")))
}

/// Cascaded block (max or avg, ladder 1-3-9) against dense cascaded pools
/// mixed with an independently computed selection.
pub fn cascade_equivalence(seed_value: u64, scenes: usize, op: OpKind) -> Result<CheckResult> {
    const DIM: i32 = 12;
    let mut rng = seed::stream(seed_value, "cascade-oracle");
    let cfg = LrpConfig {
        op_kind: op,
        ..LrpConfig::default()
    };
    let mode = if op == OpKind::Max { PoolMode::Max } else { PoolMode::Mean };
    let c = 3;
    let mut worst = 0.0f64;
    for _ in 0..scenes {
        let occ = rng.random_range(0.05..0.6);
        let t = random_scene(&mut rng, DIM, occ, c);
        let mut params = LrpParams::init(&cfg, c, &mut rng)?;
        let sel = params.selection.as_mut().expect("per-channel selection");
        sel.bias = random_matrix(1, 3 * c, 1.0, &mut rng);
        let out = if op == OpKind::Max {
            lrp_forward(&t, &params, &cfg)?
        } else {
            lrp_variant_forward(&t, &params, &cfg)?
        };
        let sel = params.selection.as_ref().expect("selection");
        let g = dense(&t, DIM)?;
        let p1 = dense_masked_pool(&g, 1, mode);
        let p2 = dense_masked_pool(&p1, 3, mode);
        let p3 = dense_masked_pool(&p2, 9, mode);
        let s = dense_affine(&g, sel.weights.as_slice(), sel.bias.as_slice())?.rows_at(t.coords());
        let taps = [p1.rows_at(t.coords()), p2.rows_at(t.coords()), p3.rows_at(t.coords())];
        let mut expect = Matrix::zeros(t.len(), c);
        for r in 0..t.len() {
            for ch in 0..c {
                let mut acc = 0.0;
                for (b, tap) in taps.iter().enumerate() {
                    acc += s.get(r, b * c + ch) * tap.get(r, ch);
                }
                expect.set(r, ch, acc);
            }
        }
        worst = worst.max(out.output.max_abs_diff(&expect));
    }
    Ok(CheckResult::new(format!("{op} cascade oracle"), worst, 1e-12, format!("{scenes} scenes")))
}

/// Seed every output with a random cotangent and compare the tape gradient of
/// every input against central differences.
pub fn grad_check(
    inputs: &[Matrix],
    rng: &mut impl Rng,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let y = build(&mut tape, &vars)?;
    let (r, c) = tape.value(y).shape();
    let cot = random_matrix(r, c, 1.0, rng);
    let grads = tape.backward(y, cot.clone())?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| grads.get_or_zeros(&tape, v).into_vec())
        .collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let shapes: Vec<(usize, usize)> = inputs.iter().map(Matrix::shape).collect();
    let f = |x: &[f64]| {
        let mut tape = Tape::new();
        let mut off = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|&(r, c)| {
                let m = Matrix::from_vec(r, c, x[off..off + r * c].to_vec()).expect("sized");
                off += r * c;
                tape.leaf(m)
            })
            .collect();
        let y = build(&mut tape, &vars).expect("forward succeeded once");
        tape.value(y).as_slice().iter().zip(cot.as_slice()).map(|(a, b)| a * b).sum()
    };
    let numeric = numeric_gradient(f, &flat, FD_EPS);
    Ok(max_rel_err(&analytic, &numeric))
}

/// Finite-difference checks for every differentiable op, `instances` each.
pub fn gradient_suite(seed_value: u64, instances: usize) -> Result<Vec<CheckResult>> {
    const TOL: f64 = 1e-5;
    let mut rng: ChaCha8Rng = seed::stream(seed_value, "grad-oracle");
    let mut out = Vec::new();
    let mut record = |name: &str, errs: Vec<f64>| {
        let worst = errs.iter().copied().fold(0.0, f64::max);
        out.push(CheckResult::new(name, worst, TOL, format!("{} instances", errs.len())));
    };

    let mut errs = Vec::new();
    for k in 0..instances {
        let t = random_scene(&mut rng, 5, 0.35, 2);
        let km = Rc::new(submanifold_map(t.coords(), 1 + (k % 2) as u32)?);
        let w = random_matrix(27 * 2, 3, 0.5, &mut rng);
        let b = random_matrix(1, 3, 0.5, &mut rng);
        errs.push(grad_check(&[t.features().clone(), w, b], &mut rng, |tape, v| {
            ops::sparse_conv(tape, v[0], v[1], Some(v[2]), &km)
        })?);
    }
    record("conv gradient", errs);

    let mut errs = Vec::new();
    for _ in 0..instances {
        let n = rng.random_range(2..12);
        let x = random_matrix(n, 3, 1.0, &mut rng);
        let w = random_matrix(3, 4, 1.0, &mut rng);
        let b = random_matrix(1, 4, 1.0, &mut rng);
        errs.push(grad_check(&[x, w, b], &mut rng, |tape, v| ops::linear(tape, v[0], v[1], v[2]))?);
    }
    record("linear gradient", errs);

    let mut errs = Vec::new();
    for _ in 0..instances {
        let n = rng.random_range(3..15);
        let x = random_matrix(n, 3, 2.0, &mut rng);
        let g = random_matrix(1, 3, 1.0, &mut rng);
        let b = random_matrix(1, 3, 1.0, &mut rng);
        errs.push(grad_check(&[x, g, b], &mut rng, |tape, v| {
            let mut st = BnState::new(3);
            ops::batchnorm(tape, v[0], v[1], v[2], &mut st, true)
        })?);
    }
    record("batchnorm gradient", errs);

    let mut errs = Vec::new();
    for k in 0..instances {
        let t = random_scene(&mut rng, 6, 0.4, 2);
        let km = Rc::new(submanifold_map(t.coords(), [1, 3][k % 2])?);
        errs.push(grad_check(&[t.features().clone()], &mut rng, |tape, v| ops::sparse_avgpool(tape, v[0], &km))?);
    }
    record("avgpool gradient", errs);

    let mut errs = Vec::new();
    for k in 0..instances {
        let t = random_scene(&mut rng, 6, 0.4, 2);
        let f = tie_free_features(&mut rng, t.len(), 2, 1e-3);
        let km = Rc::new(submanifold_map(t.coords(), [1, 3][k % 2])?);
        errs.push(grad_check(&[f], &mut rng, |tape, v| ops::sparse_maxpool(tape, v[0], &km))?);
    }
    record("maxpool gradient (tie-free)", errs);

    // selection path: block output w.r.t. the selection weights and bias
    let mut errs = Vec::new();
    for k in 0..instances {
        let t = random_scene(&mut rng, 6, 0.3, 2);
        let f = tie_free_features(&mut rng, t.len(), 2, 1e-3);
        let maps = SiteMaps::new(t.coords().to_vec())?;
        let cfg = LrpConfig {
            selection: if k % 2 == 0 { Selection::PerChannel } else { Selection::PerVoxelScalar },
            ..LrpConfig::default()
        };
        let width = cfg.selection_width(2);
        let w = random_matrix(2, width, 1.0, &mut rng);
        let b = random_matrix(1, width, 1.0, &mut rng);
        errs.push(grad_check(&[f, w, b], &mut rng, |tape, v| {
            let vars = crate::lrp::LrpVars {
                selection: Some((v[1], v[2])),
                convs: Vec::new(),
            };
            Ok(crate::lrp::lrp_block(tape, v[0], &maps, &vars, &cfg)?.output)
        })?);
    }
    record("selection gradient", errs);

    let mut errs = Vec::new();
    for k in 0..instances {
        let n = rng.random_range(2..10);
        let logits = random_matrix(n, 5, 2.0, &mut rng);
        let labels: Vec<i32> = (0..n).map(|_| rng.random_range(-1..5)).collect();
        let weights: Option<Vec<f64>> = (k % 2 == 1).then(|| (0..5).map(|_| rng.random_range(0.5..2.0)).collect());
        errs.push(grad_check(&[logits], &mut rng, |tape, v| {
            Ok(ops::cross_entropy(tape, v[0], &labels, weights.as_deref())?.1)
        })?);
    }
    record("cross-entropy gradient", errs);
    Ok(out)
}

/// Reachable set of the 1-3-9 cascade at the center of a full `dim^3` grid,
/// compared against the per-axis Minkowski sum clipped to the grid.
pub fn reachability_cube(dim: i32) -> Result<CheckResult> {
    let mut coords = Vec::new();
    for x in 0..dim {
        for y in 0..dim {
            for z in 0..dim {
                coords.push(VoxelCoord::new(0, x, y, z));
            }
        }
    }
    let c = dim / 2;
    let got = reachable_set(&coords, &[1, 3, 9], VoxelCoord::new(0, c, c, c))?;
    let mut axis = BTreeSet::new();
    for a in [-1, 0, 1] {
        for b in [-3, 0, 3] {
            for e in [-9, 0, 9] {
                axis.insert(a + b + e);
            }
        }
    }
    let mut expect = BTreeSet::new();
    for &dx in &axis {
        for &dy in &axis {
            for &dz in &axis {
                let p = VoxelCoord::new(0, c + dx, c + dy, c + dz);
                if [p.x, p.y, p.z].iter().all(|v| (0..dim).contains(v)) {
                    expect.insert(p);
                }
            }
        }
    }
    let diff = got.symmetric_difference(&expect).count();
    Ok(CheckResult::new(
        "reachable cube",
        diff as f64,
        0.0,
        format!("{} reachable of {} expected on {dim}^3", got.len(), expect.len()),
    ))
}

/// Everything `oracle-check` runs, at reduced scene counts.
pub fn quick_suite(seed_value: u64) -> Result<Vec<CheckResult>> {
    let mut v = vec![
        pool_equivalence(seed_value, 5, &[1, 3, 9], &[0.05, 0.3, 0.9])?,
        conv_equivalence(seed_value, 6)?,
        cascade_equivalence(seed_value, 5, OpKind::Max)?,
        cascade_equivalence(seed_value, 5, OpKind::Avg)?,
        reachability_cube(31)?,
    ];
    v.extend(gradient_suite(seed_value, 2)?);
    Ok(v)
}
