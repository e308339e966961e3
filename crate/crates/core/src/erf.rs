//! Effective receptive fields from input gradients, and the reachability
//! oracle for dilated pooling cascades.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rustc_hash::FxHashSet;

use crate::error::{Error, Result};
use crate::network::{Network, Pyramid, StageModel};
use crate::ops::{SiteMaps, Tape, Var};
use crate::tensor::Matrix;
use crate::voxel::{SparseTensor, VoxelCoord};

/// Per-voxel gradient magnitude, rows aligned with the input coords.
#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    pub focus: VoxelCoord,
    pub coords: Vec<VoxelCoord>,
    pub magnitude: Vec<f64>,
}

impl ErfMap {
    /// Coords with nonzero magnitude.
    pub fn support(&self) -> BTreeSet<VoxelCoord> {
        self.coords
            .iter()
            .zip(&self.magnitude)
            .filter(|(_, &m)| m != 0.0)
            .map(|(c, _)| *c)
            .collect()
    }
}

/// Seed 1 on every output channel of the focus row, backpropagate, and take
/// the per-voxel L2 norm of the input gradient. `model` maps the input var to
/// an output var with rows aligned to `input`.
pub fn erf_compute(
    input: &SparseTensor,
    focus: VoxelCoord,
    model: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<ErfMap> {
    let row = input
        .coords()
        .iter()
        .position(|c| *c == focus)
        .ok_or(Error::MissingFocus(focus))?;
    let mut tape = Tape::new();
    let x = tape.leaf(input.features().clone());
    let y = model(&mut tape, x)?;
    let (n, c) = tape.value(y).shape();
    if n != input.len() {
        return Err(Error::Shape("model output rows differ from input rows".into()));
    }
    let mut seed = Matrix::zeros(n, c);
    seed.row_mut(row).fill(1.0);
    let grads = tape.backward(y, seed)?;
    let g = grads.get_or_zeros(&tape, x);
    let magnitude = (0..n)
        .map(|r| g.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(ErfMap {
        focus,
        coords: input.coords().to_vec(),
        magnitude,
    })
}

/// ERF of a full network's logits, eval-mode batch norm.
pub fn erf_network(net: &mut Network, input: &SparseTensor, focus: VoxelCoord) -> Result<ErfMap> {
    let pyramid = Pyramid::build(input.coords())?;
    erf_compute(input, focus, |tape, x| Ok(net.forward_var(tape, x, &pyramid, false)?.logits))
}

/// ERF of a single stage block, eval-mode batch norm.
pub fn erf_stage(model: &mut StageModel, input: &SparseTensor, focus: VoxelCoord) -> Result<ErfMap> {
    let maps = SiteMaps::new(input.coords().to_vec())?;
    erf_compute(input, focus, |tape, x| model.forward_var(tape, x, &maps, false))
}

/// Occupied voxels that can influence `focus` through a cascade of 3x3x3
/// windows with the given dilations, applied in order.
///
/// The output of the last stage at `focus` reads the last stage's window, so
/// the expansion walks the ladder from its end back to its start.
pub fn reachable_set(coords: &[VoxelCoord], ladder: &[u32], focus: VoxelCoord) -> Result<BTreeSet<VoxelCoord>> {
    let occupied: FxHashSet<VoxelCoord> = coords.iter().copied().collect();
    if !occupied.contains(&focus) {
        return Err(Error::MissingFocus(focus));
    }
    let mut frontier: FxHashSet<VoxelCoord> = FxHashSet::default();
    frontier.insert(focus);
    for &d in ladder.iter().rev() {
        let d = d as i32;
        let mut next = FxHashSet::default();
        for c in &frontier {
            for a in [-d, 0, d] {
                for b in [-d, 0, d] {
                    for e in [-d, 0, d] {
                        let n = c.offset([a, b, e]);
                        if occupied.contains(&n) {
                            next.insert(n);
                        }
                    }
                }
            }
        }
        frontier = next;
    }
    Ok(frontier.into_iter().collect())
}

/// CSV with `#` header comments (focus and config), then `x,y,z,magnitude`.
pub fn erf_format(map: &ErfMap, config: &BTreeMap<String, String>) -> String {
    let f = map.focus;
    let mut s = format!("# focus {} {} {} {}\n", f.batch, f.x, f.y, f.z);
    for (k, v) in config {
        writeln!(s, "# {k} = {v}").expect("string write");
    }
    s.push_str("x,y,z,magnitude\n");
    for (c, m) in map.coords.iter().zip(&map.magnitude) {
        writeln!(s, "{},{},{},{m}", c.x, c.y, c.z).expect("string write");
    }
    s
}

pub fn erf_export(map: &ErfMap, config: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, erf_format(map, config).as_bytes())
}

/// Inverse of [`erf_format`]; rows take the focus batch index.
pub fn erf_parse(text: &str, path: &Path) -> Result<ErfMap> {
    let err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut focus = None;
    let mut coords = Vec::new();
    let mut magnitude = Vec::new();
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if let Some(rest) = line.strip_prefix("# focus ") {
            let v: Vec<i32> = rest
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| err(ln, "bad focus coordinate")))
                .collect::<Result<_>>()?;
            if v.len() != 4 || v[0] < 0 {
                return Err(err(ln, "focus needs batch x y z"));
            }
            focus = Some(VoxelCoord::new(v[0] as u16, v[1], v[2], v[3]));
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            if line.trim() != "x,y,z,magnitude" {
                return Err(err(ln, "expected header x,y,z,magnitude"));
            }
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(err(ln, "expected 4 columns"));
        }
        let xyz: Vec<i32> = f[..3]
            .iter()
            .map(|t| t.trim().parse().map_err(|_| err(ln, "bad coordinate")))
            .collect::<Result<_>>()?;
        let m: f64 = f[3].trim().parse().map_err(|_| err(ln, "bad magnitude"))?;
        if !(m.is_finite() && m >= 0.0) {
            return Err(err(ln, "magnitude must be finite and non-negative"));
        }
        coords.push((xyz[0], xyz[1], xyz[2]));
        magnitude.push(m);
    }
    let focus = focus.ok_or_else(|| err(0, "missing '# focus' line"))?;
    Ok(ErfMap {
        focus,
        coords: coords
            .into_iter()
            .map(|(x, y, z)| VoxelCoord::new(focus.batch, x, y, z))
            .collect(),
        magnitude,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{self, submanifold_map};
    use std::rc::Rc;

    fn cube(dim: i32) -> Vec<VoxelCoord> {
        let mut v = Vec::new();
        for x in 0..dim {
            for y in 0..dim {
                for z in 0..dim {
                    v.push(VoxelCoord::new(0, x, y, z));
                }
            }
        }
        v
    }

    fn tensor(coords: Vec<VoxelCoord>, ch: usize) -> SparseTensor {
        let n = coords.len();
        let f = Matrix::from_vec(n, ch, (0..n * ch).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect()).unwrap();
        SparseTensor::new(coords, f, 1).unwrap()
    }

    #[test]
    fn identity_model_only_focus() {
        let t = tensor(cube(4), 2);
        let focus = VoxelCoord::new(0, 1, 2, 3);
        let m = erf_compute(&t, focus, |_, x| Ok(x)).unwrap();
        assert_eq!(m.support(), BTreeSet::from([focus]));
        assert!(matches!(
            erf_compute(&t, VoxelCoord::new(0, 9, 9, 9), |_, x| Ok(x)),
            Err(Error::MissingFocus(_))
        ));
    }

    #[test]
    fn single_conv_is_one_hop() {
        let t = tensor(cube(6), 2);
        let km = Rc::new(submanifold_map(t.coords(), 1).unwrap());
        let focus = VoxelCoord::new(0, 2, 3, 3);
        let w = Matrix::filled(27 * 2, 3, 0.1);
        let m = erf_compute(&t, focus, |tape, x| {
            let w = tape.leaf(w);
            ops::sparse_conv(tape, x, w, None, &km)
        })
        .unwrap();
        let s = m.support();
        assert_eq!(s.len(), 27);
        assert!(s.iter().all(|c| (c.x - 2).abs() <= 1 && (c.y - 3).abs() <= 1 && (c.z - 3).abs() <= 1));
    }

    #[test]
    fn reachable_full_grid_is_cube() {
        let coords = cube(27);
        let focus = VoxelCoord::new(0, 13, 13, 13);
        let r = reachable_set(&coords, &[1, 3, 9], focus).unwrap();
        assert_eq!(r.len(), 27 * 27 * 27);
        let r = reachable_set(&coords, &[1, 3, 9], VoxelCoord::new(0, 0, 0, 0)).unwrap();
        assert_eq!(r.len(), 14 * 14 * 14);
    }

    #[test]
    fn reachable_isolated_and_separated() {
        let focus = VoxelCoord::new(0, 0, 0, 0);
        assert_eq!(reachable_set(&[focus], &[1, 3, 9], focus).unwrap(), BTreeSet::from([focus]));
        let mut coords: Vec<VoxelCoord> = (0..3).map(|x| VoxelCoord::new(0, x, 0, 0)).collect();
        // gap of 14 empty cells between x = 2 and x = 17
        coords.extend((17..20).map(|x| VoxelCoord::new(0, x, 0, 0)));
        let r = reachable_set(&coords, &[1, 3, 9], focus).unwrap();
        assert!(r.iter().all(|c| c.x <= 2));
    }

    #[test]
    fn export_round_trip() {
        let map = ErfMap {
            focus: VoxelCoord::new(0, 1, 2, 3),
            coords: vec![VoxelCoord::new(0, 1, 2, 3), VoxelCoord::new(0, -4, 0, 7)],
            magnitude: vec![0.125, 1.0 / 3.0],
        };
        let mut cfg = BTreeMap::new();
        cfg.insert("lrp.op".to_string(), "max".to_string());
        let text = erf_format(&map, &cfg);
        assert_eq!(erf_parse(&text, Path::new("e")).unwrap(), map);
        let empty = ErfMap {
            focus: map.focus,
            coords: vec![],
            magnitude: vec![],
        };
        let text = erf_format(&empty, &BTreeMap::new());
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1);
        assert_eq!(erf_parse(&text, Path::new("e")).unwrap(), empty);
    }
}
