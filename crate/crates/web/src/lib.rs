//! Browser bindings: a random sparse scene with three interactive views
//! (cascade reachability, gradient receptive field, pooled feature taps).
//!
//! Every view returns a flat `dim * dim * depth` array indexed
//! `(x * dim + y) * depth + z`; cells outside the scene hold 0.

use lrp_core::erf::{erf_stage, reachable_set};
use lrp_core::lrp::{lrp_forward, random_matrix, LrpConfig, LrpParams, Selection};
use lrp_core::network::{randomize_selection, StageModel};
use lrp_core::selfcheck::random_scene;
use lrp_core::{seed, SparseTensor, VoxelCoord};
use wasm_bindgen::prelude::*;

const CHANNELS: usize = 4;

/// Comma-separated branch dilations, e.g. `"1,3,9"`.
fn parse_ladder(s: &str) -> Result<Vec<u32>, String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| format!("bad dilation '{t}'")))
        .collect::<Result<_, _>>()?;
    LrpConfig { dilations: v.clone(), ..LrpConfig::default() }
        .validate()
        .map_err(|e| e.to_string())?;
    Ok(v)
}

#[wasm_bindgen]
pub struct Scene {
    dim: i32,
    depth: i32,
    seed: u64,
    tensor: SparseTensor,
}

impl Scene {
    pub fn build(dim: u32, depth: u32, occupancy: f64, seed_value: u64) -> Result<Scene, String> {
        if !(2..=64).contains(&dim) || !(1..=64).contains(&depth) {
            return Err("dim must be in 2..=64 and depth in 1..=64".into());
        }
        if !(occupancy > 0.0 && occupancy <= 1.0) {
            return Err("occupancy must be in (0, 1]".into());
        }
        let (dim, depth) = (dim as i32, depth as i32);
        let mut rng = seed::stream(seed_value, "web-scene");
        // random_scene draws a cube; keep the slab of the requested depth
        let cube = random_scene(&mut rng, dim, occupancy, CHANNELS);
        let keep: Vec<usize> = (0..cube.len()).filter(|&i| cube.coords()[i].z < depth).collect();
        let mut coords: Vec<VoxelCoord> = keep.iter().map(|&i| cube.coords()[i]).collect();
        if coords.is_empty() {
            coords.push(VoxelCoord::new(0, dim / 2, dim / 2, 0));
        }
        let features = random_matrix(coords.len(), CHANNELS, 1.0, &mut rng);
        let tensor = SparseTensor::new(coords, features, 1).map_err(|e| e.to_string())?;
        Ok(Scene { dim, depth, seed: seed_value, tensor })
    }

    fn cell(&self, c: &VoxelCoord) -> usize {
        ((c.x * self.dim + c.y) * self.depth + c.z) as usize
    }

    fn grid_len(&self) -> usize {
        (self.dim * self.dim * self.depth) as usize
    }

    fn focus(&self, x: i32, y: i32, z: i32) -> Result<VoxelCoord, String> {
        let f = VoxelCoord::new(0, x, y, z);
        if self.tensor.coords().contains(&f) {
            Ok(f)
        } else {
            Err(format!("({x}, {y}, {z}) is empty"))
        }
    }

    /// 1 occupied, 2 reachable from the focus, 3 the focus itself.
    pub fn reachable_grid(&self, ladder: &str, x: i32, y: i32, z: i32) -> Result<Vec<u8>, String> {
        let focus = self.focus(x, y, z)?;
        let cfg = LrpConfig { dilations: parse_ladder(ladder)?, ..LrpConfig::default() };
        let reach = reachable_set(self.tensor.coords(), &cfg.cascade(), focus).map_err(|e| e.to_string())?;
        let mut g = vec![0u8; self.grid_len()];
        for c in self.tensor.coords() {
            g[self.cell(c)] = if reach.contains(c) { 2 } else { 1 };
        }
        g[self.cell(&focus)] = 3;
        Ok(g)
    }

    /// Input-gradient magnitude of one stage block at the focus, scaled to a
    /// maximum of 1.
    pub fn erf_grid(&self, with_lrp: bool, ladder: &str, x: i32, y: i32, z: i32) -> Result<Vec<f64>, String> {
        let focus = self.focus(x, y, z)?;
        let lrp = with_lrp
            .then(|| parse_ladder(ladder).map(|d| LrpConfig { dilations: d, ..LrpConfig::default() }))
            .transpose()?;
        let mut rng = seed::stream(self.seed, "web-stage");
        let mut model = StageModel::init(CHANNELS, CHANNELS, lrp, &mut rng).map_err(|e| e.to_string())?;
        randomize_selection(&mut model.params, 0.5, &mut rng);
        let map = erf_stage(&mut model, &self.tensor, focus).map_err(|e| e.to_string())?;
        let top = map.magnitude.iter().copied().fold(0.0, f64::max);
        let mut g = vec![0.0; self.grid_len()];
        for (c, m) in map.coords.iter().zip(&map.magnitude) {
            g[self.cell(c)] = if top > 0.0 { m / top } else { 0.0 };
        }
        Ok(g)
    }

    /// Channel 0 after cascade stage `stage` of a max cascade over `ladder`.
    pub fn cascade_grid(&self, ladder: &str, stage: usize) -> Result<Vec<f64>, String> {
        let cfg = LrpConfig {
            dilations: parse_ladder(ladder)?,
            selection: Selection::None,
            ..LrpConfig::default()
        };
        let mut rng = seed::stream(self.seed, "web-cascade");
        let params = LrpParams::init(&cfg, CHANNELS, &mut rng).map_err(|e| e.to_string())?;
        let e = lrp_forward(&self.tensor, &params, &cfg).map_err(|e| e.to_string())?;
        let tap = match stage {
            0 => self.tensor.features(),
            k => e.taps.get(k - 1).ok_or_else(|| format!("cascade has {} stages", e.taps.len()))?,
        };
        let mut g = vec![0.0; self.grid_len()];
        for (r, c) in self.tensor.coords().iter().enumerate() {
            g[self.cell(c)] = tap.get(r, 0);
        }
        Ok(g)
    }
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(dim: u32, depth: u32, occupancy: f64, seed: u32) -> Result<Scene, JsError> {
        Scene::build(dim, depth, occupancy, u64::from(seed)).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(getter)]
    pub fn dim(&self) -> u32 {
        self.dim as u32
    }

    #[wasm_bindgen(getter)]
    pub fn depth(&self) -> u32 {
        self.depth as u32
    }

    #[wasm_bindgen(getter)]
    pub fn voxels(&self) -> usize {
        self.tensor.len()
    }

    /// Occupied cell nearest the middle of the slab at depth `z`.
    pub fn default_focus(&self, z: i32) -> Vec<i32> {
        let m = self.dim / 2;
        let c = self
            .tensor
            .coords()
            .iter()
            .min_by_key(|c| (c.x - m).pow(2) + (c.y - m).pow(2) + 4 * (c.z - z).pow(2))
            .expect("scene is never empty");
        vec![c.x, c.y, c.z]
    }

    pub fn reachable(&self, ladder: &str, x: i32, y: i32, z: i32) -> Result<Vec<u8>, JsError> {
        self.reachable_grid(ladder, x, y, z).map_err(|e| JsError::new(&e))
    }

    pub fn erf(&self, with_lrp: bool, ladder: &str, x: i32, y: i32, z: i32) -> Result<Vec<f64>, JsError> {
        self.erf_grid(with_lrp, ladder, x, y, z).map_err(|e| JsError::new(&e))
    }

    pub fn cascade(&self, ladder: &str, stage: usize) -> Result<Vec<f64>, JsError> {
        self.cascade_grid(ladder, stage).map_err(|e| JsError::new(&e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reachable_marks_focus_and_stays_on_occupied_cells() {
        let s = Scene::build(12, 1, 0.6, 3).unwrap();
        let f = s.default_focus(0);
        let g = s.reachable_grid("1,3,9", f[0], f[1], f[2]).unwrap();
        assert_eq!(g.len(), 144);
        assert_eq!(g.iter().filter(|&&v| v == 3).count(), 1);
        assert_eq!(g.iter().filter(|&&v| v > 0).count(), s.voxels());
    }

    #[test]
    fn lrp_widens_the_stage_field() {
        let s = Scene::build(15, 1, 1.0, 1).unwrap();
        let (a, b) = (s.erf_grid(false, "1,3,9", 7, 7, 0).unwrap(), s.erf_grid(true, "1,3,9", 7, 7, 0).unwrap());
        let count = |g: &[f64]| g.iter().filter(|&&v| v > 0.0).count();
        assert!(count(&a) < count(&b));
        assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn cascade_stages_grow_monotonically() {
        let s = Scene::build(10, 2, 0.5, 2).unwrap();
        let mut prev = s.cascade_grid("1,3,9", 0).unwrap();
        for k in 1..=3 {
            let g = s.cascade_grid("1,3,9", k).unwrap();
            assert!(g.iter().zip(&prev).all(|(a, b)| a >= b));
            prev = g;
        }
        assert!(s.cascade_grid("1,3,9", 4).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Scene::build(1, 1, 0.5, 0).is_err());
        assert!(Scene::build(8, 1, 0.0, 0).is_err());
        let s = Scene::build(8, 1, 0.5, 0).unwrap();
        assert!(s.reachable_grid("2,4", 0, 0, 0).is_err());
    }
}
