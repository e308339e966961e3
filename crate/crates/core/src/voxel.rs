//! Sparse voxel tensors, point-cloud voxelization and coordinate hashing.

use std::collections::BTreeMap;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Integer lattice site tagged with the scene (batch) it belongs to.
///
/// Ordering is lexicographic over `(batch, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub batch: u16,
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelCoord {
    pub const fn new(batch: u16, x: i32, y: i32, z: i32) -> Self {
        Self { batch, x, y, z }
    }

    #[inline]
    pub fn offset(self, d: [i32; 3]) -> Self {
        Self {
            batch: self.batch,
            x: self.x + d[0],
            y: self.y + d[1],
            z: self.z + d[2],
        }
    }

    #[inline]
    pub fn xyz(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }

    /// Floor division of the spatial part, batch preserved.
    #[inline]
    pub fn div_floor(self, factor: i32) -> Self {
        Self {
            batch: self.batch,
            x: self.x.div_euclid(factor),
            y: self.y.div_euclid(factor),
            z: self.z.div_euclid(factor),
        }
    }
}

/// A set of unique sites with one feature row per site.
#[derive(Clone, Debug)]
pub struct SparseTensor {
    coords: Vec<VoxelCoord>,
    features: Matrix,
    stride: u32,
}

impl SparseTensor {
    pub fn new(coords: Vec<VoxelCoord>, features: Matrix, stride: u32) -> Result<Self> {
        if coords.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} coords but {} feature rows",
                coords.len(),
                features.rows()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidInput("stride must be positive".into()));
        }
        if !features.is_finite() {
            return Err(Error::InvalidInput("non-finite feature".into()));
        }
        let mut seen = rustc_hash::FxHashSet::default();
        for &c in &coords {
            if !seen.insert(c) {
                return Err(Error::DuplicateCoord(c));
            }
        }
        Ok(Self {
            coords,
            features,
            stride,
        })
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Same sites, new features.
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.rows() != self.coords.len() {
            return Err(Error::Shape("feature rows do not match coords".into()));
        }
        Ok(Self {
            coords: self.coords.clone(),
            features,
            stride: self.stride,
        })
    }

    /// Stack scenes into one tensor, assigning batch index `i` to part `i`.
    pub fn concat_batches(parts: &[SparseTensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidInput("no tensors to batch".into()));
        };
        let mut coords = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for (b, p) in parts.iter().enumerate() {
            if p.stride != first.stride || p.channels() != first.channels() {
                return Err(Error::Shape("batched tensors disagree on stride or channels".into()));
            }
            let batch = u16::try_from(b).map_err(|_| Error::InvalidInput("too many scenes".into()))?;
            coords.extend(p.coords.iter().map(|c| VoxelCoord { batch, ..*c }));
        }
        let feats: Vec<&Matrix> = parts.iter().map(|p| &p.features).collect();
        Ok(Self {
            coords,
            features: Matrix::vconcat(&feats)?,
            stride: first.stride,
        })
    }
}

/// Exact-match hash lookup from site to row.
#[derive(Clone, Debug, Default)]
pub struct CoordIndex {
    map: FxHashMap<VoxelCoord, u32>,
}

impl CoordIndex {
    pub fn build(coords: &[VoxelCoord]) -> Result<Self> {
        let mut map = FxHashMap::default();
        map.reserve(coords.len());
        for (i, &c) in coords.iter().enumerate() {
            if map.insert(c, i as u32).is_some() {
                return Err(Error::DuplicateCoord(c));
            }
        }
        Ok(Self { map })
    }

    #[inline]
    pub fn get(&self, c: &VoxelCoord) -> Option<usize> {
        self.map.get(c).map(|&i| i as usize)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn build_coord_index(t: &SparseTensor) -> Result<CoordIndex> {
    CoordIndex::build(t.coords())
}

/// Unique floor-divided sites in sorted order.
pub fn stride_coords(coords: &[VoxelCoord], factor: i32) -> Result<Vec<VoxelCoord>> {
    if factor < 2 {
        return Err(Error::InvalidInput(format!("stride factor {factor} < 2")));
    }
    let mut out: Vec<VoxelCoord> = coords.iter().map(|c| c.div_floor(factor)).collect();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    /// Class id per point, `-1` for unlabeled.
    pub labels: Vec<i32>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Vec<[f64; 3]>, labels: Vec<i32>) -> Result<Self> {
        let pc = Self {
            positions,
            colors,
            labels,
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.positions.len();
        if m == 0 {
            return Err(Error::InvalidInput("empty point cloud".into()));
        }
        if self.colors.len() != m || self.labels.len() != m {
            return Err(Error::Shape("point cloud columns have different lengths".into()));
        }
        if let Some(i) = self.positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite position")));
        }
        if self.labels.iter().any(|&l| l < -1) {
            return Err(Error::InvalidInput("labels must be >= -1".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Point-to-row assignment produced by [`voxelize`]; `-1` marks unassigned points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelMap {
    pub point_to_voxel: Vec<i64>,
}

#[derive(Clone, Debug)]
pub struct Voxelized {
    pub tensor: SparseTensor,
    pub map: VoxelMap,
    pub labels: Vec<i32>,
}

/// Quantize a point cloud to a lattice of `resolution` meters.
///
/// Rows come out in sorted coordinate order. Colors of points sharing a cell
/// are averaged; the cell label is the majority over labeled points with ties
/// going to the smallest class id, or `-1` when no point is labeled.
pub fn voxelize(pc: &PointCloud, resolution: f64) -> Result<Voxelized> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidInput(format!("resolution {resolution} must be > 0")));
    }
    pc.validate()?;

    struct Cell {
        color: [f64; 3],
        count: usize,
        votes: BTreeMap<i32, usize>,
    }

    let mut cells: BTreeMap<VoxelCoord, Cell> = BTreeMap::new();
    let mut point_cells = Vec::with_capacity(pc.len());
    for (i, p) in pc.positions.iter().enumerate() {
        let mut q = [0i32; 3];
        for a in 0..3 {
            let v = (p[a] / resolution).floor();
            if v < i32::MIN as f64 || v > i32::MAX as f64 {
                return Err(Error::InvalidInput(format!("point {i} is outside the lattice range")));
            }
            q[a] = v as i32;
        }
        let key = VoxelCoord::new(0, q[0], q[1], q[2]);
        point_cells.push(key);
        let cell = cells.entry(key).or_insert_with(|| Cell {
            color: [0.0; 3],
            count: 0,
            votes: BTreeMap::new(),
        });
        for a in 0..3 {
            cell.color[a] += pc.colors[i][a];
        }
        cell.count += 1;
        if pc.labels[i] >= 0 {
            *cell.votes.entry(pc.labels[i]).or_default() += 1;
        }
    }

    let n = cells.len();
    let mut coords = Vec::with_capacity(n);
    let mut feats = Matrix::zeros(n, 3);
    let mut labels = Vec::with_capacity(n);
    let mut row_of: FxHashMap<VoxelCoord, i64> = FxHashMap::default();
    for (row, (coord, cell)) in cells.into_iter().enumerate() {
        coords.push(coord);
        for a in 0..3 {
            feats.set(row, a, cell.color[a] / cell.count as f64);
        }
        // BTreeMap iterates ascending, so `>` keeps the smallest id on ties.
        let mut best = (-1, 0usize);
        for (&l, &c) in &cell.votes {
            if c > best.1 {
                best = (l, c);
            }
        }
        labels.push(best.0);
        row_of.insert(coord, row as i64);
    }
    let point_to_voxel = point_cells.iter().map(|c| row_of[c]).collect();
    Ok(Voxelized {
        tensor: SparseTensor::new(coords, feats, 1)?,
        map: VoxelMap { point_to_voxel },
        labels,
    })
}

/// Copy per-voxel predictions back onto the points that produced them.
pub fn project_predictions(voxel_labels: &[i32], vmap: &VoxelMap) -> Result<Vec<i32>> {
    vmap.point_to_voxel
        .iter()
        .map(|&v| {
            if v < 0 {
                Ok(-1)
            } else {
                voxel_labels.get(v as usize).copied().ok_or_else(|| {
                    Error::Invariant(format!(
                        "voxel map entry {v} out of range for {} voxels",
                        voxel_labels.len()
                    ))
                })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rustc_hash::FxHashSet;

    fn c(x: i32, y: i32, z: i32) -> VoxelCoord {
        VoxelCoord::new(0, x, y, z)
    }

    #[test]
    fn single_point_floor() {
        let pc = PointCloud::new(vec![[0.03, 0.05, 0.01]], vec![[0.2, 0.4, 0.6]], vec![3]).unwrap();
        let v = voxelize(&pc, 0.02).unwrap();
        assert_eq!(v.tensor.coords(), &[c(1, 2, 0)]);
        assert_eq!(v.tensor.features().row(0), &[0.2, 0.4, 0.6]);
        assert_eq!(v.labels, vec![3]);
        assert_eq!(v.map.point_to_voxel, vec![0]);
    }

    #[test]
    fn shared_cell_merges() {
        let pc = PointCloud::new(
            vec![[0.001, 0.001, 0.001], [0.002, 0.003, 0.004]],
            vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            vec![2, 2],
        )
        .unwrap();
        let v = voxelize(&pc, 0.02).unwrap();
        assert_eq!(v.tensor.len(), 1);
        assert_eq!(v.tensor.features().row(0), &[0.5, 0.0, 0.5]);
        assert_eq!(v.labels, vec![2]);
    }

    #[test]
    fn majority_tie_takes_smallest_label() {
        let pc = PointCloud::new(vec![[0.0; 3]; 4], vec![[0.0; 3]; 4], vec![7, 4, 7, 4]).unwrap();
        assert_eq!(voxelize(&pc, 1.0).unwrap().labels, vec![4]);
        let pc = PointCloud::new(vec![[0.0; 3]; 2], vec![[0.0; 3]; 2], vec![-1, -1]).unwrap();
        assert_eq!(voxelize(&pc, 1.0).unwrap().labels, vec![-1]);
    }

    #[test]
    fn negative_positions_floor_down() {
        let pc = PointCloud::new(vec![[-0.01, -0.05, 0.0]], vec![[0.0; 3]], vec![0]).unwrap();
        let v = voxelize(&pc, 0.02).unwrap();
        assert_eq!(v.tensor.coords(), &[c(-1, -3, 0)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]], vec![[0.0; 3]], vec![0]).is_err());
        let pc = PointCloud::new(vec![[0.0; 3]], vec![[0.0; 3]], vec![0]).unwrap();
        assert!(voxelize(&pc, 0.0).is_err());
        assert!(voxelize(&pc, -1.0).is_err());
    }

    #[test]
    fn voxel_count_matches_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let positions: Vec<[f64; 3]> = (0..1000)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..0.5)])
            .collect();
        let pc = PointCloud::new(positions.clone(), vec![[0.5; 3]; 1000], vec![0; 1000]).unwrap();
        let v = voxelize(&pc, 0.05).unwrap();
        let oracle: FxHashSet<[i64; 3]> = positions
            .iter()
            .map(|p| [(p[0] / 0.05).floor() as i64, (p[1] / 0.05).floor() as i64, (p[2] / 0.05).floor() as i64])
            .collect();
        assert_eq!(v.tensor.len(), oracle.len());
    }

    #[test]
    fn voxelize_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = 500;
        let positions: Vec<[f64; 3]> = (0..m).map(|_| [rng.random_range(0.0..0.3), rng.random_range(0.0..0.3), 0.0]).collect();
        let colors: Vec<[f64; 3]> = (0..m).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let labels: Vec<i32> = (0..m).map(|_| rng.random_range(-1..4)).collect();
        let a = voxelize(&PointCloud::new(positions.clone(), colors.clone(), labels.clone()).unwrap(), 0.05).unwrap();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let b = voxelize(
            &PointCloud::new(
                perm.iter().map(|&i| positions[i]).collect(),
                perm.iter().map(|&i| colors[i]).collect(),
                perm.iter().map(|&i| labels[i]).collect(),
            )
            .unwrap(),
            0.05,
        )
        .unwrap();
        assert_eq!(a.tensor.coords(), b.tensor.coords());
        assert_eq!(a.labels, b.labels);
        assert!(a.tensor.features().max_abs_diff(b.tensor.features()) < 1e-12);
    }

    #[test]
    fn projection_cases() {
        let vmap = VoxelMap { point_to_voxel: vec![0, 1, 2] };
        assert_eq!(project_predictions(&[4, 5, 6], &vmap).unwrap(), vec![4, 5, 6]);
        let vmap = VoxelMap { point_to_voxel: vec![0, 0, -1] };
        assert_eq!(project_predictions(&[5], &vmap).unwrap(), vec![5, 5, -1]);
        let vmap = VoxelMap { point_to_voxel: vec![3] };
        assert!(matches!(project_predictions(&[5], &vmap), Err(Error::Invariant(_))));
    }

    #[test]
    fn projection_matches_naive_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<i32> = (0..50).map(|_| rng.random_range(0..10)).collect();
        let vmap = VoxelMap {
            point_to_voxel: (0..400).map(|_| rng.random_range(-1..50)).collect(),
        };
        let got = project_predictions(&labels, &vmap).unwrap();
        for (i, &v) in vmap.point_to_voxel.iter().enumerate() {
            let mut want = -1;
            for (j, &l) in labels.iter().enumerate() {
                if v == j as i64 {
                    want = l;
                }
            }
            assert_eq!(got[i], want);
        }
    }

    #[test]
    fn round_trip_label_fidelity() {
        // every point in a cell shares the cell's label
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pos = Vec::new();
        let mut lab = Vec::new();
        for _ in 0..300 {
            let cell = [rng.random_range(0..6), rng.random_range(0..6), rng.random_range(0..2)];
            let p = [
                (cell[0] as f64 + rng.random_range(0.01..0.99)) * 0.1,
                (cell[1] as f64 + rng.random_range(0.01..0.99)) * 0.1,
                (cell[2] as f64 + rng.random_range(0.01..0.99)) * 0.1,
            ];
            pos.push(p);
            lab.push((cell[0] + 2 * cell[1] + cell[2]) % 5);
        }
        let pc = PointCloud::new(pos, vec![[0.0; 3]; 300], lab.clone()).unwrap();
        let v = voxelize(&pc, 0.1).unwrap();
        assert_eq!(project_predictions(&v.labels, &v.map).unwrap(), lab);
    }

    #[test]
    fn coord_index_lookup() {
        let idx = CoordIndex::build(&[c(0, 0, 0)]).unwrap();
        assert_eq!(idx.get(&c(0, 0, 0)), Some(0));
        assert_eq!(idx.get(&c(1, 0, 0)), None);
        assert!(matches!(CoordIndex::build(&[c(1, 1, 1), c(1, 1, 1)]), Err(Error::DuplicateCoord(_))));
    }

    #[test]
    fn coord_index_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut set = FxHashSet::default();
        while set.len() < 10_000 {
            set.insert(VoxelCoord::new(rng.random_range(0..2), rng.random_range(-50..50), rng.random_range(-50..50), rng.random_range(-50..50)));
        }
        let coords: Vec<VoxelCoord> = set.into_iter().collect();
        let idx = CoordIndex::build(&coords).unwrap();
        for (i, q) in coords.iter().enumerate() {
            assert_eq!(idx.get(q), Some(i));
        }
        let mut absent = 0;
        while absent < 10_000 {
            let q = VoxelCoord::new(rng.random_range(0..2), rng.random_range(-60..60), rng.random_range(-60..60), rng.random_range(-60..60));
            let linear = coords.iter().position(|c| *c == q);
            if linear.is_none() {
                assert_eq!(idx.get(&q), None);
                absent += 1;
            } else {
                assert_eq!(idx.get(&q), linear);
            }
        }
    }

    #[test]
    fn stride_examples() {
        assert_eq!(stride_coords(&[c(0, 0, 0), c(1, 1, 1)], 2).unwrap(), vec![c(0, 0, 0)]);
        assert_eq!(stride_coords(&[c(0, 0, 0), c(2, 0, 0)], 2).unwrap(), vec![c(0, 0, 0), c(1, 0, 0)]);
        assert_eq!(stride_coords(&[c(-1, 0, 0)], 2).unwrap(), vec![c(-1, 0, 0)]);
        assert!(stride_coords(&[c(0, 0, 0)], 1).is_err());
    }

    #[test]
    fn stride_matches_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = FxHashSet::default();
        for _ in 0..2000 {
            set.insert(c(rng.random_range(-40..40), rng.random_range(-40..40), rng.random_range(-40..40)));
        }
        let coords: Vec<_> = set.into_iter().collect();
        let got: FxHashSet<_> = stride_coords(&coords, 4).unwrap().into_iter().collect();
        let oracle: FxHashSet<_> = coords
            .iter()
            .map(|v| c((v.x as f64 / 4.0).floor() as i32, (v.y as f64 / 4.0).floor() as i32, (v.z as f64 / 4.0).floor() as i32))
            .collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn tensor_rejects_duplicates_and_batches() {
        assert!(SparseTensor::new(vec![c(0, 0, 0), c(0, 0, 0)], Matrix::zeros(2, 1), 1).is_err());
        let t = SparseTensor::new(vec![c(0, 0, 0)], Matrix::filled(1, 2, 1.0), 1).unwrap();
        let b = SparseTensor::concat_batches(&[t.clone(), t]).unwrap();
        assert_eq!(b.coords()[1].batch, 1);
        assert_eq!(b.len(), 2);
    }
}
