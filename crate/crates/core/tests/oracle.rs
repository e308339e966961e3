use std::collections::BTreeSet;

use lrp_core::lrp::{random_matrix, OpKind};
use lrp_core::ops::{build_kernel_map, dilated_offsets, pool, submanifold_map};
use lrp_core::voxel::CoordIndex;
use lrp_core::oracle::{dense_masked_pool, DenseGrid, PoolMode};
use lrp_core::selfcheck::{cascade_equivalence, conv_equivalence, gradient_suite, pool_equivalence, random_scene};
use lrp_core::{seed, SparseTensor, VoxelCoord};

#[test]
fn kernel_map_matches_brute_force_matcher() {
    let mut rng = seed::stream(11, "km");
    for d in [1u32, 3] {
        let t = random_scene(&mut rng, 16, 0.3, 1);
        let offs = dilated_offsets(d).unwrap();
        let km = submanifold_map(t.coords(), d).unwrap();
        let got: BTreeSet<(usize, usize, usize)> = km.triples().collect();
        let mut want = BTreeSet::new();
        for (o, oc) in t.coords().iter().enumerate() {
            for (s, off) in offs.as_slice().iter().enumerate() {
                for (i, ic) in t.coords().iter().enumerate() {
                    if *ic == oc.offset(*off) {
                        want.insert((i, o, s));
                    }
                }
            }
        }
        assert_eq!(got, want);
    }
}

#[test]
fn kernel_map_of_empty_input_is_empty() {
    let idx = CoordIndex::build(&[]).unwrap();
    let km = build_kernel_map(&idx, 0, &[VoxelCoord::new(0, 0, 0, 0)], &dilated_offsets(1).unwrap()).unwrap();
    assert!(km.is_empty());
}

#[test]
fn pools_and_convs_match_dense_references() {
    let r = pool_equivalence(21, 12, &[1, 3, 9], &[0.05, 0.3, 0.9]).unwrap();
    assert!(r.passed, "{}", r.line());
    let r = conv_equivalence(21, 12).unwrap();
    assert!(r.passed, "{}", r.line());
    for op in [OpKind::Max, OpKind::Avg] {
        let r = cascade_equivalence(21, 10, op).unwrap();
        assert!(r.passed, "{}", r.line());
    }
}

#[test]
fn fully_occupied_grid_pool_is_dense() {
    // every offset in the interior matches, so the max equals a plain 27-cell max
    let dim = 7;
    let mut coords = Vec::new();
    for x in 0..dim {
        for y in 0..dim {
            for z in 0..dim {
                coords.push(VoxelCoord::new(0, x, y, z));
            }
        }
    }
    let mut rng = seed::stream(2, "dense");
    let f = random_matrix(coords.len(), 2, 1.0, &mut rng);
    let t = SparseTensor::new(coords, f, 1).unwrap();
    let km = submanifold_map(t.coords(), 1).unwrap();
    let y = pool::maxpool_forward(t.features(), &km).unwrap().values;
    let at = |x: i32, y: i32, z: i32| (x * dim * dim + y * dim + z) as usize;
    for x in 1..dim - 1 {
        for yy in 1..dim - 1 {
            for z in 1..dim - 1 {
                for c in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for a in -1..=1 {
                        for b in -1..=1 {
                            for e in -1..=1 {
                                m = m.max(t.features().get(at(x + a, yy + b, z + e), c));
                            }
                        }
                    }
                    assert_eq!(y.get(at(x, yy, z), c), m);
                }
            }
        }
    }
}

#[test]
fn fully_occupied_3_cube_center_sees_the_global_max() {
    let mut rng = seed::stream(4, "g");
    let mut coords = Vec::new();
    for x in 0..3 {
        for y in 0..3 {
            for z in 0..3 {
                coords.push(VoxelCoord::new(0, x, y, z));
            }
        }
    }
    let f = random_matrix(27, 1, 1.0, &mut rng);
    let g = DenseGrid::from_rows(3, &coords, &f).unwrap();
    let out = dense_masked_pool(&g, 1, PoolMode::Max).rows_at(&coords);
    let top = f.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // row 13 is the center; a corner only reaches its own 2x2x2 octant
    assert_eq!(out.get(13, 0), top);
    let octant = [0, 1, 3, 4, 9, 10, 12, 13].map(|r| f.get(r, 0));
    assert_eq!(out.get(0, 0), octant.into_iter().fold(f64::NEG_INFINITY, f64::max));
}

#[test]
fn gradients_match_finite_differences() {
    for r in gradient_suite(5, 3).unwrap() {
        assert!(r.passed, "{}", r.line());
    }
}

#[test]
fn results_are_identical_across_thread_counts() {
    let mut rng = seed::stream(8, "thr");
    let t = random_scene(&mut rng, 20, 0.3, 8);
    let w = random_matrix(27 * 8, 8, 0.2, &mut rng);
    let km = submanifold_map(t.coords(), 3).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let y = lrp_core::ops::conv::conv_forward(t.features(), &w, None, &km).unwrap();
            let gy = y.map(|v| v.sin());
            let g = lrp_core::ops::conv::conv_backward(&gy, t.features(), &w, &km).unwrap();
            (y, g.input, g.weights)
        })
    };
    let a = run(1);
    for n in [2, 3, 4] {
        assert_eq!(a, run(n));
    }
}
