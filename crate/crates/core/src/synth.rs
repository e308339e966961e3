//! Procedural indoor rooms with labeled surface points.
//!
//! A room is a floor plus four low walls, sampled as surfaces. Objects (boxes, spheres,
//! L-shapes) stand on the floor without overlapping. With long-range
//! coupling enabled, a colored beacon and a gray dependent object are placed
//! far apart; the dependent object's label is determined by the beacon's
//! color and cannot be read off its own neighborhood.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::voxel::PointCloud;

pub const FLOOR: i32 = 0;
pub const WALL: i32 = 1;
pub const BOX: i32 = 2;
pub const SPHERE: i32 = 3;
pub const LSHAPE: i32 = 4;
pub const BEACON_WARM: i32 = 5;
pub const BEACON_COOL: i32 = 6;
pub const DEPENDENT_WARM: i32 = 7;
pub const DEPENDENT_COOL: i32 = 8;
pub const NUM_CLASSES: usize = 9;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "floor",
    "wall",
    "box",
    "sphere",
    "lshape",
    "beacon_warm",
    "beacon_cool",
    "dependent_warm",
    "dependent_cool",
];

/// Label a dependent object takes next to a beacon of class `beacon`.
pub fn dependent_label(beacon: i32) -> i32 {
    match beacon {
        BEACON_WARM => DEPENDENT_WARM,
        BEACON_COOL => DEPENDENT_COOL,
        _ => -1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Box,
    Sphere,
    LShape,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 3] = [ObjectKind::Box, ObjectKind::Sphere, ObjectKind::LShape];

    pub fn label(self) -> i32 {
        match self {
            ObjectKind::Box => BOX,
            ObjectKind::Sphere => SPHERE,
            ObjectKind::LShape => LSHAPE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectKind::Box => "box",
            ObjectKind::Sphere => "sphere",
            ObjectKind::LShape => "lshape",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown object kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSceneSpec {
    /// Interior floor extent along x and y, meters.
    pub extent: [f64; 2],
    pub wall_height: f64,
    /// Width of the sampled strip on top of each wall.
    pub thickness: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub kinds: Vec<ObjectKind>,
    pub points_per_m2: f64,
    pub color_noise: f64,
    pub long_range_coupling: bool,
    /// Horizontal distance range between beacon and dependent centers.
    pub coupling_distance: f64,
    pub coupling_max_distance: f64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            extent: [2.0, 2.0],
            wall_height: 0.2,
            thickness: 0.05,
            min_objects: 2,
            max_objects: 4,
            kinds: ObjectKind::ALL.to_vec(),
            points_per_m2: 600.0,
            color_noise: 0.03,
            long_range_coupling: true,
            coupling_distance: 0.5,
            coupling_max_distance: 0.6,
        }
    }
}

impl SynthSceneSpec {
    pub fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.extent[0], self.extent[1], self.wall_height, self.thickness, self.points_per_m2];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("scene extents, thickness and density must be positive".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if self.max_objects > 0 && self.kinds.is_empty() {
            return Err(Error::Config("objects requested but no object kinds enabled".into()));
        }
        if !(self.color_noise >= 0.0) {
            return Err(Error::Config("color_noise must be non-negative".into()));
        }
        if self.long_range_coupling {
            let diag = (self.extent[0].powi(2) + self.extent[1].powi(2)).sqrt();
            if self.coupling_distance < 0.5 || self.coupling_distance > diag - 0.6 {
                return Err(Error::Config(format!(
                    "coupling_distance must lie in [0.5, {:.2}] for this room",
                    diag - 0.6
                )));
            }
            if !(self.coupling_max_distance >= self.coupling_distance) {
                return Err(Error::Config("coupling_max_distance is below coupling_distance".into()));
            }
        }
        Ok(())
    }
}

/// Placed object; `center` is the footprint center at floor level.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMeta {
    pub label: i32,
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMeta {
    pub objects: Vec<ObjectMeta>,
    /// Indices into `objects` of the coupled beacon and dependent.
    pub coupling: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub cloud: PointCloud,
    pub meta: SceneMeta,
}

fn base_color(label: i32, rng: &mut impl Rng) -> [f64; 3] {
    let tint = |c: [f64; 3], rng: &mut dyn rand::RngCore| -> [f64; 3] {
        let s = 0.85 + 0.3 * rng.random::<f64>();
        c.map(|v| (v * s).clamp(0.0, 1.0))
    };
    match label {
        FLOOR => tint([0.32, 0.32, 0.34], rng),
        WALL => tint([0.6, 0.6, 0.6], rng),
        BOX => tint([0.25, 0.6, 0.25], rng),
        SPHERE => tint([0.55, 0.35, 0.55], rng),
        LSHAPE => tint([0.45, 0.45, 0.35], rng),
        BEACON_WARM => [0.9, 0.15, 0.1],
        BEACON_COOL => [0.1, 0.2, 0.9],
        _ => [0.55, 0.55, 0.55],
    }
}

struct Sampler<'a, R: Rng> {
    rng: &'a mut R,
    noise: Normal<f64>,
    density: f64,
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    labels: Vec<i32>,
}

impl<R: Rng> Sampler<'_, R> {
    fn push(&mut self, p: [f64; 3], color: [f64; 3], label: i32) {
        let c = color.map(|v| (v + self.noise.sample(self.rng)).clamp(0.0, 1.0));
        self.positions.push(p);
        self.colors.push(c);
        self.labels.push(label);
    }

    /// Axis-aligned rectangle spanned from `o` by `u` and `v`.
    fn quad(&mut self, o: [f64; 3], u: [f64; 3], v: [f64; 3], color: [f64; 3], label: i32) {
        let area = norm(u) * norm(v);
        let n = (area * self.density).round().max(1.0) as usize;
        for _ in 0..n {
            let a: f64 = self.rng.random();
            let b: f64 = self.rng.random();
            let p = [0, 1, 2].map(|k| o[k] + a * u[k] + b * v[k]);
            self.push(p, color, label);
        }
    }

    /// Five visible faces of an axis-aligned box standing on z = 0.
    fn cuboid(&mut self, min: [f64; 3], max: [f64; 3], color: [f64; 3], label: i32) {
        let d = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
        self.quad([min[0], min[1], max[2]], [d[0], 0.0, 0.0], [0.0, d[1], 0.0], color, label);
        self.quad(min, [d[0], 0.0, 0.0], [0.0, 0.0, d[2]], color, label);
        self.quad([min[0], max[1], min[2]], [d[0], 0.0, 0.0], [0.0, 0.0, d[2]], color, label);
        self.quad(min, [0.0, d[1], 0.0], [0.0, 0.0, d[2]], color, label);
        self.quad([max[0], min[1], min[2]], [0.0, d[1], 0.0], [0.0, 0.0, d[2]], color, label);
    }

    fn sphere(&mut self, c: [f64; 3], r: f64, color: [f64; 3], label: i32) {
        let area = 4.0 * std::f64::consts::PI * r * r;
        let n = (area * self.density).round().max(1.0) as usize;
        for _ in 0..n {
            let z: f64 = 2.0 * self.rng.random::<f64>() - 1.0;
            let phi: f64 = std::f64::consts::TAU * self.rng.random::<f64>();
            let s = (1.0 - z * z).sqrt();
            let p = [c[0] + r * s * phi.cos(), c[1] + r * s * phi.sin(), c[2] + r * z];
            self.push(p, color, label);
        }
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Rejection-sample a footprint center not overlapping `placed`.
fn place(rng: &mut impl Rng, extent: [f64; 2], radius: f64, placed: &[ObjectMeta]) -> Option<[f64; 2]> {
    const MARGIN: f64 = 0.1;
    let lo = radius + MARGIN;
    if extent[0] < 2.0 * lo || extent[1] < 2.0 * lo {
        return None;
    }
    for _ in 0..200 {
        let c = [rng.random_range(lo..=extent[0] - lo), rng.random_range(lo..=extent[1] - lo)];
        if placed.iter().all(|o| dist2(o.center, c) >= o.radius + radius + MARGIN) {
            return Some(c);
        }
    }
    None
}

fn sample_object(s: &mut Sampler<'_, impl Rng>, kind: ObjectKind, c: [f64; 2], r: f64) {
    let color = base_color(kind.label(), s.rng);
    let label = kind.label();
    match kind {
        ObjectKind::Box => {
            let h = s.rng.random_range(0.15..0.35);
            let half = r / std::f64::consts::SQRT_2;
            s.cuboid([c[0] - half, c[1] - half, 0.0], [c[0] + half, c[1] + half, h], color, label);
        }
        ObjectKind::Sphere => s.sphere([c[0], c[1], r], r, color, label),
        ObjectKind::LShape => {
            let half = r / std::f64::consts::SQRT_2;
            let h = s.rng.random_range(0.15..0.3);
            s.cuboid([c[0] - half, c[1] - half, 0.0], [c[0] + half, c[1] - half * 0.2, h], color, label);
            s.cuboid([c[0] - half, c[1] - half * 0.2, 0.0], [c[0] - half * 0.2, c[1] + half, h], color, label);
        }
    }
}

/// Deterministic scene for `(spec, seed)`.
pub fn synth_scene(spec: &SynthSceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = seed::stream(seed, "scene");
    let mut s = Sampler {
        noise: Normal::new(0.0, spec.color_noise.max(1e-12)).expect("finite"),
        rng: &mut rng,
        density: spec.points_per_m2,
        positions: Vec::new(),
        colors: Vec::new(),
        labels: Vec::new(),
    };
    let [ex, ey] = spec.extent;
    let t = spec.thickness;
    let h = spec.wall_height;

    let floor = base_color(FLOOR, s.rng);
    s.quad([0.0, 0.0, 0.0], [ex, 0.0, 0.0], [0.0, ey, 0.0], floor, FLOOR);
    // inner faces plus a top strip of width `t`
    let wall = base_color(WALL, s.rng);
    s.quad([0.0, 0.0, 0.0], [ex, 0.0, 0.0], [0.0, 0.0, h], wall, WALL);
    s.quad([0.0, ey, 0.0], [ex, 0.0, 0.0], [0.0, 0.0, h], wall, WALL);
    s.quad([0.0, 0.0, 0.0], [0.0, ey, 0.0], [0.0, 0.0, h], wall, WALL);
    s.quad([ex, 0.0, 0.0], [0.0, ey, 0.0], [0.0, 0.0, h], wall, WALL);
    s.quad([-t, -t, h], [ex + 2.0 * t, 0.0, 0.0], [0.0, t, 0.0], wall, WALL);
    s.quad([-t, ey, h], [ex + 2.0 * t, 0.0, 0.0], [0.0, t, 0.0], wall, WALL);
    s.quad([-t, 0.0, h], [t, 0.0, 0.0], [0.0, ey, 0.0], wall, WALL);
    s.quad([ex, 0.0, h], [t, 0.0, 0.0], [0.0, ey, 0.0], wall, WALL);

    let mut objects: Vec<ObjectMeta> = Vec::new();
    let mut coupling = None;
    if spec.long_range_coupling {
        let warm = s.rng.random_bool(0.5);
        let beacon = if warm { BEACON_WARM } else { BEACON_COOL };
        let (rb, rd) = (0.12, 0.15);
        let mut pair = None;
        for _ in 0..500 {
            let Some(b) = place(s.rng, spec.extent, rb, &[]) else { break };
            let r = s.rng.random_range(spec.coupling_distance..=spec.coupling_max_distance);
            let phi = s.rng.random_range(0.0..std::f64::consts::TAU);
            let d = [b[0] + r * phi.cos(), b[1] + r * phi.sin()];
            let lo = rd + 0.1;
            if (0..2).all(|k| (lo..=spec.extent[k] - lo).contains(&d[k])) {
                pair = Some((b, d));
                break;
            }
        }
        let (b, d) = pair.ok_or_else(|| Error::Config("could not place coupled objects".into()))?;
        let color = base_color(beacon, s.rng);
        let half = rb / std::f64::consts::SQRT_2;
        s.cuboid([b[0] - half, b[1] - half, 0.0], [b[0] + half, b[1] + half, 0.2], color, beacon);
        let dep = dependent_label(beacon);
        let color = base_color(dep, s.rng);
        let half = rd / std::f64::consts::SQRT_2;
        s.cuboid([d[0] - half, d[1] - half, 0.0], [d[0] + half, d[1] + half, 0.25], color, dep);
        objects.push(ObjectMeta { label: beacon, center: b, radius: rb });
        objects.push(ObjectMeta { label: dep, center: d, radius: rd });
        coupling = Some((0, 1));
    }

    let count = s.rng.random_range(spec.min_objects..=spec.max_objects);
    for _ in 0..count {
        let kind = spec.kinds[s.rng.random_range(0..spec.kinds.len())];
        let r = s.rng.random_range(0.12..0.22);
        let Some(c) = place(s.rng, spec.extent, r, &objects) else { continue };
        sample_object(&mut s, kind, c, r);
        objects.push(ObjectMeta { label: kind.label(), center: c, radius: r });
    }

    let cloud = PointCloud::new(s.positions, s.colors, s.labels)?;
    Ok(Scene {
        cloud,
        meta: SceneMeta { objects, coupling },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn empty_room_has_only_structure() {
        let spec = SynthSceneSpec {
            min_objects: 0,
            max_objects: 0,
            long_range_coupling: false,
            ..SynthSceneSpec::default()
        };
        let s = synth_scene(&spec, 4).unwrap();
        let labels: BTreeSet<i32> = s.cloud.labels.iter().copied().collect();
        assert_eq!(labels, BTreeSet::from([FLOOR, WALL]));
        assert!(s.meta.objects.is_empty());
    }

    #[test]
    fn scenes_are_reproducible() {
        let spec = SynthSceneSpec::default();
        let a = synth_scene(&spec, 11).unwrap();
        let b = synth_scene(&spec, 11).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.meta, b.meta);
        assert_ne!(synth_scene(&spec, 12).unwrap().cloud, a.cloud);
    }

    #[test]
    fn dependent_label_follows_beacon() {
        let spec = SynthSceneSpec::default();
        let mut seen = BTreeSet::new();
        for seed in 0..40 {
            let s = synth_scene(&spec, seed).unwrap();
            let (bi, di) = s.meta.coupling.unwrap();
            let (b, d) = (&s.meta.objects[bi], &s.meta.objects[di]);
            assert_eq!(d.label, dependent_label(b.label));
            assert!((spec.coupling_distance..=spec.coupling_max_distance).contains(&dist2(b.center, d.center)));
            // the generated points carry the metadata labels
            assert!(s.cloud.labels.contains(&b.label));
            assert!(s.cloud.labels.contains(&d.label));
            assert!(!s.cloud.labels.contains(&dependent_label(BEACON_WARM + BEACON_COOL - b.label)));
            seen.insert(b.label);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SynthSceneSpec::default();
        s.extent = [0.0, 1.0];
        assert!(synth_scene(&s, 0).is_err());
        let mut s = SynthSceneSpec::default();
        s.coupling_distance = 0.3;
        assert!(s.validate().is_err());
        let mut s = SynthSceneSpec::default();
        s.coupling_max_distance = 0.4;
        assert!(s.validate().is_err());
        let mut s = SynthSceneSpec::default();
        s.min_objects = 5;
        s.max_objects = 1;
        assert!(s.validate().is_err());
    }
}
