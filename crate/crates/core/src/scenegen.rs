//! Procedural urban world, overlapping submaps and templated pose hints.
//!
//! Everything here is a pure function of a seed and parameters, driven by
//! `ChaCha8Rng` so the same inputs produce bit-identical worlds on any
//! platform.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUBMAP_SIDE: f64 = 30.0;
pub const SUBMAP_STRIDE: f64 = 10.0;
/// Hints are drawn from instances within this distance of the pose.
pub const HINT_RADIUS: f64 = 30.0;
/// Poses closer than this to an instance centroid are "on-top" of it.
pub const ON_TOP_DISTANCE: f64 = 1.0;
pub const WORLD_HEIGHT: f64 = 10.0;
pub const DEFAULT_NUM_HINTS: usize = 6;
pub const MIN_POINTS: usize = 32;
pub const MAX_POINTS: usize = 256;

pub type Vec3 = [f64; 3];
pub type Vec2 = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Solid box standing on the ground.
    Block,
    /// Thin slab on the ground.
    Flat,
    /// Gaussian blob.
    Blob,
    /// Thin vertical cylinder.
    Pole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
    pub min_size: Vec3,
    pub max_size: Vec3,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub name: String,
    pub rgb: Vec3,
}

/// Class and color vocabularies of the generated world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub classes: Vec<ClassSpec>,
    pub colors: Vec<ColorSpec>,
}

impl Default for Palette {
    fn default() -> Self {
        let class = |name: &str, shape, min_size, max_size, intensity| ClassSpec {
            name: name.to_string(),
            shape,
            min_size,
            max_size,
            intensity,
        };
        let color = |name: &str, rgb| ColorSpec {
            name: name.to_string(),
            rgb,
        };
        Self {
            classes: vec![
                class("building", Shape::Block, [8.0, 8.0, 6.0], [14.0, 12.0, 10.0], 0.55),
                class("garage", Shape::Block, [4.0, 5.0, 2.5], [6.0, 7.0, 3.5], 0.45),
                class("wall", Shape::Block, [6.0, 0.3, 2.0], [12.0, 0.6, 4.0], 0.6),
                class("fence", Shape::Block, [5.0, 0.1, 1.0], [10.0, 0.2, 1.8], 0.35),
                class("road", Shape::Flat, [12.0, 6.0, 0.1], [20.0, 8.0, 0.2], 0.2),
                class("sidewalk", Shape::Flat, [8.0, 2.0, 0.1], [14.0, 3.0, 0.25], 0.3),
                class("parking", Shape::Flat, [6.0, 6.0, 0.1], [10.0, 10.0, 0.2], 0.25),
                class("terrain", Shape::Flat, [5.0, 5.0, 0.2], [9.0, 9.0, 0.6], 0.15),
                class("vegetation", Shape::Blob, [3.0, 3.0, 3.0], [6.0, 6.0, 7.0], 0.4),
                class("pole", Shape::Pole, [0.2, 0.2, 4.0], [0.4, 0.4, 8.0], 0.7),
                class("traffic-sign", Shape::Pole, [0.6, 0.1, 2.0], [1.0, 0.2, 3.0], 0.9),
                class("car", Shape::Block, [3.8, 1.6, 1.3], [4.8, 2.0, 1.7], 0.8),
            ],
            colors: vec![
                color("black", [0.08, 0.08, 0.08]),
                color("gray", [0.5, 0.5, 0.5]),
                color("bright-gray", [0.78, 0.78, 0.78]),
                color("beige", [0.85, 0.78, 0.6]),
                color("green", [0.2, 0.65, 0.2]),
                color("dark-green", [0.08, 0.32, 0.12]),
                color("gray-green", [0.45, 0.55, 0.45]),
                color("red", [0.75, 0.15, 0.12]),
            ],
        }
    }
}

impl Palette {
    pub fn class(&self, name: &str) -> Option<&ClassSpec> {
        self.classes.iter().find(|c| c.name == name)
    }
}

/// One pre-segmented object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointInstance {
    pub points: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub intensities: Vec<f64>,
    pub centroid: Vec3,
    /// Points per cubic meter of the object's bounding box.
    pub density: f64,
    pub class_name: String,
    pub color_name: String,
}

impl PointInstance {
    /// Channel means summed in sorted order, so the result does not depend
    /// on the order points are stored in.
    pub fn mean_color(&self) -> Vec3 {
        let n = self.colors.len() as f64;
        std::array::from_fn(|k| {
            let mut c: Vec<f64> = self.colors.iter().map(|rgb| rgb[k]).collect();
            c.sort_by(f64::total_cmp);
            c.iter().sum::<f64>() / n
        })
    }

    /// Returns a copy shifted by `delta` in the ground plane.
    pub fn translated(&self, delta: Vec2) -> Self {
        let mut out = self.clone();
        for p in &mut out.points {
            p[0] += delta[0];
            p[1] += delta[1];
        }
        out.centroid[0] += delta[0];
        out.centroid[1] += delta[1];
        out
    }
}

fn mean3(v: &[Vec3]) -> Vec3 {
    let n = v.len() as f64;
    let mut m = [0.0; 3];
    for p in v {
        for k in 0..3 {
            m[k] += p[k];
        }
    }
    m.map(|s| s / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submap {
    pub id: usize,
    pub center: Vec2,
    pub side: f64,
    /// Indices into [`World::instances`].
    pub instance_indices: Vec<usize>,
    #[serde(skip)]
    pub instances: Vec<PointInstance>,
}

impl Submap {
    pub fn contains(&self, xy: Vec2) -> bool {
        let h = self.side / 2.0;
        (xy[0] - self.center[0]).abs() <= h && (xy[1] - self.center[1]).abs() <= h
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn translated(&self, delta: Vec2) -> Self {
        let mut out = self.clone();
        out.center = [self.center[0] + delta[0], self.center[1] + delta[1]];
        out.instances = self.instances.iter().map(|i| i.translated(delta)).collect();
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub seed: u64,
    pub extent: Vec2,
    pub instances: Vec<PointInstance>,
    pub submaps: Vec<Submap>,
}

impl World {
    pub fn submap(&self, id: usize) -> Option<&Submap> {
        self.submaps.iter().find(|s| s.id == id)
    }

    /// Id of the submap whose center is nearest to `pose`, lower id on ties.
    pub fn positive_submap(&self, pose: Vec2) -> usize {
        let mut best: Option<(f64, usize)> = None;
        for s in &self.submaps {
            let d = dist2(pose, s.center);
            match best {
                Some((bd, bid)) if d > bd || (d == bd && s.id > bid) => {}
                _ => best = Some((d, s.id)),
            }
        }
        best.expect("world has no submaps").1
    }
}

fn dist2(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn xy(v: Vec3) -> Vec2 {
    [v[0], v[1]]
}

/// Builds a world of `instance_count` seeded instances and partitions it
/// into 30 m submaps at a 10 m stride.
pub fn generate_world(
    seed: u64,
    extent: Vec2,
    instance_count: usize,
    palette: &Palette,
) -> Result<World> {
    if extent[0] < SUBMAP_SIDE || extent[1] < SUBMAP_SIDE {
        return Err(Error::Sizing {
            width: extent[0],
            height: extent[1],
            side: SUBMAP_SIDE,
        });
    }
    if instance_count == 0 {
        return Err(Error::NoInstances);
    }
    if palette.classes.is_empty() || palette.colors.is_empty() {
        return Err(Error::EmptyPalette);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..instance_count)
        .map(|_| sample_instance(&mut rng, extent, palette))
        .collect();
    let mut world = World {
        seed,
        extent,
        instances,
        submaps: Vec::new(),
    };
    world.submaps = partition_submaps(&world, SUBMAP_SIDE, SUBMAP_STRIDE)?;
    Ok(world)
}

fn sample_instance(rng: &mut ChaCha8Rng, extent: Vec2, palette: &Palette) -> PointInstance {
    let class = &palette.classes[rng.gen_range(0..palette.classes.len())];
    let color = &palette.colors[rng.gen_range(0..palette.colors.len())];
    let center = [rng.gen_range(0.0..extent[0]), rng.gen_range(0.0..extent[1])];
    let yaw = rng.gen_range(0.0..std::f64::consts::PI);
    let size: Vec3 =
        std::array::from_fn(|k| rng.gen_range(class.min_size[k]..=class.max_size[k]));
    let n = rng.gen_range(MIN_POINTS..=MAX_POINTS);
    let (sin, cos) = yaw.sin_cos();

    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let (lx, ly, z) = match class.shape {
            Shape::Block | Shape::Flat => (
                rng.gen_range(-0.5..0.5) * size[0],
                rng.gen_range(-0.5..0.5) * size[1],
                rng.gen_range(0.0..1.0) * size[2],
            ),
            Shape::Blob => {
                let g = |rng: &mut ChaCha8Rng| -> f64 {
                    // Sum of uniforms, roughly Gaussian and bounded.
                    (0..4).map(|_| rng.gen_range(-0.5..0.5)).sum::<f64>() / 2.0
                };
                (g(rng) * size[0], g(rng) * size[1], (0.5 + g(rng)) * size[2])
            }
            Shape::Pole => {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = rng.gen_range(0.0..0.5f64).sqrt() * 0.7;
                (r * a.cos() * size[0], r * a.sin() * size[1], rng.gen_range(0.0..1.0) * size[2])
            }
        };
        let z = z.clamp(0.0, WORLD_HEIGHT);
        points.push([lx * cos - ly * sin, lx * sin + ly * cos, z]);
    }
    // Shift so the point mean lands on the sampled center.
    let m = mean3(&points);
    for p in &mut points {
        p[0] += center[0] - m[0];
        p[1] += center[1] - m[1];
    }

    let colors = (0..n)
        .map(|_| color.rgb.map(|c| (c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)))
        .collect();
    let intensities = (0..n)
        .map(|_| (class.intensity + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0))
        .collect();
    let volume: f64 = size.iter().map(|s| s.max(0.1)).product();
    let centroid = mean3(&points);
    PointInstance {
        points,
        colors,
        intensities,
        centroid,
        density: n as f64 / volume,
        class_name: class.name.clone(),
        color_name: color.name.clone(),
    }
}

/// Number of window origins along one axis.
pub fn window_count(length: f64, side: f64, stride: f64) -> usize {
    ((length - side) / stride + 1e-9).floor() as usize + 1
}

/// Square windows of `side` meters with origins at multiples of `stride`,
/// fully inside the world; ids run row-major with x varying fastest.
pub fn partition_submaps(world: &World, side: f64, stride: f64) -> Result<Vec<Submap>> {
    if !(stride > 0.0) {
        return Err(Error::InvalidStride(stride));
    }
    if side > world.extent[0] || side > world.extent[1] {
        return Err(Error::Sizing {
            width: world.extent[0],
            height: world.extent[1],
            side,
        });
    }
    let nx = window_count(world.extent[0], side, stride);
    let ny = window_count(world.extent[1], side, stride);
    let mut submaps = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let origin = [ix as f64 * stride, iy as f64 * stride];
            let mut submap = Submap {
                id: iy * nx + ix,
                center: [origin[0] + side / 2.0, origin[1] + side / 2.0],
                side,
                instance_indices: Vec::new(),
                instances: Vec::new(),
            };
            for (i, inst) in world.instances.iter().enumerate() {
                let c = inst.centroid;
                if c[0] >= origin[0]
                    && c[0] <= origin[0] + side
                    && c[1] >= origin[1]
                    && c[1] <= origin[1] + side
                {
                    submap.instance_indices.push(i);
                    submap.instances.push(inst.clone());
                }
            }
            submaps.push(submap);
        }
    }
    Ok(submaps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    North,
    South,
    East,
    West,
    OnTop,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::North,
        Relation::South,
        Relation::East,
        Relation::West,
        Relation::OnTop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::North => "north",
            Relation::South => "south",
            Relation::East => "east",
            Relation::West => "west",
            Relation::OnTop => "on-top",
        }
    }

    /// Where `pose` lies as seen from `centroid`: the 90° compass sector of
    /// the direction centroid → pose, or on-top within 1 m. +x is east, +y
    /// north.
    pub fn of_pose(pose: Vec2, centroid: Vec2) -> Self {
        let dx = pose[0] - centroid[0];
        let dy = pose[1] - centroid[1];
        if (dx * dx + dy * dy).sqrt() < ON_TOP_DISTANCE {
            return Relation::OnTop;
        }
        let deg = dy.atan2(dx).to_degrees();
        if deg > -45.0 && deg <= 45.0 {
            Relation::East
        } else if deg > 45.0 && deg <= 135.0 {
            Relation::North
        } else if deg > -135.0 && deg <= -45.0 {
            Relation::South
        } else {
            Relation::West
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Relation::ALL.into_iter().find(|r| r.as_str() == s).ok_or(())
    }
}

/// A parsed hint sentence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Hint {
    pub relation: Relation,
    pub color: String,
    pub class: String,
}

impl Hint {
    pub fn sentence(&self) -> String {
        format!("The pose is {} of a {} {}.", self.relation, self.color, self.class)
    }

    /// Parses `The pose is <rel> of a <color> <class>.`
    pub fn parse(sentence: &str) -> Option<Self> {
        let body = sentence.strip_prefix("The pose is ")?.strip_suffix('.')?;
        let mut words = body.split(' ');
        let relation = words.next()?.parse().ok()?;
        if words.next()? != "of" || words.next()? != "a" {
            return None;
        }
        let color = words.next()?.to_string();
        let class = words.next()?.to_string();
        if words.next().is_some() || color.is_empty() || class.is_empty() {
            return None;
        }
        Some(Self {
            relation,
            color,
            class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextQuery {
    pub pose_gt: Vec2,
    pub hints: Vec<String>,
    pub positive_submap_id: usize,
}

/// Indices of instances within `radius` of `pose`, nearest first (ties by
/// index).
pub fn nearby_instances(world: &World, pose: Vec2, radius: f64) -> Vec<usize> {
    let mut near: Vec<(f64, usize)> = world
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| (dist2(pose, xy(inst.centroid)).sqrt(), i))
        .filter(|(d, _)| *d <= radius)
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    near.into_iter().map(|(_, i)| i).collect()
}

/// Describes `pose` by its `num_hints` nearest instances, nearest first.
pub fn describe_pose(world: &World, pose: Vec2, num_hints: usize) -> Result<TextQuery> {
    if num_hints == 0 {
        return Err(Error::Invalid("num_hints must be at least 1".into()));
    }
    let near = nearby_instances(world, pose, HINT_RADIUS);
    if near.len() < num_hints {
        return Err(Error::TooFewNearby {
            needed: num_hints,
            found: near.len(),
            radius: HINT_RADIUS,
        });
    }
    let hints = near[..num_hints]
        .iter()
        .map(|&i| hint_for(&world.instances[i], pose).sentence())
        .collect();
    Ok(TextQuery {
        pose_gt: pose,
        hints,
        positive_submap_id: world.positive_submap(pose),
    })
}

fn hint_for(inst: &PointInstance, pose: Vec2) -> Hint {
    Hint {
        relation: Relation::of_pose(pose, xy(inst.centroid)),
        color: inst.color_name.clone(),
        class: inst.class_name.clone(),
    }
}

/// Samples `count` poses uniformly over the world, keeping those with at
/// least `num_hints` nearby instances.
pub fn generate_queries(
    world: &World,
    count: usize,
    num_hints: usize,
    seed: u64,
) -> Result<Vec<TextQuery>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_attempts = count.saturating_mul(1000).max(1000);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= max_attempts {
            return Err(Error::PoseSampling {
                wanted: count,
                attempts,
            });
        }
        attempts += 1;
        let pose = [
            rng.gen_range(0.0..world.extent[0]),
            rng.gen_range(0.0..world.extent[1]),
        ];
        match describe_pose(world, pose, num_hints) {
            Ok(q) => out.push(q),
            Err(Error::TooFewNearby { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbMode {
    Full,
    Save75,
    Save50,
    SwapOne,
}

impl PerturbMode {
    pub const ALL: [PerturbMode; 4] = [
        PerturbMode::Full,
        PerturbMode::Save75,
        PerturbMode::Save50,
        PerturbMode::SwapOne,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbMode::Full => "full",
            PerturbMode::Save75 => "save75",
            PerturbMode::Save50 => "save50",
            PerturbMode::SwapOne => "swap_one",
        }
    }

    /// Hints kept out of `h` by the save modes.
    pub fn kept(self, h: usize) -> usize {
        match self {
            PerturbMode::Save75 => (3 * h).div_ceil(4),
            PerturbMode::Save50 => h.div_ceil(2),
            PerturbMode::Full | PerturbMode::SwapOne => h,
        }
    }
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation mode {s:?}")))
    }
}

/// Degrades a query: drops sentences (save modes) or replaces one with a
/// sentence about an instance far from the pose (swap_one).
pub fn perturb_hints(
    query: &TextQuery,
    mode: PerturbMode,
    world: &World,
    rng_seed: u64,
) -> Result<TextQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let h = query.hints.len();
    let mut out = query.clone();
    match mode {
        PerturbMode::Full => {}
        PerturbMode::Save75 | PerturbMode::Save50 => {
            if h < 2 {
                return Err(Error::TooFewHints {
                    mode: mode.as_str(),
                    hints: h,
                    min: 2,
                });
            }
            let mut keep = rand::seq::index::sample(&mut rng, h, mode.kept(h)).into_vec();
            keep.sort_unstable();
            out.hints = keep.into_iter().map(|i| query.hints[i].clone()).collect();
        }
        PerturbMode::SwapOne => {
            if h < 1 {
                return Err(Error::TooFewHints {
                    mode: mode.as_str(),
                    hints: h,
                    min: 1,
                });
            }
            let slot = rng.gen_range(0..h);
            let mut far: Vec<usize> = world
                .instances
                .iter()
                .enumerate()
                .filter(|(_, inst)| dist2(query.pose_gt, xy(inst.centroid)).sqrt() > HINT_RADIUS)
                .map(|(i, _)| i)
                .collect();
            far.shuffle(&mut rng);
            let replacement = far
                .iter()
                .map(|&i| hint_for(&world.instances[i], query.pose_gt).sentence())
                .find(|s| *s != query.hints[slot])
                .ok_or(Error::NoDistantInstance(HINT_RADIUS))?;
            out.hints[slot] = replacement;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world_with(instances: Vec<Vec3>, extent: Vec2) -> World {
        let instances = instances
            .into_iter()
            .map(|c| PointInstance {
                points: vec![c],
                colors: vec![[0.0; 3]],
                intensities: vec![0.5],
                centroid: c,
                density: 1.0,
                class_name: "garage".into(),
                color_name: "black".into(),
            })
            .collect();
        let mut w = World {
            seed: 0,
            extent,
            instances,
            submaps: vec![],
        };
        w.submaps = partition_submaps(&w, SUBMAP_SIDE, SUBMAP_STRIDE).unwrap();
        w
    }

    #[test]
    fn same_seed_same_world() {
        let p = Palette::default();
        let a = generate_world(7, [60.0, 60.0], 40, &p).unwrap();
        let b = generate_world(7, [60.0, 60.0], 40, &p).unwrap();
        assert_eq!(a, b);
        let c = generate_world(8, [60.0, 60.0], 40, &p).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generation_preconditions() {
        let p = Palette::default();
        assert!(matches!(
            generate_world(7, [20.0, 20.0], 40, &p),
            Err(Error::Sizing { .. })
        ));
        assert!(matches!(
            generate_world(7, [60.0, 60.0], 0, &p),
            Err(Error::NoInstances)
        ));
        let empty = Palette {
            classes: vec![],
            colors: vec![],
        };
        assert!(matches!(
            generate_world(7, [60.0, 60.0], 3, &empty),
            Err(Error::EmptyPalette)
        ));
    }

    #[test]
    fn instance_invariants_hold() {
        let w = generate_world(7, [60.0, 60.0], 40, &Palette::default()).unwrap();
        for inst in &w.instances {
            assert!((MIN_POINTS..=MAX_POINTS).contains(&inst.points.len()));
            let m = mean3(&inst.points);
            for k in 0..3 {
                assert!((m[k] - inst.centroid[k]).abs() < 1e-9);
            }
            assert!(inst.centroid[0] >= 0.0 && inst.centroid[0] <= 60.0);
            assert!(inst.centroid[1] >= 0.0 && inst.centroid[1] <= 60.0);
            assert!(inst.density > 0.0);
            assert!(inst.colors.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
            assert!(inst.intensities.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!(inst.points.iter().all(|p| (0.0..=WORLD_HEIGHT).contains(&p[2])));
        }
    }

    #[test]
    fn partition_counts() {
        let w = world_with(vec![[31.0, 5.0, 0.0]], [60.0, 60.0]);
        assert_eq!(w.submaps.len(), 16);
        let first = &w.submaps[0];
        assert_eq!(first.center, [15.0, 15.0]);
        assert!(first.instances.is_empty(), "centroid at x=31 is outside [0,30]");
        assert_eq!(world_with(vec![], [30.0, 30.0]).submaps.len(), 1);
        assert_eq!(window_count(110.0, 30.0, 10.0), 9);
        assert!(matches!(
            partition_submaps(&w, 30.0, 0.0),
            Err(Error::InvalidStride(_))
        ));
    }

    #[test]
    fn relation_sectors() {
        // Instance east of the pose means the pose is west of it.
        assert_eq!(Relation::of_pose([0.0, 0.0], [12.0, 0.0]), Relation::West);
        assert_eq!(Relation::of_pose([0.0, 0.0], [-12.0, 0.0]), Relation::East);
        assert_eq!(Relation::of_pose([0.0, 5.0], [0.0, 0.0]), Relation::North);
        assert_eq!(Relation::of_pose([0.0, -5.0], [0.0, 0.0]), Relation::South);
        assert_eq!(Relation::of_pose([3.0, 4.0], [3.0, 4.0]), Relation::OnTop);
        assert_eq!(Relation::of_pose([0.5, 0.5], [0.0, 0.0]), Relation::OnTop);
    }

    #[test]
    fn describe_and_parse() {
        let w = world_with(
            vec![[12.0, 0.0, 1.0], [0.0, 3.0, 1.0], [50.0, 50.0, 1.0]],
            [60.0, 60.0],
        );
        let q = describe_pose(&w, [0.0, 0.0], 2).unwrap();
        assert_eq!(
            q.hints,
            vec![
                "The pose is south of a black garage.",
                "The pose is west of a black garage."
            ]
        );
        let parsed = Hint::parse(&q.hints[1]).unwrap();
        assert_eq!(parsed.relation, Relation::West);
        assert_eq!(parsed.sentence(), q.hints[1]);
        let err = describe_pose(&w, [0.0, 0.0], 3).unwrap_err();
        assert!(err.to_string().contains("short by 1"), "{err}");
        assert!(Hint::parse("The pose is up of a black garage.").is_none());
    }

    #[test]
    fn positive_submap_tie_prefers_lower_id() {
        let w = world_with(vec![], [60.0, 60.0]);
        // (20, 15) is equidistant from centers (15,15) and (25,15).
        assert_eq!(w.positive_submap([20.0, 15.0]), 0);
        assert_eq!(w.positive_submap([44.0, 44.0]), 15);
    }

    #[test]
    fn perturbation_counts() {
        let w = generate_world(3, [110.0, 110.0], 120, &Palette::default()).unwrap();
        let q = generate_queries(&w, 1, 6, 1).unwrap().remove(0);
        let s75 = perturb_hints(&q, PerturbMode::Save75, &w, 5).unwrap();
        assert_eq!(s75.hints.len(), 5);
        let s50 = perturb_hints(&q, PerturbMode::Save50, &w, 5).unwrap();
        assert_eq!(s50.hints.len(), 3);
        // Kept hints form a subsequence of the original.
        let mut it = q.hints.iter();
        assert!(s50.hints.iter().all(|h| it.any(|x| x == h)));
        let swapped = perturb_hints(&q, PerturbMode::SwapOne, &w, 5).unwrap();
        assert_eq!(swapped.hints.len(), 6);
        let same = q.hints.iter().zip(&swapped.hints).filter(|(a, b)| a == b).count();
        assert_eq!(same, 5);
        assert_eq!(perturb_hints(&q, PerturbMode::Full, &w, 5).unwrap(), q);

        let mut single = q.clone();
        single.hints.truncate(1);
        assert!(matches!(
            perturb_hints(&single, PerturbMode::Save75, &w, 1),
            Err(Error::TooFewHints { .. })
        ));
    }
}
