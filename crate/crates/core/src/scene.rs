//! Seeded synthetic multi-body scenes with exact ground truth.
//!
//! Each part is a point sample of a primitive surface (box, cylinder or
//! sphere of radius at most 1) placed on a grid. In every scan each part is
//! rotated about its own centroid and translated, independently of the other
//! parts. The whole set is then scaled so that the largest noiseless scan has
//! diameter 1, noise is added, and each scan is shuffled.
//!
//! # Random streams
//!
//! A `ChaCha8` generator seeded with `seed` through `seed_from_u64` is used
//! with four independent streams: 0 geometry, 1 motions, 2 noise, 3 shuffles.
//! Uniform reals are `(next_u64 >> 11) · 2⁻⁵³`; normals use Box–Muller with
//! `r = sqrt(−2 ln(1 − u₁))`, `θ = 2π u₂`, taking the cosine branch only.
//! Shuffles are Fisher–Yates from the last index down with
//! `j = ⌊u · (i + 1)⌋`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{ordered_pairs, PairTable};
use crate::{Error, FlowField, Mat3, PoseSet, Real, Result, RigidTransform, ScanSet, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Box,
    Cylinder,
    Sphere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_scans: usize,
    pub num_points: usize,
    pub num_parts: usize,
    /// Share of points per part; defaults to `(S, S−1, …, 1)` normalized.
    pub part_fractions: Option<Vec<f64>>,
    /// Surface per part; defaults to box, cylinder, sphere, box, …
    pub primitives: Option<Vec<Primitive>>,
    /// Largest rotation angle about each part's centroid, radians.
    pub max_rotation: f64,
    /// Largest translation, in primitive-radius units before normalization.
    pub max_translation: f64,
    /// Isotropic Gaussian noise, in normalized scene units.
    pub noise_sigma: f64,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_scans: 4,
            num_points: 512,
            num_parts: 3,
            part_fractions: None,
            primitives: None,
            max_rotation: std::f64::consts::FRAC_PI_4,
            max_translation: 0.3,
            noise_sigma: 0.0,
            shuffle: true,
            seed: 0,
        }
    }
}

/// Free space between neighbouring parts' bounding spheres, primitive radii.
const PART_GAP: f64 = 1.0;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_scans < 2 {
            return bad(format!("need at least 2 scans, got {}", self.num_scans));
        }
        if self.num_parts == 0 {
            return bad("need at least one part".into());
        }
        if self.num_points < 4 * self.num_parts {
            return bad(format!(
                "{} points cannot hold {} parts of at least 4 points",
                self.num_points, self.num_parts
            ));
        }
        if let Some(f) = &self.part_fractions {
            if f.len() != self.num_parts {
                return bad(format!("{} part fractions for {} parts", f.len(), self.num_parts));
            }
            if f.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return bad("part fractions must be positive".into());
            }
            if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("part fractions must sum to 1".into());
            }
        }
        if let Some(p) = &self.primitives {
            if p.len() != self.num_parts {
                return bad(format!("{} primitives for {} parts", p.len(), self.num_parts));
            }
        }
        for (name, v) in [
            ("max_rotation", self.max_rotation),
            ("max_translation", self.max_translation),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.max_rotation > std::f64::consts::PI {
            return bad("max_rotation cannot exceed pi".into());
        }
        Ok(())
    }

    /// Normalized share of points per part.
    pub fn fractions(&self) -> Vec<f64> {
        let raw = self
            .part_fractions
            .clone()
            .unwrap_or_else(|| (0..self.num_parts).map(|i| (self.num_parts - i) as f64).collect());
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|f| f / total).collect()
    }

    /// Points per part: largest-remainder rounding, at least 4 each.
    pub fn part_sizes(&self) -> Vec<usize> {
        let n = self.num_points;
        let fr = self.fractions();
        let exact: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
        let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - sizes[a] as f64, exact[b] - sizes[b] as f64);
            rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
        });
        let mut left = n - sizes.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        // Lift tiny parts to 4 points, taking from the largest.
        while let Some(small) = sizes.iter().position(|&x| x < 4) {
            let big = (0..sizes.len()).max_by_key(|&i| (sizes[i], usize::MAX - i)).expect("non-empty");
            sizes[big] -= 1;
            sizes[small] += 1;
        }
        sizes
    }

    fn primitive(&self, s: usize) -> Primitive {
        match &self.primitives {
            Some(p) => p[s],
            None => [Primitive::Box, Primitive::Cylinder, Primitive::Sphere][s % 3],
        }
    }
}

/// Synthetic scans plus ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle<T> {
    pub scans: ScanSet<T>,
    /// Part of every point, per scan.
    pub gt_labels: Vec<Vec<usize>>,
    /// `T^k_s (T^0_s)⁻¹`: part `s` from scan 0 into scan `k`.
    pub gt_poses: PoseSet<T>,
    /// Noiseless rigid flow of every ordered pair.
    pub gt_flows: PairTable<FlowField<T>>,
    /// Per scan, the reference index of each point; equal reference indices
    /// are the same physical point.
    pub gt_correspondences: Vec<Vec<usize>>,
    /// Noiseless coordinates, same ordering as `scans`.
    pub clean_points: Vec<Vec<Vec3<T>>>,
    pub config: SceneConfig,
}

impl SceneBundle<f64> {
    pub fn num_parts(&self) -> usize {
        self.config.num_parts
    }

    /// Converts all coordinates to another scalar type.
    pub fn cast<U: Real>(&self) -> Result<SceneBundle<U>> {
        let conv = |pts: &[Vec3<f64>]| pts.iter().map(|p| p.cast::<U>()).collect::<Vec<_>>();
        let scans = ScanSet::from_points(self.scans.clouds().iter().map(|c| conv(&c.points)).collect())?;
        let cast_t = |t: &RigidTransform<f64>| {
            let mut m = Mat3::<U>::zero();
            for i in 0..3 {
                for j in 0..3 {
                    m.m[i][j] = U::lit(t.rotation.m[i][j]);
                }
            }
            RigidTransform::new(m, t.translation.cast())
        };
        Ok(SceneBundle {
            scans,
            gt_labels: self.gt_labels.clone(),
            gt_poses: PoseSet {
                poses: self.gt_poses.poses.iter().map(|r| r.iter().map(cast_t).collect()).collect(),
                flags: self.gt_poses.flags.clone(),
                canonical_scan: self.gt_poses.canonical_scan,
            },
            gt_flows: {
                let mut t = PairTable::new(self.gt_flows.num_scans());
                for ((k, l), f) in self.gt_flows.iter() {
                    t.insert(k, l, FlowField::new(k, l, conv(&f.vectors))?);
                }
                t
            },
            gt_correspondences: self.gt_correspondences.clone(),
            clean_points: self.clean_points.iter().map(|p| conv(p)).collect(),
            config: self.config.clone(),
        })
    }
}

struct Stream(ChaCha8Rng);

impl Stream {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Stream(rng)
    }

    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    fn normal(&mut self) -> f64 {
        let (u1, u2) = (self.uniform(), self.uniform());
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn unit_vector(&mut self) -> Vec3<f64> {
        loop {
            let v = Vec3::new(self.normal(), self.normal(), self.normal());
            let n = v.norm();
            if n > 1e-9 {
                return v * (1.0 / n);
            }
        }
    }

    fn in_ball(&mut self, radius: f64) -> Vec3<f64> {
        self.unit_vector() * (radius * self.uniform().cbrt())
    }
}

/// Uniform sample on a primitive surface centred at the origin, radius ≤ 1.
fn sample_surface(kind: Primitive, count: usize, rng: &mut Stream) -> Vec<Vec3<f64>> {
    match kind {
        Primitive::Sphere => {
            let r = rng.range(0.6, 1.0);
            (0..count).map(|_| rng.unit_vector() * r).collect()
        }
        Primitive::Box => {
            let h = [rng.range(0.3, 0.57), rng.range(0.3, 0.57), rng.range(0.3, 0.57)];
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = areas.iter().sum();
            (0..count)
                .map(|_| {
                    let pick = rng.uniform() * total;
                    let axis = if pick < areas[0] {
                        0
                    } else if pick < areas[0] + areas[1] {
                        1
                    } else {
                        2
                    };
                    let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                    let mut c = [0.0; 3];
                    for (i, ci) in c.iter_mut().enumerate() {
                        *ci = if i == axis { side * h[i] } else { rng.range(-h[i], h[i]) };
                    }
                    Vec3::from(c)
                })
                .collect()
        }
        Primitive::Cylinder => {
            let r = rng.range(0.35, 0.6);
            let half = rng.range(0.3, (1.0 - r * r).sqrt());
            let side = std::f64::consts::TAU * r * 2.0 * half;
            let cap = std::f64::consts::PI * r * r;
            (0..count)
                .map(|_| {
                    let theta = std::f64::consts::TAU * rng.uniform();
                    if rng.uniform() * (side + 2.0 * cap) < side {
                        Vec3::new(r * theta.cos(), r * theta.sin(), rng.range(-half, half))
                    } else {
                        let rho = r * rng.uniform().sqrt();
                        let z = if rng.uniform() < 0.5 { -half } else { half };
                        Vec3::new(rho * theta.cos(), rho * theta.sin(), z)
                    }
                })
                .collect()
        }
    }
}

fn max_diameter(scans: &[Vec<Vec3<f64>>]) -> f64 {
    scans
        .iter()
        .map(|pts| {
            let mut best = 0.0f64;
            for (i, &p) in pts.iter().enumerate() {
                for &q in &pts[i + 1..] {
                    best = best.max((p - q).norm_squared());
                }
            }
            best.sqrt()
        })
        .fold(0.0, f64::max)
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneBundle<f64>> {
    cfg.validate()?;
    let (k, n, s_count) = (cfg.num_scans, cfg.num_points, cfg.num_parts);
    let sizes = cfg.part_sizes();
    let mut geo = Stream::new(cfg.seed, 0);
    let mut mot = Stream::new(cfg.seed, 1);
    let mut noise = Stream::new(cfg.seed, 2);
    let mut shuf = Stream::new(cfg.seed, 3);

    // Reference configuration: parts on a grid, each centred at its cell.
    let cols = (s_count as f64).sqrt().ceil() as usize;
    let spacing = 2.0 + 2.0 * cfg.max_translation + PART_GAP;
    let mut reference = Vec::with_capacity(n);
    let mut ref_labels = Vec::with_capacity(n);
    let mut centres = Vec::with_capacity(s_count);
    for (s, &m) in sizes.iter().enumerate() {
        let centre = Vec3::new((s % cols) as f64 * spacing, (s / cols) as f64 * spacing, 0.0);
        let orient = Mat3::rotation(geo.unit_vector(), std::f64::consts::PI * geo.uniform());
        let pts = sample_surface(cfg.primitive(s), m, &mut geo);
        let local_centroid = pts.iter().fold(Vec3::zero(), |a, &p| a + p) * (1.0 / m as f64);
        for p in pts {
            reference.push(orient * (p - local_centroid) + centre);
            ref_labels.push(s);
        }
        centres.push(centre);
    }

    // Per-scan motions about each part's centroid.
    let motions: Vec<Vec<RigidTransform<f64>>> = (0..k)
        .map(|_| {
            centres
                .iter()
                .map(|&c| {
                    let axis = mot.unit_vector();
                    let angle = cfg.max_rotation * mot.uniform();
                    let t = mot.in_ball(cfg.max_translation);
                    let r = Mat3::rotation(axis, angle);
                    RigidTransform::new(r, c - r * c + t)
                })
                .collect()
        })
        .collect();

    let moved: Vec<Vec<Vec3<f64>>> = motions
        .iter()
        .map(|m| reference.iter().zip(&ref_labels).map(|(&p, &s)| m[s].apply(p)).collect())
        .collect();
    let diameter = max_diameter(&moved);
    if !(diameter > 0.0) {
        return Err(Error::InvalidConfig("scene collapses to a point".into()));
    }
    let scale = 1.0 / diameter;
    let rescale = |t: &RigidTransform<f64>| RigidTransform::new(t.rotation, t.translation * scale);

    let mut clean_points = Vec::with_capacity(k);
    let mut noisy_points = Vec::with_capacity(k);
    let mut gt_labels = Vec::with_capacity(k);
    let mut gt_correspondences = Vec::with_capacity(k);
    for pts in &moved {
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            for i in (1..n).rev() {
                let j = ((shuf.uniform() * (i + 1) as f64) as usize).min(i);
                order.swap(i, j);
            }
        }
        let clean: Vec<Vec3<f64>> = order.iter().map(|&i| pts[i] * scale).collect();
        let noisy: Vec<Vec3<f64>> = clean
            .iter()
            .map(|&p| {
                if cfg.noise_sigma > 0.0 {
                    let e = Vec3::new(noise.normal(), noise.normal(), noise.normal());
                    p + e * cfg.noise_sigma
                } else {
                    p
                }
            })
            .collect();
        gt_labels.push(order.iter().map(|&i| ref_labels[i]).collect::<Vec<_>>());
        gt_correspondences.push(order);
        clean_points.push(clean);
        noisy_points.push(noisy);
    }

    let scaled: Vec<Vec<RigidTransform<f64>>> = motions.iter().map(|m| m.iter().map(rescale).collect()).collect();
    let mut gt_poses = PoseSet::identity(k, s_count, 0);
    for (kk, row) in scaled.iter().enumerate().skip(1) {
        for (s, t) in row.iter().enumerate() {
            gt_poses.poses[kk][s] = t.compose(&scaled[0][s].inverse());
        }
    }
    let mut gt_flows = PairTable::new(k);
    for (a, b) in ordered_pairs(k) {
        let chain: Vec<_> = (0..s_count).map(|s| scaled[b][s].compose(&scaled[a][s].inverse())).collect();
        let vectors = clean_points[a]
            .iter()
            .zip(&gt_labels[a])
            .map(|(&p, &s)| chain[s].apply(p) - p)
            .collect();
        gt_flows.insert(a, b, FlowField::new(a, b, vectors)?);
    }

    Ok(SceneBundle {
        scans: ScanSet::from_points(noisy_points)?,
        gt_labels,
        gt_poses,
        gt_flows,
        gt_correspondences,
        clean_points,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig {
            num_points: 64,
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn sizes_follow_fractions() {
        let cfg = SceneConfig {
            num_points: 64,
            part_fractions: Some(vec![0.5, 0.3, 0.2]),
            ..SceneConfig::default()
        };
        assert_eq!(cfg.part_sizes(), vec![32, 19, 13]);
        assert_eq!(small(0).part_sizes().iter().sum::<usize>(), 64);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_scene(&small(3)).unwrap(), generate_scene(&small(3)).unwrap());
        assert_ne!(generate_scene(&small(3)).unwrap().scans, generate_scene(&small(4)).unwrap().scans);
    }

    #[test]
    fn static_single_part_gives_zero_flow() {
        let cfg = SceneConfig {
            num_parts: 1,
            max_rotation: 0.0,
            max_translation: 0.0,
            ..small(1)
        };
        let b = generate_scene(&cfg).unwrap();
        for (_, f) in b.gt_flows.iter() {
            assert!(f.vectors.iter().all(|v| v.norm() < 1e-15));
        }
    }

    #[test]
    fn flows_land_on_counterparts() {
        let b = generate_scene(&small(7)).unwrap();
        for ((k, l), f) in b.gt_flows.iter() {
            let inv: std::collections::HashMap<usize, usize> =
                b.gt_correspondences[l].iter().enumerate().map(|(i, &r)| (r, i)).collect();
            for (i, v) in f.vectors.iter().enumerate() {
                let j = inv[&b.gt_correspondences[k][i]];
                assert!((b.clean_points[k][i] + *v - b.clean_points[l][j]).norm() < 1e-12);
            }
        }
        let d = b.scans.diameter();
        assert!((1.0 - 1e-9..=1.0 + 1e-12).contains(&d));
    }
}
