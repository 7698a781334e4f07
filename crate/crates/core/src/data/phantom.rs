//! Procedural head phantoms: a bright ellipsoidal skull shell around
//! mid-intensity brain with two dark ventricles, plus labelled lesions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{LabelVolume, Shape, Volume};

/// Normalized head radius of the skull's inner surface.
const INNER_SKULL: f64 = 0.88;
const SKULL: f32 = 0.95;
const BRAIN: f32 = 0.45;
const CSF: f32 = 0.15;
const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    /// Biconvex lens against the inner skull.
    Epidural,
    /// Thin crescent following the inner skull.
    Subdural,
    /// Thin sheet in the outer cortex.
    Subarachnoid,
    /// Compact ellipsoidal blob in the parenchyma.
    Intraparenchymal,
    /// Blob inside a ventricle.
    Intraventricular,
    /// Speckled patch.
    Contusion,
}

impl LesionKind {
    pub fn name(self) -> &'static str {
        match self {
            LesionKind::Epidural => "Epidural Hematoma",
            LesionKind::Subdural => "Subdural Hematoma",
            LesionKind::Subarachnoid => "Subarachnoid Hemorrhage",
            LesionKind::Intraparenchymal => "Intraparenchymal Hemorrhage",
            LesionKind::Intraventricular => "Intraventricular Hemorrhage",
            LesionKind::Contusion => "Contusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRecipe {
    pub kind: LesionKind,
    pub class: u8,
    /// Inclusive range of lesions per phantom.
    pub count: (usize, usize),
    /// Characteristic radius range in voxels.
    pub size: (f64, f64),
    /// Mean intensity range; each lesion draws one value.
    pub intensity: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub lesions: Vec<LesionRecipe>,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Four lesion classes with partly overlapping intensity bands:
    /// epidural (1), subdural (2), intraparenchymal (3), intraventricular (4).
    /// Lesion sizes are given for 48-voxel heads and scale with the smallest
    /// extent.
    pub fn desk(extents: [usize; 3], seed: u64) -> Self {
        let f = extents.iter().copied().min().unwrap_or(48) as f64 / 48.0;
        let recipe = |kind, class, size: (f64, f64), intensity| LesionRecipe {
            kind,
            class,
            count: (1, 1),
            size: (size.0 * f, size.1 * f),
            intensity,
        };
        PhantomSpec {
            extents,
            lesions: vec![
                recipe(LesionKind::Epidural, 1, (6.0, 8.0), (0.80, 0.88)),
                recipe(LesionKind::Subdural, 2, (2.5, 3.5), (0.64, 0.72)),
                recipe(LesionKind::Intraparenchymal, 3, (3.5, 5.0), (0.72, 0.80)),
                recipe(LesionKind::Intraventricular, 4, (3.0, 4.0), (0.56, 0.64)),
            ],
            noise: 0.02,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.lesions.iter().map(|l| l.class as usize).max().unwrap_or(0) + 1
    }

    /// "Background" followed by the name of the first recipe of each class.
    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes())
            .map(|c| {
                if c == 0 {
                    "Background".to_string()
                } else {
                    self.lesions
                        .iter()
                        .find(|l| l.class as usize == c)
                        .map_or_else(|| format!("class {c}"), |l| l.kind.name().to_string())
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        Shape::spatial(self.extents)?;
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Parameter(format!("noise level {} is invalid", self.noise)));
        }
        for l in &self.lesions {
            if l.class == 0 {
                return Err(Error::Parameter(format!("{:?} lesions cannot use class 0", l.kind)));
            }
            if l.count.0 > l.count.1 || !(0.0 < l.size.0 && l.size.0 <= l.size.1) {
                return Err(Error::Parameter(format!("{:?} recipe has an empty range", l.kind)));
            }
            if !(0.0..=1.0).contains(&l.intensity.0) || !(l.intensity.0..=1.0).contains(&l.intensity.1) {
                return Err(Error::Parameter(format!("{:?} intensity outside [0, 1]", l.kind)));
            }
        }
        Ok(())
    }
}

struct Head {
    ext: [usize; 3],
    center: [f64; 3],
    radii: [f64; 3],
    ventricles: [[f64; 3]; 2],
    ventricle_radii: [f64; 3],
}

impl Head {
    fn new(ext: [usize; 3]) -> Self {
        let center = ext.map(|e| (e as f64 - 1.0) / 2.0);
        let radii = ext.map(|e| 0.46 * e as f64);
        let off = 0.11 * ext[2] as f64;
        Head {
            ext,
            center,
            radii,
            ventricles: [
                [center[0], center[1], center[2] - off],
                [center[0], center[1], center[2] + off],
            ],
            ventricle_radii: [0.13 * ext[0] as f64, 0.10 * ext[1] as f64, 0.06 * ext[2] as f64],
        }
    }

    fn mean_radius(&self) -> f64 {
        (self.radii[0] + self.radii[1] + self.radii[2]) / 3.0
    }

    /// Normalized ellipsoidal radius of a point.
    fn r(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>().sqrt()
    }

    fn in_ventricle(&self, p: [f64; 3], scale: f64) -> bool {
        self.ventricles.iter().any(|v| {
            (0..3).map(|a| ((p[a] - v[a]) / (self.ventricle_radii[a] * scale)).powi(2)).sum::<f64>() <= 1.0
        })
    }

    fn base(&self, p: [f64; 3]) -> f32 {
        let r = self.r(p);
        if r > 1.0 {
            0.0
        } else if r > INNER_SKULL {
            SKULL
        } else if self.in_ventricle(p, 1.0) {
            CSF
        } else {
            BRAIN
        }
    }

    fn points(&self) -> impl Iterator<Item = (usize, [f64; 3])> + '_ {
        let [d, h, w] = self.ext;
        (0..d * h * w).map(move |i| (i, [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64]))
    }

    /// Random unit direction with a bounded vertical component.
    fn lateral_direction(r: &mut ChaCha8Rng) -> [f64; 3] {
        loop {
            let v: [f64; 3] = [r.random_range(-0.5..0.5), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 0.3 {
                return v.map(|x| x / n);
            }
        }
    }

    /// Point at normalized radius `r` along a unit direction in head space.
    fn along(&self, u: [f64; 3], r: f64) -> [f64; 3] {
        [0, 1, 2].map(|a| self.center[a] + r * self.radii[a] * u[a])
    }

    /// Point inside the brain at normalized radius at most `max_r`, outside
    /// the (scaled) ventricles.
    fn interior_point(&self, r: &mut ChaCha8Rng, max_r: f64) -> [f64; 3] {
        loop {
            let u = [0, 1, 2].map(|_| r.random_range(-1.0..1.0));
            let p = self.along(u, max_r);
            if self.r(p) <= max_r && !self.in_ventricle(p, 1.4) {
                return p;
            }
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Voxel indices of one candidate lesion.
fn lesion_voxels(head: &Head, kind: LesionKind, radius: f64, r: &mut ChaCha8Rng, seed: u64) -> Vec<usize> {
    let inner = INNER_SKULL;
    let mean_r = head.mean_radius();
    let in_brain = |p: [f64; 3]| head.r(p) <= inner;
    match kind {
        LesionKind::Epidural => {
            let u = Head::lateral_direction(r);
            let s = head.along(u, inner);
            let thickness = 0.55 * radius;
            head.points()
                .filter(|&(_, p)| {
                    let rr = head.r(p);
                    let l = dist(p, s);
                    rr <= inner && l < radius && (inner - rr) * mean_r < thickness * (1.0 - (l / radius).powi(2))
                })
                .map(|(i, _)| i)
                .collect()
        }
        LesionKind::Subdural => {
            let u = Head::lateral_direction(r);
            let half_angle = r.random_range(0.55..0.75f64);
            let depth = radius / mean_r;
            head.points()
                .filter(|&(_, p)| {
                    let rr = head.r(p);
                    if !(rr <= inner && rr > inner - depth) {
                        return false;
                    }
                    let q = [0, 1, 2].map(|a| (p[a] - head.center[a]) / head.radii[a]);
                    let cos = (q[0] * u[0] + q[1] * u[1] + q[2] * u[2]) / rr.max(1e-9);
                    cos > half_angle.cos()
                })
                .map(|(i, _)| i)
                .collect()
        }
        LesionKind::Subarachnoid => {
            let u = Head::lateral_direction(r);
            let anchor = head.along(u, 0.72);
            let normal = Head::lateral_direction(r);
            head.points()
                .filter(|&(_, p)| {
                    let off: f64 = (0..3).map(|a| (p[a] - anchor[a]) * normal[a]).sum();
                    in_brain(p) && head.r(p) > 0.55 && off.abs() < 0.9 && dist(p, anchor) < radius * 1.6
                })
                .map(|(i, _)| i)
                .collect()
        }
        LesionKind::Intraparenchymal => {
            let c = head.interior_point(r, 0.55);
            let axes = [0, 1, 2].map(|_| radius * r.random_range(0.8..1.25));
            head.points()
                .filter(|&(_, p)| {
                    in_brain(p)
                        && !head.in_ventricle(p, 1.0)
                        && (0..3).map(|a| ((p[a] - c[a]) / axes[a]).powi(2)).sum::<f64>() <= 1.0
                })
                .map(|(i, _)| i)
                .collect()
        }
        LesionKind::Intraventricular => {
            let v = head.ventricles[r.random_range(0..2)];
            let jitter = [0, 1, 2].map(|a| r.random_range(-0.4..0.4) * head.ventricle_radii[a]);
            let c = [0, 1, 2].map(|a| v[a] + jitter[a]);
            head.points()
                .filter(|&(_, p)| head.in_ventricle(p, 1.15) && dist(p, c) <= radius)
                .map(|(i, _)| i)
                .collect()
        }
        LesionKind::Contusion => {
            let c = head.interior_point(r, 0.7);
            let salt = r.random::<u64>();
            head.points()
                .filter(|&(i, p)| {
                    in_brain(p)
                        && !head.in_ventricle(p, 1.0)
                        && dist(p, c) <= radius
                        && rng::uniform(seed ^ salt, i as u64) < 0.55
                })
                .map(|(i, _)| i)
                .collect()
        }
    }
}

/// Deterministic image/label pair for a spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume<f32>, LabelVolume)> {
    spec.validate()?;
    if spec.extents.iter().any(|&e| e < 16) {
        return Err(Error::Placement(format!(
            "extents {:?} are too small for a head phantom (minimum 16 per axis)",
            spec.extents
        )));
    }
    let head = Head::new(spec.extents);
    let shape = Shape::spatial(spec.extents)?;
    let mut image: Vec<f32> = head.points().map(|(_, p)| head.base(p)).collect();
    let mut labels = vec![0u8; shape.len()];

    let mut r = rng::stream(spec.seed, 0);
    for recipe in &spec.lesions {
        let count = r.random_range(recipe.count.0..=recipe.count.1);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..MAX_ATTEMPTS {
                let radius = if recipe.size.0 == recipe.size.1 {
                    recipe.size.0
                } else {
                    r.random_range(recipe.size.0..recipe.size.1)
                };
                let voxels = lesion_voxels(&head, recipe.kind, radius, &mut r, spec.seed);
                if voxels.len() < 8 || voxels.iter().any(|&i| labels[i] != 0) {
                    continue;
                }
                let level = r.random_range(recipe.intensity.0..=recipe.intensity.1) as f32;
                for i in voxels {
                    labels[i] = recipe.class;
                    image[i] = level;
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Placement(format!(
                    "could not place a {:?} lesion of size {:?} in extents {:?}",
                    recipe.kind, recipe.size, spec.extents
                )));
            }
        }
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        let mut nr = rng::stream(spec.seed, 1);
        for v in &mut image {
            *v = (*v as f64 + normal.sample(&mut nr)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok((Volume::from_vec(shape, image)?, LabelVolume::from_vec(spec.extents, labels)?))
}
