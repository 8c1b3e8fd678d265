//! Ray-cast visibility labeling against scene primitives and body capsules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::body::KinematicTree;
use crate::camera::{Camera, MIN_DEPTH};
use crate::{Error, Result, Vec3};

/// Hits closer than this to the queried joint do not count as occluders, meters.
pub const HIT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box.
    Aabb { min: Vec3, max: Vec3 },
    Capsule { p0: Vec3, p1: Vec3, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Owner {
    Environment,
    /// Bone `bone` runs from joint `parent` to joint `child`.
    SubjectBone { bone: usize, parent: usize, child: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub owner: Owner,
}

impl Primitive {
    /// The same primitive shifted by `offset`.
    pub fn translated(&self, offset: &Vec3) -> Self {
        let shape = match self.shape {
            Shape::Sphere { center, radius } => Shape::Sphere { center: center + offset, radius },
            Shape::Aabb { min, max } => Shape::Aabb { min: min + offset, max: max + offset },
            Shape::Capsule { p0, p1, radius } => Shape::Capsule { p0: p0 + offset, p1: p1 + offset, radius },
        };
        Self { shape, owner: self.owner }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionLabel {
    Visible,
    Occluded,
    SelfOccluded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub distance: f64,
}

impl Shape {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
        match self {
            Shape::Sphere { center, radius } => {
                if !(finite(center) && *radius > 0.0) {
                    return Err(Error::InvalidPrimitive(format!("sphere radius {radius}")));
                }
            }
            Shape::Aabb { min, max } => {
                if !(finite(min) && finite(max)) || (0..3).any(|i| !(min[i] < max[i])) {
                    return Err(Error::InvalidPrimitive("box min must be below max on every axis".into()));
                }
            }
            Shape::Capsule { p0, p1, radius } => {
                if !(finite(p0) && finite(p1) && *radius > 0.0) || p0 == p1 {
                    return Err(Error::InvalidPrimitive("capsule needs distinct endpoints and positive radius".into()));
                }
            }
        }
        Ok(())
    }

    /// Whether `p` lies inside the closed solid.
    pub fn contains(&self, p: &Vec3) -> bool {
        match *self {
            Shape::Sphere { center, radius } => (p - center).norm_squared() <= radius * radius,
            Shape::Aabb { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
            Shape::Capsule { p0, p1, radius } => segment_distance(p, &p0, &p1) <= radius,
        }
    }

    /// Distance along the unit ray to the first surface entry.
    ///
    /// Rays starting inside the solid hit at distance 0.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        if self.contains(origin) {
            return Some(0.0);
        }
        match *self {
            Shape::Sphere { center, radius } => sphere_entry(origin, dir, &center, radius),
            Shape::Aabb { min, max } => {
                let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
                for i in 0..3 {
                    if dir[i] == 0.0 {
                        if origin[i] < min[i] || origin[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[i];
                    let (mut a, mut b) = ((min[i] - origin[i]) * inv, (max[i] - origin[i]) * inv);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    t0 = t0.max(a);
                    t1 = t1.min(b);
                    if t0 > t1 {
                        return None;
                    }
                }
                Some(t0)
            }
            Shape::Capsule { p0, p1, radius } => {
                let mut best = f64::INFINITY;
                let ba = p1 - p0;
                let oa = origin - p0;
                let baba = ba.dot(&ba);
                let bard = ba.dot(dir);
                let baoa = ba.dot(&oa);
                let a = baba - bard * bard;
                if a > 1e-12 * baba {
                    let b = baba * oa.dot(dir) - baoa * bard;
                    let c = baba * oa.dot(&oa) - baoa * baoa - radius * radius * baba;
                    let h = b * b - a * c;
                    if h >= 0.0 {
                        let t = (-b - h.sqrt()) / a;
                        let y = baoa + t * bard;
                        if t >= 0.0 && y > 0.0 && y < baba {
                            best = t;
                        }
                    }
                }
                for cap in [p0, p1] {
                    if let Some(t) = sphere_entry(origin, dir, &cap, radius) {
                        best = best.min(t);
                    }
                }
                best.is_finite().then_some(best)
            }
        }
    }
}

fn sphere_entry(origin: &Vec3, dir: &Vec3, center: &Vec3, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let s = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * s)).norm()
}

/// Nearest hit of a unit ray over `scene`, or `None`.
pub fn ray_cast(origin: &Vec3, dir: &Vec3, scene: &[Primitive]) -> Result<Option<Hit>> {
    let n = dir.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::NonUnitDirection(n));
    }
    Ok(nearest(origin, dir, scene.iter().enumerate()))
}

fn nearest<'a>(origin: &Vec3, dir: &Vec3, prims: impl Iterator<Item = (usize, &'a Primitive)>) -> Option<Hit> {
    let mut best: Option<(Hit, Owner)> = None;
    for (index, prim) in prims {
        if let Some(distance) = prim.shape.intersect(origin, dir) {
            let better = match best {
                None => true,
                Some((b, owner)) => {
                    distance < b.distance
                        || (distance == b.distance && tie_rank(&prim.owner, index) < tie_rank(&owner, b.index))
                }
            };
            if better {
                best = Some((Hit { index, distance }, prim.owner));
            }
        }
    }
    best.map(|(h, _)| h)
}

// Exact ties prefer environment geometry, so labels do not depend on primitive order.
fn tie_rank(owner: &Owner, index: usize) -> (u8, usize) {
    match owner {
        Owner::Environment => (0, index),
        Owner::SubjectBone { bone, .. } => (1, *bone),
    }
}

/// Capsule radii for the body proxy; overrides are keyed by the bone's child joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyRadii {
    pub default_radius: f64,
    #[serde(default)]
    pub overrides: BTreeMap<usize, f64>,
}

impl Default for BodyRadii {
    fn default() -> Self {
        Self { default_radius: 0.05, overrides: BTreeMap::new() }
    }
}

/// One capsule per bone; coincident endpoints become a sphere of the same radius.
pub fn body_capsules(joints: &[Vec3], tree: &KinematicTree, radii: &BodyRadii) -> Vec<Primitive> {
    tree.bones()
        .enumerate()
        .map(|(bone, (parent, child))| {
            let radius = radii.overrides.get(&child).copied().unwrap_or(radii.default_radius);
            let (p0, p1) = (joints[parent], joints[child]);
            let shape = if p0 == p1 { Shape::Sphere { center: p0, radius } } else { Shape::Capsule { p0, p1, radius } };
            Primitive { shape, owner: Owner::SubjectBone { bone, parent, child } }
        })
        .collect()
}

/// Labels one joint by casting a ray from the camera center to it.
///
/// Capsules incident to the joint are ignored. Any remaining hit closer than
/// the joint by more than [`HIT_EPSILON`] decides the label by its owner.
pub fn classify_joint(
    joint: usize,
    joints: &[Vec3],
    cam: &Camera,
    env: &[Primitive],
    capsules: &[Primitive],
) -> Result<OcclusionLabel> {
    let target = joints[joint];
    if cam.world_to_cam(&target).z <= MIN_DEPTH {
        return Err(Error::BehindCamera(joint));
    }
    let delta = target - cam.position;
    let dist = delta.norm();
    let dir = delta / dist;
    let incident =
        |p: &&Primitive| !matches!(p.owner, Owner::SubjectBone { parent, child, .. } if parent == joint || child == joint);
    let candidates = env.iter().chain(capsules.iter().filter(incident)).enumerate();
    let label = match nearest(&cam.position, &dir, candidates) {
        Some(hit) if hit.distance < dist - HIT_EPSILON => {
            let owner = if hit.index < env.len() {
                env[hit.index].owner
            } else {
                capsules.iter().filter(incident).nth(hit.index - env.len()).unwrap().owner
            };
            match owner {
                Owner::Environment => OcclusionLabel::Occluded,
                Owner::SubjectBone { .. } => OcclusionLabel::SelfOccluded,
            }
        }
        _ => OcclusionLabel::Visible,
    };
    Ok(label)
}

/// Labels every joint of a frame. Joints behind the camera are labeled `Occluded`.
pub fn label_frame(
    joints: &[Vec3],
    tree: &KinematicTree,
    cam: &Camera,
    env: &[Primitive],
    radii: Option<&BodyRadii>,
) -> Vec<OcclusionLabel> {
    let capsules = radii.map(|r| body_capsules(joints, tree, r)).unwrap_or_default();
    (0..joints.len())
        .map(|j| classify_joint(j, joints, cam, env, &capsules).unwrap_or(OcclusionLabel::Occluded))
        .collect()
}

/// On-disk scene: a versioned list of environment primitives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub format: String,
    pub version: u32,
    pub primitives: Vec<Shape>,
}

pub const SCENE_FORMAT: &str = "synthpose.scene";

impl SceneFile {
    pub fn new(shapes: Vec<Shape>) -> Self {
        Self { format: SCENE_FORMAT.into(), version: 1, primitives: shapes }
    }

    pub fn into_primitives(self) -> Result<Vec<Primitive>> {
        if self.format != SCENE_FORMAT {
            return Err(Error::Format(format!("expected `{SCENE_FORMAT}`, found `{}`", self.format)));
        }
        self.primitives
            .into_iter()
            .map(|shape| {
                shape.validate()?;
                Ok(Primitive { shape, owner: Owner::Environment })
            })
            .collect()
    }
}
