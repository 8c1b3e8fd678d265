//! Pinhole camera: world-to-camera transform, perspective projection and
//! randomized look-at placement around a subject.
//!
//! Camera frame convention: +x right, +y down, +z along the optical axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Mat3, Result, Vec3};

/// Points with camera-frame depth at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self { fx: 1000.0, fy: 1000.0, cx: 960.0, cy: 540.0, width: 1920, height: 1080 }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive ({}, {})", self.fx, self.fy)));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if !(self.cx > 0.0 && self.cx < w && self.cy > 0.0 && self.cy < h) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation, stored row-major on disk.
    #[serde(with = "rows")]
    pub rotation: Mat3,
    /// Camera center in world coordinates, meters.
    pub position: Vec3,
    pub intrinsics: Intrinsics,
}

mod rows {
    use super::Mat3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]]);
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Mat3::from_fn(|r, c| rows[r][c]))
    }
}

/// Pixel coordinates of a projected point and its visibility flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub in_frame: bool,
    pub in_front: bool,
}

impl Camera {
    pub fn new(rotation: Mat3, position: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        intrinsics.validate()?;
        let orth = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if orth > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidCamera("rotation is not a proper rotation".into()));
        }
        if !position.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera position".into()));
        }
        Ok(Self { rotation, position, intrinsics })
    }

    /// Camera at `eye` whose optical axis passes through `target`, with world +y up.
    pub fn look_at(eye: Vec3, target: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let forward = target - eye;
        let dist = forward.norm();
        if !(dist > 0.0) {
            return Err(Error::InvalidCamera("eye and target coincide".into()));
        }
        let z = forward / dist;
        let mut x = z.cross(&Vec3::y());
        if x.norm() < 1e-9 {
            x = z.cross(&Vec3::z());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::new(rotation, eye, intrinsics)
    }

    pub fn world_to_cam(&self, x: &Vec3) -> Vec3 {
        self.rotation * (x - self.position)
    }

    /// Projects one camera-frame point. Points behind the camera report `(0, 0)`.
    pub fn project_cam(&self, p: &Vec3) -> Projected {
        let k = &self.intrinsics;
        if p.z <= MIN_DEPTH {
            return Projected { u: 0.0, v: 0.0, in_frame: false, in_front: false };
        }
        let u = k.cx + k.fx * p.x / p.z;
        let v = k.cy + k.fy * p.y / p.z;
        let in_frame = (0.0..k.width as f64).contains(&u) && (0.0..k.height as f64).contains(&v);
        Projected { u, v, in_frame, in_front: true }
    }

    pub fn project_point(&self, x: &Vec3) -> Projected {
        self.project_cam(&self.world_to_cam(x))
    }

    pub fn project(&self, points: &[Vec3]) -> Vec<Projected> {
        points.iter().map(|p| self.project_point(p)).collect()
    }
}

/// One-dimensional sampler: a closed range or a weighted histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler1d {
    Uniform { min: f64, max: f64 },
    Histogram { edges: Vec<f64>, weights: Vec<f64> },
}

impl Sampler1d {
    pub fn point(v: f64) -> Self {
        Sampler1d::Uniform { min: v, max: v }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDistribution(format!("{name}: {m}")));
        match self {
            Sampler1d::Uniform { min, max } => {
                if !(min.is_finite() && max.is_finite() && min <= max) {
                    return bad(format!("empty range [{min}, {max}]"));
                }
            }
            Sampler1d::Histogram { edges, weights } => {
                if edges.len() < 2 || weights.len() + 1 != edges.len() {
                    return bad("histogram needs n+1 edges for n weights".into());
                }
                if edges.windows(2).any(|w| !(w[0] < w[1])) {
                    return bad("edges must be strictly increasing".into());
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || !(weights.iter().sum::<f64>() > 0.0) {
                    return bad("weights must be nonnegative with a positive sum".into());
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler1d::Uniform { min, max } => {
                if min == max {
                    *min
                } else {
                    rng.random_range(*min..*max)
                }
            }
            Sampler1d::Histogram { edges, weights } => {
                let total: f64 = weights.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut bin = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if pick < *w {
                        bin = i;
                        break;
                    }
                    pick -= w;
                }
                rng.random_range(edges[bin]..edges[bin + 1])
            }
        }
    }

    fn scaled(&self, f: f64) -> Self {
        match self {
            Sampler1d::Uniform { min, max } => Sampler1d::Uniform { min: min * f, max: max * f },
            Sampler1d::Histogram { edges, weights } => {
                Sampler1d::Histogram { edges: edges.iter().map(|e| e * f).collect(), weights: weights.clone() }
            }
        }
    }
}

/// Distribution of camera placements relative to the subject. Angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraDistribution {
    pub yaw: Sampler1d,
    pub elevation: Sampler1d,
    pub distance: Sampler1d,
    /// Extra vertical lift of the camera center, meters.
    pub height: Sampler1d,
    pub intrinsics: Intrinsics,
}

impl Default for CameraDistribution {
    fn default() -> Self {
        Self {
            yaw: Sampler1d::Uniform { min: 0.0, max: std::f64::consts::TAU },
            elevation: Sampler1d::Uniform { min: (-30f64).to_radians(), max: 60f64.to_radians() },
            distance: Sampler1d::Uniform { min: 2.0, max: 6.0 },
            height: Sampler1d::point(0.0),
            intrinsics: Intrinsics::default(),
        }
    }
}

/// On-disk form of a [`CameraDistribution`]; angles in degrees.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionFile {
    pub format: String,
    pub version: u32,
    pub yaw_deg: Sampler1d,
    pub elevation_deg: Sampler1d,
    pub distance_m: Sampler1d,
    pub height_m: Sampler1d,
    pub intrinsics: Intrinsics,
}

pub const DISTRIBUTION_FORMAT: &str = "synthpose.camera_distribution";

impl CameraDistribution {
    pub fn validate(&self) -> Result<()> {
        self.yaw.validate("yaw")?;
        self.elevation.validate("elevation")?;
        self.distance.validate("distance")?;
        self.height.validate("height")?;
        if let Sampler1d::Uniform { min, .. } = self.distance {
            if min <= 0.0 {
                return Err(Error::InvalidDistribution("distance must be positive".into()));
            }
        }
        self.intrinsics.validate()
    }

    /// Point-mass distribution at the given placement.
    pub fn fixed(yaw: f64, elevation: f64, distance: f64, intrinsics: Intrinsics) -> Self {
        Self {
            yaw: Sampler1d::point(yaw),
            elevation: Sampler1d::point(elevation),
            distance: Sampler1d::point(distance),
            height: Sampler1d::point(0.0),
            intrinsics,
        }
    }

    pub fn to_file(&self) -> DistributionFile {
        let deg = 180.0 / std::f64::consts::PI;
        DistributionFile {
            format: DISTRIBUTION_FORMAT.into(),
            version: 1,
            yaw_deg: self.yaw.scaled(deg),
            elevation_deg: self.elevation.scaled(deg),
            distance_m: self.distance.clone(),
            height_m: self.height.clone(),
            intrinsics: self.intrinsics,
        }
    }

    pub fn from_file(file: &DistributionFile) -> Result<Self> {
        if file.format != DISTRIBUTION_FORMAT {
            return Err(Error::Format(format!("expected `{DISTRIBUTION_FORMAT}`, found `{}`", file.format)));
        }
        let rad = std::f64::consts::PI / 180.0;
        let dist = Self {
            yaw: file.yaw_deg.scaled(rad),
            elevation: file.elevation_deg.scaled(rad),
            distance: file.distance_m.clone(),
            height: file.height_m.clone(),
            intrinsics: file.intrinsics,
        };
        dist.validate()?;
        Ok(dist)
    }
}

/// Unit direction from the subject toward a camera at `yaw`/`elevation`.
///
/// Yaw 0 and elevation 0 put the camera on the subject's -z side.
pub fn placement_direction(yaw: f64, elevation: f64) -> Vec3 {
    Vec3::new(-yaw.sin() * elevation.cos(), elevation.sin(), -yaw.cos() * elevation.cos())
}

/// Inverse of [`placement_direction`] for an arbitrary offset: `(yaw in [0, 2π), elevation, distance)`.
pub fn placement_angles(offset: &Vec3) -> (f64, f64, f64) {
    let d = offset.norm();
    let yaw = (-offset.x).atan2(-offset.z).rem_euclid(std::f64::consts::TAU);
    let elevation = (offset.y / d).clamp(-1.0, 1.0).asin();
    (yaw, elevation, d)
}

/// Samples a look-at camera around `subject_root`; deterministic per seed.
pub fn sample_camera(dist: &CameraDistribution, subject_root: &Vec3, seed: u64) -> Result<Camera> {
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = dist.yaw.sample(&mut rng);
    let elevation = dist.elevation.sample(&mut rng);
    let distance = dist.distance.sample(&mut rng);
    let lift = dist.height.sample(&mut rng);
    let eye = subject_root + placement_direction(yaw, elevation) * distance + Vec3::new(0.0, lift, 0.0);
    Camera::look_at(eye, *subject_root, dist.intrinsics)
}
