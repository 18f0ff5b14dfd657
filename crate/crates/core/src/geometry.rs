//! Projection geometry for the two mammographic views.
//!
//! Coordinates: `x` = image column (chest wall at max `x`), `y` = image row,
//! `z` = depth; the origin sits at the volume corner and the continuous
//! equations are discretized at voxel centers.
//!
//! The CC view projects onto the `z = 0` plane (aggregate along `z`). The
//! MLO view rotates 45° about the x-axis and projects; discretely, each MLO
//! image row aggregates one lattice diagonal `y - z = const` of the `(y,z)`
//! cross-section, taken modulo the grid so every ray holds exactly `D`
//! voxels. With that convention back-projection is the exact transpose of
//! projection: `project(back_project(img)) == img` and
//! `<project(v), img> == (1/D) * <v, back_project(img)>`.
//!
//! Feature-map variants operate per channel with the same ray layout.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Translation direction / the view a plane belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Cc,
    Mlo,
}

// ---------------------------------------------------------------------------
// Point-level projection model
// ---------------------------------------------------------------------------

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Orthographic projection model: `P` drops the depth coordinate and `R`
/// rotates by `theta` about the x-axis (45° for the MLO view).
#[derive(Clone, Copy, Debug)]
pub struct ProjectionModel {
    pub theta: f64,
}

impl Default for ProjectionModel {
    fn default() -> Self {
        ProjectionModel {
            theta: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl ProjectionModel {
    /// Test hook: a perturbed angle keeps `R` orthonormal but breaks the
    /// 45° projection values.
    pub fn with_theta(theta: f64) -> Self {
        ProjectionModel { theta }
    }

    pub fn projection_matrix(&self) -> Mat3 {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        let (s, c) = self.theta.sin_cos();
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    }

    /// CC: `(x,y,z) -> (x,y,0)`. MLO: `(x,y,z) -> (x, y cosθ - z sinθ, 0)`,
    /// i.e. `(x, (y-z)/sqrt(2), 0)` at the standard angle.
    pub fn project_point(&self, p: Vec3, view: View) -> Vec3 {
        match view {
            View::Cc => [p[0], p[1], 0.0],
            View::Mlo => {
                let (s, c) = self.theta.sin_cos();
                [p[0], p[1] * c - p[2] * s, 0.0]
            }
        }
    }
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat3_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for i in 0..3 {
        for k in 0..3 {
            out[i] += a[i][k] * v[k];
        }
    }
    out
}

pub fn mat3_det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

// ---------------------------------------------------------------------------
// Volume <-> image operators
// ---------------------------------------------------------------------------

/// MLO image row for the lattice diagonal through `(y, z)`; the center
/// diagonal `y = z` maps to the middle row.
#[inline]
fn mlo_row(y: usize, z: usize, n: usize) -> usize {
    (y + n + n / 2 - z) % n
}

/// Decompose a volume shape as `(channels, d, h, w)`, accepting `[d,h,w]`
/// or `[c,d,h,w]`.
fn vol_dims(v: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match v.shape() {
        [d, h, w] => Ok((1, *d, *h, *w)),
        [c, d, h, w] => Ok((*c, *d, *h, *w)),
        s => Err(Error::invalid(format!(
            "expected a [d,h,w] or [c,d,h,w] volume, got {s:?}"
        ))),
    }
}

fn img_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::invalid(format!(
            "expected a [h,w] or [c,h,w] image, got {s:?}"
        ))),
    }
}

/// Mean-aggregate a volume along its view ray direction into an `h x w`
/// image (per channel for feature volumes).
pub fn project_volume(v: &Tensor, view: View) -> Result<Tensor> {
    let (c, d, h, w) = vol_dims(v)?;
    if view == View::Mlo && d != h {
        return Err(Error::invalid(format!(
            "MLO projection needs depth == height, got d={d} h={h}"
        )));
    }
    let data = v.data();
    let inv = 1.0 / d as f32;
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let vp = &data[ch * d * h * w..][..d * h * w];
        let op = &mut out[ch * h * w..][..h * w];
        match view {
            View::Cc => {
                for z in 0..d {
                    for y in 0..h {
                        let src = &vp[(z * h + y) * w..][..w];
                        for x in 0..w {
                            op[y * w + x] += src[x];
                        }
                    }
                }
            }
            View::Mlo => {
                let n = h;
                for z in 0..d {
                    for y in 0..h {
                        let r = mlo_row(y, z, n);
                        let src = &vp[(z * h + y) * w..][..w];
                        for x in 0..w {
                            op[r * w + x] += src[x];
                        }
                    }
                }
            }
        }
        for o in op.iter_mut() {
            *o *= inv;
        }
    }
    let shape: Vec<usize> = if v.shape().len() == 3 {
        vec![h, w]
    } else {
        vec![c, h, w]
    };
    Tensor::from_vec(&shape, out)
}

/// Smear an image back along its view rays: every voxel on a pixel's ray
/// receives the pixel value (no depth scaling). Exact transpose of
/// `project_volume` up to the documented 1/D factor.
pub fn back_project(img: &Tensor, view: View, depth: usize) -> Result<Tensor> {
    let (c, h, w) = img_dims(img)?;
    if depth == 0 {
        return Err(Error::invalid("back_project: depth must be >= 1"));
    }
    if view == View::Mlo && depth != h {
        return Err(Error::invalid(format!(
            "MLO back-projection needs depth == height, got depth={depth} h={h}"
        )));
    }
    let data = img.data();
    let mut out = vec![0.0f32; c * depth * h * w];
    for ch in 0..c {
        let ip = &data[ch * h * w..][..h * w];
        let op = &mut out[ch * depth * h * w..][..depth * h * w];
        match view {
            View::Cc => {
                for z in 0..depth {
                    op[z * h * w..(z + 1) * h * w].copy_from_slice(ip);
                }
            }
            View::Mlo => {
                let n = h;
                for z in 0..depth {
                    for y in 0..h {
                        let r = mlo_row(y, z, n);
                        let dst = &mut op[(z * h + y) * w..][..w];
                        dst.copy_from_slice(&ip[r * w..(r + 1) * w]);
                    }
                }
            }
        }
    }
    let shape: Vec<usize> = if img.shape().len() == 2 {
        vec![depth, h, w]
    } else {
        vec![c, depth, h, w]
    };
    Tensor::from_vec(&shape, out)
}

/// Lift a CC feature map and an MLO feature map into one shared volume:
/// back-project each along its own geometry and concatenate on the channel
/// axis (CC half first). Output is `[2c, h, h, w]`.
pub fn build_feature_volume(lat_cc: &Tensor, lat_mlo: &Tensor) -> Result<Tensor> {
    let (c0, h0, w0) = img_dims(lat_cc)?;
    let (c1, h1, w1) = img_dims(lat_mlo)?;
    if (h0, w0) != (h1, w1) {
        return Err(Error::ShapeMismatch {
            op: "build_feature_volume",
            lhs: lat_cc.shape().to_vec(),
            rhs: lat_mlo.shape().to_vec(),
        });
    }
    if c0 != c1 {
        return Err(Error::ShapeMismatch {
            op: "build_feature_volume(channels)",
            lhs: lat_cc.shape().to_vec(),
            rhs: lat_mlo.shape().to_vec(),
        });
    }
    let cc3 = if lat_cc.shape().len() == 2 {
        lat_cc.reshape(&[1, h0, w0])?
    } else {
        lat_cc.clone()
    };
    let mlo3 = if lat_mlo.shape().len() == 2 {
        lat_mlo.reshape(&[1, h1, w1])?
    } else {
        lat_mlo.clone()
    };
    let vol_cc = back_project(&cc3, View::Cc, h0)?;
    let vol_mlo = back_project(&mlo3, View::Mlo, h0)?;
    let mut data = vol_cc.to_vec();
    data.extend_from_slice(vol_mlo.data());
    Tensor::from_vec(&[2 * c0, h0, h0, w0], data)
}

// ---------------------------------------------------------------------------
// Synthetic phantom
// ---------------------------------------------------------------------------

/// Base tissue intensity inside the semi-sphere before blobs are added.
pub const PHANTOM_BASE_INTENSITY: f32 = 0.25;

/// Parameters of the procedural semi-spherical phantom. The semi-sphere is
/// attached to the chest-wall plane `x = grid - 1`.
#[derive(Clone, Debug)]
pub struct PhantomSpec {
    /// Cubic grid edge (D = H = W).
    pub grid: usize,
    pub radius: f32,
    pub blobs: usize,
    pub blob_intensity: (f32, f32),
    pub blob_sigma: (f32, f32),
    pub seed: u64,
}

impl PhantomSpec {
    /// Defaults sized so the support stays clear of the MLO wrap seam.
    pub fn new(grid: usize, seed: u64) -> Self {
        let g = grid as f32;
        PhantomSpec {
            grid,
            radius: g / 3.0,
            blobs: 6,
            blob_intensity: (0.15, 0.6),
            blob_sigma: (g / 16.0, g / 7.0),
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.seed = seed;
        s
    }
}

/// Generate the phantom volume `[d,h,w]`. Deterministic in `spec.seed`;
/// zero outside the semi-sphere.
pub fn phantom_generate(spec: &PhantomSpec) -> Result<Tensor> {
    let n = spec.grid;
    if n == 0 {
        return Err(Error::invalid("phantom: grid must be >= 1"));
    }
    if !(spec.radius > 0.0) || spec.radius > n as f32 {
        return Err(Error::invalid(format!(
            "phantom: radius {} outside (0, {}]",
            spec.radius, n
        )));
    }
    let mut rng = Rng::new(spec.seed);
    let center = [
        (n - 1) as f32,           // chest wall at max x
        (n as f32 - 1.0) / 2.0,   // y
        (n as f32 - 1.0) / 2.0,   // z
    ];

    // Blob centers are rejection-sampled inside 80% of the semi-sphere so
    // their mass stays within the support.
    let mut blobs = Vec::with_capacity(spec.blobs);
    for _ in 0..spec.blobs {
        let rr = 0.8 * spec.radius;
        let c = loop {
            let dx = rng.uniform(-rr, 0.0);
            let dy = rng.uniform(-rr, rr);
            let dz = rng.uniform(-rr, rr);
            if dx * dx + dy * dy + dz * dz <= rr * rr {
                break [center[0] + dx, center[1] + dy, center[2] + dz];
            }
        };
        let amp = rng.uniform(spec.blob_intensity.0, spec.blob_intensity.1);
        let sigma = rng.uniform(spec.blob_sigma.0, spec.blob_sigma.1);
        blobs.push((c, amp, sigma));
    }

    let r2 = spec.radius * spec.radius;
    let mut data = vec![0.0f32; n * n * n];
    data.par_chunks_mut(n * n).enumerate().for_each(|(z, plane)| {
        let dz = z as f32 - center[2];
        for y in 0..n {
            let dy = y as f32 - center[1];
            for x in 0..n {
                let dx = x as f32 - center[0];
                if dx * dx + dy * dy + dz * dz > r2 {
                    continue;
                }
                let mut v = PHANTOM_BASE_INTENSITY;
                for (c, amp, sigma) in &blobs {
                    let bd = (x as f32 - c[0]).powi(2)
                        + (y as f32 - c[1]).powi(2)
                        + (z as f32 - c[2]).powi(2);
                    v += amp * (-bd / (2.0 * sigma * sigma)).exp();
                }
                plane[y * n + x] = v;
            }
        }
    });
    Tensor::from_vec(&[n, n, n], data)
}

/// Project a phantom into its normalized (CC, MLO) image pair.
pub fn make_pair(v: &Tensor) -> Result<(Tensor, Tensor)> {
    let cc = project_volume(v, View::Cc)?;
    let mlo = project_volume(v, View::Mlo)?;
    let cc = crate::data::normalize_truncation(&cc, 1.0, 99.0)?;
    let mlo = crate::data::normalize_truncation(&mlo, 1.0, 99.0)?;
    Ok((cc, mlo))
}
