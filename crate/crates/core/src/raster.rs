//! Software z-buffer rasterizer producing motion frames and Lambert-shaded RGB
//! frames from a posed body mesh.
//!
//! Camera space follows the pinhole convention: x right, y down, z forward.
//! Normals written into motion frames are expressed in view space (x right,
//! y up, z toward the viewer), so surfaces facing the camera land in the
//! front red slot.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body::BodyMesh;
use crate::error::{Error, Result};
use crate::geom::{Mat3, Rigid, Vec3};
use crate::motioncodec::{MotionColor, MotionEncoding, PartPalette};
use crate::scalar::Scalar;

pub const NEAR_PLANE: f64 = 1e-4;
pub const AMBIENT: f64 = 0.15;
pub const BACKGROUND_GRAY: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal: [f64; 2],
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub height: usize,
    pub width: usize,
}

impl Camera {
    pub fn new(focal: f64, principal: [f64; 2], pose: Rigid<f64>, height: usize, width: usize) -> Result<Self> {
        let cam = Self {
            focal,
            principal,
            rotation: pose.rotation.m,
            translation: pose.translation.to_array(),
            height,
            width,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Fixed frontal camera looking at the toy body from 4 m along +z.
    pub fn frontal(height: usize, width: usize) -> Result<Self> {
        let rotation = Mat3::diag(1.0, -1.0, -1.0);
        let center = Vec3::new(0.0, 0.95, 4.0);
        let pose = Rigid::new(rotation, -rotation.mul_vec(center));
        let focal = 1.75 * height.min(width) as f64;
        Self::new(focal, [width as f64 / 2.0, height as f64 / 2.0], pose, height, width)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::invalid("camera focal length must be positive"));
        }
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::invalid(format!(
                "image size {}x{} must be positive multiples of 16",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn pose(&self) -> Rigid<f64> {
        Rigid::new(Mat3::from_rows(self.rotation), Vec3::from_array(self.translation))
    }

    fn pose_t<T: Scalar>(&self) -> Rigid<T> {
        let r = self.rotation.map(|row| row.map(T::lit));
        Rigid::new(Mat3::from_rows(r), Vec3::from_array(self.translation).cast())
    }
}

/// Pinhole projection to `(pixel x, pixel y, depth)`; `None` behind the near plane.
pub fn project<T: Scalar>(camera: &Camera, point: Vec3<T>) -> Option<(T, T, T)> {
    let q = camera.pose_t::<T>().apply_point(point);
    if q.z <= T::lit(NEAR_PLANE) {
        return None;
    }
    let f = T::lit(camera.focal);
    Some((
        f * q.x / q.z + T::lit(camera.principal[0]),
        f * q.y / q.z + T::lit(camera.principal[1]),
        q.z,
    ))
}

/// Interleaved `H x W x 3` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Frame<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [T; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn cast<U: Scalar>(&self) -> Frame<U> {
        Frame {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        crate::imageio::write_rgb_png(path, self.height, self.width, &self.data)
    }
}

/// Encoded motion representation of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFrame<T> {
    pub frame: Frame<T>,
    pub coverage: Vec<bool>,
}

impl<T: Scalar> MotionFrame<T> {
    pub fn coverage_ratio(&self) -> f64 {
        self.coverage.iter().filter(|&&c| c).count() as f64 / self.coverage.len().max(1) as f64
    }

    pub fn color(&self, y: usize, x: usize) -> MotionColor<T> {
        MotionColor::from_array(self.frame.pixel(y, x))
    }

    pub fn cast<U: Scalar>(&self) -> MotionFrame<U> {
        MotionFrame {
            frame: self.frame.cast(),
            coverage: self.coverage.clone(),
        }
    }
}

/// Nearest visible face per pixel with perspective-correct barycentrics.
#[derive(Debug, Clone)]
pub struct Fragments<T> {
    pub height: usize,
    pub width: usize,
    pub face: Vec<Option<usize>>,
    pub bary: Vec<[T; 3]>,
    pub depth: Vec<T>,
}

fn edge<T: Scalar>(a: (T, T), b: (T, T), p: (T, T)) -> T {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Z-buffered visibility pass. Triangles whose three vertex normals all face
/// away from the camera are culled; the smaller depth wins, ties keep the
/// earlier face.
pub fn rasterize_fragments<T: Scalar>(mesh: &BodyMesh<T>, camera: &Camera) -> Fragments<T> {
    let (h, w) = (camera.height, camera.width);
    let n = h * w;
    let mut frags = Fragments {
        height: h,
        width: w,
        face: vec![None; n],
        bary: vec![[T::zero(); 3]; n],
        depth: vec![T::infinity(); n],
    };
    let pose = camera.pose_t::<T>();
    let half = T::lit(0.5);
    for (fi, f) in mesh.faces.iter().enumerate() {
        if f.iter().all(|&v| pose.apply_vector(mesh.vertex_normals[v]).z > T::zero()) {
            continue;
        }
        let mut proj = [(T::zero(), T::zero(), T::zero()); 3];
        let mut visible = true;
        for k in 0..3 {
            match project(camera, mesh.vertices[f[k]]) {
                Some(p) => proj[k] = p,
                None => visible = false,
            }
        }
        if !visible {
            continue;
        }
        let s = proj.map(|p| (p.0, p.1));
        let area = edge(s[0], s[1], s[2]);
        if area.abs() < T::lit(1e-12) {
            continue;
        }
        let min_x = s.iter().map(|p| p.0).fold(T::infinity(), T::min);
        let max_x = s.iter().map(|p| p.0).fold(T::neg_infinity(), T::max);
        let min_y = s.iter().map(|p| p.1).fold(T::infinity(), T::min);
        let max_y = s.iter().map(|p| p.1).fold(T::neg_infinity(), T::max);
        let x0 = (min_x - half).ceil().max(T::zero()).to_f64_lossy() as usize;
        let y0 = (min_y - half).ceil().max(T::zero()).to_f64_lossy() as usize;
        let x1 = ((max_x - half).floor().to_f64_lossy()).min(w as f64 - 1.0);
        let y1 = ((max_y - half).floor().to_f64_lossy()).min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        let inv_z = proj.map(|p| T::one() / p.2);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let p = (T::lit(px as f64) + half, T::lit(py as f64) + half);
                let w0 = edge(s[1], s[2], p) / area;
                let w1 = edge(s[2], s[0], p) / area;
                let w2 = edge(s[0], s[1], p) / area;
                if w0 < T::zero() || w1 < T::zero() || w2 < T::zero() {
                    continue;
                }
                let pw = [w0 * inv_z[0], w1 * inv_z[1], w2 * inv_z[2]];
                let denom = pw[0] + pw[1] + pw[2];
                let depth = T::one() / denom;
                let i = py * w + px;
                if depth < frags.depth[i] {
                    frags.depth[i] = depth;
                    frags.face[i] = Some(fi);
                    frags.bary[i] = [pw[0] / denom, pw[1] / denom, pw[2] / denom];
                }
            }
        }
    }
    frags
}

fn interpolated_normal<T: Scalar>(mesh: &BodyMesh<T>, face: usize, bary: [T; 3]) -> Vec3<T> {
    let f = mesh.faces[face];
    let n = mesh.vertex_normals[f[0]].scale(bary[0])
        + mesh.vertex_normals[f[1]].scale(bary[1])
        + mesh.vertex_normals[f[2]].scale(bary[2]);
    n.normalized().unwrap_or_else(|| {
        let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        (b - a).cross(c - a).normalized().unwrap_or(Vec3::new(T::zero(), T::zero(), T::one()))
    })
}

/// World normal to view space (x right, y up, z toward the viewer).
pub fn view_normal<T: Scalar>(camera: &Camera, world: Vec3<T>) -> Vec3<T> {
    let c = camera.pose_t::<T>().apply_vector(world);
    Vec3::new(c.x, -c.y, -c.z)
}

pub fn rasterize_motion_frame<T: Scalar>(mesh: &BodyMesh<T>, camera: &Camera, palette: &PartPalette) -> MotionFrame<T> {
    rasterize_motion_frame_with(mesh, camera, palette, MotionEncoding::Full)
}

pub fn rasterize_motion_frame_with<T: Scalar>(
    mesh: &BodyMesh<T>,
    camera: &Camera,
    palette: &PartPalette,
    encoding: MotionEncoding,
) -> MotionFrame<T> {
    let frags = rasterize_fragments(mesh, camera);
    let mut frame = Frame::filled(camera.height, camera.width, T::zero());
    let mut coverage = vec![false; camera.height * camera.width];
    for (i, face) in frags.face.iter().enumerate() {
        let Some(fi) = *face else { continue };
        let n = view_normal(camera, interpolated_normal(mesh, fi, frags.bary[i]));
        let color = encoding.encode(n, mesh.face_parts[fi], palette);
        frame.data[i * 3..i * 3 + 3].copy_from_slice(&color.to_array());
        coverage[i] = true;
    }
    MotionFrame { frame, coverage }
}

/// Lambert term plus ambient, clamped to `[0, 1]`.
pub fn shade_lambert<T: Scalar>(albedo: [T; 3], normal: Vec3<T>, light_dir: Vec3<T>) -> [T; 3] {
    let lambert = normal.dot(-light_dir).max(T::zero());
    albedo.map(|a| (a * lambert + T::lit(AMBIENT)).max(T::zero()).min(T::one()))
}

pub fn render_shaded_frame<T: Scalar>(
    mesh: &BodyMesh<T>,
    camera: &Camera,
    light_dir: Vec3<T>,
    albedo_per_part: &[[T; 3]],
) -> Result<Frame<T>> {
    if let Some(&max_part) = mesh.face_parts.iter().max() {
        if max_part >= albedo_per_part.len() {
            return Err(Error::invalid(format!(
                "{} albedos for part index {max_part}",
                albedo_per_part.len()
            )));
        }
    }
    let light = light_dir
        .normalized()
        .ok_or_else(|| Error::invalid("light direction is zero"))?;
    let frags = rasterize_fragments(mesh, camera);
    let mut frame = Frame::filled(camera.height, camera.width, T::lit(BACKGROUND_GRAY));
    for (i, face) in frags.face.iter().enumerate() {
        let Some(fi) = *face else { continue };
        let n = interpolated_normal(mesh, fi, frags.bary[i]);
        let rgb = shade_lambert(albedo_per_part[mesh.face_parts[fi]], n, light);
        frame.data[i * 3..i * 3 + 3].copy_from_slice(&rgb);
    }
    Ok(frame)
}
