//! Toy articulated body: kinematic skeleton, capsule-per-part skinning,
//! vertex normals and part labels.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Mat3, Rigid, Vec3};
use crate::scalar::Scalar;

const TOY8_CONFIG: &str = include_str!("../assets/skeleton_toy8.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
    /// Rest offset from the parent joint, in the parent's frame (meters).
    pub offset: [f64; 3],
}

/// Rigid capsule attached to a joint, described in the joint's local frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsulePart {
    pub name: String,
    pub joint: usize,
    #[serde(default)]
    pub start: [f64; 3],
    pub axis: [f64; 3],
    pub length: f64,
    pub radius: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    #[serde(default)]
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub parts: Vec<CapsulePart>,
}

impl Skeleton {
    pub fn new(name: impl Into<String>, joints: Vec<JointSpec>, parts: Vec<CapsulePart>) -> Result<Self> {
        let s = Self {
            name: name.into(),
            joints,
            parts,
        };
        s.validate()?;
        Ok(s)
    }

    /// The default 8-joint, 8-part body.
    pub fn toy8() -> Self {
        Self::from_toml(TOY8_CONFIG).expect("bundled skeleton config is valid")
    }

    /// A 24-joint, 24-part body with the same joint tree as SMPL.
    pub fn smpl_like() -> Self {
        // (name, parent, offset)
        const TREE: [(&str, i32, [f64; 3]); 24] = [
            ("pelvis", -1, [0.0, 0.93, 0.0]),
            ("left_hip", 0, [0.07, -0.08, 0.0]),
            ("right_hip", 0, [-0.07, -0.08, 0.0]),
            ("spine1", 0, [0.0, 0.11, 0.0]),
            ("left_knee", 1, [0.02, -0.38, 0.0]),
            ("right_knee", 2, [-0.02, -0.38, 0.0]),
            ("spine2", 3, [0.0, 0.13, 0.0]),
            ("left_ankle", 4, [0.0, -0.4, 0.0]),
            ("right_ankle", 5, [0.0, -0.4, 0.0]),
            ("spine3", 6, [0.0, 0.05, 0.0]),
            ("left_foot", 7, [0.0, -0.05, 0.12]),
            ("right_foot", 8, [0.0, -0.05, 0.12]),
            ("neck", 9, [0.0, 0.21, 0.0]),
            ("left_collar", 9, [0.07, 0.12, 0.0]),
            ("right_collar", 9, [-0.07, 0.12, 0.0]),
            ("head", 12, [0.0, 0.09, 0.0]),
            ("left_shoulder", 13, [0.11, 0.03, 0.0]),
            ("right_shoulder", 14, [-0.11, 0.03, 0.0]),
            ("left_elbow", 16, [0.26, 0.0, 0.0]),
            ("right_elbow", 17, [-0.26, 0.0, 0.0]),
            ("left_wrist", 18, [0.25, 0.0, 0.0]),
            ("right_wrist", 19, [-0.25, 0.0, 0.0]),
            ("left_hand", 20, [0.08, 0.0, 0.0]),
            ("right_hand", 21, [-0.08, 0.0, 0.0]),
        ];
        let joints: Vec<JointSpec> = TREE
            .iter()
            .map(|(name, parent, offset)| JointSpec {
                name: name.to_string(),
                parent: usize::try_from(*parent).ok(),
                offset: *offset,
            })
            .collect();
        let parts = (0..joints.len())
            .map(|j| {
                let child = joints.iter().position(|c| c.parent == Some(j));
                let (axis, length) = match child {
                    Some(c) => {
                        let o = Vec3::from_array(joints[c].offset);
                        let len = o.norm();
                        (o.scale(1.0 / len).to_array(), len * 0.8)
                    }
                    None => ([0.0, -1.0, 0.0], 0.02),
                };
                CapsulePart {
                    name: joints[j].name.clone(),
                    joint: j,
                    start: [0.0; 3],
                    axis,
                    length,
                    radius: if j == 15 { 0.09 } else { 0.045 },
                    segments: 8,
                }
            })
            .collect();
        Self::new("smpl_like", joints, parts).expect("static tree is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Skeleton =
            toml::from_str(text).map_err(|e| Error::Format(format!("skeleton config: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("skeleton serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::invalid("skeleton has no joints"));
        }
        for (j, joint) in self.joints.iter().enumerate() {
            match (j, joint.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(Error::invalid("joint 0 must not have a parent")),
                (_, None) => return Err(Error::invalid(format!("joint {j} has no parent"))),
                (_, Some(p)) if p >= j => {
                    return Err(Error::invalid(format!(
                        "joint {j} has parent {p}; joints must be topologically ordered"
                    )))
                }
                _ => {}
            }
            if joint.offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("joint {j} offset is not finite")));
            }
        }
        if self.parts.is_empty() || self.parts.len() > self.joints.len() {
            return Err(Error::invalid(format!(
                "part count {} must be in 1..={}",
                self.parts.len(),
                self.joints.len()
            )));
        }
        for (r, part) in self.parts.iter().enumerate() {
            if part.joint >= self.joints.len() {
                return Err(Error::invalid(format!("part {r} references joint {}", part.joint)));
            }
            if !(part.radius > 0.0) {
                return Err(Error::invalid(format!("part {r} radius must be > 0")));
            }
            if !(part.length >= 0.0) || part.segments < 3 {
                return Err(Error::invalid(format!("part {r} has a degenerate capsule")));
            }
            if Vec3::from_array(part.axis).normalized().is_none() {
                return Err(Error::invalid(format!("part {r} axis is zero")));
            }
        }
        Ok(())
    }
}

/// Per-joint axis-angle rotations plus a root translation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseVector<T> {
    pub rotations: Vec<Vec3<T>>,
    pub root_translation: Vec3<T>,
}

impl<T: Scalar> PoseVector<T> {
    pub fn rest(joints: usize) -> Self {
        Self {
            rotations: vec![Vec3::zero(); joints],
            root_translation: Vec3::zero(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.len()
    }

    /// Rotations flattened to `J*3` values, joint-major.
    pub fn flat_rotations(&self) -> Vec<T> {
        self.rotations.iter().flat_map(|r| r.to_array()).collect()
    }

    pub fn from_flat(rotations: &[T], root_translation: Vec3<T>) -> Result<Self> {
        if rotations.len() % 3 != 0 {
            return Err(Error::invalid(format!(
                "flat rotation length {} is not a multiple of 3",
                rotations.len()
            )));
        }
        Ok(Self {
            rotations: rotations
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
            root_translation,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.root_translation.is_finite() && self.rotations.iter().all(|r| r.is_finite())
    }

    /// Wraps every rotation angle into `[-pi, pi]` without changing the rotation.
    pub fn canonicalize(&mut self) {
        let two_pi = T::PI() + T::PI();
        for r in &mut self.rotations {
            let theta = r.norm();
            if theta <= T::PI() {
                continue;
            }
            let wrapped = theta - two_pi * (theta / two_pi).round();
            *r = r.scale(wrapped / theta);
        }
    }

    pub fn cast<U: Scalar>(&self) -> PoseVector<U> {
        PoseVector {
            rotations: self.rotations.iter().map(|r| r.cast()).collect(),
            root_translation: self.root_translation.cast(),
        }
    }
}

/// World transforms of every joint.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTransforms<T>(pub Vec<Rigid<T>>);

impl<T: Scalar> JointTransforms<T> {
    pub fn positions(&self) -> Vec<Vec3<T>> {
        self.0.iter().map(|t| t.translation).collect()
    }
}

pub fn forward_kinematics<T: Scalar>(skeleton: &Skeleton, pose: &PoseVector<T>) -> Result<JointTransforms<T>> {
    if pose.joint_count() != skeleton.joint_count() {
        return Err(Error::invalid(format!(
            "pose has {} rotations, skeleton has {} joints",
            pose.joint_count(),
            skeleton.joint_count()
        )));
    }
    let mut out: Vec<Rigid<T>> = Vec::with_capacity(skeleton.joint_count());
    for (j, joint) in skeleton.joints.iter().enumerate() {
        let offset = Vec3::from_array(joint.offset).cast::<T>();
        let local = Rigid::new(Mat3::from_axis_angle(pose.rotations[j]), offset);
        let world = match joint.parent {
            Some(p) => out[p].compose(&local),
            None => Rigid::translation(pose.root_translation).compose(&local),
        };
        out.push(world);
    }
    Ok(JointTransforms(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyMesh<T> {
    pub vertices: Vec<Vec3<T>>,
    pub faces: Vec<[usize; 3]>,
    pub vertex_normals: Vec<Vec3<T>>,
    pub vertex_parts: Vec<usize>,
    pub face_parts: Vec<usize>,
    /// Vertices whose accumulated normal vanished and were set to +z.
    pub flagged_normals: usize,
}

impl<T: Scalar> BodyMesh<T> {
    /// ASCII OBJ with a `# part <r>` comment before each face.
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for n in &self.vertex_normals {
            let _ = writeln!(s, "vn {} {} {}", n.x, n.y, n.z);
        }
        for (f, part) in self.faces.iter().zip(&self.face_parts) {
            let _ = writeln!(s, "# part {part}");
            let _ = writeln!(
                s,
                "f {a}//{a} {b}//{b} {c}//{c}",
                a = f[0] + 1,
                b = f[1] + 1,
                c = f[2] + 1
            );
        }
        s
    }
}

/// Capsule surface in the joint's local frame. Rings run from the `-axis`
/// pole to the `+axis` pole; the cylinder carries an extra middle ring.
pub(crate) fn capsule_geometry<T: Scalar>(part: &CapsulePart) -> (Vec<Vec3<T>>, Vec<[usize; 3]>) {
    let axis = Vec3::from_array(part.axis).normalized().expect("validated axis");
    let helper = if axis.x.abs() < 0.9 {
        Vec3::new(1.0, 0.0, 0.0)
    } else {
        Vec3::new(0.0, 1.0, 0.0)
    };
    let u = helper.cross(axis).normalized().expect("non-parallel helper");
    let v = axis.cross(u);
    let start = Vec3::from_array(part.start);
    let end = start + axis.scale(part.length);
    let (r, seg) = (part.radius, part.segments);
    let cap_rings = (seg / 4).max(2);

    // (center, radius) per ring, bottom to top.
    let mut rings: Vec<(Vec3<f64>, f64)> = Vec::new();
    for k in 1..=cap_rings {
        let phi = std::f64::consts::FRAC_PI_2 * k as f64 / cap_rings as f64;
        rings.push((start - axis.scale(r * phi.cos()), r * phi.sin()));
    }
    rings.push((start + axis.scale(part.length * 0.5), r));
    for k in (1..=cap_rings).rev() {
        let phi = std::f64::consts::FRAC_PI_2 * k as f64 / cap_rings as f64;
        rings.push((end + axis.scale(r * phi.cos()), r * phi.sin()));
    }

    let mut verts: Vec<Vec3<f64>> = Vec::with_capacity(2 + rings.len() * seg);
    verts.push(start - axis.scale(r));
    for (center, radius) in &rings {
        for j in 0..seg {
            let theta = std::f64::consts::TAU * j as f64 / seg as f64;
            let dir = u.scale(theta.cos()) + v.scale(theta.sin());
            verts.push(*center + dir.scale(*radius));
        }
    }
    verts.push(end + axis.scale(r));
    let top = verts.len() - 1;
    let ring_at = |i: usize, j: usize| 1 + i * seg + (j % seg);

    let mut faces = Vec::with_capacity(2 * seg * rings.len());
    for j in 0..seg {
        faces.push([0, ring_at(0, j + 1), ring_at(0, j)]);
    }
    for i in 0..rings.len() - 1 {
        for j in 0..seg {
            faces.push([ring_at(i, j), ring_at(i, j + 1), ring_at(i + 1, j + 1)]);
            faces.push([ring_at(i, j), ring_at(i + 1, j + 1), ring_at(i + 1, j)]);
        }
    }
    let last = rings.len() - 1;
    for j in 0..seg {
        faces.push([top, ring_at(last, j), ring_at(last, j + 1)]);
    }
    (verts.into_iter().map(|p| p.cast()).collect(), faces)
}

pub fn skin_mesh<T: Scalar>(skeleton: &Skeleton, transforms: &JointTransforms<T>) -> Result<BodyMesh<T>> {
    if transforms.0.len() != skeleton.joint_count() {
        return Err(Error::invalid(format!(
            "{} transforms for {} joints",
            transforms.0.len(),
            skeleton.joint_count()
        )));
    }
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut vertex_parts = Vec::new();
    let mut face_parts = Vec::new();
    for (r, part) in skeleton.parts.iter().enumerate() {
        let (local, local_faces) = capsule_geometry::<T>(part);
        let xf = &transforms.0[part.joint];
        let base = vertices.len();
        vertices.extend(local.iter().map(|p| xf.apply_point(*p)));
        vertex_parts.extend(std::iter::repeat(r).take(local.len()));
        faces.extend(local_faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        face_parts.extend(std::iter::repeat(r).take(local_faces.len()));
    }
    let (vertex_normals, flagged_normals) = vertex_normals(&vertices, &faces)?;
    Ok(BodyMesh {
        vertices,
        faces,
        vertex_normals,
        vertex_parts,
        face_parts,
        flagged_normals,
    })
}

/// Area-weighted vertex normals. Returns the normals and the number of
/// vertices whose accumulated normal vanished (those are set to +z).
pub fn vertex_normals<T: Scalar>(vertices: &[Vec3<T>], faces: &[[usize; 3]]) -> Result<(Vec<Vec3<T>>, usize)> {
    let mut acc = vec![Vec3::<T>::zero(); vertices.len()];
    for (fi, f) in faces.iter().enumerate() {
        if f.iter().any(|&i| i >= vertices.len()) {
            return Err(Error::invalid(format!("face {fi} references a missing vertex")));
        }
        let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        // |cross| is twice the area, so summing raw cross products weights by area.
        let n = (b - a).cross(c - a);
        for &i in f {
            acc[i] = acc[i] + n;
        }
    }
    let mut flagged = 0;
    let normals = acc
        .into_iter()
        .map(|n| {
            n.normalized().unwrap_or_else(|| {
                flagged += 1;
                Vec3::new(T::zero(), T::zero(), T::one())
            })
        })
        .collect();
    Ok((normals, flagged))
}
