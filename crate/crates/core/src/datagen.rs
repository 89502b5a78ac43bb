//! Procedural (condition, motion, motion-frame video, RGB video) records and
//! the CMVD container they are stored in.
//!
//! Every family drives a fixed set of joints about fixed axes with one shared
//! profile `g(t) = sin(wt) + c2 sin(2wt) + c3 sin(3wt)`, so sequences start at
//! the rest pose and the direction of motion identifies the family.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, skin_mesh, PoseVector, Skeleton};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::motioncodec::{build_palette, PartPalette};
use crate::raster::{rasterize_motion_frame, render_shaded_frame, Camera, Frame, MotionFrame};
use crate::tensorad::Tensor;

pub const MAGIC: &[u8; 4] = b"CMVD";
pub const VERSION: u32 = 1;

/// Largest allowed per-frame change of any joint angle (radians).
pub const MAX_STEP: f64 = 0.2;
/// Frames covering less than this fraction of the image trigger a retry.
pub const MIN_COVERAGE: f64 = 0.01;
pub const MAX_RETRIES: u32 = 3;
pub const MAX_FAMILIES: usize = 16;

const HARMONIC: f64 = 0.1;
const LIGHT_DIR: [f64; 3] = [-0.3, -0.4, -1.0];
const SKIN: [f64; 3] = [0.9, 0.72, 0.6];
const SHIRTS: [[f64; 3]; 4] = [[0.8, 0.2, 0.2], [0.2, 0.5, 0.8], [0.2, 0.7, 0.3], [0.85, 0.75, 0.2]];
const PANTS: [[f64; 3]; 4] = [[0.2, 0.2, 0.5], [0.3, 0.3, 0.3], [0.5, 0.35, 0.2], [0.1, 0.4, 0.4]];
pub const ALBEDO_PALETTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Wave,
    Squat,
    Twist,
    Lean,
    March,
    Reach,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Wave,
        Family::Squat,
        Family::Twist,
        Family::Lean,
        Family::March,
        Family::Reach,
    ];

    /// Condition token of the family.
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no motion family with id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Wave => "wave",
            Family::Squat => "squat",
            Family::Twist => "twist",
            Family::Lean => "lean",
            Family::March => "march",
            Family::Reach => "reach",
        }
    }

    /// (joint name, rotation axis, weight in radians).
    pub fn drives(self) -> &'static [(&'static str, usize, f64)] {
        const X: usize = 0;
        const Y: usize = 1;
        const Z: usize = 2;
        match self {
            Family::Wave => &[("left_arm", Z, 0.9), ("right_arm", Z, -0.45)],
            Family::Squat => &[("left_leg", X, -0.6), ("right_leg", X, -0.6), ("abdomen", X, 0.4)],
            Family::Twist => &[("abdomen", Y, 0.6), ("chest", Y, 0.5)],
            Family::Lean => &[("abdomen", Z, 0.6), ("chest", Z, 0.4)],
            Family::March => &[
                ("left_leg", X, -0.7),
                ("right_leg", X, 0.7),
                ("left_arm", X, 0.35),
                ("right_arm", X, -0.35),
            ],
            Family::Reach => &[("left_arm", X, -0.9), ("right_arm", X, -0.9), ("chest", X, 0.25)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub family: Family,
    pub frames: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Range of the amplitude multiplier applied to the family weights.
    #[serde(default = "default_amplitude")]
    pub amplitude: [f64; 2],
    /// Range of the base frequency in Hz.
    #[serde(default = "default_frequency")]
    pub frequency: [f64; 2],
    pub seed: u64,
}

fn default_fps() -> f64 {
    16.0
}

fn default_amplitude() -> [f64; 2] {
    [0.8, 1.2]
}

fn default_frequency() -> [f64; 2] {
    [0.4, 0.6]
}

impl SequenceSpec {
    pub fn new(family: Family, frames: usize, seed: u64) -> Self {
        Self {
            family,
            frames,
            fps: default_fps(),
            amplitude: default_amplitude(),
            frequency: default_frequency(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(5..=81).contains(&self.frames) || self.frames % 4 != 1 {
            return Err(Error::invalid(format!(
                "frame count {} must satisfy 5 <= F <= 81 and F = 1 mod 4",
                self.frames
            )));
        }
        if self.family.id() >= MAX_FAMILIES {
            return Err(Error::invalid("family id exceeds the vocabulary"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && 0.0 <= r[0] && r[0] <= r[1];
        if !ordered(self.amplitude) || !ordered(self.frequency) {
            return Err(Error::invalid("amplitude and frequency ranges must be ordered and non-negative"));
        }
        Ok(())
    }
}

/// Seeded motion parameters of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub amplitude: f64,
    pub omega: f64,
    pub harmonics: [f64; 2],
}

impl Profile {
    fn draw(spec: &SequenceSpec, rng: &mut ChaCha8Rng) -> Self {
        let uniform = |rng: &mut ChaCha8Rng, r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.gen::<f64>();
        let amplitude = uniform(rng, spec.amplitude);
        let omega = 2.0 * std::f64::consts::PI * uniform(rng, spec.frequency);
        let harmonics = [rng.gen_range(-HARMONIC..=HARMONIC), rng.gen_range(-HARMONIC..=HARMONIC)];
        Self {
            amplitude,
            omega,
            harmonics,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        let w = self.omega;
        self.amplitude
            * ((w * t).sin() + self.harmonics[0] * (2.0 * w * t).sin() + self.harmonics[1] * (3.0 * w * t).sin())
    }

    /// Upper bound of `|g(t + dt) - g(t)|` per unit weight.
    pub fn step_bound(&self, dt: f64) -> f64 {
        self.amplitude
            * self.omega
            * dt
            * (1.0 + 2.0 * self.harmonics[0].abs() + 3.0 * self.harmonics[1].abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletRecord {
    pub spec: SequenceSpec,
    pub profile: Profile,
    pub retries: u32,
    pub camera: Camera,
    pub albedo_palette: usize,
    /// `[F, J*3]` axis-angle rotations.
    pub poses: Tensor<f32>,
    /// `[F, 3]` root translations.
    pub roots: Tensor<f32>,
    /// `[F, H, W, 3]` encoded motion frames.
    pub motion: Tensor<f32>,
    /// `[F, H, W]`, 1 where the body covers the pixel.
    pub coverage: Tensor<f32>,
    /// `[F, H, W, 3]` shaded frames.
    pub rgb: Tensor<f32>,
}

impl TripletRecord {
    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    pub fn condition(&self) -> usize {
        self.spec.family.id()
    }

    pub fn pose(&self, i: usize) -> PoseVector<f64> {
        let j3 = self.poses.shape()[1];
        let rot: Vec<f64> = self.poses.data()[i * j3..(i + 1) * j3].iter().map(|&v| f64::from(v)).collect();
        let r = &self.roots.data()[i * 3..i * 3 + 3];
        PoseVector::from_flat(&rot, Vec3::new(r[0].into(), r[1].into(), r[2].into())).expect("stored poses are J*3")
    }

    pub fn motion_frame(&self, i: usize) -> MotionFrame<f32> {
        let (h, w) = (self.camera.height, self.camera.width);
        let px = h * w;
        MotionFrame {
            frame: Frame {
                height: h,
                width: w,
                data: self.motion.data()[i * px * 3..(i + 1) * px * 3].to_vec(),
            },
            coverage: self.coverage.data()[i * px..(i + 1) * px].iter().map(|&c| c > 0.5).collect(),
        }
    }

    pub fn rgb_frame(&self, i: usize) -> Frame<f32> {
        let px = self.camera.height * self.camera.width * 3;
        Frame {
            height: self.camera.height,
            width: self.camera.width,
            data: self.rgb.data()[i * px..(i + 1) * px].to_vec(),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor<f32>); 5] {
        [
            ("poses", &self.poses),
            ("roots", &self.roots),
            ("motion", &self.motion),
            ("coverage", &self.coverage),
            ("rgb", &self.rgb),
        ]
    }
}

pub fn albedos(palette: usize) -> Vec<[f64; 3]> {
    let shirt = SHIRTS[palette % SHIRTS.len()];
    let pants = PANTS[palette % PANTS.len()];
    // pelvis, abdomen, chest, head, left/right arm, left/right leg
    vec![pants, shirt, shirt, SKIN, shirt, shirt, pants, pants]
}

/// Renders records for a fixed skeleton, camera and palette.
#[derive(Debug, Clone)]
pub struct Generator {
    pub skeleton: Skeleton,
    pub palette: PartPalette,
    pub camera: Camera,
}

impl Generator {
    /// Toy 8-joint body seen by the frontal camera.
    pub fn new(height: usize, width: usize) -> Result<Self> {
        let skeleton = Skeleton::toy8();
        let palette = build_palette(skeleton.part_count())?;
        Ok(Self {
            skeleton,
            palette,
            camera: Camera::frontal(height, width)?,
        })
    }

    /// Joint rotations of every frame for a given profile.
    pub fn trajectory(&self, spec: &SequenceSpec, profile: &Profile) -> Result<Vec<PoseVector<f64>>> {
        let drives = spec
            .family
            .drives()
            .iter()
            .map(|&(name, axis, weight)| {
                self.skeleton
                    .joint_index(name)
                    .map(|j| (j, axis, weight))
                    .ok_or_else(|| Error::invalid(format!("skeleton has no joint `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((0..spec.frames)
            .map(|i| {
                let g = profile.value(i as f64 / spec.fps);
                let mut pose = PoseVector::rest(self.skeleton.joint_count());
                for &(j, axis, weight) in &drives {
                    let mut r = pose.rotations[j].to_array();
                    r[axis] += weight * g;
                    pose.rotations[j] = Vec3::from_array(r);
                }
                pose
            })
            .collect())
    }

    pub fn generate(&self, spec: &SequenceSpec) -> Result<TripletRecord> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut profile = Profile::draw(spec, &mut rng);
        let albedo_palette = rng.gen_range(0..ALBEDO_PALETTES);
        let max_weight = spec.family.drives().iter().map(|d| d.2.abs()).fold(0.0, f64::max);
        let bound = profile.step_bound(1.0 / spec.fps) * max_weight;
        if bound > MAX_STEP {
            profile.amplitude *= MAX_STEP / bound;
        }
        let mut retries = 0;
        loop {
            match self.render(spec, &profile, albedo_palette)? {
                Some(mut rec) => {
                    rec.retries = retries;
                    return Ok(rec);
                }
                None if retries < MAX_RETRIES => {
                    retries += 1;
                    profile.amplitude *= 0.5;
                }
                None => {
                    return Err(Error::invalid(format!(
                        "sequence {:?} seed {} stays below {MIN_COVERAGE} coverage after {MAX_RETRIES} retries",
                        spec.family, spec.seed
                    )))
                }
            }
        }
    }

    /// `None` when some frame is nearly empty.
    fn render(&self, spec: &SequenceSpec, profile: &Profile, albedo_palette: usize) -> Result<Option<TripletRecord>> {
        let (f, h, w) = (spec.frames, self.camera.height, self.camera.width);
        let j3 = self.skeleton.joint_count() * 3;
        let albedo = albedos(albedo_palette);
        let light = Vec3::from_array(LIGHT_DIR);
        let mut poses = Vec::with_capacity(f * j3);
        let mut roots = Vec::with_capacity(f * 3);
        let mut motion = Vec::with_capacity(f * h * w * 3);
        let mut coverage = Vec::with_capacity(f * h * w);
        let mut rgb = Vec::with_capacity(f * h * w * 3);
        for pose in self.trajectory(spec, profile)? {
            let mesh = skin_mesh(&self.skeleton, &forward_kinematics(&self.skeleton, &pose)?)?;
            let mf = rasterize_motion_frame(&mesh, &self.camera, &self.palette);
            if mf.coverage_ratio() < MIN_COVERAGE {
                return Ok(None);
            }
            let shaded = render_shaded_frame(&mesh, &self.camera, light, &albedo)?;
            poses.extend(pose.flat_rotations().iter().map(|&v| v as f32));
            roots.extend(pose.root_translation.to_array().iter().map(|&v| v as f32));
            motion.extend(mf.frame.data.iter().map(|&v| v as f32));
            coverage.extend(mf.coverage.iter().map(|&c| if c { 1.0f32 } else { 0.0 }));
            rgb.extend(shaded.data.iter().map(|&v| v as f32));
        }
        Ok(Some(TripletRecord {
            spec: spec.clone(),
            profile: *profile,
            retries: 0,
            camera: self.camera.clone(),
            albedo_palette,
            poses: Tensor::new(vec![f, j3], poses)?,
            roots: Tensor::new(vec![f, 3], roots)?,
            motion: Tensor::new(vec![f, h, w, 3], motion)?,
            coverage: Tensor::new(vec![f, h, w], coverage)?,
            rgb: Tensor::new(vec![f, h, w, 3], rgb)?,
        }))
    }
}

/// Deterministic seed for item `index` of `stream`; streams never share seeds.
pub fn derive_seed(base: u64, split: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(split);
    rng.set_word_pos(u128::from(index) * 2);
    rng.gen()
}

pub const TRAIN_SPLIT: u64 = 1;
pub const HELDOUT_SPLIT: u64 = 2;

/// Family `i % 6` for record `i`, seeds from `derive_seed(base, split, i)`.
pub fn generate_split(
    gen: &Generator,
    base_seed: u64,
    split: u64,
    count: usize,
    frames: usize,
) -> Result<Dataset> {
    let records = (0..count)
        .map(|i| {
            let family = Family::ALL[i % Family::ALL.len()];
            gen.generate(&SequenceSpec::new(family, frames, derive_seed(base_seed, split, i as u64)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        skeleton: gen.skeleton.clone(),
        palette: gen.palette.clone(),
        records,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub palette: PartPalette,
    pub records: Vec<TripletRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    spec: SequenceSpec,
    profile: Profile,
    retries: u32,
    camera: Camera,
    albedo_palette: usize,
    /// Byte offset into the payload.
    offset: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    skeleton: Skeleton,
    palette: PartPalette,
    records: Vec<IndexEntry>,
}

const RECORD_TENSORS: [&str; 5] = ["poses", "roots", "motion", "coverage", "rgb"];

impl Dataset {
    /// Layout: `CMVD`, u32 version, u64 header length, JSON header (skeleton,
    /// palette, record index), then every record's tensors as raw LE f32 in
    /// index order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut index = Vec::with_capacity(self.records.len());
        for r in &self.records {
            index.push(IndexEntry {
                spec: r.spec.clone(),
                profile: r.profile,
                retries: r.retries,
                camera: r.camera.clone(),
                albedo_palette: r.albedo_palette,
                offset,
                tensors: r
                    .tensors()
                    .iter()
                    .map(|(n, t)| TensorEntry {
                        name: n.to_string(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
            });
            offset += r.tensors().iter().map(|(_, t)| t.len() as u64 * 4).sum::<u64>();
        }
        let header = Header {
            skeleton: self.skeleton.clone(),
            palette: self.palette.clone(),
            records: index,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for r in &self.records {
            for (_, t) in r.tensors() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a CMVD dataset (bad magic)".into()));
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated("dataset header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncated("dataset header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut expected = 0u64;
        let mut records = Vec::with_capacity(header.records.len());
        for (i, entry) in header.records.into_iter().enumerate() {
            if entry.offset != expected {
                return Err(Error::Index(format!(
                    "record {i} starts at byte {} but the previous record ends at {expected}",
                    entry.offset
                )));
            }
            let names: Vec<&str> = entry.tensors.iter().map(|t| t.name.as_str()).collect();
            if names != RECORD_TENSORS {
                return Err(Error::Index(format!("record {i} lists tensors {names:?}")));
            }
            let mut cursor = entry.offset as usize;
            let mut tensors = Vec::with_capacity(RECORD_TENSORS.len());
            for t in &entry.tensors {
                let n: usize = t.shape.iter().product();
                let end = cursor + n * 4;
                if end > payload.len() {
                    return Err(Error::Truncated(format!(
                        "record {i} tensor `{}` needs bytes {cursor}..{end} of a {}-byte payload",
                        t.name,
                        payload.len()
                    )));
                }
                let data = payload[cursor..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                tensors.push(Tensor::new(t.shape.clone(), data)?);
                cursor = end;
            }
            expected = cursor as u64;
            let [poses, roots, motion, coverage, rgb]: [Tensor<f32>; 5] =
                tensors.try_into().expect("five tensors");
            records.push(TripletRecord {
                spec: entry.spec,
                profile: entry.profile,
                retries: entry.retries,
                camera: entry.camera,
                albedo_palette: entry.albedo_palette,
                poses,
                roots,
                motion,
                coverage,
                rgb,
            });
        }
        if expected as usize != payload.len() {
            return Err(Error::Index(format!(
                "index covers {expected} payload bytes, file has {}",
                payload.len()
            )));
        }
        Ok(Self {
            skeleton: header.skeleton,
            palette: header.palette,
            records,
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("cmvd.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motioncodec::MotionEncoding;

    fn gen() -> Generator {
        Generator::new(64, 64).unwrap()
    }

    #[test]
    fn same_spec_gives_identical_bytes() {
        let g = gen();
        let spec = SequenceSpec::new(Family::March, 9, 77);
        let a = g.generate(&spec).unwrap();
        let b = g.generate(&spec).unwrap();
        let ds = |r: TripletRecord| Dataset {
            skeleton: g.skeleton.clone(),
            palette: g.palette.clone(),
            records: vec![r],
        };
        assert_eq!(ds(a).to_bytes().unwrap(), ds(b).to_bytes().unwrap());
    }

    #[test]
    fn zero_amplitude_stays_at_rest() {
        let g = gen();
        let mut spec = SequenceSpec::new(Family::Reach, 9, 3);
        spec.amplitude = [0.0, 0.0];
        let r = g.generate(&spec).unwrap();
        assert!(r.poses.data().iter().all(|&v| v == 0.0));
        let px = r.motion.len() / 9;
        for i in 1..9 {
            assert_eq!(r.motion.data()[i * px..(i + 1) * px], r.motion.data()[..px]);
            assert_eq!(r.rgb.data()[i * px..(i + 1) * px], r.rgb.data()[..px]);
        }
    }

    #[test]
    fn wave_moves_only_the_arms() {
        let g = gen();
        let arms = [g.skeleton.joint_index("left_arm").unwrap(), g.skeleton.joint_index("right_arm").unwrap()];
        for seed in 0..5 {
            let r = g.generate(&SequenceSpec::new(Family::Wave, 17, seed)).unwrap();
            let mut arm_motion = 0.0f64;
            for i in 0..17 {
                let p = r.pose(i);
                for (j, rot) in p.rotations.iter().enumerate() {
                    if arms.contains(&j) {
                        arm_motion = arm_motion.max(rot.norm());
                    } else {
                        assert_eq!(rot.to_array(), [0.0; 3], "joint {j} frame {i}");
                    }
                }
            }
            assert!(arm_motion > 0.1);
        }
    }

    #[test]
    fn first_pose_matches_first_frame() {
        let g = gen();
        let r = g.generate(&SequenceSpec::new(Family::Lean, 9, 5)).unwrap();
        let mesh = skin_mesh(&g.skeleton, &forward_kinematics(&g.skeleton, &r.pose(0)).unwrap()).unwrap();
        let mf = rasterize_motion_frame(&mesh, &g.camera, &g.palette).cast::<f32>();
        assert_eq!(mf, r.motion_frame(0));
    }

    #[test]
    fn every_foreground_pixel_decodes_to_its_part() {
        let g = gen();
        for family in Family::ALL {
            let r = g.generate(&SequenceSpec::new(family, 17, 11)).unwrap();
            for i in 0..17 {
                let pose = r.pose(i);
                let mesh = skin_mesh(&g.skeleton, &forward_kinematics(&g.skeleton, &pose).unwrap()).unwrap();
                let frags = crate::raster::rasterize_fragments(&mesh, &g.camera);
                let mf = r.motion_frame(i);
                for (p, face) in frags.face.iter().enumerate() {
                    let (y, x) = (p / 64, p % 64);
                    let label = MotionEncoding::Full.classify(mf.color(y, x), &g.palette);
                    match face {
                        Some(fi) => assert_eq!(label, Some(mesh.face_parts[*fi]), "{family:?} frame {i} px {p}"),
                        None => assert!(!mf.coverage[p]),
                    }
                }
            }
        }
    }

    #[test]
    fn families_are_separable_by_nearest_centroid() {
        let g = gen();
        let seqs = |split: u64| -> Vec<(usize, Vec<f64>)> {
            (0..60)
                .map(|i| {
                    let family = Family::ALL[i % 6];
                    let spec = SequenceSpec::new(family, 17, derive_seed(9, split, i as u64));
                    let profile = Profile::draw(&spec, &mut ChaCha8Rng::seed_from_u64(spec.seed));
                    let poses = g.trajectory(&spec, &profile).unwrap();
                    (family.id(), poses.iter().flat_map(|p| p.flat_rotations()).collect())
                })
                .collect()
        };
        let train = seqs(TRAIN_SPLIT);
        let dim = train[0].1.len();
        let mut centroids = vec![vec![0.0; dim]; 6];
        for (c, x) in &train {
            for (a, v) in centroids[*c].iter_mut().zip(x) {
                *a += v / 10.0;
            }
        }
        let test = seqs(HELDOUT_SPLIT);
        let correct = test
            .iter()
            .filter(|(c, x)| {
                let d = |m: &Vec<f64>| m.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..6).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
                best == *c
            })
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.95, "{correct}/60");
    }

    #[test]
    fn per_frame_angle_change_is_bounded() {
        let g = gen();
        for (i, family) in Family::ALL.iter().cycle().take(60).enumerate() {
            let mut spec = SequenceSpec::new(*family, 81, i as u64);
            spec.amplitude = [1.2, 1.2];
            spec.frequency = [0.6, 0.6];
            let mut profile = Profile::draw(&spec, &mut ChaCha8Rng::seed_from_u64(spec.seed));
            // same clamp as `generate`
            let w = family.drives().iter().map(|d| d.2.abs()).fold(0.0, f64::max);
            let b = profile.step_bound(1.0 / 16.0) * w;
            if b > MAX_STEP {
                profile.amplitude *= MAX_STEP / b;
            }
            let poses = g.trajectory(&spec, &profile).unwrap();
            for pair in poses.windows(2) {
                for (a, b) in pair[0].rotations.iter().zip(&pair[1].rotations) {
                    assert!((*b - *a).norm() <= MAX_STEP + 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let g = gen();
        for frames in [4, 6, 85] {
            assert!(g.generate(&SequenceSpec::new(Family::Wave, frames, 0)).is_err());
        }
        let mut s = SequenceSpec::new(Family::Wave, 9, 0);
        s.frequency = [0.9, 0.1];
        assert!(g.generate(&s).is_err());
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let a: std::collections::HashSet<u64> = (0..512).map(|i| derive_seed(1, TRAIN_SPLIT, i)).collect();
        assert_eq!(a.len(), 512);
        assert!((0..64).all(|i| !a.contains(&derive_seed(1, HELDOUT_SPLIT, i))));
    }

    fn small_dataset(n: usize) -> Dataset {
        generate_split(&gen(), 4, TRAIN_SPLIT, n, 5).unwrap()
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let ds = small_dataset(8);
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert!(back == ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cmvd");
        ds.write(&path).unwrap();
        assert!(Dataset::read(&path).unwrap() == ds);
    }

    #[test]
    fn container_errors_are_distinct() {
        let ds = small_dataset(3);
        let bytes = ds.to_bytes().unwrap();

        let cut = &bytes[..bytes.len() - 10];
        match Dataset::from_bytes(cut) {
            Err(Error::Truncated(msg)) => assert!(msg.contains("record 2"), "{msg}"),
            other => panic!("expected truncation, got {other:?}"),
        }

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Version { found: 9, .. })));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(Dataset::from_bytes(&long), Err(Error::Index(_))));

        // shift record 1's offset in the header
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + json_len]).unwrap();
        let off = header["records"][1]["offset"].as_u64().unwrap();
        header["records"][1]["offset"] = (off + 4).into();
        let json = serde_json::to_vec(&header).unwrap();
        let mut shifted = bytes[..8].to_vec();
        shifted.extend_from_slice(&(json.len() as u64).to_le_bytes());
        shifted.extend_from_slice(&json);
        shifted.extend_from_slice(&bytes[16 + json_len..]);
        assert!(matches!(Dataset::from_bytes(&shifted), Err(Error::Index(_))));
    }
}
