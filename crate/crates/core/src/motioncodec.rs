//! Color encoding of a unit surface normal plus a body-part label into one RGB
//! triple, and its inverse.
//!
//! Blue and green carry the x and y normal components through the affine map
//! `(n + 1) / 2`. Red carries the part index and the sign of the z component:
//! part `r` facing the viewer (`n_z >= 0`) uses `red_list[2r]`, facing away
//! uses `red_list[2r + 1]`. Since `n_z = ±sqrt(1 - n_x² - n_y²)` the triple is
//! a lossless encoding of (normal, part).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scalar::Scalar;

/// Largest part count whose red candidates stay separable after 8-bit quantization.
pub const MAX_PARTS: usize = 32;

/// Tolerance on `n_x² + n_y²` before a decoded color is reported infeasible.
pub const INFEASIBLE_SLACK: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPalette {
    parts: usize,
    red_list: Vec<f64>,
}

impl PartPalette {
    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn red_list(&self) -> &[f64] {
        &self.red_list
    }

    /// Index of the candidate nearest to `red`; ties go to the lower index.
    pub fn nearest(&self, red: f64) -> usize {
        let i = self.red_list.partition_point(|&v| v < red);
        if i == 0 {
            return 0;
        }
        if i == self.red_list.len() {
            return i - 1;
        }
        if red - self.red_list[i - 1] <= self.red_list[i] - red {
            i - 1
        } else {
            i
        }
    }
}

/// `2R` red candidates spaced uniformly over `[0, 1]`.
pub fn build_palette(parts: usize) -> Result<PartPalette> {
    if !(1..=MAX_PARTS).contains(&parts) {
        return Err(Error::invalid(format!(
            "part count {parts} outside 1..={MAX_PARTS}; 8-bit decoding would be ambiguous"
        )));
    }
    let n = 2 * parts;
    let denom = (n - 1) as f64;
    Ok(PartPalette {
        parts,
        red_list: (0..n).map(|k| k as f64 / denom).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionColor<T> {
    pub red: T,
    pub green: T,
    pub blue: T,
}

impl<T: Scalar> MotionColor<T> {
    pub fn new(red: T, green: T, blue: T) -> Self {
        Self { red, green, blue }
    }

    pub fn background() -> Self {
        Self::default()
    }

    pub fn to_array(self) -> [T; 3] {
        [self.red, self.green, self.blue]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Round every channel to the nearest 8-bit level.
    pub fn quantize_u8(self) -> Self {
        let q = |v: T| (v.max(T::zero()).min(T::one()) * T::lit(255.0)).round() / T::lit(255.0);
        Self::new(q(self.red), q(self.green), q(self.blue))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedColor<T> {
    pub normal: Vec3<T>,
    pub part: usize,
    /// +1 when the red candidate is a front slot, -1 for a back slot.
    pub sign: i8,
    /// `n_x² + n_y²` exceeded `1 + INFEASIBLE_SLACK`; the normal was decoded with `n_z = 0`.
    pub infeasible: bool,
}

pub fn encode_color<T: Scalar>(vn: Vec3<T>, part: usize, palette: &PartPalette) -> Result<MotionColor<T>> {
    if (vn.norm() - T::one()).abs() > T::lit(1e-4) {
        return Err(Error::invalid(format!("normal {vn:?} is not unit length")));
    }
    if part >= palette.parts {
        return Err(Error::invalid(format!("part {part} outside palette of {}", palette.parts)));
    }
    Ok(encode_unchecked(vn, part, palette))
}

#[inline]
pub(crate) fn encode_unchecked<T: Scalar>(vn: Vec3<T>, part: usize, palette: &PartPalette) -> MotionColor<T> {
    let half = T::lit(0.5);
    // n_z == -0.0 compares >= 0 and takes the front slot.
    let slot = if vn.z >= T::zero() { 2 * part } else { 2 * part + 1 };
    MotionColor {
        red: T::lit(palette.red_list[slot]),
        green: (vn.y + T::one()) * half,
        blue: (vn.x + T::one()) * half,
    }
}

pub fn decode_color<T: Scalar>(c: MotionColor<T>, palette: &PartPalette) -> DecodedColor<T> {
    let two = T::lit(2.0);
    let nx = two * c.blue - T::one();
    let ny = two * c.green - T::one();
    let k = palette.nearest(c.red.to_f64_lossy());
    let sign: i8 = if k % 2 == 0 { 1 } else { -1 };
    let planar = nx * nx + ny * ny;
    let infeasible = planar > T::lit(1.0 + INFEASIBLE_SLACK);
    let nz = if infeasible {
        T::zero()
    } else {
        T::lit(f64::from(sign)) * (T::one() - planar).max(T::zero()).sqrt()
    };
    let raw = Vec3::new(nx, ny, nz);
    let normal = raw.normalized().unwrap_or(Vec3::new(T::zero(), T::zero(), T::one()));
    DecodedColor {
        normal,
        part: k / 2,
        sign,
        infeasible,
    }
}

/// Which factors of the representation a motion frame carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MotionEncoding {
    /// Normals in blue/green, part and sign in red.
    #[default]
    Full,
    /// Plain normal map: red carries `(n_z + 1) / 2`, no semantics.
    NormalOnly,
    /// Flat part colors: red is the front slot of the part, green = blue = 0.5.
    SemanticsOnly,
}

impl MotionEncoding {
    pub fn encode<T: Scalar>(self, vn: Vec3<T>, part: usize, palette: &PartPalette) -> MotionColor<T> {
        let half = T::lit(0.5);
        match self {
            MotionEncoding::Full => encode_unchecked(vn, part, palette),
            MotionEncoding::NormalOnly => MotionColor {
                red: (vn.z + T::one()) * half,
                green: (vn.y + T::one()) * half,
                blue: (vn.x + T::one()) * half,
            },
            MotionEncoding::SemanticsOnly => MotionColor {
                red: T::lit(palette.red_list[2 * part]),
                green: half,
                blue: half,
            },
        }
    }

    /// Foreground part label of a pixel, `None` for background.
    ///
    /// Encodings without semantics report every foreground pixel as part 0.
    pub fn classify<T: Scalar>(self, c: MotionColor<T>, palette: &PartPalette) -> Option<usize> {
        let d = decode_color(c, palette);
        if d.infeasible {
            return None;
        }
        match self {
            MotionEncoding::Full | MotionEncoding::SemanticsOnly => Some(d.part),
            MotionEncoding::NormalOnly => Some(0),
        }
    }
}

/// Re-express a full-encoding color in another encoding. Background stays background.
pub fn transcode<T: Scalar>(c: MotionColor<T>, palette: &PartPalette, target: MotionEncoding) -> MotionColor<T> {
    if target == MotionEncoding::Full {
        return c;
    }
    let d = decode_color(c, palette);
    if d.infeasible {
        return MotionColor::background();
    }
    target.encode(d.normal, d.part, palette)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn palette_construction() {
        assert_eq!(build_palette(1).unwrap().red_list(), &[0.0, 1.0]);
        let p = build_palette(24).unwrap();
        assert_eq!(p.red_list().len(), 48);
        assert_eq!(p.red_list()[6], 6.0 / 47.0);
        assert!(p.red_list().windows(2).all(|w| w[0] < w[1]));
        assert!(build_palette(33).is_err());
        assert!(build_palette(0).is_err());
        // Gap for the largest legal palette still exceeds the 8-bit bound.
        let p = build_palette(MAX_PARTS).unwrap();
        assert!(p.red_list()[1] - p.red_list()[0] > 4.0 / 255.0);
    }

    #[test]
    fn encode_examples() {
        let p = build_palette(24).unwrap();
        let c = encode_color(Vec3::new(0.0, 0.0, 1.0), 0, &p).unwrap();
        assert_eq!(c, MotionColor::new(0.0, 0.5, 0.5));
        let c = encode_color(Vec3::new(0.0, 0.0, -1.0), 0, &p).unwrap();
        assert_eq!(c, MotionColor::new(1.0 / 47.0, 0.5, 0.5));
        let c = encode_color(Vec3::new(0.6, 0.0, 0.8), 3, &p).unwrap();
        assert!((c.blue - 0.8f64).abs() < 1e-15);
        assert_eq!(c.green, 0.5);
        assert_eq!(c.red, 6.0 / 47.0);
        let d = decode_color(c, &p);
        assert_eq!((d.part, d.sign), (3, 1));
        assert!((d.normal - Vec3::new(0.6, 0.0, 0.8)).norm() < 1e-12);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let p = build_palette(8).unwrap();
        assert!(encode_color(Vec3::new(0.0, 0.0, 2.0), 0, &p).is_err());
        assert!(encode_color(Vec3::new(0.0, 0.0, 1.0), 8, &p).is_err());
    }

    #[test]
    fn zero_z_takes_front_slot() {
        let p = build_palette(4).unwrap();
        let c = encode_color(Vec3::new(1.0, 0.0, -0.0), 2, &p).unwrap();
        assert_eq!(c.red, p.red_list()[4]);
    }

    #[test]
    fn background_is_infeasible() {
        let p = build_palette(24).unwrap();
        assert!(decode_color(MotionColor::<f64>::background(), &p).infeasible);
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let p = build_palette(1).unwrap();
        assert_eq!(p.nearest(0.5), 0);
        assert_eq!(p.nearest(0.5000001), 1);
        assert_eq!(p.nearest(-3.0), 0);
        assert_eq!(p.nearest(7.0), 1);
    }

    #[test]
    fn transcode_variants() {
        let p = build_palette(8).unwrap();
        let n = Vec3::new(0.36, -0.48, 0.8);
        let full = encode_color(n, 5, &p).unwrap();
        let normal_only = transcode(full, &p, MotionEncoding::NormalOnly);
        assert!((normal_only.red - 0.9f64).abs() < 1e-12);
        assert_eq!(MotionEncoding::NormalOnly.classify(normal_only, &p), Some(0));
        let sem = transcode(full, &p, MotionEncoding::SemanticsOnly);
        assert_eq!(MotionEncoding::SemanticsOnly.classify(sem, &p), Some(5));
        assert_eq!(transcode(MotionColor::<f64>::background(), &p, MotionEncoding::SemanticsOnly), MotionColor::background());
    }

    fn unit(theta: f64, phi: f64) -> Vec3<f64> {
        Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
    }

    proptest! {
        #[test]
        fn exact_round_trip(theta in 0.0f64..std::f64::consts::PI, phi in 0.0f64..std::f64::consts::TAU, part in 0usize..24) {
            let n = unit(theta, phi);
            prop_assume!(n.z.abs() >= 1e-3);
            let p = build_palette(24).unwrap();
            let d = decode_color(encode_color(n, part, &p).unwrap(), &p);
            prop_assert!(!d.infeasible);
            prop_assert_eq!(d.part, part);
            prop_assert_eq!(d.sign, if n.z >= 0.0 { 1 } else { -1 });
            prop_assert!((d.normal - n).norm() < 1e-12);
            let planar = d.normal.x * d.normal.x + d.normal.y * d.normal.y;
            prop_assert!((d.normal.z.abs() - (1.0 - planar).max(0.0).sqrt()).abs() < 1e-6);
        }

        #[test]
        fn quantized_round_trip_keeps_labels(theta in 0.0f64..std::f64::consts::PI, phi in 0.0f64..std::f64::consts::TAU, part in 0usize..24) {
            let n = unit(theta, phi);
            prop_assume!(n.z.abs() >= 0.05);
            let p = build_palette(24).unwrap();
            let d = decode_color(encode_color(n, part, &p).unwrap().quantize_u8(), &p);
            prop_assert_eq!(d.part, part);
            prop_assert_eq!(d.sign, if n.z >= 0.0 { 1 } else { -1 });
            prop_assert!((d.normal.x - n.x).abs() <= 2.0 / 255.0);
            prop_assert!((d.normal.y - n.y).abs() <= 2.0 / 255.0);
        }
    }

    #[test]
    fn encode_is_injective_over_part_and_sign() {
        let p = build_palette(24).unwrap();
        let mut reds = Vec::new();
        for part in 0..24 {
            for z in [1.0, -1.0] {
                reds.push(encode_color(Vec3::new(0.0, 0.0, z), part, &p).unwrap().red);
            }
        }
        let mut sorted = reds.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 48);
    }
}
