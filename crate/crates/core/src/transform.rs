//! Image transform pipelines. A scenario is a named list of randomized
//! transforms, drawn fresh per example, used both as training augmentation
//! and as controlled distribution shifts at evaluation time.

use crate::error::{Error, Result};
use crate::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One randomized image transform. Strengths draw per-example factors from
/// `U(max(0, 1 - s), 1 + s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TransformSpec {
    /// Rotate about the image center by `U(-max_deg, max_deg)`, bilinear,
    /// zero fill outside the frame.
    Rotation { max_deg: f64 },
    /// Multiply all pixels by a drawn factor.
    Brightness { strength: f64 },
    /// Blend away from the per-image mean by a drawn factor.
    Contrast { strength: f64 },
    /// Blend away from the per-pixel channel mean by a drawn factor.
    /// A no-op below three channels.
    Saturation { strength: f64 },
    /// Crop a random square of side `U(min_frac, 1)` times the short side,
    /// then resize back to the full frame.
    CropResize { min_frac: f64 },
    /// Mirror columns with probability `p`.
    HFlip { p: f64 },
}

/// A named transform pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub transforms: Vec<TransformSpec>,
}

impl Scenario {
    /// No transforms at all.
    pub fn identity() -> Self {
        Scenario {
            name: "identity".to_string(),
            transforms: vec![],
        }
    }

    /// Training-time augmentation: mild crops and mirror flips. No
    /// rotation and no photometric changes.
    pub fn augment() -> Self {
        Scenario {
            name: "augment".to_string(),
            transforms: vec![
                TransformSpec::CropResize { min_frac: 0.8 },
                TransformSpec::HFlip { p: 0.5 },
            ],
        }
    }

    /// Mild held-out shift: small rotations plus weak photometric jitter.
    pub fn shift_mild() -> Self {
        Scenario {
            name: "shift-mild".to_string(),
            transforms: vec![
                TransformSpec::Rotation { max_deg: 15.0 },
                TransformSpec::Brightness { strength: 0.8 },
                TransformSpec::Contrast { strength: 0.8 },
                TransformSpec::Saturation { strength: 0.8 },
            ],
        }
    }

    /// Strong held-out shift: larger rotations plus harsh photometric
    /// jitter. Factors can reach zero, wiping an image to black.
    pub fn shift_strong() -> Self {
        Scenario {
            name: "shift-strong".to_string(),
            transforms: vec![
                TransformSpec::Rotation { max_deg: 20.0 },
                TransformSpec::Brightness { strength: 2.0 },
                TransformSpec::Contrast { strength: 2.0 },
                TransformSpec::Saturation { strength: 2.0 },
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Scenario> {
        match name {
            "identity" => Ok(Scenario::identity()),
            "augment" => Ok(Scenario::augment()),
            "shift-mild" => Ok(Scenario::shift_mild()),
            "shift-strong" => Ok(Scenario::shift_strong()),
            other => Err(Error::invalid(format!(
                "unknown scenario {other:?}, expected identity, augment, shift-mild or shift-strong"
            ))),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.transforms.is_empty()
    }
}

fn factor(rng: &mut ChaCha8Rng, strength: f64) -> f64 {
    let lo = (1.0 - strength).max(0.0);
    let hi = 1.0 + strength;
    rng.gen_range(lo..hi)
}

/// Bilinear sample with zero fill outside the frame.
fn bilinear_zero(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let at = |iy: i64, ix: i64| -> f64 {
        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
            img[iy as usize * w + ix as usize]
        } else {
            0.0
        }
    };
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1) * (1.0 - fy) * fx
        + at(y0 + 1, x0) * fy * (1.0 - fx)
        + at(y0 + 1, x0 + 1) * fy * fx
}

/// Bilinear sample clamped to the frame border.
fn bilinear_border(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    bilinear_zero(img, h, w, y, x)
}

fn rotate_channel(img: &[f64], h: usize, w: usize, deg: f64) -> Vec<f64> {
    if deg == 0.0 {
        return img.to_vec();
    }
    let rad = deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let sy = cy + cos * dy - sin * dx;
            let sx = cx + sin * dy + cos * dx;
            out[r * w + c] = bilinear_zero(img, h, w, sy, sx);
        }
    }
    out
}

fn crop_resize_channel(img: &[f64], h: usize, w: usize, top: f64, left: f64, side: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let sy = top + (r as f64 + 0.5) * side / h as f64 - 0.5;
            let sx = left + (c as f64 + 0.5) * side / w as f64 - 0.5;
            out[r * w + c] = bilinear_border(img, h, w, sy, sx);
        }
    }
    out
}

/// Applies one drawn transform to a single `[c, h, w]` example in place.
/// Parameter draws happen in a fixed order so results only depend on the
/// rng state, never on pixel values.
fn apply_drawn(ex: &mut [f64], c: usize, h: usize, w: usize, t: &TransformSpec, rng: &mut ChaCha8Rng) {
    let plane = h * w;
    match t {
        TransformSpec::Rotation { max_deg } => {
            let deg = rng.gen_range(-max_deg..*max_deg);
            for ch in 0..c {
                let img = &ex[ch * plane..(ch + 1) * plane];
                let rot = rotate_channel(img, h, w, deg);
                ex[ch * plane..(ch + 1) * plane].copy_from_slice(&rot);
            }
        }
        TransformSpec::Brightness { strength } => {
            let f = factor(rng, *strength);
            for v in ex.iter_mut() {
                *v = (*v * f).clamp(0.0, 1.0);
            }
        }
        TransformSpec::Contrast { strength } => {
            let f = factor(rng, *strength);
            let mean = ex.iter().sum::<f64>() / ex.len() as f64;
            for v in ex.iter_mut() {
                *v = (mean + f * (*v - mean)).clamp(0.0, 1.0);
            }
        }
        TransformSpec::Saturation { strength } => {
            let f = factor(rng, *strength);
            if c < 3 {
                return;
            }
            for p in 0..plane {
                let gray = (0..c).map(|ch| ex[ch * plane + p]).sum::<f64>() / c as f64;
                for ch in 0..c {
                    let v = &mut ex[ch * plane + p];
                    *v = (gray + f * (*v - gray)).clamp(0.0, 1.0);
                }
            }
        }
        TransformSpec::CropResize { min_frac } => {
            let short = h.min(w) as f64;
            let frac = rng.gen_range(*min_frac..1.0);
            let side = (short * frac).max(1.0);
            let top = rng.gen_range(0.0..(h as f64 - side).max(f64::MIN_POSITIVE));
            let left = rng.gen_range(0.0..(w as f64 - side).max(f64::MIN_POSITIVE));
            for ch in 0..c {
                let img = &ex[ch * plane..(ch + 1) * plane];
                let crop = crop_resize_channel(img, h, w, top, left, side);
                ex[ch * plane..(ch + 1) * plane].copy_from_slice(&crop);
            }
        }
        TransformSpec::HFlip { p } => {
            let flip = rng.gen_range(0.0..1.0) < *p;
            if !flip {
                return;
            }
            for ch in 0..c {
                for r in 0..h {
                    let row = &mut ex[ch * plane + r * w..ch * plane + (r + 1) * w];
                    row.reverse();
                }
            }
        }
    }
}

/// Runs a scenario over a `[n, c, h, w]` batch, drawing fresh parameters
/// for every example in index order from a stream seeded with `seed`. The
/// identity scenario accepts any shape and copies it through untouched.
pub fn scenario_apply(sc: &Scenario, inputs: &Tensor, seed: u64) -> Result<Tensor> {
    if sc.is_identity() {
        return Ok(inputs.clone());
    }
    if inputs.rank() != 4 {
        return Err(Error::invalid(format!(
            "scenario {} needs [n, c, h, w] images, got rank {}",
            sc.name,
            inputs.rank()
        )));
    }
    for t in &sc.transforms {
        let bad = match t {
            TransformSpec::Rotation { max_deg } => !(*max_deg > 0.0) || !max_deg.is_finite(),
            TransformSpec::Brightness { strength }
            | TransformSpec::Contrast { strength }
            | TransformSpec::Saturation { strength } => !(*strength > 0.0) || !strength.is_finite(),
            TransformSpec::CropResize { min_frac } => !(*min_frac > 0.0 && *min_frac < 1.0),
            TransformSpec::HFlip { p } => !(0.0..=1.0).contains(p),
        };
        if bad {
            return Err(Error::invalid(format!("bad transform setting {t:?}")));
        }
    }
    let (n, c, h, w) = (
        inputs.shape()[0],
        inputs.shape()[1],
        inputs.shape()[2],
        inputs.shape()[3],
    );
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut data = inputs.data().to_vec();
    let exlen = c * h * w;
    for i in 0..n {
        let ex = &mut data[i * exlen..(i + 1) * exlen];
        for t in &sc.transforms {
            apply_drawn(ex, c, h, w, t, &mut rng);
        }
    }
    Tensor::from_vec(inputs.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_digits;

    #[test]
    fn identity_scenario_is_bitwise_noop() {
        let d = gen_digits(4, 1).unwrap();
        let out = scenario_apply(&Scenario::identity(), d.inputs(), 99).unwrap();
        assert_eq!(out.data(), d.inputs().data());
    }

    #[test]
    fn zero_degree_rotation_is_exact() {
        let d = gen_digits(2, 2).unwrap();
        let img = &d.inputs().data()[..784];
        let rot = rotate_channel(img, 28, 28, 0.0);
        assert_eq!(&rot[..], img);
    }

    #[test]
    fn rotation_preserves_center_pixel() {
        // The exact center of an odd-sized image is a fixed point.
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        let rot = rotate_channel(&img, 5, 5, 33.0);
        assert!((rot[12] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_crop_of_square_image_is_identity() {
        let d = gen_digits(1, 3).unwrap();
        let img = &d.inputs().data()[..784];
        let out = crop_resize_channel(img, 28, 28, 0.0, 0.0, 28.0);
        let diff = out
            .iter()
            .zip(img)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn hflip_mirrors_and_double_flip_restores() {
        let d = gen_digits(1, 4).unwrap();
        let sc = Scenario {
            name: "flip".to_string(),
            transforms: vec![TransformSpec::HFlip { p: 1.0 }],
        };
        let once = scenario_apply(&sc, d.inputs(), 0).unwrap();
        assert_ne!(once.data(), d.inputs().data());
        let twice = scenario_apply(&sc, &once, 1).unwrap();
        assert_eq!(twice.data(), d.inputs().data());
    }

    #[test]
    fn photometric_outputs_stay_bounded() {
        let d = gen_digits(6, 5).unwrap();
        let out = scenario_apply(&Scenario::shift_strong(), d.inputs(), 7).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(out.data(), d.inputs().data());
    }

    #[test]
    fn scenarios_are_seed_deterministic_and_seed_sensitive() {
        let d = gen_digits(3, 6).unwrap();
        let a = scenario_apply(&Scenario::shift_mild(), d.inputs(), 1).unwrap();
        let b = scenario_apply(&Scenario::shift_mild(), d.inputs(), 1).unwrap();
        let c = scenario_apply(&Scenario::shift_mild(), d.inputs(), 2).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn augment_never_rotates_or_dims() {
        // Crop and flip keep the pixel value set within the original range;
        // total ink can only shrink via interpolation, never invert.
        let d = gen_digits(2, 8).unwrap();
        let out = scenario_apply(&Scenario::augment(), d.inputs(), 3).unwrap();
        let (lo, hi) = d
            .inputs()
            .data()
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
        assert!(out.data().iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }

    #[test]
    fn by_name_matches_constructors() {
        assert_eq!(Scenario::by_name("identity").unwrap(), Scenario::identity());
        assert_eq!(Scenario::by_name("augment").unwrap(), Scenario::augment());
        assert_eq!(Scenario::by_name("shift-mild").unwrap(), Scenario::shift_mild());
        assert_eq!(
            Scenario::by_name("shift-strong").unwrap(),
            Scenario::shift_strong()
        );
        assert!(Scenario::by_name("nope").is_err());
    }

    #[test]
    fn non_image_batches_are_rejected_unless_identity() {
        let x = Tensor::zeros(&[4, 2]);
        assert!(scenario_apply(&Scenario::shift_mild(), &x, 0).is_err());
        assert!(scenario_apply(&Scenario::identity(), &x, 0).is_ok());
    }

    #[test]
    fn bad_settings_are_rejected() {
        let sc = Scenario {
            name: "bad".to_string(),
            transforms: vec![TransformSpec::CropResize { min_frac: 1.5 }],
        };
        let d = gen_digits(1, 1).unwrap();
        assert!(scenario_apply(&sc, d.inputs(), 0).is_err());
        let sc = Scenario {
            name: "bad".to_string(),
            transforms: vec![TransformSpec::HFlip { p: -0.1 }],
        };
        assert!(scenario_apply(&sc, d.inputs(), 0).is_err());
    }
}
