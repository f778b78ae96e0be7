//! Labeled datasets: synthetic generators, an on-disk container, and the
//! geometry behind the two-dimensional benchmark tasks.

use crate::error::{Error, Result};
use crate::hash::ContentHash;
use crate::model_io::{read_envelope, read_tensor, write_envelope, write_tensor, Reader};
use crate::training::check_one_hot;
use crate::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"RVDS";
const VERSION: u16 = 1;

/// A batch of labeled examples. Inputs are `[n, ...]`, labels a one-hot
/// `[n, classes]` matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    id: String,
    inputs: Tensor,
    labels: Tensor,
}

impl Dataset {
    pub fn new(id: impl Into<String>, inputs: Tensor, labels: Tensor) -> Result<Self> {
        check_one_hot(&labels)?;
        if inputs.rank() < 2 {
            return Err(Error::invalid("inputs must be a batch, rank 2 or higher"));
        }
        if inputs.shape()[0] != labels.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: vec![inputs.shape()[0]],
                rhs: vec![labels.shape()[0]],
            });
        }
        if !inputs.is_finite() {
            return Err(Error::NonFinite("dataset inputs".to_string()));
        }
        Ok(Dataset {
            id: id.into(),
            inputs,
            labels,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.labels.shape()[1]
    }

    /// Per-example input shape, without the batch axis.
    pub fn input_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Copies out the examples at `idx`, in the given order.
    pub fn subset(&self, id: impl Into<String>, idx: &[usize]) -> Result<Dataset> {
        let stride: usize = self.input_shape().iter().product();
        let k = self.classes();
        let mut inputs = Vec::with_capacity(idx.len() * stride);
        let mut labels = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "subset index {i} out of range for {} examples",
                    self.len()
                )));
            }
            inputs.extend_from_slice(&self.inputs.data()[i * stride..(i + 1) * stride]);
            labels.extend_from_slice(&self.labels.data()[i * k..(i + 1) * k]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        Dataset::new(
            id,
            Tensor::from_vec(shape, inputs)?,
            Tensor::from_vec(vec![idx.len(), k], labels)?,
        )
    }

    /// Hash over id, shapes, and all values; stable across runs.
    pub fn content_hash(&self) -> String {
        let mut h = ContentHash::new();
        h.update(self.id.as_bytes());
        h.update_usizes(self.inputs.shape());
        h.update_f64s(self.inputs.data());
        h.update_usizes(self.labels.shape());
        h.update_f64s(self.labels.data());
        h.finish()
    }

    /// Writes the dataset to a checksummed binary file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut body: Vec<u8> = Vec::new();
        body.extend_from_slice(&VERSION.to_le_bytes());
        body.extend_from_slice(&(self.id.len() as u32).to_le_bytes());
        body.extend_from_slice(self.id.as_bytes());
        write_tensor(&mut body, &self.inputs);
        write_tensor(&mut body, &self.labels);
        write_envelope(MAGIC, &body, path)
    }

    /// Loads a dataset written by [`Dataset::save`], verifying the checksum.
    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let buf = fs::read(&path)?;
        let body = read_envelope(MAGIC, &buf, "dataset")?;
        let mut r = Reader::new(body);
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported dataset version {version}")));
        }
        let id = r.string()?;
        let inputs = read_tensor(&mut r)?;
        let labels = read_tensor(&mut r)?;
        if !r.done() {
            return Err(Error::format("trailing bytes after dataset"));
        }
        Dataset::new(id, inputs, labels)
    }
}

fn one_hot_rows(classes: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * k];
    for (i, c) in classes.iter().enumerate() {
        if *c >= k {
            return Err(Error::invalid(format!("class {c} out of range, have {k}")));
        }
        data[i * k + c] = 1.0;
    }
    Tensor::from_vec(vec![classes.len(), k], data)
}

/// Two concentric noisy circles of radius 1.0 (class 0) and 1.5 (class 1),
/// centered at the origin. Radial noise sigma 0.03. Classes alternate by
/// index, so any prefix is nearly balanced. Not linearly separable: the
/// best line stops near 63 percent.
pub fn gen_circles(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.03).expect("const sigma");
    let mut inputs = Vec::with_capacity(n * 2);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let base = if c == 0 { 1.0 } else { 1.5 };
        let theta = rng.gen_range(0.0..TAU);
        let r: f64 = base + noise.sample(&mut rng);
        inputs.push(r * theta.cos());
        inputs.push(r * theta.sin());
        classes.push(c);
    }
    Dataset::new(
        format!("circles-n{n}-s{seed}"),
        Tensor::from_vec(vec![n, 2], inputs)?,
        one_hot_rows(&classes, 2)?,
    )
}

/// Ellipse ring benchmark, split into a visible part and a hidden part.
///
/// Two noisy elliptical rings with semi-axes (2.0, 1.0) sit in the positive
/// quadrant: class 0 centered at (2.3, 1.5), class 1 at (3.7, 1.5). Each
/// ring hides the arc reaching into the other class's side (class 0 its
/// right arc, cos theta >= 0.35; class 1 the mirrored left arc). A model
/// trained on `seen` puts its boundary between the centers, so `hidden`
/// points land on the wrong side. With every coordinate positive, a bounded
/// multiplicative rescale is enough to pull them back.
#[derive(Debug, Clone)]
pub struct EllipseSplit {
    pub seen: Dataset,
    pub hidden: Dataset,
}

pub fn gen_ellipses(n: usize, seed: u64) -> Result<EllipseSplit> {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).expect("const sigma");
    let (a, b) = (2.0, 1.0);
    let centers = [(2.3, 1.5), (3.7, 1.5)];
    let mut seen_x = Vec::new();
    let mut seen_c = Vec::new();
    let mut hid_x = Vec::new();
    let mut hid_c = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let theta = rng.gen_range(0.0..TAU);
        let (cx, cy) = centers[c];
        let x = cx + a * theta.cos() + noise.sample(&mut rng);
        let y = cy + b * theta.sin() + noise.sample(&mut rng);
        let cos = theta.cos();
        let hidden = if c == 0 { cos >= 0.35 } else { cos <= -0.35 };
        if hidden {
            hid_x.extend_from_slice(&[x, y]);
            hid_c.push(c);
        } else {
            seen_x.extend_from_slice(&[x, y]);
            seen_c.push(c);
        }
    }
    if seen_c.is_empty() || hid_c.is_empty() {
        return Err(Error::invalid("ellipse sample too small to split"));
    }
    Ok(EllipseSplit {
        seen: Dataset::new(
            format!("ellipses-seen-n{n}-s{seed}"),
            Tensor::from_vec(vec![seen_c.len(), 2], seen_x)?,
            one_hot_rows(&seen_c, 2)?,
        )?,
        hidden: Dataset::new(
            format!("ellipses-hidden-n{n}-s{seed}"),
            Tensor::from_vec(vec![hid_c.len(), 2], hid_x)?,
            one_hot_rows(&hid_c, 2)?,
        )?,
    })
}

/// 5x7 dot-matrix digit glyphs, one bitmask row per byte, low 5 bits used.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00100, 0b01100],
];

fn glyph_at(digit: usize, gy: f64, gx: f64) -> f64 {
    // Bilinear sample of the glyph, cells as point samples at integer
    // coordinates, zero outside the 5x7 box.
    let sample = |iy: i64, ix: i64| -> f64 {
        if (0..7).contains(&iy) && (0..5).contains(&ix) {
            ((GLYPHS[digit][iy as usize] >> (4 - ix)) & 1) as f64
        } else {
            0.0
        }
    };
    let (y0, x0) = (gy.floor(), gx.floor());
    let (fy, fx) = (gy - y0, gx - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    sample(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + sample(y0, x0 + 1) * (1.0 - fy) * fx
        + sample(y0 + 1, x0) * fy * (1.0 - fx)
        + sample(y0 + 1, x0 + 1) * fy * fx
}

/// Image side of the digit task.
pub const DIGIT_SIDE: usize = 28;

/// Synthetic digit images: 5x7 glyphs rendered into 28x28 frames at a
/// jittered position (plus or minus 2.5 pixels) and scale (0.85 to 1.15 of
/// 2.8x), under Gaussian pixel noise sigma 0.08, clamped to [0, 1]. The
/// base renderer never rotates, which keeps rotation available as a clean
/// distribution shift. Classes cycle 0 through 9 by index.
pub fn gen_digits(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("const sigma");
    let side = DIGIT_SIDE;
    let mut inputs = Vec::with_capacity(n * side * side);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let scale = 2.8 * rng.gen_range(0.85..1.15);
        let cx = (side as f64 - 1.0) / 2.0 + rng.gen_range(-2.5..2.5);
        let cy = (side as f64 - 1.0) / 2.0 + rng.gen_range(-2.5..2.5);
        for r in 0..side {
            for c in 0..side {
                let gx = (c as f64 - cx) / scale + 2.0;
                let gy = (r as f64 - cy) / scale + 3.0;
                let v = glyph_at(digit, gy, gx) + noise.sample(&mut rng);
                inputs.push(v.clamp(0.0, 1.0));
            }
        }
        classes.push(digit);
    }
    Dataset::new(
        format!("digits-n{n}-s{seed}"),
        Tensor::from_vec(vec![n, 1, side, side], inputs)?,
        one_hot_rows(&classes, 10)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circles_sit_on_their_rings() {
        let d = gen_circles(200, 9).unwrap();
        assert_eq!(d.inputs().shape(), &[200, 2]);
        assert_eq!(d.classes(), 2);
        for i in 0..d.len() {
            let x = d.inputs().data()[2 * i];
            let y = d.inputs().data()[2 * i + 1];
            let r = (x * x + y * y).sqrt();
            let base = if i % 2 == 0 { 1.0 } else { 1.5 };
            assert!((r - base).abs() < 0.2, "example {i} radius {r}");
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        assert_eq!(
            gen_circles(50, 3).unwrap().content_hash(),
            gen_circles(50, 3).unwrap().content_hash()
        );
        assert_ne!(
            gen_circles(50, 3).unwrap().content_hash(),
            gen_circles(50, 4).unwrap().content_hash()
        );
        assert_eq!(
            gen_digits(20, 5).unwrap().content_hash(),
            gen_digits(20, 5).unwrap().content_hash()
        );
    }

    #[test]
    fn ellipse_split_is_exact_and_disjoint_in_angle() {
        let split = gen_ellipses(400, 11).unwrap();
        assert_eq!(split.seen.len() + split.hidden.len(), 400);
        // Hidden class-0 points reach right of both centers' midpoint side;
        // every hidden class-0 x exceeds every seen class-0 minimum arc cut.
        for ds in [&split.seen, &split.hidden] {
            assert_eq!(ds.classes(), 2);
            assert!(ds.inputs().data().iter().all(|v| *v > 0.0), "positive quadrant");
        }
        // Class 0 hides its right arc: hidden class-0 x >= 2.3 + 2*0.35 - slack.
        let k = 2;
        for i in 0..split.hidden.len() {
            let x = split.hidden.inputs().data()[2 * i];
            let c = if split.hidden.labels().data()[k * i] == 1.0 { 0 } else { 1 };
            if c == 0 {
                assert!(x > 2.9, "hidden class 0 arc sits right, got x {x}");
            } else {
                assert!(x < 3.1, "hidden class 1 arc sits left, got x {x}");
            }
        }
    }

    #[test]
    fn digit_images_are_bounded_and_distinct() {
        let d = gen_digits(30, 7).unwrap();
        assert_eq!(d.inputs().shape(), &[30, 1, 28, 28]);
        assert!(d.inputs().data().iter().all(|v| (0.0..=1.0).contains(v)));
        // Same digit, different jitter: images differ.
        let a = &d.inputs().data()[0..784];
        let b = &d.inputs().data()[10 * 784..11 * 784];
        assert!(a != b);
        // Enough ink to be a glyph and not a blank frame.
        let ink: f64 = a.iter().sum();
        assert!(ink > 10.0, "ink {ink}");
    }

    #[test]
    fn glyph_sampling_interpolates() {
        assert_eq!(glyph_at(1, 1.0, 2.0), 1.0);
        assert_eq!(glyph_at(1, -5.0, 2.0), 0.0);
        // Row 1 of the "1" glyph is 01100: column 2 is ink, column 3 blank.
        let mid = glyph_at(1, 1.0, 2.5);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn save_load_roundtrip_preserves_hash() {
        let d = gen_circles(40, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rvds");
        d.save(&path).unwrap();
        let r = Dataset::load(&path).unwrap();
        assert_eq!(r.content_hash(), d.content_hash());
        assert_eq!(r.id(), d.id());

        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(Dataset::load(&path).is_err());
    }

    #[test]
    fn subset_copies_selected_rows() {
        let d = gen_circles(10, 2).unwrap();
        let s = d.subset("sub", &[3, 0, 3]).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(
            s.inputs().data()[0..2],
            d.inputs().data()[6..8],
            "row 3 first"
        );
        assert_eq!(s.inputs().data()[0..2], s.inputs().data()[4..6]);
        assert!(d.subset("bad", &[10]).is_err());
    }

    #[test]
    fn dataset_rejects_mismatched_and_soft_labels() {
        let x = Tensor::zeros(&[3, 2]);
        let y = one_hot_rows(&[0, 1], 2).unwrap();
        assert!(Dataset::new("d", x, y).is_err());
        let x = Tensor::zeros(&[2, 2]);
        let y = Tensor::from_vec(vec![2, 2], vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        assert!(Dataset::new("d", x, y).is_err());
    }
}
