//! Loader for the classic big-endian IDX containers used to distribute
//! handwritten digit scans: one file of u8 images, one of u8 labels.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::Tensor;
use std::fs;
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(buf: &[u8], pos: usize, what: &str) -> Result<u32> {
    buf.get(pos..pos + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::format(format!("{what} file is truncated")))
}

/// Reads an image file and a label file, scaling pixels to [0, 1]. Labels
/// must be digits 0 through 9; inputs come out as `[n, 1, rows, cols]`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    id: impl Into<String>,
) -> Result<Dataset> {
    let ibuf = fs::read(&images_path)?;
    if be_u32(&ibuf, 0, "image")? != IMAGE_MAGIC {
        return Err(Error::format("image file has the wrong magic"));
    }
    let n = be_u32(&ibuf, 4, "image")? as usize;
    let rows = be_u32(&ibuf, 8, "image")? as usize;
    let cols = be_u32(&ibuf, 12, "image")? as usize;
    let want = 16 + n * rows * cols;
    if ibuf.len() != want {
        return Err(Error::format(format!(
            "image file holds {} bytes, header promises {want}",
            ibuf.len()
        )));
    }

    let lbuf = fs::read(&labels_path)?;
    if be_u32(&lbuf, 0, "label")? != LABEL_MAGIC {
        return Err(Error::format("label file has the wrong magic"));
    }
    let ln = be_u32(&lbuf, 4, "label")? as usize;
    if lbuf.len() != 8 + ln {
        return Err(Error::format(format!(
            "label file holds {} bytes, header promises {}",
            lbuf.len(),
            8 + ln
        )));
    }
    if ln != n {
        return Err(Error::format(format!(
            "{n} images but {ln} labels"
        )));
    }

    let inputs: Vec<f64> = ibuf[16..].iter().map(|b| *b as f64 / 255.0).collect();
    let mut labels = vec![0.0; n * 10];
    for (i, b) in lbuf[8..].iter().enumerate() {
        if *b > 9 {
            return Err(Error::format(format!("label {b} at row {i} is not a digit")));
        }
        labels[i * 10 + *b as usize] = 1.0;
    }
    Dataset::new(
        id,
        Tensor::from_vec(vec![n, 1, rows, cols], inputs)?,
        Tensor::from_vec(vec![n, 10], labels)?,
    )
}

/// Writes a single-channel image dataset as an IDX pair. Pixel values are
/// rounded to u8 on a 0 to 255 scale.
pub fn write_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let sh = ds.inputs().shape();
    if sh.len() != 4 || sh[1] != 1 {
        return Err(Error::invalid(
            "only [n, 1, rows, cols] datasets can be written as IDX",
        ));
    }
    if ds.classes() > 10 {
        return Err(Error::invalid("IDX labels are single digits"));
    }
    let (n, rows, cols) = (sh[0], sh[2], sh[3]);
    let mut ibuf = Vec::with_capacity(16 + n * rows * cols);
    ibuf.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    ibuf.extend_from_slice(&(n as u32).to_be_bytes());
    ibuf.extend_from_slice(&(rows as u32).to_be_bytes());
    ibuf.extend_from_slice(&(cols as u32).to_be_bytes());
    ibuf.extend(
        ds.inputs()
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );

    let mut lbuf = Vec::with_capacity(8 + n);
    lbuf.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbuf.extend_from_slice(&(n as u32).to_be_bytes());
    let k = ds.classes();
    for i in 0..n {
        let row = &ds.labels().data()[i * k..(i + 1) * k];
        let c = row.iter().position(|v| *v == 1.0).unwrap_or(0);
        lbuf.push(c as u8);
    }
    fs::write(images_path, ibuf)?;
    fs::write(labels_path, lbuf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_digits;

    #[test]
    fn roundtrip_through_idx_quantizes_pixels() {
        let d = gen_digits(12, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_idx(&d, &ip, &lp).unwrap();
        let r = load_idx(&ip, &lp, "back").unwrap();
        assert_eq!(r.inputs().shape(), d.inputs().shape());
        assert_eq!(r.labels().data(), d.labels().data());
        let maxerr = r
            .inputs()
            .data()
            .iter()
            .zip(d.inputs().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(maxerr <= 0.5 / 255.0 + 1e-12, "u8 rounding error {maxerr}");
    }

    #[test]
    fn rejects_wrong_magic_and_count_mismatch() {
        let d = gen_digits(4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_idx(&d, &ip, &lp).unwrap();

        let mut ibuf = fs::read(&ip).unwrap();
        ibuf[3] = 0x05;
        let bad = dir.path().join("bad.idx");
        fs::write(&bad, &ibuf).unwrap();
        assert!(load_idx(&bad, &lp, "x").is_err());

        let mut lbuf = fs::read(&lp).unwrap();
        lbuf.truncate(lbuf.len() - 1);
        fs::write(&bad, &lbuf).unwrap();
        assert!(load_idx(&ip, &bad, "x").is_err());
    }

    #[test]
    fn rejects_non_digit_labels() {
        let d = gen_digits(2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_idx(&d, &ip, &lp).unwrap();
        let mut lbuf = fs::read(&lp).unwrap();
        let end = lbuf.len() - 1;
        lbuf[end] = 11;
        fs::write(&lp, &lbuf).unwrap();
        assert!(load_idx(&ip, &lp, "x").is_err());
    }
}
