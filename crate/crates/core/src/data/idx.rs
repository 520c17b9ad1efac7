//! IDX (MNIST-convention) ingestion: magic 2051 for images, 2049 for labels,
//! big-endian dimension headers, one byte per pixel/label.

use std::io::Read;
use std::path::Path;

use crate::data::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "{}: file too short reading {what} (need {} bytes, have {})",
            path.display(),
            end,
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Load an IDX image/label pair into a dataset with pixels scaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path, domain: Domain) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let magic = read_u32_be(&img_bytes, 0, "magic", images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic {magic}, expected {IMAGES_MAGIC}",
            images_path.display()
        )));
    }
    let count = read_u32_be(&img_bytes, 4, "image count", images_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, "image rows", images_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, "image cols", images_path)? as usize;
    let expected = count * rows * cols;
    let actual = img_bytes.len() - 16;
    if actual != expected {
        return Err(Error::Data(format!(
            "{}: image payload is {actual} bytes, expected {expected}",
            images_path.display()
        )));
    }

    let lbl_bytes = read_file(labels_path)?;
    let magic = read_u32_be(&lbl_bytes, 0, "magic", labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic {magic}, expected {LABELS_MAGIC}",
            labels_path.display()
        )));
    }
    let lbl_count = read_u32_be(&lbl_bytes, 4, "label count", labels_path)? as usize;
    let lbl_actual = lbl_bytes.len() - 8;
    if lbl_actual != lbl_count {
        return Err(Error::Data(format!(
            "{}: label payload is {lbl_actual} bytes, expected {lbl_count}",
            labels_path.display()
        )));
    }
    if lbl_count != count {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            count, lbl_count
        )));
    }

    let data: Vec<f64> = img_bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let samples = Matrix::from_vec(count, rows * cols, data)?;
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    Dataset::new(samples, labels, domain)
}

/// Write a dataset as an IDX pair, quantising values back to bytes. Used to
/// build fixtures and to export synthetic corpora.
pub fn write_idx(images_path: &Path, labels_path: &Path, samples: &Matrix, labels: &[usize], rows: usize, cols: usize) -> Result<()> {
    if rows * cols != samples.cols() {
        return Err(Error::Contract(format!(
            "image shape {rows}x{cols} does not match sample dim {}",
            samples.cols()
        )));
    }
    if samples.rows() != labels.len() {
        return Err(Error::Data("image/label count mismatch".into()));
    }
    let mut img = Vec::with_capacity(16 + samples.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(samples.rows() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in samples.data() {
        img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(images_path, img)?;

    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > 255 {
            return Err(Error::Data(format!("label {l} does not fit in one byte")));
        }
        lbl.push(l as u8);
    }
    std::fs::write(labels_path, lbl)?;
    Ok(())
}
