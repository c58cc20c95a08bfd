//! `FSDS` files: magic, then `version, n_images, height, width, channels,
//! n_classes` as u32 LE (28-byte header), `n_images` u32 labels, then the
//! f32 LE pixels of every image in HWC order.

use std::path::Path;

use super::Dataset;
use crate::augment::{Image, CHANNELS};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FSDS";
const VERSION: u32 = 1;

pub fn write_dataset(ds: &Dataset) -> Vec<u8> {
    let (h, w) = ds.image_dims().unwrap_or((0, 0));
    let mut out = Writer::new();
    out.bytes(MAGIC);
    for v in [VERSION, ds.len() as u32, h as u32, w as u32, CHANNELS as u32, ds.n_classes() as u32] {
        out.u32(v);
    }
    for &l in ds.labels() {
        out.u32(l as u32);
    }
    for im in ds.images() {
        out.f32s(im.data());
    }
    out.finish()
}

pub fn read_dataset(bytes: &[u8], domain_tag: &str) -> Result<Dataset> {
    let mut r = Reader::new(bytes, "dataset");
    if r.take(4)? != MAGIC {
        return Err(Error::format("dataset: bad magic (expected FSDS)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("dataset: unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    if c != CHANNELS {
        return Err(Error::format(format!("dataset: {c} channels, only {CHANNELS} supported")));
    }
    let labels = (0..n)
        .map(|_| r.u32().map(|l| l as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let px = r.f32s(h * w * c)?;
        if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format("dataset: pixel outside [0, 1]"));
        }
        images.push(Image::new(h, w, px).map_err(|e| Error::format(format!("dataset: {e}")))?);
    }
    if !r.is_at_end() {
        return Err(Error::format("dataset: trailing bytes after pixel block"));
    }
    Dataset::new(images, labels, n_classes, domain_tag).map_err(|e| Error::format(format!("dataset: {e}")))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, write_dataset(ds)).map_err(|e| Error::io(path, e))
}

/// Loads a dataset; the domain tag is the file stem.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tag = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    read_dataset(&bytes, tag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_image() -> Dataset {
        let a = Image::filled(32, 32, 0.25);
        let b = Image::filled(32, 32, 0.75);
        Dataset::new(vec![a, b], vec![0, 1], 2, "t").unwrap()
    }

    #[test]
    fn header_is_28_bytes() {
        let bytes = write_dataset(&two_image());
        // 4 magic + 6 u32 fields
        assert_eq!(4 + 6 * 4, 28);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(bytes[32..36].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 28 + 2 * 4 + 2 * 32 * 32 * 3 * 4);
        assert_eq!(f32::from_le_bytes(bytes[36..40].try_into().unwrap()), 0.25);
    }

    #[test]
    fn round_trip() {
        let ds = two_image();
        let back = read_dataset(&write_dataset(&ds), "t").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupt_files_are_errors() {
        let mut bytes = write_dataset(&two_image());
        assert!(read_dataset(&bytes[..bytes.len() - 1], "t").is_err());
        assert!(read_dataset(&bytes[..10], "t").is_err());
        bytes[4] = 9;
        assert!(read_dataset(&bytes, "t").unwrap_err().to_string().contains("version"));
        bytes[0] = b'Z';
        assert!(read_dataset(&bytes, "t").unwrap_err().to_string().contains("magic"));
    }
}
