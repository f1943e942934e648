//! Big-endian IDX image and label files.

use std::fs;
use std::path::{Path, PathBuf};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: bad magic number {found:#010x}, expected {expected:#010x}", path.display())]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{}: truncated, need {expected} bytes but the file has {actual}", path.display())]
    Truncated { path: PathBuf, expected: usize, actual: usize },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

/// One image as raw intensities plus its label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxSample {
    pub pixels: Vec<u8>,
    pub label: u8,
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| IdxError::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), IdxError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize, path: &Path) -> Result<(), IdxError> {
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

/// Images as flat row-major pixel vectors.
pub fn read_images(path: &Path) -> Result<Vec<Vec<u8>>, IdxError> {
    let bytes = read(path)?;
    check_magic(&bytes, IMAGE_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let size = rows * cols;
    check_len(&bytes, 16 + n * size, path)?;
    Ok(bytes[16..16 + n * size].chunks(size.max(1)).take(n).map(<[u8]>::to_vec).collect())
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    let bytes = read(path)?;
    check_magic(&bytes, LABEL_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    check_len(&bytes, 8 + n, path)?;
    Ok(bytes[8..8 + n].to_vec())
}

/// Pairs images with labels by index.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Vec<IdxSample>, IdxError> {
    let imgs = read_images(images)?;
    let lbls = read_labels(labels)?;
    if imgs.len() != lbls.len() {
        return Err(IdxError::CountMismatch {
            images: imgs.len(),
            labels: lbls.len(),
        });
    }
    Ok(imgs
        .into_iter()
        .zip(lbls)
        .map(|(pixels, label)| IdxSample { pixels, label })
        .collect())
}

/// Serializes images in IDX format; all images must share `rows · cols`.
pub fn encode_images(images: &[Vec<u8>], rows: u32, cols: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * (rows * cols) as usize);
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    for img in images {
        assert_eq!(img.len(), (rows * cols) as usize, "image size");
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn round_trip_one_blank_image() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = write(dir.path(), "i", &encode_images(&[vec![0; 784]], 28, 28));
        let lbls = write(dir.path(), "l", &encode_labels(&[7]));
        let s = load_idx(&imgs, &lbls).unwrap();
        assert_eq!(s, vec![IdxSample { pixels: vec![0; 784], label: 7 }]);
    }

    #[test]
    fn empty_file_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "i", &[]);
        assert!(matches!(read_images(&p), Err(IdxError::Truncated { .. })));
    }

    #[test]
    fn wrong_magic_and_short_body() {
        let dir = tempfile::tempdir().unwrap();
        let lbl_as_img = write(dir.path(), "a", &encode_labels(&[1, 2]));
        assert!(matches!(read_images(&lbl_as_img), Err(IdxError::BadMagic { found: LABEL_MAGIC, .. })));
        let mut short = encode_images(&[vec![1; 4]], 2, 2);
        short.pop();
        let p = write(dir.path(), "b", &short);
        assert!(matches!(read_images(&p), Err(IdxError::Truncated { .. })));
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = write(dir.path(), "i", &encode_images(&[vec![0; 4]], 2, 2));
        let lbls = write(dir.path(), "l", &encode_labels(&[1, 2]));
        assert!(matches!(
            load_idx(&imgs, &lbls),
            Err(IdxError::CountMismatch { images: 1, labels: 2 })
        ));
    }
}
