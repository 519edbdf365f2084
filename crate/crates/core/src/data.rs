//! IDX ingestion (plain or gzip), pixel normalisation and synthetic fixtures.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Raw `u8` images as stored in an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Reads a file, transparently inflating it when it starts with the gzip magic.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::TruncatedPayload {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::WrongMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read_maybe_gzip(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gzip(path)?)
}

/// Maps a byte to `[−0.5, 0.5]`.
pub fn normalize(p: u8) -> f64 {
    p as f64 / 255.0 - 0.5
}

/// Normalised images with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Dataset> {
        if images.ndim() != 4 {
            return Err(invalid!("images must be [N×C×H×W], got {:?}", images.shape()));
        }
        if images.batch_len() != labels.len() {
            return Err(invalid!("{} images but {} labels", images.batch_len(), labels.len()));
        }
        if let Some(bad) = images.data().iter().find(|v| !(-0.5..=0.5).contains(*v)) {
            return Err(invalid!("pixel value {} outside [-0.5, 0.5]", bad));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
            return Err(invalid!("class id {} outside [0, {})", bad, NUM_CLASSES));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn from_idx(images: &IdxImages, labels: &[u8], split: Split) -> Result<Dataset> {
        let data = images.pixels.iter().map(|&p| normalize(p)).collect();
        let t = Tensor::new(vec![images.count, 1, images.rows, images.cols], data)?;
        Dataset::new(t, labels.iter().map(|&y| y as usize).collect(), split)
    }

    /// Loads an image/label IDX pair (either may be gzip-compressed).
    pub fn load(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
        Dataset::from_idx(&load_idx_images(images)?, &load_idx_labels(labels)?, split)
    }

    /// Loads the standard four-file layout from a directory, accepting `.gz` variants.
    pub fn load_dir(dir: &Path, split: Split) -> Result<Dataset> {
        let stem = match split {
            Split::Train => "train",
            Split::Test => "t10k",
        };
        let find = |kind: &str| {
            let plain = dir.join(format!("{}-{}-ubyte", stem, kind));
            let gz = dir.join(format!("{}-{}-ubyte.gz", stem, kind));
            if plain.exists() {
                plain
            } else {
                gz
            }
        };
        Dataset::load(&find("images-idx3"), &find("labels-idx1"), split)
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        })
    }

    /// The first `n` examples in file order.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// The first `n` examples of every class, kept in file order.
    pub fn first_per_class(&self, n: usize) -> Result<Dataset> {
        let mut seen = [0usize; NUM_CLASSES];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let y = self.labels[i];
                seen[y] += 1;
                seen[y] <= n
            })
            .collect();
        self.select(&idx)
    }

    pub fn shuffled(&self, seed: u64) -> Result<Dataset> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.select(&idx)
    }

    /// Replaces the images, keeping labels and split.
    pub fn with_images(&self, images: Tensor) -> Result<Dataset> {
        Dataset::new(images, self.labels.clone(), self.split)
    }
}

/// Class-conditional Gaussian bumps on a dark 28×28 canvas.
///
/// Class `c` places a bump on cell `c` of a 4×4 grid, with a little position
/// jitter and pixel noise, so the classes are linearly separable.
pub fn synthetic_blobs(n_per_class: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(invalid!("n_per_class must be at least 1"));
    }
    if classes == 0 || classes > NUM_CLASSES {
        return Err(invalid!("classes must be in 1..={}", NUM_CLASSES));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let (side, cell) = (28usize, 7.0f64);
    let mut data = Vec::with_capacity(n_per_class * classes * side * side);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for i in 0..n_per_class * classes {
        let c = i % classes;
        let cy = (c / 4) as f64 * cell + cell / 2.0 + rng.gen_range(-0.75..0.75);
        let cx = (c % 4) as f64 * cell + cell / 2.0 + rng.gen_range(-0.75..0.75);
        let amp = rng.gen_range(0.8..1.0);
        for y in 0..side {
            for x in 0..side {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = -0.5 + amp * (-d2 / (2.0 * 1.5f64.powi(2))).exp() + noise.sample(&mut rng);
                data.push(v.clamp(-0.5, 0.5));
            }
        }
        labels.push(c);
    }
    let images = Tensor::new(vec![labels.len(), 1, side, side], data)?;
    Dataset::new(images, labels, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 64, 128, 255, 1, 2, 3, 4]);
        b
    }

    #[test]
    fn parses_hand_built_images() {
        let img = parse_idx_images(&image_fixture()).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (2, 2, 2));
        assert_eq!(img.pixels, vec![0, 64, 128, 255, 1, 2, 3, 4]);
        assert_eq!(encode_idx_images(&img), image_fixture());
    }

    #[test]
    fn image_errors() {
        let mut wrong = image_fixture();
        wrong[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&wrong),
            Err(Error::WrongMagic { expected: IMAGE_MAGIC, found: LABEL_MAGIC })
        ));
        let short = &image_fixture()[..23];
        assert!(matches!(
            parse_idx_images(short),
            Err(Error::TruncatedPayload { expected: 24, found: 23 })
        ));
    }

    #[test]
    fn labels_parse_and_validate() {
        let b = encode_idx_labels(&[3, 7]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![3, 7]);
        assert!(matches!(parse_idx_labels(&image_fixture()), Err(Error::WrongMagic { .. })));

        let bad = parse_idx_labels(&encode_idx_labels(&[255])).unwrap();
        let img = IdxImages {
            count: 1,
            rows: 1,
            cols: 1,
            pixels: vec![0],
        };
        assert!(matches!(Dataset::from_idx(&img, &bad, Split::Train), Err(Error::Validation(_))));
    }

    #[test]
    fn normalize_boundaries() {
        assert_eq!(normalize(0), -0.5);
        assert_eq!(normalize(255), 0.5);
        assert!((normalize(128) - 0.001_960_784).abs() < 1e-8);
        for p in 0..255u8 {
            assert!(normalize(p) < normalize(p + 1));
        }
    }

    #[test]
    fn gzip_detected() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&image_fixture()).unwrap();
        std::fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx_images(&path).unwrap().count, 2);
    }

    #[test]
    fn blobs_deterministic_and_balanced() {
        let a = synthetic_blobs(50, 2, 9).unwrap();
        let b = synthetic_blobs(50, 2, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(a.labels().iter().filter(|&&y| y == 0).count(), 50);
    }

    #[test]
    fn first_per_class_keeps_order() {
        let d = synthetic_blobs(5, 3, 1).unwrap();
        let s = d.first_per_class(2).unwrap();
        assert_eq!(s.labels(), &[0, 1, 2, 0, 1, 2]);
    }
}
