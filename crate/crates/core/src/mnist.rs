//! MNIST IDX ingestion, 14x14 downscaling and train/eval split construction.

use std::io::Read;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::GRID;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

pub const TEST_IMAGES_FILE: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS_FILE: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, thiserror::Error)]
pub enum MnistError {
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("label {label} at index {index} is outside 0..=9")]
    LabelOutOfRange { index: usize, label: u8 },
    #[error("expected a 28x28 image, got {width}x{height}")]
    WrongSize { width: usize, height: usize },
    #[error("class {0} is absent from the data set")]
    ClassAbsent(u8),
    #[error("{total} images cannot be split evenly across {classes} classes")]
    NotDivisible { total: usize, classes: usize },
    #[error("class {class} has {available} eligible images, {needed} needed")]
    InsufficientImages { class: u8, needed: usize, available: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Grayscale image with row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Image {
        assert_eq!(pixels.len(), width * height, "pixel buffer size");
        Image { width, height, pixels }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Image {
        Image::new(width, height, vec![value; width * height])
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.width + col] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images with their labels. `source_index` keeps each image's position in the
/// parsed file so that derived sets can be checked for disjointness.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
    pub source_index: Vec<usize>,
    pub split: Split,
}

impl LabeledSet {
    pub fn new(images: Vec<Image>, labels: Vec<u8>, split: Split) -> Result<LabeledSet, MnistError> {
        if images.len() != labels.len() {
            return Err(MnistError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        let source_index = (0..images.len()).collect();
        Ok(LabeledSet { images, labels, source_index, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn indices_of(&self, class: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, MnistError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(MnistError::TruncatedFile { expected: at + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), MnistError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(MnistError::BadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>, MnistError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(MnistError::TruncatedFile { expected, found: bytes.len() });
    }
    Ok(bytes[16..]
        .chunks_exact(rows * cols)
        .map(|raw| Image::new(cols, rows, raw.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, MnistError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(MnistError::TruncatedFile { expected, found: bytes.len() });
    }
    let labels = bytes[8..].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(MnistError::LabelOutOfRange { index, label });
    }
    Ok(labels)
}

/// Inverse of [`parse_idx_images`] for images parsed from bytes.
pub fn encode_idx_images(images: &[Image]) -> Vec<u8> {
    let (rows, cols) = images.first().map(|i| (i.height, i.width)).unwrap_or((0, 0));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend(img.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, MnistError> {
    let io = |source| MnistError::Io { path: path.display().to_string(), source };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn locate(dir: &Path, stem: &str) -> std::path::PathBuf {
    let plain = dir.join(stem);
    if plain.exists() {
        plain
    } else {
        dir.join(format!("{stem}.gz"))
    }
}

/// Loads the official test split (`t10k-*`, plain or `.gz`) from `dir`.
pub fn load_test_split(dir: &Path) -> Result<LabeledSet, MnistError> {
    let images = parse_idx_images(&read_maybe_gz(&locate(dir, TEST_IMAGES_FILE))?)?;
    let labels = parse_idx_labels(&read_maybe_gz(&locate(dir, TEST_LABELS_FILE))?)?;
    LabeledSet::new(images, labels, Split::Test)
}

/// Keeps even rows and columns of a 28x28 image.
pub fn downscale14(img: &Image) -> Result<Image, MnistError> {
    if img.width != 2 * GRID || img.height != 2 * GRID {
        return Err(MnistError::WrongSize { width: img.width, height: img.height });
    }
    let mut pixels = Vec::with_capacity(GRID * GRID);
    for i in 0..GRID {
        for j in 0..GRID {
            pixels.push(img.get(2 * i, 2 * j));
        }
    }
    Ok(Image::new(GRID, GRID, pixels))
}

fn to_grid(img: &Image) -> Result<Image, MnistError> {
    if img.width == GRID && img.height == GRID {
        Ok(img.clone())
    } else {
        downscale14(img)
    }
}

/// One training image drawn for a class.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub class: u8,
    pub source_index: usize,
    pub image: Image,
}

fn class_rng(seed: u64, class: u8, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::seeding::mix(&[seed, class as u64, salt]))
}

/// Picks one image per requested class, deterministically in `seed`, downscaled to 14x14.
pub fn select_training_examples(
    set: &LabeledSet,
    classes: &[u8],
    seed: u64,
) -> Result<Vec<TrainingExample>, MnistError> {
    classes
        .iter()
        .map(|&class| {
            let candidates = set.indices_of(class);
            let mut rng = class_rng(seed, class, 0x7472_6169_6e);
            let &pos = candidates.choose(&mut rng).ok_or(MnistError::ClassAbsent(class))?;
            Ok(TrainingExample {
                class,
                source_index: set.source_index[pos],
                image: to_grid(&set.images[pos])?,
            })
        })
        .collect()
}

/// Held-out set of `total` images split evenly across `classes`, excluding any
/// image whose source index appears in `exclude`.
pub fn build_eval_set(
    set: &LabeledSet,
    classes: &[u8],
    total: usize,
    seed: u64,
    exclude: &[usize],
) -> Result<LabeledSet, MnistError> {
    if classes.is_empty() || total % classes.len() != 0 {
        return Err(MnistError::NotDivisible { total, classes: classes.len() });
    }
    let per_class = total / classes.len();
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut source_index = Vec::with_capacity(total);
    for &class in classes {
        let mut candidates: Vec<usize> = set
            .indices_of(class)
            .into_iter()
            .filter(|&i| !exclude.contains(&set.source_index[i]))
            .collect();
        if candidates.len() < per_class {
            return Err(MnistError::InsufficientImages {
                class,
                needed: per_class,
                available: candidates.len(),
            });
        }
        let mut rng = class_rng(seed, class, 0x6576_616c);
        candidates.shuffle(&mut rng);
        candidates.truncate(per_class);
        candidates.sort_unstable();
        for i in candidates {
            images.push(to_grid(&set.images[i])?);
            labels.push(class);
            source_index.push(set.source_index[i]);
        }
    }
    Ok(LabeledSet { images, labels, source_index, split: set.split })
}

/// Training examples plus a disjoint held-out set for one class list.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Vec<TrainingExample>,
    pub eval: LabeledSet,
}

pub fn prepare_task_data(
    set: &LabeledSet,
    classes: &[u8],
    eval_total: usize,
    seed: u64,
) -> Result<TaskData, MnistError> {
    let train = select_training_examples(set, classes, seed)?;
    let exclude: Vec<usize> = train.iter().map(|t| t.source_index).collect();
    let eval = build_eval_set(set, classes, eval_total, seed, &exclude)?;
    Ok(TaskData { train, eval })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_black_image() {
        let mut bytes = header(IMAGE_MAGIC, &[1, 28, 28]);
        bytes.extend(std::iter::repeat(0u8).take(784));
        let imgs = parse_idx_images(&bytes).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!((imgs[0].width, imgs[0].height), (28, 28));
        assert!(imgs[0].pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn image_magic_mismatch() {
        let mut bytes = header(LABEL_MAGIC, &[1, 28, 28]);
        bytes.extend(std::iter::repeat(0u8).take(784));
        assert!(matches!(parse_idx_images(&bytes), Err(MnistError::BadMagic { .. })));
    }

    #[test]
    fn truncated_images() {
        let mut bytes = header(IMAGE_MAGIC, &[2, 28, 28]);
        bytes.extend(std::iter::repeat(0u8).take(784));
        assert!(matches!(parse_idx_images(&bytes), Err(MnistError::TruncatedFile { .. })));
    }

    #[test]
    fn parses_labels() {
        let mut bytes = header(LABEL_MAGIC, &[3]);
        bytes.extend([0, 1, 0]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![0, 1, 0]);
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(MnistError::TruncatedFile { .. })));
        let mut bad = header(LABEL_MAGIC, &[1]);
        bad.push(10);
        assert!(matches!(parse_idx_labels(&bad), Err(MnistError::LabelOutOfRange { index: 0, label: 10 })));
    }

    #[test]
    fn downscale_examples() {
        let ones = Image::filled(28, 28, 1.0);
        assert_eq!(downscale14(&ones).unwrap(), Image::filled(14, 14, 1.0));

        let mut odd = Image::filled(28, 28, 0.0);
        odd.set(0, 1, 1.0);
        assert_eq!(downscale14(&odd).unwrap(), Image::filled(14, 14, 0.0));

        let mut even = Image::filled(28, 28, 0.0);
        even.set(2, 2, 1.0);
        let mut expected = Image::filled(14, 14, 0.0);
        expected.set(1, 1, 1.0);
        assert_eq!(downscale14(&even).unwrap(), expected);

        assert!(matches!(
            downscale14(&Image::filled(14, 14, 0.0)),
            Err(MnistError::WrongSize { .. })
        ));
    }

    fn toy_set() -> LabeledSet {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            images.push(Image::filled(28, 28, i as f64 / 40.0));
            labels.push((i % 4) as u8);
        }
        LabeledSet::new(images, labels, Split::Test).unwrap()
    }

    #[test]
    fn training_selection() {
        let set = toy_set();
        let a = select_training_examples(&set, &[0, 1], 7).unwrap();
        let b = select_training_examples(&set, &[0, 1], 7).unwrap();
        assert_eq!(a.iter().map(|t| t.source_index).collect::<Vec<_>>(),
                   b.iter().map(|t| t.source_index).collect::<Vec<_>>());
        let four = select_training_examples(&set, &[0, 1, 2, 3], 3).unwrap();
        assert_eq!(four.iter().map(|t| t.class).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(four.iter().all(|t| t.image.width == 14 && set.labels[t.source_index] == t.class));
        assert!(matches!(select_training_examples(&set, &[9], 1), Err(MnistError::ClassAbsent(9))));
    }

    #[test]
    fn eval_set_split() {
        let set = toy_set();
        let data = prepare_task_data(&set, &[0, 1], 8, 5).unwrap();
        assert_eq!(data.eval.labels.iter().filter(|&&l| l == 0).count(), 4);
        assert_eq!(data.eval.labels.iter().filter(|&&l| l == 1).count(), 4);
        for t in &data.train {
            assert!(!data.eval.source_index.contains(&t.source_index));
        }
        assert!(matches!(
            build_eval_set(&set, &[0, 1], 3, 1, &[]),
            Err(MnistError::NotDivisible { .. })
        ));
        assert!(matches!(
            build_eval_set(&set, &[0, 1], 22, 1, &[]),
            Err(MnistError::InsufficientImages { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn idx_round_trip(raw in proptest::collection::vec(any::<u8>(), 16..5 * 16), labels in proptest::collection::vec(0u8..10, 0..20)) {
                let n = raw.len() / 16;
                let mut bytes = header(IMAGE_MAGIC, &[n as u32, 4, 4]);
                bytes.extend_from_slice(&raw[..n * 16]);
                let imgs = parse_idx_images(&bytes).unwrap();
                prop_assert!(imgs.iter().flat_map(|i| i.pixels.iter()).all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert_eq!(encode_idx_images(&imgs), bytes);

                let lbytes = encode_idx_labels(&labels);
                prop_assert_eq!(parse_idx_labels(&lbytes).unwrap(), labels);
            }

            #[test]
            fn downscale_reads_even_pixels(raw in proptest::collection::vec(0u8..=255, 784)) {
                let img = Image::new(28, 28, raw.iter().map(|&b| b as f64 / 255.0).collect());
                let small = downscale14(&img).unwrap();
                // any 28x28 pre-image agreeing on even pixels maps to the same output
                let mut pre = Image::filled(28, 28, 0.0);
                for i in 0..14 { for j in 0..14 { pre.set(2 * i, 2 * j, small.get(i, j)); } }
                prop_assert_eq!(downscale14(&pre).unwrap(), small);
            }
        }
    }
}
