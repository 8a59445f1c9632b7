//! Per-pixel semantic label maps and the backends that produce them.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::taxonomy::{ClassIndex, NUM_CLASSES};

/// Smallest side length accepted by [`segment`].
pub const MIN_SEGMENT_SIDE: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<ClassIndex>,
}

impl SegmentationMap {
    /// Builds a map from raw row-major label bytes, validating every label.
    pub fn from_raw(height: usize, width: usize, raw: &[u8]) -> Result<Self> {
        if raw.len() != height * width {
            return Err(Error::Shape(format!(
                "label buffer has {} entries, expected {height}x{width}",
                raw.len()
            )));
        }
        let labels = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                ClassIndex::new(v).map_err(|_| {
                    Error::Validation(format!(
                        "label {v} at pixel ({}, {}) is not a class index or the unlabeled sentinel",
                        i / width.max(1),
                        i % width.max(1)
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SegmentationMap {
            height,
            width,
            labels,
        })
    }

    pub fn from_labels(height: usize, width: usize, labels: Vec<ClassIndex>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label buffer has {} entries, expected {height}x{width}",
                labels.len()
            )));
        }
        Ok(SegmentationMap {
            height,
            width,
            labels,
        })
    }

    pub fn uniform(height: usize, width: usize, label: ClassIndex) -> Self {
        SegmentationMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[ClassIndex] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> ClassIndex {
        self.labels[y * self.width + x]
    }

    pub fn to_raw(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.get()).collect()
    }

    pub fn label_set(&self) -> BTreeSet<ClassIndex> {
        self.labels.iter().copied().collect()
    }

    /// Pixel counts indexed by embedding row (unlabeled last).
    pub fn row_counts(&self) -> [usize; NUM_CLASSES + 1] {
        let mut counts = [0usize; NUM_CLASSES + 1];
        for l in &self.labels {
            counts[l.row()] += 1;
        }
        counts
    }

    /// Nearest-neighbour resampling to `(height, width)`, sampling at pixel
    /// centres. Never produces a label absent from the input.
    pub fn resize_labels(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "target size {height}x{width} must be at least 1x1"
            )));
        }
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let src_y: Vec<usize> = (0..height)
            .map(|y| nearest_source(y, height, self.height))
            .collect();
        let src_x: Vec<usize> = (0..width)
            .map(|x| nearest_source(x, width, self.width))
            .collect();
        let mut labels = Vec::with_capacity(height * width);
        for &sy in &src_y {
            for &sx in &src_x {
                labels.push(self.get(sy, sx));
            }
        }
        Ok(SegmentationMap {
            height,
            width,
            labels,
        })
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.to_raw())
            .expect("buffer matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray_image().save(path)?;
        Ok(())
    }
}

fn nearest_source(dst: usize, dst_len: usize, src_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// Loads a single-channel 8-bit label PNG and checks its dimensions.
pub fn load_mask_file(path: &Path, expected_hw: (usize, usize)) -> Result<SegmentationMap> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Validation(format!(
                "{}: mask must be single-channel 8-bit, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let dims = (gray.height() as usize, gray.width() as usize);
    if dims != expected_hw {
        return Err(Error::Validation(format!(
            "{}: mask is {}x{}, expected {}x{}",
            path.display(),
            dims.0,
            dims.1,
            expected_hw.0,
            expected_hw.1
        )));
    }
    SegmentationMap::from_raw(dims.0, dims.1, gray.as_raw()).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        e => e,
    })
}

/// An image handed to a segmenter, with the identifier used by file-based backends.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub id: &'a str,
    pub image: &'a RgbImage,
}

/// A segmentation model. Implementations must be deterministic for a fixed
/// configuration and input.
pub trait SegmenterBackend: Send + Sync {
    fn name(&self) -> &str;

    fn segment_image(&self, input: ImageInput<'_>) -> Result<SegmentationMap>;
}

/// Runs `backend` on `input`, enforcing the size precondition and checking
/// that the result matches the image grid.
pub fn segment(backend: &dyn SegmenterBackend, input: ImageInput<'_>) -> Result<SegmentationMap> {
    let (w, h) = input.image.dimensions();
    if w < MIN_SEGMENT_SIDE || h < MIN_SEGMENT_SIDE {
        return Err(Error::Shape(format!(
            "image `{}` is {w}x{h}; segmentation needs at least {MIN_SEGMENT_SIDE}x{MIN_SEGMENT_SIDE}",
            input.id
        )));
    }
    let map = backend.segment_image(input)?;
    if map.dims() != (h as usize, w as usize) {
        return Err(Error::backend(
            backend.name(),
            format!(
                "returned a {}x{} map for a {h}x{w} image",
                map.height(),
                map.width()
            ),
        ));
    }
    Ok(map)
}

/// Deterministic test segmenter: quantizes luminance into equal bands and
/// assigns each band a fixed class.
#[derive(Debug, Clone)]
pub struct ToySegmenter {
    band_classes: Vec<ClassIndex>,
}

impl ToySegmenter {
    /// Default bands, darkest first: road, tree, building, sky.
    pub const DEFAULT_CLASSES: [u8; 4] = [6, 4, 1, 2];

    pub fn new(band_classes: &[u8]) -> Result<Self> {
        if band_classes.is_empty() || band_classes.len() > 256 {
            return Err(Error::Config(
                "toy segmenter needs between 1 and 256 bands".into(),
            ));
        }
        let band_classes = band_classes
            .iter()
            .map(|&c| ClassIndex::new(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(ToySegmenter { band_classes })
    }

    pub fn bands(&self) -> usize {
        self.band_classes.len()
    }

    fn classify(&self, rgb: [u8; 3]) -> ClassIndex {
        let luma = (299 * rgb[0] as u32 + 587 * rgb[1] as u32 + 114 * rgb[2] as u32) / 1000;
        let band = (luma as usize * self.band_classes.len()) / 256;
        self.band_classes[band]
    }
}

impl Default for ToySegmenter {
    fn default() -> Self {
        Self::new(&Self::DEFAULT_CLASSES).unwrap()
    }
}

impl SegmenterBackend for ToySegmenter {
    fn name(&self) -> &str {
        "toy"
    }

    fn segment_image(&self, input: ImageInput<'_>) -> Result<SegmentationMap> {
        let (w, h) = input.image.dimensions();
        let labels = input.image.pixels().map(|p| self.classify(p.0)).collect();
        SegmentationMap::from_labels(h as usize, w as usize, labels)
    }
}

/// Oracle backend: returns precomputed label maps stored as `<dir>/<id>.png`.
#[derive(Debug, Clone)]
pub struct FileSegmenter {
    dir: PathBuf,
}

impl FileSegmenter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FileSegmenter { dir: dir.into() }
    }
}

impl SegmenterBackend for FileSegmenter {
    fn name(&self) -> &str {
        "oracle"
    }

    fn segment_image(&self, input: ImageInput<'_>) -> Result<SegmentationMap> {
        let path = self.dir.join(format!("{}.png", input.id));
        if !path.exists() {
            return Err(Error::backend(
                self.name(),
                format!("no stored map at {}", path.display()),
            ));
        }
        let (w, h) = input.image.dimensions();
        load_mask_file(&path, (h as usize, w as usize))
            .map_err(|e| Error::backend(self.name(), e))
    }
}

/// Adapter for an out-of-process segmenter. `{input}` and `{output}` in the
/// argument list are replaced with an RGB PNG path and the label PNG path
/// the command must write.
#[derive(Debug, Clone)]
pub struct ExternalSegmenter {
    program: String,
    args: Vec<String>,
}

impl ExternalSegmenter {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        ExternalSegmenter {
            program: program.into(),
            args,
        }
    }
}

impl SegmenterBackend for ExternalSegmenter {
    fn name(&self) -> &str {
        "external"
    }

    fn segment_image(&self, input: ImageInput<'_>) -> Result<SegmentationMap> {
        let fail = |msg: String| Error::backend("external", msg);
        let tmp = tempfile::tempdir().map_err(|e| fail(e.to_string()))?;
        let in_path = tmp.path().join("input.png");
        let out_path = tmp.path().join("labels.png");
        input
            .image
            .save(&in_path)
            .map_err(|e| fail(e.to_string()))?;
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{input}", &in_path.to_string_lossy())
                    .replace("{output}", &out_path.to_string_lossy())
            })
            .collect();
        let output = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| fail(format!("could not run `{}`: {e}", self.program)))?;
        if !output.status.success() {
            return Err(fail(format!(
                "`{}` exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let (w, h) = input.image.dimensions();
        load_mask_file(&out_path, (h as usize, w as usize)).map_err(|e| fail(e.to_string()))
    }
}
