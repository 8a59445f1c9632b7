//! Dense guidance: colorized masks, label fields at every feature scale, and
//! the prompt, bundled per image.
//!
//! Spatial variants are always produced by resampling the label field and
//! then colorizing or looking up embeddings, so region boundaries never blend.

use std::collections::HashMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::{segment, ImageInput, SegmentationMap, SegmenterBackend};
use crate::slbp::{Prompt, PromptSource};
use crate::taxonomy::{ClassIndex, LabelTaxonomy, NUM_CLASSES};

/// One color per class plus black for unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorPalette {
    colors: Vec<[u8; 3]>,
}

impl ColorPalette {
    /// Hues advance by the golden-ratio conjugate so neighbouring indices are
    /// far apart; saturation and value cycle to keep 8-bit colors distinct.
    pub fn standard() -> Self {
        const GOLDEN: f64 = 0.618_033_988_749_895;
        let mut colors: Vec<[u8; 3]> = (0..NUM_CLASSES)
            .map(|i| {
                let h = (i as f64 * GOLDEN).fract();
                let s = [0.90, 0.65, 0.45][i % 3];
                let v = [1.0, 0.80][(i / 3) % 2];
                hsv_to_rgb(h, s, v)
            })
            .collect();
        colors.push([0, 0, 0]);
        ColorPalette { colors }
    }

    pub fn color(&self, label: ClassIndex) -> [u8; 3] {
        self.colors[label.row()]
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }
}

impl Default for ColorPalette {
    fn default() -> Self {
        Self::standard()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let q8 = |c: f64| (c * 255.0).round().clamp(0.0, 255.0) as u8;
    [q8(r), q8(g), q8(b)]
}

pub fn colorize_mask(map: &SegmentationMap, palette: &ColorPalette) -> RgbImage {
    let mut img = RgbImage::new(map.width() as u32, map.height() as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        *p = Rgb(palette.color(map.labels()[i]));
    }
    img
}

/// Inverse of [`colorize_mask`]; fails on colors outside the palette.
pub fn decolorize_mask(img: &RgbImage, palette: &ColorPalette) -> Result<SegmentationMap> {
    let lookup: HashMap<[u8; 3], ClassIndex> = palette
        .colors()
        .iter()
        .enumerate()
        .map(|(row, &c)| {
            let idx = if row == NUM_CLASSES {
                ClassIndex::UNLABELED
            } else {
                ClassIndex::new(row as u8).unwrap()
            };
            (c, idx)
        })
        .collect();
    let labels = img
        .pixels()
        .map(|p| {
            lookup
                .get(&p.0)
                .copied()
                .ok_or_else(|| Error::Validation(format!("color {:?} is not in the palette", p.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    SegmentationMap::from_labels(img.height() as usize, img.width() as usize, labels)
}

/// Which dense conditions reach the fusion modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    #[default]
    Full,
    /// Segmentation mask removed; only the SCMap branch modulates features.
    NoMask,
    /// SCMap removed; only the mask branch modulates features.
    NoScmap,
    None,
}

impl GuidanceMode {
    pub fn uses_mask(self) -> bool {
        matches!(self, GuidanceMode::Full | GuidanceMode::NoScmap)
    }

    pub fn uses_scmap(self) -> bool {
        matches!(self, GuidanceMode::Full | GuidanceMode::NoMask)
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(GuidanceMode::Full),
            "no-mask" => Ok(GuidanceMode::NoMask),
            "no-scmap" => Ok(GuidanceMode::NoScmap),
            "none" => Ok(GuidanceMode::None),
            other => Err(Error::Usage(format!(
                "unknown guidance mode `{other}` (expected full, no-mask, no-scmap or none)"
            ))),
        }
    }
}

/// Guidance resampled to one fusion-site resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGuidance {
    pub dims: (usize, usize),
    pub labels: SegmentationMap,
    pub mask_rgb: RgbImage,
}

/// Everything the denoiser needs from segmentation for one image. The SCMap
/// is carried implicitly by the label fields; the model expands it through
/// its embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceBundle {
    pub id: String,
    pub prompt: Prompt,
    pub labels: SegmentationMap,
    pub mask_rgb: RgbImage,
    pub per_scale: Vec<ScaleGuidance>,
    pub mode: GuidanceMode,
}

impl GuidanceBundle {
    pub fn from_map(
        id: impl Into<String>,
        labels: SegmentationMap,
        prompt: Prompt,
        palette: &ColorPalette,
        scales: &[(usize, usize)],
        mode: GuidanceMode,
    ) -> Result<Self> {
        let per_scale = scales
            .iter()
            .map(|&(h, w)| {
                let resized = labels.resize_labels(h, w)?;
                Ok(ScaleGuidance {
                    dims: (h, w),
                    mask_rgb: colorize_mask(&resized, palette),
                    labels: resized,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GuidanceBundle {
            id: id.into(),
            prompt,
            mask_rgb: colorize_mask(&labels, palette),
            labels,
            per_scale,
            mode,
        })
    }

    pub fn scale(&self, dims: (usize, usize)) -> Option<&ScaleGuidance> {
        self.per_scale.iter().find(|s| s.dims == dims)
    }

    /// Writes `<id>_mask.png` and `<id>_prompt.txt` under `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.mask_rgb.save(dir.join(format!("{}_mask.png", self.id)))?;
        let p = dir.join(format!("{}_prompt.txt", self.id));
        std::fs::write(&p, &self.prompt.text).map_err(|e| Error::io(&p, e))
    }
}

/// The backends needed to turn an LR image into a guidance bundle.
pub struct GuidanceBackends<'a> {
    pub segmenter: &'a dyn SegmenterBackend,
    pub taxonomy: &'a LabelTaxonomy,
    pub prompts: &'a PromptSource,
    pub palette: &'a ColorPalette,
}

pub fn build_guidance(
    input: ImageInput<'_>,
    backends: &GuidanceBackends<'_>,
    scales: &[(usize, usize)],
    mode: GuidanceMode,
) -> Result<GuidanceBundle> {
    let labels = segment(backends.segmenter, input)?;
    let prompt = backends.prompts.prompt(input.id, &labels, backends.taxonomy)?;
    GuidanceBundle::from_map(input.id, labels, prompt, backends.palette, scales, mode)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;
    use crate::segmentation::ToySegmenter;

    #[test]
    fn palette_is_injective_with_black_unlabeled() {
        let p = ColorPalette::standard();
        let set: HashSet<[u8; 3]> = p.colors().iter().copied().collect();
        assert_eq!(set.len(), 151);
        assert_eq!(p.color(ClassIndex::UNLABELED), [0, 0, 0]);
    }

    #[test]
    fn unlabeled_is_black() {
        let m = SegmentationMap::uniform(3, 3, ClassIndex::UNLABELED);
        let img = colorize_mask(&m, &ColorPalette::standard());
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn two_classes_two_colors() {
        let m = SegmentationMap::from_raw(2, 2, &[3, 3, 7, 7]).unwrap();
        let img = colorize_mask(&m, &ColorPalette::standard());
        let colors: HashSet<[u8; 3]> = img.pixels().map(|p| p.0).collect();
        assert_eq!(colors.len(), 2);
        assert_eq!(img.get_pixel(0, 0), img.get_pixel(1, 0));
        assert_ne!(img.get_pixel(0, 0), img.get_pixel(0, 1));
    }

    #[test]
    fn uniform_image_pipeline() {
        let img = RgbImage::from_pixel(16, 16, Rgb([90, 90, 90]));
        let tax = LabelTaxonomy::ade20k();
        let seg = ToySegmenter::default();
        let prompts = PromptSource::Labels { min_area_fraction: 0.0 };
        let palette = ColorPalette::standard();
        let backends = GuidanceBackends { segmenter: &seg, taxonomy: &tax, prompts: &prompts, palette: &palette };
        let b = build_guidance(ImageInput { id: "u", image: &img }, &backends, &[(16, 16), (8, 8)], GuidanceMode::Full).unwrap();
        assert_eq!(b.prompt.labels.len(), 1);
        assert_eq!(b.prompt.text, "tree");
        let colors: HashSet<[u8; 3]> = b.mask_rgb.pixels().map(|p| p.0).collect();
        assert_eq!(colors.len(), 1);
        assert_eq!(b.per_scale[0].labels, b.labels);
        assert_eq!(b.per_scale[0].mask_rgb, b.mask_rgb);
        assert_eq!(b.scale((8, 8)).unwrap().labels.label_set(), b.labels.label_set());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("no-scmap".parse::<GuidanceMode>().unwrap(), GuidanceMode::NoScmap);
        assert!("bogus".parse::<GuidanceMode>().is_err());
        assert!(GuidanceMode::NoScmap.uses_mask() && !GuidanceMode::NoScmap.uses_scmap());
    }

    proptest! {
        #[test]
        fn colorize_round_trip(raw in prop::collection::vec(prop_oneof![0u8..150, Just(255u8)], 36)) {
            let m = SegmentationMap::from_raw(6, 6, &raw).unwrap();
            let palette = ColorPalette::standard();
            prop_assert_eq!(decolorize_mask(&colorize_mask(&m, &palette), &palette).unwrap(), m);
        }

        #[test]
        fn scales_never_invent_labels(raw in prop::collection::vec(0u8..6, 64), h in 1usize..12, w in 1usize..12) {
            let m = SegmentationMap::from_raw(8, 8, &raw).unwrap();
            let palette = ColorPalette::standard();
            let b = GuidanceBundle::from_map("r", m.clone(), Prompt::default(), &palette, &[(h, w), (4, 4)], GuidanceMode::Full).unwrap();
            let base_colors: HashSet<[u8; 3]> = b.mask_rgb.pixels().map(|p| p.0).collect();
            for s in &b.per_scale {
                prop_assert!(s.labels.label_set().is_subset(&m.label_set()));
                prop_assert!(s.mask_rgb.pixels().all(|p| base_colors.contains(&p.0)));
            }
        }
    }
}
