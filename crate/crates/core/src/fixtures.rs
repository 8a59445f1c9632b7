//! Deterministic synthetic scenes for smoke runs, tests and benchmarks.
//!
//! Each scene has sky, ground, buildings with windows and round trees, in
//! flat colors whose luma falls into distinct bands of the toy segmenter.

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::seed::rng;

const SKY: [u8; 3] = [170, 210, 250];
const GROUND: [u8; 3] = [50, 50, 56];
const BUILDING: [u8; 3] = [165, 150, 140];
const WINDOW: [u8; 3] = [90, 85, 80];
const TREE: [u8; 3] = [40, 125, 45];

pub fn synthetic_scene(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut r = rng(seed);
    let mut img = RgbImage::from_pixel(width, height, Rgb(SKY));
    let horizon = (height as f64 * r.random_range(0.55..0.75)) as u32;
    fill_rect(&mut img, 0, horizon, width, height, GROUND);
    let buildings = r.random_range(1..=3);
    for _ in 0..buildings {
        let bw = (width as f64 * r.random_range(0.15..0.3)) as u32;
        let bh = (height as f64 * r.random_range(0.25..0.5)) as u32;
        let x0 = r.random_range(0..width.saturating_sub(bw).max(1));
        let y0 = horizon.saturating_sub(bh);
        fill_rect(&mut img, x0, y0, x0 + bw, horizon, BUILDING);
        let step = (width / 16).max(3);
        let mut wy = y0 + step / 2;
        while wy + 2 < horizon {
            let mut wx = x0 + step / 2;
            while wx + 2 < x0 + bw {
                fill_rect(&mut img, wx, wy, wx + 2, wy + 2, WINDOW);
                wx += step;
            }
            wy += step;
        }
    }
    let trees = r.random_range(1..=3);
    for _ in 0..trees {
        let radius = height as f64 * r.random_range(0.06..0.12);
        let cx = r.random_range(0.0..width as f64);
        let cy = horizon as f64 - radius * 0.6;
        fill_disc(&mut img, cx, cy, radius, TREE);
    }
    img
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3]) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

fn fill_disc(img: &mut RgbImage, cx: f64, cy: f64, radius: f64, color: [u8; 3]) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= radius * radius {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{ImageInput, SegmenterBackend, ToySegmenter};

    #[test]
    fn scenes_are_deterministic_and_distinct() {
        assert_eq!(synthetic_scene(1, 64, 64), synthetic_scene(1, 64, 64));
        assert_ne!(synthetic_scene(1, 64, 64), synthetic_scene(2, 64, 64));
    }

    #[test]
    fn palette_hits_separate_toy_bands() {
        let seg = ToySegmenter::new(&ToySegmenter::DEFAULT_CLASSES).unwrap();
        let img = synthetic_scene(3, 64, 64);
        let map = seg.segment_image(ImageInput { id: "s", image: &img }).unwrap();
        assert!(map.label_set().len() >= 3, "{:?}", map.label_set());
    }
}
