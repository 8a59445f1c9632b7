#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsr_core::diffusion::{ConditionItem, Conditioning, SrModel, Target, UNetConfig};
use semsr_core::dsg::{ColorPalette, GuidanceBundle, GuidanceMode};
use semsr_core::gfm::FusionMode;
use semsr_core::slbp::prompt_for_map;
use semsr_core::text_embedding::{EmbeddingTable, HashTextEncoder, TextEncoder};
use semsr_core::{ClassIndex, LabelTaxonomy, SegmentationMap};

/// Small but complete model: two levels, control branch, fusion at both levels.
pub fn tiny_config() -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        res_blocks: 1,
        attention_levels: vec![1],
        text_dim: 16,
        text_tokens: 4,
        lr_dim: 8,
        lr_hidden: 8,
        lr_grid: 4,
        patch_size: 2,
        groups: 4,
        gfm_sites: vec![0, 1],
        fusion: FusionMode::Literal,
        scmap_hidden: 16,
        scmap_channels: 8,
        saft_hidden: 8,
        control: true,
        target: Target::Image,
    }
}

/// Under 1k parameters: one level, full resolution, cross-attention only in
/// the mid block, everything but the control branch.
pub fn micro_config() -> UNetConfig {
    UNetConfig {
        base_channels: 2,
        channel_multipliers: vec![1],
        res_blocks: 1,
        attention_levels: vec![],
        text_dim: 2,
        text_tokens: 2,
        lr_dim: 2,
        lr_hidden: 1,
        lr_grid: 2,
        patch_size: 1,
        groups: 1,
        gfm_sites: vec![0],
        fusion: FusionMode::Literal,
        scmap_hidden: 2,
        scmap_channels: 2,
        saft_hidden: 2,
        control: false,
        target: Target::Image,
    }
}

pub fn encoder(dim: usize) -> HashTextEncoder {
    HashTextEncoder::new(dim, 0)
}

pub fn table(dim: usize) -> EmbeddingTable {
    EmbeddingTable::build(&LabelTaxonomy::ade20k(), &encoder(dim)).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: &[u8]) -> SegmentationMap {
    let labels = (0..h * w)
        .map(|_| ClassIndex::new(classes[rng.random_range(0..classes.len())]).unwrap())
        .collect();
    SegmentationMap::from_labels(h, w, labels).unwrap()
}

/// Piecewise-constant map of axis-aligned blocks.
pub fn block_map(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: &[u8]) -> SegmentationMap {
    let (by, bx) = (rng.random_range(1..=h / 2), rng.random_range(1..=w / 2));
    let nb = h.div_ceil(by) * w.div_ceil(bx);
    let block: Vec<u8> = (0..nb).map(|_| classes[rng.random_range(0..classes.len())]).collect();
    let labels = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            ClassIndex::new(block[(y / by) * w.div_ceil(bx) + x / bx]).unwrap()
        })
        .collect();
    SegmentationMap::from_labels(h, w, labels).unwrap()
}

pub fn random_rgb(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

pub struct Batch {
    pub bundles: Vec<GuidanceBundle>,
    pub texts: Vec<Vec<f32>>,
    pub lrs: Vec<RgbImage>,
    pub hr: Tensor,
}

impl Batch {
    pub fn conditioning(&self, model: &SrModel) -> Conditioning {
        let items: Vec<ConditionItem<'_>> = (0..self.bundles.len())
            .map(|i| ConditionItem {
                bundle: &self.bundles[i],
                text: &self.texts[i],
                lr: &self.lrs[i],
            })
            .collect();
        model.conditioning(&items).unwrap()
    }
}

/// Random LR images with random label maps, prompts and HR targets.
pub fn random_batch(model: &SrModel, n: usize, lr_side: u32, seed: u64, mode: GuidanceMode) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = model.config();
    let tax = LabelTaxonomy::ade20k();
    let enc = encoder(cfg.text_dim);
    let (hh, hw) = model.output_dims(lr_side as usize, lr_side as usize);
    let scales = model.guidance_scales(hh, hw);
    let mut bundles = Vec::new();
    let mut texts = Vec::new();
    let mut lrs = Vec::new();
    let mut hrs = Vec::new();
    for i in 0..n {
        let map = block_map(&mut rng, lr_side as usize, lr_side as usize, &[0, 1, 2, 4, 34]);
        let prompt = prompt_for_map(&map, &tax, 0.0).unwrap();
        texts.push(semsr_core::diffusion::text_context(&prompt, &enc, cfg.text_tokens).unwrap());
        bundles.push(
            GuidanceBundle::from_map(format!("item{i}"), map, prompt, &ColorPalette::standard(), &scales, mode).unwrap(),
        );
        lrs.push(random_rgb(&mut rng, lr_side, lr_side));
        let hr = random_rgb(&mut rng, hw as u32, hh as u32);
        hrs.push(semsr_core::imageops::rgb_to_tensor(&hr, model.dtype(), model.device()).unwrap());
    }
    Batch {
        bundles,
        texts,
        lrs,
        hr: Tensor::stack(&hrs, 0).unwrap(),
    }
}

pub fn model(cfg: &UNetConfig, dtype: DType, seed: u64) -> SrModel {
    SrModel::new(cfg, 4, &table(cfg.text_dim), seed, dtype, &Device::Cpu).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    match t.dtype() {
        DType::F32 => t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits() as u64).collect(),
        _ => flat(t).iter().map(|v| v.to_bits()).collect(),
    }
}

/// Adds `N(0, std)` to every parameter so zero-initialized parts carry signal.
pub fn perturb_params(model: &SrModel, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, var) in model.store().vars() {
        let noise = semsr_core::seed::normal_tensor(&mut rng, var.dims(), var.dtype(), var.device()).unwrap();
        var.set(&(var.as_tensor() + (noise * std).unwrap()).unwrap()).unwrap();
    }
}

#[derive(Debug)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
}

/// Central-difference check of the training loss at random coordinates.
pub fn grad_check(m: &semsr_core::SrModel, batch: &Batch, coords: usize, seed: u64) -> GradReport {
    use rand::Rng;
    let cond = batch.conditioning(m);
    let s = semsr_core::diffusion::ScheduleConfig::default().build().unwrap();
    let loss_at = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        semsr_core::diffusion::training_loss(m, &batch.hr, &cond, &s, &mut rng).unwrap()
    };
    let grads = loss_at().backward().unwrap();
    let vars = m.store().vars();
    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    for _ in 0..coords {
        let (_, var) = &vars[pick.random_range(0..vars.len())];
        let n = var.elem_count();
        let k = pick.random_range(0..n);
        let analytic = grads.get(var).map(|g| flat(g)[k]).unwrap_or(0.0);
        let orig = var.as_tensor().copy().unwrap();
        let shifted = |d: f64| {
            let mut v = flat(&orig);
            v[k] += d;
            var.set(&Tensor::from_vec(v, orig.dims(), orig.device()).unwrap()).unwrap();
            let l = loss_at().to_scalar::<f64>().unwrap();
            var.set(&orig).unwrap();
            l
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    GradReport { max_rel, checked: coords }
}

pub fn encode_dim(enc: &dyn TextEncoder) -> usize {
    enc.dim()
}
