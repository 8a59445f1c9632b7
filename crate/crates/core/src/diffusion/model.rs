//! The full conditional denoiser: UNet, control branch, fusion modules,
//! SCMap compressor and LR encoder, fed from guidance bundles.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use super::lr_encoder::{ConvLrEncoder, LrEncoder};
use super::unet::{Contexts, SiteGuidance, Target, UNet, UNetConfig, UNetInputs};
use crate::dsg::{GuidanceBundle, GuidanceMode};
use crate::error::{Error, Result};
use crate::gfm::GfmTrace;
use crate::imageops::{bicubic, rgb_to_tensor, rgb_to_unit_tensor};
use crate::nn::ParamStore;
use crate::scmap::SCMapCompressor;
use crate::slbp::Prompt;
use crate::text_embedding::{EmbeddingTable, TextEncoder};

/// Anything that predicts the added noise. Training and sampling are written
/// against this so oracles can stand in for the network.
pub trait Denoiser {
    fn predict_eps(&self, x_t: &Tensor, timesteps: &[usize], cond: &Conditioning) -> Result<Tensor>;
}

/// Token sequence for one prompt: the whole prompt, then each comma-separated
/// phrase, padded with the empty-text embedding up to `tokens`.
pub fn text_context(prompt: &Prompt, encoder: &dyn TextEncoder, tokens: usize) -> Result<Vec<f32>> {
    let mut texts: Vec<&str> = vec![prompt.text.as_str()];
    texts.extend(prompt.phrases());
    texts.truncate(tokens);
    let mut out = Vec::with_capacity(tokens * encoder.dim());
    for t in &texts {
        out.extend(encoder.encode(t)?);
    }
    let pad = encoder.encode("")?;
    for _ in texts.len()..tokens {
        out.extend_from_slice(&pad);
    }
    Ok(out)
}

/// Per-site inputs before the SCMap expansion.
#[derive(Debug, Clone)]
pub struct SiteLabels {
    pub dims: (usize, usize),
    /// `(B, 3, h, w)` colorized mask scaled to `[0, 1]`.
    pub mask: Tensor,
    /// `(B, h * w)` embedding-table rows, row-major per item.
    pub rows: Tensor,
}

/// One batch worth of conditions.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `(B, text_tokens, text_dim)`
    pub text: Tensor,
    /// `(B, 3, h, w)` LR input in `[-1, 1]`.
    pub lr: Tensor,
    /// `(B, 3, H, W)` bicubic upsampling of the LR input in `[-1, 1]`.
    pub lr_up: Tensor,
    pub sites: Vec<SiteLabels>,
    pub mode: GuidanceMode,
}

impl Conditioning {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.lr_up.dim(0)?)
    }

    /// Same conditions with the text tokens replaced (for guidance-free passes).
    pub fn with_text(&self, text: Tensor) -> Conditioning {
        Conditioning {
            text,
            ..self.clone()
        }
    }

    pub fn with_mode(&self, mode: GuidanceMode) -> Conditioning {
        Conditioning {
            mode,
            ..self.clone()
        }
    }

    /// The batch items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Conditioning> {
        let idx = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            (indices.len(),),
            self.lr.device(),
        )?;
        let pick = |t: &Tensor| -> Result<Tensor> { Ok(t.index_select(&idx, 0)?) };
        let sites = self
            .sites
            .iter()
            .map(|s| {
                Ok(SiteLabels {
                    dims: s.dims,
                    mask: pick(&s.mask)?,
                    rows: pick(&s.rows)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Conditioning {
            text: pick(&self.text)?,
            lr: pick(&self.lr)?,
            lr_up: pick(&self.lr_up)?,
            sites,
            mode: self.mode,
        })
    }
}

/// Inputs for one item of a batch.
#[derive(Debug, Clone, Copy)]
pub struct ConditionItem<'a> {
    pub bundle: &'a GuidanceBundle,
    /// Flattened `(text_tokens, text_dim)` context from [`text_context`].
    pub text: &'a [f32],
    pub lr: &'a RgbImage,
}

/// Which optional parts of the network run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSwitches {
    pub control: bool,
    pub gfm: bool,
}

impl ModelSwitches {
    pub const ALL: ModelSwitches = ModelSwitches {
        control: true,
        gfm: true,
    };
    pub const BARE: ModelSwitches = ModelSwitches {
        control: false,
        gfm: false,
    };
}

pub struct SrModel {
    cfg: UNetConfig,
    scale: usize,
    store: ParamStore,
    unet: UNet,
    compressor: SCMapCompressor,
    lr_encoder: Box<dyn LrEncoder>,
    table: Tensor,
    table_fingerprint: String,
    trace: Arc<GfmTrace>,
    switches: ModelSwitches,
}

impl SrModel {
    /// `scale` is the LR-to-HR factor the model is built for.
    pub fn new(
        cfg: &UNetConfig,
        scale: usize,
        table: &EmbeddingTable,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        if table.dim() != cfg.text_dim {
            return Err(Error::Config(format!(
                "embedding table has dim {}, model expects text_dim {}",
                table.dim(),
                cfg.text_dim
            )));
        }
        if scale == 0 {
            return Err(Error::Config("scale must be positive".into()));
        }
        let store = ParamStore::new(seed, dtype, device);
        let root = store.root();
        let trace = Arc::new(GfmTrace::default());
        let unet = UNet::new(root.pp("unet"), cfg, trace.clone())?;
        let compressor = SCMapCompressor::new(root.pp("compressor"), cfg.text_dim, cfg.scmap_hidden, cfg.scmap_channels)?;
        let lr_encoder = Box::new(ConvLrEncoder::new(root.pp("lr_encoder"), cfg.lr_hidden, cfg.lr_dim, cfg.lr_grid)?);
        Ok(SrModel {
            cfg: cfg.clone(),
            scale,
            compressor,
            lr_encoder,
            unet,
            table: table.to_tensor(dtype, device)?,
            table_fingerprint: table.fingerprint(),
            trace,
            switches: ModelSwitches {
                control: cfg.control,
                gfm: !cfg.gfm_sites.is_empty(),
            },
            store,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn trace(&self) -> &GfmTrace {
        &self.trace
    }

    pub fn table_fingerprint(&self) -> &str {
        &self.table_fingerprint
    }

    pub fn lr_encoder(&self) -> &dyn LrEncoder {
        self.lr_encoder.as_ref()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn switches(&self) -> ModelSwitches {
        self.switches
    }

    pub fn set_switches(&mut self, switches: ModelSwitches) {
        self.switches = switches;
    }

    /// HR dims for an LR input.
    pub fn output_dims(&self, lr_h: usize, lr_w: usize) -> (usize, usize) {
        (lr_h * self.scale, lr_w * self.scale)
    }

    /// Resolutions at which bundles must carry guidance, for an HR size.
    pub fn guidance_scales(&self, hr_h: usize, hr_w: usize) -> Vec<(usize, usize)> {
        self.cfg.site_dims(hr_h, hr_w)
    }

    /// Diffusion target for an HR batch: the image, or its residual over the
    /// bicubic upsampling.
    pub fn target_from(&self, hr: &Tensor, lr_up: &Tensor) -> Result<Tensor> {
        Ok(match self.cfg.target {
            Target::Image => hr.clone(),
            Target::Residual => (hr - lr_up)?,
        })
    }

    /// Image-space offset added to a denoised target.
    pub fn target_base(&self, cond: &Conditioning) -> Result<Option<Tensor>> {
        Ok(match self.cfg.target {
            Target::Image => None,
            Target::Residual => Some(cond.lr_up.clone()),
        })
    }

    pub fn conditioning(&self, items: &[ConditionItem<'_>]) -> Result<Conditioning> {
        let first = items
            .first()
            .ok_or_else(|| Error::Domain("empty conditioning batch".into()))?;
        let mode = first.bundle.mode;
        let (lw, lh) = first.lr.dimensions();
        let (hh, hw) = self.output_dims(lh as usize, lw as usize);
        self.cfg.check_input(hh, hw)?;
        let (dtype, dev) = (self.dtype(), self.device());
        let tn = self.cfg.text_tokens * self.cfg.text_dim;
        let scales = self.guidance_scales(hh, hw);
        let mut text = Vec::with_capacity(items.len());
        let mut lr = Vec::with_capacity(items.len());
        let mut lr_up = Vec::with_capacity(items.len());
        let mut masks: Vec<Vec<Tensor>> = vec![Vec::new(); scales.len()];
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); scales.len()];
        for item in items {
            if item.bundle.mode != mode {
                return Err(Error::Config("a batch must share one guidance mode".into()));
            }
            if item.lr.dimensions() != (lw, lh) {
                return Err(Error::Shape("a batch must share one LR size".into()));
            }
            if item.text.len() != tn {
                return Err(Error::Shape(format!(
                    "text context has {} values, expected {tn}",
                    item.text.len()
                )));
            }
            text.push(Tensor::from_slice(item.text, (self.cfg.text_tokens, self.cfg.text_dim), dev)?.to_dtype(dtype)?);
            lr.push(rgb_to_tensor(item.lr, dtype, dev)?);
            lr_up.push(rgb_to_tensor(&bicubic(item.lr, hw as u32, hh as u32), dtype, dev)?);
            for (k, &dims) in scales.iter().enumerate() {
                let g = item.bundle.scale(dims).ok_or_else(|| {
                    Error::Config(format!(
                        "bundle `{}` has no guidance at {}x{}",
                        item.bundle.id, dims.0, dims.1
                    ))
                })?;
                masks[k].push(rgb_to_unit_tensor(&g.mask_rgb, dtype, dev)?);
                rows[k].extend(g.labels.labels().iter().map(|l| l.row() as u32));
            }
        }
        let sites = scales
            .iter()
            .zip(masks.iter().zip(rows))
            .map(|(&dims, (m, r))| {
                Ok(SiteLabels {
                    dims,
                    mask: Tensor::stack(m, 0)?,
                    rows: Tensor::from_vec(r, (items.len(), dims.0 * dims.1), dev)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Conditioning {
            text: Tensor::stack(&text, 0)?,
            lr: Tensor::stack(&lr, 0)?,
            lr_up: Tensor::stack(&lr_up, 0)?,
            sites,
            mode,
        })
    }

    fn site_guidance(&self, cond: &Conditioning) -> Result<Vec<SiteGuidance>> {
        let compressed = if cond.mode.uses_scmap() {
            Some(self.compressor.forward_rows(&self.table)?)
        } else {
            None
        };
        let b = cond.batch()?;
        cond.sites
            .iter()
            .map(|s| {
                let scmap = match &compressed {
                    Some(c) => {
                        let (h, w) = s.dims;
                        let g = c.index_select(&s.rows.flatten_all()?, 0)?;
                        Some(g.reshape((b, h, w, c.dim(1)?))?.permute((0, 3, 1, 2))?.contiguous()?)
                    }
                    None => None,
                };
                Ok(SiteGuidance {
                    mask: cond.mode.uses_mask().then(|| s.mask.clone()),
                    scmap,
                })
            })
            .collect()
    }

    pub fn forward(&self, x_t: &Tensor, timesteps: &[usize], cond: &Conditioning, switches: ModelSwitches) -> Result<Tensor> {
        let lr_tokens = self.lr_encoder.encode(&cond.lr)?;
        let guidance = if switches.gfm {
            Some(self.site_guidance(cond)?)
        } else {
            None
        };
        self.unet.forward(UNetInputs {
            x_t,
            timesteps,
            contexts: Contexts {
                text: &cond.text,
                lr: &lr_tokens,
            },
            control: switches.control.then_some(&cond.lr_up),
            guidance: guidance.as_deref().map(|g| (g, cond.mode)),
        })
    }
}

impl Denoiser for SrModel {
    fn predict_eps(&self, x_t: &Tensor, timesteps: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.forward(x_t, timesteps, cond, self.switches)
    }
}
