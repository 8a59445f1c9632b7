//! A small pixel-space UNet with text and LR cross-attention, an optional
//! control encoder, and guidance-fusion sites in the decoder.

use std::collections::BTreeSet;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dsg::GuidanceMode;
use crate::error::{Error, Result};
use crate::gfm::{FusionMode, Gfm, GfmTrace};
use crate::nn::{
    pixel_shuffle, pixel_unshuffle, timestep_embedding, upsample2, Conv2d, CrossAttention, GroupNorm, Linear,
    Params,
};

/// What the network is trained to denoise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// The HR image itself.
    #[default]
    Image,
    /// HR minus the bicubic upsampling of the LR input.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks: usize,
    /// Levels (0 = full resolution) whose blocks get text and LR cross-attention.
    /// The mid block always has both.
    pub attention_levels: Vec<usize>,
    pub text_dim: usize,
    pub text_tokens: usize,
    pub lr_dim: usize,
    pub lr_hidden: usize,
    pub lr_grid: usize,
    /// Space-to-depth factor applied before the first convolution.
    pub patch_size: usize,
    pub groups: usize,
    /// Decoder levels that apply a guidance fusion module.
    pub gfm_sites: Vec<usize>,
    pub fusion: FusionMode,
    pub scmap_hidden: usize,
    pub scmap_channels: usize,
    pub saft_hidden: usize,
    pub control: bool,
    pub target: Target,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            res_blocks: 1,
            attention_levels: vec![1],
            text_dim: 1024,
            text_tokens: 8,
            lr_dim: 64,
            lr_hidden: 32,
            lr_grid: 4,
            patch_size: 2,
            groups: 8,
            gfm_sites: vec![0, 1],
            fusion: FusionMode::Literal,
            scmap_hidden: crate::scmap::DEFAULT_HIDDEN_CHANNELS,
            scmap_channels: crate::scmap::DEFAULT_COMPRESSED_CHANNELS,
            saft_hidden: crate::gfm::DEFAULT_SAFT_HIDDEN,
            control: true,
            target: Target::Image,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Required divisor of the input height and width.
    pub fn size_multiple(&self) -> usize {
        self.patch_size << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels() == 0 || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be non-empty and positive".into());
        }
        if self.base_channels == 0 || self.res_blocks == 0 || self.patch_size == 0 {
            return bad("base_channels, res_blocks and patch_size must be positive".into());
        }
        if self.text_dim == 0 || self.text_tokens == 0 || self.lr_dim == 0 || self.lr_hidden == 0 {
            return bad("context dimensions must be positive".into());
        }
        for &l in self.attention_levels.iter().chain(&self.gfm_sites) {
            if l >= self.levels() {
                return bad(format!("level {l} does not exist ({} levels)", self.levels()));
            }
        }
        let unique: BTreeSet<_> = self.gfm_sites.iter().collect();
        if unique.len() != self.gfm_sites.len() {
            return bad("gfm_sites has duplicates".into());
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by {m} (patch size x 2^(levels-1))"
            )));
        }
        Ok(())
    }

    /// Feature resolution at a decoder level for an `h x w` input.
    pub fn level_dims(&self, level: usize, h: usize, w: usize) -> (usize, usize) {
        (h / (self.patch_size << level), w / (self.patch_size << level))
    }

    /// Resolutions of the configured fusion sites, in `gfm_sites` order.
    pub fn site_dims(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.gfm_sites.iter().map(|&l| self.level_dims(l, h, w)).collect()
    }

    fn time_dim(&self) -> usize {
        4 * self.base_channels
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    out: usize,
}

impl ResBlock {
    fn new(p: Params<'_>, cin: usize, cout: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(ResBlock {
            norm1: GroupNorm::new(p.pp("norm1"), cin, groups)?,
            conv1: Conv2d::new(p.pp("conv1"), cin, cout, 3, 1)?,
            time: Linear::new(p.pp("time"), time_dim, 2 * cout)?,
            norm2: GroupNorm::new(p.pp("norm2"), cout, groups)?,
            conv2: Conv2d::new(p.pp("conv2"), cout, cout, 3, 1)?,
            skip: if cin == cout {
                None
            } else {
                Some(Conv2d::new(p.pp("skip"), cin, cout, 1, 1)?)
            },
            out: cout,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        // Scale-shift conditioning after the second norm.
        let t = self.time.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let (scale, shift) = (t.narrow(1, 0, self.out)?, t.narrow(1, self.out, self.out)?);
        let h = self.norm2.forward(&h)?.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        let h = self.conv2.forward(&silu(&h)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

#[derive(Debug, Clone)]
struct Attention {
    text: CrossAttention,
    lr: CrossAttention,
}

impl Attention {
    fn new(p: Params<'_>, channels: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Attention {
            text: CrossAttention::new(p.pp("text"), channels, cfg.text_dim, cfg.groups)?,
            lr: CrossAttention::new(p.pp("lr"), channels, cfg.lr_dim, cfg.groups)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Contexts<'_>) -> Result<Tensor> {
        let x = self.text.forward(x, ctx.text)?;
        self.lr.forward(&x, ctx.lr)
    }
}

/// Cross-attention contexts shared by every attention site.
#[derive(Debug, Clone, Copy)]
pub struct Contexts<'a> {
    /// `(B, text_tokens, text_dim)`
    pub text: &'a Tensor,
    /// `(B, lr_tokens, lr_dim)`
    pub lr: &'a Tensor,
}

#[derive(Debug, Clone)]
struct Block {
    res: ResBlock,
    attn: Option<Attention>,
}

impl Block {
    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Contexts<'_>) -> Result<Tensor> {
        let h = self.res.forward(x, temb)?;
        match &self.attn {
            Some(a) => a.forward(&h, ctx),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
struct Mid {
    res1: ResBlock,
    attn: Attention,
    res2: ResBlock,
}

impl Mid {
    fn new(p: Params<'_>, ch: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Mid {
            res1: ResBlock::new(p.pp("res1"), ch, ch, cfg.time_dim(), cfg.groups)?,
            attn: Attention::new(p.pp("attn"), ch, cfg)?,
            res2: ResBlock::new(p.pp("res2"), ch, ch, cfg.time_dim(), cfg.groups)?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Contexts<'_>) -> Result<Tensor> {
        let h = self.res1.forward(x, temb)?;
        let h = self.attn.forward(&h, ctx)?;
        self.res2.forward(&h, temb)
    }
}

/// Downsampling path plus mid block. Used both by the UNet and, with its own
/// weights and a wider input, by the control branch.
#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv2d,
    levels: Vec<(Vec<Block>, Option<Conv2d>)>,
    mid: Mid,
}

impl Encoder {
    fn new(p: Params<'_>, in_channels: usize, cfg: &UNetConfig) -> Result<Self> {
        let conv_in = Conv2d::new(p.pp("conv_in"), in_channels, cfg.base_channels, 3, 1)?;
        let mut levels = Vec::new();
        let mut ch = cfg.base_channels;
        for l in 0..cfg.levels() {
            let pl = p.pp(format!("down{l}"));
            let out = cfg.channels(l);
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks {
                blocks.push(Block {
                    res: ResBlock::new(pl.pp(format!("res{r}")), ch, out, cfg.time_dim(), cfg.groups)?,
                    attn: if cfg.attention_levels.contains(&l) {
                        Some(Attention::new(pl.pp(format!("attn{r}")), out, cfg)?)
                    } else {
                        None
                    },
                });
                ch = out;
            }
            let down = if l + 1 < cfg.levels() {
                Some(Conv2d::new(pl.pp("down"), ch, ch, 3, 2)?)
            } else {
                None
            };
            levels.push((blocks, down));
        }
        Ok(Encoder {
            conv_in,
            levels,
            mid: Mid::new(p.pp("mid"), ch, cfg)?,
        })
    }

    /// Returns the per-level skip features and the mid-block output.
    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Contexts<'_>) -> Result<(Vec<Tensor>, Tensor)> {
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.levels.len());
        for (blocks, down) in &self.levels {
            for b in blocks {
                h = b.forward(&h, temb, ctx)?;
            }
            skips.push(h.clone());
            if let Some(d) = down {
                h = d.forward(&h)?;
            }
        }
        let mid = self.mid.forward(&h, temb, ctx)?;
        Ok((skips, mid))
    }
}

/// Encoder copy over `(x_t, upsampled LR)` whose features enter the UNet
/// through zero-initialized 1x1 projections.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    encoder: Encoder,
    skip_proj: Vec<Conv2d>,
    mid_proj: Conv2d,
}

impl ControlBranch {
    fn new(p: Params<'_>, cfg: &UNetConfig) -> Result<Self> {
        let pp = cfg.patch_size * cfg.patch_size;
        let skip_proj = (0..cfg.levels())
            .map(|l| Conv2d::zeros(p.pp(format!("proj{l}")), cfg.channels(l), cfg.channels(l)))
            .collect::<Result<_>>()?;
        let last = cfg.channels(cfg.levels() - 1);
        Ok(ControlBranch {
            encoder: Encoder::new(p.pp("encoder"), 6 * pp, cfg)?,
            skip_proj,
            mid_proj: Conv2d::zeros(p.pp("proj_mid"), last, last)?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Contexts<'_>) -> Result<(Vec<Tensor>, Tensor)> {
        let (skips, mid) = self.encoder.forward(x, temb, ctx)?;
        let skips = skips
            .iter()
            .zip(&self.skip_proj)
            .map(|(s, p)| p.forward(s))
            .collect::<Result<_>>()?;
        Ok((skips, self.mid_proj.forward(&mid)?))
    }
}

/// Guidance for one fusion site: the colorized mask in `[0, 1]` and the
/// compressed SCMap, both `(B, *, h, w)` at the site resolution.
#[derive(Debug, Clone, Default)]
pub struct SiteGuidance {
    pub mask: Option<Tensor>,
    pub scmap: Option<Tensor>,
}

/// Per-call options of [`UNet::forward`].
#[derive(Debug, Clone, Copy)]
pub struct UNetInputs<'a> {
    pub x_t: &'a Tensor,
    pub timesteps: &'a [usize],
    pub contexts: Contexts<'a>,
    /// Upsampled LR image for the control branch; `None` detaches the branch.
    pub control: Option<&'a Tensor>,
    /// Guidance in `gfm_sites` order; `None` bypasses every fusion module.
    pub guidance: Option<(&'a [SiteGuidance], GuidanceMode)>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    time1: Linear,
    time2: Linear,
    encoder: Encoder,
    control: Option<ControlBranch>,
    decoder: Vec<(Vec<Block>, Option<Conv2d>)>,
    gfm: Vec<Gfm>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(p: Params<'_>, cfg: &UNetConfig, trace: Arc<GfmTrace>) -> Result<Self> {
        cfg.validate()?;
        let pp = cfg.patch_size * cfg.patch_size;
        let td = cfg.time_dim();
        let encoder = Encoder::new(p.pp("encoder"), 3 * pp, cfg)?;
        let mut decoder = Vec::new();
        let mut ch = cfg.channels(cfg.levels() - 1);
        for l in (0..cfg.levels()).rev() {
            let pl = p.pp(format!("up{l}"));
            let out = cfg.channels(l);
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks {
                let cin = if r == 0 { ch + out } else { out };
                blocks.push(Block {
                    res: ResBlock::new(pl.pp(format!("res{r}")), cin, out, td, cfg.groups)?,
                    attn: if cfg.attention_levels.contains(&l) {
                        Some(Attention::new(pl.pp(format!("attn{r}")), out, cfg)?)
                    } else {
                        None
                    },
                });
            }
            ch = out;
            let up = if l > 0 {
                Some(Conv2d::new(pl.pp("up"), ch, cfg.channels(l - 1), 3, 1)?)
            } else {
                None
            };
            if up.is_some() {
                ch = cfg.channels(l - 1);
            }
            decoder.push((blocks, up));
        }
        let gfm = cfg
            .gfm_sites
            .iter()
            .map(|&l| {
                Gfm::new(
                    p.pp(format!("gfm{l}")),
                    cfg.channels(l),
                    cfg.scmap_channels,
                    cfg.saft_hidden,
                    cfg.fusion,
                    trace.clone(),
                )
            })
            .collect::<Result<_>>()?;
        Ok(UNet {
            time1: Linear::new(p.pp("time1"), cfg.base_channels, td)?,
            time2: Linear::new(p.pp("time2"), td, td)?,
            control: if cfg.control {
                Some(ControlBranch::new(p.pp("control"), cfg)?)
            } else {
                None
            },
            norm_out: GroupNorm::new(p.pp("norm_out"), cfg.channels(0), cfg.groups)?,
            conv_out: Conv2d::new(p.pp("conv_out"), cfg.channels(0), 3 * pp, 3, 1)?,
            cfg: cfg.clone(),
            encoder,
            decoder,
            gfm,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn has_control(&self) -> bool {
        self.control.is_some()
    }

    pub fn forward(&self, inp: UNetInputs<'_>) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (b, c, h, w) = inp.x_t.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        cfg.check_input(h, w)?;
        if inp.timesteps.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch {b}", inp.timesteps.len())));
        }
        let dtype = inp.x_t.dtype();
        let dev = inp.x_t.device();
        let temb = timestep_embedding(inp.timesteps, cfg.base_channels, dtype, dev)?;
        let temb = silu(&self.time2.forward(&silu(&self.time1.forward(&temb)?)?)?)?;
        let ctx = &inp.contexts;
        let x = pixel_unshuffle(inp.x_t, cfg.patch_size)?;
        let (mut skips, mut h_mid) = self.encoder.forward(&x, &temb, ctx)?;

        if let (Some(branch), Some(cond)) = (&self.control, inp.control) {
            if cond.dims4()? != (b, 3, h, w) {
                return Err(Error::Shape(format!(
                    "control image {:?} does not match x_t {:?}",
                    cond.dims(),
                    inp.x_t.dims()
                )));
            }
            let cx = Tensor::cat(&[&x, &pixel_unshuffle(cond, cfg.patch_size)?], 1)?;
            let (cskips, cmid) = branch.forward(&cx, &temb, ctx)?;
            for (s, cs) in skips.iter_mut().zip(&cskips) {
                *s = (&*s + cs)?;
            }
            h_mid = (h_mid + cmid)?;
        }

        if let Some((sites, _)) = inp.guidance {
            if sites.len() != self.gfm.len() {
                return Err(Error::Config(format!(
                    "{} guidance sites supplied, model has {}",
                    sites.len(),
                    self.gfm.len()
                )));
            }
        }

        let mut hcur = h_mid;
        for (i, (blocks, up)) in self.decoder.iter().enumerate() {
            let l = cfg.levels() - 1 - i;
            hcur = Tensor::cat(&[&hcur, &skips[l]], 1)?;
            for blk in blocks {
                hcur = blk.forward(&hcur, &temb, ctx)?;
            }
            if let Some((sites, mode)) = inp.guidance {
                if let Some(k) = cfg.gfm_sites.iter().position(|&s| s == l) {
                    let site = &sites[k];
                    hcur = self.gfm[k].forward(&hcur, site.mask.as_ref(), site.scmap.as_ref(), mode)?;
                }
            }
            if let Some(conv) = up {
                hcur = conv.forward(&upsample2(&hcur)?)?;
            }
        }
        let out = self.conv_out.forward(&silu(&self.norm_out.forward(&hcur)?)?)?;
        pixel_shuffle(&out, cfg.patch_size)
    }
}

/// Convenience for tests: zero contexts of the configured shapes.
pub fn zero_contexts(cfg: &UNetConfig, lr_tokens: usize, batch: usize, dtype: DType, dev: &Device) -> Result<(Tensor, Tensor)> {
    Ok((
        Tensor::zeros((batch, cfg.text_tokens, cfg.text_dim), dtype, dev)?,
        Tensor::zeros((batch, lr_tokens, cfg.lr_dim), dtype, dev)?,
    ))
}
