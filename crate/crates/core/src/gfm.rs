//! Guidance fusion: two semantic-adaptive feature transforms, one conditioned
//! on the colorized mask and one on the compressed SCMap, each predicting a
//! per-pixel scale and shift for a feature map. Their outputs are summed.
//!
//! Under [`FusionMode::Literal`] the two transformed features are added as-is
//! and each scale head starts at 0.5 so the sum is the identity at init.
//! [`FusionMode::Residual`] starts both heads at 1 and subtracts one copy of
//! the input instead.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dsg::GuidanceMode;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Params};

pub const DEFAULT_SAFT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `F' = F'_c + F'_sc`.
    #[default]
    Literal,
    /// `F' = F'_c + F'_sc - F`.
    Residual,
}

impl FusionMode {
    fn gamma_init(self) -> f64 {
        match self {
            FusionMode::Literal => 0.5,
            FusionMode::Residual => 1.0,
        }
    }
}

/// A pointwise encoder mapping a condition map to `(gamma, beta)`.
#[derive(Debug, Clone)]
pub struct SaftBlock {
    trunk: Conv2d,
    gamma_head: Conv2d,
    beta_head: Conv2d,
    in_channels: usize,
    channels: usize,
}

impl SaftBlock {
    /// Heads start with zero weights so gamma and beta are constant
    /// (`gamma_init` and 0) regardless of the condition.
    pub fn new(p: Params<'_>, in_channels: usize, hidden: usize, channels: usize, gamma_init: f64) -> Result<Self> {
        Ok(SaftBlock {
            trunk: Conv2d::new(p.pp("trunk"), in_channels, hidden, 1, 1)?,
            gamma_head: Conv2d::with_init(p.pp("gamma"), hidden, channels, 1, 1, Init::Const(0.0), Init::Const(gamma_init))?,
            beta_head: Conv2d::with_init(p.pp("beta"), hidden, channels, 1, 1, Init::Const(0.0), Init::Const(0.0))?,
            in_channels,
            channels,
        })
    }

    pub fn from_layers(trunk: Conv2d, gamma_head: Conv2d, beta_head: Conv2d, in_channels: usize) -> Self {
        let channels = gamma_head.out_channels();
        SaftBlock {
            trunk,
            gamma_head,
            beta_head,
            in_channels,
            channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Scale and shift maps, each `(B, C, H, W)`, for a `(B, in_channels, H, W)` condition.
    pub fn saft_params(&self, condition: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, _, _) = condition.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "SAFT condition has {c} channels, block expects {}",
                self.in_channels
            )));
        }
        let h = self.trunk.forward(condition)?.silu()?;
        Ok((self.gamma_head.forward(&h)?, self.beta_head.forward(&h)?))
    }

    pub fn forward(&self, features: &Tensor, condition: &Tensor) -> Result<Tensor> {
        check_site(features, condition)?;
        let (gamma, beta) = self.saft_params(condition)?;
        saft_apply(features, &gamma, &beta)
    }
}

fn check_site(features: &Tensor, condition: &Tensor) -> Result<()> {
    let (fb, _, fh, fw) = features.dims4()?;
    let (cb, _, ch, cw) = condition.dims4()?;
    if (fb, fh, fw) != (cb, ch, cw) {
        return Err(Error::Shape(format!(
            "condition {:?} does not match feature site {:?}",
            condition.dims(),
            features.dims()
        )));
    }
    Ok(())
}

/// `gamma * features + beta`, element-wise.
pub fn saft_apply(features: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    if features.dims() != gamma.dims() || features.dims() != beta.dims() {
        return Err(Error::Shape(format!(
            "SAFT operands disagree: features {:?}, gamma {:?}, beta {:?}",
            features.dims(),
            gamma.dims(),
            beta.dims()
        )));
    }
    Ok(((gamma * features)? + beta)?)
}

/// Counts how often each branch actually modulated features.
#[derive(Debug, Default)]
pub struct GfmTrace {
    pub mask: AtomicUsize,
    pub scmap: AtomicUsize,
    pub bypassed: AtomicUsize,
}

impl GfmTrace {
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.mask.load(Ordering::Relaxed),
            self.scmap.load(Ordering::Relaxed),
            self.bypassed.load(Ordering::Relaxed),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Gfm {
    mask: SaftBlock,
    scmap: SaftBlock,
    fusion: FusionMode,
    trace: Arc<GfmTrace>,
}

impl Gfm {
    pub fn new(
        p: Params<'_>,
        channels: usize,
        scmap_channels: usize,
        hidden: usize,
        fusion: FusionMode,
        trace: Arc<GfmTrace>,
    ) -> Result<Self> {
        let g = fusion.gamma_init();
        Ok(Gfm {
            mask: SaftBlock::new(p.pp("saft_mask"), 3, hidden, channels, g)?,
            scmap: SaftBlock::new(p.pp("saft_scmap"), scmap_channels, hidden, channels, g)?,
            fusion,
            trace,
        })
    }

    pub fn from_blocks(mask: SaftBlock, scmap: SaftBlock, fusion: FusionMode) -> Self {
        Gfm {
            mask,
            scmap,
            fusion,
            trace: Arc::default(),
        }
    }

    pub fn mask_block(&self) -> &SaftBlock {
        &self.mask
    }

    pub fn scmap_block(&self) -> &SaftBlock {
        &self.scmap
    }

    pub fn fusion(&self) -> FusionMode {
        self.fusion
    }

    pub fn trace(&self) -> &GfmTrace {
        &self.trace
    }

    /// Fuses both branches. A branch switched off by `mode` is replaced by its
    /// initial transform (half the input under literal fusion, the input under
    /// residual fusion), so every mode is the identity at initialization.
    pub fn forward(
        &self,
        features: &Tensor,
        mask: Option<&Tensor>,
        scmap: Option<&Tensor>,
        mode: GuidanceMode,
    ) -> Result<Tensor> {
        let branch = |block: &SaftBlock, cond: Option<&Tensor>, used: bool, name: &str| -> Result<Option<Tensor>> {
            if !used {
                return Ok(None);
            }
            let cond = cond.ok_or_else(|| {
                Error::Config(format!("guidance mode {mode:?} needs the {name} condition"))
            })?;
            block.forward(features, cond).map(Some)
        };
        let f_c = branch(&self.mask, mask, mode.uses_mask(), "mask")?;
        let f_sc = branch(&self.scmap, scmap, mode.uses_scmap(), "scmap")?;
        if f_c.is_some() {
            self.trace.mask.fetch_add(1, Ordering::Relaxed);
        }
        if f_sc.is_some() {
            self.trace.scmap.fetch_add(1, Ordering::Relaxed);
        }
        let out = match (f_c, f_sc, self.fusion) {
            (Some(a), Some(b), FusionMode::Literal) => (a + b)?,
            (Some(a), Some(b), FusionMode::Residual) => ((a + b)? - features)?,
            (Some(x), None, FusionMode::Literal) | (None, Some(x), FusionMode::Literal) => {
                ((features * 0.5)? + x)?
            }
            (Some(x), None, FusionMode::Residual) | (None, Some(x), FusionMode::Residual) => x,
            (None, None, _) => {
                self.trace.bypassed.fetch_add(1, Ordering::Relaxed);
                features.clone()
            }
        };
        Ok(out)
    }
}
