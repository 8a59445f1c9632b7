//! LR image embeddings for cross-attention.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Params};

/// Turns an LR batch `(B, 3, h, w)` into context tokens `(B, tokens, dim)`.
pub trait LrEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn tokens(&self) -> usize;
    fn encode(&self, lr: &Tensor) -> Result<Tensor>;
}

/// Three convolutions (strides 1, 2, 2) pooled onto a fixed token grid, plus a
/// learned position embedding. Trained jointly with the denoiser.
#[derive(Debug, Clone)]
pub struct ConvLrEncoder {
    convs: [Conv2d; 3],
    position: Tensor,
    grid: usize,
    dim: usize,
}

impl ConvLrEncoder {
    pub fn new(p: Params<'_>, hidden: usize, dim: usize, grid: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::Config("LR token grid must be positive".into()));
        }
        Ok(ConvLrEncoder {
            convs: [
                Conv2d::new(p.pp("conv0"), 3, hidden, 3, 1)?,
                Conv2d::new(p.pp("conv1"), hidden, hidden, 3, 2)?,
                Conv2d::new(p.pp("conv2"), hidden, dim, 3, 2)?,
            ],
            position: p.get(&[grid * grid, dim], "position", Init::Normal(0.02))?,
            grid,
            dim,
        })
    }
}

/// Averages over `grid x grid` bins with floor/ceil edges, so any input size
/// (including one smaller than the grid) maps onto the grid.
pub fn adaptive_avg_pool(x: &Tensor, grid: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let bins = |n: usize, i: usize| -> (usize, usize) {
        let start = i * n / grid;
        let end = ((i + 1) * n).div_ceil(grid);
        (start, end.max(start + 1))
    };
    let mut cells = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        let (y0, y1) = bins(h, gy);
        let row = x.narrow(2, y0, y1 - y0)?;
        for gx in 0..grid {
            let (x0, x1) = bins(w, gx);
            cells.push(row.narrow(3, x0, x1 - x0)?.mean_keepdim(3)?.mean_keepdim(2)?);
        }
    }
    let (b, c, _, _) = x.dims4()?;
    Ok(Tensor::cat(&cells, 2)?.reshape((b, c, grid * grid))?)
}

impl LrEncoder for ConvLrEncoder {
    fn name(&self) -> &str {
        "conv-stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    fn encode(&self, lr: &Tensor) -> Result<Tensor> {
        let h = candle_nn::ops::silu(&self.convs[0].forward(lr)?)?;
        let h = candle_nn::ops::silu(&self.convs[1].forward(&h)?)?;
        let h = self.convs[2].forward(&h)?;
        let tokens = adaptive_avg_pool(&h, self.grid)?.transpose(1, 2)?;
        Ok(tokens.broadcast_add(&self.position)?)
    }
}
