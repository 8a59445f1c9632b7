//! Segmentation-CLIP maps: every pixel carries the text embedding of its class.
//!
//! A raw map is fully determined by the label field and the embedding table,
//! so the model never materializes it. Because the channel compressor is
//! pointwise, compressing the table rows and then gathering by label gives
//! exactly the per-pixel result.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Linear, Params};
use crate::segmentation::SegmentationMap;
use crate::taxonomy::NUM_CLASSES;
use crate::text_embedding::EmbeddingTable;

pub const DEFAULT_HIDDEN_CHANNELS: usize = 256;
pub const DEFAULT_COMPRESSED_CHANNELS: usize = 128;

/// A dense `H x W x C` map, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct SCMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl SCMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values do not fill {height}x{width}x{channels}",
                values.len()
            )));
        }
        Ok(SCMap {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.values[start..start + self.channels]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Expands a label map into its raw embedding map by table lookup.
pub fn build_scmap(map: &SegmentationMap, table: &EmbeddingTable) -> Result<SCMap> {
    if table.rows() != NUM_CLASSES + 1 {
        return Err(Error::Domain(format!(
            "embedding table has {} rows, labels need {}",
            table.rows(),
            NUM_CLASSES + 1
        )));
    }
    let mut values = Vec::with_capacity(map.labels().len() * table.dim());
    for &label in map.labels() {
        values.extend_from_slice(table.lookup(label));
    }
    SCMap::new(map.height(), map.width(), table.dim(), values)
}

/// Per-pixel two-layer channel compressor (`in -> hidden -> out`, SiLU between).
#[derive(Debug, Clone)]
pub struct SCMapCompressor {
    hidden: Linear,
    out: Linear,
    in_channels: usize,
    out_channels: usize,
}

impl SCMapCompressor {
    pub fn new(p: Params<'_>, in_channels: usize, hidden: usize, out_channels: usize) -> Result<Self> {
        Ok(SCMapCompressor {
            hidden: Linear::new(p.pp("hidden"), in_channels, hidden)?,
            out: Linear::new(p.pp("out"), hidden, out_channels)?,
            in_channels,
            out_channels,
        })
    }

    pub fn from_layers(hidden: Linear, out: Linear, in_channels: usize, out_channels: usize) -> Self {
        SCMapCompressor {
            hidden,
            out,
            in_channels,
            out_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Compresses a `(N, in_channels)` batch of embedding vectors.
    pub fn forward_rows(&self, rows: &Tensor) -> Result<Tensor> {
        let (_, c) = rows.dims2()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "compressor expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let h = self.hidden.forward(rows)?.silu()?;
        self.out.forward(&h)
    }

    /// Compresses a materialized raw map pixel by pixel.
    pub fn compress(&self, raw: &SCMap) -> Result<SCMap> {
        if raw.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "compressor expects {} channels, got {}",
                self.in_channels, raw.channels
            )));
        }
        let device = self.hidden_device();
        let dtype = self.hidden_dtype();
        let rows = Tensor::from_slice(&raw.values, (raw.height * raw.width, raw.channels), &device)?
            .to_dtype(dtype)?;
        let out = self
            .forward_rows(&rows)?
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        SCMap::new(raw.height, raw.width, self.out_channels, out)
    }

    fn hidden_device(&self) -> candle_core::Device {
        self.hidden.device()
    }

    fn hidden_dtype(&self) -> candle_core::DType {
        self.hidden.dtype()
    }
}

/// Gathers rows of a `(rows, C)` table by label, producing a `(C, H, W)` map.
pub fn gather_by_labels(table_rows: &Tensor, map: &SegmentationMap) -> Result<Tensor> {
    let (_, c) = table_rows.dims2()?;
    let idx: Vec<u32> = map.labels().iter().map(|l| l.row() as u32).collect();
    let idx = Tensor::from_vec(idx, map.labels().len(), table_rows.device())?;
    let gathered = table_rows.index_select(&idx, 0)?;
    Ok(gathered
        .t()?
        .reshape((c, map.height(), map.width()))?)
}
