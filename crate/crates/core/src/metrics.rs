//! Fidelity metrics on the luma channel and dataset reports.
//!
//! RGB inputs are converted to BT.601 studio-swing YCbCr (Y in [16, 235]) and
//! only Y is scored. Single-channel inputs are scored as-is. `crop_border`
//! pixels are removed from every edge before any statistic.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imageops::list_pngs;

pub const DEFAULT_CROP_BORDER: usize = 4;
pub const COLOR_SPACE: &str = "YCbCr (ITU-R BT.601, studio swing)";
pub const SCORED_CHANNEL: &str = "Y";
pub const INF_POLICY: &str = "infinite PSNR reported as \"inf\" and excluded from the mean";

/// One `[Y, Cb, Cr]` triple per pixel, row-major.
pub fn to_ycbcr(rgb: &RgbImage) -> Vec<[f64; 3]> {
    rgb.pixels()
        .map(|p| {
            let [r, g, b] = p.0.map(|v| v as f64);
            [
                16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0,
                128.0 + (-37.797 * r - 74.203 * g + 112.0 * b) / 255.0,
                128.0 + (112.0 * r - 93.786 * g - 18.214 * b) / 255.0,
            ]
        })
        .collect()
}

/// A single-channel float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, border: usize) -> Result<Plane> {
        if self.width <= 2 * border || self.height <= 2 * border {
            return Err(Error::Shape(format!(
                "{}x{} image cannot lose a {border}-pixel border",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width - 2 * border, self.height - 2 * border);
        let mut data = Vec::with_capacity(w * h);
        for y in border..border + h {
            data.extend_from_slice(&self.data[y * self.width + border..y * self.width + border + w]);
        }
        Ok(Plane {
            width: w,
            height: h,
            data,
        })
    }
}

/// Luma plane: BT.601 Y for color images, raw values for grayscale ones.
pub fn y_plane(img: &DynamicImage) -> Plane {
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| v as f64).collect(),
        other => to_ycbcr(&other.to_rgb8()).into_iter().map(|p| p[0]).collect(),
    };
    Plane {
        width,
        height,
        data,
    }
}

fn paired_planes(a: &DynamicImage, b: &DynamicImage, crop_border: usize) -> Result<(Plane, Plane)> {
    if a.dimensions_tuple() != b.dimensions_tuple() {
        return Err(Error::Shape(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions_tuple(),
            b.dimensions_tuple()
        )));
    }
    Ok((y_plane(a).crop(crop_border)?, y_plane(b).crop(crop_border)?))
}

trait Dims {
    fn dimensions_tuple(&self) -> (u32, u32);
}

impl Dims for DynamicImage {
    fn dimensions_tuple(&self) -> (u32, u32) {
        (self.width(), self.height())
    }
}

/// PSNR in dB; identical inputs give infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr(pub f64);

impl Psnr {
    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{:.4}", self.0)
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr(v)),
            Raw::Str(s) if s == "inf" => Ok(Psnr(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR `{s}`"))),
        }
    }
}

pub fn psnr(a: &DynamicImage, b: &DynamicImage, crop_border: usize) -> Result<Psnr> {
    let (pa, pb) = paired_planes(a, b, crop_border)?;
    Ok(psnr_planes(&pa, &pb))
}

pub fn psnr_planes(a: &Plane, b: &Plane) -> Psnr {
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        Psnr(f64::INFINITY)
    } else {
        Psnr(10.0 * (255.0f64 * 255.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(p: &Plane, window: &[f64]) -> Plane {
    let k = window.len();
    let (ow, oh) = (p.width - k + 1, p.height - k + 1);
    let mut rows = vec![0f64; p.height * ow];
    for y in 0..p.height {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| window[i] * p.get(y, x + i)).sum();
        }
    }
    let mut data = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            data[y * ow + x] = (0..k).map(|i| window[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    Plane {
        width: ow,
        height: oh,
        data,
    }
}

/// Mean SSIM over all fully-covered 11x11 Gaussian windows (sigma 1.5).
pub fn ssim(a: &DynamicImage, b: &DynamicImage, crop_border: usize) -> Result<f64> {
    let (pa, pb) = paired_planes(a, b, crop_border)?;
    ssim_planes(&pa, &pb)
}

pub fn ssim_planes(a: &Plane, b: &Plane) -> Result<f64> {
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels after cropping, got {}x{}",
            a.width, a.height
        )));
    }
    let w = gaussian_window();
    let prod = |f: fn(f64, f64) -> f64| Plane {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    };
    let mu_a = filter_valid(a, &w);
    let mu_b = filter_valid(b, &w);
    let e_aa = filter_valid(&prod(|x, _| x * x), &w);
    let e_bb = filter_valid(&prod(|_, y| y * y), &w);
    let e_ab = filter_valid(&prod(|x, y| x * y), &w);
    let n = mu_a.data.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let var_a = e_aa.data[i] - ma * ma;
        let var_b = e_bb.data[i] - mb * mb;
        let cov = e_ab.data[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
            / ((ma * ma + mb * mb + C1) * (var_a + var_b + C2));
    }
    Ok(total / n as f64)
}

/// An external metric: `program [args..] <sr_path> [<hr_path>]`, printing one float.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricPlugin {
    pub name: String,
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Whether the plugin needs the HR reference.
    #[serde(default)]
    pub reference: bool,
}

impl MetricPlugin {
    pub fn score(&self, sr: &Path, hr: Option<&Path>) -> Result<f64> {
        let fail = |msg: String| Error::backend(format!("metric:{}", self.name), msg);
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.args).arg(sr);
        if let Some(hr) = hr {
            cmd.arg(hr);
        }
        let out = cmd
            .output()
            .map_err(|e| fail(format!("could not run `{}`: {e}", self.program)))?;
        if !out.status.success() {
            return Err(fail(format!("exited with {}", out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.split_whitespace()
            .next()
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| fail(format!("expected a float, got `{}`", text.trim())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub color_space: String,
    pub channel: String,
    pub crop_border: usize,
    pub psnr_inf_policy: String,
}

impl Protocol {
    pub fn standard(crop_border: usize) -> Self {
        Protocol {
            color_space: COLOR_SPACE.into(),
            channel: SCORED_CHANNEL.into(),
            crop_border,
            psnr_inf_policy: INF_POLICY.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub psnr: Option<Psnr>,
    pub ssim: Option<f64>,
    pub plugins: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub images: usize,
    pub psnr_mean: Option<f64>,
    pub psnr_finite_count: usize,
    pub psnr_inf_count: usize,
    pub ssim_mean: Option<f64>,
    pub plugin_means: BTreeMap<String, f64>,
}

impl Aggregate {
    pub fn from_records(records: &[ImageRecord]) -> Self {
        let finite: Vec<f64> = records
            .iter()
            .filter_map(|r| r.psnr)
            .filter(|p| p.is_finite())
            .map(|p| p.0)
            .collect();
        let inf = records
            .iter()
            .filter_map(|r| r.psnr)
            .filter(|p| !p.is_finite())
            .count();
        let ssims: Vec<f64> = records.iter().filter_map(|r| r.ssim).collect();
        let mut plugin_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in records {
            for (k, v) in &r.plugins {
                plugin_values.entry(k.clone()).or_default().push(*v);
            }
        }
        Aggregate {
            images: records.len(),
            psnr_mean: mean(&finite),
            psnr_finite_count: finite.len(),
            psnr_inf_count: inf,
            ssim_mean: mean(&ssims),
            plugin_means: plugin_values
                .into_iter()
                .filter_map(|(k, v)| mean(&v).map(|m| (k, m)))
                .collect(),
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub protocol: Protocol,
    pub images: Vec<ImageRecord>,
    pub aggregate: Aggregate,
    /// Ids present in only one of the SR and HR directories.
    pub missing: Vec<String>,
    pub warnings: Vec<String>,
}

/// Fixed CSV column order; plugin means follow, sorted by plugin name.
pub const CSV_COLUMNS: [&str; 9] = [
    "dataset",
    "images",
    "psnr_mean",
    "psnr_finite",
    "psnr_inf",
    "ssim_mean",
    "color_space",
    "channel",
    "crop_border",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(self.aggregate.plugin_means.keys().cloned());
        w.write_record(&header)?;
        let a = &self.aggregate;
        let mut row = vec![
            self.dataset.clone(),
            a.images.to_string(),
            fmt_opt(a.psnr_mean),
            a.psnr_finite_count.to_string(),
            a.psnr_inf_count.to_string(),
            fmt_opt(a.ssim_mean),
            self.protocol.color_space.clone(),
            self.protocol.channel.clone(),
            self.protocol.crop_border.to_string(),
        ];
        row.extend(a.plugin_means.values().map(|v| format!("{v:.6}")));
        w.write_record(&row)?;
        let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        std::fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))?;
        Ok((json, csv))
    }
}

/// Scores every PNG in `sr_dir`. Reference metrics need `hr_dir` with
/// matching file stems; ids found on only one side are listed in `missing`.
pub fn evaluate_dir(
    sr_dir: &Path,
    hr_dir: Option<&Path>,
    plugins: &[MetricPlugin],
    crop_border: usize,
) -> Result<MetricReport> {
    let sr = list_pngs(sr_dir)?;
    if sr.is_empty() {
        return Err(Error::Usage(format!("no PNG images in {}", sr_dir.display())));
    }
    let hr: BTreeMap<String, PathBuf> = match hr_dir {
        Some(d) => list_pngs(d)?.into_iter().collect(),
        None => BTreeMap::new(),
    };
    let mut warnings = Vec::new();
    if hr_dir.is_none() && plugins.is_empty() {
        warnings.push("no HR directory and no metric plugins: nothing to score".to_string());
    }
    if hr_dir.is_none() && plugins.iter().any(|p| p.reference) {
        warnings.push("reference plugins skipped: no HR directory".to_string());
    }
    let mut missing = Vec::new();
    let mut records = Vec::with_capacity(sr.len());
    for (id, sr_path) in &sr {
        let hr_path = hr.get(id);
        if hr_dir.is_some() && hr_path.is_none() {
            missing.push(id.clone());
        }
        let (psnr_v, ssim_v) = match hr_path {
            Some(hp) => {
                let a = image::open(sr_path)?;
                let b = image::open(hp)?;
                (Some(psnr(&a, &b, crop_border)?), Some(ssim(&a, &b, crop_border)?))
            }
            None => (None, None),
        };
        let mut scores = BTreeMap::new();
        for plugin in plugins {
            if plugin.reference {
                if let Some(hp) = hr_path {
                    scores.insert(plugin.name.clone(), plugin.score(sr_path, Some(hp))?);
                }
            } else {
                scores.insert(plugin.name.clone(), plugin.score(sr_path, None)?);
            }
        }
        records.push(ImageRecord {
            id: id.clone(),
            psnr: psnr_v,
            ssim: ssim_v,
            plugins: scores,
        });
    }
    let sr_ids: std::collections::BTreeSet<&String> = sr.iter().map(|(id, _)| id).collect();
    missing.extend(hr.keys().filter(|id| !sr_ids.contains(id)).cloned());
    missing.sort();
    let dataset = sr_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(MetricReport {
        dataset,
        protocol: Protocol::standard(crop_border),
        aggregate: Aggregate::from_records(&records),
        images: records,
        missing,
        warnings,
    })
}
