//! The end-to-end commands: pair synthesis, guidance preprocessing,
//! training, inference and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use log::{info, warn};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PromptMode, RunConfig, SegmenterKind, TextEncoderKind};
use crate::degradation::{degrade, DegradationConfig, DegradationRecord};
use crate::diffusion::checkpoint::{self, CheckpointHeader, CHECKPOINT_VERSION};
use crate::diffusion::{
    ddpm_sample, text_context, AdamW, ConditionItem, Conditioning, SampleInputs, SrModel, training_loss,
};
use crate::dsg::{ColorPalette, GuidanceBundle, GuidanceMode};
use crate::error::{Error, Result};
use crate::imageops::{list_pngs, load_rgb, tensor_to_rgb};
use crate::metrics::{evaluate_dir, MetricReport};
use crate::segmentation::{
    load_mask_file, segment, ExternalSegmenter, FileSegmenter, ImageInput, SegmenterBackend, ToySegmenter,
};
use crate::seed::{derive_seed, subsystem_rng};
use crate::slbp::{Prompt, PromptSource, TagFile};
use crate::taxonomy::LabelTaxonomy;
use crate::text_embedding::{EmbeddingTable, EncoderHandle, ExternalTextEncoder, HashTextEncoder, TextEncoder};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TABLE_FILE: &str = "table.scet";
pub const CACHE_META_FILE: &str = "cache.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_CONFIG_FILE: &str = "config.toml";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Concrete backends selected by a run configuration.
pub struct Backends {
    pub taxonomy: LabelTaxonomy,
    pub segmenter: Box<dyn SegmenterBackend>,
    pub encoder: Box<dyn TextEncoder>,
    pub prompts: PromptSource,
    pub palette: ColorPalette,
}

impl Backends {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let b = &cfg.backends;
        let taxonomy = match &b.taxonomy_file {
            Some(p) => LabelTaxonomy::load(p)?,
            None => LabelTaxonomy::ade20k(),
        };
        let s = &b.segmenter;
        let segmenter: Box<dyn SegmenterBackend> = match s.kind {
            SegmenterKind::Toy => Box::new(ToySegmenter::new(&s.classes)?),
            SegmenterKind::File => Box::new(FileSegmenter::new(
                s.dir
                    .clone()
                    .ok_or_else(|| Error::Config("backends.segmenter.dir is required for kind = \"file\"".into()))?,
            )),
            SegmenterKind::External => Box::new(ExternalSegmenter::new(
                s.program.clone().ok_or_else(|| {
                    Error::Config("backends.segmenter.program is required for kind = \"external\"".into())
                })?,
                s.args.clone(),
            )),
        };
        let t = &b.text_encoder;
        let encoder: Box<dyn TextEncoder> = match t.kind {
            TextEncoderKind::Hash => Box::new(HashTextEncoder::new(t.dim, t.seed)),
            TextEncoderKind::External => Box::new(ExternalTextEncoder::new(
                t.program.clone().ok_or_else(|| {
                    Error::Config("backends.text_encoder.program is required for kind = \"external\"".into())
                })?,
                t.args.clone(),
                t.dim,
            )),
        };
        let prompts = match cfg.prompting.mode {
            PromptMode::Labels => PromptSource::Labels {
                min_area_fraction: cfg.prompting.min_area_fraction,
            },
            PromptMode::Tags => {
                let path = cfg.prompting.tags_file.as_ref().expect("validated");
                PromptSource::Tags(TagFile::load(path)?)
            }
        };
        Ok(Backends {
            taxonomy,
            segmenter,
            encoder,
            prompts,
            palette: ColorPalette::standard(),
        })
    }

    pub fn text_context(&self, prompt: &Prompt, tokens: usize) -> Result<Vec<f32>> {
        let handle = EncoderHandle::new(self.encoder.as_ref());
        text_context(prompt, &handle, tokens)
    }

    fn empty_context(&self, tokens: usize) -> Result<Vec<f32>> {
        self.text_context(&Prompt::from_text(""), tokens)
    }
}

// ---------------------------------------------------------------- pairs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub hr: String,
    pub lr: String,
    pub hr_sha256: String,
    pub lr_sha256: String,
    pub degradation: DegradationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileError {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub degradation: DegradationConfig,
    pub pairs: Vec<PairEntry>,
    pub errors: Vec<FileError>,
}

impl Manifest {
    pub fn load(data_dir: &Path) -> Result<Self> {
        let path = data_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// SHA-256 of the manifest file bytes.
pub fn manifest_hash(data_dir: &Path) -> Result<String> {
    let path = data_dir.join(MANIFEST_FILE);
    Ok(sha256_hex(&fs::read(&path).map_err(|e| Error::io(&path, e))?))
}

/// Degrades every PNG in `hr_dir` into `out/lr`, copies the HR image into
/// `out/hr` and writes `out/manifest.json`. Per-file failures are recorded in
/// the manifest and do not stop the run.
pub fn synth_pairs(cfg: &RunConfig, hr_dir: &Path, out_dir: &Path) -> Result<Manifest> {
    let inputs = list_pngs(hr_dir)?;
    if inputs.is_empty() {
        return Err(Error::Usage(format!("no PNG images in {}", hr_dir.display())));
    }
    create_dir(&out_dir.join("hr"))?;
    create_dir(&out_dir.join("lr"))?;
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (id, path) in inputs {
        let mut rng = subsystem_rng(cfg.seed, &format!("degradation/{id}"));
        let result = load_rgb(&path).and_then(|hr| {
            let (lr, record) = degrade(&hr, &cfg.degradation, &mut rng)?;
            let hr_rel = format!("hr/{id}.png");
            let lr_rel = format!("lr/{id}.png");
            hr.save(out_dir.join(&hr_rel))?;
            lr.save(out_dir.join(&lr_rel))?;
            Ok(PairEntry {
                id: id.clone(),
                hr_sha256: sha256_hex(hr.as_raw()),
                lr_sha256: sha256_hex(lr.as_raw()),
                hr: hr_rel,
                lr: lr_rel,
                degradation: record,
            })
        });
        match result {
            Ok(entry) => pairs.push(entry),
            Err(e) => {
                warn!("{id}: {e}");
                errors.push(FileError {
                    id,
                    error: e.to_string(),
                });
            }
        }
    }
    let manifest = Manifest {
        seed: cfg.seed,
        degradation: cfg.degradation.clone(),
        pairs,
        errors,
    };
    write_file(&out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    info!(
        "wrote {} pairs ({} failed) to {}",
        manifest.pairs.len(),
        manifest.errors.len(),
        out_dir.display()
    );
    Ok(manifest)
}

// ---------------------------------------------------------------- preprocess

/// Identifies the settings that cached guidance depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub key: String,
    pub table_backend: String,
    pub table_fingerprint: String,
}

fn cache_key(cfg: &RunConfig, backends: &Backends) -> Result<String> {
    let parts = serde_json::json!({
        "segmenter": cfg.backends.segmenter,
        "segmenter_backend": backends.segmenter.name(),
        "prompting": cfg.prompting,
        "text_encoder": backends.encoder.name(),
        "taxonomy": backends.taxonomy.serialize(),
    });
    Ok(sha256_hex(serde_json::to_string(&parts)?.as_bytes()))
}

pub fn labels_path(cache: &Path, id: &str) -> PathBuf {
    cache.join(format!("{id}_labels.png"))
}

pub fn mask_path(cache: &Path, id: &str) -> PathBuf {
    cache.join(format!("{id}_mask.png"))
}

pub fn prompt_path(cache: &Path, id: &str) -> PathBuf {
    cache.join(format!("{id}_prompt.txt"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub processed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<FileError>,
    pub table_reused: bool,
}

/// Segments every LR image, writes label maps, colorized masks and prompts,
/// and builds the class embedding table. Entries already present for the same
/// settings are skipped.
pub fn preprocess(cfg: &RunConfig, lr_dir: &Path, cache_dir: &Path) -> Result<PreprocessReport> {
    let backends = Backends::from_config(cfg)?;
    let inputs = list_pngs(lr_dir)?;
    if inputs.is_empty() {
        return Err(Error::Usage(format!("no PNG images in {}", lr_dir.display())));
    }
    create_dir(cache_dir)?;
    let key = cache_key(cfg, &backends)?;
    let meta_path = cache_dir.join(CACHE_META_FILE);
    let table_path = cache_dir.join(TABLE_FILE);
    let previous: Option<CacheMeta> = fs::read_to_string(&meta_path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let valid = previous.as_ref().map(|m| m.key == key).unwrap_or(false);
    if previous.is_some() && !valid {
        info!("cache settings changed; recomputing everything in {}", cache_dir.display());
    }
    let mut report = PreprocessReport::default();
    let table = match (valid, EmbeddingTable::load(&table_path)) {
        (true, Ok(t)) if Some(t.fingerprint()) == previous.as_ref().map(|m| m.table_fingerprint.clone()) => {
            info!("cache hit: {}", table_path.display());
            report.table_reused = true;
            t
        }
        _ => {
            let handle = EncoderHandle::new(backends.encoder.as_ref());
            let t = EmbeddingTable::build(&backends.taxonomy, &handle)?;
            t.save(&table_path)?;
            t
        }
    };
    for (id, path) in inputs {
        let outputs = [labels_path(cache_dir, &id), mask_path(cache_dir, &id), prompt_path(cache_dir, &id)];
        if valid && outputs.iter().all(|p| p.exists()) {
            info!("cache hit: {id}");
            report.skipped.push(id);
            continue;
        }
        let result = load_rgb(&path).and_then(|img| {
            let map = segment(backends.segmenter.as_ref(), ImageInput { id: &id, image: &img })?;
            let prompt = backends.prompts.prompt(&id, &map, &backends.taxonomy)?;
            map.save_png(&outputs[0])?;
            crate::dsg::colorize_mask(&map, &backends.palette).save(&outputs[1])?;
            write_file(&outputs[2], &prompt.text)
        });
        match result {
            Ok(()) => report.processed.push(id),
            Err(e) => {
                warn!("{id}: {e}");
                report.failed.push(FileError {
                    id,
                    error: e.to_string(),
                });
            }
        }
    }
    let meta = CacheMeta {
        key,
        table_backend: table.backend().to_string(),
        table_fingerprint: table.fingerprint(),
    };
    write_file(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(report)
}

/// Rebuilds a guidance bundle from cached files for an `lr_dims = (h, w)` image.
pub fn load_cached_bundle(
    cache_dir: &Path,
    id: &str,
    lr_dims: (usize, usize),
    palette: &ColorPalette,
    scales: &[(usize, usize)],
    mode: GuidanceMode,
) -> Result<GuidanceBundle> {
    let lp = labels_path(cache_dir, id);
    if !lp.exists() {
        return Err(Error::Validation(format!(
            "no cached guidance for `{id}` in {} (run preprocess first)",
            cache_dir.display()
        )));
    }
    let labels = load_mask_file(&lp, lr_dims)?;
    let pp = prompt_path(cache_dir, id);
    let text = fs::read_to_string(&pp).map_err(|e| Error::io(&pp, e))?;
    GuidanceBundle::from_map(id, labels, Prompt::from_text(text), palette, scales, mode)
}

// ---------------------------------------------------------------- training

/// One loaded training pair with its conditions.
struct Example {
    hr: RgbImage,
    lr: RgbImage,
    bundle: GuidanceBundle,
    text: Vec<f32>,
}

fn load_examples(
    cfg: &RunConfig,
    backends: &Backends,
    model: &SrModel,
    data_dir: &Path,
    cache_dir: &Path,
) -> Result<Vec<(String, Example)>> {
    let manifest = Manifest::load(data_dir)?;
    if manifest.pairs.is_empty() {
        return Err(Error::Validation(format!("{} lists no pairs", data_dir.display())));
    }
    let mut out = Vec::new();
    for p in &manifest.pairs {
        let hr = load_rgb(&data_dir.join(&p.hr))?;
        let lr = load_rgb(&data_dir.join(&p.lr))?;
        let (lw, lh) = lr.dimensions();
        if hr.dimensions() != (lw * model.scale() as u32, lh * model.scale() as u32) {
            return Err(Error::Shape(format!(
                "pair `{}`: HR {:?} is not {}x LR {:?}",
                p.id,
                hr.dimensions(),
                model.scale(),
                lr.dimensions()
            )));
        }
        let scales = model.guidance_scales(hr.height() as usize, hr.width() as usize);
        let bundle = load_cached_bundle(cache_dir, &p.id, (lh as usize, lw as usize), &backends.palette, &scales, cfg.guidance)?;
        let text = backends.text_context(&bundle.prompt, cfg.model.text_tokens)?;
        out.push((p.id.clone(), Example { hr, lr, bundle, text }));
    }
    Ok(out)
}

fn stack_hr(examples: &[(String, Example)], dtype: DType, dev: &Device) -> Result<Tensor> {
    let ts = examples
        .iter()
        .map(|(_, e)| crate::imageops::rgb_to_tensor(&e.hr, dtype, dev))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

fn conditioning_for(model: &SrModel, examples: &[(String, Example)]) -> Result<Conditioning> {
    let items: Vec<ConditionItem<'_>> = examples
        .iter()
        .map(|(_, e)| ConditionItem {
            bundle: &e.bundle,
            text: &e.text,
            lr: &e.lr,
        })
        .collect();
    model.conditioning(&items)
}

fn load_table(cfg: &RunConfig, backends: &Backends, cache_dir: &Path) -> Result<EmbeddingTable> {
    let path = cache_dir.join(TABLE_FILE);
    let table = EmbeddingTable::load(&path)?;
    if table.backend() != backends.encoder.name() || table.dim() != cfg.model.text_dim {
        return Err(Error::Validation(format!(
            "{} was built by `{}` (dim {}), configuration uses `{}` (dim {})",
            path.display(),
            table.backend(),
            table.dim(),
            backends.encoder.name(),
            cfg.model.text_dim
        )));
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub start_step: u64,
    pub final_step: u64,
    pub parameters: usize,
    /// `(step, loss)` for the steps run in this invocation.
    pub losses: Vec<(u64, f64)>,
    pub checkpoint: PathBuf,
}

fn header_for(cfg: &RunConfig, model: &SrModel, table: &EmbeddingTable, step: u64, opt: &AdamW) -> Result<CheckpointHeader> {
    Ok(CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: cfg.model.clone(),
        schedule: cfg.schedule,
        scale: model.scale(),
        table_fingerprint: model.table_fingerprint().to_string(),
        table_backend: table.backend().to_string(),
        step,
        optimizer_steps: opt.steps_taken(),
        run_config: cfg.to_toml()?,
    })
}

fn read_loss_log(path: &Path, up_to: u64) -> Result<Vec<(u64, f64)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut reader = csv::Reader::from_path(path)?;
    for rec in reader.deserialize::<(u64, f64)>() {
        let (s, l) = rec?;
        if s <= up_to {
            out.push((s, l));
        }
    }
    Ok(out)
}

fn write_loss_log(path: &Path, rows: &[(u64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (s, l) in rows {
        w.write_record([s.to_string(), format!("{l:.8}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on the pairs in `data_dir` with guidance from `cache_dir`, writing
/// `checkpoint.safetensors`, `loss.csv` and the resolved `config.toml` into
/// `run_dir`. With `resume`, continues from the checkpoint in `run_dir`.
pub fn train(cfg: &RunConfig, data_dir: &Path, cache_dir: &Path, run_dir: &Path, resume: bool) -> Result<TrainReport> {
    let backends = Backends::from_config(cfg)?;
    let table = load_table(cfg, &backends, cache_dir)?;
    let dev = Device::Cpu;
    let dtype = DType::F32;
    let model = SrModel::new(&cfg.model, cfg.degradation.scale as usize, &table, derive_seed(cfg.seed, "init"), dtype, &dev)?;
    let mut opt = AdamW::new(model.store().vars(), cfg.train.optimizer)?;
    create_dir(run_dir)?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let loss_path = run_dir.join(LOSS_FILE);
    let mut start = 0u64;
    if resume {
        let ck = checkpoint::load(&ckpt_path, &dev)?;
        checkpoint::check_table(&ck.header, model.table_fingerprint(), table.backend())?;
        if ck.header.model != cfg.model || ck.header.scale != model.scale() {
            return Err(Error::Config(
                "model configuration differs from the checkpoint being resumed".into(),
            ));
        }
        model.store().load(&ck.params)?;
        opt.load_state(&ck.optimizer, ck.header.optimizer_steps)?;
        start = ck.header.step;
        info!("resuming from step {start}");
    }
    let schedule = cfg.schedule.build()?;
    let examples = load_examples(cfg, &backends, &model, data_dir, cache_dir)?;
    let hr_all = stack_hr(&examples, dtype, &dev)?;
    let cond_all = conditioning_for(&model, &examples)?;
    let target_all = model.target_from(&hr_all, &cond_all.lr_up)?;
    write_file(&run_dir.join(RUN_CONFIG_FILE), cfg.to_toml()?)?;
    info!(
        "training {} parameters on {} pairs, steps {}..{}",
        model.num_parameters(),
        examples.len(),
        start + 1,
        cfg.train.steps
    );
    let mut log = read_loss_log(&loss_path, start)?;
    let mut losses = Vec::new();
    let n = examples.len();
    let b = cfg.train.batch_size.min(n);
    let save = |step: u64, opt: &AdamW, log: &[(u64, f64)]| -> Result<()> {
        let header = header_for(cfg, &model, &table, step, opt)?;
        checkpoint::save(&ckpt_path, &header, &model.store().tensors(), &opt.state())?;
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            let keep = run_dir.join(format!("checkpoint_{step}.safetensors"));
            fs::copy(&ckpt_path, &keep).map_err(|e| Error::io(&keep, e))?;
        }
        write_loss_log(&loss_path, log)
    };
    for step in start + 1..=cfg.train.steps {
        let mut rng = subsystem_rng(cfg.seed, &format!("train/{step}"));
        let mut idx: Vec<usize> = if b == n {
            (0..n).collect()
        } else {
            sample_indices(&mut rng, n, b).into_vec()
        };
        idx.sort_unstable();
        let (x0, cond) = if b == n {
            (target_all.clone(), cond_all.clone())
        } else {
            let it = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), (b,), &dev)?;
            (target_all.index_select(&it, 0)?, cond_all.select(&idx)?)
        };
        let loss = training_loss(&model, &x0, &cond, &schedule, &mut rng)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::Domain(format!("loss diverged at step {step}")));
        }
        opt.backward_step(&loss)?;
        log.push((step, value));
        losses.push((step, value));
        if cfg.train.log_every > 0 && step % cfg.train.log_every == 0 {
            info!("step {step} loss {value:.5}");
        }
        let periodic = cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0;
        if periodic || step == cfg.train.steps {
            save(step, &opt, &log)?;
        }
    }
    if start >= cfg.train.steps {
        warn!("checkpoint is already at step {start}; nothing to do");
        if !ckpt_path.exists() {
            save(start, &opt, &log)?;
        }
    }
    Ok(TrainReport {
        start_step: start,
        final_step: cfg.train.steps.max(start),
        parameters: model.num_parameters(),
        losses,
        checkpoint: ckpt_path,
    })
}

// ---------------------------------------------------------------- inference

#[derive(Debug, Clone, Default)]
pub struct InferOptions {
    /// Dump per-image prompt and mask plus fusion-site counters.
    pub debug: bool,
    /// Overrides the configured guidance mode.
    pub ablate: Option<GuidanceMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteCounts {
    pub mask: usize,
    pub scmap: usize,
    pub bypassed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub outputs: Vec<PathBuf>,
    pub failed: Vec<FileError>,
    pub mode: Option<GuidanceMode>,
    pub sites: SiteCounts,
}

/// Rebuilds a model from a checkpoint, verifying the embedding table.
pub fn load_model(cfg: &RunConfig, checkpoint_path: &Path, backends: &Backends) -> Result<(SrModel, CheckpointHeader)> {
    let dev = Device::Cpu;
    let ck = checkpoint::load(checkpoint_path, &dev)?;
    let h = ck.header;
    if h.model.text_dim != backends.encoder.dim() {
        return Err(Error::Validation(format!(
            "checkpoint expects {}-dim text embeddings, encoder gives {}",
            h.model.text_dim,
            backends.encoder.dim()
        )));
    }
    let handle = EncoderHandle::new(backends.encoder.as_ref());
    let table = EmbeddingTable::build(&backends.taxonomy, &handle)?;
    checkpoint::check_table(&h, &table.fingerprint(), table.backend())?;
    let model = SrModel::new(&h.model, h.scale, &table, derive_seed(cfg.seed, "init"), DType::F32, &dev)?;
    model.store().load(&ck.params)?;
    Ok((model, h))
}

/// Super-resolves every PNG in `lr_dir` into `out_dir/<id>.png`.
pub fn infer(cfg: &RunConfig, checkpoint_path: &Path, lr_dir: &Path, out_dir: &Path, opts: &InferOptions) -> Result<InferReport> {
    let backends = Backends::from_config(cfg)?;
    let (model, header) = load_model(cfg, checkpoint_path, &backends)?;
    let mut sched_cfg = header.schedule;
    sched_cfg.sample_steps = cfg.schedule.sample_steps;
    let schedule = sched_cfg.build()?;
    let mode = opts.ablate.unwrap_or(cfg.guidance);
    let inputs = list_pngs(lr_dir)?;
    if inputs.is_empty() {
        return Err(Error::Usage(format!("no PNG images in {}", lr_dir.display())));
    }
    create_dir(out_dir)?;
    let debug_dir = out_dir.join("debug");
    let tokens = header.model.text_tokens;
    let empty = backends.empty_context(tokens)?;
    let dev = model.device().clone();
    let mut report = InferReport {
        mode: Some(mode),
        ..Default::default()
    };
    let before = model.trace().counts();
    for (id, path) in inputs {
        let result = (|| -> Result<PathBuf> {
            let lr = load_rgb(&path)?;
            let (hh, hw) = model.output_dims(lr.height() as usize, lr.width() as usize);
            let scales = model.guidance_scales(hh, hw);
            let bundle = crate::dsg::build_guidance(
                ImageInput { id: &id, image: &lr },
                &crate::dsg::GuidanceBackends {
                    segmenter: backends.segmenter.as_ref(),
                    taxonomy: &backends.taxonomy,
                    prompts: &backends.prompts,
                    palette: &backends.palette,
                },
                &scales,
                mode,
            )?;
            if opts.debug {
                bundle.dump(&debug_dir)?;
            }
            let text = backends.text_context(&bundle.prompt, tokens)?;
            let cond = model.conditioning(&[ConditionItem {
                bundle: &bundle,
                text: &text,
                lr: &lr,
            }])?;
            let uncond = if cfg.sample.guidance_scale != 1.0 {
                let t = Tensor::from_slice(&empty, (1, tokens, header.model.text_dim), &dev)?.to_dtype(model.dtype())?;
                Some(cond.with_text(t))
            } else {
                None
            };
            let base = model.target_base(&cond)?;
            let mut rng = subsystem_rng(cfg.seed, &format!("sampling/{id}"));
            let sr = ddpm_sample(
                &model,
                &SampleInputs {
                    cond: &cond,
                    uncond: uncond.as_ref(),
                    base: base.as_ref(),
                },
                &schedule,
                &cfg.sample,
                &mut rng,
            )?;
            let img = tensor_to_rgb(&sr.squeeze(0)?)?;
            let out = out_dir.join(format!("{id}.png"));
            img.save(&out)?;
            Ok(out)
        })();
        match result {
            Ok(p) => report.outputs.push(p),
            Err(e) => {
                warn!("{id}: {e}");
                report.failed.push(FileError {
                    id,
                    error: e.to_string(),
                });
            }
        }
    }
    let after = model.trace().counts();
    report.sites = SiteCounts {
        mask: after.0 - before.0,
        scmap: after.1 - before.1,
        bypassed: after.2 - before.2,
    };
    if opts.debug {
        write_file(&debug_dir.join("gfm_trace.json"), serde_json::to_string_pretty(&report.sites)? + "\n")?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- eval

/// Scores `sr_dir` (against `hr_dir` when given) and writes
/// `metrics.json` / `metrics.csv` into `out_dir`.
pub fn eval(cfg: &RunConfig, sr_dir: &Path, hr_dir: Option<&Path>, out_dir: &Path) -> Result<MetricReport> {
    let report = evaluate_dir(sr_dir, hr_dir, &cfg.eval.plugins, cfg.eval.crop_border)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    report.write(out_dir, "metrics")?;
    Ok(report)
}

/// Appends one line to `path`, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Per-image PSNR of bicubic upsampling against HR for a pair directory.
pub fn bicubic_baseline(data_dir: &Path, crop_border: usize) -> Result<BTreeMap<String, f64>> {
    let manifest = Manifest::load(data_dir)?;
    let mut out = BTreeMap::new();
    for p in &manifest.pairs {
        let hr = load_rgb(&data_dir.join(&p.hr))?;
        let lr = load_rgb(&data_dir.join(&p.lr))?;
        let up = crate::imageops::bicubic(&lr, hr.width(), hr.height());
        let v = crate::metrics::psnr(
            &image::DynamicImage::ImageRgb8(up),
            &image::DynamicImage::ImageRgb8(hr),
            crop_border,
        )?;
        out.insert(p.id.clone(), v.0);
    }
    Ok(out)
}
