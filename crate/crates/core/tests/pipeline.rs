use std::path::{Path, PathBuf};

use image::RgbImage;
use semsr_core::config::RunConfig;
use semsr_core::diffusion::checkpoint;
use semsr_core::dsg::GuidanceMode;
use semsr_core::fixtures::synthetic_scene;
use semsr_core::pipeline::{self, InferOptions, Manifest};
use semsr_core::segmentation::load_mask_file;
use semsr_core::slbp::prompt_for_map;
use semsr_core::text_embedding::EmbeddingTable;
use semsr_core::LabelTaxonomy;

fn smoke(overrides: &[&str]) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/smoke.toml");
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::resolve(Some(&path), &overrides).unwrap()
}

fn scenes(dir: &Path, n: u64, side: u32) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        synthetic_scene(i, side, side).save(dir.join(format!("scene{i}.png"))).unwrap();
    }
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(n: u64) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        scenes(&root.join("src"), n, 32);
        Fixture { _tmp: tmp, root }
    }

    fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }

    fn prepare(&self, cfg: &RunConfig) {
        pipeline::synth_pairs(cfg, &self.root.join("src"), &self.data()).unwrap();
        let rep = pipeline::preprocess(cfg, &self.data().join("lr"), &self.cache()).unwrap();
        assert!(rep.failed.is_empty(), "{:?}", rep.failed);
    }
}

#[test]
fn synth_pairs_writes_pairs_and_a_deterministic_manifest() {
    let fx = Fixture::new(3);
    let cfg = smoke(&[]);
    let a = pipeline::synth_pairs(&cfg, &fx.root.join("src"), &fx.root.join("a")).unwrap();
    let b = pipeline::synth_pairs(&cfg, &fx.root.join("src"), &fx.root.join("b")).unwrap();
    assert_eq!(a.pairs.len(), 3);
    assert!(a.errors.is_empty());
    assert_eq!(
        pipeline::manifest_hash(&fx.root.join("a")).unwrap(),
        pipeline::manifest_hash(&fx.root.join("b")).unwrap()
    );
    assert_eq!(a, b);
    let lr = image::open(fx.root.join("a").join(&a.pairs[0].lr)).unwrap();
    assert_eq!((lr.width(), lr.height()), (8, 8));
    assert_eq!(Manifest::load(&fx.root.join("a")).unwrap(), a);

    let other = pipeline::synth_pairs(&smoke(&["seed=8"]), &fx.root.join("src"), &fx.root.join("c")).unwrap();
    assert_ne!(other.pairs[0].lr_sha256, a.pairs[0].lr_sha256);
}

#[test]
fn indivisible_images_are_recorded_not_fatal() {
    let fx = Fixture::new(2);
    RgbImage::new(30, 32).save(fx.root.join("src/odd.png")).unwrap();
    let m = pipeline::synth_pairs(&smoke(&[]), &fx.root.join("src"), &fx.data()).unwrap();
    assert_eq!(m.pairs.len(), 2);
    assert_eq!(m.errors.len(), 1);
    assert_eq!(m.errors[0].id, "odd");
    assert!(m.errors[0].error.contains("divisible"), "{}", m.errors[0].error);
}

#[test]
fn preprocess_caches_and_prompts_match_labels() {
    let fx = Fixture::new(3);
    let cfg = smoke(&[]);
    pipeline::synth_pairs(&cfg, &fx.root.join("src"), &fx.data()).unwrap();
    let lr = fx.data().join("lr");
    let first = pipeline::preprocess(&cfg, &lr, &fx.cache()).unwrap();
    assert_eq!(first.processed.len(), 3);
    assert!(!first.table_reused);

    let second = pipeline::preprocess(&cfg, &lr, &fx.cache()).unwrap();
    assert!(second.processed.is_empty());
    assert_eq!(second.skipped.len(), 3);
    assert!(second.table_reused);

    let tax = LabelTaxonomy::ade20k();
    for id in ["scene0", "scene1", "scene2"] {
        let map = load_mask_file(&pipeline::labels_path(&fx.cache(), id), (8, 8)).unwrap();
        let prompt = std::fs::read_to_string(pipeline::prompt_path(&fx.cache(), id)).unwrap();
        assert_eq!(prompt, prompt_for_map(&map, &tax, 0.0).unwrap().text);
        assert!(pipeline::mask_path(&fx.cache(), id).exists());
    }

    // Different prompting settings invalidate the cache.
    let changed = pipeline::preprocess(&smoke(&["prompting.min_area_fraction=0.3"]), &lr, &fx.cache()).unwrap();
    assert_eq!(changed.processed.len(), 3);
}

#[test]
fn cached_table_round_trips_bit_exactly() {
    let fx = Fixture::new(1);
    fx.prepare(&smoke(&[]));
    let path = fx.cache().join(pipeline::TABLE_FILE);
    let table = EmbeddingTable::load(&path).unwrap();
    let copy = fx.root.join("copy.scet");
    table.save(&copy).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&copy).unwrap());
    let reloaded = EmbeddingTable::load(&copy).unwrap();
    let bits = |t: &EmbeddingTable| t.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&table), bits(&reloaded));
    assert_eq!(table.fingerprint(), reloaded.fingerprint());
}

#[test]
fn smoke_training_writes_a_loadable_checkpoint() {
    let fx = Fixture::new(2);
    let cfg = smoke(&[]);
    fx.prepare(&cfg);
    let rep = pipeline::train(&cfg, &fx.data(), &fx.cache(), &fx.root.join("run"), false).unwrap();
    assert_eq!(rep.losses.len(), 50);
    assert!(rep.losses.iter().all(|(_, l)| l.is_finite()));
    let ck = checkpoint::load(&rep.checkpoint, &candle_core::Device::Cpu).unwrap();
    assert_eq!(ck.header.step, 50);
    assert_eq!(ck.header.optimizer_steps, 50);
    assert_eq!(ck.header.model, cfg.model);
    assert!(fx.root.join("run").join(pipeline::RUN_CONFIG_FILE).exists());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let fx = Fixture::new(3);
    let full_cfg = smoke(&["train.steps=12"]);
    fx.prepare(&full_cfg);
    let full = pipeline::train(&full_cfg, &fx.data(), &fx.cache(), &fx.root.join("full"), false).unwrap();

    let split = fx.root.join("split");
    pipeline::train(&smoke(&["train.steps=5"]), &fx.data(), &fx.cache(), &split, false).unwrap();
    let resumed = pipeline::train(&full_cfg, &fx.data(), &fx.cache(), &split, true).unwrap();
    assert_eq!(resumed.start_step, 5);
    assert_eq!(resumed.losses.first().unwrap().0, 6);
    assert_eq!(resumed.losses, full.losses[5..]);

    let a = checkpoint::load(&full.checkpoint, &candle_core::Device::Cpu).unwrap();
    let b = checkpoint::load(&resumed.checkpoint, &candle_core::Device::Cpu).unwrap();
    for (name, t) in &a.params {
        let u = &b.params[name];
        let (x, y) = (t.flatten_all().unwrap().to_vec1::<f32>().unwrap(), u.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()), "{name} differs after resume");
    }
    let log = std::fs::read_to_string(split.join(pipeline::LOSS_FILE)).unwrap();
    assert_eq!(log, std::fs::read_to_string(fx.root.join("full").join(pipeline::LOSS_FILE)).unwrap());
}

#[test]
fn inference_is_deterministic_and_ablation_reaches_the_fusion_sites() {
    let fx = Fixture::new(2);
    let cfg = smoke(&["train.steps=3"]);
    fx.prepare(&cfg);
    let rep = pipeline::train(&cfg, &fx.data(), &fx.cache(), &fx.root.join("run"), false).unwrap();
    let lr = fx.data().join("lr");
    let run = |out: &str, opts: &InferOptions| pipeline::infer(&cfg, &rep.checkpoint, &lr, &fx.root.join(out), opts).unwrap();

    let a = run("a", &InferOptions::default());
    let b = run("b", &InferOptions::default());
    assert_eq!(a.outputs.len(), 2);
    for (p, q) in a.outputs.iter().zip(&b.outputs) {
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap());
    }
    let sr = image::open(&a.outputs[0]).unwrap();
    assert_eq!((sr.width(), sr.height()), (32, 32));
    assert!(a.sites.mask > 0 && a.sites.scmap > 0);

    let ablated = run(
        "c",
        &InferOptions {
            debug: true,
            ablate: Some(GuidanceMode::NoScmap),
        },
    );
    assert_eq!(ablated.sites.scmap, 0);
    assert!(ablated.sites.mask > 0);
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.root.join("c/debug/gfm_trace.json")).unwrap()).unwrap();
    assert_eq!(trace["scmap"], 0);
    assert!(fx.root.join("c/debug/scene0_prompt.txt").exists());
    assert!(fx.root.join("c/debug/scene0_mask.png").exists());
}

#[test]
fn eval_writes_reports() {
    let fx = Fixture::new(2);
    let cfg = smoke(&[]);
    pipeline::synth_pairs(&cfg, &fx.root.join("src"), &fx.data()).unwrap();
    let hr = fx.data().join("hr");
    let rep = pipeline::eval(&cfg, &hr, Some(&hr), &fx.root.join("eval")).unwrap();
    assert_eq!(rep.aggregate.psnr_inf_count, 2);
    assert_eq!(rep.aggregate.psnr_mean, None);
    assert!(fx.root.join("eval/metrics.json").exists());
    assert!(fx.root.join("eval/metrics.csv").exists());

    let baseline = pipeline::bicubic_baseline(&fx.data(), 4).unwrap();
    assert_eq!(baseline.len(), 2);
    assert!(baseline.values().all(|v| v.is_finite() && *v > 10.0));
}
