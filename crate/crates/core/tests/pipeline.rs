//! End-to-end behavior of the staged pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use marnet_core::data::{class_means, nearest_centroid_accuracy, SynthConfig};
use marnet_core::diffusion::{build_schedule, TimeEmbedding};
use marnet_core::ema::pair_similarity_gap;
use marnet_core::export::ExportedEmbeddings;
use marnet_core::mlp::DEFAULT_SLOPE;
use marnet_core::pipeline::{
    ablate_to_dir, checkpoint_path, evaluate, export_embeddings, load_models, prepare_data, retrain_fusion_in_dir,
    run_ablation, train_baseline, train_pipeline, train_to_dir, ExportKind, Models, Variant, STAGES,
};
use marnet_core::seed::{derive_seed, rng_from};
use marnet_core::{CdrModel, EmaModel, Error, FusionStrategy, MlpParams, RunConfig, Stage};
use sha2::{Digest, Sha256};

fn small(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        synth: SynthConfig {
            classes: 4,
            per_class: 20,
            visual_dim: 6,
            semantic_dim: 5,
            distractors: 2,
            ..SynthConfig::default()
        },
        shared_dim: 5,
        hidden: 12,
        time_dim: 4,
        batch_size: 16,
        steps: 10,
        ..RunConfig::default()
    };
    for e in [
        &mut cfg.epochs_baseline,
        &mut cfg.epochs_ema,
        &mut cfg.epochs_mlp,
        &mut cfg.epochs_cdr,
        &mut cfg.epochs_fusion,
    ] {
        *e = 3;
    }
    cfg
}

fn init_rng(cfg: &RunConfig, stage: Stage) -> rand_chacha::ChaCha8Rng {
    rng_from(derive_seed(derive_seed(cfg.seed, &stage.to_string()), "init"))
}

#[test]
fn zero_epochs_keep_initial_weights() {
    let mut cfg = small(3);
    cfg.set("epochs", "0").unwrap();
    let data = prepare_data(&cfg).unwrap();
    let out = train_pipeline(&cfg, &data).unwrap();
    let (dv, ds, c, h) = (6, 5, 4, 12);

    let baseline = MlpParams::init(&[dv, c], DEFAULT_SLOPE, &mut init_rng(&cfg, Stage::Baseline)).unwrap();
    assert_eq!(out.models.baseline.as_ref().unwrap(), &baseline);
    let mlp = MlpParams::init(&[dv, h, h, h, c], DEFAULT_SLOPE, &mut init_rng(&cfg, Stage::Mlp)).unwrap();
    assert_eq!(out.models.mlp.as_ref().unwrap(), &mlp);
    let ema = EmaModel::init(dv, ds, 5, c, &mut init_rng(&cfg, Stage::Ema)).unwrap();
    let got = out.models.ema.as_ref().unwrap();
    assert_eq!((&got.visual, &got.semantic, &got.classifier), (&ema.visual, &ema.semantic, &ema.classifier));
    let schedule = build_schedule(10, cfg.beta_start, cfg.beta_end).unwrap();
    let cdr = CdrModel::init(dv, ds, c, h, schedule, TimeEmbedding::new(4).unwrap(), &mut init_rng(&cfg, Stage::Cdr))
        .unwrap();
    assert_eq!(out.models.cdr.as_ref().unwrap(), &cdr);
    for log in &out.logs {
        assert_eq!(log.epochs.len(), 1, "{}: only the pre-training row", log.stage);
    }
}

#[test]
fn checkpoints_reload_to_the_trained_models() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(4);
    cfg.out = dir.path().to_path_buf();
    let outcome = train_to_dir(&cfg).unwrap();
    assert_eq!(load_models(dir.path()).unwrap(), outcome.models);
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_config_gives_identical_run_directories() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small(5);
    cfg.out = a.path().to_path_buf();
    let rows_a = ablate_to_dir(&cfg).unwrap();
    cfg.out = b.path().to_path_buf();
    cfg.set("exec", "sequential").unwrap();
    let rows_b = ablate_to_dir(&cfg).unwrap();
    assert_eq!(rows_a, rows_b);
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert!(fa.contains_key("train_log.tsv") && fa.contains_key("ablation.json"));
    assert_eq!(fa.len(), fb.len());
    for (name, bytes) in &fa {
        if name == "config.txt" {
            // records the exec mode itself
            continue;
        }
        assert_eq!(Some(bytes), fb.get(name), "{name} differs");
    }
    let text = |m: &BTreeMap<String, Vec<u8>>| String::from_utf8(m["config.txt"].clone()).unwrap();
    let (ca, cb) = (text(&fa), text(&fb));
    let differing: Vec<_> = ca.lines().zip(cb.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(differing, [("exec = parallel", "exec = sequential")]);
    let names: Vec<&str> = rows_a.iter().map(|r| r.variant).collect();
    assert_eq!(names, ["baseline", "+EMA", "+MLP", "+CDR", "+Fusion"]);
    for r in &rows_a {
        assert!(r.top5 >= r.top1);
    }
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn retraining_fusion_leaves_branch_checkpoints_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(6);
    cfg.out = dir.path().to_path_buf();
    train_to_dir(&cfg).unwrap();
    let frozen = [Stage::Baseline, Stage::Ema, Stage::Mlp, Stage::Cdr];
    let before: Vec<_> = frozen.iter().map(|&s| sha(&checkpoint_path(dir.path(), s))).collect();
    let fusion_before = sha(&checkpoint_path(dir.path(), Stage::Fusion));

    cfg.fusion = FusionStrategy::Hm;
    cfg.epochs_fusion = 5;
    retrain_fusion_in_dir(&cfg).unwrap();
    let after: Vec<_> = frozen.iter().map(|&s| sha(&checkpoint_path(dir.path(), s))).collect();
    assert_eq!(before, after);
    assert_ne!(fusion_before, sha(&checkpoint_path(dir.path(), Stage::Fusion)));
    let models = load_models(dir.path()).unwrap();
    assert_eq!(models.fusion().unwrap().config.strategy, FusionStrategy::Hm);
}

#[test]
fn missing_checkpoints_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(7);
    let data = prepare_data(&cfg).unwrap();
    let empty = load_models(dir.path()).unwrap();
    assert_eq!(empty, Models::default());
    for (variant, stage) in [
        (Variant::Baseline, Stage::Baseline),
        (Variant::Ema, Stage::Ema),
        (Variant::Mlp, Stage::Mlp),
        (Variant::Cdr, Stage::Cdr),
        (Variant::Fusion, Stage::Fusion),
    ] {
        let err = evaluate(&cfg, &empty, &data, variant, None).unwrap_err();
        assert!(matches!(err.root(), Error::MissingCheckpoint(s) if *s == stage), "{err}");
        assert!(err.to_string().contains(&format!("stage {stage}")), "{err}");
    }
    assert_eq!(STAGES.len(), 5);
}

#[test]
fn separable_data_gives_near_perfect_baseline() {
    let mut cfg = RunConfig::default();
    cfg.synth.visual_noise = 0.0;
    cfg.synth.distractor_strength = 0.0;
    let data = prepare_data(&cfg).unwrap();
    let (baseline, _) = train_baseline(&cfg, &data).unwrap();
    let models = Models {
        baseline: Some(baseline),
        ..Models::default()
    };
    let report = evaluate(&cfg, &models, &data, Variant::Baseline, None).unwrap();
    assert!(report.top1 >= 0.99, "top1 {}", report.top1);
}

/// One full default run, checked several ways.
#[test]
fn default_run_properties() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.out = dir.path().to_path_buf();
    let (rows, outcome) = run_ablation(&cfg).unwrap();
    let data = prepare_data(&cfg).unwrap();

    let fusion = outcome.logs.iter().find(|l| l.stage == Stage::Fusion).unwrap();
    let (first, last) = (fusion.epochs.first().unwrap(), fusion.epochs.last().unwrap());
    assert!(last.report.total < first.report.total, "{} !< {}", last.report.total, first.report.total);

    let ema = outcome.models.ema().unwrap();
    let u = ema.encode_visual(&data.set.visual(&data.test)).unwrap();
    let v = ema.encode_semantic(&data.set.semantic(&data.test)).unwrap();
    let (diag, off) = pair_similarity_gap(&u, &v).unwrap();
    assert!(diag - off >= 0.3, "matched {diag}, mismatched {off}");

    let centroids = class_means(&data.set.semantic(&data.train), &data.set.labels_at(&data.train), data.classes());
    let test_labels = data.set.labels_at(&data.test);
    let x_cdr = outcome.features.x_cdr.select_rows(&data.test);
    let nc = nearest_centroid_accuracy(&x_cdr, &test_labels, &centroids);
    assert!(nc >= 0.75, "x_CDR nearest-centroid accuracy {nc}");

    let path = dir.path().join("cdr.mrex");
    export_embeddings(&cfg, &outcome.models, &data.set, ExportKind::Cdr, &path).unwrap();
    let file = ExportedEmbeddings::read(&path).unwrap();
    assert_eq!(file.len(), data.set.len());
    let from_file = nearest_centroid_accuracy(&file.to_tensor().select_rows(&data.test), &test_labels, &centroids);
    assert!((from_file - nc).abs() <= 1.0 / data.test.len() as f64, "{from_file} vs {nc}");

    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!(r.top5 >= r.top1);
    }
}
