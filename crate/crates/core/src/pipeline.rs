//! Staged training, evaluation, ablation and export.
//!
//! Stages run in order and each writes its own checkpoint:
//!
//! | stage    | model                                   | checkpoint      |
//! |----------|-----------------------------------------|-----------------|
//! | baseline | linear head on raw `x_v`                | `baseline.mnck` |
//! | ema      | encoders + classifier on `x_v'`         | `ema.mnck`      |
//! | mlp      | denoiser-shaped MLP used as a classifier | `mlp.mnck`      |
//! | cdr      | conditional denoiser + classifier       | `cdr.mnck`      |
//! | fusion   | linear head on `fuse(x_EMA, x_CDR)`     | `fusion.mnck`   |
//!
//! The fusion stage freezes the EMA and CDR models and trains on sampled x_CDR.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::binio::write_file;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_embeddings, stratified_split, PairedEmbeddingSet};
use crate::diffusion::{build_schedule, sample_x_cdr_batch, CdrBatch, CdrModel, Draws, TimeEmbedding};
use crate::ema::EmaModel;
use crate::error::{Error, Result, Stage, StageExt};
use crate::export::ExportedEmbeddings;
use crate::fusion::{classify, fuse, fuse_on_tape, EvalReport, FusionConfig, FusionStrategy};
use crate::mlp::{MlpParams, DEFAULT_SLOPE};
use crate::seed::{derive_indexed, derive_seed, rng_from};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{train_loop, EpochLog, LossReport, TrainSettings};

pub const LOG_FORMAT_VERSION: u32 = 1;

/// Loaded data with its stratified split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub set: PairedEmbeddingSet,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Prepared {
    pub fn classes(&self) -> usize {
        self.set.classes()
    }
}

/// Generation seed actually used for synthetic data.
pub fn data_seed(cfg: &RunConfig) -> u64 {
    cfg.data_seed.unwrap_or_else(|| derive_seed(cfg.seed, "data"))
}

/// The synthetic set a config describes (ignores `cfg.data`).
pub fn synthetic_set(cfg: &RunConfig) -> Result<PairedEmbeddingSet> {
    let mut synth = cfg.synth.clone();
    synth.seed = data_seed(cfg);
    generate_synthetic(&synth)
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let inner = || -> Result<Prepared> {
        cfg.validate()?;
        let set = match &cfg.data {
            Some(path) => load_embeddings(path)?,
            None => synthetic_set(cfg)?,
        };
        let (train, test) = stratified_split(
            set.labels(),
            set.classes(),
            cfg.train_fraction,
            derive_seed(cfg.seed, "split"),
        )?;
        set.subset(&train).ensure_all_classes()?;
        if test.is_empty() {
            return Err(Error::Config("test split is empty".into()));
        }
        if cfg.batch_size > train.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training rows",
                cfg.batch_size,
                train.len()
            )));
        }
        Ok(Prepared { set, train, test })
    };
    inner().stage(Stage::Data)
}

/// Ablation variants, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    Baseline,
    Ema,
    Mlp,
    Cdr,
    Fusion,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Ema, Variant::Mlp, Variant::Cdr, Variant::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ema => "+EMA",
            Variant::Mlp => "+MLP",
            Variant::Cdr => "+CDR",
            Variant::Fusion => "+Fusion",
        }
    }

    /// File-name friendly form.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ema => "ema",
            Variant::Mlp => "mlp",
            Variant::Cdr => "cdr",
            Variant::Fusion => "fusion",
        }
    }

    pub fn stage(self) -> Stage {
        match self {
            Variant::Baseline => Stage::Baseline,
            Variant::Ema => Stage::Ema,
            Variant::Mlp => Stage::Mlp,
            Variant::Cdr => Stage::Cdr,
            Variant::Fusion => Stage::Fusion,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('+').to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.slug() == t)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Trainable stages, in training order.
pub const STAGES: [Stage; 5] = [Stage::Baseline, Stage::Ema, Stage::Mlp, Stage::Cdr, Stage::Fusion];

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub head: MlpParams,
    pub config: FusionConfig,
}

/// All trained models; a stage that has not been trained or loaded is `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Models {
    pub baseline: Option<MlpParams>,
    pub ema: Option<EmaModel>,
    pub mlp: Option<MlpParams>,
    pub cdr: Option<CdrModel>,
    pub fusion: Option<FusionHead>,
}

impl Models {
    fn need<'a, T>(v: &'a Option<T>, stage: Stage) -> Result<&'a T> {
        v.as_ref().ok_or(Error::MissingCheckpoint(stage))
    }

    pub fn baseline(&self) -> Result<&MlpParams> {
        Self::need(&self.baseline, Stage::Baseline)
    }

    pub fn ema(&self) -> Result<&EmaModel> {
        Self::need(&self.ema, Stage::Ema)
    }

    pub fn mlp(&self) -> Result<&MlpParams> {
        Self::need(&self.mlp, Stage::Mlp)
    }

    pub fn cdr(&self) -> Result<&CdrModel> {
        Self::need(&self.cdr, Stage::Cdr)
    }

    pub fn fusion(&self) -> Result<&FusionHead> {
        Self::need(&self.fusion, Stage::Fusion)
    }
}

/// Per-epoch losses of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLog {
    pub stage: Stage,
    pub epochs: Vec<EpochLog>,
}

fn stage_seed(cfg: &RunConfig, stage: Stage) -> u64 {
    derive_seed(cfg.seed, &stage.to_string())
}

fn settings(cfg: &RunConfig, stage: Stage, epochs: usize) -> TrainSettings {
    TrainSettings {
        epochs,
        batch_size: cfg.batch_size,
        adam: cfg.adam,
        seed: derive_seed(stage_seed(cfg, stage), "batches"),
    }
}

fn init_rng(cfg: &RunConfig, stage: Stage) -> rand_chacha::ChaCha8Rng {
    rng_from(derive_seed(stage_seed(cfg, stage), "init"))
}

/// Training-split tensors shared by the stages.
struct TrainData {
    x_v: Tensor,
    x_s: Tensor,
    labels: Vec<usize>,
}

impl TrainData {
    fn new(data: &Prepared) -> Self {
        TrainData {
            x_v: data.set.visual(&data.train),
            x_s: data.set.semantic(&data.train),
            labels: data.set.labels_at(&data.train),
        }
    }

    fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

fn ce_step(
    model: &MlpParams,
    tape: &mut Tape,
    vars: &[Var],
    x: &Tensor,
    labels: &[usize],
) -> Result<(Var, LossReport)> {
    let xc = tape.constant(x.clone());
    let logits = model.forward_tape(tape, vars, xc)?;
    let loss = tape.cross_entropy(logits, labels)?;
    Ok((loss, LossReport::ce_only(tape.value(loss).item()?)))
}

fn train_classifier(
    cfg: &RunConfig,
    stage: Stage,
    dims: &[usize],
    epochs: usize,
    x: &Tensor,
    labels: &[usize],
) -> Result<(MlpParams, Vec<EpochLog>)> {
    let mut model = MlpParams::init(dims, DEFAULT_SLOPE, &mut init_rng(cfg, stage))?;
    let logs = train_loop(
        &mut model,
        labels.len(),
        &settings(cfg, stage, epochs),
        |m: &MlpParams, tape: &mut Tape, vars: &[Var], idx: &[usize], _| {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            ce_step(m, tape, vars, &x.select_rows(idx), &y)
        },
    )?;
    Ok((model, logs))
}

pub fn train_baseline(cfg: &RunConfig, data: &Prepared) -> Result<(MlpParams, StageLog)> {
    let inner = || {
        let td = TrainData::new(data);
        let dims = [data.set.visual_dim(), data.classes()];
        train_classifier(cfg, Stage::Baseline, &dims, cfg.epochs_baseline, &td.x_v, &td.labels)
    };
    let (m, epochs) = inner().stage(Stage::Baseline)?;
    Ok((m, StageLog { stage: Stage::Baseline, epochs }))
}

pub fn train_mlp(cfg: &RunConfig, data: &Prepared) -> Result<(MlpParams, StageLog)> {
    let inner = || {
        let td = TrainData::new(data);
        let h = cfg.hidden;
        let dims = [data.set.visual_dim(), h, h, h, data.classes()];
        train_classifier(cfg, Stage::Mlp, &dims, cfg.epochs_mlp, &td.x_v, &td.labels)
    };
    let (m, epochs) = inner().stage(Stage::Mlp)?;
    Ok((m, StageLog { stage: Stage::Mlp, epochs }))
}

pub fn train_ema(cfg: &RunConfig, data: &Prepared) -> Result<(EmaModel, StageLog)> {
    let inner = || -> Result<(EmaModel, Vec<EpochLog>)> {
        let td = TrainData::new(data);
        let mut rng = init_rng(cfg, Stage::Ema);
        let mut model = EmaModel::init(
            data.set.visual_dim(),
            data.set.semantic_dim(),
            cfg.shared_dim,
            data.classes(),
            &mut rng,
        )?;
        model = EmaModel::new(
            model.visual,
            model.semantic,
            model.classifier,
            cfg.tau,
            cfg.alpha1,
            cfg.beta,
        )?;
        model.train_tau = cfg.train_temp;
        let logs = train_loop(
            &mut model,
            td.labels.len(),
            &settings(cfg, Stage::Ema, cfg.epochs_ema),
            |m: &EmaModel, tape: &mut Tape, vars: &[Var], idx: &[usize], _| {
                m.loss_on_tape(tape, vars, &td.x_v.select_rows(idx), &td.x_s.select_rows(idx), &td.labels(idx))
            },
        )?;
        Ok((model, logs))
    };
    let (m, epochs) = inner().stage(Stage::Ema)?;
    Ok((m, StageLog { stage: Stage::Ema, epochs }))
}

pub fn train_cdr(cfg: &RunConfig, data: &Prepared) -> Result<(CdrModel, StageLog)> {
    let inner = || -> Result<(CdrModel, Vec<EpochLog>)> {
        let td = TrainData::new(data);
        let schedule = build_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)?;
        let temb = TimeEmbedding::new(cfg.time_dim)?;
        let init = CdrModel::init(
            data.set.visual_dim(),
            data.set.semantic_dim(),
            data.classes(),
            cfg.hidden,
            schedule,
            temb,
            &mut init_rng(cfg, Stage::Cdr),
        )?;
        let mut model = CdrModel::new(
            init.denoiser,
            init.classifier,
            init.schedule,
            init.temb,
            cfg.alpha2,
            cfg.gamma,
        )?;
        let draw_seed = derive_seed(stage_seed(cfg, Stage::Cdr), "draws");
        let ds = data.set.semantic_dim();
        let logs = train_loop(
            &mut model,
            td.labels.len(),
            &settings(cfg, Stage::Cdr, cfg.epochs_cdr),
            |m: &CdrModel, tape: &mut Tape, vars: &[Var], idx: &[usize], step: u64| {
                let x_s0 = td.x_s.select_rows(idx);
                let x_v = td.x_v.select_rows(idx);
                let labels = td.labels(idx);
                let draws = Draws::sample(&m.schedule, idx.len(), ds, &mut rng_from(derive_indexed(draw_seed, "step", step)));
                let batch = CdrBatch {
                    x_s0: &x_s0,
                    x_v: &x_v,
                    labels: &labels,
                };
                m.loss_on_tape(tape, vars, &batch, &draws)
            },
        )?;
        Ok((model, logs))
    };
    let (m, epochs) = inner().stage(Stage::Cdr)?;
    Ok((m, StageLog { stage: Stage::Cdr, epochs }))
}

/// Sampled x_CDR for every row of the set. Row `i` always uses the seed
/// derived from `(cfg.seed, i)`.
pub fn sample_cdr_features(cfg: &RunConfig, cdr: &CdrModel, set: &PairedEmbeddingSet) -> Result<Tensor> {
    let all = set.all_indices();
    sample_x_cdr_batch(
        cdr,
        &set.visual(&all),
        &all,
        derive_seed(cfg.seed, "x_cdr"),
        cfg.num_samples,
        cfg.exec,
    )
}

/// Branch outputs for every row: `x_EMA` and sampled `x_CDR`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFeatures {
    pub x_ema: Tensor,
    pub x_cdr: Tensor,
}

pub fn branch_features(cfg: &RunConfig, models: &Models, set: &PairedEmbeddingSet) -> Result<BranchFeatures> {
    let all = set.all_indices();
    let x_ema = models.ema()?.encode_visual(&set.visual(&all))?;
    let x_cdr = sample_cdr_features(cfg, models.cdr()?, set)?;
    Ok(BranchFeatures { x_ema, x_cdr })
}

pub fn train_fusion(
    cfg: &RunConfig,
    data: &Prepared,
    features: &BranchFeatures,
) -> Result<(FusionHead, StageLog)> {
    let inner = || -> Result<(FusionHead, Vec<EpochLog>)> {
        let fcfg = FusionConfig {
            strategy: cfg.fusion,
            eps: cfg.hm_eps,
        };
        let a = features.x_ema.select_rows(&data.train);
        let b = features.x_cdr.select_rows(&data.train);
        let width = fcfg.strategy.output_dim(a.cols(), b.cols())?;
        let labels = data.set.labels_at(&data.train);
        let mut head = MlpParams::init(&[width, data.classes()], DEFAULT_SLOPE, &mut init_rng(cfg, Stage::Fusion))?;
        let logs = train_loop(
            &mut head,
            labels.len(),
            &settings(cfg, Stage::Fusion, cfg.epochs_fusion),
            |m: &MlpParams, tape: &mut Tape, vars: &[Var], idx: &[usize], _| {
                let av = tape.constant(a.select_rows(idx));
                let bv = tape.constant(b.select_rows(idx));
                let fused = fuse_on_tape(tape, av, bv, &fcfg)?;
                let logits = m.forward_tape(tape, vars, fused)?;
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let loss = tape.cross_entropy(logits, &y)?;
                Ok((loss, LossReport::ce_only(tape.value(loss).item()?)))
            },
        )?;
        Ok((FusionHead { head, config: fcfg }, logs))
    };
    let (m, epochs) = inner().stage(Stage::Fusion)?;
    Ok((m, StageLog { stage: Stage::Fusion, epochs }))
}

/// Everything produced by a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: Models,
    pub logs: Vec<StageLog>,
    pub features: BranchFeatures,
}

/// Trains all five stages in order.
pub fn train_pipeline(cfg: &RunConfig, data: &Prepared) -> Result<TrainOutcome> {
    let mut models = Models::default();
    let mut logs = Vec::new();
    let (m, l) = train_baseline(cfg, data)?;
    models.baseline = Some(m);
    logs.push(l);
    let (m, l) = train_ema(cfg, data)?;
    models.ema = Some(m);
    logs.push(l);
    let (m, l) = train_mlp(cfg, data)?;
    models.mlp = Some(m);
    logs.push(l);
    let (m, l) = train_cdr(cfg, data)?;
    models.cdr = Some(m);
    logs.push(l);
    let features = branch_features(cfg, &models, &data.set).stage(Stage::Fusion)?;
    let (m, l) = train_fusion(cfg, data, &features)?;
    models.fusion = Some(m);
    logs.push(l);
    Ok(TrainOutcome { models, logs, features })
}

/// Scores the test split with one variant. `features` may be passed to reuse
/// already sampled x_CDR; otherwise it is sampled here.
pub fn evaluate(
    cfg: &RunConfig,
    models: &Models,
    data: &Prepared,
    variant: Variant,
    features: Option<&BranchFeatures>,
) -> Result<EvalReport> {
    let inner = || -> Result<EvalReport> {
        let x_v = data.set.visual(&data.test);
        let labels = data.set.labels_at(&data.test);
        let x_cdr = |features: Option<&BranchFeatures>| -> Result<Tensor> {
            match features {
                Some(f) => Ok(f.x_cdr.select_rows(&data.test)),
                None => sample_x_cdr_batch(
                    models.cdr()?,
                    &x_v,
                    &data.test,
                    derive_seed(cfg.seed, "x_cdr"),
                    cfg.num_samples,
                    cfg.exec,
                ),
            }
        };
        let logits = match variant {
            Variant::Baseline => classify(models.baseline()?, &x_v)?,
            Variant::Ema => models.ema()?.logits(&x_v)?,
            Variant::Mlp => models.mlp()?.forward(&x_v)?,
            Variant::Cdr => {
                let cdr = models.cdr()?;
                cdr.classifier.forward(&x_cdr(features)?)?
            }
            Variant::Fusion => {
                let head = models.fusion()?;
                let x_ema = models.ema()?.encode_visual(&x_v)?;
                let fused = fuse(&x_ema, &x_cdr(features)?, &head.config)?;
                classify(&head.head, &fused)?
            }
        };
        EvalReport::from_logits(&logits, &labels)
    };
    inner().stage(Stage::Eval)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub top1: f64,
    pub top5: f64,
    pub confidence_mean: f64,
    pub report: EvalReport,
}

/// Evaluates every variant, in reporting order.
pub fn ablation_rows(
    cfg: &RunConfig,
    models: &Models,
    data: &Prepared,
    features: &BranchFeatures,
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .into_iter()
        .map(|v| {
            let report = evaluate(cfg, models, data, v, Some(features))?;
            Ok(AblationRow {
                variant: v.name(),
                top1: report.top1,
                top5: report.top5,
                confidence_mean: report.confidence_mean,
                report,
            })
        })
        .collect()
}

/// Trains all stages on one data set and evaluates all five variants.
pub fn run_ablation(cfg: &RunConfig) -> Result<(Vec<AblationRow>, TrainOutcome)> {
    let data = prepare_data(cfg)?;
    let outcome = train_pipeline(cfg, &data)?;
    let rows = ablation_rows(cfg, &outcome.models, &data, &outcome.features)?;
    Ok((rows, outcome))
}

// ---- serialization of models, logs and reports ----

fn push_mlp(ck: &mut Checkpoint, prefix: &str, m: &MlpParams) {
    for (i, layer) in m.layers().iter().enumerate() {
        ck.push(format!("{prefix}.w{i}"), layer.weight.clone());
        ck.push(format!("{prefix}.b{i}"), layer.bias.clone());
    }
    ck.push(format!("{prefix}.slope"), Tensor::scalar(m.slope()));
}

fn read_mlp(ck: &Checkpoint, prefix: &str) -> Result<MlpParams> {
    let mut tensors = Vec::new();
    let mut i = 0;
    while let Ok(w) = ck.get(&format!("{prefix}.w{i}")) {
        tensors.push(w.clone());
        tensors.push(ck.get(&format!("{prefix}.b{i}"))?.clone());
        i += 1;
    }
    if tensors.is_empty() {
        return Err(Error::MissingTensor(format!("{prefix}.w0")));
    }
    MlpParams::from_tensors(tensors, scalar(ck, &format!("{prefix}.slope"))?)
}

fn scalar(ck: &Checkpoint, name: &str) -> Result<f64> {
    ck.get(name)?.item()
}

fn count(ck: &Checkpoint, name: &str) -> Result<usize> {
    let v = scalar(ck, name)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::invalid(format!("{name} = {v} is not a count")));
    }
    Ok(v as usize)
}

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{stage}.mnck"))
}

pub fn save_models(dir: &Path, models: &Models) -> Result<()> {
    if let Some(m) = &models.baseline {
        let mut ck = Checkpoint::new();
        push_mlp(&mut ck, "baseline", m);
        ck.write(checkpoint_path(dir, Stage::Baseline)).stage(Stage::Baseline)?;
    }
    if let Some(m) = &models.ema {
        let mut ck = Checkpoint::new();
        push_mlp(&mut ck, "ema.visual", &m.visual);
        push_mlp(&mut ck, "ema.semantic", &m.semantic);
        push_mlp(&mut ck, "ema.classifier", &m.classifier);
        ck.push("ema.tau", Tensor::scalar(m.tau()));
        ck.push("ema.train_tau", Tensor::scalar(f64::from(u8::from(m.train_tau))));
        ck.push("ema.alpha1", Tensor::scalar(m.alpha1));
        ck.push("ema.beta", Tensor::scalar(m.beta));
        ck.write(checkpoint_path(dir, Stage::Ema)).stage(Stage::Ema)?;
    }
    if let Some(m) = &models.mlp {
        let mut ck = Checkpoint::new();
        push_mlp(&mut ck, "mlp", m);
        ck.write(checkpoint_path(dir, Stage::Mlp)).stage(Stage::Mlp)?;
    }
    if let Some(m) = &models.cdr {
        let mut ck = Checkpoint::new();
        push_mlp(&mut ck, "cdr.denoiser", &m.denoiser);
        push_mlp(&mut ck, "cdr.classifier", &m.classifier);
        let (b0, b1) = m.schedule.beta_range();
        ck.push("cdr.steps", Tensor::scalar(m.schedule.steps() as f64));
        ck.push("cdr.beta_start", Tensor::scalar(b0));
        ck.push("cdr.beta_end", Tensor::scalar(b1));
        ck.push("cdr.time_dim", Tensor::scalar(m.temb.dim() as f64));
        ck.push("cdr.alpha2", Tensor::scalar(m.alpha2));
        ck.push("cdr.gamma", Tensor::scalar(m.gamma));
        ck.write(checkpoint_path(dir, Stage::Cdr)).stage(Stage::Cdr)?;
    }
    if let Some(m) = &models.fusion {
        let mut ck = Checkpoint::new();
        push_mlp(&mut ck, "fusion.head", &m.head);
        let idx = FusionStrategy::ALL
            .iter()
            .position(|s| *s == m.config.strategy)
            .expect("listed strategy");
        ck.push("fusion.strategy", Tensor::scalar(idx as f64));
        ck.push("fusion.eps", Tensor::scalar(m.config.eps));
        ck.write(checkpoint_path(dir, Stage::Fusion)).stage(Stage::Fusion)?;
    }
    Ok(())
}

fn read_stage(dir: &Path, stage: Stage) -> Result<Option<Checkpoint>> {
    let path = checkpoint_path(dir, stage);
    if !path.exists() {
        return Ok(None);
    }
    Checkpoint::read(path).stage(stage).map(Some)
}

/// Loads whichever stage checkpoints exist in `dir`.
pub fn load_models(dir: &Path) -> Result<Models> {
    let mut models = Models::default();
    if let Some(ck) = read_stage(dir, Stage::Baseline)? {
        models.baseline = Some(read_mlp(&ck, "baseline").stage(Stage::Baseline)?);
    }
    if let Some(ck) = read_stage(dir, Stage::Ema)? {
        let inner = || -> Result<EmaModel> {
            let mut m = EmaModel::new(
                read_mlp(&ck, "ema.visual")?,
                read_mlp(&ck, "ema.semantic")?,
                read_mlp(&ck, "ema.classifier")?,
                scalar(&ck, "ema.tau")?,
                scalar(&ck, "ema.alpha1")?,
                scalar(&ck, "ema.beta")?,
            )?;
            m.train_tau = scalar(&ck, "ema.train_tau")? != 0.0;
            Ok(m)
        };
        models.ema = Some(inner().stage(Stage::Ema)?);
    }
    if let Some(ck) = read_stage(dir, Stage::Mlp)? {
        models.mlp = Some(read_mlp(&ck, "mlp").stage(Stage::Mlp)?);
    }
    if let Some(ck) = read_stage(dir, Stage::Cdr)? {
        let inner = || -> Result<CdrModel> {
            let schedule = build_schedule(
                count(&ck, "cdr.steps")?,
                scalar(&ck, "cdr.beta_start")?,
                scalar(&ck, "cdr.beta_end")?,
            )?;
            CdrModel::new(
                read_mlp(&ck, "cdr.denoiser")?,
                read_mlp(&ck, "cdr.classifier")?,
                schedule,
                TimeEmbedding::new(count(&ck, "cdr.time_dim")?)?,
                scalar(&ck, "cdr.alpha2")?,
                scalar(&ck, "cdr.gamma")?,
            )
        };
        models.cdr = Some(inner().stage(Stage::Cdr)?);
    }
    if let Some(ck) = read_stage(dir, Stage::Fusion)? {
        let inner = || -> Result<FusionHead> {
            let idx = count(&ck, "fusion.strategy")?;
            let strategy = *FusionStrategy::ALL
                .get(idx)
                .ok_or_else(|| Error::invalid(format!("unknown fusion strategy index {idx}")))?;
            Ok(FusionHead {
                head: read_mlp(&ck, "fusion.head")?,
                config: FusionConfig {
                    strategy,
                    eps: scalar(&ck, "fusion.eps")?,
                },
            })
        };
        models.fusion = Some(inner().stage(Stage::Fusion)?);
    }
    Ok(models)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// Tab-separated training log: one line per stage and epoch.
pub fn format_logs(logs: &[StageLog]) -> String {
    let mut s = format!("# format_version={LOG_FORMAT_VERSION}\nstage\tepoch\tce\tita\tmse\ttotal\n");
    for log in logs {
        for e in &log.epochs {
            let r = &e.report;
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                log.stage,
                e.epoch,
                r.ce,
                opt(r.ita),
                opt(r.mse),
                r.total
            );
        }
    }
    s
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!("# format_version={LOG_FORMAT_VERSION}\nvariant\ttop1\ttop5\tconfidence_mean\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.variant, r.top1, r.top5, r.confidence_mean);
    }
    s
}

pub fn ablation_json(rows: &[AblationRow]) -> Result<String> {
    let v = serde_json::json!({
        "format_version": LOG_FORMAT_VERSION,
        "rows": rows,
    });
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// Config dump for a run directory, without the `out` line so that identical
/// runs written to different directories match byte for byte.
pub fn run_config_text(cfg: &RunConfig) -> String {
    cfg.to_text()
        .lines()
        .filter(|l| !l.starts_with("out ="))
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

pub fn write_report(dir: &Path, variant: Variant, report: &EvalReport) -> Result<()> {
    let base = dir.join("reports");
    write_text(&base.join(format!("{}.json", variant.slug())), &report.to_json()?)?;
    write_text(&base.join(format!("{}.txt", variant.slug())), &report.to_kv())
}

/// Full training run written to `cfg.out`: checkpoints, `train_log.tsv`, `config.txt`.
pub fn train_to_dir(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = prepare_data(cfg)?;
    let outcome = train_pipeline(cfg, &data)?;
    save_models(&cfg.out, &outcome.models)?;
    write_text(&cfg.out.join("train_log.tsv"), &format_logs(&outcome.logs))?;
    write_text(&cfg.out.join("config.txt"), &run_config_text(cfg))?;
    Ok(outcome)
}

/// Retrains only the fusion head from the EMA and CDR checkpoints in `cfg.out`.
/// Writes `fusion.mnck` and `fusion_log.tsv`; other checkpoints are only read.
pub fn retrain_fusion_in_dir(cfg: &RunConfig) -> Result<FusionHead> {
    let data = prepare_data(cfg)?;
    let mut models = load_models(&cfg.out)?;
    let features = branch_features(cfg, &models, &data.set).stage(Stage::Fusion)?;
    let (head, log) = train_fusion(cfg, &data, &features)?;
    models = Models {
        fusion: Some(head.clone()),
        ..Models::default()
    };
    save_models(&cfg.out, &models)?;
    write_text(&cfg.out.join("fusion_log.tsv"), &format_logs(&[log]))?;
    Ok(head)
}

/// Ablation written to `cfg.out`: everything `train_to_dir` writes plus
/// `ablation.tsv`, `ablation.json` and `reports/<variant>.{json,txt}`.
pub fn ablate_to_dir(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let data = prepare_data(cfg)?;
    let outcome = train_pipeline(cfg, &data)?;
    save_models(&cfg.out, &outcome.models)?;
    write_text(&cfg.out.join("train_log.tsv"), &format_logs(&outcome.logs))?;
    write_text(&cfg.out.join("config.txt"), &run_config_text(cfg))?;
    let rows = ablation_rows(cfg, &outcome.models, &data, &outcome.features)?;
    for (v, r) in Variant::ALL.iter().zip(&rows) {
        write_report(&cfg.out, *v, &r.report)?;
    }
    write_text(&cfg.out.join("ablation.tsv"), &format_ablation(&rows))?;
    write_text(&cfg.out.join("ablation.json"), &ablation_json(&rows)?)?;
    Ok(rows)
}

/// Which representation to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    RawVisual,
    Ema,
    Cdr,
    Fused,
}

impl FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "raw_visual" | "raw" => Ok(ExportKind::RawVisual),
            "ema" => Ok(ExportKind::Ema),
            "cdr" => Ok(ExportKind::Cdr),
            "fused" => Ok(ExportKind::Fused),
            _ => Err(Error::Config(format!(
                "unknown export kind {s:?} (raw_visual, ema, cdr, fused)"
            ))),
        }
    }
}

/// Vectors of the chosen kind for every row of `set`, in row order.
pub fn export_vectors(
    cfg: &RunConfig,
    models: &Models,
    set: &PairedEmbeddingSet,
    kind: ExportKind,
) -> Result<Tensor> {
    let inner = || -> Result<Tensor> {
        let all = set.all_indices();
        match kind {
            ExportKind::RawVisual => Ok(set.visual(&all)),
            ExportKind::Ema => models.ema()?.encode_visual(&set.visual(&all)),
            ExportKind::Cdr => sample_cdr_features(cfg, models.cdr()?, set),
            ExportKind::Fused => {
                let f = branch_features(cfg, models, set)?;
                fuse(&f.x_ema, &f.x_cdr, &models.fusion()?.config)
            }
        }
    };
    inner().stage(Stage::Export)
}

pub fn export_embeddings(
    cfg: &RunConfig,
    models: &Models,
    set: &PairedEmbeddingSet,
    kind: ExportKind,
    path: &Path,
) -> Result<ExportedEmbeddings> {
    let vectors = export_vectors(cfg, models, set, kind)?;
    let out = ExportedEmbeddings::from_tensor(&vectors, set.labels(), set.classes()).stage(Stage::Export)?;
    out.write(path).stage(Stage::Export)?;
    Ok(out)
}
