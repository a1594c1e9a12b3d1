//! Pretraining, curriculum fine-tuning, routing and the checkpoint lifecycle.
//!
//! A base bundle is pretrained with cross entropy on every training sample.
//! Fine-tuning clones it once per subset of tail-bearing sessions (one
//! subset above a threshold, or `K` folds by tail share) and trains each
//! clone with the calibrated objective. At inference a session is routed
//! by its observed tail share; sessions at or below the threshold always
//! use the untouched base.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, recall_at, recommend_all, top_n, Backbone, EpochLog, GruAttention, TrainConfig, MAX_SESSION_LEN};
use crate::calibration::{self, CalibrationConfig, CalibrationHead};
use crate::corpus::{kfold_index, session_distribution, split_by_threshold, validation_split, Catalog, Dataset, Partition, Session};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::metrics::{scoped_reports, EvalRecord, ModelId, ReportFile};
use crate::numerics::{AdamConfig, AdamState, Checkpoint, Moments, ParamStore, Tensor};
use crate::rng::{derive_seed, stage_rng};

pub const REGISTRY_MAGIC: &str = "TCALREGISTRY";
pub const REGISTRY_VERSION: u32 = 1;
const BUNDLE_FORMAT: &str = "tailcal-bundle";
const OPTIM_FIRST: &str = "optim.m.";
const OPTIM_SECOND: &str = "optim.v.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Calibration off; equivalent to `lambda = 0`.
    pub no_calib: bool,
    /// Drop cross entropy from the fine-tuning objective.
    pub no_ce: bool,
    /// One model fine-tuned on every sample instead of curriculum subsets.
    pub no_ct: bool,
    /// Unweighted KL terms.
    pub no_wl: bool,
}

impl Ablation {
    pub fn parse_flag(&mut self, flag: &str) -> Result<()> {
        match flag.trim() {
            "no_calib" => self.no_calib = true,
            "no_ce" => self.no_ce = true,
            "no_ct" => self.no_ct = true,
            "no_wl" => self.no_wl = true,
            "" => {}
            other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub lambda: f64,
    pub theta: f64,
    /// 1 selects the threshold split; larger values select tail-share folds.
    pub k: usize,
    pub n: usize,
    pub dim: usize,
    pub lr: f64,
    /// Learning rate of the fine-tuning stage; `lr` when absent.
    pub finetune_lr: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    /// Head-only epochs on the prediction loss before joint fine-tuning.
    pub ffn_warmup_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub ablation: Ablation,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            lambda: 1.0,
            theta: 0.0,
            k: 1,
            n: 20,
            dim: 100,
            lr: 0.001,
            finetune_lr: None,
            batch_size: 128,
            epochs: 10,
            finetune_epochs: 3,
            ffn_warmup_epochs: 1,
            patience: 3,
            seed: 42,
            validation_fraction: 0.1,
            ablation: Ablation::default(),
        }
    }
}

impl ExperimentConfig {
    /// Checks ranges and folds `no_calib` into `lambda = 0`.
    pub fn resolve(mut self) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite value ≥ 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("theta must lie in [0, 1], got {}", self.theta));
        }
        if self.k == 0 || self.n == 0 || self.dim == 0 || self.batch_size == 0 {
            return bad("k, n, dim and batch size must be at least 1".into());
        }
        for lr in std::iter::once(self.lr).chain(self.finetune_lr) {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning rate must be positive, got {lr}"));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation fraction must lie in (0, 1), got {}", self.validation_fraction));
        }
        if self.ablation.no_calib {
            self.lambda = 0.0;
        }
        Ok(self)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            n: self.n,
            max_len: MAX_SESSION_LEN,
            seed: self.seed,
        }
    }

    fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            lambda: self.lambda,
            n: self.n,
            no_ce: self.ablation.no_ce,
            no_wl: self.ablation.no_wl,
        }
    }

    /// Training and validation samples; the split depends only on the seed.
    pub fn split(&self, dataset: &Dataset) -> Result<(Vec<Session>, Vec<Session>)> {
        validation_split(dataset.train.clone(), self.validation_fraction, self.seed)
    }
}

/// Serializable description of the encoder architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    GruAttention(GruAttention),
}

impl EncoderSpec {
    pub fn backbone(&self) -> &dyn Backbone {
        match self {
            EncoderSpec::GruAttention(e) => e,
        }
    }
}

/// Encoder and head parameters with their optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub encoder: EncoderSpec,
    pub head: CalibrationHead,
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub catalog_hash: String,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    format: String,
    encoder: EncoderSpec,
    head: CalibrationHead,
    catalog_hash: String,
    adam: AdamConfig,
    adam_steps: u64,
    param_steps: BTreeMap<String, u64>,
}

impl ModelBundle {
    /// Freshly initialized encoder and head.
    pub fn init(encoder: EncoderSpec, catalog: &Catalog, seed: u64, adam: AdamConfig) -> Self {
        let bb = encoder.backbone();
        let head = CalibrationHead::for_encoding(bb.encoding_dim());
        let mut params = ParamStore::new();
        bb.init_params(&mut params, derive_seed(seed, "init/backbone"));
        head.init_params(&mut params, derive_seed(seed, "init/head"));
        ModelBundle {
            encoder,
            head,
            params,
            optimizer: AdamState::new(adam),
            catalog_hash: catalog.hash(),
        }
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.encoder.backbone()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: BTreeMap<String, Tensor> = self.params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let mut param_steps = BTreeMap::new();
        for (name, m) in self.optimizer.moments() {
            tensors.insert(format!("{OPTIM_FIRST}{name}"), m.first.clone());
            tensors.insert(format!("{OPTIM_SECOND}{name}"), m.second.clone());
            param_steps.insert(name.to_string(), m.step);
        }
        let meta = BundleMeta {
            format: BUNDLE_FORMAT.into(),
            encoder: self.encoder,
            head: self.head,
            catalog_hash: self.catalog_hash.clone(),
            adam: self.optimizer.config,
            adam_steps: self.optimizer.steps(),
            param_steps,
        };
        Checkpoint {
            metadata: serde_json::to_value(meta).expect("bundle metadata serializes"),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, origin: &Path) -> Result<Self> {
        let meta: BundleMeta =
            serde_json::from_value(ck.metadata).map_err(|e| Error::format(origin, format!("bundle metadata: {e}")))?;
        if meta.format != BUNDLE_FORMAT {
            return Err(Error::format(origin, "checkpoint does not hold a model bundle"));
        }
        let mut params = ParamStore::new();
        let mut firsts = BTreeMap::new();
        let mut seconds = BTreeMap::new();
        for (name, t) in ck.tensors {
            if let Some(p) = name.strip_prefix(OPTIM_FIRST) {
                firsts.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(OPTIM_SECOND) {
                seconds.insert(p.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let mut moments = BTreeMap::new();
        for (name, step) in meta.param_steps {
            let (first, second) = match (firsts.remove(&name), seconds.remove(&name)) {
                (Some(f), Some(s)) => (f, s),
                _ => return Err(Error::format(origin, format!("missing optimizer moments for {name}"))),
            };
            moments.insert(name, Moments { first, second, step });
        }
        let bundle = ModelBundle {
            encoder: meta.encoder,
            head: meta.head,
            params,
            optimizer: AdamState::restore(meta.adam, meta.adam_steps, moments),
            catalog_hash: meta.catalog_hash,
        };
        bundle.check_params(origin)?;
        Ok(bundle)
    }

    fn check_params(&self, origin: &Path) -> Result<()> {
        let mut expected = ParamStore::new();
        self.backbone().init_params(&mut expected, 0);
        self.head.init_params(&mut expected, 0);
        let same = expected.len() == self.params.len()
            && expected
                .iter()
                .all(|(n, t)| self.params.get(n).is_some_and(|p| p.shape() == t.shape()));
        if same {
            Ok(())
        } else {
            Err(Error::format(origin, "parameter set does not match the declared architecture"))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, path)
    }

    /// Encoder parameters only.
    pub fn backbone_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            metadata: serde_json::json!({
                "format": "tailcal-backbone",
                "encoder": self.encoder,
                "catalog_hash": self.catalog_hash,
            }),
            tensors: self
                .params
                .filtered(backbone::BACKBONE_PREFIX)
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        }
    }

    /// Top-`n` lists for many sessions.
    pub fn recommend_all(&self, sessions: &[&Session], n: usize) -> Result<Vec<Vec<usize>>> {
        recommend_all(self.backbone(), &self.params, sessions, n, MAX_SESSION_LEN)
    }
}

fn check_catalog(bundle: &ModelBundle, catalog: &Catalog) -> Result<()> {
    if bundle.catalog_hash != catalog.hash() {
        return Err(Error::Data("model was trained on a different catalog".into()));
    }
    if bundle.backbone().item_count() != catalog.item_count() {
        return Err(Error::Data("model item count differs from the catalog".into()));
    }
    Ok(())
}

/// Cross-entropy pretraining of a fresh bundle on every training sample.
pub fn run_pretrain(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<(ModelBundle, Vec<EpochLog>)> {
    let cfg = cfg.clone().resolve()?;
    let (train, valid) = cfg.split(dataset)?;
    let encoder = EncoderSpec::GruAttention(GruAttention {
        item_count: dataset.catalog.item_count(),
        dim: cfg.dim,
    });
    let mut bundle = ModelBundle::init(encoder, &dataset.catalog, cfg.seed, AdamConfig::with_lr(cfg.lr));
    info!("pretraining on {} samples ({} held out)", train.len(), valid.len());
    let log = backbone::pretrain(
        encoder.backbone(),
        &mut bundle.params,
        &mut bundle.optimizer,
        &train,
        &valid,
        &cfg.train_config(),
    )?;
    Ok((bundle, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// No fine-tuned models; every session uses the base.
    BaseOnly,
    /// One fine-tuned model for sessions with tail share above `theta`.
    Threshold,
    /// `k` fine-tuned models indexed by tail-share fold.
    Kfold,
    /// One model fine-tuned on every sample serves every session.
    Single,
}

/// Model serving a session with tail share `q_tail`.
pub fn route_q(q_tail: f64, mode: RoutingMode, theta: f64, k: usize) -> ModelId {
    match mode {
        RoutingMode::BaseOnly => ModelId::Base,
        RoutingMode::Threshold if q_tail > theta => ModelId::Fold(1),
        RoutingMode::Threshold => ModelId::Base,
        RoutingMode::Kfold if q_tail > 0.0 => ModelId::Fold(kfold_index(q_tail, k)),
        RoutingMode::Kfold => ModelId::Base,
        RoutingMode::Single => ModelId::Fold(1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldLog {
    pub fold: usize,
    pub samples: usize,
    pub epochs: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelRegistry {
    pub mode: RoutingMode,
    pub theta: f64,
    pub k: usize,
    pub base: ModelBundle,
    /// Fine-tuned bundles keyed by 1-based fold index.
    pub models: BTreeMap<usize, ModelBundle>,
}

impl ModelRegistry {
    pub fn base_only(base: ModelBundle, theta: f64) -> Self {
        ModelRegistry {
            mode: RoutingMode::BaseOnly,
            theta,
            k: 1,
            base,
            models: BTreeMap::new(),
        }
    }

    pub fn route(&self, session: &Session, catalog: &Catalog) -> ModelId {
        route_q(session_distribution(session, catalog).tail, self.mode, self.theta, self.k)
    }

    pub fn model(&self, id: ModelId) -> &ModelBundle {
        match id {
            ModelId::Base => &self.base,
            ModelId::Fold(j) => &self.models[&j],
        }
    }

    /// Top-`n` list of the routed model.
    pub fn recommend(&self, session: &Session, catalog: &Catalog, n: usize) -> Result<Vec<usize>> {
        let bundle = self.model(self.route(session, catalog));
        let logits = backbone::batch_logits(bundle.backbone(), &bundle.params, &[session], MAX_SESSION_LEN)?;
        Ok(top_n(logits.row(0), n))
    }

    /// Evaluation records for `sessions`, each scored by its routed model.
    pub fn records(&self, sessions: &[Session], catalog: &Catalog, n: usize) -> Result<Vec<EvalRecord>> {
        let routes: Vec<ModelId> = sessions.iter().map(|s| self.route(s, catalog)).collect();
        let mut groups: BTreeMap<ModelId, Vec<usize>> = BTreeMap::new();
        for (i, id) in routes.iter().enumerate() {
            groups.entry(*id).or_default().push(i);
        }
        let mut lists = vec![Vec::new(); sessions.len()];
        for (id, idx) in groups {
            let refs: Vec<&Session> = idx.iter().map(|&i| &sessions[i]).collect();
            for (i, list) in idx.iter().zip(self.model(id).recommend_all(&refs, n)?) {
                lists[*i] = list;
            }
        }
        sessions
            .iter()
            .zip(lists)
            .zip(routes)
            .enumerate()
            .map(|(i, ((s, list), id))| EvalRecord::new(i, list, s.target, session_distribution(s, catalog), catalog, id))
            .collect()
    }

    fn check(&self) -> Result<()> {
        let expected: Vec<usize> = match self.mode {
            RoutingMode::BaseOnly => vec![],
            RoutingMode::Threshold | RoutingMode::Single => vec![1],
            RoutingMode::Kfold => (1..=self.k).collect(),
        };
        if !self.models.keys().copied().eq(expected.iter().copied()) {
            return Err(Error::Data(format!("registry in {:?} mode has models {:?}", self.mode, self.models.keys())));
        }
        if self.models.values().any(|m| m.catalog_hash != self.base.catalog_hash) {
            return Err(Error::Data("registry bundles disagree on the catalog".into()));
        }
        Ok(())
    }

    /// Writes one checkpoint per bundle next to a JSON manifest.
    pub fn save(&self, manifest_path: &Path) -> Result<RegistryManifest> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let stem = manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("registry");
        let base_name = format!("{stem}.base.ckpt");
        self.base.save(&dir.join(&base_name))?;
        let mut models = BTreeMap::new();
        for (j, m) in &self.models {
            let name = format!("{stem}.fold-{j}.ckpt");
            m.save(&dir.join(&name))?;
            models.insert(*j, name);
        }
        let manifest = RegistryManifest {
            magic: REGISTRY_MAGIC.into(),
            version: REGISTRY_VERSION,
            mode: self.mode,
            theta: self.theta,
            k: self.k,
            catalog_hash: self.base.catalog_hash.clone(),
            base: base_name,
            models,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_atomic(manifest_path, json.as_bytes())?;
        Ok(manifest)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = read_to_string(manifest_path)?;
        let m: RegistryManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
        if m.magic != REGISTRY_MAGIC || m.version != REGISTRY_VERSION {
            return Err(Error::format(manifest_path, format!("not a version {REGISTRY_VERSION} registry manifest")));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| -> PathBuf { dir.join(p) };
        let base = ModelBundle::load(&resolve(&m.base))?;
        let mut models = BTreeMap::new();
        for (j, p) in &m.models {
            models.insert(*j, ModelBundle::load(&resolve(p))?);
        }
        let reg = ModelRegistry {
            mode: m.mode,
            theta: m.theta,
            k: m.k,
            base,
            models,
        };
        if reg.base.catalog_hash != m.catalog_hash {
            return Err(Error::format(manifest_path, "catalog hash differs from the base checkpoint"));
        }
        reg.check()?;
        Ok(reg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub magic: String,
    pub version: u32,
    pub mode: RoutingMode,
    pub theta: f64,
    pub k: usize,
    pub catalog_hash: String,
    /// Paths relative to the manifest's directory.
    pub base: String,
    pub models: BTreeMap<usize, String>,
}

/// Calibrated fine-tuning of one clone: optional head warmup on the
/// prediction loss, then joint epochs with validation-recall selection.
/// The kept parameters come from the best joint epoch.
pub fn finetune_bundle(
    bundle: &mut ModelBundle,
    catalog: &Catalog,
    train: &[Session],
    valid: &[Session],
    cfg: &ExperimentConfig,
    stream: &str,
) -> Result<Vec<EpochLog>> {
    let calib = cfg.calibration();
    let mut rng = stage_rng(cfg.seed, &format!("finetune/{stream}/batches"));
    let batches = |rng: &mut _| backbone::make_batches(train, cfg.batch_size, MAX_SESSION_LEN, rng);
    let encoder = bundle.encoder;
    let bb = encoder.backbone();
    for _ in 0..cfg.ffn_warmup_epochs {
        for idx in batches(&mut rng) {
            let batch: Vec<&Session> = idx.iter().map(|&i| &train[i]).collect();
            calibration::head_warmup_step(
                bb,
                &bundle.head,
                &mut bundle.params,
                &mut bundle.optimizer,
                catalog,
                &batch,
                &calib,
                MAX_SESSION_LEN,
            )?;
        }
    }
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore, AdamState)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.finetune_epochs {
        let mut total = 0.0;
        for idx in batches(&mut rng) {
            let batch: Vec<&Session> = idx.iter().map(|&i| &train[i]).collect();
            let state = calibration::combined_step(
                bb,
                &bundle.head,
                &mut bundle.params,
                &mut bundle.optimizer,
                catalog,
                &batch,
                &calib,
                MAX_SESSION_LEN,
            )?;
            total += state.total(&calib) * batch.len() as f64;
        }
        let valid_recall = if valid.is_empty() {
            None
        } else {
            Some(recall_at(bb, &bundle.params, valid, cfg.n, MAX_SESSION_LEN)?)
        };
        info!("finetune {stream} epoch {epoch}: loss {:.4}, valid recall {valid_recall:?}", total / train.len() as f64);
        log.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            valid_recall,
        });
        if let Some(r) = valid_recall {
            if best.as_ref().is_none_or(|b| r > b.0) {
                best = Some((r, bundle.params.clone(), bundle.optimizer.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, p, o)) = best {
        bundle.params = p;
        bundle.optimizer = o;
    }
    Ok(log)
}

/// Clones `base` per curriculum subset and fine-tunes each clone on its
/// subset. The base itself is never modified.
pub fn run_finetune(base: &ModelBundle, dataset: &Dataset, cfg: &ExperimentConfig) -> Result<(ModelRegistry, Vec<FoldLog>)> {
    let cfg = cfg.clone().resolve()?;
    let catalog = &dataset.catalog;
    check_catalog(base, catalog)?;
    let (train, valid) = cfg.split(dataset)?;
    let (mode, train_part, valid_part) = if cfg.ablation.no_ct {
        let all = |s: &[Session]| Partition {
            theta: cfg.theta,
            k: 1,
            head: vec![],
            folds: vec![(0..s.len()).collect()],
        };
        (RoutingMode::Single, all(&train), all(&valid))
    } else if cfg.k == 1 {
        (
            RoutingMode::Threshold,
            split_by_threshold(&train, catalog, cfg.theta)?,
            split_by_threshold(&valid, catalog, cfg.theta)?,
        )
    } else {
        (
            RoutingMode::Kfold,
            Partition::kfold(&train, catalog, cfg.k)?,
            Partition::kfold(&valid, catalog, cfg.k)?,
        )
    };
    let mut adam = base.optimizer.config;
    adam.lr = cfg.finetune_lr.unwrap_or(cfg.lr);
    let jobs: Vec<usize> = (1..=train_part.folds.len()).collect();
    let results: Vec<Result<(usize, ModelBundle, FoldLog)>> = jobs
        .par_iter()
        .map(|&j| {
            let mut bundle = base.clone();
            bundle.optimizer = AdamState::new(adam);
            let fold_train: Vec<Session> = train_part.folds[j - 1].iter().map(|&i| train[i].clone()).collect();
            let fold_valid: Vec<Session> = valid_part.folds[j - 1].iter().map(|&i| valid[i].clone()).collect();
            let epochs = if fold_train.is_empty() {
                warn!("fold {j} has no training sessions; it keeps the base parameters");
                bundle.optimizer = base.optimizer.clone();
                Vec::new()
            } else {
                info!("fine-tuning fold {j} on {} samples", fold_train.len());
                finetune_bundle(&mut bundle, catalog, &fold_train, &fold_valid, &cfg, &format!("fold-{j}"))?
            };
            let log = FoldLog {
                fold: j,
                samples: fold_train.len(),
                epochs,
            };
            Ok((j, bundle, log))
        })
        .collect();
    let mut models = BTreeMap::new();
    let mut logs = Vec::new();
    for r in results {
        let (j, bundle, log) = r?;
        models.insert(j, bundle);
        logs.push(log);
    }
    let registry = ModelRegistry {
        mode,
        theta: cfg.theta,
        k: if mode == RoutingMode::Kfold { cfg.k } else { 1 },
        base: base.clone(),
        models,
    };
    registry.check()?;
    Ok((registry, logs))
}

/// Scoped reports over the test samples of `dataset`.
pub fn evaluate(registry: &ModelRegistry, dataset: &Dataset, n: usize, buckets: usize) -> Result<(ReportFile, Vec<EvalRecord>)> {
    check_catalog(&registry.base, &dataset.catalog)?;
    let records = registry.records(&dataset.test, &dataset.catalog, n)?;
    let reports = scoped_reports(&records, &dataset.catalog, registry.theta, buckets)?;
    Ok((ReportFile::new(registry.theta, buckets, reports), records))
}
