//! Two-phase training: pretrain the teacher under the translation loss,
//! freeze it, then train the student under consensus plus distillation.

use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind, Tensor, TensorData};
use crate::encoder::{encode, encode_value, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, CandidatePool, Direction};
use crate::kgdata::{build_joint_adjacency, DatasetBundle, Triple};
use crate::numkit::{adam_step, AdamState, DenseMatrix, Scalar, SparseMatrix, Tape};
use crate::objectives::{
    compute_mu, kd_loss, nc_loss, student_total_loss, transe_loss, LossReport, TeacherParams, TemperatureMode,
    DEFAULT_GAMMA1, DEFAULT_GAMMA2,
};
use crate::sampling::{mine_alignment_negatives, refresh_due, sample_triple_negatives};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Teacher,
    Student,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Phase::Teacher),
            "student" => Ok(Phase::Student),
            _ => Err(Error::Config(format!("unknown phase `{s}` (expected teacher or student)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision `{s}` (expected 32 or 64)"))),
        }
    }
}

/// Dataset-scale hyperparameter bundles for `(k1, k2, refresh_interval)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Dbp15k,
    Dwy100k,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dbp15k" => Ok(Preset::Dbp15k),
            "dwy100k" => Ok(Preset::Dwy100k),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected dbp15k or dwy100k)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub lr: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub k1: usize,
    pub k2: usize,
    pub refresh_interval: usize,
    pub dim: usize,
    pub layers: usize,
    pub distill: bool,
    /// Ignored when `distill` is off.
    pub temperature: TemperatureMode,
    /// Triples per distillation step; `None` uses all of them.
    pub kd_batch: Option<usize>,
    pub rng_seed: u64,
    pub precision: Precision,
    pub train_features: bool,
    pub normalize_entities: bool,
    pub init_from_teacher: bool,
    /// Test-set Hits@1 every this many epochs.
    pub eval_every: Option<usize>,
}

impl TrainConfig {
    pub fn teacher() -> Self {
        TrainConfig {
            phase: Phase::Teacher,
            epochs: 500,
            lr: 0.005,
            gamma1: DEFAULT_GAMMA1,
            gamma2: DEFAULT_GAMMA2,
            k1: 10,
            k2: 200,
            refresh_interval: 50,
            dim: 300,
            layers: 2,
            distill: true,
            temperature: TemperatureMode::Adaptive,
            kd_batch: None,
            rng_seed: 0,
            precision: Precision::F64,
            train_features: true,
            normalize_entities: false,
            init_from_teacher: false,
            eval_every: None,
        }
    }

    pub fn student() -> Self {
        TrainConfig {
            phase: Phase::Student,
            lr: 0.001,
            ..Self::teacher()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Teacher => Self::teacher(),
            Phase::Student => Self::student(),
        }
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        let (k1, k2, refresh) = match preset {
            Preset::Dbp15k => (10, 200, 50),
            Preset::Dwy100k => (10, 50, 10),
        };
        self.k1 = k1;
        self.k2 = k2;
        self.refresh_interval = refresh;
    }

    /// The student objective actually used.
    pub fn temperature_mode(&self) -> TemperatureMode {
        if self.distill {
            self.temperature
        } else {
            TemperatureMode::Disabled
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.gamma1 > 0.0 && self.gamma2 > 0.0) {
            return bad(format!("margins must be positive, got {} and {}", self.gamma1, self.gamma2));
        }
        if self.k1 == 0 || self.k2 == 0 || self.refresh_interval == 0 {
            return bad("k1, k2 and refresh interval must be at least 1".into());
        }
        if self.dim == 0 || self.layers == 0 {
            return bad("dim and layers must be at least 1".into());
        }
        if let TemperatureMode::Fixed(b) = self.temperature {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("fixed beta {b} not in (0, 1)"));
            }
        }
        if self.kd_batch == Some(0) || self.eval_every == Some(0) {
            return bad("kd batch and eval interval must be at least 1 when set".into());
        }
        Ok(())
    }
}

/// One telemetry record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub report: LossReport,
    pub hits1: Option<f64>,
}

impl EpochRecord {
    /// `{"epoch":…, "l_ke"/"l_nc":…, "l_kd":…, "beta":…, "total":…, "hits1":…}`
    pub fn to_json(&self) -> serde_json::Value {
        let r = &self.report;
        let mut obj = serde_json::Map::new();
        obj.insert("epoch".into(), r.step.into());
        for (key, value) in [("l_ke", r.l_ke), ("l_nc", r.l_nc), ("l_kd", r.l_kd), ("beta", r.beta)] {
            if let Some(v) = value {
                obj.insert(key.into(), v.into());
            }
        }
        obj.insert("total".into(), r.total.into());
        if let Some(h) = self.hits1 {
            obj.insert("hits1".into(), h.into());
        }
        serde_json::Value::Object(obj)
    }
}

fn diverged(epoch: usize, reason: String, last_good: Checkpoint) -> Error {
    Error::Diverged {
        epoch,
        reason,
        last_good: Box::new(last_good),
    }
}

fn check_phase(cfg: &TrainConfig, phase: Phase) -> Result<()> {
    cfg.validate()?;
    if cfg.phase != phase {
        return Err(Error::Config(format!("config is for phase {:?}, not {phase:?}", cfg.phase)));
    }
    Ok(())
}

fn config_echo(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn teacher_checkpoint<T: Scalar>(params: &TeacherParams<T>, cfg: &TrainConfig, report: Option<LossReport>) -> Checkpoint {
    let mut tensors = params.encoder.to_tensors();
    tensors.push(Tensor::from_matrix("relation", &params.relations));
    Checkpoint {
        kind: ModelKind::Teacher,
        tensors,
        config: config_echo(cfg),
        report,
    }
}

fn student_checkpoint<T: Scalar>(params: &EncoderParams<T>, cfg: &TrainConfig, report: Option<LossReport>) -> Checkpoint {
    Checkpoint {
        kind: ModelKind::Student,
        tensors: params.to_tensors(),
        config: config_echo(cfg),
        report,
    }
}

fn initial_encoder<T: Scalar>(bundle: &DatasetBundle, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<EncoderParams<T>> {
    let n = bundle.index().num_entities();
    let mut params = EncoderParams::init(n, cfg.dim, cfg.layers, bundle.features.as_ref(), rng)?;
    params.train_features = cfg.train_features;
    Ok(params)
}

/// Pretrains the teacher. `on_epoch` receives every step's losses.
pub fn train_teacher(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    match cfg.precision {
        Precision::F32 => train_teacher_as::<f32>(bundle, cfg, on_epoch),
        Precision::F64 => train_teacher_as::<f64>(bundle, cfg, on_epoch),
    }
}

fn train_teacher_as<T: Scalar>(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    check_phase(cfg, Phase::Teacher)?;
    bundle.validate()?;
    let index = bundle.index();
    let triples = bundle.global_triples();
    if triples.is_empty() {
        return Err(Error::InvalidInput("teacher training needs at least one triple".into()));
    }
    let adjacency: Arc<SparseMatrix<T>> = Arc::new(build_joint_adjacency(&bundle.kg1, &bundle.kg2));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let encoder = initial_encoder::<T>(bundle, cfg, &mut rng)?;
    let relations = DenseMatrix::random_normal(index.num_relations(), cfg.dim, 1.0 / (cfg.dim as f64).sqrt(), &mut rng);
    let mut params = TeacherParams { encoder, relations };

    let mut shapes: Vec<_> = params.encoder.trainable_mut().iter().map(|(_, m)| m.shape()).collect();
    shapes.push(params.relations.shape());
    let mut adam = AdamState::<T>::new(&shapes);

    let mut positives: Vec<Triple> = Vec::new();
    let mut negatives: Vec<Vec<Triple>> = Vec::new();
    let mut last: Option<LossReport> = None;
    // Parameters whose loss was last seen finite.
    let mut last_good = teacher_checkpoint(&params, cfg, None);

    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let vars = params.encoder.register(&mut tape);
        let rel = tape.param(params.relations.clone());
        let emb = encode(&mut tape, &vars, &adjacency)?;
        // A NaN can hide behind a hinge, so check the embeddings themselves.
        if !tape.value(emb).is_finite() {
            return Err(diverged(epoch, "non-finite teacher embeddings".into(), last_good));
        }

        if refresh_due(epoch, cfg.refresh_interval) {
            let current = (epoch > 0).then(|| tape.value(emb));
            let lists = sample_triple_negatives(current, &triples, &index, cfg.k1, rng.random())?;
            (positives, negatives) = triples
                .iter()
                .zip(lists)
                .filter(|(_, negs)| !negs.is_empty())
                .map(|(t, negs)| (*t, negs))
                .unzip();
            if positives.is_empty() {
                return Err(Error::InvalidInput("no triple admits a corrupted negative".into()));
            }
        }

        let loss = transe_loss(&mut tape, emb, rel, &positives, &negatives, cfg.gamma1, cfg.normalize_entities)?;
        let value = tape.scalar_value(loss).as_f64();
        if !value.is_finite() {
            return Err(diverged(epoch, format!("teacher loss is {value}"), last_good));
        }
        let report = LossReport {
            step: epoch,
            l_ke: Some(value),
            total: value,
            ..Default::default()
        };

        let grads = tape.backward(loss)?;
        let mut order = vars.trainable(params.encoder.train_features);
        order.push(rel);
        let grads: Vec<_> = order.iter().map(|&v| grads.wrt(v)).collect();
        last_good = teacher_checkpoint(&params, cfg, Some(report.clone()));
        let mut named = params.encoder.trainable_mut();
        named.push(("relation".to_string(), &mut params.relations));
        match adam_step(&mut named, &grads, &mut adam, cfg.lr) {
            Ok(()) => {}
            Err(Error::NonFinite(what)) => return Err(diverged(epoch, what, last_good)),
            Err(e) => return Err(e),
        }
        on_epoch(&EpochRecord {
            report: report.clone(),
            hits1: None,
        });
        last = Some(report);
    }
    Ok(teacher_checkpoint(&params, cfg, last))
}

/// Trains the student against a frozen teacher checkpoint.
pub fn train_student(
    bundle: &DatasetBundle,
    teacher: &Checkpoint,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    match cfg.precision {
        Precision::F32 => train_student_as::<f32>(bundle, teacher, cfg, on_epoch),
        Precision::F64 => train_student_as::<f64>(bundle, teacher, cfg, on_epoch),
    }
}

fn train_student_as<T: Scalar>(
    bundle: &DatasetBundle,
    teacher: &Checkpoint,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    check_phase(cfg, Phase::Student)?;
    bundle.validate()?;
    if teacher.kind != ModelKind::Teacher {
        return Err(Error::Config("--teacher must point at a teacher checkpoint".into()));
    }
    let index = bundle.index();
    let triples = bundle.global_triples();
    if bundle.train_seeds.is_empty() {
        return Err(Error::InvalidInput("student training needs at least one training seed".into()));
    }
    let teacher_params = EncoderParams::<T>::from_checkpoint(teacher)?;
    if teacher_params.num_entities() != index.num_entities() || teacher_params.dim() != cfg.dim {
        return Err(Error::Config(format!(
            "teacher is {}x{}, student expects {}x{}",
            teacher_params.num_entities(),
            teacher_params.dim(),
            index.num_entities(),
            cfg.dim
        )));
    }
    let adjacency: Arc<SparseMatrix<T>> = Arc::new(build_joint_adjacency(&bundle.kg1, &bundle.kg2));

    let mode = cfg.temperature_mode();
    let distill = mode != TemperatureMode::Disabled;
    if distill && triples.is_empty() {
        return Err(Error::InvalidInput("distillation needs at least one triple".into()));
    }
    let teacher_emb = encode_value(&teacher_params, &adjacency)?;
    let mu_teacher = if distill { compute_mu(&teacher_emb, &triples)? } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut params = if cfg.init_from_teacher {
        EncoderParams {
            train_features: cfg.train_features,
            ..teacher_params
        }
    } else {
        initial_encoder::<T>(bundle, cfg, &mut rng)?
    };
    let shapes: Vec<_> = params.trainable_mut().iter().map(|(_, m)| m.shape()).collect();
    let mut adam = AdamState::<T>::new(&shapes);

    let positives: Vec<(usize, usize)> = bundle.train_seeds.pairs().iter().map(|&p| index.global_pair(p)).collect();
    let mut negatives: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut last: Option<LossReport> = None;
    let mut last_good = student_checkpoint(&params, cfg, None);

    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let emb = encode(&mut tape, &vars, &adjacency)?;
        if !tape.value(emb).is_finite() {
            return Err(diverged(epoch, "non-finite student embeddings".into(), last_good));
        }

        if refresh_due(epoch, cfg.refresh_interval) {
            negatives = mine_alignment_negatives(tape.value(emb), &bundle.train_seeds, &index, cfg.k2)?;
        }
        let l_nc = nc_loss(&mut tape, emb, &positives, &negatives, cfg.gamma2)?;

        let l_kd = if distill {
            let mu_student = match compute_mu(tape.value(emb), &triples) {
                Err(Error::NonFinite(what)) => {
                    return Err(diverged(epoch, what, last_good));
                }
                other => other?,
            };
            let batch: Vec<Triple> = match cfg.kd_batch {
                Some(b) if b < triples.len() => {
                    let mut picks = index::sample(&mut rng, triples.len(), b).into_vec();
                    picks.sort_unstable();
                    picks.into_iter().map(|i| triples[i]).collect()
                }
                _ => triples.clone(),
            };
            Some(kd_loss(&mut tape, &teacher_emb, emb, &batch, mu_teacher, mu_student)?)
        } else {
            None
        };

        let hits1 = match cfg.eval_every {
            Some(every) if epoch % every == 0 && !bundle.test_seeds.is_empty() => Some(
                evaluate(tape.value(emb), &bundle.test_seeds, &index, Direction::Kg1ToKg2, CandidatePool::TestSet, &[1])?
                    .hits_at(1)
                    .unwrap_or(0.0),
            ),
            _ => None,
        };

        let totals = student_total_loss(&mut tape, l_nc, l_kd, mode, epoch);
        let (total, report) = match totals {
            Err(Error::NonFinite(what)) => return Err(diverged(epoch, what, last_good)),
            other => other?,
        };
        if !report.total.is_finite() {
            let reason = format!("student loss is {}", report.total);
            return Err(diverged(epoch, reason, last_good));
        }

        let grads = tape.backward(total)?;
        let grads: Vec<_> = vars.trainable(params.train_features).iter().map(|&v| grads.wrt(v)).collect();
        last_good = student_checkpoint(&params, cfg, Some(report.clone()));
        match adam_step(&mut params.trainable_mut(), &grads, &mut adam, cfg.lr) {
            Ok(()) => {}
            Err(Error::NonFinite(what)) => return Err(diverged(epoch, what, last_good)),
            Err(e) => return Err(e),
        }
        on_epoch(&EpochRecord {
            report: report.clone(),
            hits1,
        });
        last = Some(report);
    }
    Ok(student_checkpoint(&params, cfg, last))
}

/// Runs a checkpoint's encoder over the bundle's joint graph, in the
/// precision its tensors were stored in.
pub fn embed(ckpt: &Checkpoint, bundle: &DatasetBundle) -> Result<DenseMatrix<f64>> {
    fn run<T: Scalar>(ckpt: &Checkpoint, bundle: &DatasetBundle) -> Result<DenseMatrix<f64>> {
        let params = EncoderParams::<T>::from_checkpoint(ckpt)?;
        let n = bundle.index().num_entities();
        if params.num_entities() != n {
            return Err(Error::shape("embed", params.features.shape(), (n, params.dim())));
        }
        let adjacency: Arc<SparseMatrix<T>> = Arc::new(build_joint_adjacency(&bundle.kg1, &bundle.kg2));
        Ok(encode_value(&params, &adjacency)?.cast())
    }
    ckpt.validate()?;
    match ckpt.tensor("features").map(|t| &t.data) {
        Some(TensorData::F32(_)) => run::<f32>(ckpt, bundle),
        _ => run::<f64>(ckpt, bundle),
    }
}
