//! Training objectives.
//!
//! * teacher: translation margin loss over `T1 ∪ T2`,
//! * student: neighborhood-consensus margin loss over seed pairs,
//! * distillation: Huber distance between teacher and student per-triple
//!   head–tail energies, each scaled by its model's mean head–tail distance,
//! * the adaptive temperature that mixes the two student terms.
//!
//! Every sum over instances is a mean, so loss magnitudes do not grow with
//! graph size; the temperature multiplies raw magnitudes.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::kgdata::Triple;
use crate::numkit::{l2_distance, DenseMatrix, Scalar, Tape, Var};

pub const DEFAULT_GAMMA1: f64 = 3.0;
pub const DEFAULT_GAMMA2: f64 = 1.0;
pub const BETA_MIN: f64 = 1e-3;
pub const BETA_MAX: f64 = 1.0 - 1e-3;
pub const DEFAULT_FIXED_BETA: f64 = 0.5;

/// Per-step loss values. Teacher steps fill `l_ke`; student steps fill
/// `l_nc`, `beta` and, with distillation on, `l_kd`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_ke: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_nc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_kd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub total: f64,
}

/// Teacher parameters: the shared encoder plus free relation embeddings,
/// KG1 relations first.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherParams<T> {
    pub encoder: EncoderParams<T>,
    pub relations: DenseMatrix<T>,
}

/// How the student weighs distillation against consensus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "beta")]
pub enum TemperatureMode {
    /// `β = clamp(|L_NC|·|L_KD|, BETA_MIN, BETA_MAX)`, recomputed each step.
    Adaptive,
    /// Constant β.
    Fixed(f64),
    /// No distillation term; total is `L_NC`.
    Disabled,
}

/// `mean [score(pos) − score(neg) + margin]_+` where `pos_scores` has one row
/// per positive and `owner[k]` names the positive of negative `k`.
fn margin_ranking<T: Scalar>(
    tape: &mut Tape<T>,
    pos_scores: Var,
    neg_scores: Var,
    owner: Vec<usize>,
    margin: f64,
) -> Result<Var> {
    let expanded = tape.gather_rows(pos_scores, owner)?;
    let gap = tape.sub(expanded, neg_scores)?;
    let shifted = tape.shift(gap, T::of(margin));
    let active = tape.hinge(shifted);
    Ok(tape.mean(active))
}

fn check_margin(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} must be positive, got {value}")))
    }
}

/// `‖e_h + r − e_t‖₂` for each triple, as a column.
fn translation_residuals<T: Scalar>(tape: &mut Tape<T>, entities: Var, relations: Var, triples: &[Triple]) -> Result<Var> {
    let heads: Vec<usize> = triples.iter().map(|t| t.head).collect();
    let rels: Vec<usize> = triples.iter().map(|t| t.relation).collect();
    let tails: Vec<usize> = triples.iter().map(|t| t.tail).collect();
    let h = tape.gather_rows(entities, heads)?;
    let r = tape.gather_rows(relations, rels)?;
    let t = tape.gather_rows(entities, tails)?;
    let hr = tape.add(h, r)?;
    let residual = tape.sub(hr, t)?;
    Ok(tape.row_norm(residual))
}

/// Translation margin loss. `entities` and `relations` are global tables;
/// `negatives[i]` are corruptions of `positives[i]` and must be nonempty.
/// With `normalize_entities`, entity rows are scaled to unit length first.
pub fn transe_loss<T: Scalar>(
    tape: &mut Tape<T>,
    entities: Var,
    relations: Var,
    positives: &[Triple],
    negatives: &[Vec<Triple>],
    gamma1: f64,
    normalize_entities: bool,
) -> Result<Var> {
    check_margin("gamma1", gamma1)?;
    if positives.is_empty() {
        return Err(Error::InvalidInput("transe_loss needs at least one positive triple".into()));
    }
    if negatives.len() != positives.len() {
        return Err(Error::InvalidInput(format!(
            "{} positives but {} negative lists",
            positives.len(),
            negatives.len()
        )));
    }
    let mut owner = Vec::new();
    let mut flat = Vec::new();
    for (i, negs) in negatives.iter().enumerate() {
        if negs.is_empty() {
            return Err(Error::InvalidInput(format!("positive triple {:?} has no negatives", positives[i])));
        }
        owner.extend(std::iter::repeat_n(i, negs.len()));
        flat.extend_from_slice(negs);
    }
    let entities = if normalize_entities { tape.row_normalize(entities) } else { entities };
    let pos = translation_residuals(tape, entities, relations, positives)?;
    let neg = translation_residuals(tape, entities, relations, &flat)?;
    margin_ranking(tape, pos, neg, owner, gamma1)
}

/// `‖e1 − e2‖₂` for each global pair, as a column.
fn pair_distances<T: Scalar>(tape: &mut Tape<T>, emb: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a = tape.gather_rows(emb, left)?;
    let b = tape.gather_rows(emb, right)?;
    let diff = tape.sub(a, b)?;
    Ok(tape.row_norm(diff))
}

/// Neighborhood-consensus margin loss over global `(kg1, kg2)` row pairs.
pub fn nc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    emb: Var,
    positives: &[(usize, usize)],
    negatives: &[Vec<(usize, usize)>],
    gamma2: f64,
) -> Result<Var> {
    check_margin("gamma2", gamma2)?;
    if positives.is_empty() {
        return Err(Error::InvalidInput("nc_loss needs at least one positive pair".into()));
    }
    if negatives.len() != positives.len() {
        return Err(Error::InvalidInput(format!(
            "{} positives but {} negative lists",
            positives.len(),
            negatives.len()
        )));
    }
    let mut owner = Vec::new();
    let mut flat = Vec::new();
    for (i, negs) in negatives.iter().enumerate() {
        if negs.is_empty() {
            return Err(Error::InvalidInput(format!("seed pair {:?} has no negatives", positives[i])));
        }
        owner.extend(std::iter::repeat_n(i, negs.len()));
        flat.extend_from_slice(negs);
    }
    let pos = pair_distances(tape, emb, positives)?;
    let neg = pair_distances(tape, emb, &flat)?;
    margin_ranking(tape, pos, neg, owner, gamma2)
}

/// Mean head–tail distance over `triples`.
pub fn compute_mu<T: Scalar>(emb: &DenseMatrix<T>, triples: &[Triple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::InvalidInput("compute_mu needs at least one triple".into()));
    }
    let total: f64 = triples
        .iter()
        .map(|t| l2_distance(emb.row(t.head), emb.row(t.tail)).as_f64())
        .sum();
    let mu = total / triples.len() as f64;
    if !mu.is_finite() {
        return Err(Error::NonFinite("mean head-tail distance".into()));
    }
    if mu < 1e-12 {
        return Err(Error::DegenerateEmbedding(mu));
    }
    Ok(mu)
}

/// `‖e_h − e_t‖₂ / μ`, computed as a product with `1/μ` so it rounds the
/// same way as the student side of [`kd_loss`].
pub fn energy_psi<T: Scalar>(head: &[T], tail: &[T], mu: f64) -> f64 {
    l2_distance(head, tail).as_f64() * mu.recip()
}

/// `½(x−y)²` when `|x−y| ≤ 1`, else `|x−y| − ½`.
pub fn huber(x: f64, y: f64) -> f64 {
    let a = (x - y).abs();
    if a <= 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

/// Derivative of [`huber`] with respect to `x`.
pub fn huber_grad(x: f64, y: f64) -> f64 {
    let z = x - y;
    z.clamp(-1.0, 1.0)
}

/// Elementwise Huber of `z` against zero, built from catalog primitives as
/// `½·(|z| − e)² + e` with `e = [|z| − 1]_+`.
pub fn huber_var<T: Scalar>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let a = tape.abs(z);
    let over = tape.shift(a, T::of(-1.0));
    let excess = tape.hinge(over);
    let clipped = tape.sub(a, excess)?;
    let sq = tape.square(clipped);
    let quad = tape.scale(sq, T::of(0.5));
    tape.add(quad, excess)
}

/// Distillation loss: mean over `triples` of
/// `huber(ψ(teacher), ψ(student))`. The teacher table enters as a constant.
pub fn kd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: &DenseMatrix<T>,
    student: Var,
    triples: &[Triple],
    mu_teacher: f64,
    mu_student: f64,
) -> Result<Var> {
    if triples.is_empty() {
        return Err(Error::InvalidInput("kd_loss needs at least one triple".into()));
    }
    for (name, mu) in [("teacher", mu_teacher), ("student", mu_student)] {
        if !mu.is_finite() {
            return Err(Error::NonFinite(format!("{name} mean head-tail distance")));
        }
        if mu < 1e-12 {
            return Err(Error::DegenerateEmbedding(mu));
        }
    }
    let (n, _) = tape.shape(student);
    if teacher.rows() != n {
        return Err(Error::shape("kd_loss", teacher.shape(), tape.shape(student)));
    }
    let teacher_psi: Vec<T> = triples
        .iter()
        .map(|t| T::of(energy_psi(teacher.row(t.head), teacher.row(t.tail), mu_teacher)))
        .collect();
    let teacher_psi = tape.constant(DenseMatrix::from_vec(triples.len(), 1, teacher_psi)?);

    let heads: Vec<usize> = triples.iter().map(|t| t.head).collect();
    let tails: Vec<usize> = triples.iter().map(|t| t.tail).collect();
    let h = tape.gather_rows(student, heads)?;
    let t = tape.gather_rows(student, tails)?;
    let diff = tape.sub(h, t)?;
    let dist = tape.row_norm(diff);
    let student_psi = tape.scale(dist, T::of(1.0 / mu_student));

    let gap = tape.sub(student_psi, teacher_psi)?;
    let per_triple = huber_var(tape, gap)?;
    Ok(tape.mean(per_triple))
}

/// `clamp(|l_nc|·|l_kd|, BETA_MIN, BETA_MAX)`.
pub fn temperature_beta(l_nc: f64, l_kd: f64) -> Result<f64> {
    if !l_nc.is_finite() || !l_kd.is_finite() {
        return Err(Error::NonFinite(format!("temperature inputs ({l_nc}, {l_kd})")));
    }
    Ok((l_nc.abs() * l_kd.abs()).clamp(BETA_MIN, BETA_MAX))
}

/// Mixes the student terms. β comes from detached values, so gradients are
/// `(1−β)·∇L_NC + β·∇L_KD` with β constant. `l_kd` is ignored when the mode
/// is [`TemperatureMode::Disabled`].
pub fn student_total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_nc: Var,
    l_kd: Option<Var>,
    mode: TemperatureMode,
    step: usize,
) -> Result<(Var, LossReport)> {
    let nc_value = tape.scalar_value(l_nc).as_f64();
    if mode == TemperatureMode::Disabled {
        return Ok((
            l_nc,
            LossReport {
                step,
                l_nc: Some(nc_value),
                beta: Some(0.0),
                total: nc_value,
                ..Default::default()
            },
        ));
    }
    let l_kd = l_kd.ok_or_else(|| Error::InvalidInput("distillation enabled but no L_KD term given".into()))?;
    let kd_value = tape.scalar_value(l_kd).as_f64();
    let beta = match mode {
        TemperatureMode::Adaptive => temperature_beta(nc_value, kd_value)?,
        TemperatureMode::Fixed(b) => {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("fixed beta {b} not in (0, 1)")));
            }
            b
        }
        TemperatureMode::Disabled => unreachable!(),
    };
    let nc_part = tape.scale(l_nc, T::of(1.0 - beta));
    let kd_part = tape.scale(l_kd, T::of(beta));
    let total = tape.add(nc_part, kd_part)?;
    let report = LossReport {
        step,
        l_ke: None,
        l_nc: Some(nc_value),
        l_kd: Some(kd_value),
        beta: Some(beta),
        total: tape.scalar_value(total).as_f64(),
    };
    Ok((total, report))
}
