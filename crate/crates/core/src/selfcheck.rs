//! Built-in gradient and invariant checks on tiny instances.
//!
//! Each check has a name usable as a filter. A fault can be injected into
//! every check to confirm the suite actually fails when something is wrong.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode, encode_value, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::eval::{hits_at_k, mrr, rank_alignments, CandidatePool, Direction};
use crate::kgdata::{generate_synthetic, SyntheticConfig};
use crate::kgdata::{build_joint_adjacency, AlignmentSeeds, DatasetBundle, GlobalIndex, KnowledgeGraph, Triple};
use crate::numkit::{adam_step, check_gradient_with, AdamState, DenseMatrix, SparseMatrix, Tape, Var};
use crate::objectives::{
    compute_mu, energy_psi, huber, huber_grad, kd_loss, nc_loss, student_total_loss, temperature_beta, transe_loss,
    TemperatureMode, DEFAULT_GAMMA1, DEFAULT_GAMMA2,
};
use crate::sampling::{mine_alignment_negatives, sample_triple_negatives};

pub const CHECK_NAMES: &[&str] = &[
    "primitives",
    "transe",
    "nc",
    "kd",
    "total",
    "encoder",
    "huber",
    "mu",
    "highway",
    "adjacency",
    "metrics",
    "adam",
];

const LOSS_TOLERANCE: f64 = 1e-4;
const PRIMITIVE_TOLERANCE: f64 = 1e-6;
const EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SelfCheckOptions {
    /// Run only these checks; all when empty.
    pub only: Vec<String>,
    /// Corrupt every check's analytic side so it must fail.
    pub inject_fault: bool,
}

pub fn run_selfcheck(opts: &SelfCheckOptions) -> Result<Vec<CheckResult>> {
    for name in &opts.only {
        if !CHECK_NAMES.contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "unknown check `{name}`; available: {}",
                CHECK_NAMES.join(", ")
            )));
        }
    }
    let selected = CHECK_NAMES
        .iter()
        .filter(|n| opts.only.is_empty() || opts.only.iter().any(|o| o == *n));
    let mut out = Vec::new();
    for &name in selected {
        let outcome = run_one(name, opts.inject_fault);
        out.push(match outcome {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        });
    }
    Ok(out)
}

fn run_one(name: &str, fault: bool) -> Result<(bool, String)> {
    match name {
        "primitives" => primitives(fault),
        "transe" | "nc" | "kd" | "total" | "encoder" => {
            let err = loss_gradient_error(name, fault)?;
            Ok((err < LOSS_TOLERANCE, format!("max relative error {err:.3e}")))
        }
        "huber" => huber_contract(fault),
        "mu" => mu_identity(fault),
        "highway" => highway_identity(fault),
        "adjacency" => adjacency_spectrum(fault),
        "metrics" => metric_oracle(fault),
        "adam" => adam_first_step(fault),
        _ => unreachable!("names validated"),
    }
}

fn tamper(fault: bool) -> impl Fn(&mut Vec<DenseMatrix<f64>>) {
    move |grads: &mut Vec<DenseMatrix<f64>>| {
        if fault {
            for g in grads.iter_mut() {
                *g = g.map(|x| 1.1 * x + 1e-3);
            }
        }
    }
}

fn primitives(fault: bool) -> Result<(bool, String)> {
    type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = DenseMatrix::random_normal(3, 4, 1.0, &mut rng);
    let b = DenseMatrix::random_normal(3, 4, 1.0, &mut rng);
    let w = DenseMatrix::random_normal(4, 2, 1.0, &mut rng);
    let row = DenseMatrix::random_normal(1, 4, 1.0, &mut rng);
    let sparse = Arc::new(
        SparseMatrix::from_triplets(3, 3, vec![(0, 0, 0.5), (0, 2, -1.25), (1, 1, 2.0), (2, 0, 0.75)])
            .expect("valid triplets"),
    );
    // Weighted sum so every output entry gets a distinct upstream gradient.
    let weighted = |t: &mut Tape<f64>, v: Var| -> Result<Var> {
        let (r, c) = t.shape(v);
        let weights = DenseMatrix::from_vec(r, c, (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect())?;
        let k = t.constant(weights);
        let m = t.mul(v, k)?;
        Ok(t.sum(m))
    };
    let cases: Vec<(&str, Vec<DenseMatrix<f64>>, Build)> = vec![
        ("matmul", vec![a.clone(), w.clone()], |t, v| t.matmul(v[0], v[1])),
        ("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
        ("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1])),
        ("relu", vec![a.clone()], |t, v| Ok(t.relu(v[0]))),
        ("hinge", vec![a.clone()], |t, v| Ok(t.hinge(v[0]))),
        ("sigmoid", vec![a.clone()], |t, v| Ok(t.sigmoid(v[0]))),
        ("abs", vec![a.clone()], |t, v| Ok(t.abs(v[0]))),
        ("square", vec![a.clone()], |t, v| Ok(t.square(v[0]))),
        ("row_norm", vec![a.clone()], |t, v| Ok(t.row_norm(v[0]))),
        ("row_normalize", vec![a.clone()], |t, v| Ok(t.row_normalize(v[0]))),
        ("gather_rows", vec![a.clone()], |t, v| t.gather_rows(v[0], vec![2, 0, 2, 1])),
        ("mean", vec![a.clone()], |t, v| {
            let m = t.mean(v[0]);
            let s = t.square(m);
            Ok(s)
        }),
    ];
    let mut worst = (0.0f64, "");
    for (name, params, build) in cases {
        let report = check_gradient_with(
            |t, v| {
                let out = build(t, v)?;
                weighted(t, out)
            },
            &params,
            EPSILON,
            tamper(fault),
        )?;
        if report.max_relative_error >= worst.0 {
            worst = (report.max_relative_error, name);
        }
    }
    let sp = sparse.clone();
    let report = check_gradient_with(
        move |t, v| {
            let out = t.spmm(&sp, v[0])?;
            weighted(t, out)
        },
        &[a],
        EPSILON,
        tamper(fault),
    )?;
    if report.max_relative_error >= worst.0 {
        worst = (report.max_relative_error, "spmm");
    }
    Ok((
        worst.0 < PRIMITIVE_TOLERANCE,
        format!("worst primitive {} at {:.3e}", worst.1, worst.0),
    ))
}

/// Six-entity, two-relation synthetic pair with 4-wide embeddings.
pub fn tiny_bundle() -> DatasetBundle {
    generate_synthetic(&SyntheticConfig {
        n_entities: 6,
        n_relations: 2,
        n_triples: 8,
        train_fraction: 0.5,
        feature_dim: 4,
        rng_seed: 5,
        ..Default::default()
    })
    .expect("tiny synthetic config is valid")
}

/// Encoder parameters with every gate active, flattened in tape order.
fn random_encoder(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<DenseMatrix<f64>> {
    let mut out = vec![DenseMatrix::random_normal(n, dim, 1.0, rng)];
    for _ in 0..2 {
        out.push(DenseMatrix::random_normal(dim, dim, 0.7, rng));
        out.push(DenseMatrix::random_normal(dim, dim, 0.5, rng));
        out.push(DenseMatrix::random_normal(1, dim, 0.5, rng));
    }
    out
}

fn vars_from(v: &[Var]) -> EncoderVars {
    EncoderVars {
        features: v[0],
        layers: v[1..7].chunks(3).map(|c| (c[0], c[1], c[2])).collect(),
    }
}

fn params_from(values: &[DenseMatrix<f64>]) -> EncoderParams<f64> {
    EncoderParams {
        features: values[0].clone(),
        layers: values[1..7]
            .chunks(3)
            .map(|c| crate::encoder::HighwayLayer {
                weight: c[0].clone(),
                gate_weight: c[1].clone(),
                gate_bias: c[2].clone(),
            })
            .collect(),
        train_features: true,
    }
}

/// Max relative gradient error of one composite objective on the tiny pair.
pub fn loss_gradient_error(which: &str, fault: bool) -> Result<f64> {
    let bundle = tiny_bundle();
    let index = bundle.index();
    let triples = bundle.global_triples();
    let adjacency: Arc<SparseMatrix<f64>> = Arc::new(build_joint_adjacency(&bundle.kg1, &bundle.kg2));
    let n = index.num_entities();
    let dim = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut params = random_encoder(n, dim, &mut rng);
    let base_emb = encode_value(&params_from(&params), &adjacency)?;
    let positives: Vec<(usize, usize)> = bundle.train_seeds.pairs().iter().map(|&p| index.global_pair(p)).collect();

    let report = match which {
        "encoder" => {
            let coeffs = DenseMatrix::random_normal(n, dim, 1.0, &mut rng);
            check_gradient_with(
                |t, v| {
                    let emb = encode(t, &vars_from(v), &adjacency)?;
                    let k = t.constant(coeffs.clone());
                    let m = t.mul(emb, k)?;
                    Ok(t.sum(m))
                },
                &params,
                EPSILON,
                tamper(fault),
            )?
        }
        "transe" => {
            params.push(DenseMatrix::random_normal(index.num_relations(), dim, 1.0, &mut rng));
            let negatives = sample_triple_negatives(Some(&base_emb), &triples, &index, 3, 4)?;
            let (pos, neg): (Vec<Triple>, Vec<Vec<Triple>>) =
                triples.iter().copied().zip(negatives).filter(|(_, n)| !n.is_empty()).unzip();
            check_gradient_with(
                |t, v| {
                    let emb = encode(t, &vars_from(v), &adjacency)?;
                    transe_loss(t, emb, v[7], &pos, &neg, DEFAULT_GAMMA1, false)
                },
                &params,
                EPSILON,
                tamper(fault),
            )?
        }
        "nc" => {
            let negatives = mine_alignment_negatives(&base_emb, &bundle.train_seeds, &index, 3)?;
            check_gradient_with(
                |t, v| {
                    let emb = encode(t, &vars_from(v), &adjacency)?;
                    nc_loss(t, emb, &positives, &negatives, DEFAULT_GAMMA2)
                },
                &params,
                EPSILON,
                tamper(fault),
            )?
        }
        "kd" | "total" => {
            let teacher = DenseMatrix::random_normal(n, dim, 1.0, &mut rng);
            let mu_t = compute_mu(&teacher, &triples)?;
            // μ_S and β are constants of the step: freeze them at the base point.
            let mu_s = compute_mu(&base_emb, &triples)?;
            let negatives = mine_alignment_negatives(&base_emb, &bundle.train_seeds, &index, 3)?;
            let beta = if which == "total" {
                let mut t = Tape::new();
                let vars: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
                let emb = encode(&mut t, &vars_from(&vars), &adjacency)?;
                let nc = nc_loss(&mut t, emb, &positives, &negatives, DEFAULT_GAMMA2)?;
                let kd = kd_loss(&mut t, &teacher, emb, &triples, mu_t, mu_s)?;
                temperature_beta(t.scalar_value(nc), t.scalar_value(kd))?
            } else {
                0.0
            };
            check_gradient_with(
                |t, v| {
                    let emb = encode(t, &vars_from(v), &adjacency)?;
                    let kd = kd_loss(t, &teacher, emb, &triples, mu_t, mu_s)?;
                    if which == "kd" {
                        return Ok(kd);
                    }
                    let nc = nc_loss(t, emb, &positives, &negatives, DEFAULT_GAMMA2)?;
                    Ok(student_total_loss(t, nc, Some(kd), TemperatureMode::Fixed(beta), 0)?.0)
                },
                &params,
                EPSILON,
                tamper(fault),
            )?
        }
        other => return Err(Error::Config(format!("no loss gradient check named `{other}`"))),
    };
    if report.checked == 0 {
        return Err(Error::InvalidInput(format!("{which}: every entry was skipped")));
    }
    Ok(report.max_relative_error)
}

fn huber_contract(fault: bool) -> Result<(bool, String)> {
    let h = |x: f64, y: f64| if fault { huber(x, y) * 1.01 } else { huber(x, y) };
    let g = |x: f64, y: f64| if fault { huber_grad(x, y) * 1.01 } else { huber_grad(x, y) };
    let knot_quadratic = 0.5;
    let knot_linear = 1.0 - 0.5;
    let value_gap = (h(1.0, 0.0) - knot_quadratic).abs().max((h(1.0, 0.0) - knot_linear).abs());
    let just_below = g(1.0 - 1e-13, 0.0);
    let just_above = g(1.0 + 1e-13, 0.0);
    let deriv_gap = (just_below - just_above).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut symmetric = true;
    let mut zero = true;
    for _ in 0..200 {
        let x: f64 = rng.random_range(-4.0..4.0);
        let y: f64 = rng.random_range(-4.0..4.0);
        symmetric &= h(x, y) == h(y, x);
        zero &= h(x, x) == 0.0;
    }
    let passed = value_gap <= 1e-12 && deriv_gap <= 1e-12 && symmetric && zero;
    Ok((
        passed,
        format!("knot value gap {value_gap:.1e}, derivative gap {deriv_gap:.1e}, symmetric {symmetric}, zero {zero}"),
    ))
}

fn mu_identity(fault: bool) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let triples: Vec<Triple> = (0..30)
        .map(|_| Triple::new(rng.random_range(0..12), 0, rng.random_range(0..12)))
        .filter(|t| t.head != t.tail)
        .collect();
    let emb = DenseMatrix::<f64>::random_normal(12, 5, 1.0, &mut rng);
    let mut mu = compute_mu(&emb, &triples)?;
    if fault {
        mu *= 1.001;
    }
    let mean = triples
        .iter()
        .map(|t| energy_psi(emb.row(t.head), emb.row(t.tail), mu))
        .sum::<f64>()
        / triples.len() as f64;
    Ok(((mean - 1.0).abs() < 1e-9, format!("mean psi {mean}")))
}

fn highway_identity(fault: bool) -> Result<(bool, String)> {
    let bundle = tiny_bundle();
    let adjacency: Arc<SparseMatrix<f64>> = Arc::new(build_joint_adjacency(&bundle.kg1, &bundle.kg2));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = EncoderParams::<f64>::init(bundle.index().num_entities(), 4, 2, bundle.features.as_ref(), &mut rng)?;
    let bias = if fault { -2.0 } else { -50.0 };
    for l in &mut params.layers {
        l.gate_bias = DenseMatrix::filled(1, 4, bias);
    }
    let out = encode_value(&params, &adjacency)?;
    let gap = out.zip_map(&params.features, "highway", |a, b| a - b)?.max_abs();
    Ok((gap < 1e-6, format!("max |encode - X| = {gap:.3e}")))
}

fn adjacency_spectrum(fault: bool) -> Result<(bool, String)> {
    // Triangle plus a pendant in KG1, a single edge in KG2.
    let kg1 = KnowledgeGraph::new(
        4,
        1,
        vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2), Triple::new(2, 0, 0), Triple::new(2, 0, 3)],
    )?;
    let kg2 = KnowledgeGraph::new(2, 1, vec![Triple::new(0, 0, 1)])?;
    let mut a = build_joint_adjacency::<f64>(&kg1, &kg2).to_dense();
    if fault {
        a.set(0, 1, a.get(0, 1) * 1.5);
    }
    let n = a.rows();
    let asym = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (a.get(i, j) - a.get(j, i)).abs())
        .fold(0.0, f64::max);
    let cross = (0..4).all(|i| (4..6).all(|j| a.get(i, j) == 0.0));
    // Power iteration on A² bounds the spectral radius.
    let mut v = DenseMatrix::filled(n, 1, 1.0);
    let mut radius = 0.0;
    for _ in 0..200 {
        let w = a.matmul(&a.matmul(&v)?)?;
        let norm = w.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        radius = norm.sqrt() / v.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt().sqrt();
        v = w.map(|x| x / norm);
    }
    let passed = asym < 1e-12 && cross && radius <= 1.0 + 1e-9;
    Ok((passed, format!("asymmetry {asym:.1e}, block-diagonal {cross}, spectral radius {radius:.6}")))
}

fn metric_oracle(fault: bool) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 20;
    let index = GlobalIndex::new(&KnowledgeGraph::empty(n, 1), &KnowledgeGraph::empty(n, 1));
    let emb = DenseMatrix::<f64>::random_normal(2 * n, 3, 1.0, &mut rng);
    let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, (i * 7) % n)).collect();
    let seeds = AlignmentSeeds::new(pairs.clone())?;
    let mut ranks = rank_alignments(&emb, &seeds, &index, Direction::Kg1ToKg2, CandidatePool::TestSet)?;
    if fault {
        ranks[0] += 1;
    }
    let oracle: Vec<usize> = pairs
        .iter()
        .map(|&(a, b)| {
            let mut order: Vec<(f64, usize)> = pairs
                .iter()
                .map(|&(_, c)| {
                    let d = emb
                        .row(a)
                        .iter()
                        .zip(emb.row(n + c))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    (d, c)
                })
                .collect();
            order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            1 + order.iter().position(|&(_, c)| c == b).expect("counterpart present")
        })
        .collect();
    let same = ranks == oracle
        && hits_at_k(&ranks, 1)? == hits_at_k(&oracle, 1)?
        && hits_at_k(&ranks, 10)? == hits_at_k(&oracle, 10)?
        && mrr(&ranks)? == mrr(&oracle)?;
    Ok((same, format!("{} queries, ranks match oracle: {same}", ranks.len())))
}

fn adam_first_step(fault: bool) -> Result<(bool, String)> {
    let mut w = DenseMatrix::<f64>::scalar(0.0);
    let mut state = AdamState::new(&[(1, 1)]);
    let g = if fault { 2.0 } else { 1.0 };
    adam_step(&mut [("w", &mut w)], &[DenseMatrix::scalar(1.0)], &mut state, 0.001 * g)?;
    let delta = w.get(0, 0);
    Ok(((delta + 0.000999999990).abs() < 1e-12, format!("first step {delta:.12}")))
}
