//! Highway-gated GCN shared by the teacher and the student.
//!
//! Each layer computes `G = ReLU(Â·H·W)` and blends it with its input
//! through a learned transform gate `T = σ(H·W_T + b_T)`:
//! `H' = T ⊙ G + (1 − T) ⊙ H`.

use std::sync::Arc;

use rand::Rng;

use crate::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::numkit::{DenseMatrix, Scalar, SparseMatrix, Tape, Var};

/// Initial transform-gate bias; negative so early training mostly carries
/// the input through.
pub const INITIAL_GATE_BIAS: f64 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct HighwayLayer<T> {
    pub weight: DenseMatrix<T>,
    pub gate_weight: DenseMatrix<T>,
    pub gate_bias: DenseMatrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    /// Input features `X`, one row per global entity.
    pub features: DenseMatrix<T>,
    pub layers: Vec<HighwayLayer<T>>,
    /// When false, `X` is registered as a constant.
    pub train_features: bool,
}

/// Tape handles for one registration of [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub features: Var,
    pub layers: Vec<(Var, Var, Var)>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Glorot-uniform layer weights, zero gate weights, gate bias
    /// [`INITIAL_GATE_BIAS`]. `X` is copied from `features` when given,
    /// otherwise drawn from `N(0, 1/√dim)`.
    pub fn init<R: Rng + ?Sized>(
        num_entities: usize,
        dim: usize,
        num_layers: usize,
        features: Option<&DenseMatrix<f64>>,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || num_layers == 0 {
            return Err(Error::Config("encoder needs dim ≥ 1 and at least one layer".into()));
        }
        let features = match features {
            Some(f) => {
                if f.shape() != (num_entities, dim) {
                    return Err(Error::Config(format!(
                        "feature matrix is {}x{}, encoder expects {num_entities}x{dim}",
                        f.rows(),
                        f.cols()
                    )));
                }
                f.cast::<T>()
            }
            None => DenseMatrix::random_normal(num_entities, dim, 1.0 / (dim as f64).sqrt(), rng),
        };
        let limit = (6.0 / (2 * dim) as f64).sqrt();
        let layers = (0..num_layers)
            .map(|_| HighwayLayer {
                weight: DenseMatrix::random_uniform(dim, dim, limit, rng),
                gate_weight: DenseMatrix::zeros(dim, dim),
                gate_bias: DenseMatrix::filled(1, dim, T::of(INITIAL_GATE_BIAS)),
            })
            .collect();
        Ok(EncoderParams {
            features,
            layers,
            train_features: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_entities(&self) -> usize {
        self.features.rows()
    }

    pub fn register(&self, tape: &mut Tape<T>) -> EncoderVars {
        let features = if self.train_features {
            tape.param(self.features.clone())
        } else {
            tape.constant(self.features.clone())
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.param(l.weight.clone()),
                    tape.param(l.gate_weight.clone()),
                    tape.param(l.gate_bias.clone()),
                )
            })
            .collect();
        EncoderVars { features, layers }
    }

    /// Trainable tensors with their names, in the same order as
    /// [`EncoderVars::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut DenseMatrix<T>)> {
        let mut out = Vec::with_capacity(1 + 3 * self.layers.len());
        if self.train_features {
            out.push(("features".to_string(), &mut self.features));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.weight"), &mut layer.weight));
            out.push((format!("layer{l}.gate_weight"), &mut layer.gate_weight));
            out.push((format!("layer{l}.gate_bias"), &mut layer.gate_bias));
        }
        out
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![Tensor::from_matrix("features", &self.features)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(Tensor::from_matrix(format!("layer{l}.weight"), &layer.weight));
            out.push(Tensor::from_matrix(format!("layer{l}.gate_weight"), &layer.gate_weight));
            out.push(Tensor::from_matrix(format!("layer{l}.gate_bias"), &layer.gate_bias));
        }
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.validate()?;
        let get = |name: &str| {
            ckpt.tensor(name)
                .map(|t| t.to_matrix::<T>())
                .expect("validated checkpoint has every layer tensor")
        };
        let layers = (0..ckpt.num_layers())
            .map(|l| HighwayLayer {
                weight: get(&format!("layer{l}.weight")),
                gate_weight: get(&format!("layer{l}.gate_weight")),
                gate_bias: get(&format!("layer{l}.gate_bias")),
            })
            .collect();
        Ok(EncoderParams {
            features: get("features"),
            layers,
            train_features: true,
        })
    }
}

impl EncoderVars {
    pub fn trainable(&self, train_features: bool) -> Vec<Var> {
        let mut out = Vec::with_capacity(1 + 3 * self.layers.len());
        if train_features {
            out.push(self.features);
        }
        for &(w, wt, bt) in &self.layers {
            out.extend([w, wt, bt]);
        }
        out
    }
}

/// `ReLU(Â · H · W)`.
pub fn gcn_layer<T: Scalar>(tape: &mut Tape<T>, h: Var, adjacency: &Arc<SparseMatrix<T>>, weight: Var) -> Result<Var> {
    let propagated = tape.spmm(adjacency, h)?;
    let transformed = tape.matmul(propagated, weight)?;
    Ok(tape.relu(transformed))
}

/// `T ⊙ H_gcn + (1 − T) ⊙ H_prev` with `T = σ(H_prev·W_T + b_T)`.
pub fn highway_combine<T: Scalar>(
    tape: &mut Tape<T>,
    prev: Var,
    gcn: Var,
    gate_weight: Var,
    gate_bias: Var,
) -> Result<Var> {
    if tape.shape(prev) != tape.shape(gcn) {
        return Err(Error::shape("highway_combine", tape.shape(prev), tape.shape(gcn)));
    }
    let logits = tape.matmul(prev, gate_weight)?;
    let logits = tape.add_row(logits, gate_bias)?;
    let gate = tape.sigmoid(logits);
    let carry = tape.scale(gate, T::of(-1.0));
    let carry = tape.shift(carry, T::one());
    let transformed = tape.mul(gate, gcn)?;
    let kept = tape.mul(carry, prev)?;
    tape.add(transformed, kept)
}

pub fn encode<T: Scalar>(tape: &mut Tape<T>, vars: &EncoderVars, adjacency: &Arc<SparseMatrix<T>>) -> Result<Var> {
    if adjacency.cols() != tape.shape(vars.features).0 {
        return Err(Error::shape("encode", adjacency.shape(), tape.shape(vars.features)));
    }
    let mut h = vars.features;
    for &(w, wt, bt) in &vars.layers {
        let g = gcn_layer(tape, h, adjacency, w)?;
        h = highway_combine(tape, h, g, wt, bt)?;
    }
    Ok(h)
}

/// Forward pass only.
pub fn encode_value<T: Scalar>(params: &EncoderParams<T>, adjacency: &Arc<SparseMatrix<T>>) -> Result<DenseMatrix<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = encode(&mut tape, &vars, adjacency)?;
    Ok(tape.value(out).clone())
}
