//! Layers built on the tape: MLPs, a gated recurrent cell, attentional
//! aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

fn activate<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<(ParamId, ParamId)>,
    dims: Vec<usize>,
    hidden: Activation,
    output: Activation,
}

impl MlpParams {
    /// `dims = [input, hidden..., output]`.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let wid = store.add_uniform(&format!("{name}.l{k}.w"), w[1], w[0], w[0], rng);
                let bid = store.add_uniform(&format!("{name}.l{k}.b"), w[1], 1, w[0], rng);
                (wid, bid)
            })
            .collect();
        MlpParams {
            layers,
            dims: dims.to_vec(),
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(w, Some(b), h);
            h = activate(tape, h, if k == last { self.output } else { self.hidden });
        }
        h
    }
}

/// Softmax attention over neighbor features with a scalar score MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub score: MlpParams,
}

impl AttentionParams {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        feature_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![feature_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        AttentionParams {
            score: MlpParams::new(store, name, &dims, Activation::Relu, Activation::Identity, rng),
        }
    }
}

/// `sum_k softmax(score(f_k))_k f_k` over a nonempty neighbor list.
pub fn attentional_aggregate<F: Scalar>(
    tape: &mut Tape<'_, F>,
    features: &[Var],
    params: &AttentionParams,
) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::Empty("attentional aggregation over no neighbors"));
    }
    let scores: Vec<Var> = features.iter().map(|&f| params.score.forward(tape, f)).collect();
    Ok(tape.attend(&scores, features))
}

/// One GRU layer: input, recurrent and bias parameters per gate.
#[derive(Clone, Debug, PartialEq)]
struct GruLayer {
    // (W_x, W_h, b) for reset, update and candidate gates.
    gates: [(ParamId, ParamId, ParamId); 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentParams {
    layers: Vec<GruLayer>,
    input_dim: usize,
    hidden: usize,
}

impl RecurrentParams {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers.max(1))
            .map(|l| {
                let inp = if l == 0 { input_dim } else { hidden };
                let gate = |g: &str, store: &mut ParamStore<F>, rng: &mut R| {
                    (
                        store.add_uniform(&format!("{name}.l{l}.{g}.wx"), hidden, inp, hidden, rng),
                        store.add_uniform(&format!("{name}.l{l}.{g}.wh"), hidden, hidden, hidden, rng),
                        store.add_uniform(&format!("{name}.l{l}.{g}.b"), hidden, 1, hidden, rng),
                    )
                };
                GruLayer {
                    gates: [gate("r", store, rng), gate("z", store, rng), gate("n", store, rng)],
                }
            })
            .collect();
        RecurrentParams {
            layers,
            input_dim,
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn cell<F: Scalar>(tape: &mut Tape<'_, F>, layer: &GruLayer, x: Var, h: Var) -> Var {
        let [(rx, rh, rb), (zx, zh, zb), (nx, nh, nb)] = layer.gates;
        let r = {
            let a = tape.affine(rx, Some(rb), x);
            let b = tape.affine(rh, None, h);
            let s = tape.add(a, b);
            tape.sigmoid(s)
        };
        let z = {
            let a = tape.affine(zx, Some(zb), x);
            let b = tape.affine(zh, None, h);
            let s = tape.add(a, b);
            tape.sigmoid(s)
        };
        let n = {
            let a = tape.affine(nx, Some(nb), x);
            let b = tape.affine(nh, None, h);
            let rb = tape.mul(r, b);
            let s = tape.add(a, rb);
            tape.tanh(s)
        };
        // h' = n + z (h - n)
        let d = tape.sub(h, n);
        let zd = tape.mul(z, d);
        tape.add(n, zd)
    }

    /// Scans the sequence from the first element; returns the last hidden state
    /// of the top layer. `dropout` masks between layers in training mode.
    pub fn forward<F: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, F>,
        inputs: &[Var],
        mut dropout: Option<(F, &mut R)>,
    ) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Empty("recurrent scan over an empty sequence"));
        }
        let mut seq = inputs.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                if let Some((p, rng)) = dropout.as_mut() {
                    let keep = F::one() - *p;
                    seq = seq
                        .into_iter()
                        .map(|x| {
                            let mask = (0..self.hidden)
                                .map(|_| {
                                    if rng.gen::<f64>() < p.to_f64_lossy() {
                                        F::zero()
                                    } else {
                                        F::one() / keep
                                    }
                                })
                                .collect();
                            let m = tape.constant(mask);
                            tape.mul(x, m)
                        })
                        .collect();
                }
            }
            let mut h = tape.constant(vec![F::zero(); self.hidden]);
            let mut outs = Vec::with_capacity(seq.len());
            for &x in &seq {
                h = Self::cell(tape, layer, x, h);
                outs.push(h);
            }
            seq = outs;
        }
        Ok(*seq.last().unwrap())
    }
}
