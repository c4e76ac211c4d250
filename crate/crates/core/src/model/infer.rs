//! Tape-free inference with hard skip decisions.
//!
//! Skipped tokens cost one small MLP evaluation; only kept tokens pay for a
//! full LSTM update, which is where the speedup comes from.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use super::config::LeapConfig;
use super::params::{ConvParams, LeapParams, LstmParams};
use crate::error::{Error, Result};
use crate::tape::PAD_ID;
use crate::tensor::{self, axpy, matvec_bias, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Decision {
    Keep,
    Skip,
}

/// Per-token skip distributions and the decisions taken from them.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SkipTrace {
    /// `[keep, skip]` probabilities per token.
    pub probs: Vec<[f64; 2]>,
    pub decisions: Vec<Decision>,
}

impl SkipTrace {
    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn skipped(&self) -> usize {
        self.decisions.iter().filter(|d| **d == Decision::Skip).count()
    }

    pub fn kept(&self) -> usize {
        self.len() - self.skipped()
    }

    pub fn skip_rate(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.skipped() as f64 / self.len() as f64
        }
    }
}

/// Result of reading one document.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub probs: Vec<f64>,
    pub trace: SkipTrace,
    /// Number of LSTM cell updates actually executed.
    pub updates: usize,
    pub final_state: Vec<f64>,
}

impl Inference {
    pub fn predicted(&self) -> usize {
        tensor::argmax(&self.probs)
    }
}

/// How a hard decision is drawn from the skip distribution.
pub enum DecisionRule<'a> {
    /// Keep unless skipping is strictly more probable.
    Argmax,
    /// Skip with probability `pi[1]`.
    Sample(&'a mut dyn RngCore),
    /// Ignore the distribution and use the given decision for position `t`.
    /// The skip pathway is still evaluated, so timing stays honest.
    Forced(&'a dyn Fn(usize) -> Decision),
}

/// Reusable buffers for [`lstm_step_into`].
#[derive(Debug, Default, Clone)]
pub struct LstmScratch {
    input: Vec<f64>,
    gates: Vec<f64>,
}

/// In-place LSTM update of `(h, c)` with input `x`.
pub fn lstm_step_into(
    cell: &LstmParams,
    h: &mut [f64],
    c: &mut [f64],
    x: &[f64],
    scratch: &mut LstmScratch,
) {
    let n = h.len();
    scratch.input.clear();
    scratch.input.extend_from_slice(h);
    scratch.input.extend_from_slice(x);
    scratch.gates.resize(4 * n, 0.0);
    matvec_bias(
        cell.weight.data(),
        Some(cell.bias.data()),
        &scratch.input,
        &mut scratch.gates,
    );
    let (ig, rest) = scratch.gates.split_at(n);
    let (fg, rest) = rest.split_at(n);
    let (og, gg) = rest.split_at(n);
    for j in 0..n {
        let i = tensor::sigmoid(ig[j]);
        let f = tensor::sigmoid(fg[j]);
        let o = tensor::sigmoid(og[j]);
        let g = tensor::tanh(gg[j]);
        c[j] = f * c[j] + i * g;
        h[j] = o * tensor::tanh(c[j]);
    }
}

/// One LSTM step returning the new `(h, c)`.
pub fn lstm_step(
    cell: &LstmParams,
    h_prev: &[f64],
    c_prev: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = cell.hidden();
    if h_prev.len() != n || c_prev.len() != n || x.len() != cell.input() {
        return Err(Error::Shape {
            op: "lstm_step",
            lhs: vec![h_prev.len(), c_prev.len(), x.len()],
            rhs: vec![n, n, cell.input()],
        });
    }
    let (mut h, mut c) = (h_prev.to_vec(), c_prev.to_vec());
    lstm_step_into(cell, &mut h, &mut c, x, &mut LstmScratch::default());
    Ok((h, c))
}

/// Embeds a token sequence as a `[T x d]` matrix; the padding id maps to
/// zeros.
pub fn embed(params: &LeapParams, tokens: &[u32]) -> Result<Tensor> {
    let (vocab, d) = params.embedding.dims2("embed")?;
    let mut data = vec![0.0; tokens.len() * d];
    for (t, &id) in tokens.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::Token { id, vocab });
        }
        if id != PAD_ID {
            data[t * d..(t + 1) * d].copy_from_slice(params.embedding.row(id as usize));
        }
    }
    Tensor::matrix(tokens.len(), d, data)
}

fn conv_width_into(conv: &ConvParams, embedded: &Tensor, out: &mut Tensor, offset: usize) {
    let (steps, d) = (embedded.rows(), embedded.last_dim());
    let (width, filters) = (conv.width(), conv.filters());
    let k = conv.weight.data();
    for t in 0..steps {
        let o = &mut out.row_mut(t)[offset..offset + filters];
        o.copy_from_slice(conv.bias.data());
        for j in 0..width.min(steps - t) {
            for (i, &xi) in embedded.row(t + j).iter().enumerate() {
                if xi != 0.0 {
                    axpy(xi, &k[(j * d + i) * filters..(j * d + i + 1) * filters], o);
                }
            }
        }
        for v in o.iter_mut() {
            *v = tensor::relu(*v);
        }
    }
}

/// Per-position n-gram features: row `t` holds, for each kernel width `w`,
/// `relu(conv(x[t..t+w]))` with zero padding past the end, widths
/// concatenated in configuration order.
pub fn conv_features(params: &LeapParams, embedded: &Tensor) -> Tensor {
    let total: usize = params.conv.iter().map(|c| c.filters()).sum();
    let mut out = Tensor::zeros(&[embedded.rows(), total]);
    let mut offset = 0;
    for conv in &params.conv {
        conv_width_into(conv, embedded, &mut out, offset);
        offset += conv.filters();
    }
    out
}

/// Runs the reverse encoder from the last token back to the first. Row `t`
/// is the state after reading `x[T-1], ..., x[t]`.
pub fn reverse_encode(cell: &LstmParams, embedded: &Tensor) -> Tensor {
    let n = cell.hidden();
    let steps = embedded.rows();
    let mut out = Tensor::zeros(&[steps, n]);
    let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
    let mut scratch = LstmScratch::default();
    for t in (0..steps).rev() {
        lstm_step_into(cell, &mut h, &mut c, embedded.row(t), &mut scratch);
        out.row_mut(t).copy_from_slice(&h);
    }
    out
}

/// Following-text feature for 0-based position `t` of a `T`-token
/// sequence: `[rev[t+1]; conv[t+1]]` before the last position, the learned
/// end vector at the last one. Disabled parts are zeros.
pub fn follow_features(
    cfg: &LeapConfig,
    t: usize,
    conv: &Tensor,
    rev: &Tensor,
    h_end: &Tensor,
) -> Result<Vec<f64>> {
    let steps = conv.rows().max(rev.rows());
    if t >= steps {
        return Err(Error::Shape {
            op: "follow_features",
            lhs: vec![t],
            rhs: vec![steps],
        });
    }
    let mut out = vec![0.0; cfg.follow_dim()];
    write_follow(cfg, t, steps, conv, rev, h_end, &mut out);
    Ok(out)
}

fn write_follow(
    cfg: &LeapConfig,
    t: usize,
    steps: usize,
    conv: &Tensor,
    rev: &Tensor,
    h_end: &Tensor,
    out: &mut [f64],
) {
    let flags = cfg.features;
    if !flags.use_follow {
        out.fill(0.0);
    } else if t + 1 == steps {
        out.copy_from_slice(h_end.data());
    } else {
        let hr = cfg.reverse_hidden;
        if flags.use_rnn_r {
            out[..hr].copy_from_slice(rev.row(t + 1));
        } else {
            out[..hr].fill(0.0);
        }
        if flags.use_cnn {
            out[hr..].copy_from_slice(conv.row(t + 1));
        } else {
            out[hr..].fill(0.0);
        }
    }
}

/// Skip MLP: `softmax(W2 relu(W1 [x; f_pre; f_fol] + b1) + b2)`, returned
/// as `[keep, skip]`.
pub fn skip_distribution(
    params: &LeapParams,
    x: &[f64],
    f_pre: &[f64],
    f_fol: &[f64],
) -> Result<[f64; 2]> {
    let expected = params.skip_w1.shape()[1];
    if x.len() + f_pre.len() + f_fol.len() != expected {
        return Err(Error::Shape {
            op: "skip_distribution",
            lhs: vec![x.len(), f_pre.len(), f_fol.len()],
            rhs: vec![expected],
        });
    }
    let mut z = Vec::with_capacity(expected);
    z.extend_from_slice(x);
    z.extend_from_slice(f_pre);
    z.extend_from_slice(f_fol);
    let mut hidden = vec![0.0; params.skip_b1.len()];
    Ok(skip_mlp(params, &z, &mut hidden))
}

fn skip_mlp(params: &LeapParams, z: &[f64], hidden: &mut [f64]) -> [f64; 2] {
    matvec_bias(params.skip_w1.data(), Some(params.skip_b1.data()), z, hidden);
    for v in hidden.iter_mut() {
        *v = tensor::relu(*v);
    }
    let mut logits = [0.0; 2];
    matvec_bias(params.skip_w2.data(), Some(params.skip_b2.data()), hidden, &mut logits);
    tensor::softmax_in_place(&mut logits);
    logits
}

/// `softmax(W h)`.
pub fn classify(h: &[f64], w: &Tensor) -> Result<Vec<f64>> {
    let (k, n) = w.dims2("classify")?;
    if n != h.len() {
        return Err(Error::Shape {
            op: "classify",
            lhs: vec![h.len()],
            rhs: vec![k, n],
        });
    }
    let mut out = vec![0.0; k];
    matvec_bias(w.data(), None, h, &mut out);
    tensor::softmax_in_place(&mut out);
    Ok(out)
}

/// Reads a document with hard skip decisions.
pub fn forward_infer(
    cfg: &LeapConfig,
    params: &LeapParams,
    tokens: &[u32],
    rule: DecisionRule<'_>,
) -> Result<Inference> {
    let mut rule = rule;
    if tokens.is_empty() {
        return Err(Error::Empty("document"));
    }
    let steps = tokens.len();
    let flags = cfg.features;
    let embedded = embed(params, tokens)?;
    let conv = if flags.use_follow && flags.use_cnn {
        conv_features(params, &embedded)
    } else {
        Tensor::zeros(&[steps, cfg.conv_dim()])
    };
    let rev = if flags.use_follow && flags.use_rnn_r {
        reverse_encode(&params.reverse, &embedded)
    } else {
        Tensor::zeros(&[steps, cfg.reverse_hidden])
    };

    let (d, h_dim) = (cfg.embed_dim, cfg.hidden);
    let mut h = vec![0.0; h_dim];
    let mut c = vec![0.0; h_dim];
    let mut z = vec![0.0; cfg.mlp_input_dim()];
    let mut mlp_hidden = vec![0.0; cfg.skip_hidden];
    let mut scratch = LstmScratch::default();
    let mut trace = SkipTrace {
        probs: Vec::with_capacity(steps),
        decisions: Vec::with_capacity(steps),
    };
    let mut updates = 0;

    for t in 0..steps {
        let x = embedded.row(t);
        if flags.use_current {
            z[..d].copy_from_slice(x);
        }
        if flags.use_preceding {
            z[d..d + h_dim].copy_from_slice(&h);
        }
        write_follow(cfg, t, steps, &conv, &rev, &params.h_end, &mut z[d + h_dim..]);
        let pi = skip_mlp(params, &z, &mut mlp_hidden);
        let decision = match &mut rule {
            DecisionRule::Argmax => {
                if pi[1] > pi[0] {
                    Decision::Skip
                } else {
                    Decision::Keep
                }
            }
            DecisionRule::Sample(rng) => {
                let u: f64 = rng.gen();
                if u < pi[1] {
                    Decision::Skip
                } else {
                    Decision::Keep
                }
            }
            DecisionRule::Forced(f) => f(t),
        };
        if decision == Decision::Keep {
            lstm_step_into(&params.lstm, &mut h, &mut c, x, &mut scratch);
            updates += 1;
        }
        trace.probs.push(pi);
        trace.decisions.push(decision);
    }

    let probs = classify(&h, &params.classifier)?;
    Ok(Inference {
        probs,
        trace,
        updates,
        final_state: h,
    })
}

/// Plain LSTM reading of every token with no skip pathway at all; the
/// speed baseline and the schedule-training model share this path.
pub fn forward_plain(cfg: &LeapConfig, params: &LeapParams, tokens: &[u32]) -> Result<Inference> {
    if tokens.is_empty() {
        return Err(Error::Empty("document"));
    }
    let embedded = embed(params, tokens)?;
    let mut h = vec![0.0; cfg.hidden];
    let mut c = vec![0.0; cfg.hidden];
    let mut scratch = LstmScratch::default();
    for t in 0..tokens.len() {
        lstm_step_into(&params.lstm, &mut h, &mut c, embedded.row(t), &mut scratch);
    }
    let probs = classify(&h, &params.classifier)?;
    Ok(Inference {
        probs,
        trace: SkipTrace {
            probs: vec![[1.0, 0.0]; tokens.len()],
            decisions: vec![Decision::Keep; tokens.len()],
        },
        updates: tokens.len(),
        final_state: h,
    })
}
