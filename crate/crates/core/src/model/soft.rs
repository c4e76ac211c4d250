//! Differentiable batch forward pass used for training.
//!
//! Every non-padding token draws a relaxed gumbel-softmax sample `y_t` and
//! the state update is the mixture `y0 * LSTM(h, x) + y1 * h`, so both
//! branches always run. Padding positions copy the state through with a
//! constant `[0, 1]` weight, which makes the last state of every row equal
//! to the state at that document's true length.

use alloc::vec;
use alloc::vec::Vec;

use super::config::LeapConfig;
use super::params::LeapParams;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::gumbel::NoiseSource;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How the training pass obtains the keep/skip mixture weights.
pub enum SkipControl<'a> {
    /// Relaxed gumbel-softmax samples at temperature `tau`.
    Gumbel {
        noise: &'a mut dyn NoiseSource,
        tau: f64,
    },
    /// Constant weights `[keep, skip]` for `(document, position)`.
    Forced(&'a dyn Fn(usize, usize) -> [f64; 2]),
    /// No skip pathway: a plain LSTM that reads every token.
    Disabled,
}

/// Tape handles for the registered parameters, in [`LeapParams::tensors`]
/// order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    conv_count: usize,
}

impl ParamVars {
    pub fn register<'p>(tape: &mut Tape<'p>, params: &'p LeapParams) -> Self {
        let vars = params.tensors().into_iter().map(|t| tape.param(t)).collect();
        ParamVars {
            vars,
            conv_count: params.conv.len(),
        }
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    pub fn embedding(&self) -> Var {
        self.vars[0]
    }
    pub fn lstm(&self) -> (Var, Var) {
        (self.vars[1], self.vars[2])
    }
    pub fn reverse(&self) -> (Var, Var) {
        (self.vars[3], self.vars[4])
    }
    pub fn conv(&self, i: usize) -> (Var, Var) {
        (self.vars[5 + 2 * i], self.vars[6 + 2 * i])
    }
    fn tail(&self, i: usize) -> Var {
        self.vars[5 + 2 * self.conv_count + i]
    }
    pub fn skip_w1(&self) -> Var {
        self.tail(0)
    }
    pub fn skip_b1(&self) -> Var {
        self.tail(1)
    }
    pub fn skip_w2(&self) -> Var {
        self.tail(2)
    }
    pub fn skip_b2(&self) -> Var {
        self.tail(3)
    }
    pub fn h_end(&self) -> Var {
        self.tail(4)
    }
    pub fn classifier(&self) -> Var {
        self.tail(5)
    }

    /// Collects parameter gradients into a parameter-shaped structure;
    /// parameters the loss does not reach get zeros.
    pub fn gradients(&self, params: &LeapParams, grads: &crate::tape::Gradients) -> LeapParams {
        let mut out = params.zeros_like();
        for (slot, &var) in out.tensors_mut().into_iter().zip(&self.vars) {
            if let Some(g) = grads.get(var) {
                slot.data_mut().copy_from_slice(g.data());
            }
        }
        out
    }
}

/// Output of [`forward_train`]: the tape and the handles needed to build
/// the loss.
pub struct SoftForward<'p> {
    pub tape: Tape<'p>,
    pub vars: ParamVars,
    /// `[batch x k]` class probabilities.
    pub probs: Var,
    /// Mean skip weight over non-padding tokens; `None` when the skip
    /// pathway is disabled.
    pub skip_rate: Option<Var>,
    /// `[batch x h]` state at each document's true length.
    pub final_state: Var,
    /// Mixture weights `[keep, skip]` per document per real token.
    pub traces: Vec<Vec<[f64; 2]>>,
}

impl SoftForward<'_> {
    pub fn skip_rate_value(&self) -> f64 {
        self.skip_rate
            .map_or(0.0, |v| self.tape.value(v).data()[0])
    }
}

/// Tape version of one LSTM step over a batch of rows.
pub fn lstm_step_tape(
    tape: &mut Tape<'_>,
    weight: Var,
    bias: Var,
    h: Var,
    c: Var,
    x: Var,
) -> Result<(Var, Var)> {
    let n = tape.value(h).last_dim();
    let input = tape.concat(&[h, x], 1)?;
    let gates = tape.linear(input, weight, Some(bias))?;
    let i = tape.slice_cols(gates, 0, n)?;
    let f = tape.slice_cols(gates, n, n)?;
    let o = tape.slice_cols(gates, 2 * n, n)?;
    let g = tape.slice_cols(gates, 3 * n, n)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let o = tape.sigmoid(o);
    let g = tape.tanh(g);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

fn row_weights(rows: impl Iterator<Item = [f64; 2]>, n: usize) -> Tensor {
    let data: Vec<f64> = rows.flat_map(|r| r.into_iter()).collect();
    Tensor::matrix(n, 2, data).expect("two weights per row")
}

/// Differentiable forward pass over a padded batch.
pub fn forward_train<'p>(
    cfg: &LeapConfig,
    params: &'p LeapParams,
    batch: &Batch,
    control: SkipControl<'_>,
) -> Result<SoftForward<'p>> {
    let mut control = control;
    if let SkipControl::Gumbel { tau, .. } = control {
        if !(tau > 0.0) {
            return Err(Error::Parameter {
                name: "tau",
                value: tau,
            });
        }
    }
    let n = batch.size();
    if n == 0 || batch.lengths().contains(&0) {
        return Err(Error::Empty("batch"));
    }
    let steps = batch.max_len();
    let lengths = batch.lengths().to_vec();
    let skipping = !matches!(control, SkipControl::Disabled);
    let flags = cfg.features;

    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let embedded = tape.embed(vars.embedding(), &batch.time_major_ids())?;

    let need_conv = skipping && flags.use_follow && flags.use_cnn;
    let need_rev = skipping && flags.use_follow && flags.use_rnn_r;

    let conv = if need_conv {
        let mut parts = Vec::with_capacity(params.conv.len());
        for i in 0..params.conv.len() {
            let (k, b) = vars.conv(i);
            let raw = tape.conv1d(embedded, k, b, n)?;
            parts.push(tape.relu(raw));
        }
        Some(tape.concat(&parts, 1)?)
    } else {
        None
    };

    let mut rev_states: Vec<Option<Var>> = vec![None; steps];
    if need_rev {
        let hr = cfg.reverse_hidden;
        let (w, b) = vars.reverse();
        let mut h = tape.leaf(Tensor::zeros(&[n, hr]));
        let mut c = tape.leaf(Tensor::zeros(&[n, hr]));
        for t in (0..steps).rev() {
            let x = tape.rows(embedded, t * n, n)?;
            let (hn, cn) = lstm_step_tape(&mut tape, w, b, h, c, x)?;
            let valid = lengths.iter().filter(|&&l| t < l).count();
            if valid == n {
                h = hn;
                c = cn;
            } else {
                let m = tape.leaf(row_weights(
                    lengths.iter().map(|&l| if t < l { [1.0, 0.0] } else { [0.0, 1.0] }),
                    n,
                ));
                h = tape.row_mix(m, hn, h)?;
                c = tape.row_mix(m, cn, c)?;
            }
            rev_states[t] = Some(h);
        }
    }

    let (d, hd, fd) = (cfg.embed_dim, cfg.hidden, cfg.follow_dim());
    let zero_x = tape.leaf(Tensor::zeros(&[n, d]));
    let zero_pre = tape.leaf(Tensor::zeros(&[n, hd]));
    let zero_follow = tape.leaf(Tensor::zeros(&[n, fd]));
    let zero_rev = tape.leaf(Tensor::zeros(&[n, cfg.reverse_hidden]));
    let zero_conv = tape.leaf(Tensor::zeros(&[n, cfg.conv_dim()]));
    let skip_const = tape.leaf(row_weights((0..n).map(|_| [0.0, 1.0]), n));
    let h_end_rows = if skipping && flags.use_follow {
        Some(tape.broadcast_rows(vars.h_end(), n))
    } else {
        None
    };

    let (lw, lb) = vars.lstm();
    let mut h = tape.leaf(Tensor::zeros(&[n, hd]));
    let mut c = tape.leaf(Tensor::zeros(&[n, hd]));
    let mut skip_terms: Vec<Var> = Vec::new();
    let mut traces: Vec<Vec<[f64; 2]>> = lengths.iter().map(|&l| Vec::with_capacity(l)).collect();

    for t in 0..steps {
        let valid: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
        let all_valid = valid.iter().all(|&v| v);
        let x = tape.rows(embedded, t * n, n)?;
        let (hn, cn) = lstm_step_tape(&mut tape, lw, lb, h, c, x)?;

        let mix = if skipping {
            let current = if flags.use_current { x } else { zero_x };
            let preceding = if flags.use_preceding { h } else { zero_pre };
            let following = match h_end_rows {
                None => zero_follow,
                Some(end) => {
                    let next = if t + 1 < steps {
                        let r = match rev_states[t + 1] {
                            Some(r) => r,
                            None => zero_rev,
                        };
                        let cv = match conv {
                            Some(cv) => tape.rows(cv, (t + 1) * n, n)?,
                            None => zero_conv,
                        };
                        tape.concat(&[r, cv], 1)?
                    } else {
                        zero_follow
                    };
                    if lengths.iter().all(|&l| t + 1 < l) {
                        next
                    } else {
                        let sel = tape.leaf(row_weights(
                            lengths
                                .iter()
                                .map(|&l| if t + 1 == l { [0.0, 1.0] } else { [1.0, 0.0] }),
                            n,
                        ));
                        tape.row_mix(sel, next, end)?
                    }
                }
            };
            let z = tape.concat(&[current, preceding, following], 1)?;
            let hidden = tape.linear(z, vars.skip_w1(), Some(vars.skip_b1()))?;
            let hidden = tape.relu(hidden);
            let logits = tape.linear(hidden, vars.skip_w2(), Some(vars.skip_b2()))?;
            let pi = tape.softmax(logits)?;

            let y = match &mut control {
                SkipControl::Gumbel { noise, tau } => {
                    let mut g = Tensor::zeros(&[n, 2]);
                    for (b, &ok) in valid.iter().enumerate() {
                        if ok {
                            g.row_mut(b)[0] = noise.gumbel();
                            g.row_mut(b)[1] = noise.gumbel();
                        }
                    }
                    tape.gumbel_softmax(pi, &g, *tau)?
                }
                SkipControl::Forced(f) => tape.leaf(row_weights(
                    valid
                        .iter()
                        .enumerate()
                        .map(|(b, &ok)| if ok { f(b, t) } else { [0.0, 1.0] }),
                    n,
                )),
                SkipControl::Disabled => unreachable!("skipping is enabled"),
            };
            let y = if all_valid {
                y
            } else {
                let m = tape.leaf(row_weights(
                    valid.iter().map(|&ok| if ok { [1.0, 0.0] } else { [0.0, 1.0] }),
                    n,
                ));
                tape.row_mix(m, y, skip_const)?
            };
            let yv = tape.value(y);
            for (b, &ok) in valid.iter().enumerate() {
                if ok {
                    traces[b].push([yv.row(b)[0], yv.row(b)[1]]);
                }
            }
            let counter = row_weights(
                valid.iter().map(|&ok| if ok { [0.0, 1.0] } else { [0.0, 0.0] }),
                n,
            );
            skip_terms.push(tape.dot_const(y, counter)?);
            Some(y)
        } else {
            for (b, &ok) in valid.iter().enumerate() {
                if ok {
                    traces[b].push([1.0, 0.0]);
                }
            }
            if all_valid {
                None
            } else {
                Some(tape.leaf(row_weights(
                    valid.iter().map(|&ok| if ok { [1.0, 0.0] } else { [0.0, 1.0] }),
                    n,
                )))
            }
        };

        match mix {
            Some(y) => {
                h = tape.row_mix(y, hn, h)?;
                c = tape.row_mix(y, cn, c)?;
            }
            None => {
                h = hn;
                c = cn;
            }
        }
    }

    let skip_rate = if skipping {
        let mut total = skip_terms[0];
        for &term in &skip_terms[1..] {
            total = tape.add(total, term)?;
        }
        let tokens = batch.token_count() as f64;
        Some(tape.affine(total, 1.0 / tokens, 0.0))
    } else {
        None
    };

    let logits = tape.linear(h, vars.classifier(), None)?;
    let probs = tape.softmax(logits)?;
    Ok(SoftForward {
        tape,
        vars,
        probs,
        skip_rate,
        final_state: h,
        traces,
    })
}
