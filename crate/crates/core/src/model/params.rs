use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::config::LeapConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-width of the uniform initializer for weight matrices and
/// randomly initialized embeddings.
pub const INIT_RANGE: f64 = 0.05;

/// LSTM cell weights. `weight` is `[4h x (h + d)]` acting on `[h_prev; x]`,
/// with gate rows ordered input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LstmParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LstmParams {
    pub fn hidden(&self) -> usize {
        self.bias.len() / 4
    }

    pub fn input(&self) -> usize {
        self.weight.shape()[1] - self.hidden()
    }
}

/// One convolution width: kernel `[w x d x filters]` plus bias `[filters]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn filters(&self) -> usize {
        self.bias.len()
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LeapParams {
    pub embedding: Tensor,
    pub lstm: LstmParams,
    pub reverse: LstmParams,
    pub conv: Vec<ConvParams>,
    /// `[s x (d + p + f)]`
    pub skip_w1: Tensor,
    pub skip_b1: Tensor,
    /// `[2 x s]`; row 0 scores keep, row 1 scores skip.
    pub skip_w2: Tensor,
    pub skip_b2: Tensor,
    /// Following-text feature used at the last position.
    pub h_end: Tensor,
    /// `[k x h]`, no bias.
    pub classifier: Tensor,
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl LeapParams {
    /// Uniform(-0.05, 0.05) matrices, zero biases, zero end vector, and a
    /// zero padding row in the embedding table.
    pub fn init<R: Rng + ?Sized>(cfg: &LeapConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, h, hr) = (cfg.embed_dim, cfg.hidden, cfg.reverse_hidden);
        let mut embedding = uniform(&[cfg.vocab_size, d], rng);
        embedding.row_mut(0).fill(0.0);
        let lstm = LstmParams {
            weight: uniform(&[4 * h, h + d], rng),
            bias: Tensor::zeros(&[4 * h]),
        };
        let reverse = LstmParams {
            weight: uniform(&[4 * hr, hr + d], rng),
            bias: Tensor::zeros(&[4 * hr]),
        };
        let conv = cfg
            .kernel_widths
            .iter()
            .map(|&w| ConvParams {
                weight: uniform(&[w, d, cfg.filters_per_width], rng),
                bias: Tensor::zeros(&[cfg.filters_per_width]),
            })
            .collect();
        Ok(LeapParams {
            embedding,
            lstm,
            reverse,
            conv,
            skip_w1: uniform(&[cfg.skip_hidden, cfg.mlp_input_dim()], rng),
            skip_b1: Tensor::zeros(&[cfg.skip_hidden]),
            skip_w2: uniform(&[2, cfg.skip_hidden], rng),
            skip_b2: Tensor::zeros(&[2]),
            h_end: Tensor::zeros(&[cfg.follow_dim()]),
            classifier: uniform(&[cfg.classes, h], rng),
        })
    }

    /// All tensors in a fixed order shared by [`Self::tensors_mut`] and
    /// [`Self::group_names`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.embedding,
            &self.lstm.weight,
            &self.lstm.bias,
            &self.reverse.weight,
            &self.reverse.bias,
        ];
        for c in &self.conv {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.extend([
            &self.skip_w1,
            &self.skip_b1,
            &self.skip_w2,
            &self.skip_b2,
            &self.h_end,
            &self.classifier,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.embedding,
            &mut self.lstm.weight,
            &mut self.lstm.bias,
            &mut self.reverse.weight,
            &mut self.reverse.bias,
        ];
        for c in &mut self.conv {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.extend([
            &mut self.skip_w1,
            &mut self.skip_b1,
            &mut self.skip_w2,
            &mut self.skip_b2,
            &mut self.h_end,
            &mut self.classifier,
        ]);
        out
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["embedding", "lstm.weight", "lstm.bias", "reverse.weight", "reverse.bias"]
            .iter()
            .map(|s| String::from(*s))
            .collect();
        for c in &self.conv {
            out.push(format!("conv{}.weight", c.width()));
            out.push(format!("conv{}.bias", c.width()));
        }
        for s in ["skip.w1", "skip.b1", "skip.w2", "skip.b2", "h_end", "classifier"] {
            out.push(String::from(s));
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Expected shape of every tensor, in [`Self::tensors`] order.
    pub fn expected_shapes(cfg: &LeapConfig) -> Vec<Vec<usize>> {
        let (d, h, hr, s) = (cfg.embed_dim, cfg.hidden, cfg.reverse_hidden, cfg.skip_hidden);
        let mut out = vec![
            vec![cfg.vocab_size, d],
            vec![4 * h, h + d],
            vec![4 * h],
            vec![4 * hr, hr + d],
            vec![4 * hr],
        ];
        for &w in &cfg.kernel_widths {
            out.push(vec![w, d, cfg.filters_per_width]);
            out.push(vec![cfg.filters_per_width]);
        }
        out.extend([
            vec![s, cfg.mlp_input_dim()],
            vec![s],
            vec![2, s],
            vec![2],
            vec![cfg.follow_dim()],
            vec![cfg.classes, h],
        ]);
        out
    }

    /// Checks every tensor shape against the configuration and that all
    /// values are finite.
    pub fn validate(&self, cfg: &LeapConfig) -> Result<()> {
        cfg.validate()?;
        let expected = Self::expected_shapes(cfg);
        let tensors = self.tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Shape {
                op: "params",
                lhs: vec![tensors.len()],
                rhs: vec![expected.len()],
            });
        }
        for ((t, shape), name) in tensors.iter().zip(&expected).zip(self.group_names()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "params",
                    lhs: t.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            if !t.all_finite() {
                return Err(Error::NonFinite { group: name });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_matches_expected_shapes() {
        let cfg = LeapConfig::standard(50, 4);
        let p = LeapParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.validate(&cfg).unwrap();
        assert_eq!(p.tensors().len(), p.group_names().len());
        assert!(p.embedding.row(0).iter().all(|&v| v == 0.0));
        assert!(p.h_end.data().iter().all(|&v| v == 0.0));
        assert!(p.skip_w1.data().iter().all(|v| v.abs() <= INIT_RANGE));
        assert_eq!(p.skip_w1.shape(), &[20, 800]);
    }

    #[test]
    fn validate_catches_wrong_shape() {
        let cfg = LeapConfig::standard(50, 4);
        let mut p = LeapParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.h_end = Tensor::zeros(&[199]);
        assert!(matches!(p.validate(&cfg), Err(Error::Shape { .. })));
    }
}
