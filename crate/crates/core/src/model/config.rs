use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Which inputs feed the skip decision. A disabled feature is replaced by
/// zeros of the same width, so parameter shapes never depend on the flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureFlags {
    /// Convolutional n-gram features of the upcoming words.
    pub use_cnn: bool,
    /// Reverse tiny-LSTM summary of the remaining text.
    pub use_rnn_r: bool,
    /// The whole following-text feature, including the end vector.
    pub use_follow: bool,
    /// The previous hidden state.
    pub use_preceding: bool,
    /// The current word's embedding.
    pub use_current: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        FeatureFlags {
            use_cnn: true,
            use_rnn_r: true,
            use_follow: true,
            use_preceding: true,
            use_current: true,
        }
    }
}

/// Model dimensions. The preceding-text feature is the main hidden state,
/// so its width always equals `hidden`; the following-text width is derived
/// from the reverse encoder and the convolution bank.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LeapConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub reverse_hidden: usize,
    pub skip_hidden: usize,
    pub kernel_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub classes: usize,
    pub features: FeatureFlags,
}

impl LeapConfig {
    /// Full-size dimensions: d = h = 300, h' = s = 20, widths {3, 4, 5} with
    /// 60 filters each (f = 200).
    pub fn standard(vocab_size: usize, classes: usize) -> Self {
        LeapConfig {
            vocab_size,
            embed_dim: 300,
            hidden: 300,
            reverse_hidden: 20,
            skip_hidden: 20,
            kernel_widths: vec![3, 4, 5],
            filters_per_width: 60,
            classes,
            features: FeatureFlags::default(),
        }
    }

    pub fn preceding_dim(&self) -> usize {
        self.hidden
    }

    pub fn conv_dim(&self) -> usize {
        self.filters_per_width * self.kernel_widths.len()
    }

    pub fn follow_dim(&self) -> usize {
        self.reverse_hidden + self.conv_dim()
    }

    pub fn mlp_input_dim(&self) -> usize {
        self.embed_dim + self.preceding_dim() + self.follow_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("reverse_hidden", self.reverse_hidden),
            ("skip_hidden", self.skip_hidden),
            ("filters_per_width", self.filters_per_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter { name, value: 0.0 });
            }
        }
        if self.classes < 2 {
            return Err(Error::Parameter {
                name: "classes",
                value: self.classes as f64,
            });
        }
        if self.vocab_size < 2 {
            return Err(Error::Parameter {
                name: "vocab_size",
                value: self.vocab_size as f64,
            });
        }
        if self.kernel_widths.is_empty() || self.kernel_widths.contains(&0) {
            return Err(Error::Parameter {
                name: "kernel_widths",
                value: 0.0,
            });
        }
        // The skip MLP has to stay much cheaper than the cell it gates.
        if self.skip_hidden >= self.hidden || self.skip_hidden >= self.embed_dim {
            return Err(Error::Parameter {
                name: "skip_hidden",
                value: self.skip_hidden as f64,
            });
        }
        Ok(())
    }
}
