//! The word-skipping LSTM classifier.

mod config;
mod infer;
mod params;
mod soft;

pub use config::{FeatureFlags, LeapConfig};
pub use infer::{
    classify, conv_features, embed, follow_features, forward_infer, forward_plain, lstm_step,
    lstm_step_into, reverse_encode, skip_distribution, Decision, DecisionRule, Inference,
    LstmScratch, SkipTrace,
};
pub use params::{ConvParams, LeapParams, LstmParams, INIT_RANGE};
pub use soft::{forward_train, lstm_step_tape, ParamVars, SkipControl, SoftForward};

use crate::error::Result;

/// Configuration plus parameters, with `skipping` selecting between the
/// skip-enabled model and the plain LSTM that reads every word.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LeapModel {
    pub config: LeapConfig,
    pub params: LeapParams,
    pub skipping: bool,
}

impl LeapModel {
    pub fn new(config: LeapConfig, params: LeapParams, skipping: bool) -> Result<Self> {
        params.validate(&config)?;
        Ok(LeapModel {
            config,
            params,
            skipping,
        })
    }

    /// Reads a document with argmax decisions (or every word when skipping
    /// is off).
    pub fn infer(&self, tokens: &[u32]) -> Result<Inference> {
        self.infer_with(tokens, DecisionRule::Argmax)
    }

    pub fn infer_with(&self, tokens: &[u32], rule: DecisionRule<'_>) -> Result<Inference> {
        if self.skipping {
            forward_infer(&self.config, &self.params, tokens, rule)
        } else {
            forward_plain(&self.config, &self.params, tokens)
        }
    }
}
