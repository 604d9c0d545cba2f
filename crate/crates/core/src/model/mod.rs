//! The maskable Transformer encoder.

mod config;
mod encoder;
mod masks;

pub use config::ModelConfig;
pub use encoder::{
    BatchShape, BlockVars, BlockWeights, EncoderOutput, EncoderVars, MaskableEncoder, Trainable,
};
pub(crate) use encoder::mean_pool_matrix;
pub use masks::{MaskValues, MaskVars};

use crate::autodiff::Graph;
use crate::error::Result;
use crate::tensor::Tensor;

/// Logits and post-FFN hidden states of a tape-free masked forward.
#[derive(Debug, Clone)]
pub struct ForwardValues {
    pub logits: Tensor,
    pub hidden_states: Vec<Tensor>,
}

impl MaskableEncoder {
    /// Masked forward with everything held constant.
    pub fn forward_values(&self, masks: &MaskValues, tokens: &[Vec<usize>]) -> Result<ForwardValues> {
        masks.validate(&self.config)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Trainable::NONE);
        let mv = masks.to_graph(&mut g, false);
        let out = self.forward(&mut g, &vars, &mv, tokens)?;
        Ok(ForwardValues {
            logits: g.value(out.logits).clone(),
            hidden_states: out
                .hidden_states
                .iter()
                .map(|&h| g.value(h).clone())
                .collect(),
        })
    }

    pub fn logits(&self, masks: &MaskValues, tokens: &[Vec<usize>]) -> Result<Tensor> {
        Ok(self.forward_values(masks, tokens)?.logits)
    }
}
