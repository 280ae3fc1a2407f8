//! Joint-embedding question-answering model and its caption-compatibility sibling.
//!
//! Questions are a bag of words (mean of embeddings) passed through a gated
//! tanh unit. Image regions are either mean-pooled or attended with a
//! question-guided softmax, then passed through their own gated tanh unit.
//! The two embeddings are fused by a Hadamard product. The QA head applies a
//! further gated tanh unit, an affine classifier and a sigmoid. The caption
//! path stops at the fused vector.

pub mod checkpoint;
mod forward;
mod weights;

pub use forward::{
    attend, attention_weights, compat_loss_graph, encode_question, forward_compat, forward_vqa,
    forward_vqa_batch, gated_tanh, loss_and_gradients, predict_answer, vqa_loss_graph,
    CaptionInstance, GatedPair, ParamIds, VqaInstance,
};
pub use weights::{names, AttentionMode, ModelConfig, ModelWeights};
