use std::collections::BTreeMap;

use super::weights::{names, AttentionMode, ModelConfig, ModelWeights};
use crate::diffcore::{backward, Graph, GradientMap, NodeId, Tensor};
use crate::error::{Error, Result};

/// A question with its image features and ground-truth answer scores.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaInstance {
    pub question: Vec<usize>,
    /// `[num_regions, feature_dim]`
    pub features: Tensor,
    pub answer_scores: Vec<f64>,
}

/// A caption paired with the features of the image it describes.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionInstance {
    pub caption: Vec<usize>,
    pub features: Tensor,
}

/// Node ids of every model parameter bound into a graph.
pub struct ParamIds(BTreeMap<String, NodeId>);

impl ParamIds {
    pub fn bind(graph: &mut Graph, weights: &ModelWeights) -> Self {
        ParamIds(
            weights
                .iter()
                .map(|(name, t)| (name.to_string(), graph.param(name, t.clone())))
                .collect(),
        )
    }

    fn get(&self, name: &str) -> Result<NodeId> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }
}

fn gated_node(g: &mut Graph, ids: &ParamIds, prefix: &str, x: NodeId) -> Result<NodeId> {
    let a = g.affine(x, ids.get(&format!("{prefix}.w1"))?, ids.get(&format!("{prefix}.b1"))?)?;
    let t = g.tanh(a)?;
    let b = g.affine(x, ids.get(&format!("{prefix}.w2"))?, ids.get(&format!("{prefix}.b2"))?)?;
    let s = g.sigmoid(b)?;
    g.mul(t, s)
}

fn stack_features<'a>(
    config: &ModelConfig,
    features: impl Iterator<Item = &'a Tensor>,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for f in features {
        if f.shape() != [config.num_regions, config.feature_dim] {
            return Err(Error::Config(format!(
                "features have shape {:?}, expected [{}, {}]",
                f.shape(),
                config.num_regions,
                config.feature_dim
            )));
        }
        data.extend_from_slice(f.data());
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    Tensor::matrix(n * config.num_regions, config.feature_dim, data)
}

/// Builds the two-tower trunk and returns `(fused, regions_node)` where
/// `fused = q_emb ⊙ v_emb` has shape `[n, hidden_dim]`.
fn build_trunk(
    g: &mut Graph,
    ids: &ParamIds,
    config: &ModelConfig,
    bags: Vec<Vec<usize>>,
    regions: Tensor,
) -> Result<NodeId> {
    let regions = g.input(regions);
    let q_vec = g.embedding_mean(ids.get(names::EMBEDDINGS)?, bags)?;
    let q_emb = gated_node(g, ids, names::QUESTION, q_vec)?;
    let pooled = match config.attention_mode {
        AttentionMode::Uniform => g.group_mean(regions, config.num_regions)?,
        AttentionMode::Full => {
            let weights = build_attention(g, ids, config, q_vec, regions)?;
            g.weighted_group_sum(weights, regions)?
        }
    };
    let v_emb = gated_node(g, ids, names::VISUAL, pooled)?;
    g.mul(q_emb, v_emb)
}

/// Attention weights `[n, num_regions]` for question vectors `[n, word_dim]`.
fn build_attention(
    g: &mut Graph,
    ids: &ParamIds,
    config: &ModelConfig,
    q_vec: NodeId,
    regions: NodeId,
) -> Result<NodeId> {
    let r = config.num_regions;
    let qp = g.affine(
        q_vec,
        ids.get(&format!("{}.w", names::ATT_QUESTION))?,
        ids.get(&format!("{}.b", names::ATT_QUESTION))?,
    )?;
    let qp = g.repeat_rows(qp, r)?;
    let rp = g.affine(
        regions,
        ids.get(&format!("{}.w", names::ATT_REGION))?,
        ids.get(&format!("{}.b", names::ATT_REGION))?,
    )?;
    let joint = g.mul(qp, rp)?;
    let gated = gated_node(g, ids, names::ATT_GATE, joint)?;
    let score = g.affine(
        gated,
        ids.get(&format!("{}.w", names::ATT_SCORE))?,
        ids.get(&format!("{}.b", names::ATT_SCORE))?,
    )?;
    let n = g.value(score).rows() / r;
    let score = g.reshape(score, &[n, r])?;
    g.softmax_rows(score)
}

fn build_scores(
    g: &mut Graph,
    ids: &ParamIds,
    config: &ModelConfig,
    bags: Vec<Vec<usize>>,
    regions: Tensor,
) -> Result<NodeId> {
    let fused = build_trunk(g, ids, config, bags, regions)?;
    let out = gated_node(g, ids, names::OUTPUT, fused)?;
    let logits = g.affine(
        out,
        ids.get(&format!("{}.w", names::CLASSIFIER))?,
        ids.get(&format!("{}.b", names::CLASSIFIER))?,
    )?;
    g.sigmoid(logits)
}

/// Graph whose output is the mean BCE of the batch against its ground truth.
pub fn vqa_loss_graph(weights: &ModelWeights, batch: &[&VqaInstance]) -> Result<Graph> {
    let config = weights.config();
    let mut target = Vec::with_capacity(batch.len() * config.num_answers);
    for inst in batch {
        if inst.answer_scores.len() != config.num_answers {
            return Err(Error::LengthMismatch(inst.answer_scores.len(), config.num_answers));
        }
        target.extend_from_slice(&inst.answer_scores);
    }
    let mut g = Graph::new();
    let ids = ParamIds::bind(&mut g, weights);
    let bags = batch.iter().map(|i| i.question.clone()).collect();
    let regions = stack_features(config, batch.iter().map(|i| &i.features))?;
    let scores = build_scores(&mut g, &ids, config, bags, regions)?;
    g.bce(scores, Tensor::matrix(batch.len(), config.num_answers, target)?)?;
    Ok(g)
}

/// Graph whose output is the mean over captions of `‖h‖²`.
pub fn compat_loss_graph(weights: &ModelWeights, batch: &[&CaptionInstance]) -> Result<Graph> {
    let config = weights.config();
    let mut g = Graph::new();
    let ids = ParamIds::bind(&mut g, weights);
    let bags = batch.iter().map(|c| c.caption.clone()).collect();
    let regions = stack_features(config, batch.iter().map(|c| &c.features))?;
    let fused = build_trunk(&mut g, &ids, config, bags, regions)?;
    let sq = g.sum_squares(fused)?;
    g.scale(sq, 1.0 / batch.len() as f64)?;
    Ok(g)
}

/// Output value and gradients for every model weight of a loss graph.
pub fn loss_and_gradients(weights: &ModelWeights, graph: &Graph) -> Result<(f64, GradientMap)> {
    let out = graph
        .output()
        .ok_or_else(|| Error::Config("empty graph".into()))?;
    let loss = graph.value(out).item();
    let grads = backward(graph, weights.names())?;
    Ok((loss, grads))
}

/// Predicted scores `[n, num_answers]` for a batch.
pub fn forward_vqa_batch(weights: &ModelWeights, batch: &[&VqaInstance]) -> Result<Tensor> {
    let config = weights.config();
    let mut g = Graph::new();
    let ids = ParamIds::bind(&mut g, weights);
    let bags = batch.iter().map(|i| i.question.clone()).collect();
    let regions = stack_features(config, batch.iter().map(|i| &i.features))?;
    let scores = build_scores(&mut g, &ids, config, bags, regions)?;
    Ok(g.value(scores).clone())
}

pub fn forward_vqa(weights: &ModelWeights, instance: &VqaInstance) -> Result<Vec<f64>> {
    Ok(forward_vqa_batch(weights, &[instance])?.into_data())
}

/// Fused caption/image embedding `h` of length `hidden_dim`.
pub fn forward_compat(weights: &ModelWeights, caption: &CaptionInstance) -> Result<Vec<f64>> {
    let config = weights.config();
    let mut g = Graph::new();
    let ids = ParamIds::bind(&mut g, weights);
    let regions = stack_features(config, std::iter::once(&caption.features))?;
    let h = build_trunk(&mut g, &ids, config, vec![caption.caption.clone()], regions)?;
    Ok(g.value(h).data().to_vec())
}

/// Mean of the word embedding rows of `tokens`.
pub fn encode_question(weights: &ModelWeights, tokens: &[usize]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let mut g = Graph::new();
    let table = g.input(weights.get(names::EMBEDDINGS)?.clone());
    let out = g.embedding_mean(table, vec![tokens.to_vec()])?;
    Ok(g.value(out).data().to_vec())
}

/// Borrowed affine pair of a gated tanh unit.
pub struct GatedPair<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

impl<'a> GatedPair<'a> {
    pub fn from_weights(weights: &'a ModelWeights, prefix: &str) -> Result<Self> {
        Ok(GatedPair {
            w1: weights.get(&format!("{prefix}.w1"))?,
            b1: weights.get(&format!("{prefix}.b1"))?,
            w2: weights.get(&format!("{prefix}.w2"))?,
            b2: weights.get(&format!("{prefix}.b2"))?,
        })
    }
}

/// `tanh(x W1 + b1) ⊙ sigmoid(x W2 + b2)`.
pub fn gated_tanh(pair: &GatedPair<'_>, x: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xn = g.input(Tensor::matrix(1, x.len(), x.to_vec())?);
    let ids = [pair.w1, pair.b1, pair.w2, pair.b2].map(|t| g.input(t.clone()));
    let a = g.affine(xn, ids[0], ids[1])?;
    let t = g.tanh(a)?;
    let b = g.affine(xn, ids[2], ids[3])?;
    let s = g.sigmoid(b)?;
    let out = g.mul(t, s)?;
    Ok(g.value(out).data().to_vec())
}

/// Attention weights over regions for one question vector.
pub fn attention_weights(
    weights: &ModelWeights,
    q_vec: &[f64],
    features: &Tensor,
) -> Result<Vec<f64>> {
    let config = weights.config();
    if config.attention_mode == AttentionMode::Uniform {
        return Err(Error::UniformAttention);
    }
    let mut g = Graph::new();
    let ids = ParamIds::bind(&mut g, weights);
    let regions = stack_features(config, std::iter::once(features))?;
    let regions = g.input(regions);
    let q = g.input(Tensor::matrix(1, q_vec.len(), q_vec.to_vec())?);
    let w = build_attention(&mut g, &ids, config, q, regions)?;
    Ok(g.value(w).data().to_vec())
}

/// Attention-weighted sum of the feature rows, length `feature_dim`.
pub fn attend(weights: &ModelWeights, q_vec: &[f64], features: &Tensor) -> Result<Vec<f64>> {
    let alpha = attention_weights(weights, q_vec, features)?;
    let f = features.cols();
    let mut out = vec![0.0; f];
    for (r, a) in alpha.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(features.row(r)) {
            *o += a * x;
        }
    }
    Ok(out)
}

/// Index of the largest score; ties go to the lowest index.
pub fn predict_answer(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
