//! Relevance scoring between queries and support items, precomputed relevance
//! matrices, and top-K / K′ support selection.

mod matrix;
mod select;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{CaptionInstance, VqaInstance};

pub use matrix::{precompute_matrix, RelevanceContext, RelevanceMatrix, RelevanceSidecar};
pub use select::{retrieve, sample_k_prime, top_k};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    /// Uniform: always 1.
    R0,
    /// Number of distinct words shared by the query question and the support text.
    R1,
    /// 1 when the support text contains a word of one of the baseline's top-5 answers.
    R2,
    /// Cosine similarity of region-summed features, mapped to `[0, 1]`.
    R3,
}

impl std::str::FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "r0" => Ok(Factor::R0),
            "r1" => Ok(Factor::R1),
            "r2" => Ok(Factor::R2),
            "r3" => Ok(Factor::R3),
            other => Err(Error::Config(format!("unknown relevance factor `{other}`"))),
        }
    }
}

impl std::fmt::Display for Factor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Factor::R0 => "r0",
            Factor::R1 => "r1",
            Factor::R2 => "r2",
            Factor::R3 => "r3",
        };
        f.write_str(s)
    }
}

/// Parses `"r1,r2,r3"` or `"r1r2r3"`.
pub fn parse_factors(s: &str) -> Result<Vec<Factor>> {
    let compact: String = s.chars().filter(|c| !c.is_whitespace() && *c != ',' && *c != '*').collect();
    let mut out = Vec::new();
    let mut rest = compact.as_str();
    while !rest.is_empty() {
        if rest.len() < 2 {
            return Err(Error::Config(format!("bad factor list `{s}`")));
        }
        out.push(rest[..2].parse()?);
        rest = &rest[2..];
    }
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelevanceConfig {
    pub factors: Vec<Factor>,
    /// Size of the top-scoring pool.
    pub k: usize,
    /// Items sampled from the pool at each adaptation step.
    pub k_prime: usize,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig {
            factors: vec![Factor::R1, Factor::R2, Factor::R3],
            k: 10,
            k_prime: 8,
        }
    }
}

impl RelevanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::Config("relevance factors must be non-empty".into()));
        }
        if self.k_prime == 0 || self.k < self.k_prime {
            return Err(Error::Config(format!(
                "need K >= K' >= 1, got K={} K'={}",
                self.k, self.k_prime
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SupportItem {
    Qa(VqaInstance),
    Caption(CaptionInstance),
}

impl SupportItem {
    pub fn features(&self) -> &Tensor {
        match self {
            SupportItem::Qa(q) => &q.features,
            SupportItem::Caption(c) => &c.features,
        }
    }
}

/// One retrievable item with its image id and the token ids of its text.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportEntry {
    pub item: SupportItem,
    pub image_id: u64,
    /// Question plus ground-truth answer words for QA items; the caption for captions.
    pub text: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SupportSet {
    pub entries: Vec<SupportEntry>,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.image_id)
    }

    /// Availability flags: `base` (all available when `None`) minus items whose
    /// image id is in `excluded`.
    pub fn allowed(
        &self,
        base: Option<&[bool]>,
        excluded: &std::collections::HashSet<u64>,
    ) -> Vec<bool> {
        self.entries
            .iter()
            .enumerate()
            .map(|(j, e)| base.is_none_or(|b| b[j]) && !excluded.contains(&e.image_id))
            .collect()
    }
}

pub fn r0() -> f64 {
    1.0
}

fn sorted_set(tokens: &[usize]) -> Vec<usize> {
    let mut s = tokens.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

fn shared_count(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Count of distinct token types present in both sequences.
pub fn r1(q: &[usize], q_support: &[usize]) -> usize {
    shared_count(&sorted_set(q), &sorted_set(q_support))
}

/// 1 iff any support token equals any token of the given answer token lists.
pub fn r2(top_answer_tokens: &[Vec<usize>], q_support: &[usize]) -> f64 {
    let answers = sorted_set(&top_answer_tokens.concat());
    if shared_count(&answers, &sorted_set(q_support)) > 0 {
        1.0
    } else {
        0.0
    }
}

/// Column-wise sum of a `[regions, dim]` feature map, L2-normalized (zero stays zero).
pub fn pooled_direction(features: &Tensor) -> Vec<f64> {
    let f = features.cols();
    let mut sum = vec![0.0; f];
    for r in 0..features.rows() {
        for (s, &x) in sum.iter_mut().zip(features.row(r)) {
            *s += x;
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        sum.iter_mut().for_each(|x| *x /= norm);
    }
    sum
}

/// Cosine similarity of the region-summed features; 0 when either sum is zero.
pub fn r3(v: &Tensor, v_support: &Tensor) -> f64 {
    let a = pooled_direction(v);
    let b = pooled_direction(v_support);
    a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}
