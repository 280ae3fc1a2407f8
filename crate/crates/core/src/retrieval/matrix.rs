use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pooled_direction, shared_count, sorted_set, Factor, RelevanceConfig, SupportSet};
use crate::error::{Error, Result};
use crate::model::{forward_vqa_batch, ModelWeights, VqaInstance};

pub const MAGIC: &[u8; 4] = b"RELM";
pub const VERSION: u8 = 1;

/// Query-by-support relevance scores, row-major, stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMatrix {
    queries: usize,
    support: usize,
    scores: Vec<f32>,
}

/// Provenance written next to a matrix file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceSidecar {
    pub factors: Vec<Factor>,
    /// SHA-256 of the baseline checkpoint file used for r2, if any.
    pub baseline_checkpoint_sha256: Option<String>,
}

/// What r2 needs: the frozen baseline weights and the word ids of every answer.
pub struct RelevanceContext<'a> {
    pub baseline: Option<&'a ModelWeights>,
    pub answer_tokens: &'a [Vec<usize>],
}

impl RelevanceMatrix {
    pub fn new(queries: usize, support: usize, scores: Vec<f32>) -> Result<Self> {
        if scores.len() != queries * support {
            return Err(Error::LengthMismatch(scores.len(), queries * support));
        }
        Ok(RelevanceMatrix {
            queries,
            support,
            scores,
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn support(&self) -> usize {
        self.support
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.scores[i * self.support + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.scores[i * self.support..(i + 1) * self.support]
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 4 * self.scores.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.queries as u32).to_le_bytes());
        out.extend_from_slice(&(self.support as u32).to_le_bytes());
        for s in &self.scores {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "missing RELM magic"));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
        }
        let q = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let s = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
        let body = &bytes[13..];
        if body.len() != 4 * q * s {
            return Err(Error::format(path, "payload length does not match header"));
        }
        let scores = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(q, s, scores)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta.json");
        PathBuf::from(p)
    }

    pub fn write(&self, path: &Path, sidecar: &RelevanceSidecar) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let meta = Self::sidecar_path(path);
        let text = serde_json::to_string_pretty(sidecar)?;
        std::fs::write(&meta, text).map_err(|e| Error::io(meta, e))
    }

    pub fn read(path: &Path) -> Result<(Self, RelevanceSidecar)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m = Self::from_bytes(&bytes, path)?;
        let meta = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&meta, e.to_string()))?;
        Ok((m, sidecar))
    }
}

/// Indices of the five highest baseline scores; ties go to the lower index.
fn top5(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(5);
    idx
}

/// Scores every (query, support) pair as the product of the configured
/// factors. r3 enters the product as `(cos + 1) / 2`.
pub fn precompute_matrix(
    queries: &[VqaInstance],
    support: &SupportSet,
    config: &RelevanceConfig,
    ctx: &RelevanceContext<'_>,
) -> Result<RelevanceMatrix> {
    config.validate()?;
    if queries.is_empty() || support.is_empty() {
        return Err(Error::Config("relevance needs non-empty query and support sets".into()));
    }
    let uses = |f: Factor| config.factors.contains(&f);

    let query_tokens: Vec<Vec<usize>> = queries.iter().map(|q| sorted_set(&q.question)).collect();
    let support_tokens: Vec<Vec<usize>> = support.entries.iter().map(|e| sorted_set(&e.text)).collect();

    let query_answers: Vec<Vec<usize>> = if uses(Factor::R2) {
        let baseline = ctx
            .baseline
            .ok_or_else(|| Error::Config("r2 needs baseline weights".into()))?;
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(256) {
            let refs: Vec<&VqaInstance> = chunk.iter().collect();
            let scores = forward_vqa_batch(baseline, &refs)?;
            for r in 0..scores.rows() {
                let words: Vec<usize> = top5(scores.row(r))
                    .into_iter()
                    .filter_map(|a| ctx.answer_tokens.get(a))
                    .flatten()
                    .copied()
                    .collect();
                out.push(sorted_set(&words));
            }
        }
        out
    } else {
        Vec::new()
    };

    let (query_dirs, support_dirs) = if uses(Factor::R3) {
        (
            queries.iter().map(|q| pooled_direction(&q.features)).collect(),
            support.entries.iter().map(|e| pooled_direction(e.item.features())).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };

    let s = support.len();
    let mut scores = vec![0f32; queries.len() * s];
    scores.par_chunks_mut(s).enumerate().for_each(|(i, row)| {
        for (j, out) in row.iter_mut().enumerate() {
            let mut r = 1.0f64;
            for &f in &config.factors {
                r *= match f {
                    Factor::R0 => 1.0,
                    Factor::R1 => shared_count(&query_tokens[i], &support_tokens[j]) as f64,
                    Factor::R2 => {
                        if shared_count(&query_answers[i], &support_tokens[j]) > 0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Factor::R3 => {
                        let cos: f64 = query_dirs[i]
                            .iter()
                            .zip(&support_dirs[j])
                            .map(|(a, b)| a * b)
                            .sum();
                        (cos.clamp(-1.0, 1.0) + 1.0) / 2.0
                    }
                };
            }
            *out = r as f32;
        }
    });
    RelevanceMatrix::new(queries.len(), s, scores)
}
