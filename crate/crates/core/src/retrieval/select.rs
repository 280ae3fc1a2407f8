use rand::seq::index::sample;
use rand::Rng;

use super::{RelevanceConfig, RelevanceMatrix};
use crate::error::{Error, Result};

/// The `k` highest-scoring allowed columns of row `query`, ordered by
/// descending score with ties broken by lower index. Fewer than `k` allowed
/// columns yields all of them.
pub fn top_k(
    query: usize,
    matrix: &RelevanceMatrix,
    k: usize,
    allowed: Option<&[bool]>,
) -> Result<Vec<usize>> {
    if query >= matrix.queries() {
        return Err(Error::Config(format!(
            "query {query} outside a matrix of {} rows",
            matrix.queries()
        )));
    }
    if let Some(a) = allowed {
        if a.len() != matrix.support() {
            return Err(Error::LengthMismatch(a.len(), matrix.support()));
        }
    }
    let row = matrix.row(query);
    let mut candidates: Vec<usize> = (0..row.len())
        .filter(|&j| allowed.is_none_or(|a| a[j]))
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptySupport);
    }
    let order = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if candidates.len() > k && k > 0 {
        candidates.select_nth_unstable_by(k - 1, order);
        candidates.truncate(k);
    }
    candidates.sort_by(order);
    Ok(candidates)
}

/// `k_prime` distinct members of `pool` drawn uniformly; the whole pool when it is smaller.
pub fn sample_k_prime<R: Rng + ?Sized>(pool: &[usize], k_prime: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() <= k_prime {
        return pool.to_vec();
    }
    sample(rng, pool.len(), k_prime)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Top-K by relevance, then K′ sampled uniformly without replacement.
pub fn retrieve<R: Rng + ?Sized>(
    query: usize,
    matrix: &RelevanceMatrix,
    config: &RelevanceConfig,
    rng: &mut R,
    allowed: Option<&[bool]>,
) -> Result<Vec<usize>> {
    let pool = top_k(query, matrix, config.k, allowed)?;
    Ok(sample_k_prime(&pool, config.k_prime, rng))
}
