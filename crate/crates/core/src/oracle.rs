//! Brute-force reference implementations.
//!
//! Each function evaluates a formula literally, without the indexing or
//! algebraic shortcuts of the production path it is checked against. They are
//! only meant for desk-scale inputs in tests.

use std::collections::BTreeMap;

use crate::cooccurrence::{check_decay, CooccurrenceMatrix};
use crate::data_model::{CodeId, DenseId, PatientHistory, TermId};
use crate::error::Result;
use crate::factorization::{DenseMatrix, FactorModel};

/// Literal triple sum over patients, `C_p(c)` and `C_p(s)`, with both sets
/// recovered by scanning the raw event sequences.
pub fn cooccurrence_oracle(histories: &[&PatientHistory], n: usize, m: usize, lambda: f64) -> Result<CooccurrenceMatrix> {
    check_decay("lambda", lambda)?;
    let mut entries = BTreeMap::new();
    for c in 0..n {
        for s in 0..m {
            let mut total = 0.0;
            for h in histories {
                let with_code: Vec<usize> = h
                    .encounters()
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.codes.contains(&CodeId(c as u32)))
                    .map(|(i, _)| i)
                    .collect();
                let matched_to_term: Vec<usize> = h
                    .searches()
                    .iter()
                    .filter(|x| x.term == TermId(s as u32))
                    .filter_map(|x| {
                        h.encounters()
                            .iter()
                            .enumerate()
                            .filter(|(_, e)| e.time <= x.time)
                            .map(|(i, _)| i)
                            .last()
                    })
                    .collect();
                for &ec in &with_code {
                    for &es in &matched_to_term {
                        if es >= ec {
                            total += lambda.powi((es - ec) as i32);
                        }
                    }
                }
            }
            if total != 0.0 {
                entries.insert((c as u32, s as u32), total);
            }
        }
    }
    CooccurrenceMatrix::from_entries(n, m, lambda, &entries)
}

/// Objective with `U Vᵀ` materialized entry by entry.
pub fn dense_objective(a: &[Vec<f64>], u: &DenseMatrix, v: &DenseMatrix, gamma: f64) -> f64 {
    let mut loss = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, &aij) in row.iter().enumerate() {
            let mut uv = 0.0;
            for k in 0..u.cols() {
                uv += u.get(i, k) * v.get(j, k);
            }
            loss += (aij - uv) * (aij - uv);
        }
    }
    let reg: f64 = u.as_slice().iter().chain(v.as_slice()).map(|x| x * x).sum();
    loss + 0.5 * gamma * reg
}

/// `x_ps` for every term: mean of the most recent `min(ms, len)` prefix
/// vectors, dotted with each term vector one coordinate at a time.
pub fn x_scores(model: &FactorModel, prefix: &[TermId], ms: Option<usize>) -> Vec<f64> {
    let k = ms.map_or(prefix.len(), |w| w.min(prefix.len()));
    let d = model.dim();
    let mut mean = vec![0.0; d];
    if k > 0 {
        for t in &prefix[prefix.len() - k..] {
            for j in 0..d {
                mean[j] += model.v.get(t.index(), j);
            }
        }
        for x in &mut mean {
            *x /= k as f64;
        }
    }
    (0..model.n_terms())
        .map(|s| (0..d).map(|j| mean[j] * model.v.get(s, j)).sum())
        .collect()
}

/// `y_ps` as the literal double sum over window encounters and their codes,
/// with each softmax weight computed directly from `exp` (no max shift).
pub fn y_scores(model: &FactorModel, prefix: &[TermId], window: &[Vec<CodeId>], ms: Option<usize>) -> Vec<f64> {
    let k = ms.map_or(prefix.len(), |w| w.min(prefix.len()));
    let d = model.dim();
    let mut mean = vec![0.0; d];
    if k > 0 {
        for t in &prefix[prefix.len() - k..] {
            for j in 0..d {
                mean[j] += model.v.get(t.index(), j) / k as f64;
            }
        }
    }
    let logit = |c: CodeId| (0..d).map(|j| model.u.get(c.index(), j) * mean[j]).sum::<f64>();
    let mut denom = 0.0;
    for e in window {
        for &c in e {
            denom += logit(c).exp();
        }
    }
    (0..model.n_terms())
        .map(|s| {
            let mut total = 0.0;
            for e in window {
                for &c in e {
                    let w = logit(c).exp() / denom;
                    let uv: f64 = (0..d).map(|j| model.u.get(c.index(), j) * model.v.get(s, j)).sum();
                    total += w * uv;
                }
            }
            total
        })
        .collect()
}

/// CoPM score as a literal double loop over all visible encounters and
/// their codes, per term.
pub fn copm_scores(model: &FactorModel, encounters: &[Vec<CodeId>], matched: usize, sigma: f64) -> Vec<f64> {
    (0..model.n_terms())
        .map(|s| {
            let mut total = 0.0;
            for (i, e) in encounters.iter().enumerate().take(matched + 1) {
                for &c in e {
                    let uv: f64 = (0..model.dim()).map(|j| model.u.get(c.index(), j) * model.v.get(s, j)).sum();
                    total += sigma.powi((matched - i) as i32) * uv;
                }
            }
            total
        })
        .collect()
}

/// Term ids sorted by descending score with ascending-id tie-break, via a
/// full comparison sort.
pub fn ranking(scores: &[f64]) -> Vec<TermId> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    ids.into_iter().map(TermId::from_index).collect()
}
