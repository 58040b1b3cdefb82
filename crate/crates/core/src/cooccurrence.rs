//! Time-decayed ICD code / search term co-occurrence.
//!
//! `a_cs = Σ_p Σ_{e_c ∈ C_p(c)} Σ_{e_s ∈ C_p(s)} λ^(i(e_s) − i(e_c)) · [i(e_s) ≥ i(e_c)]`
//!
//! The builder walks each patient's encounters once, carrying a decayed code
//! vector `D_j(c) = λ·D_{j−1}(c) + [c ∈ e_j]`; every search matched to `e_j`
//! then adds `D_j` into its term column. Patients are processed in parallel
//! and merged in patient order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use crate::data_model::{CodeId, DenseId, PatientHistory, TermId};
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Sparse `n × m` matrix in compressed-row form. Only positive weights are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceMatrix {
    n: usize,
    m: usize,
    lambda: f64,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

pub(crate) fn check_decay(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {value}")))
    }
}

impl CooccurrenceMatrix {
    /// Builds from `(code, term) -> weight`; zero weights are dropped.
    pub fn from_entries(n: usize, m: usize, lambda: f64, entries: &BTreeMap<(u32, u32), f64>) -> Result<Self> {
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut vals = Vec::with_capacity(entries.len());
        for (&(c, s), &w) in entries {
            if c as usize >= n || s as usize >= m {
                return Err(Error::Shape(format!("entry ({c}, {s}) outside {n}x{m}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::format("co-occurrence weight", format!("({c}, {s}) = {w}")));
            }
            if w == 0.0 {
                continue;
            }
            row_ptr[c as usize + 1] += 1;
            cols.push(s);
            vals.push(w);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(CooccurrenceMatrix {
            n,
            m,
            lambda,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Column indices and weights of row `c`.
    pub fn row(&self, c: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[c]..self.row_ptr[c + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn get(&self, c: CodeId, s: TermId) -> f64 {
        if c.index() >= self.n {
            return 0.0;
        }
        let (cols, vals) = self.row(c.index());
        cols.binary_search(&s.0).map_or(0.0, |k| vals[k])
    }

    /// `(code, term, weight)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (CodeId, TermId, f64)> + '_ {
        (0..self.n).flat_map(move |c| {
            let (cols, vals) = self.row(c);
            cols.iter()
                .zip(vals)
                .map(move |(&s, &w)| (CodeId(c as u32), TermId(s), w))
        })
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.vals.iter().map(|w| w * w).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.m]; self.n];
        for (c, s, w) in self.iter() {
            out[c.index()][s.index()] = w;
        }
        out
    }

    /// Writes sorted `code_id term_id weight` triples after a header line.
    pub fn dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# cooccurrence n={} m={} lambda={:?} nnz={}", self.n, self.m, self.lambda, self.nnz())?;
        for (c, s, w) in self.iter() {
            writeln!(out, "{} {} {:?}", c.0, s.0, w)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("matrix dump", "missing header"))?
            .map_err(|e| Error::io("<matrix dump>", e))?;
        let mut n = None;
        let mut m = None;
        let mut lambda = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("n", v)) => n = v.parse::<usize>().ok(),
                Some(("m", v)) => m = v.parse::<usize>().ok(),
                Some(("lambda", v)) => lambda = v.parse::<f64>().ok(),
                _ => {}
            }
        }
        let (n, m, lambda) = match (n, m, lambda) {
            (Some(n), Some(m), Some(l)) => (n, m, l),
            _ => return Err(Error::format("matrix dump", format!("bad header {header:?}"))),
        };
        let mut entries = BTreeMap::new();
        for line in lines {
            let line = line.map_err(|e| Error::io("<matrix dump>", e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let parsed = (|| {
                let c = it.next()?.parse::<u32>().ok()?;
                let s = it.next()?.parse::<u32>().ok()?;
                let w = it.next()?.parse::<f64>().ok()?;
                Some(((c, s), w))
            })();
            let (key, w) = parsed.ok_or_else(|| Error::format("matrix dump", format!("bad line {line:?}")))?;
            entries.insert(key, w);
        }
        CooccurrenceMatrix::from_entries(n, m, lambda, &entries)
    }
}

fn patient_contribution(history: &PatientHistory, lambda: f64) -> BTreeMap<(u32, u32), f64> {
    let mut out: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let searches = history.searches();
    let mut next_search = searches.partition_point(|s| s.matched_encounter.is_none());
    let mut decayed: BTreeMap<CodeId, f64> = BTreeMap::new();
    for (j, enc) in history.encounters().iter().enumerate() {
        for w in decayed.values_mut() {
            *w *= lambda;
        }
        for &c in &enc.codes {
            *decayed.entry(c).or_insert(0.0) += 1.0;
        }
        while next_search < searches.len() && searches[next_search].matched_encounter == Some(j) {
            let s = searches[next_search].term.0;
            for (c, &w) in &decayed {
                if w > 0.0 {
                    *out.entry((c.0, s)).or_insert(0.0) += w;
                }
            }
            next_search += 1;
        }
    }
    out
}

/// Builds `A` over `n` codes and `m` terms from (training) histories.
/// Searches without a matched encounter contribute nothing.
pub fn build_cooccurrence(histories: &[&PatientHistory], n: usize, m: usize, lambda: f64) -> Result<CooccurrenceMatrix> {
    check_decay("lambda", lambda)?;
    let partials = par::map(histories, |h| patient_contribution(h, lambda));
    let mut total: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for part in partials {
        for (k, w) in part {
            *total.entry(k).or_insert(0.0) += w;
        }
    }
    CooccurrenceMatrix::from_entries(n, m, lambda, &total)
}
