//! Scoring and ranking of candidate search terms at one recommendation point.
//!
//! Every scorer produces one score per training-vocabulary term; rankings sort
//! by descending score and break ties by ascending term id.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cooccurrence::check_decay;
use crate::data_model::{CodeId, DenseId, PatientHistory, PatientId, TermId};
use crate::error::{Error, Result};
use crate::factorization::{dot, FactorModel};
use crate::sessionization::session_prefix;

pub const DEFAULT_SIGMA: f64 = 0.5;

/// What a scorer may look at when predicting one search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationPoint {
    pub patient: PatientId,
    /// 0-based position in `S_p` of the search being predicted.
    pub target_index: usize,
    /// Earlier searches of the target's session, oldest first.
    pub prefix: Vec<TermId>,
    /// Visible encounters `C_p(1, l_p)`, oldest first. The last one is the
    /// encounter the target search is matched to.
    pub encounters: Vec<Vec<CodeId>>,
    /// Searches on the patient visible at this point.
    pub n_p: usize,
}

impl RecommendationPoint {
    /// Point for search `target_index` of a sessionized history: the session
    /// prefix plus every encounter up to the target's matched encounter.
    /// The target term itself is not part of the point.
    pub fn from_history(history: &PatientHistory, target_index: usize) -> Result<Self> {
        let prefix = session_prefix(history, target_index)?;
        let target = &history.searches()[target_index];
        let visible = target.matched_encounter.map_or(0, |e| e + 1);
        Ok(RecommendationPoint {
            patient: history.patient().clone(),
            target_index,
            prefix: prefix.iter().map(|s| s.term).collect(),
            encounters: history.encounters()[..visible]
                .iter()
                .map(|e| e.codes.clone())
                .collect(),
            n_p: target_index,
        })
    }

    /// `l_p`.
    pub fn l_p(&self) -> usize {
        self.encounters.len()
    }

    /// Position of `e_s` within [`Self::encounters`].
    pub fn matched_encounter(&self) -> Option<usize> {
        self.encounters.len().checked_sub(1)
    }
}

/// Ranked candidate list over the whole training vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredList {
    entries: Vec<(TermId, f64)>,
}

// Adding 0.0 folds -0.0 into 0.0 so the two tie.
fn ranks_before(a: (usize, f64), b: (usize, f64)) -> std::cmp::Ordering {
    (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0))
}

impl ScoredList {
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut entries: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        entries.sort_by(|&a, &b| ranks_before(a, b));
        ScoredList {
            entries: entries.into_iter().map(|(i, s)| (TermId::from_index(i), s)).collect(),
        }
    }

    pub fn entries(&self) -> &[(TermId, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, n: usize) -> &[(TermId, f64)] {
        &self.entries[..n.min(self.entries.len())]
    }

    pub fn terms(&self) -> Vec<TermId> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    /// 1-based rank of `term`.
    pub fn rank_of(&self, term: TermId) -> Option<usize> {
        self.entries.iter().position(|(t, _)| *t == term).map(|p| p + 1)
    }
}

/// 1-based rank `term` would get in [`ScoredList::from_scores`], without sorting.
pub fn rank_in_scores(scores: &[f64], term: TermId) -> Option<usize> {
    let t = term.index();
    let own = *scores.get(t)?;
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| ranks_before((j, s), (t, own)).is_lt())
        .count();
    Some(ahead + 1)
}

/// `m_s`: how many of the most recent prefix terms to average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecentWindow {
    Last(usize),
    All,
}

impl RecentWindow {
    fn take(self, available: usize) -> usize {
        match self {
            RecentWindow::Last(k) => k.min(available),
            RecentWindow::All => available,
        }
    }
}

impl fmt::Display for RecentWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecentWindow::Last(k) => write!(f, "{k}"),
            RecentWindow::All => f.write_str("all"),
        }
    }
}

impl FromStr for RecentWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(RecentWindow::All),
            v => match v.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(RecentWindow::Last(k)),
                _ => Err(Error::InvalidParameter(format!("m_s must be >= 1 or \"all\", got {v:?}"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HcfmParams {
    pub ms: RecentWindow,
    pub mc: usize,
    pub alpha: f64,
}

impl HcfmParams {
    pub fn validate(&self) -> Result<()> {
        if self.ms == RecentWindow::Last(0) {
            return Err(Error::InvalidParameter("m_s must be >= 1".into()));
        }
        if self.mc == 0 {
            return Err(Error::InvalidParameter("m_c must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `m_p`: mean term vector of the `min(m_s, |prefix|)` most recent prefix
/// terms, or `None` when the prefix is empty.
pub fn aggregate_recent_terms(point: &RecommendationPoint, model: &FactorModel, ms: RecentWindow) -> Option<Vec<f64>> {
    let k = ms.take(point.prefix.len());
    if k == 0 {
        return None;
    }
    let mut mean = vec![0.0; model.dim()];
    for &t in &point.prefix[point.prefix.len() - k..] {
        for (m, v) in mean.iter_mut().zip(model.term_vector(t)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    Some(mean)
}

fn project_on_terms(model: &FactorModel, query: &[f64]) -> Vec<f64> {
    (0..model.n_terms())
        .map(|s| dot(query, model.term_vector(TermId::from_index(s))))
        .collect()
}

/// `x_ps = m_p · v_s`; all zeros for a cold (empty) prefix.
pub fn score_terms_x(point: &RecommendationPoint, model: &FactorModel, ms: RecentWindow) -> Vec<f64> {
    match aggregate_recent_terms(point, model, ms) {
        Some(mp) => project_on_terms(model, &mp),
        None => vec![0.0; model.n_terms()],
    }
}

/// Softmax over every code occurrence in `logits` (grouped by encounter),
/// computed with max subtraction.
pub fn softmax_occurrences(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let max = logits
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<Vec<f64>> = logits
        .iter()
        .map(|e| e.iter().map(|l| (l - max).exp()).collect())
        .collect();
    let total: f64 = exp.iter().flatten().sum();
    exp.into_iter()
        .map(|e| e.into_iter().map(|x| x / total).collect())
        .collect()
}

fn window(point: &RecommendationPoint, mc: usize) -> &[Vec<CodeId>] {
    let l = point.encounters.len();
    &point.encounters[l - mc.min(l)..]
}

/// `w_pc` for each code occurrence in the last `m_c` encounters, grouped by
/// encounter. Logits are `u_c · m_p`; a cold prefix gives `m_p = 0` and thus
/// uniform weights. Empty window → empty result.
pub fn encounter_weights(point: &RecommendationPoint, model: &FactorModel, ms: RecentWindow, mc: usize) -> Vec<Vec<f64>> {
    let win = window(point, mc);
    let mp = aggregate_recent_terms(point, model, ms).unwrap_or_else(|| vec![0.0; model.dim()]);
    let logits: Vec<Vec<f64>> = win
        .iter()
        .map(|e| e.iter().map(|&c| dot(model.code_vector(c), &mp)).collect())
        .collect();
    softmax_occurrences(&logits)
}

/// `y_ps = (Σ_{e,c} w_pc u_c) · v_s`; all zeros when the window is empty.
pub fn score_terms_y(point: &RecommendationPoint, model: &FactorModel, ms: RecentWindow, mc: usize) -> Vec<f64> {
    let win = window(point, mc);
    if win.iter().all(Vec::is_empty) {
        return vec![0.0; model.n_terms()];
    }
    let weights = encounter_weights(point, model, ms, mc);
    let mut query = vec![0.0; model.dim()];
    for (codes, ws) in win.iter().zip(&weights) {
        for (&c, &w) in codes.iter().zip(ws) {
            for (q, u) in query.iter_mut().zip(model.code_vector(c)) {
                *q += w * u;
            }
        }
    }
    project_on_terms(model, &query)
}

/// `r_ps = α x_ps + (1 − α) y_ps`.
pub fn hcfm_scores(point: &RecommendationPoint, model: &FactorModel, params: &HcfmParams) -> Vec<f64> {
    let x = score_terms_x(point, model, params.ms);
    let y = score_terms_y(point, model, params.ms, params.mc);
    x.iter()
        .zip(&y)
        .map(|(x, y)| params.alpha * x + (1.0 - params.alpha) * y)
        .collect()
}

pub fn hcfm_score(point: &RecommendationPoint, model: &FactorModel, params: &HcfmParams) -> ScoredList {
    ScoredList::from_scores(&hcfm_scores(point, model, params))
}

/// `r_ps = Σ_{e ≤ e_s} Σ_{c ∈ e} σ^(i(e_s) − i(e)) u_c · v_s`.
pub fn copm_scores(point: &RecommendationPoint, model: &FactorModel, sigma: f64) -> Result<Vec<f64>> {
    check_decay("sigma", sigma)?;
    let matched = point.matched_encounter().ok_or(Error::EmptyContext)?;
    let mut query = vec![0.0; model.dim()];
    let mut weight = 1.0;
    for codes in point.encounters[..=matched].iter().rev() {
        for &c in codes {
            for (q, u) in query.iter_mut().zip(model.code_vector(c)) {
                *q += weight * u;
            }
        }
        weight *= sigma;
    }
    Ok(project_on_terms(model, &query))
}

pub fn copm_score(point: &RecommendationPoint, model: &FactorModel, sigma: f64) -> Result<ScoredList> {
    copm_scores(point, model, sigma).map(|s| ScoredList::from_scores(&s))
}

/// Per-patient search counts over the training portion.
#[derive(Clone, Debug, Default)]
pub struct PtnModel {
    m: usize,
    counts: BTreeMap<PatientId, BTreeMap<TermId, f64>>,
}

impl PtnModel {
    pub fn fit(histories: &[&PatientHistory], m: usize) -> Self {
        let mut counts: BTreeMap<PatientId, BTreeMap<TermId, f64>> = BTreeMap::new();
        for h in histories {
            let entry = counts.entry(h.patient().clone()).or_default();
            for s in h.searches() {
                *entry.entry(s.term).or_default() += 1.0;
            }
        }
        PtnModel { m, counts }
    }

    pub fn scores(&self, point: &RecommendationPoint) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        if let Some(c) = self.counts.get(&point.patient) {
            for (t, &n) in c {
                out[t.index()] = n;
            }
        }
        out
    }
}

pub fn ptn_score(point: &RecommendationPoint, model: &PtnModel) -> ScoredList {
    ScoredList::from_scores(&model.scores(point))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TptcfParams {
    pub patient_threshold: f64,
    pub term_threshold: f64,
    pub alpha: f64,
}

impl TptcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("TptCF alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

type SparseVec = Vec<(usize, f64)>;

fn cosine(a: &SparseVec, na: f64, b: &SparseVec, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc / (na * nb)
}

fn norm(v: &SparseVec) -> f64 {
    v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt()
}

/// Similarity and transition statistics for the TptCF baseline.
///
/// Patient and term similarities are cosines over the patient × term search
/// count matrix; transitions are consecutive search pairs in each training
/// sequence.
#[derive(Clone, Debug)]
pub struct TptcfModel {
    m: usize,
    patient_index: HashMap<PatientId, usize>,
    patient_rows: Vec<SparseVec>,
    patient_norms: Vec<f64>,
    term_columns: Vec<SparseVec>,
    term_norms: Vec<f64>,
    /// Per patient: `(from, to) -> count`.
    transitions: Vec<BTreeMap<(usize, usize), f64>>,
    global: Vec<BTreeMap<usize, f64>>,
    global_row_sums: Vec<f64>,
}

impl TptcfModel {
    pub fn fit(histories: &[&PatientHistory], m: usize) -> Self {
        let mut patient_index = HashMap::new();
        let mut patient_rows = Vec::new();
        let mut term_columns: Vec<SparseVec> = vec![Vec::new(); m];
        let mut transitions = Vec::new();
        let mut global: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); m];
        for (p, h) in histories.iter().enumerate() {
            patient_index.insert(h.patient().clone(), p);
            let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
            for s in h.searches() {
                *counts.entry(s.term.index()).or_default() += 1.0;
            }
            for (&t, &c) in &counts {
                term_columns[t].push((p, c));
            }
            patient_rows.push(counts.into_iter().collect::<SparseVec>());
            let mut trans: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            for pair in h.searches().windows(2) {
                let (from, to) = (pair[0].term.index(), pair[1].term.index());
                *trans.entry((from, to)).or_default() += 1.0;
                *global[from].entry(to).or_default() += 1.0;
            }
            transitions.push(trans);
        }
        TptcfModel {
            m,
            patient_index,
            patient_norms: patient_rows.iter().map(norm).collect(),
            patient_rows,
            term_norms: term_columns.iter().map(norm).collect(),
            term_columns,
            transitions,
            global_row_sums: global.iter().map(|r| r.values().sum()).collect(),
            global,
        }
    }

    /// `P(t | t_j)`; zero rows give zero.
    pub fn transition_probability(&self, from: TermId, to: TermId) -> f64 {
        let f = from.index();
        if self.global_row_sums[f] == 0.0 {
            return 0.0;
        }
        self.global[f].get(&to.index()).copied().unwrap_or(0.0) / self.global_row_sums[f]
    }

    pub fn patient_similarity(&self, a: &PatientId, b: &PatientId) -> f64 {
        match (self.patient_index.get(a), self.patient_index.get(b)) {
            (Some(&i), Some(&j)) => cosine(
                &self.patient_rows[i],
                self.patient_norms[i],
                &self.patient_rows[j],
                self.patient_norms[j],
            ),
            _ => 0.0,
        }
    }

    pub fn term_similarity(&self, a: TermId, b: TermId) -> f64 {
        let (i, j) = (a.index(), b.index());
        cosine(&self.term_columns[i], self.term_norms[i], &self.term_columns[j], self.term_norms[j])
    }

    fn dyn_scores(&self, last: TermId) -> Vec<f64> {
        (0..self.m)
            .map(|t| self.transition_probability(last, TermId::from_index(t)))
            .collect()
    }

    fn cf_scores(&self, patient: &PatientId, last: TermId, params: &TptcfParams) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        let Some(&me) = self.patient_index.get(patient) else {
            return out;
        };
        let neighbours: Vec<(usize, f64)> = (0..self.patient_rows.len())
            .filter(|&q| q != me)
            .map(|q| {
                let sim = cosine(
                    &self.patient_rows[me],
                    self.patient_norms[me],
                    &self.patient_rows[q],
                    self.patient_norms[q],
                );
                (q, sim)
            })
            .filter(|&(_, sim)| sim >= params.patient_threshold)
            .collect();
        let sim_total: f64 = neighbours.iter().map(|(_, s)| s).sum();
        if neighbours.is_empty() || sim_total == 0.0 {
            return out;
        }
        let similar_terms: BTreeMap<usize, f64> = (0..self.m)
            .map(|t| (t, self.term_similarity(last, TermId::from_index(t))))
            .filter(|&(_, s)| s >= params.term_threshold)
            .collect();
        for (q, sim_p) in neighbours {
            let mut num: BTreeMap<usize, f64> = BTreeMap::new();
            let mut den: BTreeMap<usize, f64> = BTreeMap::new();
            for (&(from, to), &g) in &self.transitions[q] {
                if let Some(&sim_t) = similar_terms.get(&from) {
                    *num.entry(to).or_default() += g * sim_t;
                    *den.entry(to).or_default() += g;
                }
            }
            for (to, n) in num {
                let d = den[&to];
                if d > 0.0 {
                    out[to] += sim_p / sim_total * n / d;
                }
            }
        }
        out
    }

    /// `(1 − α) P(t | t_j) + α Score_CF(t)` with `t_j` the last prefix term.
    /// An empty prefix scores every term zero.
    pub fn scores(&self, point: &RecommendationPoint, params: &TptcfParams) -> Vec<f64> {
        let Some(&last) = point.prefix.last() else {
            return vec![0.0; self.m];
        };
        let dyn_part = self.dyn_scores(last);
        let cf_part = self.cf_scores(&point.patient, last, params);
        dyn_part
            .iter()
            .zip(&cf_part)
            .map(|(d, c)| (1.0 - params.alpha) * d + params.alpha * c)
            .collect()
    }
}

pub fn tptcf_score(point: &RecommendationPoint, model: &TptcfModel, params: &TptcfParams) -> ScoredList {
    ScoredList::from_scores(&model.scores(point, params))
}

/// Uniformly random ranking, reproducible per (seed, patient, target).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomRanker {
    pub seed: u64,
}

impl RandomRanker {
    pub fn scores(&self, point: &RecommendationPoint, m: usize) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(point.patient.0.as_bytes());
        h.update((point.target_index as u64).to_le_bytes());
        let digest = h.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| rng.random::<f64>()).collect()
    }
}

/// Terms of `list` that are not in `0..vocabulary`; always empty for lists
/// built by this module.
pub fn out_of_vocabulary(list: &ScoredList, vocabulary: usize) -> BTreeSet<TermId> {
    list.entries()
        .iter()
        .filter(|(t, _)| t.index() >= vocabulary)
        .map(|(t, _)| *t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{Encounter, SearchEvent, Timestamp};
    use crate::factorization::{DenseMatrix, TrainConfig, TrainReport, StopReason};
    use crate::oracle;
    use crate::sessionization::{assign_sessions, SessionConfig};
    use approx::assert_relative_eq;

    fn model(u: &[Vec<f64>], v: &[Vec<f64>]) -> FactorModel {
        FactorModel {
            u: DenseMatrix::from_rows(u).unwrap(),
            v: DenseMatrix::from_rows(v).unwrap(),
            config: TrainConfig::default(),
            lambda: 0.5,
            codes: Default::default(),
            terms: Default::default(),
            report: TrainReport {
                epochs: 0,
                stop: StopReason::MaxEpochs,
                trace: vec![0.0],
            },
        }
    }

    fn point(prefix: &[u32], encounters: &[&[u32]]) -> RecommendationPoint {
        RecommendationPoint {
            patient: PatientId::from("p"),
            target_index: prefix.len(),
            prefix: prefix.iter().map(|&t| TermId(t)).collect(),
            encounters: encounters
                .iter()
                .map(|e| e.iter().map(|&c| CodeId(c)).collect())
                .collect(),
            n_p: prefix.len(),
        }
    }

    fn fixture() -> FactorModel {
        model(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]],
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0]],
        )
    }

    #[test]
    fn mean_of_single_term_is_that_term() {
        let m = fixture();
        let p = point(&[2], &[]);
        for ms in [RecentWindow::Last(1), RecentWindow::Last(5), RecentWindow::All] {
            assert_eq!(aggregate_recent_terms(&p, &m, ms).unwrap(), vec![2.0, -1.0]);
        }
    }

    #[test]
    fn window_of_one_uses_most_recent() {
        let m = fixture();
        let p = point(&[0, 1], &[]);
        assert_eq!(aggregate_recent_terms(&p, &m, RecentWindow::Last(1)).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn window_larger_than_prefix_averages_all() {
        let m = fixture();
        let p = point(&[0, 1, 2], &[]);
        let mean = aggregate_recent_terms(&p, &m, RecentWindow::Last(6)).unwrap();
        // direct mean of (1,0), (0,1), (2,-1)
        assert_relative_eq!(mean[0], 1.0);
        assert_relative_eq!(mean[1], 0.0);
        assert!(aggregate_recent_terms(&point(&[], &[]), &m, RecentWindow::All).is_none());
    }

    #[test]
    fn x_scores() {
        let m = model(&[vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let x = score_terms_x(&point(&[0], &[]), &m, RecentWindow::All);
        assert_eq!(x, vec![1.0, 0.0, 0.6]);
        assert_eq!(ScoredList::from_scores(&x).terms()[0], TermId(0));
        assert_eq!(score_terms_x(&point(&[], &[]), &m, RecentWindow::All), vec![0.0; 3]);

        let m = fixture();
        let x = score_terms_x(&point(&[1, 2], &[]), &m, RecentWindow::All);
        // m_p = (1, 0); dot with (1,0), (0,1), (2,-1)
        assert_eq!(x, vec![1.0, 0.0, 2.0]);
        assert_eq!(x, oracle::x_scores(&m, &[TermId(1), TermId(2)], None));
    }

    #[test]
    fn weights() {
        let m = fixture();
        let w = encounter_weights(&point(&[0], &[&[1]]), &m, RecentWindow::All, 2);
        assert_eq!(w, vec![vec![1.0]]);

        let w = encounter_weights(&point(&[0], &[&[0, 1], &[2, 0]]), &m, RecentWindow::All, 2);
        let total: f64 = w.iter().flatten().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);

        let twins = model(&[vec![0.3, 0.3], vec![0.3, 0.3]], &[vec![1.0, 2.0]]);
        let w = encounter_weights(&point(&[0], &[&[0, 1]]), &twins, RecentWindow::All, 1);
        assert_eq!(w, vec![vec![0.5, 0.5]]);

        assert!(encounter_weights(&point(&[0], &[]), &m, RecentWindow::All, 2).is_empty());
    }

    #[test]
    fn weights_use_only_last_mc_encounters() {
        let m = fixture();
        let p = point(&[0], &[&[0], &[1], &[2]]);
        let w = encounter_weights(&p, &m, RecentWindow::All, 2);
        assert_eq!(w.len(), 2);
        let y = score_terms_y(&p, &m, RecentWindow::All, 2);
        let window: Vec<Vec<CodeId>> = p.encounters[1..].to_vec();
        let expected = oracle::y_scores(&m, &p.prefix, &window, None);
        for (a, b) in y.iter().zip(&expected) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn y_reduces_to_estimate_for_single_code() {
        let m = fixture();
        let y = score_terms_y(&point(&[1], &[&[2]]), &m, RecentWindow::All, 1);
        for s in 0..3 {
            assert_relative_eq!(y[s], m.estimate(CodeId(2), TermId(s as u32)).unwrap(), epsilon = 1e-15);
        }
        let zero_u = model(&[vec![0.0, 0.0]], &[vec![1.0, 1.0], vec![2.0, 0.0]]);
        assert_eq!(score_terms_y(&point(&[0], &[&[0]]), &zero_u, RecentWindow::All, 1), vec![0.0, 0.0]);
        assert_eq!(score_terms_y(&point(&[0], &[]), &m, RecentWindow::All, 3), vec![0.0; 3]);
    }

    #[test]
    fn alpha_endpoints() {
        let m = fixture();
        let p = point(&[2, 0], &[&[1], &[0, 2]]);
        let x = score_terms_x(&p, &m, RecentWindow::Last(1));
        let y = score_terms_y(&p, &m, RecentWindow::Last(1), 2);
        let one = HcfmParams { ms: RecentWindow::Last(1), mc: 2, alpha: 1.0 };
        let zero = HcfmParams { alpha: 0.0, ..one };
        assert_eq!(hcfm_score(&p, &m, &one).terms(), ScoredList::from_scores(&x).terms());
        assert_eq!(hcfm_score(&p, &m, &zero).terms(), ScoredList::from_scores(&y).terms());
    }

    #[test]
    fn shared_argmax_survives_mixing() {
        let m = model(&[vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![0.1, 0.2], vec![-1.0, 0.0]]);
        let p = point(&[0], &[&[0]]);
        let params = HcfmParams { ms: RecentWindow::All, mc: 1, alpha: 0.5 };
        assert_eq!(hcfm_score(&p, &m, &params).terms()[0], TermId(0));
    }

    #[test]
    fn copm_examples() {
        let m = fixture();
        let s = copm_scores(&point(&[], &[&[2]]), &m, 0.5).unwrap();
        for t in 0..3 {
            assert_relative_eq!(s[t], m.estimate(CodeId(2), TermId(t as u32)).unwrap());
        }
        // two encounters, target matched to the second: σ^1 on the first
        let s = copm_scores(&point(&[], &[&[0], &[1]]), &m, 0.5).unwrap();
        for t in 0..3 {
            let t = TermId(t);
            let hand = 0.5 * m.estimate(CodeId(0), t).unwrap() + m.estimate(CodeId(1), t).unwrap();
            assert_relative_eq!(s[t.index()], hand, epsilon = 1e-15);
        }
        assert!(matches!(copm_scores(&point(&[0], &[]), &m, 0.5), Err(Error::EmptyContext)));
        assert!(copm_scores(&point(&[], &[&[0]]), &m, 1.0).is_err());
    }

    #[test]
    fn copm_older_encounters_shrink_with_sigma() {
        let m = model(&[vec![1.0], vec![0.0]], &[vec![1.0], vec![2.0]]);
        let p = point(&[], &[&[0], &[1]]);
        let hi = copm_scores(&p, &m, 0.9).unwrap();
        let lo = copm_scores(&p, &m, 0.3).unwrap();
        assert!(lo[0] < hi[0] && lo[1] < hi[1]);
    }

    fn history(p: &str, terms: &[u32]) -> PatientHistory {
        let pid = PatientId::from(p);
        let searches = terms
            .iter()
            .enumerate()
            .map(|(i, &t)| SearchEvent::new(pid.clone(), Timestamp::from_secs(10 + i as i64), TermId(t)))
            .collect();
        let enc = vec![Encounter::new(pid.clone(), Timestamp::from_secs(0), [CodeId(0)])];
        assign_sessions(PatientHistory::build(pid, enc, searches).unwrap(), &SessionConfig::default())
    }

    #[test]
    fn ptn_ranks_by_patient_counts() {
        let h = history("p", &[0, 2, 0, 0, 1]);
        let ptn = PtnModel::fit(&[&h], 4);
        let p = point(&[], &[]);
        assert_eq!(&ptn_score(&p, &ptn).terms()[..2], &[TermId(0), TermId(1)]);
        let stranger = RecommendationPoint { patient: PatientId::from("q"), ..p };
        assert_eq!(ptn_score(&stranger, &ptn).terms(), vec![TermId(0), TermId(1), TermId(2), TermId(3)]);
    }

    #[test]
    fn tptcf_alpha_zero_is_transition_probability() {
        let a = history("a", &[0, 1, 0, 2, 0, 1]);
        let b = history("b", &[1, 2, 2]);
        let model = TptcfModel::fit(&[&a, &b], 3);
        // transitions out of 0: 0->1 twice, 0->2 once
        assert_relative_eq!(model.transition_probability(TermId(0), TermId(1)), 2.0 / 3.0);
        let params = TptcfParams { patient_threshold: 0.0, term_threshold: 0.0, alpha: 0.0 };
        let p = RecommendationPoint { patient: PatientId::from("a"), ..point(&[0], &[]) };
        let s = model.scores(&p, &params);
        assert_relative_eq!(s[1], 2.0 / 3.0);
        assert_relative_eq!(s[2], 1.0 / 3.0);
        assert_eq!(s[0], 0.0);
        assert_eq!(model.scores(&point(&[], &[]), &params), vec![0.0; 3]);
    }

    #[test]
    fn tptcf_single_neighbour_reduces_to_its_transitions() {
        // a and b have identical count vectors; c shares nothing with them
        let a = history("a", &[0, 1, 0, 2]);
        let b = history("b", &[2, 0, 1, 0]);
        let c = history("c", &[3, 3, 3]);
        let model = TptcfModel::fit(&[&a, &b, &c], 4);
        assert_relative_eq!(model.patient_similarity(&PatientId::from("a"), &PatientId::from("b")), 1.0);
        assert_eq!(model.patient_similarity(&PatientId::from("a"), &PatientId::from("c")), 0.0);
        // term threshold 1.0 keeps only terms whose column equals term 0's direction
        let params = TptcfParams { patient_threshold: 0.5, term_threshold: 1.0 - 1e-12, alpha: 1.0 };
        let p = RecommendationPoint { patient: PatientId::from("a"), ..point(&[0], &[]) };
        let s = model.scores(&p, &params);
        // S_t(0): every term with cosine 1 to term 0 over (a, b, c) columns.
        // Columns: t0 = (2,2,0), t1 = (1,1,0), t2 = (1,1,0) -> all cosine 1; t3 = (0,0,3).
        // b's transitions: 2->0, 0->1, 1->0.
        // Score_CF(t) = Σ_{t'} g(t'->t|b) sim(0,t') / Σ_{t''} g(t''->t|b) = 1 for t in {0, 1}.
        assert_relative_eq!(s[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s[1], 1.0, epsilon = 1e-12);
        assert_eq!(s[2], 0.0);
        assert_eq!(s[3], 0.0);
    }

    #[test]
    fn tptcf_no_neighbours_leaves_dynamics_only() {
        let a = history("a", &[0, 1]);
        let b = history("b", &[2, 2]);
        let model = TptcfModel::fit(&[&a, &b], 3);
        let params = TptcfParams { patient_threshold: 0.9, term_threshold: 0.0, alpha: 0.4 };
        let p = RecommendationPoint { patient: PatientId::from("a"), ..point(&[0], &[]) };
        let s = model.scores(&p, &params);
        assert_relative_eq!(s[1], 0.6 * 1.0);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn rank_without_sort_agrees_with_list() {
        let scores = vec![0.5, 1.0, 0.5, -2.0, 1.0];
        let list = ScoredList::from_scores(&scores);
        assert_eq!(list.terms(), vec![TermId(1), TermId(4), TermId(0), TermId(2), TermId(3)]);
        assert_eq!(list.terms(), oracle::ranking(&scores));
        for t in 0..5 {
            assert_eq!(rank_in_scores(&scores, TermId(t)), list.rank_of(TermId(t)));
        }
        assert_eq!(rank_in_scores(&scores, TermId(9)), None);
        assert!(out_of_vocabulary(&list, 5).is_empty());
    }

    #[test]
    fn point_from_history() {
        let pid = PatientId::from("p");
        let h = PatientHistory::build(
            pid.clone(),
            vec![
                Encounter::new(pid.clone(), Timestamp::from_secs(0), [CodeId(0)]),
                Encounter::new(pid.clone(), Timestamp::from_secs(20), [CodeId(1)]),
            ],
            vec![
                SearchEvent::new(pid.clone(), Timestamp::from_secs(5), TermId(3)),
                SearchEvent::new(pid.clone(), Timestamp::from_secs(10), TermId(4)),
                SearchEvent::new(pid.clone(), Timestamp::from_secs(30), TermId(5)),
            ],
        )
        .unwrap();
        let h = assign_sessions(h, &SessionConfig::default());
        let p = RecommendationPoint::from_history(&h, 1).unwrap();
        assert_eq!(p.prefix, vec![TermId(3)]);
        assert_eq!(p.encounters, vec![vec![CodeId(0)]]);
        let p = RecommendationPoint::from_history(&h, 2).unwrap();
        assert_eq!(p.prefix, vec![TermId(3), TermId(4)]);
        assert_eq!(p.l_p(), 2);
        assert_eq!(p.matched_encounter(), Some(1));
    }

    #[test]
    fn random_ranker_is_reproducible() {
        let r = RandomRanker { seed: 4 };
        let p = point(&[1], &[]);
        assert_eq!(r.scores(&p, 10), r.scores(&p, 10));
        let q = RecommendationPoint { target_index: 7, ..p.clone() };
        assert_ne!(r.scores(&p, 10), r.scores(&q, 10));
    }

    #[test]
    fn recent_window_parsing() {
        assert_eq!("all".parse::<RecentWindow>().unwrap(), RecentWindow::All);
        assert_eq!("6".parse::<RecentWindow>().unwrap(), RecentWindow::Last(6));
        assert!("0".parse::<RecentWindow>().is_err());
        assert_eq!(RecentWindow::Last(3).to_string(), "3");
    }
}
