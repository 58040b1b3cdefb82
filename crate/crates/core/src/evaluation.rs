//! Time-cutoff evaluation: train/test split, hit rates, grid search and
//! session-length stratification.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cooccurrence::{build_cooccurrence, check_decay, CooccurrenceMatrix, DEFAULT_LAMBDA};
use crate::data_model::{
    CodeDictionary, DenseId, PatientHistory, PatientId, TermDictionary, TermId, Timestamp,
};
use crate::error::{Error, Result};
use crate::factorization::{train, FactorModel, TrainConfig};
use crate::ingestion::Dataset;
use crate::par;
use crate::recommenders::{
    copm_scores, rank_in_scores, score_terms_x, score_terms_y, PtnModel, RandomRanker, RecentWindow,
    RecommendationPoint, ScoredList, TptcfModel, TptcfParams, DEFAULT_SIGMA,
};
use crate::sessionization::{assign_sessions, SessionConfig};

pub const HR_KS: [usize; 7] = [1, 2, 3, 4, 5, 10, 20];
pub const STRATUM_KS: [usize; 3] = [1, 5, 10];
pub const N_STRATA: usize = 5;

/// Pre-cutoff part of a dataset, re-indexed so that dictionaries only hold
/// codes and terms seen before the cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub histories: Vec<PatientHistory>,
    pub codes: CodeDictionary,
    pub terms: TermDictionary,
}

impl TrainingSet {
    /// Keeps events strictly before `cutoff` of every patient that has at least
    /// one such search. Ids are assigned in first-seen order over patients in
    /// id order (encounter codes, then search terms).
    pub fn build(dataset: &Dataset, cutoff: Timestamp, sessions: &SessionConfig) -> Result<Self> {
        let mut codes = CodeDictionary::default();
        let mut terms = TermDictionary::default();
        let mut histories = Vec::new();
        for h in dataset.histories.values() {
            let truncated = h.truncate_before(cutoff)?;
            if truncated.n_searches() == 0 {
                continue;
            }
            for e in truncated.encounters() {
                for &c in &e.codes {
                    codes.intern(raw(&dataset.codes, c.index())?);
                }
            }
            for s in truncated.searches() {
                terms.intern(raw(&dataset.terms, s.term.index())?);
            }
            let remapped = truncated.remap(
                |c| dataset.codes.raw(c).and_then(|r| codes.get(r)),
                |t| dataset.terms.raw(t).and_then(|r| terms.get(r)),
            )?;
            histories.push(assign_sessions(remapped, sessions));
        }
        Ok(TrainingSet {
            histories,
            codes,
            terms,
        })
    }

    pub fn refs(&self) -> Vec<&PatientHistory> {
        self.histories.iter().collect()
    }

    pub fn n_searches(&self) -> usize {
        self.histories.iter().map(PatientHistory::n_searches).sum()
    }
}

fn raw<I>(dict: &crate::data_model::Dictionary<I>, index: usize) -> Result<&str> {
    dict.raws()
        .get(index)
        .map(String::as_str)
        .ok_or_else(|| Error::OutOfRange(format!("id {index} outside dictionary of {}", dict.len())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestPoint {
    pub point: RecommendationPoint,
    /// Target term in the training vocabulary; `None` is an automatic miss.
    pub truth: Option<TermId>,
    pub truth_raw: String,
    /// Position of the target in its session, counting from 1.
    pub session_length: usize,
}

/// Split sizes in the layout of the paper's data summary per cutoff.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub cutoff: Timestamp,
    pub train_patients: usize,
    pub test_patients: usize,
    pub train_terms: usize,
    pub test_terms: usize,
    pub train_searches: usize,
    pub searches_per_session: f64,
    pub encounters_per_patient: f64,
    pub test_terms_out_of_vocabulary: usize,
}

impl SplitStats {
    pub fn to_text(&self) -> String {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22} {:>6} {:>6} {:>8} {:>6} {:>6} {:>8} {:>8} {:>10} {:>10}",
            "cutoff", "P_t", "P_e", "P_e/P_t", "T_t", "T_e", "T_e/T_t", "S_t", "S_t/sess", "enc/pat"
        );
        let _ = writeln!(
            out,
            "{:<22} {:>6} {:>6} {:>8.4} {:>6} {:>6} {:>8.4} {:>8} {:>10.2} {:>10.2}",
            self.cutoff.to_string(),
            self.train_patients,
            self.test_patients,
            ratio(self.test_patients, self.train_patients),
            self.train_terms,
            self.test_terms,
            ratio(self.test_terms, self.train_terms),
            self.train_searches,
            self.searches_per_session,
            self.encounters_per_patient,
        );
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutoffSplit {
    pub cutoff: Timestamp,
    pub train: TrainingSet,
    pub test_points: Vec<TestPoint>,
    pub stats: SplitStats,
}

/// Splits at `cutoff`. Each patient with training searches contributes at
/// most one test point: its first search at or after the cutoff. The prefix
/// is the earlier part of that search's session (all before the cutoff); the
/// visible encounters are those up to the search's matched encounter, with
/// codes unknown to training dropped.
pub fn cutoff_split(dataset: &Dataset, cutoff: Timestamp, sessions: &SessionConfig) -> Result<CutoffSplit> {
    sessions.validate()?;
    let train = TrainingSet::build(dataset, cutoff, sessions)?;
    let eligible: BTreeSet<&PatientId> = train.histories.iter().map(PatientHistory::patient).collect();
    let mut test_points = Vec::new();
    for (pid, h) in &dataset.histories {
        if !eligible.contains(pid) {
            continue;
        }
        let Some(target) = h.searches().iter().position(|s| s.time >= cutoff) else {
            continue;
        };
        let full = assign_sessions(h.clone(), sessions);
        let mut point = RecommendationPoint::from_history(&full, target)?;
        point.prefix = point
            .prefix
            .iter()
            .map(|&t| {
                let r = raw(&dataset.terms, t.index())?;
                train
                    .terms
                    .get(r)
                    .ok_or_else(|| Error::OutOfRange(format!("pre-cutoff term {r:?} missing from training")))
            })
            .collect::<Result<_>>()?;
        point.encounters = point
            .encounters
            .iter()
            .map(|codes| {
                codes
                    .iter()
                    .filter_map(|&c| dataset.codes.raw(c).and_then(|r| train.codes.get(r)))
                    .collect()
            })
            .collect();
        let truth_raw = raw(&dataset.terms, full.searches()[target].term.index())?.to_string();
        let session_length = point.prefix.len() + 1;
        test_points.push(TestPoint {
            truth: train.terms.get(&truth_raw),
            truth_raw,
            point,
            session_length,
        });
    }
    if test_points.is_empty() {
        return Err(Error::EmptyTest(cutoff));
    }
    let stats = split_stats(cutoff, &train, &test_points);
    Ok(CutoffSplit {
        cutoff,
        train,
        test_points,
        stats,
    })
}

fn split_stats(cutoff: Timestamp, train: &TrainingSet, points: &[TestPoint]) -> SplitStats {
    let sessions: usize = train
        .histories
        .iter()
        .map(|h| h.searches().iter().filter_map(|s| s.session_id).collect::<BTreeSet<_>>().len())
        .sum();
    let encounters: usize = train.histories.iter().map(PatientHistory::n_encounters).sum();
    let patients = train.histories.len();
    let train_searches = train.n_searches();
    let test_terms: BTreeSet<&str> = points.iter().map(|p| p.truth_raw.as_str()).collect();
    SplitStats {
        cutoff,
        train_patients: patients,
        test_patients: points.len(),
        train_terms: train.terms.len(),
        test_terms: test_terms.len(),
        train_searches,
        searches_per_session: if sessions == 0 { 0.0 } else { train_searches as f64 / sessions as f64 },
        encounters_per_patient: if patients == 0 { 0.0 } else { encounters as f64 / patients as f64 },
        test_terms_out_of_vocabulary: points.iter().filter(|p| p.truth.is_none()).count(),
    }
}

/// Cutoff at the `q` quantile of all search timestamps (nearest rank below).
pub fn cutoff_at_quantile(dataset: &Dataset, q: f64) -> Result<Timestamp> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidParameter(format!("cutoff quantile must lie in [0, 1], got {q}")));
    }
    let mut times: Vec<Timestamp> = dataset
        .histories
        .values()
        .flat_map(|h| h.searches().iter().map(|s| s.time))
        .collect();
    if times.is_empty() {
        return Err(Error::EmptyDataset);
    }
    times.sort_unstable();
    Ok(times[(q * (times.len() - 1) as f64).floor() as usize])
}

/// Fraction of lists whose truth appears in the first `k` entries.
pub fn hit_rate(lists: &[ScoredList], truths: &[Option<TermId>], k: usize) -> f64 {
    let ranks: Vec<Option<usize>> = lists
        .iter()
        .zip(truths)
        .map(|(l, t)| t.and_then(|t| l.rank_of(t)))
        .collect();
    hit_rate_from_ranks(&ranks, k)
}

/// Same as [`hit_rate`] with ranks already computed (1-based, `None` = miss).
pub fn hit_rate_from_ranks(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
    hits as f64 / ranks.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub group: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub points: usize,
    /// HR@1, HR@5, HR@10.
    pub hit_rates: [f64; 3],
}

/// Quintiles of test points by session length. Points are sorted stably by
/// length and cut into five near-equal groups; fewer than five points give a
/// single group.
pub fn stratify_by_session_length(split: &CutoffSplit, ranks: &[Option<usize>]) -> Vec<Stratum> {
    let lengths: Vec<usize> = split.test_points.iter().map(|p| p.session_length).collect();
    stratify(&lengths, ranks)
}

pub fn stratify(lengths: &[usize], ranks: &[Option<usize>]) -> Vec<Stratum> {
    let n = lengths.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| lengths[i]);
    let groups = if n < N_STRATA {
        warn!("only {n} test sessions; reporting a single length group");
        1
    } else {
        N_STRATA
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for (pos, &i) in order.iter().enumerate() {
        members[pos * groups / n].push(i);
    }
    members
        .into_iter()
        .enumerate()
        .map(|(g, idx)| {
            let r: Vec<Option<usize>> = idx.iter().map(|&i| ranks[i]).collect();
            Stratum {
                group: g + 1,
                min_length: idx.iter().map(|&i| lengths[i]).min().unwrap_or(0),
                max_length: idx.iter().map(|&i| lengths[i]).max().unwrap_or(0),
                points: idx.len(),
                hit_rates: STRATUM_KS.map(|k| hit_rate_from_ranks(&r, k)),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Hcfm,
    Copm,
    Ptn,
    Tptcf,
    Random,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Hcfm => "hcfm",
            MethodKind::Copm => "copm",
            MethodKind::Ptn => "ptn",
            MethodKind::Tptcf => "tptcf",
            MethodKind::Random => "random",
        }
    }

    pub fn trains_factors(self) -> bool {
        matches!(self, MethodKind::Hcfm | MethodKind::Copm)
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hcfm" => Ok(MethodKind::Hcfm),
            "copm" => Ok(MethodKind::Copm),
            "ptn" => Ok(MethodKind::Ptn),
            "tptcf" => Ok(MethodKind::Tptcf),
            "random" => Ok(MethodKind::Random),
            other => Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

/// Values tried per parameter. Only the lists a method uses are read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub ms: Vec<RecentWindow>,
    pub mc: Vec<usize>,
    pub alpha: Vec<f64>,
    pub d: Vec<usize>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<f64>,
    pub patient_threshold: Vec<f64>,
    pub term_threshold: Vec<f64>,
    pub tptcf_alpha: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        let mut ms: Vec<RecentWindow> = (1..=10).map(RecentWindow::Last).collect();
        ms.extend([RecentWindow::Last(15), RecentWindow::Last(20), RecentWindow::All]);
        Grid {
            ms,
            mc: vec![1, 2, 3, 4],
            alpha: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            d: vec![32, 64],
            gamma: vec![0.01, 0.05],
            sigma: vec![DEFAULT_SIGMA],
            patient_threshold: vec![0.1, 0.3, 0.5],
            term_threshold: vec![0.1, 0.3, 0.5],
            tptcf_alpha: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

fn parse_list<T, F>(key: &str, value: &str, f: F) -> Result<Vec<T>>
where
    F: Fn(&str) -> Option<T>,
{
    let out: Option<Vec<T>> = value.split(',').map(|v| f(v.trim())).collect();
    match out {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::InvalidParameter(format!("bad value list for {key}: {value:?}"))),
    }
}

impl Grid {
    /// One fixed value per parameter, taken from the given settings.
    pub fn single(ms: RecentWindow, mc: usize, alpha: f64, d: usize, gamma: f64, sigma: f64) -> Self {
        Grid {
            ms: vec![ms],
            mc: vec![mc],
            alpha: vec![alpha],
            d: vec![d],
            gamma: vec![gamma],
            sigma: vec![sigma],
            ..Grid::default()
        }
    }

    /// `key=value[,value...]` lines overriding the defaults. Keys: ms, mc,
    /// alpha, d, gamma, sigma, sp, st, talpha. `#` starts a comment.
    pub fn parse(text: &str, base: Grid) -> Result<Self> {
        let mut grid = base;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("grid line without '=': {line:?}")))?;
            let key = key.trim();
            let float = |v: &str| v.parse::<f64>().ok();
            match key {
                "ms" => grid.ms = parse_list(key, value, |v| v.parse().ok())?,
                "mc" => grid.mc = parse_list(key, value, |v| v.parse().ok().filter(|&x: &usize| x >= 1))?,
                "alpha" => grid.alpha = parse_list(key, value, float)?,
                "d" => grid.d = parse_list(key, value, |v| v.parse().ok())?,
                "gamma" => grid.gamma = parse_list(key, value, float)?,
                "sigma" => grid.sigma = parse_list(key, value, float)?,
                "sp" => grid.patient_threshold = parse_list(key, value, float)?,
                "st" => grid.term_threshold = parse_list(key, value, float)?,
                "talpha" => grid.tptcf_alpha = parse_list(key, value, float)?,
                other => return Err(Error::InvalidParameter(format!("unknown grid key {other:?}"))),
            }
        }
        Ok(grid)
    }

    pub fn validate(&self, kind: MethodKind) -> Result<()> {
        let empty = |name: &str| Error::InvalidParameter(format!("grid for {name} is empty"));
        let unit = |name: &str, xs: &[f64]| -> Result<()> {
            if xs.is_empty() {
                return Err(empty(name));
            }
            match xs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                Some(x) => Err(Error::InvalidParameter(format!("{name} value {x} outside [0, 1]"))),
                None => Ok(()),
            }
        };
        if kind.trains_factors() {
            if self.d.is_empty() {
                return Err(empty("d"));
            }
            if self.gamma.is_empty() {
                return Err(empty("gamma"));
            }
        }
        match kind {
            MethodKind::Hcfm => {
                if self.ms.is_empty() {
                    return Err(empty("ms"));
                }
                if self.mc.is_empty() {
                    return Err(empty("mc"));
                }
                unit("alpha", &self.alpha)
            }
            MethodKind::Copm => {
                if self.sigma.is_empty() {
                    return Err(empty("sigma"));
                }
                self.sigma.iter().try_for_each(|&s| check_decay("sigma", s))
            }
            MethodKind::Tptcf => {
                unit("sp", &self.patient_threshold)?;
                unit("st", &self.term_threshold)?;
                unit("talpha", &self.tptcf_alpha)
            }
            MethodKind::Ptn | MethodKind::Random => Ok(()),
        }
    }
}

/// Everything besides the grid that shapes a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub lambda: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub rel_tol: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        EvalSettings {
            lambda: DEFAULT_LAMBDA,
            seed: t.seed,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            rel_tol: t.rel_tol,
        }
    }
}

impl EvalSettings {
    pub fn train_config(&self, d: usize, gamma: f64) -> TrainConfig {
        TrainConfig {
            d,
            gamma,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            rel_tol: self.rel_tol,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: MethodKind,
    /// Parameter name and value, in a fixed per-method order.
    pub params: Vec<(String, String)>,
    /// HR@k for each k in [`HR_KS`].
    pub hit_rates: [f64; 7],
    pub strata: Vec<Stratum>,
    pub settings: EvalSettings,
    /// Metrics (`hr1`, `hr5`, ...) on which this report is the best of its run.
    pub best: Vec<String>,
    pub error: Option<String>,
}

impl EvalReport {
    pub fn hr(&self, k: usize) -> Option<f64> {
        HR_KS.iter().position(|&x| x == k).map(|i| self.hit_rates[i])
    }

    fn from_ranks(
        method: MethodKind,
        params: Vec<(String, String)>,
        split: &CutoffSplit,
        ranks: &[Option<usize>],
        settings: &EvalSettings,
    ) -> Self {
        EvalReport {
            method,
            params,
            hit_rates: HR_KS.map(|k| hit_rate_from_ranks(ranks, k)),
            strata: stratify_by_session_length(split, ranks),
            settings: settings.clone(),
            best: Vec::new(),
            error: None,
        }
    }

    fn failed(method: MethodKind, params: Vec<(String, String)>, settings: &EvalSettings, err: &Error) -> Self {
        EvalReport {
            method,
            params,
            hit_rates: [0.0; 7],
            strata: Vec::new(),
            settings: settings.clone(),
            best: Vec::new(),
            error: Some(err.to_string()),
        }
    }

    pub fn params_text(&self) -> String {
        self.params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn ranks_with<F>(split: &CutoffSplit, score: F) -> Vec<Option<usize>>
where
    F: Fn(&RecommendationPoint) -> Option<Vec<f64>> + Sync,
{
    par::map(&split.test_points, |tp| {
        let truth = tp.truth?;
        let scores = score(&tp.point)?;
        rank_in_scores(&scores, truth)
    })
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

fn factor_params(d: usize, gamma: f64) -> Vec<(String, String)> {
    vec![("d".into(), d.to_string()), ("gamma".into(), fmt_f(gamma))]
}

/// Trains one factor model per `(d, γ)` on the split's training set.
pub fn train_factor_models(
    a: &CooccurrenceMatrix,
    split: &CutoffSplit,
    grid: &Grid,
    settings: &EvalSettings,
) -> Vec<((usize, f64), Result<FactorModel>)> {
    let keys: Vec<(usize, f64)> = grid
        .d
        .iter()
        .flat_map(|&d| grid.gamma.iter().map(move |&g| (d, g)))
        .collect();
    let models = par::map(&keys, |&(d, g)| {
        train(a, &settings.train_config(d, g))
            .and_then(|m| m.bind_dictionaries(split.train.codes.clone(), split.train.terms.clone()))
    });
    keys.into_iter().zip(models).collect()
}

/// Evaluates every grid point of `kind` on `split`. Reports come back sorted
/// by HR@5 descending (grid order on ties) with per-metric winners marked.
/// A training failure yields a report carrying the error instead of aborting.
pub fn grid_search(split: &CutoffSplit, kind: MethodKind, grid: &Grid, settings: &EvalSettings) -> Result<Vec<EvalReport>> {
    grid.validate(kind)?;
    check_decay("lambda", settings.lambda)?;
    let m = split.train.terms.len();
    let mut reports = Vec::new();
    match kind {
        MethodKind::Hcfm | MethodKind::Copm => {
            let a = build_cooccurrence(&split.train.refs(), split.train.codes.len(), m, settings.lambda)?;
            for ((d, gamma), model) in train_factor_models(&a, split, grid, settings) {
                let model = match model {
                    Ok(model) => model,
                    Err(e) if matches!(e, Error::InvalidParameter(_)) => return Err(e),
                    Err(e) => {
                        warn!("training d={d} gamma={gamma} failed: {e}");
                        for params in method_params(kind, grid, d, gamma) {
                            reports.push(EvalReport::failed(kind, params, settings, &e));
                        }
                        continue;
                    }
                };
                if kind == MethodKind::Hcfm {
                    reports.extend(hcfm_reports(split, &model, grid, settings, d, gamma));
                } else {
                    for &sigma in &grid.sigma {
                        let ranks = ranks_with(split, |p| copm_scores(p, &model, sigma).ok());
                        let mut params = factor_params(d, gamma);
                        params.push(("sigma".into(), fmt_f(sigma)));
                        reports.push(EvalReport::from_ranks(kind, params, split, &ranks, settings));
                    }
                }
            }
        }
        MethodKind::Ptn => {
            let ptn = PtnModel::fit(&split.train.refs(), m);
            let ranks = ranks_with(split, |p| Some(ptn.scores(p)));
            reports.push(EvalReport::from_ranks(kind, Vec::new(), split, &ranks, settings));
        }
        MethodKind::Tptcf => {
            let model = TptcfModel::fit(&split.train.refs(), m);
            let mut points = Vec::new();
            for &sp in &grid.patient_threshold {
                for &st in &grid.term_threshold {
                    for &alpha in &grid.tptcf_alpha {
                        points.push(TptcfParams {
                            patient_threshold: sp,
                            term_threshold: st,
                            alpha,
                        });
                    }
                }
            }
            for params in points {
                let ranks = ranks_with(split, |p| Some(model.scores(p, &params)));
                let named = vec![
                    ("sp".into(), fmt_f(params.patient_threshold)),
                    ("st".into(), fmt_f(params.term_threshold)),
                    ("talpha".into(), fmt_f(params.alpha)),
                ];
                reports.push(EvalReport::from_ranks(kind, named, split, &ranks, settings));
            }
        }
        MethodKind::Random => {
            let ranker = RandomRanker { seed: settings.seed };
            let ranks = ranks_with(split, |p| Some(ranker.scores(p, m)));
            reports.push(EvalReport::from_ranks(kind, Vec::new(), split, &ranks, settings));
        }
    }
    Ok(finish(reports))
}

fn method_params(kind: MethodKind, grid: &Grid, d: usize, gamma: f64) -> Vec<Vec<(String, String)>> {
    let mut out = Vec::new();
    if kind == MethodKind::Hcfm {
        for ms in &grid.ms {
            for mc in &grid.mc {
                for alpha in &grid.alpha {
                    out.push(hcfm_params(*ms, *mc, *alpha, d, gamma));
                }
            }
        }
    } else {
        for sigma in &grid.sigma {
            let mut p = factor_params(d, gamma);
            p.push(("sigma".into(), fmt_f(*sigma)));
            out.push(p);
        }
    }
    out
}

fn hcfm_params(ms: RecentWindow, mc: usize, alpha: f64, d: usize, gamma: f64) -> Vec<(String, String)> {
    let mut p = vec![
        ("ms".into(), ms.to_string()),
        ("mc".into(), mc.to_string()),
        ("alpha".into(), fmt_f(alpha)),
    ];
    p.extend(factor_params(d, gamma));
    p
}

/// All `(m_s, m_c, α)` points for one model. The x and y parts are computed
/// once per `(m_s, m_c)` and blended for every α.
fn hcfm_reports(
    split: &CutoffSplit,
    model: &FactorModel,
    grid: &Grid,
    settings: &EvalSettings,
    d: usize,
    gamma: f64,
) -> Vec<EvalReport> {
    let pairs: Vec<(RecentWindow, usize)> = grid
        .ms
        .iter()
        .flat_map(|&ms| grid.mc.iter().map(move |&mc| (ms, mc)))
        .collect();
    let per_pair = par::map(&pairs, |&(ms, mc)| {
        let parts: Vec<(Vec<f64>, Vec<f64>)> = split
            .test_points
            .iter()
            .map(|tp| (score_terms_x(&tp.point, model, ms), score_terms_y(&tp.point, model, ms, mc)))
            .collect();
        grid.alpha
            .iter()
            .map(|&alpha| {
                let ranks: Vec<Option<usize>> = split
                    .test_points
                    .iter()
                    .zip(&parts)
                    .map(|(tp, (x, y))| {
                        let truth = tp.truth?;
                        let r: Vec<f64> = x.iter().zip(y).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
                        rank_in_scores(&r, truth)
                    })
                    .collect();
                EvalReport::from_ranks(
                    MethodKind::Hcfm,
                    hcfm_params(ms, mc, alpha, d, gamma),
                    split,
                    &ranks,
                    settings,
                )
            })
            .collect::<Vec<_>>()
    });
    per_pair.into_iter().flatten().collect()
}

fn finish(mut reports: Vec<EvalReport>) -> Vec<EvalReport> {
    let i5 = HR_KS.iter().position(|&k| k == 5).expect("k = 5 is reported");
    reports.sort_by(|a, b| {
        a.error
            .is_some()
            .cmp(&b.error.is_some())
            .then(b.hit_rates[i5].total_cmp(&a.hit_rates[i5]))
    });
    for (i, k) in HR_KS.iter().enumerate() {
        let winner = reports
            .iter()
            .enumerate()
            .filter(|(_, r)| r.error.is_none())
            .fold(None, |best: Option<(usize, f64)>, (j, r)| match best {
                Some((_, v)) if v >= r.hit_rates[i] => best,
                _ => Some((j, r.hit_rates[i])),
            });
        if let Some((j, _)) = winner {
            reports[j].best.push(format!("hr{k}"));
        }
    }
    reports
}

/// Fixed-width table, one row per report, winners flagged with `*`.
pub fn reports_to_text(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<8} {:<44}", "method", "params");
    for k in HR_KS {
        let _ = write!(out, " {:>8}", format!("HR@{k}"));
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<8} {:<44}", r.method.name(), r.params_text());
        for (i, k) in HR_KS.iter().enumerate() {
            let mark = if r.best.iter().any(|b| *b == format!("hr{k}")) { "*" } else { " " };
            let _ = write!(out, " {:>7.4}{mark}", r.hit_rates[i]);
        }
        if let Some(e) = &r.error {
            let _ = write!(out, "  error: {e}");
        }
        out.push('\n');
    }
    out
}

/// `method,<param columns>,hr1,hr2,hr3,hr4,hr5,hr10,hr20`; parameter columns
/// are the union over reports in first-seen order.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut columns: Vec<&str> = Vec::new();
    for r in reports {
        for (k, _) in &r.params {
            if !columns.contains(&k.as_str()) {
                columns.push(k);
            }
        }
    }
    let mut out = String::from("method");
    for c in &columns {
        out.push(',');
        out.push_str(c);
    }
    for k in HR_KS {
        let _ = write!(out, ",hr{k}");
    }
    out.push('\n');
    for r in reports {
        out.push_str(r.method.name());
        let values: BTreeMap<&str, &str> = r.params.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        for c in &columns {
            out.push(',');
            out.push_str(values.get(c).copied().unwrap_or(""));
        }
        for hr in r.hit_rates {
            let _ = write!(out, ",{hr:.6}");
        }
        out.push('\n');
    }
    out
}

pub fn strata_to_text(strata: &[Stratum]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8}",
        "group", "min_len", "max_len", "points", "HR@1", "HR@5", "HR@10"
    );
    for s in strata {
        let _ = writeln!(
            out,
            "{:<6} {:>10} {:>10} {:>8} {:>8.4} {:>8.4} {:>8.4}",
            s.group, s.min_length, s.max_length, s.points, s.hit_rates[0], s.hit_rates[1], s.hit_rates[2]
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{apply_filters, PreprocessConfig, RawRecord};
    use proptest::prelude::*;

    fn t(day: i64) -> Timestamp {
        Timestamp::from_secs(day * crate::data_model::SECONDS_PER_DAY)
    }

    fn enc(p: &str, day: i64, codes: &[&str]) -> RawRecord {
        RawRecord::Encounter {
            patient: PatientId::from(p),
            time: t(day),
            codes: codes.iter().map(|c| c.to_string()).collect(),
        }
    }

    fn search(p: &str, day: i64, term: &str) -> RawRecord {
        RawRecord::Search {
            patient: PatientId::from(p),
            time: t(day),
            term: term.into(),
        }
    }

    fn lenient() -> PreprocessConfig {
        PreprocessConfig {
            min_term_frequency: 1,
            min_searches_per_patient: 1,
            min_encounters_per_patient: 1,
            ..PreprocessConfig::default()
        }
    }

    fn dataset(records: &[RawRecord]) -> Dataset {
        apply_filters(records, &lenient()).unwrap()
    }

    #[test]
    fn everything_before_cutoff_is_empty_test() {
        let ds = dataset(&[enc("a", 0, &["x"]), search("a", 1, "flu"), search("a", 2, "cough")]);
        assert!(matches!(
            cutoff_split(&ds, t(10), &SessionConfig::default()),
            Err(Error::EmptyTest(_))
        ));
    }

    #[test]
    fn first_post_cutoff_search_only() {
        let ds = dataset(&[
            enc("a", 0, &["x"]),
            search("a", 1, "flu"),
            search("a", 2, "cough"),
            search("a", 11, "fever"),
            search("a", 12, "rash"),
        ]);
        let split = cutoff_split(&ds, t(10), &SessionConfig::default()).unwrap();
        assert_eq!(split.test_points.len(), 1);
        let tp = &split.test_points[0];
        assert_eq!(tp.truth_raw, "fever");
        // "fever" never occurs before the cutoff
        assert_eq!(tp.truth, None);
        assert_eq!(tp.point.prefix.len(), 2);
        assert_eq!(tp.session_length, 3);
        assert_eq!(split.train.n_searches(), 2);
    }

    #[test]
    fn patient_without_training_searches_excluded() {
        let ds = dataset(&[
            enc("a", 0, &["x"]),
            search("a", 1, "flu"),
            search("a", 11, "flu"),
            enc("b", 0, &["y"]),
            search("b", 11, "flu"),
        ]);
        let split = cutoff_split(&ds, t(10), &SessionConfig::default()).unwrap();
        assert_eq!(split.test_points.len(), 1);
        assert_eq!(split.test_points[0].point.patient, PatientId::from("a"));
        assert_eq!(split.train.histories.len(), 1);
        assert_eq!(split.train.codes.len(), 1);
        assert_eq!(split.stats.train_patients, 1);
        assert_eq!(split.test_points[0].truth, Some(TermId(0)));
    }

    #[test]
    fn prefix_stops_at_session_boundary() {
        let ds = dataset(&[
            enc("a", 0, &["x"]),
            search("a", 1, "flu"),
            search("a", 200, "cough"),
            search("a", 201, "flu"),
        ]);
        let split = cutoff_split(&ds, t(201), &SessionConfig::default()).unwrap();
        let tp = &split.test_points[0];
        assert_eq!(tp.point.prefix.len(), 1);
        assert_eq!(split.train.terms.raw(tp.point.prefix[0]), Some("cough"));
        assert_eq!(tp.point.encounters.len(), 1);
    }

    #[test]
    fn quantile_cutoff() {
        let ds = dataset(&[
            enc("a", 0, &["x"]),
            search("a", 1, "flu"),
            search("a", 2, "flu"),
            search("a", 3, "flu"),
            search("a", 4, "flu"),
            search("a", 5, "flu"),
        ]);
        assert_eq!(cutoff_at_quantile(&ds, 0.8).unwrap(), t(4));
        assert_eq!(cutoff_at_quantile(&ds, 0.0).unwrap(), t(1));
        assert_eq!(cutoff_at_quantile(&ds, 1.0).unwrap(), t(5));
        assert!(cutoff_at_quantile(&ds, 1.5).is_err());
    }

    #[test]
    fn hit_rate_examples() {
        let lists = vec![ScoredList::from_scores(&[3.0, 2.0, 1.0]); 2];
        let truths = [Some(TermId(0)), Some(TermId(0))];
        assert_eq!(hit_rate(&lists, &truths, 1), 1.0);

        let ranks = [Some(6)];
        assert_eq!(hit_rate_from_ranks(&ranks, 5), 0.0);
        assert_eq!(hit_rate_from_ranks(&ranks, 10), 1.0);

        let truths = [Some(TermId(2)), None];
        assert_eq!(hit_rate(&lists, &truths, 3), 0.5);
    }

    #[test]
    fn equal_lengths_give_equal_groups() {
        let lengths = vec![3; 10];
        let ranks = vec![Some(1); 10];
        let strata = stratify(&lengths, &ranks);
        assert_eq!(strata.len(), 5);
        assert!(strata.iter().all(|s| s.points == 2));
    }

    #[test]
    fn strata_boundaries_follow_sorted_lengths() {
        let lengths = vec![26, 2, 15, 4, 9, 6, 2, 40, 3, 11];
        let ranks = vec![None; 10];
        let strata = stratify(&lengths, &ranks);
        let mut sorted = lengths.clone();
        sorted.sort();
        for (g, s) in strata.iter().enumerate() {
            assert_eq!(s.min_length, sorted[2 * g]);
            assert_eq!(s.max_length, sorted[2 * g + 1]);
        }
    }

    #[test]
    fn single_session_falls_back_to_one_group() {
        let strata = stratify(&[4], &[Some(2)]);
        assert_eq!(strata.len(), 1);
        assert_eq!(strata[0].hit_rates, [0.0, 1.0, 1.0]);
    }

    #[test]
    fn grid_parsing() {
        let g = Grid::parse("ms=1,2,all\nmc=2 # comment\nalpha=0,0.5\n", Grid::default()).unwrap();
        assert_eq!(g.ms, vec![RecentWindow::Last(1), RecentWindow::Last(2), RecentWindow::All]);
        assert_eq!(g.mc, vec![2]);
        assert_eq!(g.alpha, vec![0.0, 0.5]);
        assert_eq!(g.d, vec![32, 64]);
        assert!(Grid::parse("bogus=1", Grid::default()).is_err());
        assert!(Grid::parse("mc=0", Grid::default()).is_err());
        assert!(Grid::parse("alpha", Grid::default()).is_err());
        let bad = Grid { alpha: vec![1.5], ..Grid::default() };
        assert!(bad.validate(MethodKind::Hcfm).is_err());
    }

    fn toy() -> Dataset {
        let mut records = Vec::new();
        for p in 0..8 {
            let pid = format!("p{p}");
            for k in 0..4 {
                let day = 10 * k + p;
                let code = format!("c{}", (p + k) % 4);
                records.push(enc(&pid, day, &[&code]));
                records.push(search(&pid, day + 1, &format!("t{}", (p + k) % 4)));
                records.push(search(&pid, day + 2, &format!("t{}", (p + k + 1) % 4)));
            }
        }
        dataset(&records)
    }

    #[test]
    fn singleton_grid_gives_one_report() {
        let ds = toy();
        let split = cutoff_split(&ds, t(30), &SessionConfig::default()).unwrap();
        let grid = Grid::single(RecentWindow::All, 1, 0.5, 2, 0.01, 0.5);
        let reports = grid_search(&split, MethodKind::Hcfm, &grid, &EvalSettings::default()).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].best.len(), HR_KS.len());
        let ptn = grid_search(&split, MethodKind::Ptn, &grid, &EvalSettings::default()).unwrap();
        assert_eq!(ptn.len(), 1);
        assert!(ptn[0].params.is_empty());
    }

    #[test]
    fn reports_sorted_and_monotone() {
        let ds = toy();
        let split = cutoff_split(&ds, t(30), &SessionConfig::default()).unwrap();
        let grid = Grid {
            ms: vec![RecentWindow::Last(1), RecentWindow::All],
            mc: vec![1, 2],
            alpha: vec![0.0, 0.5, 1.0],
            d: vec![2],
            gamma: vec![0.01],
            ..Grid::default()
        };
        let settings = EvalSettings::default();
        for kind in [MethodKind::Hcfm, MethodKind::Copm, MethodKind::Ptn, MethodKind::Tptcf, MethodKind::Random] {
            let reports = grid_search(&split, kind, &grid, &settings).unwrap();
            for w in reports.windows(2) {
                assert!(w[0].hr(5) >= w[1].hr(5));
            }
            for r in &reports {
                assert!(r.hit_rates.windows(2).all(|w| w[0] <= w[1]), "{r:?}");
            }
        }
        let reports = grid_search(&split, MethodKind::Hcfm, &grid, &settings).unwrap();
        assert_eq!(reports.len(), 12);
        let csv = reports_to_csv(&reports);
        assert!(csv.starts_with("method,ms,mc,alpha,d,gamma,hr1,hr2,hr3,hr4,hr5,hr10,hr20\n"));
        assert_eq!(csv.lines().count(), 13);
        assert!(reports_to_text(&reports).contains('*'));
    }

    #[test]
    fn too_large_dimension_is_usage_error() {
        let ds = toy();
        let split = cutoff_split(&ds, t(30), &SessionConfig::default()).unwrap();
        let grid = Grid::single(RecentWindow::All, 1, 0.5, 32, 0.01, 0.5);
        assert!(matches!(
            grid_search(&split, MethodKind::Hcfm, &grid, &EvalSettings::default()),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn training_set_ignores_post_cutoff_events() {
        let ds = toy();
        let cutoff = t(25);
        let full = TrainingSet::build(&ds, cutoff, &SessionConfig::default()).unwrap();
        let mut truncated = ds.clone();
        for h in truncated.histories.values_mut() {
            *h = h.truncate_before(cutoff).unwrap();
        }
        let again = TrainingSet::build(&truncated, cutoff, &SessionConfig::default()).unwrap();
        assert_eq!(full, again);
    }

    proptest! {
        #[test]
        fn hit_rate_monotone_in_k(ranks in proptest::collection::vec(proptest::option::of(1usize..30), 1..50)) {
            let hr: Vec<f64> = HR_KS.iter().map(|&k| hit_rate_from_ranks(&ranks, k)).collect();
            prop_assert!(hr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(hr.iter().all(|&h| (0.0..=1.0).contains(&h)));
        }

        #[test]
        fn strata_partition_points(lengths in proptest::collection::vec(1usize..40, 1..60)) {
            let ranks = vec![Some(1); lengths.len()];
            let strata = stratify(&lengths, &ranks);
            prop_assert_eq!(strata.iter().map(|s| s.points).sum::<usize>(), lengths.len());
            for w in strata.windows(2) {
                prop_assert!(w[0].max_length <= w[1].min_length);
                prop_assert!(w[0].points.abs_diff(w[1].points) <= 1);
            }
        }
    }
}
