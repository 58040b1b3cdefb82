//! Event-file parsing, term normalization and dataset cleanup.
//!
//! Encounter file: `patient_id,timestamp,icd_codes` with the codes joined by
//! `;` inside one quoted field. Search file: `patient_id,timestamp,term`.
//! Lines starting with `#` are comments.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::{
    CodeDictionary, CodeId, Encounter, PatientHistory, PatientId, SearchEvent, TermDictionary, Timestamp,
};
use crate::error::{Error, Result};
use crate::sessionization::{segment, SessionConfig};

pub const ENCOUNTER_HEADER: [&str; 3] = ["patient_id", "timestamp", "icd_codes"];
pub const SEARCH_HEADER: [&str; 3] = ["patient_id", "timestamp", "term"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RawRecord {
    Encounter {
        patient: PatientId,
        time: Timestamp,
        codes: Vec<String>,
    },
    Search {
        patient: PatientId,
        time: Timestamp,
        term: String,
    },
}

impl RawRecord {
    pub fn patient(&self) -> &PatientId {
        match self {
            RawRecord::Encounter { patient, .. } | RawRecord::Search { patient, .. } => patient,
        }
    }

    pub fn time(&self) -> Timestamp {
        match self {
            RawRecord::Encounter { time, .. } | RawRecord::Search { time, .. } => *time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub source: String,
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct ParsedEvents {
    pub records: Vec<RawRecord>,
    pub errors: Vec<LineError>,
}

/// Exact-match term rewrites applied after normalization.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynonymMap(HashMap<String, String>);

impl SynonymMap {
    pub fn new() -> Self {
        SynonymMap::default()
    }

    pub fn insert(&mut self, from: &str, to: &str) {
        self.0.insert(normalize_term(from, None), normalize_term(to, None));
    }

    pub fn get(&self, term: &str) -> Option<&str> {
        self.0.get(term).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Reads a `from,to` CSV.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut map = SynonymMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            match (rec.get(0), rec.get(1)) {
                (Some(from), Some(to)) => map.insert(from, to),
                _ => return Err(Error::format("synonym map", format!("short row {rec:?}"))),
            }
        }
        Ok(map)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }
}

/// Lowercases, trims and collapses internal whitespace runs, then applies the
/// synonym map once.
pub fn normalize_term(raw: &str, synonyms: Option<&SynonymMap>) -> String {
    let base = raw
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    match synonyms.and_then(|m| m.get(&base)) {
        Some(to) => to.to_string(),
        None => base,
    }
}

/// Empty, all-digit or all-punctuation terms.
pub fn is_irregular(term: &str) -> bool {
    let mut chars = term.chars().filter(|c| !c.is_whitespace()).peekable();
    if chars.peek().is_none() {
        return true;
    }
    let chars: Vec<char> = chars.collect();
    chars.iter().all(|c| c.is_numeric()) || chars.iter().all(|c| !c.is_alphanumeric())
}

fn reader_for<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(reader)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str; 3], source: &str) -> Result<()> {
    let header = rdr.headers()?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::format(
            "event file header",
            format!("{source}: expected {expected:?}, found {got:?}"),
        ));
    }
    Ok(())
}

fn parse_lines<R: Read>(
    reader: R,
    source: &str,
    header: &[&str; 3],
    out: &mut ParsedEvents,
    mut make: impl FnMut(PatientId, Timestamp, &str) -> std::result::Result<RawRecord, String>,
) -> Result<usize> {
    let mut rdr = reader_for(reader);
    check_header(&mut rdr, header, source)?;
    let mut lines = 0;
    for rec in rdr.records() {
        lines += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                out.errors.push(LineError {
                    source: source.to_string(),
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        let parsed = (|| {
            if rec.len() != 3 {
                return Err(format!("expected 3 fields, found {}", rec.len()));
            }
            let patient = rec[0].trim();
            if patient.is_empty() {
                return Err("empty patient id".to_string());
            }
            let time = Timestamp::parse(&rec[1]).map_err(|e| e.to_string())?;
            make(PatientId::from(patient), time, &rec[2])
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(LineError {
                source: source.to_string(),
                line,
                message,
            }),
        }
    }
    Ok(lines)
}

pub fn parse_encounters<R: Read>(reader: R, source: &str, out: &mut ParsedEvents) -> Result<usize> {
    parse_lines(reader, source, &ENCOUNTER_HEADER, out, |patient, time, field| {
        let codes: Vec<String> = field
            .split(';')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::to_string)
            .collect();
        if codes.is_empty() {
            return Err("empty ICD code list".to_string());
        }
        Ok(RawRecord::Encounter { patient, time, codes })
    })
}

pub fn parse_searches<R: Read>(reader: R, source: &str, out: &mut ParsedEvents) -> Result<usize> {
    parse_lines(reader, source, &SEARCH_HEADER, out, |patient, time, field| {
        let term = normalize_term(field, None);
        if term.is_empty() {
            return Err("empty search term".to_string());
        }
        Ok(RawRecord::Search { patient, time, term })
    })
}

/// Parses both event files. Malformed lines are reported in
/// [`ParsedEvents::errors`]; the call fails only if every line is malformed.
pub fn parse_events(encounter_file: &Path, search_file: &Path) -> Result<ParsedEvents> {
    let mut out = ParsedEvents::default();
    let mut lines = 0;
    for (path, is_encounter) in [(encounter_file, true), (search_file, false)] {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let source = path.display().to_string();
        lines += if is_encounter {
            parse_encounters(file, &source, &mut out)?
        } else {
            parse_searches(file, &source, &mut out)?
        };
    }
    if lines > 0 && out.records.is_empty() {
        return Err(Error::AllLinesFailed(lines));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub min_searches_per_patient: usize,
    pub min_encounters_per_patient: usize,
    pub min_term_frequency: usize,
    pub drop_irregular_terms: bool,
    pub synonym_map: Option<SynonymMap>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_searches_per_patient: 2,
            min_encounters_per_patient: 3,
            min_term_frequency: 2,
            drop_irregular_terms: true,
            synonym_map: None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_searches_per_patient == 0
            || self.min_encounters_per_patient == 0
            || self.min_term_frequency == 0
        {
            return Err(Error::InvalidParameter("preprocessing minima must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stage: String,
    pub patients: usize,
    pub encounters: usize,
    pub searches: usize,
    pub unique_terms: usize,
    pub unique_codes: usize,
}

impl StageCounts {
    fn measure(stage: &str, encounters: &[&RawRecord], searches: &[(&PatientId, Timestamp, String)]) -> Self {
        let mut patients = BTreeSet::new();
        let mut codes = BTreeSet::new();
        for r in encounters {
            if let RawRecord::Encounter { patient, codes: cs, .. } = r {
                patients.insert(patient);
                codes.extend(cs.iter());
            }
        }
        let mut terms = BTreeSet::new();
        for (p, _, t) in searches {
            patients.insert(p);
            terms.insert(t);
        }
        StageCounts {
            stage: stage.to_string(),
            patients: patients.len(),
            encounters: encounters.len(),
            searches: searches.len(),
            unique_terms: terms.len(),
            unique_codes: codes.len(),
        }
    }
}

/// Survivor counts after each preprocessing stage, in application order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub stages: Vec<StageCounts>,
    pub irregular_terms_dropped: usize,
    pub rare_terms_dropped: usize,
    pub synonym_rewrites: usize,
}

impl FilterReport {
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            let _ = writeln!(out, "{}.patients={}", s.stage, s.patients);
            let _ = writeln!(out, "{}.encounters={}", s.stage, s.encounters);
            let _ = writeln!(out, "{}.searches={}", s.stage, s.searches);
            let _ = writeln!(out, "{}.unique_search_terms={}", s.stage, s.unique_terms);
            let _ = writeln!(out, "{}.unique_icd_codes={}", s.stage, s.unique_codes);
        }
        let _ = writeln!(out, "irregular_terms_dropped={}", self.irregular_terms_dropped);
        let _ = writeln!(out, "rare_terms_dropped={}", self.rare_terms_dropped);
        let _ = writeln!(out, "synonym_rewrites={}", self.synonym_rewrites);
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<26} {:>9} {:>11} {:>9} {:>13} {:>11}",
            "stage", "patients", "encounters", "searches", "unique terms", "unique ICD"
        );
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{:<26} {:>9} {:>11} {:>9} {:>13} {:>11}",
                s.stage, s.patients, s.encounters, s.searches, s.unique_terms, s.unique_codes
            );
        }
        out
    }
}

/// Cleaned dataset: per-patient histories in patient-id order plus the global
/// dictionaries.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub histories: BTreeMap<PatientId, PatientHistory>,
    pub codes: CodeDictionary,
    pub terms: TermDictionary,
    pub report: FilterReport,
}

/// Term filters first (irregular, then global frequency), then patient minima.
/// Single pass: dropping a patient does not trigger a term recount.
pub fn apply_filters(records: &[RawRecord], config: &PreprocessConfig) -> Result<Dataset> {
    config.validate()?;
    let mut report = FilterReport::default();

    let encounters: Vec<&RawRecord> = records
        .iter()
        .filter(|r| matches!(r, RawRecord::Encounter { .. }))
        .collect();
    let mut searches: Vec<(&PatientId, Timestamp, String)> = Vec::new();
    for r in records {
        if let RawRecord::Search { patient, time, term } = r {
            let normalized = normalize_term(term, config.synonym_map.as_ref());
            if normalized != normalize_term(term, None) {
                report.synonym_rewrites += 1;
            }
            searches.push((patient, *time, normalized));
        }
    }
    report.stages.push(StageCounts::measure("parsed", &encounters, &searches));

    if config.drop_irregular_terms {
        let irregular: BTreeSet<&str> = searches
            .iter()
            .filter(|(_, _, t)| is_irregular(t))
            .map(|(_, _, t)| t.as_str())
            .collect();
        report.irregular_terms_dropped = irregular.len();
        searches.retain(|(_, _, t)| !is_irregular(t));
    }
    report
        .stages
        .push(StageCounts::measure("irregular_terms_removed", &encounters, &searches));

    let mut freq: HashMap<&str, usize> = HashMap::new();
    for (_, _, t) in &searches {
        *freq.entry(t.as_str()).or_default() += 1;
    }
    let rare: BTreeSet<String> = freq
        .iter()
        .filter(|(_, &n)| n < config.min_term_frequency)
        .map(|(t, _)| t.to_string())
        .collect();
    report.rare_terms_dropped = rare.len();
    searches.retain(|(_, _, t)| !rare.contains(t));
    report
        .stages
        .push(StageCounts::measure("rare_terms_removed", &encounters, &searches));

    let mut search_count: HashMap<&PatientId, usize> = HashMap::new();
    for (p, _, _) in &searches {
        *search_count.entry(*p).or_default() += 1;
    }
    let mut encounter_count: HashMap<&PatientId, usize> = HashMap::new();
    for r in &encounters {
        *encounter_count.entry(r.patient()).or_default() += 1;
    }
    let keep = |p: &PatientId| {
        search_count.get(p).copied().unwrap_or(0) >= config.min_searches_per_patient
            && encounter_count.get(p).copied().unwrap_or(0) >= config.min_encounters_per_patient
    };
    let encounters: Vec<&RawRecord> = encounters.into_iter().filter(|r| keep(r.patient())).collect();
    searches.retain(|(p, _, _)| keep(p));
    report
        .stages
        .push(StageCounts::measure("patients_filtered", &encounters, &searches));

    if searches.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut codes = CodeDictionary::default();
    let mut terms = TermDictionary::default();
    let mut per_patient: BTreeMap<PatientId, (Vec<Encounter>, Vec<SearchEvent>)> = BTreeMap::new();
    for r in &encounters {
        if let RawRecord::Encounter { patient, time, codes: raw } = r {
            let ids: Vec<CodeId> = raw.iter().map(|c| codes.intern(c)).collect();
            per_patient
                .entry(patient.clone())
                .or_default()
                .0
                .push(Encounter::new(patient.clone(), *time, ids));
        }
    }
    for (patient, time, term) in &searches {
        let id = terms.intern(term);
        per_patient
            .entry((*patient).clone())
            .or_default()
            .1
            .push(SearchEvent::new((*patient).clone(), *time, id));
    }

    let histories = per_patient
        .into_iter()
        .map(|(p, (e, s))| PatientHistory::build(p.clone(), e, s).map(|h| (p, h)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    Ok(Dataset {
        histories,
        codes,
        terms,
        report,
    })
}

/// Summary statistics of a cleaned dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub patients: usize,
    pub unique_terms: usize,
    pub unique_codes: usize,
    pub encounters: usize,
    pub sessions: usize,
    pub searches_per_patient: f64,
    pub unique_terms_per_patient: f64,
    pub encounters_per_patient: f64,
    pub sessions_per_patient: f64,
    pub searches_per_term: f64,
    pub searches_per_session: f64,
    pub codes_per_encounter: f64,
}

pub fn dataset_stats(dataset: &Dataset, sessions: &SessionConfig) -> DatasetStats {
    let patients = dataset.histories.len();
    let mut encounters = 0;
    let mut searches = 0;
    let mut n_sessions = 0;
    let mut unique_per_patient = 0;
    let mut code_slots = 0;
    for h in dataset.histories.values() {
        encounters += h.n_encounters();
        searches += h.n_searches();
        n_sessions += segment(h, sessions).len();
        unique_per_patient += h.searches().iter().map(|s| s.term).collect::<BTreeSet<_>>().len();
        code_slots += h.encounters().iter().map(|e| e.codes.len()).sum::<usize>();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    DatasetStats {
        patients,
        unique_terms: dataset.terms.len(),
        unique_codes: dataset.codes.len(),
        encounters,
        sessions: n_sessions,
        searches_per_patient: ratio(searches, patients),
        unique_terms_per_patient: ratio(unique_per_patient, patients),
        encounters_per_patient: ratio(encounters, patients),
        sessions_per_patient: ratio(n_sessions, patients),
        searches_per_term: ratio(searches, dataset.terms.len()),
        searches_per_session: ratio(searches, n_sessions),
        codes_per_encounter: ratio(code_slots, encounters),
    }
}

impl DatasetStats {
    pub fn to_text(&self) -> String {
        let rows: [(&str, String); 12] = [
            ("Number of patients", self.patients.to_string()),
            ("Number of unique search terms", self.unique_terms.to_string()),
            ("Number of unique ICD codes", self.unique_codes.to_string()),
            ("Number of encounters", self.encounters.to_string()),
            ("Number of sessions", self.sessions.to_string()),
            ("Average number of searches per patient", format!("{:.2}", self.searches_per_patient)),
            (
                "Average number of unique search terms per patient",
                format!("{:.2}", self.unique_terms_per_patient),
            ),
            ("Average number of encounters per patient", format!("{:.2}", self.encounters_per_patient)),
            ("Average number of sessions per patient", format!("{:.2}", self.sessions_per_patient)),
            ("Average number of searches per term", format!("{:.2}", self.searches_per_term)),
            ("Average number of search records per session", format!("{:.2}", self.searches_per_session)),
            (
                "Average number of unique ICD codes per encounter",
                format!("{:.2}", self.codes_per_encounter),
            ),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<52} {v:>10}");
        }
        out
    }
}
