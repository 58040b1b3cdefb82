//! Identifiers, timestamped events and per-patient histories.
//!
//! Everything downstream indexes into a [`PatientHistory`]: the sorted search
//! sequence `S_p`, the sorted encounter sequence `C_p`, the search-to-encounter
//! matching, and the inverted indices `C_p(c)` and `C_p(s)`.
//!
//! Internal sequence positions are 0-based. The range accessors
//! ([`PatientHistory::search_range`], [`PatientHistory::encounter_range`]) take
//! 1-based inclusive bounds, the convention used in reports and logs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::marker::PhantomData;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// UTC instant at one-second resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_secs(secs: i64) -> Self {
        Timestamp(secs)
    }

    pub const fn secs(self) -> i64 {
        self.0
    }

    /// Parses an RFC 3339 / ISO-8601 instant. Sub-second digits are truncated.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        DateTime::parse_from_rfc3339(s)
            .map(|dt| Timestamp(dt.timestamp()))
            .map_err(|_| Error::Timestamp(s.to_string()))
    }

    pub fn plus_secs(self, secs: i64) -> Self {
        Timestamp(self.0 + secs)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match DateTime::<Utc>::from_timestamp(self.0, 0) {
            Some(dt) => f.write_str(&dt.to_rfc3339_opts(SecondsFormat::Secs, true)),
            None => write!(f, "@{}", self.0),
        }
    }
}

impl FromStr for Timestamp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Timestamp::parse(s)
    }
}

impl From<Timestamp> for String {
    fn from(t: Timestamp) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Timestamp {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Timestamp::parse(&s)
    }
}

/// Dense identifier handed out by a [`Dictionary`].
pub trait DenseId: Copy + Ord + fmt::Debug {
    fn from_index(index: usize) -> Self;
    fn index(self) -> usize;
}

macro_rules! dense_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub u32);

        impl DenseId for $name {
            fn from_index(index: usize) -> Self {
                $name(u32::try_from(index).expect("dictionary exceeds u32 ids"))
            }

            fn index(self) -> usize {
                self.0 as usize
            }
        }
    };
}

dense_id!(
    /// Row of `A` and `U`.
    CodeId
);
dense_id!(
    /// Column of `A`, row of `V`.
    TermId
);

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatientId(pub String);

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PatientId {
    fn from(s: &str) -> Self {
        PatientId(s.to_string())
    }
}

/// Bijection between raw strings and dense ids, assigned in first-seen order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Dictionary<I> {
    raws: Vec<String>,
    lookup: HashMap<String, u32>,
    _id: PhantomData<I>,
}

impl<I> Default for Dictionary<I> {
    fn default() -> Self {
        Dictionary {
            raws: Vec::new(),
            lookup: HashMap::new(),
            _id: PhantomData,
        }
    }
}

impl<I> Clone for Dictionary<I> {
    fn clone(&self) -> Self {
        Dictionary {
            raws: self.raws.clone(),
            lookup: self.lookup.clone(),
            _id: PhantomData,
        }
    }
}

impl<I> PartialEq for Dictionary<I> {
    fn eq(&self, other: &Self) -> bool {
        self.raws == other.raws
    }
}

impl<I> Eq for Dictionary<I> {}

impl<I> From<Vec<String>> for Dictionary<I> {
    fn from(raws: Vec<String>) -> Self {
        let mut dict = Dictionary::default();
        for raw in raws {
            dict.insert_raw(raw);
        }
        dict
    }
}

impl<I> From<Dictionary<I>> for Vec<String> {
    fn from(dict: Dictionary<I>) -> Vec<String> {
        dict.raws
    }
}

impl<I> Dictionary<I> {
    fn insert_raw(&mut self, raw: String) -> u32 {
        if let Some(&id) = self.lookup.get(&raw) {
            return id;
        }
        let id = u32::try_from(self.raws.len()).expect("dictionary exceeds u32 ids");
        self.lookup.insert(raw.clone(), id);
        self.raws.push(raw);
        id
    }

    pub fn len(&self) -> usize {
        self.raws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raws.is_empty()
    }

    pub fn raws(&self) -> &[String] {
        &self.raws
    }

    /// SHA-256 over the raw strings in id order.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for raw in &self.raws {
            hasher.update((raw.len() as u64).to_le_bytes());
            hasher.update(raw.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

impl<I: DenseId> Dictionary<I> {
    pub fn intern(&mut self, raw: &str) -> I {
        if let Some(&id) = self.lookup.get(raw) {
            return I::from_index(id as usize);
        }
        I::from_index(self.insert_raw(raw.to_string()) as usize)
    }

    pub fn get(&self, raw: &str) -> Option<I> {
        self.lookup.get(raw).map(|&id| I::from_index(id as usize))
    }

    pub fn raw(&self, id: I) -> Option<&str> {
        self.raws.get(id.index()).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (I, &str)> + '_ {
        self.raws
            .iter()
            .enumerate()
            .map(|(i, raw)| (I::from_index(i), raw.as_str()))
    }
}

pub type CodeDictionary = Dictionary<CodeId>;
pub type TermDictionary = Dictionary<TermId>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub patient: PatientId,
    pub time: Timestamp,
    /// Sorted, without duplicates.
    pub codes: Vec<CodeId>,
    pub seq_index: usize,
}

impl Encounter {
    pub fn new(patient: PatientId, time: Timestamp, codes: impl IntoIterator<Item = CodeId>) -> Self {
        let mut codes: Vec<CodeId> = codes.into_iter().collect();
        codes.sort_unstable();
        codes.dedup();
        Encounter {
            patient,
            time,
            codes,
            seq_index: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchEvent {
    pub patient: PatientId,
    pub time: Timestamp,
    pub term: TermId,
    pub seq_index: usize,
    /// Position in `C_p` of the latest encounter with `time <= self.time`.
    pub matched_encounter: Option<usize>,
    pub session_id: Option<usize>,
}

impl SearchEvent {
    pub fn new(patient: PatientId, time: Timestamp, term: TermId) -> Self {
        SearchEvent {
            patient,
            time,
            term,
            seq_index: 0,
            matched_encounter: None,
            session_id: None,
        }
    }
}

/// `C_p(c)` and `C_p(s)`: code to containing encounters, term to matched encounters.
pub type InvertedIndices = (BTreeMap<CodeId, Vec<usize>>, BTreeMap<TermId, Vec<usize>>);

/// One patient's chronologically sorted searches and encounters.
///
/// Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientHistory {
    patient: PatientId,
    searches: Vec<SearchEvent>,
    encounters: Vec<Encounter>,
    by_code: BTreeMap<CodeId, Vec<usize>>,
    by_term: BTreeMap<TermId, Vec<usize>>,
}

impl PatientHistory {
    /// Sorts both streams stably by time, assigns sequence positions, matches
    /// every search to its most recent encounter at or before it, and fills the
    /// inverted indices.
    ///
    /// A search and an encounter sharing a timestamp match: the encounter
    /// counts as preceding the search.
    pub fn build(
        patient: PatientId,
        mut encounters: Vec<Encounter>,
        mut searches: Vec<SearchEvent>,
    ) -> Result<Self> {
        let foreign = encounters
            .iter()
            .map(|e| &e.patient)
            .chain(searches.iter().map(|s| &s.patient))
            .find(|p| **p != patient);
        if let Some(found) = foreign {
            return Err(Error::MixedPatients {
                expected: patient.0.clone(),
                found: found.0.clone(),
            });
        }

        encounters.sort_by_key(|e| e.time);
        searches.sort_by_key(|s| s.time);

        let mut by_code: BTreeMap<CodeId, Vec<usize>> = BTreeMap::new();
        for (i, enc) in encounters.iter_mut().enumerate() {
            enc.seq_index = i;
            enc.codes.sort_unstable();
            enc.codes.dedup();
            for &c in &enc.codes {
                by_code.entry(c).or_default().push(i);
            }
        }

        let mut by_term: BTreeMap<TermId, Vec<usize>> = BTreeMap::new();
        let mut cursor = 0;
        for (i, search) in searches.iter_mut().enumerate() {
            search.seq_index = i;
            while cursor < encounters.len() && encounters[cursor].time <= search.time {
                cursor += 1;
            }
            search.matched_encounter = cursor.checked_sub(1);
            if let Some(e) = search.matched_encounter {
                by_term.entry(search.term).or_default().push(e);
            }
        }

        Ok(PatientHistory {
            patient,
            searches,
            encounters,
            by_code,
            by_term,
        })
    }

    pub fn patient(&self) -> &PatientId {
        &self.patient
    }

    /// `S_p`.
    pub fn searches(&self) -> &[SearchEvent] {
        &self.searches
    }

    /// `C_p`.
    pub fn encounters(&self) -> &[Encounter] {
        &self.encounters
    }

    /// `n_p`.
    pub fn n_searches(&self) -> usize {
        self.searches.len()
    }

    /// `l_p`.
    pub fn n_encounters(&self) -> usize {
        self.encounters.len()
    }

    /// True when the history has no searches or no encounters; preprocessing
    /// drops such patients.
    pub fn is_degenerate(&self) -> bool {
        self.searches.is_empty() || self.encounters.is_empty()
    }

    /// `C_p(c)`: positions of encounters containing `code`.
    pub fn encounters_with_code(&self, code: CodeId) -> &[usize] {
        self.by_code.get(&code).map_or(&[], Vec::as_slice)
    }

    /// `C_p(s)`: matched-encounter positions, one entry per search of `term`.
    pub fn encounters_matched_to_term(&self, term: TermId) -> &[usize] {
        self.by_term.get(&term).map_or(&[], Vec::as_slice)
    }

    pub fn code_index(&self) -> &BTreeMap<CodeId, Vec<usize>> {
        &self.by_code
    }

    pub fn term_index(&self) -> &BTreeMap<TermId, Vec<usize>> {
        &self.by_term
    }

    /// Derives both inverted indices from `S_p` and `C_p` alone.
    pub fn recompute_indices(&self) -> InvertedIndices {
        let mut by_code = BTreeMap::new();
        let codes: std::collections::BTreeSet<CodeId> = self
            .encounters
            .iter()
            .flat_map(|e| e.codes.iter().copied())
            .collect();
        for c in codes {
            let hits: Vec<usize> = self
                .encounters
                .iter()
                .filter(|e| e.codes.contains(&c))
                .map(|e| e.seq_index)
                .collect();
            by_code.insert(c, hits);
        }
        let mut by_term: BTreeMap<TermId, Vec<usize>> = BTreeMap::new();
        for s in &self.searches {
            if let Some(e) = s.matched_encounter {
                by_term.entry(s.term).or_default().push(e);
            }
        }
        (by_code, by_term)
    }

    /// `S_p(i, j)` with 1-based inclusive bounds.
    pub fn search_range(&self, i: usize, j: usize) -> Result<&[SearchEvent]> {
        one_based_slice(&self.searches, i, j, "search")
    }

    /// `C_p(i, j)` with 1-based inclusive bounds.
    pub fn encounter_range(&self, i: usize, j: usize) -> Result<&[Encounter]> {
        one_based_slice(&self.encounters, i, j, "encounter")
    }

    /// Keeps only events strictly before `cutoff`. Session ids are retained.
    pub fn truncate_before(&self, cutoff: Timestamp) -> Result<PatientHistory> {
        let encounters = self
            .encounters
            .iter()
            .filter(|e| e.time < cutoff)
            .cloned()
            .collect();
        let searches = self
            .searches
            .iter()
            .filter(|s| s.time < cutoff)
            .cloned()
            .collect();
        PatientHistory::build(self.patient.clone(), encounters, searches)
    }

    /// Rewrites code and term ids, dropping codes/searches mapped to `None`.
    pub fn remap(
        &self,
        mut code_map: impl FnMut(CodeId) -> Option<CodeId>,
        mut term_map: impl FnMut(TermId) -> Option<TermId>,
    ) -> Result<PatientHistory> {
        let encounters = self
            .encounters
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.codes = e.codes.iter().filter_map(|&c| code_map(c)).collect();
                e
            })
            .collect();
        let searches = self
            .searches
            .iter()
            .filter_map(|s| {
                term_map(s.term).map(|t| {
                    let mut s = s.clone();
                    s.term = t;
                    s
                })
            })
            .collect();
        PatientHistory::build(self.patient.clone(), encounters, searches)
    }

    pub(crate) fn set_session_ids(&mut self, ids: &[usize]) {
        debug_assert_eq!(ids.len(), self.searches.len());
        for (s, &id) in self.searches.iter_mut().zip(ids) {
            s.session_id = Some(id);
        }
    }
}

fn one_based_slice<'a, T>(items: &'a [T], i: usize, j: usize, what: &str) -> Result<&'a [T]> {
    if i == 0 || i > j || j > items.len() {
        return Err(Error::OutOfRange(format!(
            "{what} range ({i}, {j}) outside 1..={}",
            items.len()
        )));
    }
    Ok(&items[i - 1..j])
}
