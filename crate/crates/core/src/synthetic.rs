//! Seeded generator of encounter and search files with a planted code → term
//! preference.
//!
//! Each patient gets a run of encounters separated by exponential gaps (plus
//! an occasional gap longer than the session window). The searches attached
//! to encounter `k` fall in the hours just before encounter `k + 1`, so they
//! are all matched to `e_k`. A search is the planted term of a code drawn
//! uniformly from `e_k` with probability `p_signal`, otherwise a uniform
//! random term.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::data_model::{Timestamp, SECONDS_PER_DAY};
use crate::error::{Error, Result};

const HOUR: i64 = 3_600;
const MAX_SEARCHES_PER_ENCOUNTER: usize = 20;
const LONG_GAP_DAYS: i64 = 120;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub n_codes: usize,
    pub n_terms: usize,
    /// Poisson mean; clamped below at 3 unless `sparse`.
    pub encounters_per_patient: f64,
    /// Mean number of distinct codes per encounter (at least one).
    pub codes_per_encounter: f64,
    /// Poisson mean; clamped below at 1 unless `sparse`.
    pub searches_per_encounter: f64,
    pub p_signal: f64,
    /// Probability that a gap between encounters is stretched past 90 days.
    pub session_gap_rate: f64,
    pub mean_gap_days: f64,
    /// Patients start uniformly within this many days of `start`.
    pub start_spread_days: i64,
    pub start: Timestamp,
    /// Planted term per code; empty means `c * n_terms / n_codes`.
    pub planted_map: Vec<usize>,
    /// Skip the clamps so that some patients fall below preprocessing minima.
    pub sparse: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 42,
            n_patients: 200,
            n_codes: 30,
            n_terms: 60,
            encounters_per_patient: 8.0,
            codes_per_encounter: 1.0,
            searches_per_encounter: 3.0,
            p_signal: 0.9,
            session_gap_rate: 0.1,
            mean_gap_days: 20.0,
            start_spread_days: 30,
            start: Timestamp::from_secs(1_325_376_000),
            planted_map: Vec::new(),
            sparse: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        let mean_ok = |x: f64| x.is_finite() && x >= 0.0;
        if self.n_patients == 0 {
            return bad("n_patients must be >= 1".into());
        }
        if self.n_codes < 2 || self.n_terms < 2 {
            return bad(format!("n_codes and n_terms must be >= 2, got {} and {}", self.n_codes, self.n_terms));
        }
        if !(0.0..=1.0).contains(&self.p_signal) {
            return bad(format!("p_signal must lie in [0, 1], got {}", self.p_signal));
        }
        if !(0.0..=1.0).contains(&self.session_gap_rate) {
            return bad(format!("session_gap_rate must lie in [0, 1], got {}", self.session_gap_rate));
        }
        if !mean_ok(self.encounters_per_patient) || !mean_ok(self.searches_per_encounter) {
            return bad("per-patient and per-encounter means must be finite and >= 0".into());
        }
        if !(self.codes_per_encounter >= 1.0 && self.codes_per_encounter <= self.n_codes as f64) {
            return bad(format!(
                "codes_per_encounter must lie in [1, n_codes], got {}",
                self.codes_per_encounter
            ));
        }
        if !(self.mean_gap_days.is_finite() && self.mean_gap_days > 0.0) {
            return bad(format!("mean_gap_days must be positive, got {}", self.mean_gap_days));
        }
        if self.start_spread_days < 0 {
            return bad("start_spread_days must be >= 0".into());
        }
        if !self.planted_map.is_empty() {
            if self.planted_map.len() != self.n_codes {
                return bad(format!("planted_map has {} entries for {} codes", self.planted_map.len(), self.n_codes));
            }
            if let Some(t) = self.planted_map.iter().find(|&&t| t >= self.n_terms) {
                return bad(format!("planted term {t} outside 0..{}", self.n_terms));
            }
        }
        Ok(())
    }

    pub fn planted_term(&self, code: usize) -> usize {
        if self.planted_map.is_empty() {
            code * self.n_terms / self.n_codes
        } else {
            self.planted_map[code]
        }
    }

    /// `key=value` lines; `#` comments and blank lines are ignored. Unset keys
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = GeneratorConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("config line without '=': {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let invalid = || Error::InvalidParameter(format!("bad value for {key}: {value:?}"));
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| invalid())?
                };
            }
            match key {
                "seed" => cfg.seed = num!(),
                "n_patients" => cfg.n_patients = num!(),
                "n_codes" => cfg.n_codes = num!(),
                "n_terms" => cfg.n_terms = num!(),
                "encounters_per_patient" => cfg.encounters_per_patient = num!(),
                "codes_per_encounter" => cfg.codes_per_encounter = num!(),
                "searches_per_encounter" => cfg.searches_per_encounter = num!(),
                "p_signal" => cfg.p_signal = num!(),
                "session_gap_rate" => cfg.session_gap_rate = num!(),
                "mean_gap_days" => cfg.mean_gap_days = num!(),
                "start_spread_days" => cfg.start_spread_days = num!(),
                "start" => cfg.start = Timestamp::parse(value).map_err(|_| invalid())?,
                "sparse" => cfg.sparse = num!(),
                "planted_map" => {
                    cfg.planted_map = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|v| v.trim().parse().map_err(|_| invalid()))
                            .collect::<Result<_>>()?
                    }
                }
                _ => return Err(Error::InvalidParameter(format!("unknown generator key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> String {
        let map = self
            .planted_map
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "n_patients={}", self.n_patients);
        let _ = writeln!(out, "n_codes={}", self.n_codes);
        let _ = writeln!(out, "n_terms={}", self.n_terms);
        let _ = writeln!(out, "encounters_per_patient={}", self.encounters_per_patient);
        let _ = writeln!(out, "codes_per_encounter={}", self.codes_per_encounter);
        let _ = writeln!(out, "searches_per_encounter={}", self.searches_per_encounter);
        let _ = writeln!(out, "p_signal={}", self.p_signal);
        let _ = writeln!(out, "session_gap_rate={}", self.session_gap_rate);
        let _ = writeln!(out, "mean_gap_days={}", self.mean_gap_days);
        let _ = writeln!(out, "start_spread_days={}", self.start_spread_days);
        let _ = writeln!(out, "start={}", self.start);
        let _ = writeln!(out, "planted_map={map}");
        let _ = writeln!(out, "sparse={}", self.sparse);
        out
    }
}

/// ICD-like label of code `c`.
pub fn code_label(c: usize) -> String {
    format!("{}.{}", 100 + c / 10, c % 10)
}

pub fn term_label(t: usize) -> String {
    format!("term_{t:03}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedFiles {
    pub encounters: String,
    pub searches: String,
}

pub const ENCOUNTER_FILE: &str = "encounters.csv";
pub const SEARCH_FILE: &str = "searches.csv";

impl GeneratedFiles {
    /// Writes both files into `dir` (created if needed) and returns their paths.
    pub fn write_to(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let enc = dir.join(ENCOUNTER_FILE);
        let search = dir.join(SEARCH_FILE);
        fs::write(&enc, &self.encounters).map_err(|e| Error::io(&enc, e))?;
        fs::write(&search, &self.searches).map_err(|e| Error::io(&search, e))?;
        Ok((enc, search))
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as usize
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new())
}

fn finish(header: &str, writer: csv::Writer<Vec<u8>>) -> Result<String> {
    let body = writer
        .into_inner()
        .map_err(|e| Error::format("generated csv", e.to_string()))?;
    let body = String::from_utf8(body).map_err(|e| Error::format("generated csv", e.to_string()))?;
    Ok(format!("{header}{body}"))
}

pub fn generate(config: &GeneratorConfig) -> Result<GeneratedFiles> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gap = Exp::new(1.0 / config.mean_gap_days).expect("positive rate");
    let mut encounters = csv_writer();
    let mut searches = csv_writer();
    encounters.write_record(["patient_id", "timestamp", "icd_codes"])?;
    searches.write_record(["patient_id", "timestamp", "term"])?;

    for p in 0..config.n_patients {
        let patient = format!("p{p:05}");
        let mut n_enc = poisson(&mut rng, config.encounters_per_patient);
        if !config.sparse {
            n_enc = n_enc.max(3);
        }
        let offset = rng.random_range(0..=config.start_spread_days) * SECONDS_PER_DAY;
        let mut time = config.start.plus_secs(offset + rng.random_range(0..SECONDS_PER_DAY));
        for _ in 0..n_enc {
            let n_codes = (1 + poisson(&mut rng, config.codes_per_encounter - 1.0)).min(config.n_codes);
            let mut codes = sample(&mut rng, config.n_codes, n_codes).into_vec();
            codes.sort_unstable();
            let joined = codes.iter().map(|&c| code_label(c)).collect::<Vec<_>>().join(";");
            encounters.write_record([patient.as_str(), &time.to_string(), &joined])?;

            let mut n_search = poisson(&mut rng, config.searches_per_encounter).min(MAX_SEARCHES_PER_ENCOUNTER);
            if !config.sparse {
                n_search = n_search.max(1);
            }
            let mut days = (gap.sample(&mut rng).ceil() as i64).max(2);
            if rng.random_bool(config.session_gap_rate) {
                days += LONG_GAP_DAYS;
            }
            let next = time.plus_secs(days * SECONDS_PER_DAY);
            for i in 0..n_search {
                let term = if rng.random_bool(config.p_signal) {
                    config.planted_term(codes[rng.random_range(0..codes.len())])
                } else {
                    rng.random_range(0..config.n_terms)
                };
                let at = next.plus_secs(-((n_search - i) as i64) * HOUR);
                searches.write_record([patient.as_str(), &at.to_string(), &term_label(term)])?;
            }
            time = next;
        }
    }

    let mut header = String::new();
    for line in config.to_key_values().lines() {
        let _ = writeln!(header, "# {line}");
    }
    Ok(GeneratedFiles {
        encounters: finish(&header, encounters)?,
        searches: finish(&header, searches)?,
    })
}
