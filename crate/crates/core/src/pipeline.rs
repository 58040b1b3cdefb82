//! File-level stages behind the command-line tool. Each stage writes its
//! outputs plus a `manifest.json` recording the resolved options and the
//! SHA-256 of every input and output file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind as IoErrorKind;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cooccurrence::{build_cooccurrence, CooccurrenceMatrix, DEFAULT_LAMBDA};
use crate::data_model::{CodeDictionary, CodeId, TermDictionary, TermId, Timestamp};
use crate::error::{Error, Result};
use crate::evaluation::{
    cutoff_at_quantile, cutoff_split, grid_search, reports_to_csv, reports_to_text, strata_to_text, EvalSettings,
    Grid, MethodKind, TrainingSet,
};
use crate::factorization::{train, FactorModel, TrainConfig};
use crate::ingestion::{
    apply_filters, dataset_stats, normalize_term, parse_events, Dataset, PreprocessConfig, SynonymMap,
};
use crate::recommenders::{copm_score, hcfm_score, HcfmParams, RecommendationPoint, DEFAULT_SIGMA};
use crate::sessionization::{segment, write_session_dump, SessionConfig};
use crate::synthetic::{generate, GeneratorConfig, ENCOUNTER_FILE, SEARCH_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MATRIX_FILE: &str = "cooccurrence.txt";
pub const DICTIONARY_FILE: &str = "dictionaries.json";
pub const MODEL_FILE: &str = "model.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub subcommand: String,
    pub options: serde_json::Value,
    /// Input file → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Reads a user-supplied config file; a missing file is a usage error.
fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        IoErrorKind::NotFound => Error::InvalidParameter(format!("config file {} not found", path.display())),
        _ => Error::io(path, e),
    })
}

fn write_manifest<O: Serialize>(
    out_dir: &Path,
    subcommand: &str,
    options: &O,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<RunManifest> {
    let mut manifest = RunManifest {
        tool: format!("hcfm {}", env!("CARGO_PKG_VERSION")),
        subcommand: subcommand.to_string(),
        options: serde_json::to_value(options)?,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    for p in inputs {
        manifest.inputs.insert(p.display().to_string(), sha256_file(p)?);
    }
    for name in outputs {
        manifest.outputs.insert(name.to_string(), sha256_file(&out_dir.join(name))?);
    }
    let text = serde_json::to_string_pretty(&manifest)?;
    write_file(&out_dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

pub fn cmd_generate(config_path: &Path, out_dir: &Path) -> Result<RunManifest> {
    let config = GeneratorConfig::parse(&read_config(config_path)?)?;
    let files = generate(&config)?;
    files.write_to(out_dir)?;
    write_manifest(out_dir, "generate", &config, &[config_path], &[ENCOUNTER_FILE, SEARCH_FILE])
}

/// Preprocessing knobs as they appear in manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub min_searches_per_patient: usize,
    pub min_encounters_per_patient: usize,
    pub min_term_frequency: usize,
    pub drop_irregular_terms: bool,
    pub synonyms: Option<PathBuf>,
    pub window_days: i64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        let p = PreprocessConfig::default();
        PreprocessOptions {
            min_searches_per_patient: p.min_searches_per_patient,
            min_encounters_per_patient: p.min_encounters_per_patient,
            min_term_frequency: p.min_term_frequency,
            drop_irregular_terms: p.drop_irregular_terms,
            synonyms: None,
            window_days: 90,
        }
    }
}

impl PreprocessOptions {
    pub fn sessions(&self) -> Result<SessionConfig> {
        let cfg = SessionConfig::from_days(self.window_days);
        cfg.validate()?;
        Ok(cfg)
    }

    fn config(&self) -> Result<PreprocessConfig> {
        let synonym_map = match &self.synonyms {
            Some(p) => Some(SynonymMap::from_path(p)?),
            None => None,
        };
        Ok(PreprocessConfig {
            min_searches_per_patient: self.min_searches_per_patient,
            min_encounters_per_patient: self.min_encounters_per_patient,
            min_term_frequency: self.min_term_frequency,
            drop_irregular_terms: self.drop_irregular_terms,
            synonym_map,
        })
    }
}

fn data_files(data_dir: &Path) -> (PathBuf, PathBuf) {
    (data_dir.join(ENCOUNTER_FILE), data_dir.join(SEARCH_FILE))
}

/// Parses and cleans the two event files in `data_dir`.
pub fn load_dataset(data_dir: &Path, options: &PreprocessOptions) -> Result<Dataset> {
    let (enc, search) = data_files(data_dir);
    let events = parse_events(&enc, &search)?;
    for e in &events.errors {
        warn!("{}:{}: {}", e.source, e.line, e.message);
    }
    if !events.errors.is_empty() {
        warn!("{} malformed lines skipped", events.errors.len());
    }
    apply_filters(&events.records, &options.config()?)
}

fn input_paths(data_dir: &Path, options: &PreprocessOptions) -> Vec<PathBuf> {
    let (enc, search) = data_files(data_dir);
    let mut out = vec![enc, search];
    out.extend(options.synonyms.clone());
    out
}

#[derive(Clone, Debug, Serialize)]
struct IngestOptions<'a> {
    data_dir: &'a Path,
    preprocess: &'a PreprocessOptions,
}

pub fn cmd_ingest(data_dir: &Path, out_dir: &Path, options: &PreprocessOptions) -> Result<RunManifest> {
    let sessions = options.sessions()?;
    let dataset = load_dataset(data_dir, options)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join("filter_report.txt"), dataset.report.to_text())?;
    write_file(&out_dir.join("dataset_stats.txt"), dataset_stats(&dataset, &sessions).to_text())?;
    let all: Vec<_> = dataset.histories.values().flat_map(|h| segment(h, &sessions)).collect();
    let mut dump = Vec::new();
    write_session_dump(&mut dump, &all)?;
    write_file(&out_dir.join("sessions.csv"), dump)?;
    write_dictionaries(out_dir, &dataset.codes, &dataset.terms)?;
    let inputs = input_paths(data_dir, options);
    write_manifest(
        out_dir,
        "ingest",
        &IngestOptions { data_dir, preprocess: options },
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &["filter_report.txt", "dataset_stats.txt", "sessions.csv", DICTIONARY_FILE],
    )
}

#[derive(Serialize, Deserialize)]
struct Dictionaries {
    codes: CodeDictionary,
    terms: TermDictionary,
}

fn write_dictionaries(out_dir: &Path, codes: &CodeDictionary, terms: &TermDictionary) -> Result<()> {
    let d = Dictionaries {
        codes: codes.clone(),
        terms: terms.clone(),
    };
    write_file(&out_dir.join(DICTIONARY_FILE), serde_json::to_string(&d)? + "\n")
}

fn read_dictionaries(dir: &Path) -> Result<(CodeDictionary, TermDictionary)> {
    let path = dir.join(DICTIONARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let d: Dictionaries = serde_json::from_str(&text)?;
    Ok((d.codes, d.terms))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffSpec {
    At(Timestamp),
    Quantile(f64),
}

impl CutoffSpec {
    pub fn resolve(&self, dataset: &Dataset) -> Result<Timestamp> {
        match *self {
            CutoffSpec::At(t) => Ok(t),
            CutoffSpec::Quantile(q) => cutoff_at_quantile(dataset, q),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub data_dir: PathBuf,
    pub preprocess: PreprocessOptions,
    pub lambda: f64,
    /// Restrict to events before this cutoff.
    pub cutoff: Option<CutoffSpec>,
}

/// Writes the co-occurrence matrix and the dictionaries it is indexed by.
pub fn cmd_build(options: &BuildOptions, out_dir: &Path) -> Result<RunManifest> {
    let sessions = options.preprocess.sessions()?;
    let dataset = load_dataset(&options.data_dir, &options.preprocess)?;
    let (histories, codes, terms) = match options.cutoff {
        Some(spec) => {
            let cutoff = spec.resolve(&dataset)?;
            info!("building from events before {cutoff}");
            let t = TrainingSet::build(&dataset, cutoff, &sessions)?;
            (t.histories, t.codes, t.terms)
        }
        None => (dataset.histories.into_values().collect(), dataset.codes, dataset.terms),
    };
    let refs: Vec<_> = histories.iter().collect();
    let a = build_cooccurrence(&refs, codes.len(), terms.len(), options.lambda)?;
    create_dir(out_dir)?;
    let mut buf = Vec::new();
    a.dump(&mut buf).map_err(|e| Error::io(out_dir.join(MATRIX_FILE), e))?;
    write_file(&out_dir.join(MATRIX_FILE), buf)?;
    write_dictionaries(out_dir, &codes, &terms)?;
    let inputs = input_paths(&options.data_dir, &options.preprocess);
    write_manifest(
        out_dir,
        "build",
        options,
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &[MATRIX_FILE, DICTIONARY_FILE],
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Output directory of `build`.
    pub matrix_dir: PathBuf,
    pub config: TrainConfig,
}

pub fn cmd_train(options: &TrainOptions, out_dir: &Path) -> Result<RunManifest> {
    let matrix_path = options.matrix_dir.join(MATRIX_FILE);
    let file = fs::File::open(&matrix_path).map_err(|e| Error::io(&matrix_path, e))?;
    let a = CooccurrenceMatrix::load(file)?;
    let (codes, terms) = read_dictionaries(&options.matrix_dir)?;
    let model = train(&a, &options.config)?.bind_dictionaries(codes, terms)?;
    info!(
        "trained d={} in {} epochs ({:?}), objective {:.6e} -> {:.6e}",
        model.dim(),
        model.report.epochs,
        model.report.stop,
        model.report.initial_objective(),
        model.report.final_objective()
    );
    create_dir(out_dir)?;
    model.save(&out_dir.join(MODEL_FILE))?;
    let mut trace = String::from("epoch,objective\n");
    for (i, v) in model.report.trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{v:?}");
    }
    write_file(&out_dir.join("train_trace.csv"), trace)?;
    write_manifest(
        out_dir,
        "train",
        options,
        &[&matrix_path, &options.matrix_dir.join(DICTIONARY_FILE)],
        &[MODEL_FILE, "train_trace.csv"],
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecommendMethod {
    Hcfm(HcfmParams),
    Copm { sigma: f64 },
}

/// One parsed line of a recommendation context file.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextQuery {
    pub query_id: String,
    pub point: RecommendationPoint,
}

/// Reads `query_id,recent_terms,recent_encounters`: terms separated by `;`,
/// encounters by `|` and codes within an encounter by `;`, oldest first.
/// Terms and codes missing from the model are skipped with a warning.
pub fn parse_context<R: std::io::Read>(input: R, model: &FactorModel) -> Result<Vec<ContextQuery>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let query_id = record.get(0).unwrap_or("").to_string();
        if query_id.is_empty() {
            return Err(Error::format("context file", format!("record {} has no query id", line + 1)));
        }
        let mut prefix: Vec<TermId> = Vec::new();
        for raw in record.get(1).unwrap_or("").split(';').filter(|s| !s.trim().is_empty()) {
            let norm = normalize_term(raw, None);
            match model.terms.get(&norm) {
                Some(t) => prefix.push(t),
                None => warn!("query {query_id}: unknown term {raw:?} skipped"),
            }
        }
        let mut encounters: Vec<Vec<CodeId>> = Vec::new();
        for enc in record.get(2).unwrap_or("").split('|').filter(|s| !s.trim().is_empty()) {
            let mut codes: Vec<CodeId> = Vec::new();
            for raw in enc.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                match model.codes.get(raw) {
                    Some(c) => codes.push(c),
                    None => warn!("query {query_id}: unknown code {raw:?} skipped"),
                }
            }
            codes.sort_unstable();
            codes.dedup();
            if !codes.is_empty() {
                encounters.push(codes);
            }
        }
        out.push(ContextQuery {
            point: RecommendationPoint {
                patient: crate::data_model::PatientId(query_id.clone()),
                target_index: prefix.len(),
                n_p: prefix.len(),
                prefix,
                encounters,
            },
            query_id,
        });
    }
    Ok(out)
}

/// Top-`n` terms per context line as `query_id,rank,term,score`.
pub fn cmd_recommend(model_path: &Path, context_path: &Path, n: usize, method: &RecommendMethod) -> Result<String> {
    if let RecommendMethod::Hcfm(p) = method {
        p.validate()?;
    }
    let model = FactorModel::load(model_path)?;
    let file = fs::File::open(context_path).map_err(|e| Error::io(context_path, e))?;
    let queries = parse_context(file, &model)?;
    let mut out = String::from("query_id,rank,term,score\n");
    for q in queries {
        let list = match method {
            RecommendMethod::Hcfm(p) => hcfm_score(&q.point, &model, p),
            RecommendMethod::Copm { sigma } => match copm_score(&q.point, &model, *sigma) {
                Ok(list) => list,
                Err(Error::EmptyContext) => {
                    warn!("query {}: no known encounter codes, nothing to recommend", q.query_id);
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        for (rank, (term, score)) in list.top(n).iter().enumerate() {
            let raw = model.terms.raw(*term).unwrap_or("");
            let _ = writeln!(out, "{},{},{},{:?}", q.query_id, rank + 1, raw, score);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOptions {
    pub data_dir: PathBuf,
    pub preprocess: PreprocessOptions,
    pub cutoff: CutoffSpec,
    pub method: MethodKind,
    pub grid: Grid,
    pub settings: EvalSettings,
}

impl EvaluateOptions {
    pub fn new(data_dir: PathBuf, cutoff: CutoffSpec, method: MethodKind) -> Self {
        EvaluateOptions {
            data_dir,
            preprocess: PreprocessOptions::default(),
            cutoff,
            method,
            grid: Grid::single(
                crate::recommenders::RecentWindow::All,
                1,
                0.5,
                TrainConfig::default().d,
                TrainConfig::default().gamma,
                DEFAULT_SIGMA,
            ),
            settings: EvalSettings {
                lambda: DEFAULT_LAMBDA,
                ..EvalSettings::default()
            },
        }
    }
}

pub const REPORT_FILES: [&str; 5] = ["split_stats.txt", "reports.txt", "reports.csv", "strata.txt", "reports.json"];

/// Ingest, split, train and score, then write the report files.
pub fn cmd_evaluate(options: &EvaluateOptions, out_dir: &Path) -> Result<RunManifest> {
    let sessions = options.preprocess.sessions()?;
    options.grid.validate(options.method)?;
    let dataset = load_dataset(&options.data_dir, &options.preprocess)?;
    let cutoff = options.cutoff.resolve(&dataset)?;
    let split = cutoff_split(&dataset, cutoff, &sessions)?;
    info!(
        "cutoff {cutoff}: {} training patients, {} test points",
        split.stats.train_patients,
        split.test_points.len()
    );
    let reports = grid_search(&split, options.method, &options.grid, &options.settings)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join("split_stats.txt"), split.stats.to_text())?;
    write_file(&out_dir.join("reports.txt"), reports_to_text(&reports))?;
    write_file(&out_dir.join("reports.csv"), reports_to_csv(&reports))?;
    let strata = reports.first().map(|r| strata_to_text(&r.strata)).unwrap_or_default();
    write_file(&out_dir.join("strata.txt"), strata)?;
    write_file(&out_dir.join("reports.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    let inputs = input_paths(&options.data_dir, &options.preprocess);
    write_manifest(
        out_dir,
        "evaluate",
        options,
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &REPORT_FILES,
    )
}

/// Re-runs an `evaluate` manifest into `out_dir`.
pub fn replay(manifest: &RunManifest, out_dir: &Path) -> Result<RunManifest> {
    match manifest.subcommand.as_str() {
        "evaluate" => {
            let options: EvaluateOptions = serde_json::from_value(manifest.options.clone())?;
            cmd_evaluate(&options, out_dir)
        }
        other => Err(Error::InvalidParameter(format!("cannot replay a {other:?} manifest"))),
    }
}
