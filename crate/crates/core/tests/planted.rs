use hcfm_core::cooccurrence::build_cooccurrence;
use hcfm_core::data_model::{PatientHistory, PatientId, TermId};
use hcfm_core::evaluation::{cutoff_at_quantile, cutoff_split, grid_search, EvalSettings, Grid, MethodKind};
use hcfm_core::factorization::{train, TrainConfig};
use hcfm_core::pipeline::{load_dataset, PreprocessOptions};
use hcfm_core::recommenders::{hcfm_score, HcfmParams, RecentWindow, RecommendationPoint};
use hcfm_core::sessionization::SessionConfig;
use hcfm_core::synthetic::{code_label, generate, term_label, GeneratorConfig};
use hcfm_core::par;

// With every search on the planted term the vocabulary is exactly the planted image,
// so a rank below min(n, m) cannot hold all planted pairs. A little noise widens the
// vocabulary and leaves room for the planted pairs.
#[test]
fn strong_signal_puts_planted_term_first() {
    let cfg = GeneratorConfig {
        seed: 11,
        n_patients: 80,
        n_codes: 8,
        n_terms: 12,
        p_signal: 0.97,
        planted_map: vec![0, 3, 3, 6, 6, 9, 9, 0],
        ..GeneratorConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    generate(&cfg).unwrap().write_to(dir.path()).unwrap();
    let dataset = load_dataset(dir.path(), &PreprocessOptions::default()).unwrap();
    let searches_per_term = dataset
        .histories
        .values()
        .flat_map(|h| h.searches())
        .fold(vec![0usize; dataset.terms.len()], |mut acc, s| {
            acc[s.term.0 as usize] += 1;
            acc
        });
    for t in [0, 3, 6, 9] {
        let id = dataset.terms.get(&term_label(t)).unwrap();
        assert!(searches_per_term[id.0 as usize] >= 40, "{searches_per_term:?}");
    }
    assert!(dataset.terms.len() > 4);

    let refs: Vec<&PatientHistory> = dataset.histories.values().collect();
    let a = build_cooccurrence(&refs, dataset.codes.len(), dataset.terms.len(), 0.5).unwrap();
    let d = 6;
    let model = train(&a, &TrainConfig { d, gamma: 0.01, max_epochs: 3000, seed: 1, ..TrainConfig::default() })
        .unwrap()
        .bind_dictionaries(dataset.codes.clone(), dataset.terms.clone())
        .unwrap();
    let params = HcfmParams { ms: RecentWindow::All, mc: 1, alpha: 0.0 };
    for c in 0..cfg.n_codes {
        let code = dataset.codes.get(&code_label(c)).unwrap();
        let point = RecommendationPoint {
            patient: PatientId("q".into()),
            target_index: 0,
            prefix: Vec::new(),
            encounters: vec![vec![code]],
            n_p: 0,
        };
        let top: TermId = hcfm_score(&point, &model, &params).terms()[0];
        assert_eq!(dataset.terms.raw(top), Some(term_label(cfg.planted_term(c)).as_str()), "code {c}");
    }
}

#[test]
fn thread_count_does_not_change_reports() {
    let cfg = GeneratorConfig { seed: 5, n_patients: 80, n_codes: 10, n_terms: 20, ..GeneratorConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    generate(&cfg).unwrap().write_to(dir.path()).unwrap();
    let dataset = load_dataset(dir.path(), &PreprocessOptions::default()).unwrap();
    let cutoff = cutoff_at_quantile(&dataset, 0.8).unwrap();
    let split = cutoff_split(&dataset, cutoff, &SessionConfig::default()).unwrap();
    let grid = Grid {
        ms: vec![RecentWindow::Last(1), RecentWindow::All],
        mc: vec![1, 3],
        alpha: vec![0.0, 0.4, 1.0],
        d: vec![4, 6],
        gamma: vec![0.01],
        ..Grid::default()
    };
    let settings = EvalSettings::default();
    for kind in [MethodKind::Hcfm, MethodKind::Copm, MethodKind::Tptcf] {
        let one = par::install(1, || grid_search(&split, kind, &grid, &settings).unwrap());
        let many = par::install(4, || grid_search(&split, kind, &grid, &settings).unwrap());
        assert_eq!(one, many, "{kind:?}");
    }
}
