use std::collections::HashSet;

use mmkg_core::linkpred::synthetic::{text_informative_kg, toy_kg, TextInformativeSpec};
use mmkg_core::linkpred::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent ranking: materialize every candidate score, sort descending, and
/// locate the target among the candidates that survive filtering.
fn brute_force_rank(table: &ScoreTable, q: &Query, filter: FilterMode, known: &HashSet<IdTriple>) -> u64 {
    let target = q.target();
    let target_score = {
        let t = q.with_candidate(target);
        table.score(t.h as usize, t.r as usize, t.t as usize)
    };
    let mut others: Vec<f64> = (0..table.entities)
        .filter(|&e| e != target)
        .filter(|&e| filter == FilterMode::Raw || !known.contains(&q.with_candidate(e)))
        .map(|e| {
            let t = q.with_candidate(e);
            table.score(t.h as usize, t.r as usize, t.t as usize)
        })
        .collect();
    others.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let above = others.iter().take_while(|s| **s > target_score).count() as u64;
    let tied = others.iter().filter(|s| **s == target_score).count() as u64;
    1 + above + tied / 2
}

fn random_fixture(seed: u64) -> (ScoreTable, Vec<IdTriple>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = rng.gen_range(2..=12);
    let relations = rng.gen_range(1..=3);
    // few distinct levels so ties are common
    let scores = (0..entities * relations * entities).map(|_| f64::from(rng.gen_range(0..5u8)) / 4.0).collect();
    let known = (0..rng.gen_range(1..20))
        .map(|_| IdTriple::new(rng.gen_range(0..entities), rng.gen_range(0..relations), rng.gen_range(0..entities)))
        .collect();
    (ScoreTable { entities, relations, scores }, known)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rank_matches_brute_force(seed in any::<u64>()) {
        let (table, triples) = random_fixture(seed);
        let known = KnownTriples::new(&triples);
        let set: HashSet<IdTriple> = triples.iter().copied().collect();
        for &triple in &triples {
            for direction in [Direction::Head, Direction::Tail] {
                let q = Query { triple, direction };
                let raw = rank_query(&table, &q, FilterMode::Raw, &known);
                let filtered = rank_query(&table, &q, FilterMode::Filtered, &known);
                prop_assert_eq!(raw, brute_force_rank(&table, &q, FilterMode::Raw, &set));
                prop_assert_eq!(filtered, brute_force_rank(&table, &q, FilterMode::Filtered, &set));
                prop_assert!(filtered <= raw);
                prop_assert!(raw >= 1);
            }
        }
    }
}

fn two_dim_model(text_only: bool) -> (Model, FeatureSet) {
    let setting: ModalitySetting = if text_only { "text" } else { "s+t" }.parse().unwrap();
    let hyper = HyperParams { dim: 2, ..HyperParams::default() };
    let mut features = FeatureSet {
        text_dim: 8,
        text: vec![SparseVec::default(); 2],
        generated: vec![],
        variant: None,
        image_dim: 0,
        image: vec![None; 2],
    };
    // entity 1 has text hashed onto input 3
    features.text[1] = SparseVec { indices: vec![3], values: vec![1.0] };
    let mut model = Model::init(2, 1, &features, &setting, &hyper);
    model.entity_struct = vec![0.6, 0.0, 0.0, 0.8];
    model.relations = vec![1.0, 2.0];
    model.text_projection = vec![0.0; 16];
    model.text_projection[6] = 2.0;
    model.text_projection[7] = -1.0;
    (model, features)
}

#[test]
fn text_only_entity_without_text_embeds_to_zero() {
    // E(0) = 0 (no text, structure inactive), E(1) = P·e3 = (2, -1)
    // s(0, r, 1) = -|| (0,0) + (1,2) - (2,-1) || = -|| (-1, 3) || = -sqrt(10)
    let (model, features) = two_dim_model(true);
    let emb = model.embed(&features);
    assert_eq!(emb.entity(0), [0.0, 0.0]);
    assert_eq!(emb.entity(1), [2.0, -1.0]);
    assert!((emb.score(0, 0, 1) + 10f64.sqrt()).abs() < 1e-12);
}

#[test]
fn gates_renormalize_over_available_inputs() {
    // s+t: entity 0 has no text so E(0) = struct(0) = (0.6, 0);
    // entity 1 mixes half structure (0, 0.8) and half text (2, -1) = (1, -0.1)
    let (model, features) = two_dim_model(false);
    let emb = model.embed(&features);
    assert_eq!(emb.entity(0), [0.6, 0.0]);
    assert!((emb.entity(1)[0] - 1.0).abs() < 1e-12 && (emb.entity(1)[1] + 0.1).abs() < 1e-12);
    let g = model.entity_gates(&features, 1);
    assert_eq!(g.iter().sum::<f64>(), 1.0);
}

#[test]
fn translational_identity_scores_zero() {
    let (mut model, features) = two_dim_model(false);
    model.text_projection = vec![0.0; 16];
    model.text_projection[6] = 1.2;
    model.text_projection[7] = 3.6;
    // E(1) = 0.5*(0,0.8) + 0.5*(1.2,3.6) = (0.6, 2.2) = E(0) + R with R = (0, 2.2)
    model.relations = vec![0.0, 2.2];
    let emb = model.embed(&features);
    assert!(emb.score(0, 0, 1).abs() < 1e-12);
    assert!(emb.score(1, 0, 0) < 0.0);
}

#[test]
fn toy_training_reduces_loss_and_is_deterministic() {
    let ds = toy_kg();
    let features = FeatureSet::build(&ds, &[], None, DEFAULT_TEXT_DIM).unwrap();
    let setting: ModalitySetting = "s+t".parse().unwrap();
    let hyper = HyperParams { seed: 7, ..HyperParams::default() };
    let (a, log) = train(&ds, &features, &setting, &hyper).unwrap();
    assert_eq!(log.epoch_losses.len(), 200);
    assert!(log.epoch_losses.iter().all(|l| l.is_finite()));
    assert!(log.epoch_losses.last().unwrap() < log.epoch_losses.first().unwrap());
    let (b, _) = train(&ds, &features, &setting, &hyper).unwrap();
    assert_eq!(a, b);
    assert!(a.entity_struct.chunks(a.dim()).all(|r| r.iter().map(|x| x * x).sum::<f64>() <= 1.0 + 1e-9));
}

#[test]
fn exploding_learning_rate_aborts() {
    let ds = toy_kg();
    let features = FeatureSet::build(&ds, &[], None, DEFAULT_TEXT_DIM).unwrap();
    let hyper = HyperParams { learning_rate: 1e300, epochs: 20, ..HyperParams::default() };
    let err = train(&ds, &features, &"text".parse().unwrap(), &hyper).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
    assert!(err.to_string().contains("lower the learning rate"));
}

#[test]
fn missing_modality_inputs_are_rejected() {
    let ds = toy_kg();
    let features = FeatureSet::build(&ds, &[], None, DEFAULT_TEXT_DIM).unwrap();
    let hyper = HyperParams::default();
    assert_eq!(
        train(&ds, &features, &"i+t".parse().unwrap(), &hyper).unwrap_err(),
        TrainError::MissingFeatures(Modality::Image)
    );
}

fn synthetic_mrr(setting: &str, seed: u64) -> f64 {
    let ds = text_informative_kg(&TextInformativeSpec::default());
    let mut config = ExperimentConfig::new(setting.parse().unwrap(), None);
    config.hyper.seed = seed;
    config.hyper.learning_rate = 0.05;
    run_experiment(&ds, &[], None, &config).unwrap().report.mrr
}

#[test]
fn text_beats_structure_on_cold_entities() {
    for seed in [1, 2, 3] {
        let structure = synthetic_mrr("structure", seed);
        let text = synthetic_mrr("text", seed);
        let both = synthetic_mrr("s+t", seed);
        println!("seed {seed}: structure {structure:.4} text {text:.4} s+t {both:.4}");
        assert!(text > structure);
        assert!(both > structure);
    }
}

#[test]
fn evaluation_is_deterministic_and_parallel_safe() {
    let ds = text_informative_kg(&TextInformativeSpec::default());
    let config = ExperimentConfig::new("s+t".parse().unwrap(), None);
    let a = run_experiment(&ds, &[], None, &config).unwrap();
    let b = run_experiment(&ds, &[], None, &config).unwrap();
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    assert_eq!(a.ranks.len(), 2 * ds.test.len());
    let seq: Vec<u64> = a
        .ranks
        .iter()
        .map(|q| {
            rank_query(
                &a.model.embed(&build_features(&ds, &[], None, &config).unwrap()),
                &Query { triple: q.triple, direction: q.direction },
                config.filter,
                &KnownTriples::from_dataset(&ds),
            )
        })
        .collect();
    assert_eq!(seq, a.ranks.iter().map(|q| q.rank).collect::<Vec<_>>());
    let fp = a.report.fingerprint.unwrap();
    assert_eq!((fp.modality.as_str(), fp.filter, fp.d, fp.epochs), ("s+t", FilterMode::Filtered, 64, 200));
}

#[test]
fn evaluate_rejects_empty_test() {
    let table = ScoreTable { entities: 2, relations: 1, scores: vec![0.0; 4] };
    assert_eq!(
        evaluate(&table, &[], FilterMode::Raw, &KnownTriples::default(), None).unwrap_err(),
        EvalError::EmptyTest
    );
}

#[test]
fn subset_of_all_test_entities_equals_full_evaluation() {
    let ds = text_informative_kg(&TextInformativeSpec::default());
    let config = ExperimentConfig::new("s+t".parse().unwrap(), None);
    let out = run_experiment(&ds, &[], None, &config).unwrap();
    let emb = out.model.embed(&build_features(&ds, &[], None, &config).unwrap());
    let test = id_triples(&ds, &ds.test);
    let known = KnownTriples::from_dataset(&ds);
    let all: HashSet<u32> = test.iter().flat_map(|t| [t.h, t.t]).collect();
    let sub = subset_evaluate(&emb, &emb, &all, &test, FilterMode::Filtered, &known).unwrap();
    assert_eq!(sub.enriched.overall(), out.report.overall());
    assert_eq!(sub.improvement.mrr, Some(0.0));
    let disjoint: HashSet<u32> = [ds.entity_index("m0_3").unwrap() as u32].into();
    assert_eq!(
        subset_evaluate(&emb, &emb, &disjoint, &test, FilterMode::Filtered, &known).unwrap_err(),
        EvalError::NoMatchingTriples
    );
    assert_eq!(
        subset_evaluate(&emb, &emb, &HashSet::new(), &test, FilterMode::Filtered, &known).unwrap_err(),
        EvalError::EmptySubset
    );
}

#[test]
fn rank_delta_on_fixture() {
    // 4 entities, query (0, r, 1). Baseline puts 1 last, enriched puts it first.
    let baseline = ScoreTable {
        entities: 4,
        relations: 1,
        scores: vec![0.2, 0.1, 0.5, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    };
    let mut enriched = baseline.clone();
    enriched.scores[1] = 1.0;
    let triple = IdTriple::new(0, 0, 1);
    let known = KnownTriples::new(&[triple]);
    let q = Query { triple, direction: Direction::Tail };
    // tail candidates score (0.2, 0.1, 0.5, 0.9): three beat the target
    assert_eq!(rank_query(&baseline, &q, FilterMode::Raw, &known), 4);
    let as_rows = |t: &ScoreTable| {
        vec![
            RankRow {
                head: "a".into(),
                relation: "r".into(),
                tail: "b".into(),
                direction: Direction::Head,
                rank: rank_query(t, &Query { triple, direction: Direction::Head }, FilterMode::Raw, &known),
            },
            RankRow {
                head: "a".into(),
                relation: "r".into(),
                tail: "b".into(),
                direction: Direction::Tail,
                rank: rank_query(t, &q, FilterMode::Raw, &known),
            },
        ]
    };
    let d = rank_delta_report(&as_rows(&baseline), &as_rows(&enriched)).unwrap();
    assert_eq!((d[0].direction, d[0].rank_before, d[0].rank_after, d[0].improvement), (Direction::Tail, 4, 1, 3));
    let same = rank_delta_report(&as_rows(&baseline), &as_rows(&baseline)).unwrap();
    assert!(same.iter().all(|r| r.improvement == 0));
}

#[test]
fn ablation_skips_and_repeats() {
    let ds = text_informative_kg(&TextInformativeSpec { seed: 3, ..TextInformativeSpec::default() });
    let mut text = ExperimentConfig::new("text".parse().unwrap(), None);
    text.hyper.epochs = 20;
    let mut image_text = text.clone();
    image_text.modality = "image+text".parse().unwrap();
    let mut fusion = text.clone();
    fusion.modality = "t+g".parse().unwrap();
    fusion.variant = Some(mmkg_core::fusion::Variant::Fusion);
    let rows = run_ablation(&ds, &[], None, &[text.clone(), image_text, fusion, text]);
    assert_eq!(rows.len(), 4);
    assert!(rows[0].report.is_some());
    assert!(rows[1].note.as_deref().unwrap().contains("image"));
    assert!(rows[2].note.as_deref().unwrap().contains("Fusion"));
    assert_eq!(rows[0].report, rows[3].report);
}
