mod common;

use std::sync::Arc;

use lateral_core::corpus::{save_theses, Riddle, Split, ThesisRecord, ThesisSource};
use lateral_core::prompts::{ExplanationMode, Strategy, TaskDescription};
use lateral_core::providers::mock::RecordingGenerator;
use lateral_core::providers::{Counted, GenerationParams, RuleBasedGenerator, ScriptedGenerator};
use lateral_core::retrieval::RetrievalVariant;
use lateral_core::runner::{
    export_finetune, generate_theses, parse_finetune, run_experiment, ExperimentConfig, FinetuneFormat, Providers,
    RetrievalSection, RunContext,
};

use common::{corpus, grouped, riddle, write_corpus};

fn three_riddles() -> Vec<Riddle> {
    (0..3)
        .map(|i| riddle(&format!("r{i}"), &format!("riddle {i}"), ["w", "x", "y", "z"], Some(0), Split::Test))
        .collect()
}

#[test]
fn direct_constant_answers_score_and_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_corpus(&corpus(three_riddles()), dir.path());
    let config = ExperimentConfig::new(Strategy::Direct, "mock:constant:A", path);
    let out = dir.path().join("out");
    let record = run_experiment(&config, &RunContext::new(), Some(&out)).unwrap();
    assert_eq!(record.calls.generator_requests, 3);
    assert_eq!(record.calls.backend_generator_calls, 3);
    let report = record.report.unwrap();
    assert_eq!(report.metrics.overall, 1.0);
    // Singleton groups: group metrics are suppressed.
    assert_eq!(report.metrics.ori_sem, None);
    for name in ["predictions.jsonl", "run.json", "report.json", "report.txt"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    assert!(record.predictions.iter().all(|p| p.config_fingerprint == record.fingerprint));
}

#[test]
fn external_cot_is_five_calls_per_riddle() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_corpus(&corpus(three_riddles()[..1].to_vec()), dir.path());
    let mut config = ExperimentConfig::new(Strategy::ExternalCot, "mock:echo-option", path);
    config.description = TaskDescription::Detailed;
    let record = run_experiment(&config, &RunContext::new(), None).unwrap();
    assert_eq!(record.calls.generator_requests, 5);
    assert_eq!(record.theses.len(), 4);
}

#[test]
fn provider_failures_abstain_and_continue() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_corpus(&corpus(three_riddles()), dir.path());
    let g = ScriptedGenerator::new()
        .fail_when_contains("riddle 1")
        .with_default("Answer: (A)");
    let ctx = RunContext::with_providers(Providers::mock_with(Arc::new(g)));
    let config = ExperimentConfig::new(Strategy::Direct, "scripted", path);
    let record = run_experiment(&config, &ctx, None).unwrap();
    assert_eq!(record.provider_failures, 1);
    let failed = &record.predictions[1];
    assert_eq!(failed.predicted_index, None);
    assert!(failed.error.is_some());
    let report = record.report.unwrap();
    assert_eq!(report.abstained, 1);
    assert!((report.metrics.overall - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn unlabeled_split_runs_without_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut riddles = three_riddles();
    riddles.iter_mut().for_each(|r| r.label = None);
    let path = write_corpus(&corpus(riddles), dir.path());
    let config = ExperimentConfig::new(Strategy::Direct, "mock:constant:B", path);
    let record = run_experiment(&config, &RunContext::new(), None).unwrap();
    assert!(record.report.is_none());
    assert!(record.predictions.iter().all(|p| p.predicted_index == Some(1)));
}

/// Runs `config` against a corpus whose test labels are rotated by
/// `shift` and returns every prompt the generator saw.
fn prompts_with_label_shift(config: &ExperimentConfig, shift: usize) -> Vec<String> {
    let dir = tempfile::tempdir().unwrap();
    let mut riddles = grouped("tr", 4, Split::Train);
    let mut test = grouped("te", 3, Split::Test);
    test.iter_mut().for_each(|r| r.label = r.label.map(|l| (l + shift) % 4));
    riddles.extend(test);
    let path = write_corpus(&corpus(riddles), dir.path());
    let mut config = config.clone();
    config.paths.corpus = path;
    let recorder = Arc::new(RecordingGenerator::new(RuleBasedGenerator::new(
        lateral_core::providers::mock::RuleMode::EchoOption,
    )));
    let ctx = RunContext::with_providers(Providers::mock_with(recorder.clone()));
    run_experiment(&config, &ctx, None).unwrap();
    let mut prompts: Vec<String> = recorder
        .prompts()
        .into_iter()
        .map(|m| m.into_iter().map(|m| m.content).collect::<Vec<_>>().join("\n"))
        .collect();
    prompts.sort();
    prompts
}

#[test]
fn prompts_do_not_depend_on_query_labels() {
    for strategy in Strategy::ALL {
        for variant in [None, Some(RetrievalVariant::Ordinary), Some(RetrievalVariant::Fusion)] {
            let mut config = ExperimentConfig::new(strategy, "mock", "unused");
            config.retrieval = variant.map(|variant| RetrievalSection {
                variant,
                shots: 3,
                explanation_mode: ExplanationMode::Omitted,
            });
            let a = prompts_with_label_shift(&config, 0);
            let b = prompts_with_label_shift(&config, 1);
            assert!(!a.is_empty());
            assert_eq!(a, b, "{strategy:?} {variant:?}");
        }
    }
}

#[test]
fn fusion_adds_three_generator_calls_per_riddle() {
    let dir = tempfile::tempdir().unwrap();
    let mut riddles = grouped("tr", 4, Split::Train);
    riddles.extend(grouped("te", 2, Split::Test));
    let path = write_corpus(&corpus(riddles), dir.path());
    let mut config = ExperimentConfig::new(Strategy::SimpleInternalCot, "mock:echo-option", path);
    config.retrieval = Some(RetrievalSection {
        variant: RetrievalVariant::Fusion,
        shots: 3,
        explanation_mode: ExplanationMode::Omitted,
    });
    let record = run_experiment(&config, &RunContext::new(), None).unwrap();
    assert_eq!(record.calls.generator_requests, 6 * (1 + 3));
}

#[test]
fn explanations_come_from_gold_theses() {
    let dir = tempfile::tempdir().unwrap();
    let train = grouped("tr", 3, Split::Train);
    let theses: Vec<ThesisRecord> = train
        .iter()
        .flat_map(|r| {
            (0..4).map(move |i| ThesisRecord {
                riddle_id: r.id.clone(),
                option_index: i,
                thesis: format!("reasoning {} option {i}", r.id),
                source: ThesisSource::Generated,
            })
        })
        .collect();
    let gold: Vec<String> = train
        .iter()
        .map(|r| format!("reasoning {} option {}", r.id, r.label.unwrap()))
        .collect();
    let mut riddles = train.clone();
    riddles.extend(grouped("te", 1, Split::Test));
    let path = write_corpus(&corpus(riddles), dir.path());
    let theses_path = dir.path().join("theses.json");
    save_theses(&theses, &theses_path).unwrap();

    let mut config = ExperimentConfig::new(Strategy::Direct, "mock", path);
    config.paths.theses = Some(theses_path);
    config.retrieval = Some(RetrievalSection {
        variant: RetrievalVariant::Ranked,
        shots: 3,
        explanation_mode: ExplanationMode::Full,
    });
    let recorder = Arc::new(RecordingGenerator::new(RuleBasedGenerator::new(
        lateral_core::providers::mock::RuleMode::EchoOption,
    )));
    let ctx = RunContext::with_providers(Providers::mock_with(recorder.clone()));
    run_experiment(&config, &ctx, None).unwrap();
    for prompt in recorder.prompts() {
        let text = &prompt.last().unwrap().content;
        let explanations: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("Explanation: ")).collect();
        assert_eq!(explanations.len(), 3);
        assert!(explanations.iter().all(|e| gold.iter().any(|g| g == e)), "{explanations:?}");
    }
}

#[test]
fn thesis_generation_full_and_resumed() {
    let riddles: Vec<Riddle> = (0..507)
        .map(|i| riddle(&format!("t{i:03}"), &format!("train riddle {i}"), ["w", "x", "y", "z"], Some(i % 4), Split::Train))
        .collect();
    let c = corpus(riddles);
    let g = Counted::new(ScriptedGenerator::new().with_default("a thinking path"));
    let params = GenerationParams::new("m");
    let full = generate_theses(&c, Split::Train, &g, &params, Vec::new(), 4).unwrap();
    assert_eq!(full.records.len(), 2028);
    assert_eq!(g.calls(), 2028);

    g.reset();
    let resumed = generate_theses(&c, Split::Train, &g, &params, full.records[..2000].to_vec(), 4).unwrap();
    assert_eq!(g.calls(), 28);
    assert_eq!(resumed.generator_calls, 28);
    assert_eq!(resumed.records, full.records);

    let again = generate_theses(&c, Split::Train, &g, &params, Vec::new(), 4).unwrap();
    assert_eq!(again.records, full.records);
}

#[test]
fn finetune_export_is_label_free() {
    let riddles = grouped("tr", 1, Split::Train);
    let mut flipped = riddles.clone();
    flipped.iter_mut().for_each(|r| r.label = r.label.map(|l| (l + 2) % 4));
    let (a, b) = (corpus(riddles), corpus(flipped));
    let g = ScriptedGenerator::new().with_default("some path");
    let theses = generate_theses(&a, Split::Train, &g, &GenerationParams::new("m"), Vec::new(), 1)
        .unwrap()
        .records;
    for format in [FinetuneFormat::Completion, FinetuneFormat::Chat] {
        let ea = export_finetune(&theses, &a, Some(Split::Train), format).unwrap();
        let eb = export_finetune(&theses, &b, Some(Split::Train), format).unwrap();
        assert_eq!(ea, eb);
        assert_eq!(ea.lines().count(), 12);
        assert!(!ea.contains("\"label\""));
        assert_eq!(parse_finetune(&ea).unwrap(), theses);
    }
}

#[test]
fn config_file_paths_resolve_relative_to_file() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus(three_riddles()), dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "strategy = \"direct\"\nsplit = \"test\"\n[provider]\nmodel_id = \"mock:constant:A\"\n[paths]\ncorpus = \"corpus.json\"\ncache = \"cache/responses.jsonl\"\n",
    )
    .unwrap();
    let config = ExperimentConfig::load(&cfg).unwrap();
    assert_eq!(config.paths.corpus, dir.path().join("corpus.json"));
    let record = run_experiment(&config, &RunContext::new(), None).unwrap();
    assert_eq!(record.report.unwrap().metrics.overall, 1.0);
    assert!(dir.path().join("cache/responses.jsonl").exists());
}
