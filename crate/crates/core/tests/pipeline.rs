use std::collections::BTreeMap;

use gecx_core::codec::{ExplainOrder, SettingSpec, SubwordTokenizer, Tokenizer, TokenizerKind};
use gecx_core::corpus::{gen_synthetic_corpus, ExplainedSample, SynthConfig};
use gecx_core::exec::ExecMode;
use gecx_core::harness::{run_experiment_on, Corpora, ExperimentConfig};
use gecx_core::infer::{predict, DecodeConfig};
use gecx_core::metrics::{evaluate, EvalScope};
use gecx_core::model::checkpoint::Checkpoint;
use gecx_core::model::{prepare_example, train, LossConfig, Model, ModelConfig, TrainConfig};

struct Setup {
    tok: Tokenizer,
    spec: SettingSpec,
    train: Vec<ExplainedSample>,
    dev: Vec<ExplainedSample>,
}

fn setup() -> Setup {
    let synth = SynthConfig::default();
    let train = gen_synthetic_corpus(21, 48, &synth).unwrap();
    let dev = gen_synthetic_corpus(22, 12, &synth).unwrap();
    let words = train.iter().flat_map(|s| s.source.iter().chain(&s.target)).map(String::as_str);
    let tok = Tokenizer::fit(TokenizerKind::CharBigram, words, synth.registry().unwrap().len());
    Setup {
        tok,
        spec: SettingSpec::self_rationalization(ExplainOrder::Post),
        train,
        dev,
    }
}

fn fresh_model(s: &Setup) -> Model {
    Model::new(ModelConfig {
        d_model: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_dim: 32,
        vocab_size: s.tok.vocab_size(),
        type_count: s.tok.type_count(),
        seed: 4,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn trained(s: &Setup, exec: ExecMode) -> Model {
    let examples: Vec<_> = s.train.iter().map(|x| prepare_example(x, &s.spec, &s.tok).unwrap()).collect();
    let mut m = fresh_model(s);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 3e-3,
        exec,
        ..TrainConfig::default()
    };
    train(&mut m, &examples, &[], &LossConfig::default(), &cfg, |_, _| BTreeMap::new()).unwrap();
    m
}

#[test]
fn parallel_and_sequential_training_agree_bit_for_bit() {
    let s = setup();
    let par = trained(&s, ExecMode::Parallel);
    let seq = trained(&s, ExecMode::Sequential);
    assert_eq!(par.params().values(), seq.params().values());

    let reg = SynthConfig::default().registry().unwrap();
    let dec = DecodeConfig { max_len: 32, ..DecodeConfig::default() };
    let a = predict(&par, &s.dev, &s.spec, &dec, &s.tok, &reg, ExecMode::Parallel);
    let b = predict(&seq, &s.dev, &s.spec, &dec, &s.tok, &reg, ExecMode::Sequential);
    assert_eq!(a, b);
}

#[test]
fn checkpoint_reload_predicts_identically() {
    let s = setup();
    let m = trained(&s, ExecMode::Parallel);
    let reg = SynthConfig::default().registry().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    Checkpoint::new(&m, s.spec.clone(), LossConfig::default(), s.tok.clone(), reg.clone()).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let back = ck.to_model().unwrap();
    assert_eq!(back.params().values(), m.params().values());
    assert_eq!(ck.spec, s.spec);

    let dec = DecodeConfig::greedy();
    let before = predict(&m, &s.dev, &s.spec, &dec, &s.tok, &reg, ExecMode::Parallel);
    let after = predict(&back, &s.dev, &ck.spec, &dec, &ck.tokenizer, &ck.registry, ExecMode::Parallel);
    assert_eq!(before, after);
}

#[test]
fn predictions_are_well_formed_and_scorable() {
    let s = setup();
    let m = trained(&s, ExecMode::Parallel);
    let reg = SynthConfig::default().registry().unwrap();
    let preds = predict(&m, &s.dev, &s.spec, &DecodeConfig { max_len: 40, ..DecodeConfig::default() }, &s.tok, &reg, ExecMode::Parallel);
    assert_eq!(preds.len(), s.dev.len());
    for (p, g) in preds.iter().zip(&s.dev) {
        assert_eq!(p.id, g.id);
        assert!(p.error.is_none());
        assert!(p.well_formed || p.truncated);
        assert!(p.evidence_word_indices.iter().all(|&w| w < g.source.len()));
    }
    let rep = evaluate(&preds, &s.dev, &s.tok, &reg, EvalScope { correction: true, explanation: true }).unwrap();
    for v in [rep.correction.unwrap().p, rep.explanation.unwrap().r, rep.type_accuracy.unwrap()] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn experiment_writes_run_directory() {
    let synth = SynthConfig::default();
    let corpora = Corpora {
        train: gen_synthetic_corpus(1, 24, &synth).unwrap(),
        dev: gen_synthetic_corpus(2, 6, &synth).unwrap(),
        test: Some(gen_synthetic_corpus(3, 6, &synth).unwrap()),
        registry: synth.registry().unwrap(),
    };
    let mut cfg = ExperimentConfig::desk("pipeline", SettingSpec::self_rationalization(ExplainOrder::Pre));
    cfg.model.d_model = 8;
    cfg.model.ff_dim = 8;
    cfg.model.heads = 2;
    cfg.training.epochs = 1;
    cfg.decode = DecodeConfig { max_len: 24, ..DecodeConfig::greedy() };
    cfg.seeds = vec![7];
    let dir = tempfile::tempdir().unwrap();
    let bundle = run_experiment_on(&cfg, &corpora, Some(dir.path())).unwrap();
    assert_eq!(bundle.succeeded(), 1);
    assert!(bundle.test.contains_key("cor_f05") && bundle.dev.contains_key("exp_f05"));
    for f in ["config.toml", "bundle.json", "report.md", "predictions/test_seed_7.jsonl", "reports/test_seed_7.json"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let reloaded = ExperimentConfig::load(dir.path().join("config.toml")).unwrap();
    assert_eq!(reloaded, cfg);
}
