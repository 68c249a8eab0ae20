use std::path::Path;

use ipt_core::dataset::corpus::{self, Corpus};
use ipt_core::dataset::toy::{toy_samples, write_toy_corpus};
use ipt_core::dataset::{DatasetSchema, Sample, SplitTag};
use ipt_core::downstream::{HeadConfig, Variant};
use ipt_core::encoder::{init_random_checkpoint, BackboneConfig, BackendKind, EncoderConfig};
use ipt_core::objective::LossWeights;
use ipt_core::params::ParamGroup;
use ipt_core::postprocess::DecodeConfig;
use ipt_core::trainer::{
    cosine_lr, evaluate_checkpoint, predict_windows, read_log, train, Model, ModelSpec, TrainConfig, TrainData,
    TrainJob,
};
use ipt_core::Error;

fn small_spec(variant: Variant, seed: u64) -> ModelSpec {
    let mut spec = ModelSpec::new(variant, DatasetSchema::Toy.class_map(), seed);
    spec.encoder.stub_layers = 3;
    spec.encoder.stub_dim = 24;
    spec.head = HeadConfig {
        hidden: 32,
        ..Default::default()
    };
    spec
}

fn job(dir: &Path, steps: usize, seed: u64) -> TrainJob {
    TrainJob {
        train: TrainConfig {
            max_steps: Some(steps),
            batch_size: 2,
            ..Default::default()
        },
        loss: LossWeights::default(),
        frame_threshold: 0.5,
        seed,
        out_dir: dir.to_path_buf(),
    }
}

fn data(n: usize) -> TrainData {
    TrainData {
        train: toy_samples(n, 11).unwrap(),
        val: vec![],
    }
}

fn checksums(model: &Model) -> Vec<(ParamGroup, String)> {
    model
        .params
        .groups()
        .into_iter()
        .map(|g| (g, model.params.checksum(g).unwrap()))
        .collect()
}

#[test]
fn same_seed_same_parameters() {
    let d = data(4);
    let run = |seed| {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::build(&small_spec(Variant::MerTech, seed)).unwrap();
        train(&mut m, &d, &job(dir.path(), 4, seed)).unwrap();
        checksums(&m)
    };
    let a = run(3);
    assert_eq!(a, run(3));
    assert_ne!(a, run(4));
}

#[test]
fn log_respects_clip_and_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::build(&small_spec(Variant::MerTech, 1)).unwrap();
    let out = train(&mut m, &data(4), &job(dir.path(), 6, 1)).unwrap();
    let log = read_log(&out.log).unwrap();
    assert_eq!(log.len(), 6);
    for (s, l) in log.iter().enumerate() {
        assert_eq!(l.step, s);
        assert!(l.grad_norm_clipped <= 3.0 + 1e-6);
        assert!((l.lr - cosine_lr(0.001, s, 6)).abs() < 1e-15);
        assert!(l.loss.is_finite() && l.loss >= 0.0);
        assert!(l.group_grad_norms.contains_key("refinement"));
    }
    assert_eq!(log[0].lr, 0.001);
}

#[test]
fn probing_leaves_stub_variant_trainable_head_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::build(&small_spec(Variant::IptProbing, 2)).unwrap();
    let before = m.params.checksum(ParamGroup::IptHead).unwrap();
    train(&mut m, &data(2), &job(dir.path(), 2, 2)).unwrap();
    assert_ne!(before, m.params.checksum(ParamGroup::IptHead).unwrap());
    assert!(!m.params.groups().contains(&ParamGroup::OnsetBranch));
}

fn tiny_backbone(dir: &Path) -> EncoderConfig {
    let cfg = BackboneConfig {
        conv_dim: vec![8; 7],
        hidden_size: 16,
        num_hidden_layers: 2,
        num_attention_heads: 4,
        intermediate_size: 32,
        num_conv_pos_embeddings: 8,
        num_conv_pos_embedding_groups: 4,
        ..Default::default()
    };
    init_random_checkpoint(dir, &cfg, 5).unwrap();
    EncoderConfig {
        backend: BackendKind::Pretrained,
        checkpoint_dir: Some(dir.to_path_buf()),
        ..Default::default()
    }
}

#[test]
fn frozen_extractor_keeps_its_checksum() {
    let ck = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut spec = small_spec(Variant::MerTech, 4);
    spec.encoder = tiny_backbone(ck.path());
    let mut m = Model::build(&spec).unwrap();
    let ext = m.params.checksum(ParamGroup::Extractor).unwrap();
    let body = m.params.checksum(ParamGroup::Backbone).unwrap();
    let log = train(&mut m, &data(2), &job(out.path(), 2, 4)).unwrap();
    assert_eq!(ext, m.params.checksum(ParamGroup::Extractor).unwrap());
    assert_ne!(body, m.params.checksum(ParamGroup::Backbone).unwrap());
    for l in read_log(&log.log).unwrap() {
        assert!(!l.group_grad_norms.contains_key("extractor"));
    }
}

#[test]
fn probing_freezes_the_whole_backbone() {
    let ck = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut spec = small_spec(Variant::IptProbing, 4);
    spec.encoder = tiny_backbone(ck.path());
    let mut m = Model::build(&spec).unwrap();
    let before = (
        m.params.checksum(ParamGroup::Extractor).unwrap(),
        m.params.checksum(ParamGroup::Backbone).unwrap(),
    );
    train(&mut m, &data(2), &job(out.path(), 2, 4)).unwrap();
    let after = (
        m.params.checksum(ParamGroup::Extractor).unwrap(),
        m.params.checksum(ParamGroup::Backbone).unwrap(),
    );
    assert_eq!(before, after);
}

fn posterior_values(m: &Model, samples: &[Sample]) -> Vec<f32> {
    let waves: Vec<&[f32]> = samples.iter().map(|s| s.waveform.as_slice()).collect();
    let lens: Vec<usize> = samples.iter().map(|s| s.labels.n_valid()).collect();
    predict_windows(m, &waves, &lens, 4)
        .unwrap()
        .iter()
        .flat_map(|p| p.y_ipt.flatten_all().unwrap().to_vec1::<f32>().unwrap())
        .collect()
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(2);
    let mut m = Model::build(&small_spec(Variant::IptPitchOnset, 6)).unwrap();
    let out = train(&mut m, &d, &job(dir.path(), 2, 6)).unwrap();
    let back = Model::load(&out.checkpoint).unwrap();
    assert_eq!(back.variant(), Variant::IptPitchOnset);
    assert_eq!(posterior_values(&m, &d.train), posterior_values(&back, &d.train));
}

fn toy_corpus(root: &Path) -> Corpus {
    let raw = root.join("raw");
    let prepared = root.join("prepared");
    write_toy_corpus(&raw, [(SplitTag::Train, 2), (SplitTag::Val, 1), (SplitTag::Test, 2)], 6.0, 9).unwrap();
    corpus::prepare(DatasetSchema::Toy, &raw, &prepared, 0).unwrap();
    Corpus::open(&prepared).unwrap()
}

#[test]
fn evaluation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(dir.path());
    let m = Model::build(&small_spec(Variant::MerTech, 8)).unwrap();
    let cfg = DecodeConfig::default();
    let a = evaluate_checkpoint(&m, &corpus, 0, SplitTag::Test, &cfg, 0.05).unwrap();
    let b = evaluate_checkpoint(&m, &corpus, 0, SplitTag::Test, &cfg, 0.05).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.recordings, 2);
}

#[test]
fn validation_drives_checkpoint_selection() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(dir.path());
    let mut m = Model::build(&small_spec(Variant::MerTech, 8)).unwrap();
    let d = TrainData::from_corpus(&corpus, 0, m.n_time()).unwrap();
    assert!(!d.val.is_empty());
    let mut j = job(&dir.path().join("run"), 4, 8);
    j.train.max_steps = None;
    j.train.epochs = 2;
    let out = train(&mut m, &d, &j).unwrap();
    assert_eq!(out.epochs.len(), 2);
    assert!(out.best_val_macro_f1.is_some());
    assert!(out.checkpoint.join("checkpoint.json").exists());
}

#[test]
fn empty_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    write_toy_corpus(&raw, [(SplitTag::Train, 2), (SplitTag::Val, 1), (SplitTag::Test, 0)], 6.0, 9).unwrap();
    corpus::prepare(DatasetSchema::Toy, &raw, &dir.path().join("p"), 0).unwrap();
    let corpus = Corpus::open(&dir.path().join("p")).unwrap();
    let m = Model::build(&small_spec(Variant::MerTech, 8)).unwrap();
    let r = evaluate_checkpoint(&m, &corpus, 0, SplitTag::Test, &DecodeConfig::default(), 0.05);
    assert!(matches!(r, Err(Error::EmptySplit(_))), "{r:?}");
}

#[test]
fn class_map_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(dir.path());
    let mut spec = small_spec(Variant::MerTech, 8);
    spec.class_map.ipt_names[0] = "other".into();
    let m = Model::build(&spec).unwrap();
    let r = evaluate_checkpoint(&m, &corpus, 0, SplitTag::Test, &DecodeConfig::default(), 0.05);
    assert!(matches!(r, Err(Error::Compatibility(_))));
}
