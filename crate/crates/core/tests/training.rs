mod common;

use attcap::attention::{self, attend_step, init_state, AttentionParams, Feedback, GruParams};
use attcap::autodiff::Tensor;
use attcap::data::{generate_dataset, SceneRecord, Vocabulary, STOP};
use attcap::decode::StepModel;
use attcap::encoder::is_encoder_param;
use attcap::model::{Ablation, Model, ModelConfig, RegionProvider};
use attcap::params::{GradMap, ParamStore};
use attcap::regions::{affine_field, DOUBLE_SCALE};
use attcap::training::{
    clip_global_norm, global_norm, stn_warmstart, train, AdamConfig, AdamState, TrainConfig,
};

fn corpus(n: usize, seed: u64) -> (Vec<SceneRecord>, Vocabulary) {
    let data = generate_dataset(n, seed);
    let vocab = Vocabulary::build(data.iter().flat_map(|r| r.captions.iter()), 1).unwrap();
    (data, vocab)
}

fn short_run(stage1: usize, stage2: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        warmup_steps: 0,
        stage1_steps: stage1,
        stage2_steps: stage2,
        ..TrainConfig::default()
    }
}

fn zero_attention(model: &mut Model) {
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| !is_encoder_param(n))
        .map(String::from)
        .collect();
    for n in names {
        model.params.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
}

#[test]
fn uniform_model_pays_log_vocabulary_per_token() {
    let (data, vocab) = corpus(3, 1);
    let mut model = Model::new(ModelConfig::default(), vocab, 0).unwrap();
    zero_attention(&mut model);
    let n = model.words() as f64;
    for rec in &data {
        let input = model.prepare(rec, None);
        let tokens = model.vocab.encode(&rec.captions[0]);
        let loss = model.caption_loss(&input, &tokens).unwrap();
        assert!((loss - tokens.len() as f64 * n.ln()).abs() < 1e-9);
    }
}

#[test]
fn peaked_model_pays_nothing() {
    let (data, vocab) = corpus(2, 2);
    let mut model = Model::new(ModelConfig::default(), vocab, 0).unwrap();
    zero_attention(&mut model);
    let target = 3;
    model
        .params
        .get_mut(attention::EMBED)
        .unwrap()
        .set(&[target, 0], 1.0);
    model
        .params
        .get_mut(attention::WORD_BIAS)
        .unwrap()
        .set(&[0], 100.0);
    let input = model.prepare(&data[0], None);
    let loss = model
        .caption_loss(&input, &[target, target, target])
        .unwrap();
    assert!(loss.abs() < 1e-12, "{loss}");
}

#[test]
fn caption_loss_matches_stepwise_computation() {
    let (data, vocab) = corpus(3, 3);
    for feedback in [Feedback::Marginal, Feedback::Conditional] {
        let config = ModelConfig {
            feedback,
            ..ModelConfig::default()
        };
        let model = Model::new(config, vocab.clone(), 4).unwrap();
        let att = AttentionParams::from_store(&model.params).unwrap();
        let gru = GruParams::from_store(&model.params).unwrap();
        for rec in &data {
            let input = model.prepare(rec, None);
            let f = model.encode(&input).unwrap();
            let cells = f.gamma.shape()[0] * f.gamma.shape()[1];
            let regions =
                Tensor::new(&[cells, f.gamma.shape()[2]], f.gamma.data().to_vec()).unwrap();
            let tokens = [model.vocab.encode(&rec.captions[0])[0], STOP];
            let h0 = init_state(&f.phi, &att.init_state).unwrap();
            let s0 = attend_step(&h0, &regions, tokens[0], &att, &gru, feedback).unwrap();
            let s1 = attend_step(&s0.h_next, &regions, tokens[1], &att, &gru, feedback).unwrap();
            let expected =
                -s0.word_dist.data()[tokens[0]].ln() - s1.word_dist.data()[tokens[1]].ln();
            let loss = model.caption_loss(&input, &tokens).unwrap();
            assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
        }
    }
}

fn store(values: &[f64]) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("p", Tensor::vector(values.to_vec()));
    p
}

fn grads(values: &[f64]) -> GradMap {
    GradMap::from([("p".to_string(), values.to_vec())])
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig::default();
    let mut p = store(&[1.0, -2.0]);
    AdamState::new()
        .step(&mut p, &grads(&[0.0, 0.0]), 0.1, &cfg)
        .unwrap();
    assert_eq!(p.get("p").unwrap().data(), &[1.0, -2.0]);

    let mut p = store(&[1.0, -2.0]);
    AdamState::new()
        .step(&mut p, &grads(&[0.5, -3.0]), 0.1, &cfg)
        .unwrap();
    let d = p.get("p").unwrap().data();
    assert!((d[0] - 0.9).abs() < 1e-6);
    assert!((d[1] + 1.9).abs() < 1e-6);

    let (mut a, mut b) = (store(&[0.3]), store(&[0.3]));
    AdamState::new()
        .step(&mut a, &grads(&[0.02]), 0.1, &cfg)
        .unwrap();
    AdamState::new()
        .step(&mut b, &grads(&[20.0]), 0.1, &cfg)
        .unwrap();
    assert!((a.get("p").unwrap().data()[0] - b.get("p").unwrap().data()[0]).abs() < 1e-6);
}

#[test]
fn adam_rejects_non_finite_gradients_without_side_effects() {
    let mut p = store(&[1.0]);
    let mut state = AdamState::new();
    assert!(state
        .step(&mut p, &grads(&[f64::NAN]), 0.1, &AdamConfig::default())
        .is_err());
    assert_eq!(p.get("p").unwrap().data(), &[1.0]);
    assert_eq!(state, AdamState::new());
}

#[test]
fn clipping_rescales_to_the_limit() {
    let mut g = GradMap::from([("a".to_string(), vec![6.0]), ("b".to_string(), vec![8.0])]);
    assert_eq!(clip_global_norm(&mut g, 5.0), 10.0);
    assert!((global_norm(&g) - 5.0).abs() < 1e-12);
    assert!((g["a"][0] - 3.0).abs() < 1e-12);
    let mut small = GradMap::from([("a".to_string(), vec![1.0])]);
    clip_global_norm(&mut small, 5.0);
    assert_eq!(small["a"], vec![1.0]);
}

#[test]
fn stage_one_freezes_the_encoder_and_stage_two_releases_it() {
    let (data, vocab) = corpus(8, 5);
    let model = Model::new(ModelConfig::default(), vocab, 1).unwrap();
    let frozen = train(model.clone(), &data, &short_run(5, 0)).unwrap().model;
    let released = train(model.clone(), &data, &short_run(3, 2)).unwrap().model;
    for (name, t) in model.params.iter() {
        if is_encoder_param(name) {
            assert_eq!(frozen.params.get(name).unwrap(), t, "{name}");
        }
    }
    assert_ne!(
        frozen.params.get(attention::WORD_STATE).unwrap(),
        model.params.get(attention::WORD_STATE).unwrap()
    );
    assert!(model
        .params
        .iter()
        .filter(|(n, _)| is_encoder_param(n))
        .any(|(n, t)| released.params.get(n).unwrap() != t));
}

#[test]
fn training_is_deterministic() {
    let (data, vocab) = corpus(8, 6);
    let model = Model::new(ModelConfig::default(), vocab, 2).unwrap();
    let config = TrainConfig {
        warmup_steps: 2,
        flip: true,
        ..short_run(3, 2)
    };
    let a = train(model.clone(), &data, &config).unwrap();
    let b = train(model, &data, &config).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.warmup, b.warmup);
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace.losses.len(), 5);
    assert_eq!(a.warmup.losses.len(), 2);
}

#[test]
fn ablated_parameters_stay_zero() {
    let (data, vocab) = corpus(6, 7);
    let config = ModelConfig {
        ablation: Ablation::Wh,
        feedback: ModelConfig::feedback_for(Ablation::Wh),
        ..ModelConfig::default()
    };
    let model = Model::new(config, vocab, 3).unwrap();
    let trained = train(model, &data, &short_run(4, 0)).unwrap().model;
    for name in Ablation::Wh.zeroed() {
        assert!(
            trained
                .params
                .get(name)
                .unwrap()
                .data()
                .iter()
                .all(|&v| v == 0.0),
            "{name}"
        );
    }
}

#[test]
fn stn_warm_start_reproduces_the_grid_model() {
    let (data, vocab) = corpus(4, 8);
    let grid = Model::new(ModelConfig::default(), vocab, 4).unwrap();
    let grid = train(grid, &data, &short_run(3, 0)).unwrap().model;
    let stn = stn_warmstart(&grid, 9).unwrap();
    assert_eq!(stn.config.provider, RegionProvider::Stn);
    for (name, t) in grid.params.iter() {
        assert_eq!(stn.params.get(name).unwrap(), t, "{name}");
    }
    for rec in &data {
        let input = stn.prepare(rec, None);
        let f = stn.encode(&input).unwrap();
        assert!(affine_field(&f.gamma, &stn.params)
            .unwrap()
            .transforms
            .iter()
            .all(|a| *a == DOUBLE_SCALE));
        let (gs, ss) = (
            grid.session(&grid.prepare(rec, None)).unwrap(),
            stn.session(&input).unwrap(),
        );
        let g = gs.step(&gs.initial()).unwrap().log_probs;
        let s = ss.step(&ss.initial()).unwrap().log_probs;
        for (a, b) in g.iter().zip(&s) {
            assert!((a.exp() - b.exp()).abs() < 1e-8);
        }
    }
    assert!(stn_warmstart(&stn, 0).is_err());
}
