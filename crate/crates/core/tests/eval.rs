use attcap::data::{generate_dataset, SceneRecord, Vocabulary};
use attcap::eval::{evaluate, proposal_sweep, stride_sweep, sweep_csv, EvalOptions};
use attcap::model::{Model, ModelConfig, RegionProvider};
use attcap::training::{train, TrainConfig};

fn trained(provider: RegionProvider) -> (Model, Vec<SceneRecord>) {
    let data = generate_dataset(12, 41);
    let vocab = Vocabulary::build(data.iter().flat_map(|r| r.captions.iter()), 1).unwrap();
    let config = ModelConfig {
        provider,
        ..ModelConfig::default()
    };
    let model = Model::new(config, vocab, 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        stage1_steps: 10,
        stage2_steps: 0,
        ..TrainConfig::default()
    };
    (
        train(model, &data[..8], &cfg).unwrap().model,
        data[8..].to_vec(),
    )
}

#[test]
fn beam_of_one_reports_greedy_metrics() {
    let (model, held) = trained(RegionProvider::Grid);
    let (greedy, captions) = evaluate(
        &model,
        &held,
        &EvalOptions {
            beam: 0,
            max_len: 12,
        },
    )
    .unwrap();
    let (beam, captions1) = evaluate(
        &model,
        &held,
        &EvalOptions {
            beam: 1,
            max_len: 12,
        },
    )
    .unwrap();
    assert_eq!(greedy, beam);
    assert_eq!(captions, captions1);
    assert_eq!(captions.len(), held.len());
    assert_eq!(greedy.images, held.len());
    let ac = greedy.attention_correctness.unwrap();
    assert!((0.0..=1.0).contains(&ac));
    let base = greedy.uniform_baseline.unwrap();
    assert!(base > 0.0 && base < 1.0);
    assert!(greedy.bleu.iter().all(|b| (0.0..=1.0).contains(b)));
}

#[test]
fn stride_sweep_counts_regions() {
    let (model, held) = trained(RegionProvider::Grid);
    let rows = stride_sweep(&model, &held[..2], &[1, 2, 4, 8], &EvalOptions::default()).unwrap();
    let counts: Vec<usize> = rows.iter().map(|r| r.regions).collect();
    assert_eq!(counts, vec![64, 16, 4, 1]);
    let csv = sweep_csv("stride", &rows);
    assert!(csv.starts_with("stride,regions,bleu4,attention_correctness\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn proposal_sweep_is_ascending_and_capped() {
    let (model, held) = trained(RegionProvider::Proposals);
    let rows = proposal_sweep(
        &model,
        &held[..2],
        None,
        &[100, 5, 20, 5],
        &EvalOptions::default(),
    )
    .unwrap();
    let ks: Vec<usize> = rows.iter().map(|r| r.setting).collect();
    assert_eq!(ks, vec![5, 20, 100]);
    assert_eq!(rows[0].regions, 5);
    assert!(rows[2].regions < 100);
}
