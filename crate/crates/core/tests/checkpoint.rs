use attcap::checkpoint::{from_bytes, load, save, to_bytes, MAGIC};
use attcap::data::{generate_dataset, Vocabulary};
use attcap::model::{Ablation, Model, ModelConfig, RegionProvider};

fn model(provider: RegionProvider, ablation: Ablation) -> Model {
    let data = generate_dataset(5, 31);
    let vocab = Vocabulary::build(data.iter().flat_map(|r| r.captions.iter()), 1).unwrap();
    let config = ModelConfig {
        provider,
        ablation,
        feedback: ModelConfig::feedback_for(ablation),
        ..ModelConfig::default()
    };
    Model::new(config, vocab, 7).unwrap()
}

#[test]
fn round_trip_preserves_every_bit() {
    for provider in [
        RegionProvider::Grid,
        RegionProvider::Proposals,
        RegionProvider::Stn,
    ] {
        let m = model(provider, Ablation::Full);
        let train = serde_json::json!({"stage1_steps": 3});
        let bytes = to_bytes(&m, Some(train.clone())).unwrap();
        let (back, manifest) = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(manifest.train, Some(train));
        assert_eq!(to_bytes(&back, manifest.train).unwrap(), bytes);
    }
    let m = model(RegionProvider::Grid, Ablation::WhWr);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&path, &m, None).unwrap();
    assert_eq!(load(&path).unwrap().0, m);
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = to_bytes(&model(RegionProvider::Grid, Ablation::Full), None).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    for cut in [0, 4, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(from_bytes(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(from_bytes(&bad).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(from_bytes(&long).is_err());
}
