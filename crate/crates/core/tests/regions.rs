mod common;

use attcap::autodiff::{grad_check_strided, Tape, Tensor};
use attcap::data::{generate_dataset, generate_scene};
use attcap::encoder::{
    self, conv_stack, encode, grid_indices, image_code, init_encoder, subsample_grid,
};
use attcap::geometry::PixelBox;
use attcap::params::{Bound, ParamStore};
use attcap::regions::{
    affine_field, anchor_lattice, center_tap_identity, grid_regions, grid_regions_strided,
    init_stn, oracle_proposals, proposal_regions, select_proposals, stn_descriptors, stn_geometry,
    ProposalBox, Selection, DOUBLE_SCALE, IDENTITY,
};
use attcap::rng::substream;
use common::*;

fn map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    uniform(&mut rng(seed), &[h, w, c], -1.0, 1.0)
}

fn cell(m: &Tensor, i: usize, j: usize) -> Vec<f64> {
    let (w, c) = (m.shape()[1], m.shape()[2]);
    m.data()[(i * w + j) * c..(i * w + j + 1) * c].to_vec()
}

fn encoder_params(size: usize, seed: u64) -> ParamStore {
    let mut p = ParamStore::new();
    init_encoder(&mut p, size, 16, &mut substream(seed, "init")).unwrap();
    p
}

#[test]
fn zero_image_with_zero_biases_encodes_to_zero() {
    let p = encoder_params(64, 0);
    assert!(p
        .iter()
        .filter(|(n, _)| n.ends_with(".b"))
        .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    let out = encode(&Tensor::zeros(&[64, 64, 3]), None, &p).unwrap();
    assert_eq!(out.gamma.shape(), &[8, 8, encoder::FEATURE_CHANNELS]);
    assert!(out.gamma.data().iter().all(|&v| v == 0.0));
    assert!(out.phi.data().iter().all(|&v| v == 0.0));
}

#[test]
fn feature_cells_only_see_their_receptive_field() {
    let p = encoder_params(64, 1);
    let a = uniform(&mut rng(2), &[64, 64, 3], 0.0, 1.0);
    let mut b = a.clone();
    // cell (3, 3) sees rows and columns 10..=38
    for r in 0..64 {
        for c in 0..64 {
            if !(10..=38).contains(&r) || !(10..=38).contains(&c) {
                for ch in 0..3 {
                    b.set(&[r, c, ch], 0.5);
                }
            }
        }
    }
    let (ga, gb) = (
        encode(&a, None, &p).unwrap().gamma,
        encode(&b, None, &p).unwrap().gamma,
    );
    assert_eq!(cell(&ga, 3, 3), cell(&gb, 3, 3));
    assert_ne!(cell(&ga, 0, 0), cell(&gb, 0, 0));
}

#[test]
fn image_code_gradient_on_toy_input() {
    let p = encoder_params(16, 3);
    let names: Vec<String> = p.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
    let image = uniform(&mut rng(4), &[16, 16, 3], 0.0, 1.0);
    let report = grad_check_strided(
        |tape: &mut Tape, v| {
            let bound = Bound::from_vars(&names, v);
            let x = tape.constant(image.clone());
            let g = conv_stack(tape, &bound, encoder::MAIN, x)?;
            let phi = image_code(tape, &bound, g)?;
            tape.sum(phi)
        },
        &inputs,
        1e-5,
        1e-4,
        40,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn grid_subsampling_counts() {
    assert_eq!(grid_indices(14, 14, 2).unwrap().len(), 49);
    assert_eq!(grid_indices(8, 8, 2).unwrap().len(), 16);
    let m = map(5, 5, 2, 5);
    assert_eq!(subsample_grid(&m, 1).unwrap(), m);
    let s = subsample_grid(&map(8, 8, 2, 6), 2).unwrap();
    assert_eq!(s.shape(), &[4, 4, 2]);
    assert!(grid_indices(8, 8, 0).is_err());
}

#[test]
fn grid_regions_read_cells_directly() {
    let m = map(2, 2, 3, 7);
    let r = grid_regions(&m, 16.0).unwrap();
    assert_eq!(r.len(), 4);
    assert_eq!(r.descriptors.shape(), &[4, 3]);
    for i in 0..4 {
        assert_eq!(
            &r.descriptors.data()[i * 3..i * 3 + 3],
            cell(&m, i / 2, i % 2).as_slice()
        );
    }
    assert_eq!(grid_regions(&map(8, 8, 2, 8), 64.0).unwrap().len(), 64);
    assert_eq!(grid_regions(&map(14, 14, 2, 9), 112.0).unwrap().len(), 196);
    let s = grid_regions_strided(&map(8, 8, 2, 10), 2, 64.0).unwrap();
    assert_eq!(s.len(), 16);
}

#[test]
fn proposal_pooling_examples() {
    let m = map(16, 16, 4, 11);
    let whole = ProposalBox {
        bbox: PixelBox::new(0.0, 0.0, 64.0, 64.0),
        score: 1.0,
    };
    let r = proposal_regions(&m, &[whole], 1, Selection::TopK, 64.0).unwrap();
    for ch in 0..4 {
        let max = (0..256)
            .map(|i| m.data()[i * 4 + ch])
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.descriptors.data()[ch], max);
    }
    // pitch 4 px: cell (2, 5) has its center at (8.25, 20.25)
    let one = ProposalBox {
        bbox: PixelBox::new(8.0, 20.0, 12.0, 24.0),
        score: 1.0,
    };
    let r = proposal_regions(&m, &[one], 1, Selection::TopK, 64.0).unwrap();
    assert_eq!(r.descriptors.data(), cell(&m, 2, 5).as_slice());
}

#[test]
fn training_selection_samples_k_distinct_boxes() {
    let scene = generate_scene(3);
    let boxes = oracle_proposals(&scene, 200, 0.0, 1);
    let mut rng = substream(0, "sampling");
    let chosen = select_proposals(&boxes, 50, Selection::Random(&mut rng)).unwrap();
    assert_eq!(chosen.len(), 50);
    let mut positions: Vec<usize> = chosen
        .iter()
        .map(|c| boxes.iter().position(|b| b == c).unwrap())
        .collect();
    let sorted = {
        let mut s = positions.clone();
        s.sort_unstable();
        s
    };
    assert_eq!(positions, sorted, "kept in list order");
    positions.dedup();
    assert_eq!(positions.len(), 50);
    let again =
        select_proposals(&boxes, 50, Selection::Random(&mut substream(0, "sampling"))).unwrap();
    assert_eq!(again, chosen);
}

#[test]
fn oracle_proposal_examples() {
    let scenes = generate_dataset(50, 4);
    for s in &scenes {
        let exact = oracle_proposals(s, 0, 0.0, 9);
        let gt: Vec<PixelBox> = exact.iter().map(|p| p.bbox).collect();
        assert_eq!(gt, s.gt_boxes);
    }
    let two = scenes
        .iter()
        .find(|s| s.gt_boxes.len() == 2)
        .expect("a two-object scene");
    assert_eq!(oracle_proposals(two, 48, 2.0, 9).len(), 50);

    let jitter = 2.0;
    for s in &scenes {
        for (p, gt) in oracle_proposals(s, 0, jitter, 17).iter().zip(&s.gt_boxes) {
            let side = gt.height().min(gt.width());
            let bound = ((side - 2.0 * jitter) / (side + 2.0 * jitter)).powi(2);
            assert!(p.bbox.iou(gt) >= bound - 1e-12, "{:?} vs {gt:?}", p.bbox);
        }
    }
}

/// Output filter picking tap `k` of the 3x3 patch.
fn tap_filter(c: usize, k: usize) -> Tensor {
    let mut w = Tensor::zeros(&[3, 3, c, c]);
    for ch in 0..c {
        w.set(&[k / 3, k % 3, ch, ch], 1.0);
    }
    w
}

#[test]
fn identity_transforms_sample_the_literal_neighborhood() {
    let (h, w, c) = (5, 6, 3);
    let m = map(h, w, c, 12);
    for k in 0..9 {
        let mut p = ParamStore::new();
        p.insert("stn.out.w", tap_filter(c, k));
        p.insert_zeros("stn.out.b", &[c]);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, |_| false);
        let g = tape.constant(m.clone());
        let theta = tape.constant(Tensor::new(&[h * w, 6], IDENTITY.repeat(h * w)).unwrap());
        let (d, _) = stn_descriptors(&mut tape, &bound, g, theta, 1).unwrap();
        let d = tape.value(d);
        let (dr, dc) = anchor_lattice()[k];
        for i in 0..h {
            for j in 0..w {
                let ni = (i as f64 + dr).clamp(0.0, (h - 1) as f64) as usize;
                let nj = (j as f64 + dc).clamp(0.0, (w - 1) as f64) as usize;
                let n = i * w + j;
                assert_eq!(&d.data()[n * c..(n + 1) * c], cell(&m, ni, nj).as_slice());
            }
        }
    }
}

#[test]
fn warm_start_doubles_the_anchor() {
    let mut p = ParamStore::new();
    init_stn(&mut p, 4, &mut substream(0, "init"));
    assert_eq!(p.get("stn.out.w").unwrap(), &center_tap_identity(4));
    let field = affine_field(&map(6, 6, 4, 13), &p).unwrap();
    assert!(field.transforms.iter().all(|a| *a == DOUBLE_SCALE));
    let doubled = stn_geometry(
        &Tensor::new(&[1, 6], DOUBLE_SCALE.to_vec()).unwrap(),
        1,
        1,
        1,
        8.0,
    )
    .unwrap();
    let unit = stn_geometry(
        &Tensor::new(&[1, 6], IDENTITY.to_vec()).unwrap(),
        1,
        1,
        1,
        8.0,
    )
    .unwrap();
    let (d, u) = (doubled[0].bounding_box(), unit[0].bounding_box());
    assert!((d.height() - 2.0 * u.height()).abs() < 1e-12);
    assert!(
        (u.height() - 16.0).abs() < 1e-12,
        "anchor corners at +-1 cell"
    );
}

#[test]
fn localization_gradient_on_small_map() {
    let c = 2;
    let mut p = ParamStore::new();
    init_stn(&mut p, c, &mut substream(1, "init"));
    let mut r = rng(14);
    // move off the exact lattice so the sampling points are non-integer
    p.insert("stn.loc2.w", uniform(&mut r, &[3, 3, c, 6], -0.2, 0.2));
    let names = ["stn.loc1.w", "stn.loc1.b", "stn.loc2.w", "stn.loc2.b"]
        .map(String::from)
        .to_vec();
    let inputs: Vec<Tensor> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
    let gamma = uniform(&mut r, &[4, 4, c], 0.1, 1.0);
    let report = grad_check_strided(
        |tape: &mut Tape, v| {
            let loc = Bound::from_vars(&names, v);
            let mut fixed = ParamStore::new();
            fixed.insert("stn.out.w", p.get("stn.out.w")?.clone());
            fixed.insert("stn.out.b", p.get("stn.out.b")?.clone());
            let out = fixed.bind(tape, |_| false);
            let g = tape.constant(gamma.clone());
            let theta = attcap::regions::stn_transforms(tape, &loc, g)?;
            let (d, _) = stn_descriptors(tape, &out, g, theta, 1)?;
            tape.sum(d)
        },
        &inputs,
        1e-5,
        1e-4,
        200,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn shared_hires_reuses_the_main_stack() {
    use attcap::data::Vocabulary;
    use attcap::model::{Model, ModelConfig, RegionProvider};
    let data = generate_dataset(2, 15);
    let vocab = Vocabulary::build(data.iter().flat_map(|r| r.captions.iter()), 1).unwrap();
    let config = |separate_hires| ModelConfig {
        provider: RegionProvider::Proposals,
        separate_hires,
        ..ModelConfig::default()
    };
    let shared = Model::new(config(false), vocab.clone(), 0).unwrap();
    let separate = Model::new(config(true), vocab, 0).unwrap();
    assert!(shared.params.names().all(|n| !n.starts_with("hires.")));
    assert!(separate.params.names().any(|n| n.starts_with("hires.")));
    let input = shared.prepare(&data[0], None);
    let g = shared.encode(&input).unwrap().gamma_hires.unwrap();
    assert_eq!(g.shape(), &[16, 16, encoder::FEATURE_CHANNELS]);
    let mut tape = Tape::new();
    let bound = shared.params.bind(&mut tape, |_| false);
    let x = tape.constant(input.hires.clone().unwrap());
    let direct = conv_stack(&mut tape, &bound, encoder::MAIN, x).unwrap();
    assert_eq!(tape.value(direct), &g);
}
