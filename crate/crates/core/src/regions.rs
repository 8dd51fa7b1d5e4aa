//! Attention regions: descriptors (rows of `R`) plus their image-space
//! geometry, from the activation grid, max-pooled proposal boxes, or the
//! convolutional spatial transformer.

use std::collections::HashMap;
use std::io::BufRead;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CellRect, Tape, Tensor, Var};
use crate::data::SceneRecord;
use crate::encoder::{grid_indices, CELL_CENTER};
use crate::error::{invalid, Error, Result};
use crate::geometry::{PixelBox, Quad};
use crate::params::{Bound, ParamStore};
use crate::rng::{indexed_substream, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    /// `[n_r, d_r]`
    pub descriptors: Tensor,
    /// One quadrilateral per region, in image pixels.
    pub geometry: Vec<Quad>,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalBox {
    pub bbox: PixelBox,
    pub score: f64,
}

/// Externally supplied proposals keyed by scene id.
pub type ProposalMap = HashMap<String, Vec<ProposalBox>>;

fn map_dims(t: &[usize]) -> Result<(usize, usize, usize)> {
    match t {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(invalid(format!(
            "expected an [H, W, c] feature map, got {t:?}"
        ))),
    }
}

// ---------------------------------------------------------------- grid

/// Cell boxes for the kept cells of a stride-subsampled `h x w` grid over a
/// square image of side `image_size`: each cell's receptive-field center
/// plus/minus half the (strided) cell pitch, clipped to the image.
pub fn grid_geometry(h: usize, w: usize, stride: usize, image_size: f64) -> Result<Vec<Quad>> {
    let (ph, pw) = (image_size / h as f64, image_size / w as f64);
    Ok(grid_indices(h, w, stride)?
        .into_iter()
        .map(|idx| {
            let (i, j) = ((idx / w) as f64, (idx % w) as f64);
            let (cr, cc) = ((i + CELL_CENTER) * ph, (j + CELL_CENTER) * pw);
            let (hr, hc) = (0.5 * ph * stride as f64, 0.5 * pw * stride as f64);
            PixelBox::new(cr - hr, cc - hc, cr + hr, cc + hc)
                .clip(image_size, image_size)
                .to_quad()
        })
        .collect())
}

/// Grid descriptors on a tape: the channel columns of the kept cells.
pub fn grid_descriptors(tape: &mut Tape, gamma: Var, stride: usize) -> Result<Var> {
    let (h, w, c) = map_dims(tape.shape(gamma))?;
    let idx = grid_indices(h, w, stride)?;
    let rows = tape.reshape(gamma, &[h * w, c])?;
    if stride == 1 {
        return Ok(rows);
    }
    tape.gather_rows(rows, idx)
}

/// Every cell of `gamma` as a region.
pub fn grid_regions(gamma: &Tensor, image_size: f64) -> Result<RegionSet> {
    grid_regions_strided(gamma, 1, image_size)
}

pub fn grid_regions_strided(gamma: &Tensor, stride: usize, image_size: f64) -> Result<RegionSet> {
    let (h, w, _) = map_dims(gamma.shape())?;
    let mut tape = Tape::new();
    let g = tape.constant(gamma.clone());
    let d = grid_descriptors(&mut tape, g, stride)?;
    Ok(RegionSet {
        descriptors: tape.value(d).clone(),
        geometry: grid_geometry(h, w, stride, image_size)?,
    })
}

// ---------------------------------------------------------------- proposals

/// Feature cells covered by a pixel box: cells whose centers fall inside the
/// clipped box. A box covering no cell center snaps to the cell containing
/// its (clamped) center.
pub fn box_to_cells(b: &PixelBox, h: usize, w: usize, image_size: f64) -> CellRect {
    let b = b.clip(image_size, image_size);
    let axis = |lo: f64, hi: f64, n: usize| {
        let pitch = image_size / n as f64;
        let first = (lo / pitch - CELL_CENTER).ceil().max(0.0) as usize;
        let last = ((hi / pitch - CELL_CENTER).ceil() as isize).clamp(0, n as isize) as usize;
        if first < last {
            (first, last)
        } else {
            let mid = (lo + hi) * 0.5 / pitch - CELL_CENTER;
            let c = ((mid + 0.5).floor().max(0.0) as usize).min(n - 1);
            (c, c + 1)
        }
    };
    let (r0, r1) = axis(b.r0, b.r1, h);
    let (c0, c1) = axis(b.c0, b.c1, w);
    CellRect { r0, r1, c0, c1 }
}

/// How proposals are chosen when there are more than `k`.
pub enum Selection<'a> {
    /// Highest scores first, ties by list order (evaluation).
    TopK,
    /// Uniformly random subset, kept in list order (training).
    Random(&'a mut Rng),
}

pub fn select_proposals(
    boxes: &[ProposalBox],
    k: usize,
    selection: Selection<'_>,
) -> Result<Vec<ProposalBox>> {
    if boxes.is_empty() {
        return Err(invalid("proposal list is empty"));
    }
    if k == 0 {
        return Err(invalid("proposal count must be at least 1"));
    }
    let k = k.min(boxes.len());
    Ok(match selection {
        Selection::TopK => {
            let mut order: Vec<usize> = (0..boxes.len()).collect();
            order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
            order[..k].iter().map(|&i| boxes[i]).collect()
        }
        Selection::Random(rng) => {
            let mut idx = sample(rng, boxes.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| boxes[i]).collect()
        }
    })
}

/// Proposal descriptors on a tape: channelwise max over each box's cells.
pub fn proposal_descriptors(
    tape: &mut Tape,
    gamma_hires: Var,
    boxes: &[ProposalBox],
    image_size: f64,
) -> Result<Var> {
    if boxes.is_empty() {
        return Err(invalid("proposal list is empty"));
    }
    let (h, w, _) = map_dims(tape.shape(gamma_hires))?;
    let rects = boxes
        .iter()
        .map(|b| box_to_cells(&b.bbox, h, w, image_size))
        .collect();
    tape.max_pool_rect(gamma_hires, rects)
}

pub fn proposal_regions(
    gamma_hires: &Tensor,
    boxes: &[ProposalBox],
    k: usize,
    selection: Selection<'_>,
    image_size: f64,
) -> Result<RegionSet> {
    let chosen = select_proposals(boxes, k, selection)?;
    let mut tape = Tape::new();
    let g = tape.constant(gamma_hires.clone());
    let d = proposal_descriptors(&mut tape, g, &chosen, image_size)?;
    Ok(RegionSet {
        descriptors: tape.value(d).clone(),
        geometry: chosen
            .iter()
            .map(|b| b.bbox.clip(image_size, image_size).to_quad())
            .collect(),
    })
}

/// Stand-in proposal generator: each ground-truth box with its corners moved
/// by up to `jitter` pixels (score 1), then `n_distractors` random boxes with
/// scores in (0, 0.5).
pub fn oracle_proposals(
    scene: &SceneRecord,
    n_distractors: usize,
    jitter: f64,
    seed: u64,
) -> Vec<ProposalBox> {
    let size = scene.image.height as f64;
    let mut rng = indexed_substream(seed, "proposals", 0);
    let mut out = Vec::with_capacity(scene.gt_boxes.len() + n_distractors);
    let shift = |rng: &mut Rng| {
        if jitter > 0.0 {
            rng.gen_range(-jitter..=jitter)
        } else {
            0.0
        }
    };
    for gt in &scene.gt_boxes {
        let mut b = PixelBox::new(
            gt.r0 + shift(&mut rng),
            gt.c0 + shift(&mut rng),
            gt.r1 + shift(&mut rng),
            gt.c1 + shift(&mut rng),
        )
        .clip(size, size);
        if b.r1 - b.r0 < 1.0 {
            b.r1 = (b.r0 + 1.0).min(size);
            b.r0 = b.r1 - 1.0;
        }
        if b.c1 - b.c0 < 1.0 {
            b.c1 = (b.c0 + 1.0).min(size);
            b.c0 = b.c1 - 1.0;
        }
        out.push(ProposalBox {
            bbox: b,
            score: 1.0,
        });
    }
    for _ in 0..n_distractors {
        let bh = rng.gen_range(6.0..size / 2.0);
        let bw = rng.gen_range(6.0..size / 2.0);
        let r0 = rng.gen_range(0.0..size - bh);
        let c0 = rng.gen_range(0.0..size - bw);
        let score = loop {
            let s = rng.gen_range(0.0..0.5);
            if s > 0.0 {
                break s;
            }
        };
        out.push(ProposalBox {
            bbox: PixelBox::new(r0, c0, r0 + bh, c0 + bw),
            score,
        });
    }
    out
}

#[derive(Deserialize)]
struct ProposalLine {
    image_id: String,
    boxes: Vec<[f64; 5]>,
}

/// Reads `{"image_id", "boxes": [[r0, c0, r1, c1, score], ...]}` lines.
pub fn read_proposals<R: BufRead>(input: R) -> Result<ProposalMap> {
    let mut out = HashMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ProposalLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let mut boxes = Vec::with_capacity(parsed.boxes.len());
        for [r0, c0, r1, c1, score] in parsed.boxes {
            if !(r0 < r1 && c0 < c1) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("degenerate box [{r0}, {c0}, {r1}, {c1}]"),
                });
            }
            boxes.push(ProposalBox {
                bbox: PixelBox::new(r0, c0, r1, c1),
                score,
            });
        }
        out.insert(parsed.image_id, boxes);
    }
    Ok(out)
}

// ---------------------------------------------------------------- transformer

pub const STN: &str = "stn";

/// Local anchor lattice `{-1, 0, 1}^2` in (row, col), row-major. The order
/// matches the `[3, 3, c, c]` layout of the output filter.
pub fn anchor_lattice() -> Vec<(f64, f64)> {
    let mut v = Vec::with_capacity(9);
    for pr in [-1.0, 0.0, 1.0] {
        for pc in [-1.0, 0.0, 1.0] {
            v.push((pr, pc));
        }
    }
    v
}

/// Affine transform `[a00, a01, a02, a10, a11, a12]` for one location:
/// `(row, col) = center + A (p_row, p_col, 1)`.
pub type Affine = [f64; 6];

pub const IDENTITY: Affine = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
pub const DOUBLE_SCALE: Affine = [2.0, 0.0, 0.0, 0.0, 2.0, 0.0];

/// Per-location transforms of one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineField {
    pub height: usize,
    pub width: usize,
    /// Row-major over locations.
    pub transforms: Vec<Affine>,
}

/// Localization net (two 3x3 convs) with its final layer at the warm-start
/// transform, and the 3x3 output filter at the center-tap identity.
pub fn init_stn(params: &mut ParamStore, channels: usize, rng: &mut Rng) {
    let c = channels;
    params.insert_glorot("stn.loc1.w", &[3, 3, c, c], 9 * c, 9 * c, rng);
    params.insert_zeros("stn.loc1.b", &[c]);
    params.insert_zeros("stn.loc2.w", &[3, 3, c, 6]);
    params.insert("stn.loc2.b", Tensor::vector(DOUBLE_SCALE.to_vec()));
    params.insert("stn.out.w", center_tap_identity(c));
    params.insert_zeros("stn.out.b", &[c]);
}

/// `[3, 3, c, c]` filter whose center tap is the identity over channels.
pub fn center_tap_identity(c: usize) -> Tensor {
    let mut w = Tensor::zeros(&[3, 3, c, c]);
    for ch in 0..c {
        w.set(&[1, 1, ch, ch], 1.0);
    }
    w
}

/// `[H * W, 6]` transforms regressed from `gamma`.
pub fn stn_transforms(tape: &mut Tape, bound: &Bound, gamma: Var) -> Result<Var> {
    let (h, w, _) = map_dims(tape.shape(gamma))?;
    let w1 = bound.var("stn.loc1.w")?;
    let b1 = bound.var("stn.loc1.b")?;
    let w2 = bound.var("stn.loc2.w")?;
    let b2 = bound.var("stn.loc2.b")?;
    let c1 = tape.conv2d(gamma, w1, 1, 1)?;
    let c1 = tape.add_bias(c1, b1)?;
    let a1 = tape.relu(c1)?;
    let c2 = tape.conv2d(a1, w2, 1, 1)?;
    let c2 = tape.add_bias(c2, b2)?;
    tape.reshape(c2, &[h * w, 6])
}

/// Samples the transformed 3x3 anchor at each kept location of `gamma` and
/// reduces each patch with the output filter. Returns descriptors
/// `[n_r, c]` and the kept transforms `[n_r, 6]`.
pub fn stn_descriptors(
    tape: &mut Tape,
    bound: &Bound,
    gamma: Var,
    theta: Var,
    stride: usize,
) -> Result<(Var, Var)> {
    let (h, w, c) = map_dims(tape.shape(gamma))?;
    if h < 3 || w < 3 {
        return Err(invalid(format!(
            "spatial transformer needs a map of at least 3x3, got {h}x{w}"
        )));
    }
    let idx = grid_indices(h, w, stride)?;
    let kept = if stride == 1 {
        theta
    } else {
        tape.gather_rows(theta, idx.clone())?
    };
    let centers = idx
        .iter()
        .map(|&i| ((i / w) as f64, (i % w) as f64))
        .collect();
    let points = tape.affine_grid(kept, centers, anchor_lattice())?;
    let patches = tape.bilinear_sample(gamma, points)?;
    let n = idx.len();
    let flat = tape.reshape(patches, &[n, 9 * c])?;
    let wo = bound.var("stn.out.w")?;
    let wo = tape.reshape(wo, &[9 * c, c])?;
    let bo = bound.var("stn.out.b")?;
    let d = tape.matmul(flat, wo)?;
    Ok((tape.add_bias(d, bo)?, kept))
}

/// Image-space quads of transformed anchors: the lattice corners mapped by
/// each transform, back-projected to pixels.
pub fn stn_geometry(
    transforms: &Tensor,
    h: usize,
    w: usize,
    stride: usize,
    image_size: f64,
) -> Result<Vec<Quad>> {
    let idx = grid_indices(h, w, stride)?;
    let (ph, pw) = (image_size / h as f64, image_size / w as f64);
    let t = transforms.data();
    Ok(idx
        .iter()
        .enumerate()
        .map(|(n, &cell)| {
            let (ci, cj) = ((cell / w) as f64, (cell % w) as f64);
            let a = &t[n * 6..n * 6 + 6];
            let map = |pr: f64, pc: f64| {
                let r = ci + a[0] * pr + a[1] * pc + a[2];
                let c = cj + a[3] * pr + a[4] * pc + a[5];
                ((r + CELL_CENTER) * ph, (c + CELL_CENTER) * pw)
            };
            Quad([
                map(-1.0, -1.0),
                map(-1.0, 1.0),
                map(1.0, 1.0),
                map(1.0, -1.0),
            ])
        })
        .collect())
}

/// Regresses the affine field of `gamma`.
pub fn affine_field(gamma: &Tensor, params: &ParamStore) -> Result<AffineField> {
    let (h, w, _) = map_dims(gamma.shape())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let g = tape.constant(gamma.clone());
    let theta = stn_transforms(&mut tape, &bound, g)?;
    Ok(AffineField {
        height: h,
        width: w,
        transforms: tape
            .value(theta)
            .data()
            .chunks(6)
            .map(|c| c.try_into().expect("six entries"))
            .collect(),
    })
}

/// Transformer regions at every location of `gamma`.
pub fn stn_regions(gamma: &Tensor, params: &ParamStore, image_size: f64) -> Result<RegionSet> {
    stn_regions_strided(gamma, params, 1, image_size)
}

pub fn stn_regions_strided(
    gamma: &Tensor,
    params: &ParamStore,
    stride: usize,
    image_size: f64,
) -> Result<RegionSet> {
    let (h, w, _) = map_dims(gamma.shape())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let g = tape.constant(gamma.clone());
    let theta = stn_transforms(&mut tape, &bound, g)?;
    let (d, kept) = stn_descriptors(&mut tape, &bound, g, theta, stride)?;
    Ok(RegionSet {
        descriptors: tape.value(d).clone(),
        geometry: stn_geometry(tape.value(kept), h, w, stride, image_size)?,
    })
}

/// Transformer regions under a fixed affine field (bypassing the
/// localization net).
pub fn stn_regions_with_field(
    gamma: &Tensor,
    field: &AffineField,
    params: &ParamStore,
    image_size: f64,
) -> Result<RegionSet> {
    let (h, w, _) = map_dims(gamma.shape())?;
    if field.height != h || field.width != w {
        return Err(invalid("affine field does not match the feature map"));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let g = tape.constant(gamma.clone());
    let theta = tape.constant(Tensor::new(&[h * w, 6], field.transforms.concat())?);
    let (d, kept) = stn_descriptors(&mut tape, &bound, g, theta, 1)?;
    Ok(RegionSet {
        descriptors: tape.value(d).clone(),
        geometry: stn_geometry(tape.value(kept), h, w, 1, image_size)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_geometry_follows_receptive_fields() {
        let g = grid_geometry(8, 8, 1, 64.0).unwrap();
        assert_eq!(g.len(), 64);
        // receptive-field centers sit at 8i + 0.5
        assert_eq!(g[9].bounding_box(), PixelBox::new(4.5, 4.5, 12.5, 12.5));
        assert_eq!(g[0].bounding_box(), PixelBox::new(0.0, 0.0, 4.5, 4.5));
        assert_eq!(g[63].bounding_box(), PixelBox::new(52.5, 52.5, 60.5, 60.5));
        let s = grid_geometry(8, 8, 2, 64.0).unwrap();
        assert_eq!(s.len(), 16);
        assert_eq!(s[0].bounding_box(), PixelBox::new(0.0, 0.0, 8.5, 8.5));
    }

    #[test]
    fn box_cells_and_snapping() {
        // 16x16 map over 64 px: pitch 4
        let r = box_to_cells(&PixelBox::new(0.0, 0.0, 64.0, 64.0), 16, 16, 64.0);
        assert_eq!(
            r,
            CellRect {
                r0: 0,
                r1: 16,
                c0: 0,
                c1: 16
            }
        );
        let r = box_to_cells(&PixelBox::new(4.0, 8.0, 8.0, 12.0), 16, 16, 64.0);
        assert_eq!(
            r,
            CellRect {
                r0: 1,
                r1: 2,
                c0: 2,
                c1: 3
            }
        );
        // thin box between cell centers snaps to the cell holding its center
        let r = box_to_cells(&PixelBox::new(4.5, 4.5, 5.0, 5.0), 16, 16, 64.0);
        assert_eq!(
            r,
            CellRect {
                r0: 1,
                r1: 2,
                c0: 1,
                c1: 2
            }
        );
        // entirely off-image
        let r = box_to_cells(&PixelBox::new(-20.0, 70.0, -10.0, 90.0), 16, 16, 64.0);
        assert_eq!(
            r,
            CellRect {
                r0: 0,
                r1: 1,
                c0: 15,
                c1: 16
            }
        );
    }

    #[test]
    fn top_k_prefers_scores_then_order() {
        let b = |s| ProposalBox {
            bbox: PixelBox::new(0.0, 0.0, 1.0, 1.0),
            score: s,
        };
        let boxes = [b(0.1), b(0.9), b(0.5), b(0.9)];
        let top = select_proposals(&boxes, 3, Selection::TopK).unwrap();
        assert_eq!(
            top.iter().map(|p| p.score).collect::<Vec<_>>(),
            [0.9, 0.9, 0.5]
        );
        assert!(select_proposals(&[], 1, Selection::TopK).is_err());
    }

    #[test]
    fn proposal_file_parses_and_reports_lines() {
        let text = "{\"image_id\": \"a\", \"boxes\": [[0, 0, 10, 10, 0.5]]}\n\n{\"image_id\": \"b\", \"boxes\": [[5, 5, 5, 9, 1]]}\n";
        match read_proposals(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let ok = read_proposals(&text.as_bytes()[..text.find('\n').unwrap()]).unwrap();
        assert_eq!(ok["a"][0].score, 0.5);
    }
}
