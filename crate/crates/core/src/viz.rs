//! Per-token attention overlays: the strongest regions outlined with a
//! stroke width that grows with their weight.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{RgbImage, SceneRecord};
use crate::decode::{beam_search, decode_greedy};
use crate::error::{invalid, Result};
use crate::geometry::Quad;
use crate::model::Model;
use crate::regions::ProposalMap;

/// Regions drawn per token.
pub const TOP_REGIONS: usize = 5;
/// Output pixels per image pixel.
pub const SCALE: usize = 4;
/// Height of the SVG caption band.
const LABEL_BAND: usize = 24;
const STROKE_RGB: [u8; 3] = [255, 214, 0];

/// Stroke width in output pixels for attention weight `p`.
pub fn stroke_width(p: f64) -> f64 {
    1.0 + 6.0 * p
}

/// One outlined region.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawnBox {
    pub region: usize,
    pub weight: f64,
    pub stroke: f64,
}

/// The `k` heaviest regions with non-zero weight, heaviest first, ties by
/// index.
pub fn top_regions(weights: &[f64], k: usize) -> Vec<DrawnBox> {
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| DrawnBox {
            region: i,
            weight: weights[i],
            stroke: stroke_width(weights[i]),
        })
        .collect()
}

/// Overlay of one emitted token.
#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub token: String,
    pub boxes: Vec<DrawnBox>,
    pub ppm: RgbImage,
    pub svg: String,
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dr, dc) = (b.0 - a.0, b.1 - a.1);
    let len2 = dr * dr + dc * dc;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dr + (p.1 - a.1) * dc) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (r, c) = (a.0 + t * dr - p.0, a.1 + t * dc - p.1);
    (r * r + c * c).sqrt()
}

fn scaled(q: &Quad) -> [(f64, f64); 4] {
    q.0.map(|(r, c)| (r * SCALE as f64, c * SCALE as f64))
}

fn stroke_quad(img: &mut RgbImage, quad: &Quad, width: f64) {
    let pts = scaled(quad);
    let half = width / 2.0;
    let (mut r0, mut r1, mut c0, mut c1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(r, c) in &pts {
        r0 = r0.min(r - half);
        r1 = r1.max(r + half);
        c0 = c0.min(c - half);
        c1 = c1.max(c + half);
    }
    let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
    for r in clamp(r0.floor(), img.height)..clamp(r1.ceil(), img.height) {
        for c in clamp(c0.floor(), img.width)..clamp(c1.ceil(), img.width) {
            let p = (r as f64 + 0.5, c as f64 + 0.5);
            let d = (0..4)
                .map(|k| segment_distance(p, pts[k], pts[(k + 1) % 4]))
                .fold(f64::MAX, f64::min);
            if d <= half {
                img.put(r, c, STROKE_RGB);
            }
        }
    }
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn svg_overlay(image: &RgbImage, geometry: &[Quad], boxes: &[DrawnBox], token: &str) -> String {
    let (w, h) = (image.width * SCALE, image.height * SCALE);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" viewBox="0 0 {w} {}">"#,
        h + LABEL_BAND,
        h + LABEL_BAND
    );
    let _ = writeln!(s, r#"<g shape-rendering="crispEdges">"#);
    for r in 0..image.height {
        let mut c = 0;
        while c < image.width {
            let px = image.pixel(r, c);
            let mut end = c + 1;
            while end < image.width && image.pixel(r, end) == px {
                end += 1;
            }
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{}" height="{SCALE}" fill="#{:02x}{:02x}{:02x}"/>"##,
                c * SCALE,
                r * SCALE,
                (end - c) * SCALE,
                px[0],
                px[1],
                px[2]
            );
            c = end;
        }
    }
    let _ = writeln!(s, "</g>");
    for b in boxes {
        let pts: Vec<String> = scaled(&geometry[b.region])
            .iter()
            .map(|(r, c)| format!("{c},{r}"))
            .collect();
        let _ = writeln!(
            s,
            r##"<polygon points="{}" fill="none" stroke="#{:02x}{:02x}{:02x}" stroke-width="{}" data-region="{}" data-weight="{}"/>"##,
            pts.join(" "),
            STROKE_RGB[0],
            STROKE_RGB[1],
            STROKE_RGB[2],
            b.stroke,
            b.region,
            b.weight
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="4" y="{}" font-family="monospace" font-size="16">{}</text>"#,
        h + LABEL_BAND - 6,
        escape_xml(token)
    );
    s.push_str("</svg>\n");
    s
}

/// One overlay per token. `attention[t]` weighs the regions of `geometry`.
pub fn render_overlays(
    image: &RgbImage,
    geometry: &[Quad],
    tokens: &[String],
    attention: &[Vec<f64>],
) -> Result<Vec<Overlay>> {
    if tokens.len() != attention.len() {
        return Err(invalid(format!(
            "{} tokens but {} attention steps",
            tokens.len(),
            attention.len()
        )));
    }
    tokens
        .iter()
        .zip(attention)
        .map(|(token, weights)| {
            if weights.len() != geometry.len() {
                return Err(invalid(format!(
                    "{} attention weights for {} regions",
                    weights.len(),
                    geometry.len()
                )));
            }
            let boxes = top_regions(weights, TOP_REGIONS);
            let mut ppm = image.upsample_nearest(SCALE);
            // Lightest first so the heaviest outline ends on top.
            for b in boxes.iter().rev() {
                stroke_quad(&mut ppm, &geometry[b.region], b.stroke);
            }
            let svg = svg_overlay(image, geometry, &boxes, token);
            Ok(Overlay {
                token: token.clone(),
                boxes,
                ppm,
                svg,
            })
        })
        .collect()
}

/// Decodes scene `id` (greedy when `beam <= 1`) and renders one overlay per
/// emitted token, STOP included.
pub fn visualize(
    model: &Model,
    records: &[SceneRecord],
    proposals: Option<&ProposalMap>,
    id: &str,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Overlay>> {
    let rec = records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| invalid(format!("no scene with id `{id}`")))?;
    if !model.config.uses_regions() {
        return Err(invalid(format!(
            "ablation {} does not attend to regions",
            model.config.ablation
        )));
    }
    let input = model.prepare_from(rec, proposals);
    let session = model.session(&input)?;
    let hyp = if beam <= 1 {
        decode_greedy(&session, max_len)?
    } else {
        beam_search(&session, beam, max_len)?
            .into_iter()
            .next()
            .ok_or_else(|| invalid("beam search returned no hypothesis"))?
    };
    let tokens: Vec<String> = hyp
        .tokens
        .iter()
        .map(|&t| model.vocab.token(t).to_string())
        .collect();
    render_overlays(&rec.image, &session.geometry, &tokens, &hyp.attention)
}

/// Writes `{stem}_{t}.ppm` and `{stem}_{t}.svg` per overlay into `dir` and
/// returns the paths in token order.
pub fn write_overlays(dir: &Path, stem: &str, overlays: &[Overlay]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(2 * overlays.len());
    for (t, o) in overlays.iter().enumerate() {
        let ppm = dir.join(format!("{stem}_{t:02}.ppm"));
        let mut bytes = Vec::new();
        o.ppm.write_ppm(&mut bytes)?;
        fs::write(&ppm, bytes)?;
        let svg = dir.join(format!("{stem}_{t:02}.svg"));
        fs::write(&svg, &o.svg)?;
        paths.push(ppm);
        paths.push(svg);
    }
    Ok(paths)
}
