//! JSON-lines dataset files, one scene per line:
//! `{"id", "image", "captions", "gt_boxes", "alignments"}` where `image` is
//! either base64 raw RGB8 pixels or `{"seed": n}` for a generator scene.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::render::RgbImage;
use super::scene::{generate_scene, Background, SceneObject, SceneRecord, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::geometry::PixelBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageMode {
    /// Store the generator seed; pixels are re-rendered on read.
    Seed,
    /// Store base64 pixels.
    Pixels,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ImageField {
    Seed { seed: u64 },
    Pixels(String),
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    image: ImageField,
    captions: Vec<String>,
    gt_boxes: Vec<[f64; 4]>,
    alignments: Vec<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    background: Option<Background>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    objects: Vec<SceneObject>,
}

fn to_line(rec: &SceneRecord, mode: ImageMode) -> RecordLine {
    let image = match (mode, rec.seed) {
        (ImageMode::Seed, Some(seed)) => ImageField::Seed { seed },
        _ => ImageField::Pixels(B64.encode(&rec.image.data)),
    };
    RecordLine {
        id: rec.id.clone(),
        image,
        captions: rec.captions.iter().map(|c| c.join(" ")).collect(),
        gt_boxes: rec
            .gt_boxes
            .iter()
            .map(|b| [b.r0, b.c0, b.r1, b.c1])
            .collect(),
        alignments: rec
            .alignments
            .iter()
            .map(|a| a.iter().map(|&(t, o)| [t, o]).collect())
            .collect(),
        background: rec.background,
        objects: rec.objects.clone(),
    }
}

fn from_line(line: RecordLine) -> std::result::Result<SceneRecord, String> {
    let (image, seed, background, objects) = match line.image {
        ImageField::Seed { seed } => {
            let scene = generate_scene(seed);
            let objects = if line.objects.is_empty() {
                scene.objects
            } else {
                line.objects
            };
            (
                scene.image,
                Some(seed),
                line.background.or(scene.background),
                objects,
            )
        }
        ImageField::Pixels(b64) => {
            let bytes = B64.decode(b64).map_err(|e| format!("image: {e}"))?;
            let img = RgbImage::new(IMAGE_SIZE, IMAGE_SIZE, bytes)
                .ok_or_else(|| format!("image: expected {IMAGE_SIZE}x{IMAGE_SIZE} RGB8"))?;
            (img, None, line.background, line.objects)
        }
    };
    let captions: Vec<Vec<String>> = line
        .captions
        .iter()
        .map(|c| c.split_whitespace().map(str::to_string).collect())
        .collect();
    if captions.is_empty() || captions.len() > 5 {
        return Err(format!("expected 1-5 captions, got {}", captions.len()));
    }
    let alignments: Vec<Vec<(usize, usize)>> = line
        .alignments
        .into_iter()
        .map(|a| a.into_iter().map(|[t, o]| (t, o)).collect())
        .collect();
    if alignments.len() != captions.len() {
        return Err("alignments must have one entry per caption".into());
    }
    let gt_boxes: Vec<PixelBox> = line
        .gt_boxes
        .iter()
        .map(|b| PixelBox::new(b[0], b[1], b[2], b[3]))
        .collect();
    for (cap, al) in captions.iter().zip(&alignments) {
        for &(t, o) in al {
            if t >= cap.len() || o >= gt_boxes.len() {
                return Err(format!("alignment ({t}, {o}) out of range"));
            }
        }
    }
    Ok(SceneRecord {
        id: line.id,
        seed,
        background,
        objects,
        image,
        captions,
        gt_boxes,
        alignments,
    })
}

pub fn write_records<W: Write>(out: W, records: &[SceneRecord], mode: ImageMode) -> Result<()> {
    let mut out = BufWriter::new(out);
    for rec in records {
        serde_json::to_writer(&mut out, &to_line(rec, mode))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads records; a malformed line yields [`Error::Parse`] with its 1-based
/// line number. Blank lines are skipped.
pub fn read_records<R: BufRead>(input: R) -> Result<Vec<SceneRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(from_line(parsed).map_err(|message| Error::Parse {
            line: i + 1,
            message,
        })?);
    }
    Ok(records)
}

pub fn save_dataset(path: &Path, records: &[SceneRecord], mode: ImageMode) -> Result<()> {
    write_records(File::create(path)?, records, mode)
}

pub fn load_dataset(path: &Path) -> Result<Vec<SceneRecord>> {
    read_records(BufReader::new(File::open(path)?))
}
