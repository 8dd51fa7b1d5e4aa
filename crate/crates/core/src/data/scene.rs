//! Procedural shapes scenes with template captions.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::render::{render, RgbImage};
use crate::geometry::PixelBox;
use crate::rng::{indexed_substream, Rng};

/// Side length of the base render in pixels.
pub const IMAGE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Plain,
    Striped,
    Checkered,
    Dotted,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.90, 0.12, 0.10],
            Color::Green => [0.10, 0.78, 0.15],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.88, 0.10],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
    pub fn side(self) -> f64 {
        match self {
            Size::Small => 14.0,
            Size::Large => 22.0,
        }
    }
}

impl Background {
    pub const ALL: [Background; 4] = [
        Background::Plain,
        Background::Striped,
        Background::Checkered,
        Background::Dotted,
    ];
    pub fn word(self) -> &'static str {
        match self {
            Background::Plain => "plain",
            Background::Striped => "striped",
            Background::Checkered => "checkered",
            Background::Dotted => "dotted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Bounding box in base-resolution pixels.
    pub position: PixelBox,
}

/// Spatial relation between two objects, read as "A <relation> B".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    /// The dominant-axis relation of `a` with respect to `b`.
    pub fn between(a: &PixelBox, b: &PixelBox) -> Relation {
        let (ar, ac) = a.center();
        let (br, bc) = b.center();
        let (dr, dc) = (br - ar, bc - ac);
        if dc.abs() >= dr.abs() {
            if dc > 0.0 {
                Relation::LeftOf
            } else {
                Relation::RightOf
            }
        } else if dr > 0.0 {
            Relation::Above
        } else {
            Relation::Below
        }
    }

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }
}

/// Token position to object index, for noun tokens of one caption.
pub type Alignment = Vec<(usize, usize)>;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    /// Generator seed, when the scene came from [`generate_scene`].
    pub seed: Option<u64>,
    pub background: Option<Background>,
    pub objects: Vec<SceneObject>,
    pub image: RgbImage,
    pub captions: Vec<Vec<String>>,
    pub gt_boxes: Vec<PixelBox>,
    pub alignments: Vec<Alignment>,
}

impl SceneRecord {
    /// Render at twice the base resolution. Records without a scene
    /// description fall back to nearest-neighbour upsampling.
    pub fn hires_image(&self) -> RgbImage {
        match self.background {
            Some(bg) => render(bg, &self.objects, 2),
            None => self.image.upsample_nearest(2),
        }
    }
}

pub fn scene_seed(base_seed: u64, index: u64) -> u64 {
    crate::rng::derive_seed(base_seed, "scene", index)
}

fn sample_objects(rng: &mut Rng) -> Vec<SceneObject> {
    let n = rng.gen_range(1..=3);
    let margin = 2.0;
    'retry: loop {
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        for _ in 0..n {
            let size = *Size::ALL.choose(rng).unwrap();
            let side = size.side();
            let mut placed = None;
            for _ in 0..100 {
                let hi = IMAGE_SIZE as f64 - margin - side;
                let r0 = rng.gen_range(margin..=hi).round();
                let c0 = rng.gen_range(margin..=hi).round();
                let b = PixelBox::new(r0, c0, r0 + side, c0 + side);
                // keep a 1px gap so shapes never touch
                let grown = PixelBox::new(b.r0 - 1.0, b.c0 - 1.0, b.r1 + 1.0, b.c1 + 1.0);
                if objects
                    .iter()
                    .all(|o| o.position.intersection(&grown) == 0.0)
                {
                    placed = Some(b);
                    break;
                }
            }
            let Some(position) = placed else {
                continue 'retry;
            };
            objects.push(SceneObject {
                shape: *Shape::ALL.choose(rng).unwrap(),
                color: *Color::ALL.choose(rng).unwrap(),
                size,
                position,
            });
        }
        return objects;
    }
}

fn phrase(o: &SceneObject) -> [&'static str; 3] {
    [o.size.word(), o.color.word(), o.shape.word()]
}

/// Builds a caption from a template of literal words and object slots,
/// recording where each shape noun lands.
struct CaptionBuilder {
    tokens: Vec<String>,
    alignment: Alignment,
}

impl CaptionBuilder {
    fn new() -> Self {
        Self {
            tokens: Vec::new(),
            alignment: Vec::new(),
        }
    }
    fn words(mut self, ws: &[&str]) -> Self {
        self.tokens.extend(ws.iter().map(|w| w.to_string()));
        self
    }
    fn object(mut self, objects: &[SceneObject], idx: usize) -> Self {
        self.tokens.push("a".into());
        self.tokens
            .extend(phrase(&objects[idx]).iter().map(|w| w.to_string()));
        self.alignment.push((self.tokens.len() - 1, idx));
        self
    }
    fn relation(self, objects: &[SceneObject], a: usize, b: usize) -> Self {
        let rel = Relation::between(&objects[a].position, &objects[b].position);
        self.words(rel.words())
    }
    fn finish(self) -> (Vec<String>, Alignment) {
        (self.tokens, self.alignment)
    }
}

/// Three template captions. Objects are referenced in reading order
/// (left to right, ties top to bottom).
pub fn captions_for(
    background: Background,
    objects: &[SceneObject],
) -> Vec<(Vec<String>, Alignment)> {
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&x, &y| {
        let (xr, xc) = objects[x].position.center();
        let (yr, yc) = objects[y].position.center();
        xc.total_cmp(&yc).then(xr.total_cmp(&yr))
    });
    let b = || CaptionBuilder::new();
    match order.as_slice() {
        [a] => vec![
            b().object(objects, *a).finish(),
            b().words(&["there", "is"]).object(objects, *a).finish(),
            b().object(objects, *a)
                .words(&["on", "a", background.word(), "background"])
                .finish(),
        ],
        [a, c] => vec![
            b().object(objects, *a)
                .relation(objects, *a, *c)
                .object(objects, *c)
                .finish(),
            b().object(objects, *c)
                .relation(objects, *c, *a)
                .object(objects, *a)
                .finish(),
            b().object(objects, *a)
                .words(&["and"])
                .object(objects, *c)
                .finish(),
        ],
        [a, m, c] => vec![
            b().object(objects, *a)
                .relation(objects, *a, *m)
                .object(objects, *m)
                .words(&["and"])
                .object(objects, *c)
                .finish(),
            b().object(objects, *c)
                .relation(objects, *c, *m)
                .object(objects, *m)
                .words(&["and"])
                .object(objects, *a)
                .finish(),
            b().object(objects, *a)
                .words(&["and"])
                .object(objects, *m)
                .words(&["and"])
                .object(objects, *c)
                .finish(),
        ],
        _ => unreachable!("scenes hold one to three objects"),
    }
}

/// Deterministic scene from a seed.
pub fn generate_scene(seed: u64) -> SceneRecord {
    let mut rng = indexed_substream(seed, "scene-content", 0);
    let background = *Background::ALL.choose(&mut rng).unwrap();
    let objects = sample_objects(&mut rng);
    let image = render(background, &objects, 1);
    let (captions, alignments) = captions_for(background, &objects).into_iter().unzip();
    SceneRecord {
        id: format!("scene-{seed:016x}"),
        seed: Some(seed),
        background: Some(background),
        gt_boxes: objects.iter().map(|o| o.position).collect(),
        objects,
        image,
        captions,
        alignments,
    }
}

/// `n` scenes whose seeds derive from `base_seed`.
pub fn generate_dataset(n: usize, base_seed: u64) -> Vec<SceneRecord> {
    (0..n as u64)
        .map(|i| generate_scene(scene_seed(base_seed, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Independent geometric reading of a relation phrase.
    fn holds(rel: &[String], a: &PixelBox, b: &PixelBox) -> bool {
        let (ar, ac) = a.center();
        let (br, bc) = b.center();
        match rel[0].as_str() {
            "left" => ac < bc,
            "right" => ac > bc,
            "above" => ar < br,
            "below" => ar > br,
            other => panic!("not a relation: {other}"),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_scene(0), generate_scene(0));
        assert_ne!(generate_scene(0).image, generate_scene(1).image);
    }

    #[test]
    fn scenes_respect_overlap_and_bounds() {
        for s in generate_dataset(300, 3) {
            assert!((1..=3).contains(&s.objects.len()));
            for (i, a) in s.objects.iter().enumerate() {
                let p = a.position;
                assert!(p.r0 >= 0.0 && p.c0 >= 0.0 && p.r1 <= 64.0 && p.c1 <= 64.0);
                for b in &s.objects[i + 1..] {
                    assert!(p.iou(&b.position) <= 0.2);
                }
            }
        }
    }

    #[test]
    fn relations_are_geometrically_true() {
        for s in generate_dataset(500, 11) {
            for (cap, align) in s.captions.iter().zip(&s.alignments) {
                // every shape noun is aligned
                let nouns = cap
                    .iter()
                    .filter(|t| ["circle", "square", "triangle"].contains(&t.as_str()))
                    .count();
                assert_eq!(nouns, align.len());
                for w in align.windows(2) {
                    let (t0, o0) = w[0];
                    let (_, o1) = w[1];
                    let next = &cap[t0 + 1..];
                    if ["left", "right", "above", "below"].contains(&next[0].as_str()) {
                        assert!(
                            holds(next, &s.objects[o0].position, &s.objects[o1].position),
                            "{cap:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn left_of_never_described_as_right_of() {
        for s in generate_dataset(400, 5) {
            for (cap, align) in s.captions.iter().zip(&s.alignments) {
                if let [(t0, a), (_, b), ..] = align.as_slice() {
                    let a_left =
                        s.objects[*a].position.center().1 < s.objects[*b].position.center().1;
                    if a_left {
                        assert_ne!(cap[t0 + 1], "right");
                    }
                }
            }
        }
    }

    #[test]
    fn shape_color_pairs_are_balanced_over_1000_seeds() {
        let mut counts: HashMap<(Shape, Color), usize> = HashMap::new();
        for s in generate_dataset(1000, 0) {
            for o in &s.objects {
                *counts.entry((o.shape, o.color)).or_default() += 1;
            }
        }
        for shape in Shape::ALL {
            for color in Color::ALL {
                let n = counts.get(&(shape, color)).copied().unwrap_or(0);
                assert!(n >= 10, "{shape:?}/{color:?} only {n}");
            }
        }
    }

    #[test]
    fn three_references_per_scene() {
        let s = generate_scene(42);
        assert_eq!(s.captions.len(), 3);
        assert_eq!(s.alignments.len(), 3);
    }
}
