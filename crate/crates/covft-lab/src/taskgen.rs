//! Synthetic multimodal tasks over 4x4 grid scenes.
//!
//! A scene holds 2..=6 colored shapes on distinct grid cells and renders to a
//! 16x16 RGB image (each cell is a 4x4 pixel block with a per-shape mask).
//! Fifteen task kinds ask about the scene — grounding, attributes, counting,
//! existence, captions, spatial relations — with instructions and answers in
//! a closed 64-token vocabulary, so evaluation is exact match.
//!
//! Generation is deterministic: sample `i` of a dataset depends only on
//! `(seed, i)`, which makes fraction subsampling prefix-nested — the 25%
//! dataset is literally the first quarter of the 100% one.

use crate::error::{Error, Result};
use crate::seed::indexed_stream;
use crate::tensor::Tensor;
use rand::seq::{index::sample as index_sample, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const GRID: usize = 4;
pub const CELL_PX: usize = 4;
pub const IMAGE_PX: usize = GRID * CELL_PX;
pub const VOCAB_SIZE: usize = 64;

// Token layout. Order is part of the on-disk format; append, never reorder.
pub const TOK_CLS: usize = 0;
pub const TOK_BOS: usize = 1;
pub const TOK_EOS: usize = 2;
pub const TOK_SEP: usize = 3;
pub const TOK_CELL0: usize = 4; // 16 cells: a1..d4, row-major
pub const TOK_COLOR0: usize = 20; // red green blue yellow
pub const TOK_SHAPE0: usize = 24; // square circle triangle
pub const TOK_COUNT0: usize = 27; // zero..six
pub const TOK_YES: usize = 34;
pub const TOK_NO: usize = 35;

#[rustfmt::skip]
pub const VOCAB: [&str; VOCAB_SIZE] = [
    "[cls]", "[bos]", "[eos]", "[sep]",
    "a1", "a2", "a3", "a4", "b1", "b2", "b3", "b4",
    "c1", "c2", "c3", "c4", "d1", "d2", "d3", "d4",
    "red", "green", "blue", "yellow",
    "square", "circle", "triangle",
    "zero", "one", "two", "three", "four", "five", "six",
    "yes", "no",
    "where", "is", "the", "what", "color", "shape", "at",
    "how", "many", "objects", "there", "any", "describe", "scene",
    "left", "of", "above", "same", "empty", "below", "right",
    "list", "count", "grid", "row", "column", "and", "it",
];

// Keyword ids used by the instruction templates.
const W_WHERE: usize = 36;
const W_IS: usize = 37;
const W_THE: usize = 38;
const W_WHAT: usize = 39;
const W_COLOR: usize = 40;
const W_SHAPE: usize = 41;
const W_AT: usize = 42;
const W_HOW: usize = 43;
const W_MANY: usize = 44;
const W_OBJECTS: usize = 45;
const W_THERE: usize = 46;
const W_ANY: usize = 47;
const W_DESCRIBE: usize = 48;
const W_SCENE: usize = 49;
const W_LEFT: usize = 50;
const W_OF: usize = 51;
const W_ABOVE: usize = 52;
const W_SAME: usize = 53;
const W_EMPTY: usize = 54;

pub fn token_name(id: usize) -> &'static str {
    VOCAB.get(id).copied().unwrap_or("<?>")
}

pub fn tokens_to_string(ids: &[usize]) -> String {
    ids.iter().map(|&i| token_name(i)).collect::<Vec<_>>().join(" ")
}

pub fn cell_token(row: usize, col: usize) -> usize {
    debug_assert!(row < GRID && col < GRID);
    TOK_CELL0 + row * GRID + col
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

impl Color {
    pub fn token(self) -> usize {
        TOK_COLOR0 + self as usize
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.15, 0.15],
            Color::Green => [0.15, 1.0, 0.15],
            Color::Blue => [0.15, 0.15, 1.0],
            Color::Yellow => [1.0, 1.0, 0.15],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

impl Shape {
    pub fn token(self) -> usize {
        TOK_SHAPE0 + self as usize
    }

    /// 4x4 pixel mask for one cell.
    fn filled(self, pr: usize, pc: usize) -> bool {
        match self {
            Shape::Square => true,
            // knock the corners off
            Shape::Circle => !matches!((pr, pc), (0, 0) | (0, 3) | (3, 0) | (3, 3)),
            // lower-left triangle
            Shape::Triangle => pr >= pc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Obj {
    pub row: usize,
    pub col: usize,
    pub color: Color,
    pub shape: Shape,
}

impl Obj {
    pub fn cell_token(&self) -> usize {
        cell_token(self.row, self.col)
    }
}

/// A grid scene: 2..=6 objects on distinct cells, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Obj>,
}

impl Scene {
    pub fn random(rng: &mut impl Rng) -> Scene {
        let count = rng.random_range(2..=6);
        let mut cells = index_sample(rng, GRID * GRID, count).into_vec();
        cells.sort_unstable();
        let objects = cells
            .into_iter()
            .map(|c| Obj {
                row: c / GRID,
                col: c % GRID,
                color: *COLORS.choose(rng).expect("non-empty"),
                shape: *SHAPES.choose(rng).expect("non-empty"),
            })
            .collect();
        Scene { objects }
    }

    pub fn at(&self, row: usize, col: usize) -> Option<&Obj> {
        self.objects.iter().find(|o| o.row == row && o.col == col)
    }

    pub fn count_color(&self, c: Color) -> usize {
        self.objects.iter().filter(|o| o.color == c).count()
    }

    pub fn count_shape(&self, s: Shape) -> usize {
        self.objects.iter().filter(|o| o.shape == s).count()
    }

    pub fn count_pair(&self, c: Color, s: Shape) -> usize {
        self.objects.iter().filter(|o| o.color == c && o.shape == s).count()
    }

    /// The scene caption: every object's appearance in raster order. Position
    /// is carried only by the ordering — captions name no cells, so caption
    /// training exercises no location readout while grounding is nothing but
    /// one. Shared by the captioning task and the alignment-stage pairs.
    pub fn caption(&self) -> Vec<usize> {
        self.objects.iter().flat_map(|o| [o.color.token(), o.shape.token()]).collect()
    }

    /// (color, shape) combinations that occur exactly once.
    pub fn unique_pairs(&self) -> Vec<&Obj> {
        self.objects
            .iter()
            .filter(|o| self.count_pair(o.color, o.shape) == 1)
            .collect()
    }

    pub fn unique_shapes(&self) -> Vec<&Obj> {
        self.objects.iter().filter(|o| self.count_shape(o.shape) == 1).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.len() < 2 || self.objects.len() > 6 {
            return Err(Error::Input(format!("{} objects in scene", self.objects.len())));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.row >= GRID || o.col >= GRID {
                return Err(Error::Input(format!("object off grid at ({}, {})", o.row, o.col)));
            }
            for p in &self.objects[..i] {
                if p.row == o.row && p.col == o.col {
                    return Err(Error::Input(format!("two objects on cell ({}, {})", o.row, o.col)));
                }
            }
        }
        Ok(())
    }

    /// Render to `[IMAGE_PX, IMAGE_PX, 3]`, values in [0, 1], black background.
    pub fn render(&self) -> Tensor {
        let mut data = vec![0.0; IMAGE_PX * IMAGE_PX * 3];
        for o in &self.objects {
            let rgb = o.color.rgb();
            for pr in 0..CELL_PX {
                for pc in 0..CELL_PX {
                    if o.shape.filled(pr, pc) {
                        let y = o.row * CELL_PX + pr;
                        let x = o.col * CELL_PX + pc;
                        let base = (y * IMAGE_PX + x) * 3;
                        data[base..base + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
        Tensor::new(vec![IMAGE_PX, IMAGE_PX, 3], data).expect("fixed size")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LocateColorShape,
    LocateShape,
    ColorAt,
    ShapeAt,
    CountAll,
    CountColor,
    CountShape,
    ExistColor,
    ExistColorShape,
    CaptionAll,
    CaptionCell,
    LeftRight,
    AboveBelow,
    SameColor,
    EmptyCell,
}

pub const ALL_KINDS: [TaskKind; 15] = [
    TaskKind::LocateColorShape,
    TaskKind::LocateShape,
    TaskKind::ColorAt,
    TaskKind::ShapeAt,
    TaskKind::CountAll,
    TaskKind::CountColor,
    TaskKind::CountShape,
    TaskKind::ExistColor,
    TaskKind::ExistColorShape,
    TaskKind::CaptionAll,
    TaskKind::CaptionCell,
    TaskKind::LeftRight,
    TaskKind::AboveBelow,
    TaskKind::SameColor,
    TaskKind::EmptyCell,
];

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LocateColorShape => "locate_color_shape",
            TaskKind::LocateShape => "locate_shape",
            TaskKind::ColorAt => "color_at",
            TaskKind::ShapeAt => "shape_at",
            TaskKind::CountAll => "count_all",
            TaskKind::CountColor => "count_color",
            TaskKind::CountShape => "count_shape",
            TaskKind::ExistColor => "exist_color",
            TaskKind::ExistColorShape => "exist_color_shape",
            TaskKind::CaptionAll => "caption_all",
            TaskKind::CaptionCell => "caption_cell",
            TaskKind::LeftRight => "left_right",
            TaskKind::AboveBelow => "above_below",
            TaskKind::SameColor => "same_color",
            TaskKind::EmptyCell => "empty_cell",
        }
    }

    pub fn from_name(name: &str) -> Result<TaskKind> {
        ALL_KINDS
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Input(format!("unknown task kind {name:?}")))
    }

    /// Size of the single-token answer space, when the kind has one.
    /// Caption kinds answer with sequences and return `None`.
    pub fn answer_space(self) -> Option<usize> {
        match self {
            TaskKind::LocateColorShape | TaskKind::LocateShape => Some(GRID * GRID),
            TaskKind::ColorAt => Some(COLORS.len()),
            TaskKind::ShapeAt => Some(SHAPES.len()),
            TaskKind::CountAll | TaskKind::CountColor | TaskKind::CountShape => Some(7),
            TaskKind::ExistColor
            | TaskKind::ExistColorShape
            | TaskKind::LeftRight
            | TaskKind::AboveBelow
            | TaskKind::SameColor
            | TaskKind::EmptyCell => Some(2),
            TaskKind::CaptionAll | TaskKind::CaptionCell => None,
        }
    }

    /// Coarse answer-type label, used by the context-cluster analysis.
    pub fn answer_family(self) -> &'static str {
        match self {
            TaskKind::LocateColorShape | TaskKind::LocateShape => "cell",
            TaskKind::ColorAt => "color",
            TaskKind::ShapeAt => "shape",
            TaskKind::CountAll | TaskKind::CountColor | TaskKind::CountShape => "count",
            TaskKind::ExistColor
            | TaskKind::ExistColorShape
            | TaskKind::LeftRight
            | TaskKind::AboveBelow
            | TaskKind::SameColor
            | TaskKind::EmptyCell => "yes_no",
            TaskKind::CaptionAll | TaskKind::CaptionCell => "caption",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub scene: Scene,
    pub kind: TaskKind,
    pub instruction: Vec<usize>,
    pub answer: Vec<usize>,
}

fn yes_no(b: bool) -> Vec<usize> {
    vec![if b { TOK_YES } else { TOK_NO }]
}

fn count_token(n: usize) -> usize {
    debug_assert!(n <= 6);
    TOK_COUNT0 + n
}

/// Build one sample of the given kind. Kinds with structural preconditions
/// (e.g. a uniquely identifiable object) resample the scene a bounded number
/// of times and report degenerate data if they never succeed.
pub fn make_sample(kind: TaskKind, rng: &mut impl Rng) -> Result<Sample> {
    for _ in 0..100 {
        let scene = Scene::random(rng);
        if let Some((instruction, answer)) = try_task(&scene, kind, rng) {
            return Ok(Sample { scene, kind, instruction, answer });
        }
    }
    Err(Error::Degenerate(format!(
        "no scene admitted task {} in 100 attempts",
        kind.name()
    )))
}

/// Build a sample of the given kind over a fixed scene — for paired datasets
/// that ask different questions about identical images. Errors if the scene
/// does not admit the task.
pub fn sample_for_scene(scene: &Scene, kind: TaskKind, rng: &mut impl Rng) -> Result<Sample> {
    let (instruction, answer) = try_task(scene, kind, rng)
        .ok_or_else(|| Error::Degenerate(format!("scene does not admit {}", kind.name())))?;
    Ok(Sample { scene: scene.clone(), kind, instruction, answer })
}

fn try_task(scene: &Scene, kind: TaskKind, rng: &mut impl Rng) -> Option<(Vec<usize>, Vec<usize>)> {
    match kind {
        TaskKind::LocateColorShape => {
            let pairs = scene.unique_pairs();
            let o = **pairs.as_slice().choose(rng)?;
            Some((
                vec![W_WHERE, W_IS, W_THE, o.color.token(), o.shape.token()],
                vec![o.cell_token()],
            ))
        }
        TaskKind::LocateShape => {
            let uniq = scene.unique_shapes();
            let o = **uniq.as_slice().choose(rng)?;
            Some((vec![W_WHERE, W_IS, W_THE, o.shape.token()], vec![o.cell_token()]))
        }
        TaskKind::ColorAt => {
            let o = scene.objects.as_slice().choose(rng)?;
            Some((vec![W_WHAT, W_COLOR, W_AT, o.cell_token()], vec![o.color.token()]))
        }
        TaskKind::ShapeAt => {
            let o = scene.objects.as_slice().choose(rng)?;
            Some((vec![W_WHAT, W_SHAPE, W_AT, o.cell_token()], vec![o.shape.token()]))
        }
        TaskKind::CountAll => Some((
            vec![W_HOW, W_MANY, W_OBJECTS],
            vec![count_token(scene.objects.len())],
        )),
        TaskKind::CountColor => {
            let c = *COLORS.choose(rng).expect("non-empty");
            Some((
                vec![W_HOW, W_MANY, c.token(), W_OBJECTS],
                vec![count_token(scene.count_color(c))],
            ))
        }
        TaskKind::CountShape => {
            let s = *SHAPES.choose(rng).expect("non-empty");
            Some((
                vec![W_HOW, W_MANY, s.token(), W_OBJECTS],
                vec![count_token(scene.count_shape(s))],
            ))
        }
        TaskKind::ExistColor => {
            let c = *COLORS.choose(rng).expect("non-empty");
            Some((
                vec![W_IS, W_THERE, W_ANY, c.token()],
                yes_no(scene.count_color(c) > 0),
            ))
        }
        TaskKind::ExistColorShape => {
            let c = *COLORS.choose(rng).expect("non-empty");
            let s = *SHAPES.choose(rng).expect("non-empty");
            Some((
                vec![W_IS, W_THERE, W_ANY, c.token(), s.token()],
                yes_no(scene.count_pair(c, s) > 0),
            ))
        }
        TaskKind::CaptionAll => Some((vec![W_DESCRIBE, W_THE, W_SCENE], scene.caption())),
        TaskKind::CaptionCell => {
            let row = rng.random_range(0..GRID);
            let col = rng.random_range(0..GRID);
            let answer = match scene.at(row, col) {
                Some(o) => vec![o.color.token(), o.shape.token()],
                None => vec![W_EMPTY],
            };
            Some((vec![W_DESCRIBE, cell_token(row, col)], answer))
        }
        TaskKind::LeftRight => {
            let pairs = scene.unique_pairs();
            if pairs.len() < 2 {
                return None;
            }
            let picked = index_sample(rng, pairs.len(), 2).into_vec();
            let (a, b) = (pairs[picked[0]], pairs[picked[1]]);
            Some((
                vec![
                    W_IS, W_THE, a.color.token(), a.shape.token(),
                    W_LEFT, W_OF, W_THE, b.color.token(), b.shape.token(),
                ],
                yes_no(a.col < b.col),
            ))
        }
        TaskKind::AboveBelow => {
            let pairs = scene.unique_pairs();
            if pairs.len() < 2 {
                return None;
            }
            let picked = index_sample(rng, pairs.len(), 2).into_vec();
            let (a, b) = (pairs[picked[0]], pairs[picked[1]]);
            Some((
                vec![
                    W_IS, W_THE, a.color.token(), a.shape.token(),
                    W_ABOVE, W_THE, b.color.token(), b.shape.token(),
                ],
                yes_no(a.row < b.row),
            ))
        }
        TaskKind::SameColor => {
            let picked = index_sample(rng, scene.objects.len(), 2).into_vec();
            let (a, b) = (&scene.objects[picked[0]], &scene.objects[picked[1]]);
            Some((
                vec![W_SAME, W_COLOR, a.cell_token(), b.cell_token()],
                yes_no(a.color == b.color),
            ))
        }
        TaskKind::EmptyCell => {
            let row = rng.random_range(0..GRID);
            let col = rng.random_range(0..GRID);
            Some((
                vec![W_IS, cell_token(row, col), W_EMPTY],
                yes_no(scene.at(row, col).is_none()),
            ))
        }
    }
}

/// Deterministic dataset: sample `i` is a function of `(seed, i)` alone, with
/// kinds assigned round-robin so any prefix stays balanced. `fraction` keeps
/// the first `ceil(fraction * n_full)` samples.
pub fn build_dataset(
    n_full: usize,
    seed: u64,
    fraction: f64,
    kinds: &[TaskKind],
) -> Result<Vec<Sample>> {
    if kinds.is_empty() {
        return Err(Error::Config("no task kinds selected".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = ((n_full as f64) * fraction).ceil() as usize;
    (0..n)
        .map(|i| {
            let mut rng = indexed_stream(seed, "sample", i as u64);
            make_sample(kinds[i % kinds.len()], &mut rng)
        })
        .collect()
}

/// Caption-style pairs for the projector alignment stage.
pub fn pretrain_pairs(n: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let mut rng = indexed_stream(seed, "pretrain", i as u64);
            make_sample(TaskKind::CaptionAll, &mut rng)
        })
        .collect()
}

// ---- persistence (JSONL; pixels are re-rendered on load) -------------------

pub fn save_jsonl(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", ln + 1)))?;
        s.scene.validate()?;
        samples.push(s);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;
    use proptest::prelude::*;
    use std::collections::HashSet;

    /// Straight-line re-derivation of the expected answer from the scene and
    /// instruction, written independently of `try_task` as a cross-check.
    fn check_answer(s: &Sample) -> bool {
        let sc = &s.scene;
        let ins = &s.instruction;
        let color_of = |t: usize| COLORS[t - TOK_COLOR0];
        let shape_of = |t: usize| SHAPES[t - TOK_SHAPE0];
        let cell_of = |t: usize| ((t - TOK_CELL0) / GRID, (t - TOK_CELL0) % GRID);
        match s.kind {
            TaskKind::LocateColorShape => {
                let (c, sh) = (color_of(ins[3]), shape_of(ins[4]));
                let hits: Vec<_> = sc
                    .objects
                    .iter()
                    .filter(|o| o.color == c && o.shape == sh)
                    .collect();
                hits.len() == 1 && s.answer == vec![hits[0].cell_token()]
            }
            TaskKind::LocateShape => {
                let sh = shape_of(ins[3]);
                let hits: Vec<_> = sc.objects.iter().filter(|o| o.shape == sh).collect();
                hits.len() == 1 && s.answer == vec![hits[0].cell_token()]
            }
            TaskKind::ColorAt => {
                let (r, c) = cell_of(ins[3]);
                sc.at(r, c).is_some_and(|o| s.answer == vec![o.color.token()])
            }
            TaskKind::ShapeAt => {
                let (r, c) = cell_of(ins[3]);
                sc.at(r, c).is_some_and(|o| s.answer == vec![o.shape.token()])
            }
            TaskKind::CountAll => s.answer == vec![TOK_COUNT0 + sc.objects.len()],
            TaskKind::CountColor => {
                s.answer == vec![TOK_COUNT0 + sc.count_color(color_of(ins[2]))]
            }
            TaskKind::CountShape => {
                s.answer == vec![TOK_COUNT0 + sc.count_shape(shape_of(ins[2]))]
            }
            TaskKind::ExistColor => {
                let want = sc.count_color(color_of(ins[3])) > 0;
                s.answer == vec![if want { TOK_YES } else { TOK_NO }]
            }
            TaskKind::ExistColorShape => {
                let want = sc.count_pair(color_of(ins[3]), shape_of(ins[4])) > 0;
                s.answer == vec![if want { TOK_YES } else { TOK_NO }]
            }
            TaskKind::CaptionAll => s.answer == sc.caption(),
            TaskKind::CaptionCell => {
                let (r, c) = cell_of(ins[1]);
                match sc.at(r, c) {
                    Some(o) => s.answer == vec![o.color.token(), o.shape.token()],
                    None => s.answer == vec![W_EMPTY],
                }
            }
            TaskKind::LeftRight => {
                let (c1, s1) = (color_of(ins[2]), shape_of(ins[3]));
                let (c2, s2) = (color_of(ins[7]), shape_of(ins[8]));
                let a = sc.objects.iter().find(|o| o.color == c1 && o.shape == s1).unwrap();
                let b = sc.objects.iter().find(|o| o.color == c2 && o.shape == s2).unwrap();
                let want = a.col < b.col;
                s.answer == vec![if want { TOK_YES } else { TOK_NO }]
            }
            TaskKind::AboveBelow => {
                let (c1, s1) = (color_of(ins[2]), shape_of(ins[3]));
                let (c2, s2) = (color_of(ins[6]), shape_of(ins[7]));
                let a = sc.objects.iter().find(|o| o.color == c1 && o.shape == s1).unwrap();
                let b = sc.objects.iter().find(|o| o.color == c2 && o.shape == s2).unwrap();
                let want = a.row < b.row;
                s.answer == vec![if want { TOK_YES } else { TOK_NO }]
            }
            TaskKind::SameColor => {
                let (r1, k1) = cell_of(ins[2]);
                let (r2, k2) = cell_of(ins[3]);
                let want = sc.at(r1, k1).unwrap().color == sc.at(r2, k2).unwrap().color;
                s.answer == vec![if want { TOK_YES } else { TOK_NO }]
            }
            TaskKind::EmptyCell => {
                let (r, c) = cell_of(ins[1]);
                let want = sc.at(r, c).is_none();
                s.answer == vec![if want { TOK_YES } else { TOK_NO }]
            }
        }
    }

    #[test]
    fn vocab_has_no_duplicates() {
        let set: HashSet<&str> = VOCAB.iter().copied().collect();
        assert_eq!(set.len(), VOCAB_SIZE);
    }

    #[test]
    fn every_kind_cross_checks_over_many_samples() {
        for kind in ALL_KINDS {
            let mut rng = stream(101, kind.name());
            for _ in 0..200 {
                let s = make_sample(kind, &mut rng).unwrap();
                s.scene.validate().unwrap();
                assert!(check_answer(&s), "bad answer for {:?}: {s:?}", kind);
                assert!(
                    s.instruction.iter().chain(&s.answer).all(|&t| t < VOCAB_SIZE),
                    "token out of vocab"
                );
            }
        }
    }

    #[test]
    fn yes_and_no_both_occur_for_binary_kinds() {
        for kind in [
            TaskKind::ExistColor,
            TaskKind::ExistColorShape,
            TaskKind::LeftRight,
            TaskKind::AboveBelow,
            TaskKind::SameColor,
            TaskKind::EmptyCell,
        ] {
            let mut rng = stream(55, kind.name());
            let mut seen = HashSet::new();
            for _ in 0..300 {
                let s = make_sample(kind, &mut rng).unwrap();
                seen.insert(s.answer[0]);
            }
            assert_eq!(seen.len(), 2, "{:?} never flips its answer", kind);
        }
    }

    #[test]
    fn render_has_expected_geometry() {
        let scene = Scene {
            objects: vec![
                Obj { row: 0, col: 0, color: Color::Red, shape: Shape::Square },
                Obj { row: 3, col: 3, color: Color::Blue, shape: Shape::Triangle },
            ],
        };
        let img = scene.render();
        assert_eq!(img.shape(), &[IMAGE_PX, IMAGE_PX, 3]);
        let px = |y: usize, x: usize, ch: usize| img.data()[(y * IMAGE_PX + x) * 3 + ch];
        // red square fills its full cell
        assert_eq!(px(0, 0, 0), 1.0);
        assert_eq!(px(3, 3, 0), 1.0);
        // background is black
        assert_eq!(px(0, 4, 0), 0.0);
        assert_eq!(px(8, 8, 2), 0.0);
        // triangle cell: (pr=0, pc=3) empty, (pr=3, pc=0) filled, blue channel
        assert_eq!(px(12, 15, 2), 0.0);
        assert_eq!(px(15, 12, 2), 1.0);
    }

    #[test]
    fn shapes_render_distinctly() {
        let imgs: Vec<Tensor> = SHAPES
            .iter()
            .map(|&shape| {
                Scene {
                    objects: vec![
                        Obj { row: 0, col: 0, color: Color::Red, shape },
                        Obj { row: 1, col: 1, color: Color::Red, shape },
                    ],
                }
                .render()
            })
            .collect();
        assert_ne!(imgs[0].data(), imgs[1].data());
        assert_ne!(imgs[0].data(), imgs[2].data());
        assert_ne!(imgs[1].data(), imgs[2].data());
    }

    #[test]
    fn datasets_are_prefix_nested_and_deterministic() {
        let full = build_dataset(60, 9, 1.0, &ALL_KINDS).unwrap();
        let half = build_dataset(60, 9, 0.5, &ALL_KINDS).unwrap();
        let again = build_dataset(60, 9, 1.0, &ALL_KINDS).unwrap();
        assert_eq!(full.len(), 60);
        assert_eq!(half.len(), 30);
        assert_eq!(full, again);
        assert_eq!(&full[..30], &half[..]);
        let other_seed = build_dataset(60, 10, 1.0, &ALL_KINDS).unwrap();
        assert_ne!(full, other_seed);
    }

    #[test]
    fn dataset_kinds_rotate() {
        let ds = build_dataset(30, 3, 1.0, &ALL_KINDS).unwrap();
        for (i, s) in ds.iter().enumerate() {
            assert_eq!(s.kind, ALL_KINDS[i % ALL_KINDS.len()]);
        }
    }

    #[test]
    fn bad_fraction_is_a_config_error() {
        assert!(build_dataset(10, 0, 0.0, &ALL_KINDS).is_err());
        assert!(build_dataset(10, 0, 1.5, &ALL_KINDS).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let ds = build_dataset(45, 4, 1.0, &ALL_KINDS).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_jsonl(&ds, &path).unwrap();
        let back = load_jsonl(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn pretrain_pairs_are_captions() {
        let pairs = pretrain_pairs(8, 2).unwrap();
        assert_eq!(pairs.len(), 8);
        for p in &pairs {
            assert_eq!(p.kind, TaskKind::CaptionAll);
            assert_eq!(p.answer, p.scene.caption());
            assert_eq!(p.answer.len(), p.scene.objects.len() * 2);
        }
    }

    #[test]
    fn grounding_reads_one_cell_and_captioning_reads_all() {
        // The conflict is structural: deleting any object always changes the
        // caption, while a grounding answer survives every deletion except
        // its own target.
        let mut rng = stream(77, "conflict-construction");
        let mut checked = 0;
        for _ in 0..50 {
            let scene = Scene::random(&mut rng);
            let Ok(g) = sample_for_scene(&scene, TaskKind::LocateColorShape, &mut rng) else {
                continue;
            };
            let (color, shape) = (g.instruction[3], g.instruction[4]);
            for skip in 0..scene.objects.len() {
                let masked = Scene {
                    objects: scene
                        .objects
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != skip)
                        .map(|(_, o)| o.clone())
                        .collect(),
                };
                assert_ne!(masked.caption(), scene.caption(), "caption ignored a deletion");
                if scene.objects[skip].cell_token() != g.answer[0] {
                    let survivors: Vec<_> = masked
                        .objects
                        .iter()
                        .filter(|o| o.color.token() == color && o.shape.token() == shape)
                        .collect();
                    assert_eq!(survivors.len(), 1);
                    assert_eq!(survivors[0].cell_token(), g.answer[0]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 50, "not enough non-target deletions exercised");
    }

    proptest! {
        #[test]
        fn random_scenes_validate_and_render(seed in 0u64..5_000) {
            let mut rng = stream(seed, "prop-scene");
            let scene = Scene::random(&mut rng);
            scene.validate().unwrap();
            let img = scene.render();
            prop_assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // occupied cells are non-black at their center; empty cells are black
            for r in 0..GRID {
                for c in 0..GRID {
                    let y = r * CELL_PX + 1;
                    let x = c * CELL_PX + 1;
                    let lit = (0..3).any(|ch| img.data()[(y * IMAGE_PX + x) * 3 + ch] > 0.0);
                    prop_assert_eq!(lit, scene.at(r, c).is_some());
                }
            }
        }
    }
}
