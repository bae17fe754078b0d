//! Synthetic referring-segmentation scenes.
//!
//! A scene is a `grid x grid` layout of flat-colored shapes on a gray
//! background. Each sample carries one expression that picks out exactly
//! one object, either by its attributes ("the red circle") or, when the
//! attributes are shared by a distractor, through a spatial relation to a
//! uniquely described landmark ("the blue square left of the red circle").

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use magnet_autograd::rng::named_stream;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, MagnetError, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;

/// Token budget per expression, CLS included.
pub const MAX_LEN: usize = 12;

const BACKGROUND: [u8; 3] = [128, 128, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
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

    fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
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

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 70, 220],
            Color::Yellow => [230, 210, 40],
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Whether an object in cell `a` stands in this relation to one in `b`.
    /// Cells are `(row, col)`.
    pub fn holds(self, a: (usize, usize), b: (usize, usize)) -> bool {
        match self {
            Relation::LeftOf => a.1 < b.1,
            Relation::RightOf => a.1 > b.1,
            Relation::Above => a.0 < b.0,
            Relation::Below => a.0 > b.0,
        }
    }
}

/// Closed word list with reserved ids `PAD = 0`, `MASK = 1`, `CLS = 2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return input_err(format!("duplicate vocabulary entry `{t}`"));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The generator's vocabulary: specials, article, shapes, colors and
    /// relation words.
    pub fn standard() -> Self {
        let mut words: Vec<String> = ["<pad>", "<mask>", "<cls>", "the"]
            .into_iter()
            .map(String::from)
            .collect();
        words.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
        words.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        words.extend(["left", "right", "of", "above", "below"].map(String::from));
        Self::new(words).expect("distinct words")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids of ordinary words (everything but the three specials).
    pub fn is_special(id: usize) -> bool {
        id == PAD || id == MASK || id == CLS
    }
}

/// `[CLS, ids..., PAD...]` of exactly `max_len` entries.
pub fn tokenize<S: AsRef<str>>(words: &[S], vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    if words.len() + 1 > max_len {
        return input_err(format!(
            "{} words plus CLS exceed max_len {max_len}",
            words.len()
        ));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    for w in words {
        let w = w.as_ref();
        match vocab.id(w) {
            Some(id) if !Vocabulary::is_special(id) => ids.push(id),
            _ => return Err(MagnetError::UnknownWord(w.to_string())),
        }
    }
    ids.resize(max_len, PAD);
    Ok(ids)
}

/// Inverse of [`tokenize`]: drops CLS and PAD.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&i| i != CLS && i != PAD)
        .map(|&i| vocab.word(i).unwrap_or("<unk>").to_string())
        .collect()
}

/// Foreground pixel centroid normalized to `[0,1]^2`:
/// `cx = mean(col) / (w-1)`, `cy = mean(row) / (h-1)`.
pub fn mask_centroid(mask: &[u8], h: usize, w: usize) -> Result<(f64, f64)> {
    if mask.len() != h * w {
        return input_err(format!("mask of {} pixels is not {h}x{w}", mask.len()));
    }
    let (mut sx, mut sy, mut n) = (0u64, 0u64, 0u64);
    for (i, &m) in mask.iter().enumerate() {
        if m != 0 {
            sx += (i % w) as u64;
            sy += (i / w) as u64;
            n += 1;
        }
    }
    if n == 0 {
        return input_err("centroid of an empty mask");
    }
    let norm = |s: u64, len: usize| {
        if len <= 1 {
            0.5
        } else {
            s as f64 / n as f64 / (len - 1) as f64
        }
    };
    Ok((norm(sx, w), norm(sy, h)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// `(row, col)` on the layout grid.
    pub cell: (usize, usize),
    /// Top-left pixel and side length of the shape's bounding square.
    pub origin: (usize, usize),
    pub size: usize,
}

impl SceneObject {
    /// Whether the pixel at `(row, col)` lies inside the shape, tested at the
    /// pixel center in exact integer arithmetic.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let (ox, oy) = (self.origin.0 as i64, self.origin.1 as i64);
        let s = self.size as i64;
        let (x, y) = (col as i64, row as i64);
        if x < ox || x >= ox + s || y < oy || y >= oy + s {
            return false;
        }
        // doubled coordinates relative to the box center
        let dx = 2 * x + 1 - 2 * ox - s;
        let dy = 2 * y + 1 - 2 * oy - s;
        match self.shape {
            Shape::Square => true,
            Shape::Circle => dx * dx + dy * dy <= s * s,
            // apex at the top center, base along the bottom edge
            Shape::Triangle => 2 * dx.abs() <= 2 * y + 1 - 2 * oy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid: usize,
    pub objects: Vec<SceneObject>,
    pub referent: usize,
    /// Spatial clause and the index of its landmark object.
    pub relation: Option<(Relation, usize)>,
}

impl SceneSpec {
    pub fn expression(&self) -> Vec<&'static str> {
        let r = &self.objects[self.referent];
        let mut words = vec!["the", r.color.word(), r.shape.word()];
        if let Some((rel, lm)) = self.relation {
            let l = &self.objects[lm];
            words.extend_from_slice(rel.words());
            words.extend_from_slice(&["the", l.color.word(), l.shape.word()]);
        }
        words
    }
}

/// A parsed referring expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Description {
    pub color: Color,
    pub shape: Shape,
    pub clause: Option<(Relation, Color, Shape)>,
}

/// Parses the generator's grammar back from words.
pub fn parse_expression<S: AsRef<str>>(words: &[S]) -> Result<Description> {
    let w: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
    let bad = || MagnetError::Input(format!("unparseable expression {:?}", w));
    let head = |i: usize| -> Result<(Color, Shape)> {
        if w.get(i) != Some(&"the") {
            return Err(bad());
        }
        let c = w.get(i + 1).and_then(|x| Color::from_word(x)).ok_or_else(bad)?;
        let s = w.get(i + 2).and_then(|x| Shape::from_word(x)).ok_or_else(bad)?;
        Ok((c, s))
    };
    let (color, shape) = head(0)?;
    let rest = &w[3..];
    if rest.is_empty() {
        return Ok(Description {
            color,
            shape,
            clause: None,
        });
    }
    let rel = Relation::ALL
        .into_iter()
        .find(|r| rest.starts_with(r.words()))
        .ok_or_else(bad)?;
    let at = 3 + rel.words().len();
    let (lc, ls) = head(at)?;
    if w.len() != at + 3 {
        return Err(bad());
    }
    Ok(Description {
        color,
        shape,
        clause: Some((rel, lc, ls)),
    })
}

/// Indices of every object satisfying the description, found by exhaustive
/// matching against all objects (and all candidate landmarks).
pub fn matching_objects(objects: &[SceneObject], d: &Description) -> Vec<usize> {
    objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.color == d.color && o.shape == d.shape)
        .filter(|(i, o)| match d.clause {
            None => true,
            Some((rel, lc, ls)) => objects
                .iter()
                .enumerate()
                .any(|(j, l)| j != *i && l.color == lc && l.shape == ls && rel.holds(o.cell, l.cell)),
        })
        .map(|(i, _)| i)
        .collect()
}

fn landmark_is_unique(objects: &[SceneObject], d: &Description) -> bool {
    match d.clause {
        None => true,
        Some((_, lc, ls)) => objects.iter().filter(|o| o.color == lc && o.shape == ls).count() == 1,
    }
}

/// One synthetic task.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub size: usize,
    /// `size x size x 3` raster, row-major, 8 bits per channel.
    pub pixels: Vec<u8>,
    pub tokens: Vec<usize>,
    /// `size x size` binary footprint of the referent.
    pub mask: Vec<u8>,
    pub spec: SceneSpec,
}

impl Sample {
    /// Channel value in `[0, 1]`.
    pub fn pixel(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[(row * self.size + col) * 3 + ch] as f64 / 255.0
    }

    pub fn centroid(&self) -> (f64, f64) {
        mask_centroid(&self.mask, self.size, self.size).expect("nonempty mask by construction")
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

fn cell_span(index: usize, grid: usize, size: usize) -> (usize, usize) {
    (index * size / grid, (index + 1) * size / grid)
}

fn place(rng: &mut ChaCha8Rng, shape: Shape, color: Color, cell: (usize, usize), grid: usize, size: usize) -> SceneObject {
    let (y0, y1) = cell_span(cell.0, grid, size);
    let (x0, x1) = cell_span(cell.1, grid, size);
    let side = (x1 - x0).min(y1 - y0) * 4 / 5;
    let ox = rng.gen_range(x0..=x1 - side);
    let oy = rng.gen_range(y0..=y1 - side);
    SceneObject {
        shape,
        color,
        cell,
        origin: (ox, oy),
        size: side,
    }
}

fn random_attrs(rng: &mut ChaCha8Rng) -> (Color, Shape) {
    (
        *Color::ALL.choose(rng).expect("nonempty"),
        *Shape::ALL.choose(rng).expect("nonempty"),
    )
}

fn simple_scene(rng: &mut ChaCha8Rng, grid: usize, size: usize) -> SceneSpec {
    let n = rng.gen_range(2..=4.min(grid * grid));
    let mut cells: Vec<(usize, usize)> = (0..grid * grid).map(|i| (i / grid, i % grid)).collect();
    cells.shuffle(rng);
    let (rc, rs) = random_attrs(rng);
    let mut objects = vec![place(rng, rs, rc, cells[0], grid, size)];
    for &cell in &cells[1..n] {
        // distractors share one attribute with the referent half of the time
        let (c, s) = loop {
            let (mut c, mut s) = random_attrs(rng);
            match rng.gen_range(0..4) {
                0 => c = rc,
                1 => s = rs,
                _ => {}
            }
            if (c, s) != (rc, rs) {
                break (c, s);
            }
        };
        objects.push(place(rng, s, c, cell, grid, size));
    }
    let referent = rng.gen_range(0..n);
    objects.swap(0, referent);
    SceneSpec {
        grid,
        objects,
        referent,
        relation: None,
    }
}

fn relational_scene(rng: &mut ChaCha8Rng, grid: usize, size: usize) -> SceneSpec {
    loop {
        let n = rng.gen_range(3..=4.min(grid * grid));
        let mut cells: Vec<(usize, usize)> = (0..grid * grid).map(|i| (i / grid, i % grid)).collect();
        cells.shuffle(rng);
        let rel = *Relation::ALL.choose(rng).expect("nonempty");
        let (rc, rs) = random_attrs(rng);
        let (lc, ls) = loop {
            let a = random_attrs(rng);
            if a != (rc, rs) {
                break a;
            }
        };
        // referent, same-looking distractor, landmark, optional filler
        let mut objects = vec![
            place(rng, rs, rc, cells[0], grid, size),
            place(rng, rs, rc, cells[1], grid, size),
            place(rng, ls, lc, cells[2], grid, size),
        ];
        if n == 4 {
            let (fc, fs) = loop {
                let a = random_attrs(rng);
                if a != (rc, rs) && a != (lc, ls) {
                    break a;
                }
            };
            objects.push(place(rng, fs, fc, cells[3], grid, size));
        }
        let d = Description {
            color: rc,
            shape: rs,
            clause: Some((rel, lc, ls)),
        };
        if matching_objects(&objects, &d) != [0] || !landmark_is_unique(&objects, &d) {
            continue;
        }
        let mut order: Vec<usize> = (0..objects.len()).collect();
        order.shuffle(rng);
        let shuffled: Vec<SceneObject> = order.iter().map(|&i| objects[i].clone()).collect();
        let pos = |orig: usize| order.iter().position(|&i| i == orig).expect("permutation");
        return SceneSpec {
            grid,
            objects: shuffled,
            referent: pos(0),
            relation: Some((rel, pos(2))),
        };
    }
}

/// Rasterizes a scene: 8-bit pixels and the referent's binary footprint.
pub fn render(spec: &SceneSpec, size: usize) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = Vec::with_capacity(size * size * 3);
    let mut mask = vec![0u8; size * size];
    for row in 0..size {
        for col in 0..size {
            let hit = spec.objects.iter().position(|o| o.covers(row, col));
            let rgb = hit.map_or(BACKGROUND, |i| spec.objects[i].color.rgb());
            pixels.extend_from_slice(&rgb);
            if hit == Some(spec.referent) {
                mask[row * size + col] = 1;
            }
        }
    }
    (pixels, mask)
}

/// Deterministic dataset: sample `i` is drawn from its own stream
/// `dataset/i` of `seed`. Even ids use the attribute-only form, odd ids the
/// relational form.
pub fn generate_dataset(seed: u64, count: usize, grid: usize, image_size: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return input_err("count must be at least 1");
    }
    if grid < 2 {
        return input_err(format!("grid {grid} < 2 leaves spatial relations undefined"));
    }
    if image_size == 0 || image_size % 16 != 0 {
        return input_err(format!("image size {image_size} is not a positive multiple of 16"));
    }
    if image_size / grid < 8 {
        return input_err(format!("cells of {} px are too small to draw", image_size / grid));
    }
    let vocab = Vocabulary::standard();
    (0..count)
        .map(|id| {
            let mut rng = named_stream(seed, &format!("dataset/{id}"));
            let spec = if id % 2 == 0 {
                simple_scene(&mut rng, grid, image_size)
            } else {
                relational_scene(&mut rng, grid, image_size)
            };
            let (pixels, mask) = render(&spec, image_size);
            let tokens = tokenize(&spec.expression(), &vocab, MAX_LEN)?;
            Ok(Sample {
                id,
                size: image_size,
                pixels,
                tokens,
                mask,
                spec,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: usize,
    tokens: Vec<usize>,
    words: Vec<String>,
    centroid: [f64; 2],
    spec: SceneSpec,
    image: String,
    mask: String,
}

/// Writes `samples.jsonl` plus `images/NNNNN.png` (RGB) and
/// `masks/NNNNN.png` (8-bit gray, 0 or 255) under `dir`.
pub fn export_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    let vocab = Vocabulary::standard();
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| MagnetError::io(dir.join(sub), e))?;
    }
    let mut lines = String::new();
    for s in samples {
        let image = format!("images/{:05}.png", s.id);
        let mask = format!("masks/{:05}.png", s.id);
        let (cx, cy) = s.centroid();
        let rec = SampleRecord {
            id: s.id,
            tokens: s.tokens.clone(),
            words: detokenize(&s.tokens, &vocab),
            centroid: [cx, cy],
            spec: s.spec.clone(),
            image: image.clone(),
            mask: mask.clone(),
        };
        lines.push_str(&serde_json::to_string(&rec).map_err(|e| MagnetError::Serde(e.to_string()))?);
        lines.push('\n');
        let size = s.size as u32;
        let img = image::RgbImage::from_raw(size, size, s.pixels.clone()).expect("sized raster");
        img.save(dir.join(&image))
            .map_err(|e| MagnetError::Serde(format!("{image}: {e}")))?;
        let m = image::GrayImage::from_raw(size, size, s.mask.iter().map(|&v| v * 255).collect())
            .expect("sized mask");
        m.save(dir.join(&mask))
            .map_err(|e| MagnetError::Serde(format!("{mask}: {e}")))?;
    }
    let path = dir.join("samples.jsonl");
    std::fs::write(&path, lines).map_err(|e| MagnetError::io(&path, e))
}

impl fmt::Display for Sample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} \"{}\"", self.id, self.spec.expression().join(" "))
    }
}
