//! Procedural characters with fully known factors, their captions, and the
//! paired/unpaired dataset manifest.
//!
//! A character's identity is `(body_shape, palette, texture)`; a view is
//! `(pose_angle, scale, background, style)`. Bodies are elongated along their
//! pose axis so that orientation is recoverable from the silhouette, and all
//! three palette colours are visible in every texture: the primary fills the
//! body, the secondary draws the texture (a core for `solid`, bands for
//! `stripes`, spots for `dots`) and the accent marks the head end.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const SUPPORTED_RESOLUTIONS: [usize; 2] = [32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyShape {
    Circle,
    Square,
    Triangle,
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Stripes,
    Dots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Red,
    Green,
    Blue,
    White,
    Gray,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Flat,
    Outline,
}

impl BodyShape {
    pub const ALL: [BodyShape; 4] = [BodyShape::Circle, BodyShape::Square, BodyShape::Triangle, BodyShape::Star];
    pub fn word(self) -> &'static str {
        match self {
            BodyShape::Circle => "circle",
            BodyShape::Square => "square",
            BodyShape::Triangle => "triangle",
            BodyShape::Star => "star",
        }
    }
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Solid, Texture::Stripes, Texture::Dots];
    pub fn word(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Stripes => "striped",
            Texture::Dots => "dotted",
        }
    }
}

impl Background {
    pub const ALL: [Background; 5] =
        [Background::Red, Background::Green, Background::Blue, Background::White, Background::Gray];
    pub fn word(self) -> &'static str {
        match self {
            Background::Red => "red",
            Background::Green => "green",
            Background::Blue => "blue",
            Background::White => "white",
            Background::Gray => "gray",
        }
    }
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Background::Red => [0.85, 0.15, 0.15],
            Background::Green => [0.15, 0.70, 0.20],
            Background::Blue => [0.15, 0.25, 0.85],
            Background::White => [0.95, 0.95, 0.95],
            Background::Gray => [0.50, 0.50, 0.50],
        }
    }
}

impl Style {
    pub const ALL: [Style; 2] = [Style::Flat, Style::Outline];
    pub fn word(self) -> &'static str {
        match self {
            Style::Flat => "flat",
            Style::Outline => "outline",
        }
    }
}

pub const POSE_ANGLES: [u16; 4] = [0, 45, 90, 135];
pub const POSE_WORDS: [&str; 4] = ["level", "rising", "upright", "leaning"];
pub const SCALES: [f32; 3] = [0.6, 0.8, 1.0];
pub const SCALE_WORDS: [&str; 3] = ["small", "medium", "large"];

/// Palette colours; every one differs from every background colour by more
/// than 0.25 in at least one channel, so silhouettes are always separable.
pub const PALETTE_COLORS: [(&str, [f32; 3]); 10] = [
    ("yellow", [0.98, 0.85, 0.10]),
    ("cyan", [0.10, 0.85, 0.90]),
    ("magenta", [0.85, 0.10, 0.75]),
    ("orange", [1.00, 0.55, 0.05]),
    ("purple", [0.45, 0.15, 0.70]),
    ("brown", [0.50, 0.28, 0.08]),
    ("pink", [1.00, 0.65, 0.78]),
    ("navy", [0.05, 0.08, 0.35]),
    ("lime", [0.65, 1.00, 0.25]),
    ("teal", [0.00, 0.55, 0.55]),
];

const OUTLINE_RGB: [f32; 3] = [0.05, 0.05, 0.05];

/// Three distinct palette colour indices: body, texture, accent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Palette(pub [u8; 3]);

impl Palette {
    pub const COUNT: usize = 10 * 9 * 8;

    pub fn from_index(i: usize) -> Palette {
        assert!(i < Self::COUNT);
        let a = i / 72;
        let rest = i % 72;
        let mut others: Vec<u8> = (0..10u8).filter(|c| *c as usize != a).collect();
        let b = others.remove(rest / 8);
        let c = others[rest % 8];
        Palette([a as u8, b, c])
    }

    pub fn index(&self) -> usize {
        let [a, b, c] = self.0.map(|v| v as usize);
        let bi = if b > a { b - 1 } else { b };
        let others: Vec<usize> = (0..10).filter(|x| *x != a && *x != b).collect();
        let ci = others.iter().position(|x| *x == c).expect("distinct palette");
        a * 72 + bi * 8 + ci
    }

    pub fn is_valid(&self) -> bool {
        let [a, b, c] = self.0;
        a < 10 && b < 10 && c < 10 && a != b && b != c && a != c
    }

    pub fn rgb(&self, slot: usize) -> [f32; 3] {
        PALETTE_COLORS[self.0[slot] as usize].1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Identity {
    pub body_shape: BodyShape,
    pub palette: Palette,
    pub texture: Texture,
}

impl Identity {
    pub const COUNT: usize = 4 * Palette::COUNT * 3;

    pub fn from_index(i: usize) -> Identity {
        assert!(i < Self::COUNT);
        Identity {
            body_shape: BodyShape::ALL[i % 4],
            texture: Texture::ALL[(i / 4) % 3],
            palette: Palette::from_index(i / 12),
        }
    }

    pub fn index(&self) -> usize {
        let s = BodyShape::ALL.iter().position(|x| *x == self.body_shape).unwrap();
        let t = Texture::ALL.iter().position(|x| *x == self.texture).unwrap();
        s + 4 * t + 12 * self.palette.index()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewFactors {
    pub pose_angle: u16,
    pub scale: f32,
    pub background: Background,
    pub style: Style,
}

impl Eq for ViewFactors {}

impl ViewFactors {
    pub const COUNT: usize = 4 * 3 * 5 * 2;

    pub fn from_index(i: usize) -> ViewFactors {
        assert!(i < Self::COUNT);
        ViewFactors {
            pose_angle: POSE_ANGLES[i % 4],
            scale: SCALES[(i / 4) % 3],
            background: Background::ALL[(i / 12) % 5],
            style: Style::ALL[i / 60],
        }
    }

    pub fn index(&self) -> usize {
        self.pose_index() + 4 * self.scale_index() + 12 * self.background_index() + 60 * self.style_index()
    }

    pub fn pose_index(&self) -> usize {
        POSE_ANGLES.iter().position(|a| *a == self.pose_angle).expect("valid pose")
    }

    pub fn scale_index(&self) -> usize {
        SCALES.iter().position(|s| *s == self.scale).expect("valid scale")
    }

    pub fn background_index(&self) -> usize {
        Background::ALL.iter().position(|b| *b == self.background).unwrap()
    }

    pub fn style_index(&self) -> usize {
        Style::ALL.iter().position(|s| *s == self.style).unwrap()
    }

    pub fn is_valid(&self) -> bool {
        POSE_ANGLES.contains(&self.pose_angle) && SCALES.contains(&self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterSpec {
    pub identity: Identity,
    pub view: ViewFactors,
}

impl CharacterSpec {
    pub fn is_valid(&self) -> bool {
        self.identity.palette.is_valid() && self.view.is_valid()
    }

    pub fn with_view(&self, view: ViewFactors) -> CharacterSpec {
        CharacterSpec { identity: self.identity, view }
    }

    /// Stable key for caches and file names.
    pub fn key(&self) -> String {
        format!("i{:05}v{:03}", self.identity.index(), self.view.index())
    }
}

// ---------------------------------------------------------------- rendering

fn inside_body(shape: BodyShape, u: f64, v: f64) -> bool {
    match shape {
        BodyShape::Circle => (u / 0.38).powi(2) + (v / 0.22).powi(2) <= 1.0,
        BodyShape::Square => u.abs() <= 0.34 && v.abs() <= 0.21,
        BodyShape::Triangle => (-0.30..=0.38).contains(&u) && v.abs() <= 0.24 * (0.38 - u) / 0.68,
        BodyShape::Star => {
            let (x, y) = (u, v / 0.62);
            let r = (x * x + y * y).sqrt();
            if r < 1e-12 {
                return true;
            }
            let theta = y.atan2(x).rem_euclid(std::f64::consts::TAU);
            let sector = std::f64::consts::TAU / 5.0;
            let local = (theta % sector) / sector;
            // Piecewise-linear star boundary in polar form.
            let (outer, inner) = (0.38, 0.17);
            let tri = (local - 0.5).abs() * 2.0;
            let bound = inner + (outer - inner) * tri;
            r <= bound
        }
    }
}

fn texture_mark(texture: Texture, shape: BodyShape, u: f64, v: f64) -> bool {
    match texture {
        Texture::Solid => inside_body(shape, u / 0.5, v / 0.5),
        Texture::Stripes => ((u + 1.0) / 0.1).floor() as i64 % 2 == 0,
        Texture::Dots => {
            let cell = 0.14;
            let cu = (u / cell).round() * cell;
            let cv = (v / cell).round() * cell;
            (u - cu).powi(2) + (v - cv).powi(2) <= 0.045f64.powi(2)
        }
    }
}

fn sample_color(spec: &CharacterSpec, x: f64, y: f64) -> [f32; 3] {
    let view = &spec.view;
    let id = &spec.identity;
    let angle = (view.pose_angle as f64).to_radians();
    let s = view.scale as f64;
    // Image y grows downwards; body coordinates use y up, angle counter-clockwise.
    let (dx, dy) = (x, -y);
    let (ca, sa) = (angle.cos(), angle.sin());
    let u = (dx * ca + dy * sa) / s;
    let v = (-dx * sa + dy * ca) / s;
    if !inside_body(id.body_shape, u, v) {
        return view.background.rgb();
    }
    if view.style == Style::Outline && !inside_body(id.body_shape, u / 0.8, v / 0.8) {
        return OUTLINE_RGB;
    }
    if (u - 0.22).powi(2) + v.powi(2) <= 0.07f64.powi(2) {
        return id.palette.rgb(2);
    }
    if texture_mark(id.texture, id.body_shape, u, v) {
        id.palette.rgb(1)
    } else {
        id.palette.rgb(0)
    }
}

const SUPERSAMPLE: usize = 4;

/// Deterministic rasterization with 4x4 supersampling per pixel.
pub fn render(spec: &CharacterSpec, resolution: usize) -> Result<ImageTensor> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::InvalidInput(format!(
            "unsupported render resolution {resolution} (supported: {SUPPORTED_RESOLUTIONS:?})"
        )));
    }
    render_any(spec, resolution)
}

/// Rendering at an arbitrary side length (the supported-resolution check is
/// only enforced for dataset images).
pub fn render_any(spec: &CharacterSpec, resolution: usize) -> Result<ImageTensor> {
    if !spec.is_valid() {
        return Err(Error::InvalidInput(format!("invalid character spec {spec:?}")));
    }
    let n = resolution as f64;
    let mut data = Vec::with_capacity(resolution * resolution * 3);
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in 0..resolution {
        for px in 0..resolution {
            let mut acc = [0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / n - 0.5;
                    let y = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / n - 0.5;
                    let c = sample_color(spec, x, y);
                    for k in 0..3 {
                        acc[k] += c[k] as f64;
                    }
                }
            }
            data.extend(acc.map(|a| ((a * inv) as f32).clamp(0.0, 1.0)));
        }
    }
    ImageTensor::new(resolution, resolution, data)
}

// ------------------------------------------------------------ captions

/// The fixed 64-word vocabulary. Index 0 is the null token used for
/// text-dropped conditioning.
pub const VOCAB: [&str; 64] = [
    "<null>", "a", "character", "background", "style", // grammar
    "small", "medium", "large", // scale
    "solid", "striped", "dotted", // texture
    "circle", "square", "triangle", "star", // shape
    "level", "rising", "upright", "leaning", // pose
    "red", "green", "blue", "white", "gray", // background
    "flat", "outline", // style
    "yellow", "cyan", "magenta", "orange", "purple", "brown", "pink", "navy", "lime", "teal", // palette
    "an", "the", "with", "on", "in", "of", "and", "cute", "tiny", "big", "happy", "sad", "bright", "dark", "toy",
    "sprite", "figure", "hero", "scene", "image", "picture", "drawing", "posing", "standing", "facing", "left",
    "right", "center",
];

pub const NULL_TOKEN: u32 = 0;
/// Every generated caption has this many tokens.
pub const CAPTION_LEN: usize = 10;

pub fn token_id(word: &str) -> Option<u32> {
    VOCAB.iter().position(|w| *w == word).map(|i| i as u32)
}

fn id_of(word: &str) -> u32 {
    token_id(word).expect("grammar word in vocabulary")
}

pub fn vocabulary_listing() -> String {
    VOCAB[1..].join(" ")
}

/// `a {size} {texture} {shape} character, {pose}, {background} background, {style} style`
pub fn caption(spec: &CharacterSpec) -> Vec<u32> {
    let v = &spec.view;
    vec![
        id_of("a"),
        id_of(SCALE_WORDS[v.scale_index()]),
        id_of(spec.identity.texture.word()),
        id_of(spec.identity.body_shape.word()),
        id_of("character"),
        id_of(POSE_WORDS[v.pose_index()]),
        id_of(v.background.word()),
        id_of("background"),
        id_of(v.style.word()),
        id_of("style"),
    ]
}

pub fn null_caption() -> Vec<u32> {
    vec![NULL_TOKEN; CAPTION_LEN]
}

pub fn caption_text(ids: &[u32]) -> String {
    ids.iter().map(|i| VOCAB.get(*i as usize).copied().unwrap_or("<?>")).collect::<Vec<_>>().join(" ")
}

/// Lower-cases, strips punctuation, and maps every word through the vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    let mut ids = Vec::new();
    for raw in text.split_whitespace() {
        let word: String = raw.chars().filter(|c| c.is_alphanumeric() || *c == '<' || *c == '>').collect();
        let word = word.to_lowercase();
        if word.is_empty() {
            continue;
        }
        match token_id(&word) {
            Some(id) => ids.push(id),
            None => return Err(Error::UnknownWord { word, vocabulary: vocabulary_listing() }),
        }
    }
    if ids.is_empty() {
        return Err(Error::InvalidInput("caption has no words".into()));
    }
    Ok(ids)
}

/// Factors a caption names. Each field is `None` when the caption does not
/// mention it (or names it more than once).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ParsedCaption {
    pub pose_angle: Option<u16>,
    pub scale: Option<f32>,
    pub background: Option<Background>,
    pub style: Option<Style>,
    pub texture: Option<Texture>,
    pub body_shape: Option<BodyShape>,
}

impl ParsedCaption {
    pub fn view(&self) -> Option<ViewFactors> {
        Some(ViewFactors {
            pose_angle: self.pose_angle?,
            scale: self.scale?,
            background: self.background?,
            style: self.style?,
        })
    }
}

fn unique<T: Copy + PartialEq>(hits: Vec<T>) -> Option<T> {
    match hits.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

pub fn parse_caption(ids: &[u32]) -> ParsedCaption {
    let words: Vec<&str> = ids.iter().filter_map(|i| VOCAB.get(*i as usize).copied()).collect();
    let find = |table: &[&str]| -> Vec<usize> {
        words.iter().filter_map(|w| table.iter().position(|t| t == w)).collect()
    };
    let bg_words: Vec<&str> = Background::ALL.iter().map(|b| b.word()).collect();
    let style_words: Vec<&str> = Style::ALL.iter().map(|s| s.word()).collect();
    let tex_words: Vec<&str> = Texture::ALL.iter().map(|t| t.word()).collect();
    let shape_words: Vec<&str> = BodyShape::ALL.iter().map(|s| s.word()).collect();
    ParsedCaption {
        pose_angle: unique(find(&POSE_WORDS)).map(|i| POSE_ANGLES[i]),
        scale: unique(find(&SCALE_WORDS)).map(|i| SCALES[i]),
        background: unique(find(&bg_words)).map(|i| Background::ALL[i]),
        style: unique(find(&style_words)).map(|i| Style::ALL[i]),
        texture: unique(find(&tex_words)).map(|i| Texture::ALL[i]),
        body_shape: unique(find(&shape_words)).map(|i| BodyShape::ALL[i]),
    }
}

// ------------------------------------------------------------ manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Paired,
    Unpaired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

/// One line of `manifest.jsonl`.
///
/// Fields: `sample_id`, `subset` (`paired`/`unpaired`), `split`
/// (`train`/`heldout`), `character_id`, `reference_image`, `target_image`
/// (paired only), `caption` (token ids describing the target),
/// `spec` (identity plus the target view) and `reference_view`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub sample_id: String,
    pub subset: Subset,
    pub split: Split,
    pub character_id: u32,
    pub reference_image: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_image: Option<String>,
    pub caption: Vec<u32>,
    pub spec: CharacterSpec,
    pub reference_view: ViewFactors,
}

impl Record {
    pub fn reference_spec(&self) -> CharacterSpec {
        self.spec.with_view(self.reference_view)
    }

    pub fn target_spec(&self) -> CharacterSpec {
        self.spec
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
}

pub fn image_path(character_id: u32, view: &ViewFactors) -> String {
    format!("images/c{character_id:04}/v{:03}.png", view.index())
}

impl DatasetManifest {
    pub fn subset(&self, subset: Subset, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.subset == subset && r.split == split).collect()
    }

    pub fn character_ids(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.character_id).collect()
    }

    /// One spec per (character, view) pair appearing anywhere in the manifest.
    pub fn views(&self) -> Vec<(u32, CharacterSpec)> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            for s in [r.reference_spec(), r.target_spec()] {
                if seen.insert((r.character_id, s.view.index())) {
                    out.push((r.character_id, s));
                }
            }
        }
        out
    }

    /// Checks the structural invariants of a manifest.
    pub fn validate(&self) -> Result<()> {
        let mut identities: HashMap<u32, Identity> = HashMap::new();
        let mut owners: HashMap<Identity, u32> = HashMap::new();
        let mut ids = BTreeSet::new();
        for r in &self.records {
            let bad = |m: &str| Err(Error::Dataset(format!("record {}: {m}", r.sample_id)));
            if !ids.insert(r.sample_id.clone()) {
                return bad("duplicate sample id");
            }
            if !r.spec.is_valid() || !r.reference_view.is_valid() {
                return bad("spec outside its factor domains");
            }
            let prev = identities.entry(r.character_id).or_insert(r.spec.identity);
            if *prev != r.spec.identity {
                return bad("identity factors differ between views of one character");
            }
            if *owners.entry(r.spec.identity).or_insert(r.character_id) != r.character_id {
                return bad("identity repeated across characters");
            }
            if r.caption != caption(&r.spec) {
                return bad("caption does not describe the target view");
            }
            match r.subset {
                Subset::Paired => {
                    if r.target_image.is_none() {
                        return bad("paired record without target image");
                    }
                    if r.reference_view == r.spec.view {
                        return bad("paired record must use two distinct views");
                    }
                }
                Subset::Unpaired => {
                    if r.target_image.is_some() || r.reference_view != r.spec.view {
                        return bad("unpaired record must reconstruct its reference");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Dataset(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
            records.push(r);
        }
        let m = DatasetManifest { records };
        m.validate()?;
        Ok(m)
    }

    /// Writes `manifest.jsonl` and `images/<character>/<view>.png` under `dir`.
    pub fn write_to_dir(&self, dir: &Path, resolution: usize) -> Result<PathBuf> {
        for (cid, spec) in self.views() {
            let rel = image_path(cid, &spec.view);
            let path = dir.join(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            render(&spec, resolution)?.save_png(&path)?;
        }
        let manifest = dir.join("manifest.jsonl");
        self.write_jsonl(&manifest)?;
        Ok(manifest)
    }
}

/// Draws `n_characters` distinct identities and `views_per_character`
/// distinct views of each. The first `round(unpaired_fraction * n)`
/// characters contribute one self-reconstruction record per view; the rest
/// contribute every ordered pair of distinct views (one record group each).
/// The last `heldout` characters are marked as held out.
pub fn generate_dataset<R: Rng + ?Sized>(
    n_characters: usize,
    views_per_character: usize,
    unpaired_fraction: f64,
    heldout: usize,
    rng: &mut R,
) -> Result<DatasetManifest> {
    if n_characters < 2 {
        return Err(Error::Dataset("need at least 2 characters".into()));
    }
    if !(2..=ViewFactors::COUNT).contains(&views_per_character) {
        return Err(Error::Dataset(format!("views per character must be in 2..={}", ViewFactors::COUNT)));
    }
    if !(0.0..=1.0).contains(&unpaired_fraction) {
        return Err(Error::Dataset("unpaired fraction must be in [0, 1]".into()));
    }
    if n_characters > Identity::COUNT {
        return Err(Error::Dataset(format!(
            "{n_characters} characters exceed the identity space of {}",
            Identity::COUNT
        )));
    }
    if heldout > n_characters {
        return Err(Error::Dataset("more held-out characters than characters".into()));
    }
    let identities = sample_indices(rng, Identity::COUNT, n_characters).into_vec();
    let n_unpaired = (unpaired_fraction * n_characters as f64).round() as usize;
    let mut records = Vec::new();
    for (c, id_index) in identities.into_iter().enumerate() {
        let identity = Identity::from_index(id_index);
        let views: Vec<ViewFactors> = sample_indices(rng, ViewFactors::COUNT, views_per_character)
            .into_iter()
            .map(ViewFactors::from_index)
            .collect();
        let cid = c as u32;
        let split = if c >= n_characters - heldout { Split::Heldout } else { Split::Train };
        let unpaired = c < n_unpaired;
        if unpaired {
            for v in &views {
                let spec = CharacterSpec { identity, view: *v };
                records.push(Record {
                    sample_id: String::new(),
                    subset: Subset::Unpaired,
                    split,
                    character_id: cid,
                    reference_image: image_path(cid, v),
                    target_image: None,
                    caption: caption(&spec),
                    spec,
                    reference_view: *v,
                });
            }
        } else {
            for r in &views {
                for t in &views {
                    if r == t {
                        continue;
                    }
                    let spec = CharacterSpec { identity, view: *t };
                    records.push(Record {
                        sample_id: String::new(),
                        subset: Subset::Paired,
                        split,
                        character_id: cid,
                        reference_image: image_path(cid, r),
                        target_image: Some(image_path(cid, t)),
                        caption: caption(&spec),
                        spec,
                        reference_view: *r,
                    });
                }
            }
        }
    }
    for (i, r) in records.iter_mut().enumerate() {
        r.sample_id = format!("s{i:06}");
    }
    let m = DatasetManifest { records };
    m.validate()?;
    Ok(m)
}
