//! Procedural story dataset: a character on a 4×4 grid over a fixed background,
//! acting once per frame, with one grammar-generated caption per frame.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SeededRng;
use crate::text_encoder::TokenSeq;
use crate::vocab::Vocabulary;

pub const GRID: usize = 4;
pub const SIZES: [usize; 3] = [16, 32, 64];
pub const DEFAULT_FRAMES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Triangle,
    SquareWithHat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prop {
    Ball,
    Tree,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Stand,
    MoveLeft,
    MoveRight,
    Jump,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Triangle, Shape::SquareWithHat];
pub const COLORS: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];
pub const PROPS: [Prop; 3] = [Prop::Ball, Prop::Tree, Prop::Box];
pub const ACTIONS: [Action; 4] = [Action::Stand, Action::MoveLeft, Action::MoveRight, Action::Jump];
pub const BACKGROUND_WORDS: [&str; 4] = ["grass", "sand", "snow", "street"];

impl Shape {
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Shape::Circle => &["circle"],
            Shape::Triangle => &["triangle"],
            Shape::SquareWithHat => &["square", "with", "a", "hat"],
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Blue => [40, 70, 220],
            Color::Green => [30, 160, 50],
            Color::Yellow => [240, 210, 30],
        }
    }
}

impl Prop {
    pub fn word(self) -> &'static str {
        match self {
            Prop::Ball => "ball",
            Prop::Tree => "tree",
            Prop::Box => "box",
        }
    }
}

impl Action {
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Action::Stand => &["stands"],
            Action::MoveLeft => &["moves", "left"],
            Action::MoveRight => &["moves", "right"],
            Action::Jump => &["jumps"],
        }
    }

    fn column_delta(self) -> isize {
        match self {
            Action::MoveLeft => -1,
            Action::MoveRight => 1,
            _ => 0,
        }
    }
}

const SKY: [[u8; 3]; 4] = [[170, 215, 250], [250, 225, 180], [215, 225, 240], [140, 140, 150]];
const GROUND: [[u8; 3]; 4] = [[120, 200, 110], [225, 200, 140], [245, 248, 252], [90, 90, 100]];
const HORIZON: [[u8; 3]; 4] = [[60, 110, 50], [170, 135, 80], [150, 165, 190], [235, 235, 235]];
const HAT: [u8; 3] = [20, 20, 20];
const BALL: [u8; 3] = [255, 140, 0];
const TRUNK: [u8; 3] = [110, 70, 30];
const LEAVES: [u8; 3] = [20, 100, 40];
const BOX: [u8; 3] = [150, 100, 50];

/// Everything needed to render and caption one story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: usize,
    pub shape: Shape,
    pub color: Color,
    /// Prop kind with its `(row, col)` cell.
    pub prop: Option<(Prop, usize, usize)>,
    /// Grid row of the character (constant; jumps are drawn as an offset).
    pub row: usize,
    /// Column before the first action.
    pub start_col: usize,
    /// One action per frame.
    pub actions: Vec<Action>,
}

impl SceneSpec {
    /// Derives a scene from `seed`; actions only ever keep the character on the grid.
    pub fn from_seed(seed: u64, frames: usize) -> Self {
        let mut rng = SeededRng::new(seed ^ 0x5354_4f52_5953_4545);
        let background = rng.below(4) as usize;
        let shape = SHAPES[rng.below(3) as usize];
        let color = COLORS[rng.below(4) as usize];
        let prop = match rng.below(4) {
            0 => None,
            k => Some((PROPS[k as usize - 1], rng.below(GRID as u64) as usize, rng.below(GRID as u64) as usize)),
        };
        let row = 1 + rng.below(GRID as u64 - 1) as usize;
        let start_col = rng.below(GRID as u64) as usize;
        let mut col = start_col;
        let mut actions = Vec::with_capacity(frames);
        for _ in 0..frames {
            let allowed: Vec<Action> = ACTIONS
                .iter()
                .copied()
                .filter(|a| (0..GRID as isize).contains(&(col as isize + a.column_delta())))
                .collect();
            let a = allowed[rng.below(allowed.len() as u64) as usize];
            col = (col as isize + a.column_delta()) as usize;
            actions.push(a);
        }
        Self {
            background,
            shape,
            color,
            prop,
            row,
            start_col,
            actions,
        }
    }

    /// Character column shown in frame `i` (after that frame's action).
    pub fn column_at(&self, frame: usize) -> usize {
        self.actions[..=frame]
            .iter()
            .fold(self.start_col as isize, |c, a| c + a.column_delta()) as usize
    }
}

fn check_size(size: usize) -> Result<()> {
    if SIZES.contains(&size) {
        Ok(())
    } else {
        Err(Error::Config(format!("image size must be one of {SIZES:?}, got {size}")))
    }
}

/// `Some(true)` for body pixels, `Some(false)` for hat pixels.
fn character_pixel(shape: Shape, c: i64, px: i64, py: i64) -> Option<bool> {
    let m = c / 8;
    let inside = match shape {
        Shape::Circle => (2 * px + 1 - c).pow(2) + (2 * py + 1 - c).pow(2) <= (c - 2 * m).pow(2),
        Shape::Triangle => {
            let h = c - 2 * m;
            py >= m && py < c - m && (2 * px + 1 - c).abs() * h <= (py - m + 1) * (c - 2 * m)
        }
        Shape::SquareWithHat => {
            if py >= m && py < c / 4 && px >= c / 4 && px < 3 * c / 4 {
                return Some(false);
            }
            if py >= c / 4 && py < 3 * c / 8 {
                return Some(false);
            }
            px >= m && px < c - m && py >= 3 * c / 8 && py < c - m
        }
    };
    inside.then_some(true)
}

fn prop_pixel(prop: Prop, c: i64, px: i64, py: i64) -> Option<[u8; 3]> {
    match prop {
        Prop::Ball => ((2 * px + 1 - c).pow(2) + (2 * py + 1 - 3 * c / 2).pow(2) <= (c / 2).pow(2)).then_some(BALL),
        Prop::Tree => {
            if (2 * px + 1 - c).pow(2) + (2 * py + 1 - 3 * c / 4).pow(2) <= (3 * c / 4).pow(2) {
                Some(LEAVES)
            } else if px >= 3 * c / 8 && px < 5 * c / 8 && py >= c / 2 {
                Some(TRUNK)
            } else {
                None
            }
        }
        Prop::Box => (px >= c / 4 && px < 3 * c / 4 && py >= c / 2).then_some(BOX),
    }
}

/// Hard-edged integer rasterization of frame `frame`.
pub fn render_scene(spec: &SceneSpec, frame: usize, size: usize) -> Result<Image> {
    check_size(size)?;
    if frame >= spec.actions.len() || spec.background >= 4 {
        return Err(Error::Contract(format!("frame {frame} outside a {}-frame scene", spec.actions.len())));
    }
    let c = (size / GRID) as i64;
    let horizon = size / 2;
    let line = (size / 32).max(1);
    let bg = spec.background;
    let mut img = Image::filled(size, SKY[bg]);
    for y in horizon..size {
        let rgb = if y < horizon + line { HORIZON[bg] } else { GROUND[bg] };
        for x in 0..size {
            img.set_pixel(x, y, rgb);
        }
    }
    let mut paint = |x0: i64, y0: i64, pixel: &dyn Fn(i64, i64) -> Option<[u8; 3]>| {
        for py in 0..c {
            for px in 0..c {
                let (x, y) = (x0 + px, y0 + py);
                if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
                    continue;
                }
                if let Some(rgb) = pixel(px, py) {
                    img.set_pixel(x as usize, y as usize, rgb);
                }
            }
        }
    };
    if let Some((prop, row, col)) = spec.prop {
        paint(col as i64 * c, row as i64 * c, &|px, py| prop_pixel(prop, c, px, py));
    }
    let lift = if spec.actions[frame] == Action::Jump { c / 2 } else { 0 };
    let body = spec.color.rgb();
    paint(spec.column_at(frame) as i64 * c, spec.row as i64 * c - lift, &|px, py| {
        character_pixel(spec.shape, c, px, py).map(|is_body| if is_body { body } else { HAT })
    });
    Ok(img)
}

/// Words of the caption of frame `frame`.
pub fn caption_words(spec: &SceneSpec, frame: usize) -> Vec<&'static str> {
    let mut w = vec!["the", spec.color.word()];
    w.extend(spec.shape.words());
    w.extend(spec.actions[frame].words());
    if let Some((prop, _, _)) = spec.prop {
        w.extend(["near", "the", prop.word()]);
    }
    w.extend(["on", "the", BACKGROUND_WORDS[spec.background]]);
    w
}

pub fn caption(spec: &SceneSpec, frame: usize, vocab: &Vocabulary) -> Result<TokenSeq> {
    TokenSeq::from_words(vocab, &caption_words(spec, frame))
}

/// Attributes recovered from a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionParts {
    pub color: Color,
    pub shape: Shape,
    pub action: Action,
    pub prop: Option<Prop>,
    pub background: usize,
}

/// Inverse of [`caption_words`].
pub fn parse_caption(words: &[&str]) -> Result<CaptionParts> {
    let bad = |msg: &str| Error::Contract(format!("caption {:?}: {msg}", words.join(" ")));
    let mut rest = words;
    let mut eat = |expected: &[&str]| -> bool {
        if rest.starts_with(expected) {
            rest = &rest[expected.len()..];
            true
        } else {
            false
        }
    };
    if !eat(&["the"]) {
        return Err(bad("must start with 'the'"));
    }
    let color = COLORS.into_iter().find(|c| eat(&[c.word()])).ok_or_else(|| bad("unknown color"))?;
    let shape = SHAPES.into_iter().find(|s| eat(s.words())).ok_or_else(|| bad("unknown shape"))?;
    let action = ACTIONS.into_iter().find(|a| eat(a.words())).ok_or_else(|| bad("unknown action"))?;
    let prop = if eat(&["near", "the"]) {
        Some(PROPS.into_iter().find(|p| eat(&[p.word()])).ok_or_else(|| bad("unknown prop"))?)
    } else {
        None
    };
    if !eat(&["on", "the"]) {
        return Err(bad("missing background phrase"));
    }
    let background = (0..4).find(|&b| eat(&[BACKGROUND_WORDS[b]])).ok_or_else(|| bad("unknown background"))?;
    if !rest.is_empty() {
        return Err(bad("trailing words"));
    }
    Ok(CaptionParts {
        color,
        shape,
        action,
        prop,
        background,
    })
}

/// Every word the grammar can produce, in vocabulary order.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words = vec!["the"];
    words.extend(COLORS.iter().map(|c| c.word()));
    words.extend(SHAPES.iter().flat_map(|s| s.words().iter().copied()));
    words.extend(ACTIONS.iter().flat_map(|a| a.words().iter().copied()));
    words.push("near");
    words.extend(PROPS.iter().map(|p| p.word()));
    words.push("on");
    words.extend(BACKGROUND_WORDS);
    let mut seen = Vec::new();
    for w in words {
        if !seen.contains(&w) {
            seen.push(w);
        }
    }
    seen
}

/// Two reserved ids plus 25 grammar words.
pub const VOCAB_SIZE: usize = 27;

pub fn story_vocabulary() -> Vocabulary {
    Vocabulary::from_words(grammar_words())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub frames: usize,
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: DEFAULT_FRAMES,
            size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Story {
    pub id: u64,
    pub sentences: Vec<TokenSeq>,
    pub frames: Vec<Image>,
    /// Present for generated stories; not stored on disk.
    pub scene: Option<SceneSpec>,
}

pub fn generate_story_sample(seed: u64, config: &SynthConfig, vocab: &Vocabulary) -> Result<Story> {
    check_size(config.size)?;
    if config.frames == 0 {
        return Err(Error::Config("stories need at least one frame".into()));
    }
    let scene = SceneSpec::from_seed(seed, config.frames);
    let frames = (0..config.frames).map(|i| render_scene(&scene, i, config.size)).collect::<Result<_>>()?;
    let sentences = (0..config.frames).map(|i| caption(&scene, i, vocab)).collect::<Result<_>>()?;
    Ok(Story {
        id: seed,
        sentences,
        frames,
        scene: Some(scene),
    })
}

/// Generates one story per seed in parallel; order follows the seeds.
pub fn generate_stories(seeds: Range<u64>, config: &SynthConfig, vocab: &Vocabulary) -> Result<Vec<Story>> {
    seeds
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|s| generate_story_sample(s, config, vocab))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub story_count: usize,
    pub frames: usize,
    pub image_size: usize,
    pub vocab_sha256: String,
    pub seed_range: [u64; 2],
    pub story_ids: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub stories: Vec<Story>,
}

impl Dataset {
    /// Generates the stories of `seeds`.
    pub fn generate(seeds: Range<u64>, config: &SynthConfig) -> Result<Self> {
        let vocab = story_vocabulary();
        let stories = generate_stories(seeds.clone(), config, &vocab)?;
        Ok(Self {
            manifest: Manifest {
                story_count: stories.len(),
                frames: config.frames,
                image_size: config.size,
                vocab_sha256: vocab.hash_hex(),
                seed_range: [seeds.start, seeds.end],
                story_ids: stories.iter().map(|s| s.id).collect(),
            },
            vocab,
            stories,
        })
    }

    /// All `(sentence, frame)` pairs in story order.
    pub fn pairs(&self) -> Vec<(TokenSeq, Image)> {
        self.stories
            .iter()
            .flat_map(|s| s.sentences.iter().cloned().zip(s.frames.iter().cloned()))
            .collect()
    }
}

fn story_dir(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join(format!("story_{id}"))
}

pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&data.manifest)?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    data.vocab.save(&dir.join("vocab.txt"))?;
    data.stories.par_iter().try_for_each(|story| -> Result<()> {
        let sd = story_dir(dir, story.id);
        fs::create_dir_all(&sd)?;
        for (i, f) in story.frames.iter().enumerate() {
            f.write_ppm(&sd.join(format!("frame_{i}.ppm")))?;
        }
        let mut text = String::new();
        for s in &story.sentences {
            text.push_str(&data.vocab.decode(s.ids())?.join(" "));
            text.push('\n');
        }
        fs::write(sd.join("captions.txt"), text)?;
        Ok(())
    })
}

fn parse_error(file: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn read_captions(path: &Path, vocab: &Vocabulary) -> Result<Vec<TokenSeq>> {
    let text = fs::read(path)?;
    let text = String::from_utf8(text).map_err(|e| parse_error(path, e.utf8_error().valid_up_to(), "invalid UTF-8"))?;
    let mut offset = 0;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            return Err(parse_error(path, offset, "empty caption line"));
        }
        if let Some(w) = words.iter().find(|w| vocab.id(w).is_none()) {
            let at = offset + line.find(w).unwrap_or(0);
            return Err(parse_error(path, at, format!("word {w:?} not in vocabulary")));
        }
        out.push(TokenSeq::from_words(vocab, &words)?);
        offset += line.len();
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        let offset = text.lines().take(e.line().saturating_sub(1)).map(|l| l.len() + 1).sum::<usize>()
            + e.column().saturating_sub(1);
        parse_error(&manifest_path, offset, e.to_string())
    })?;
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    if vocab.hash_hex() != manifest.vocab_sha256 {
        return Err(Error::Vocabulary("vocab.txt does not match the manifest hash".into()));
    }
    if manifest.story_ids.len() != manifest.story_count {
        return Err(parse_error(&manifest_path, 0, "story_count disagrees with story_ids"));
    }
    let on_disk = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("story_") && e.path().is_dir())
        .count();
    if on_disk != manifest.story_count {
        return Err(Error::Contract(format!(
            "manifest lists {} stories but {on_disk} story directories exist",
            manifest.story_count
        )));
    }
    let stories = manifest
        .story_ids
        .par_iter()
        .map(|&id| -> Result<Story> {
            let sd = story_dir(dir, id);
            let sentences = read_captions(&sd.join("captions.txt"), &vocab)?;
            if sentences.len() != manifest.frames {
                return Err(Error::Contract(format!(
                    "story {id} has {} captions, expected {}",
                    sentences.len(),
                    manifest.frames
                )));
            }
            let frames = (0..manifest.frames)
                .map(|i| {
                    let img = Image::read_ppm(&sd.join(format!("frame_{i}.ppm")))?;
                    if img.size() != manifest.image_size {
                        return Err(Error::Contract(format!("story {id} frame {i} has size {}", img.size())));
                    }
                    Ok(img)
                })
                .collect::<Result<_>>()?;
            Ok(Story {
                id,
                sentences,
                frames,
                scene: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        manifest,
        vocab,
        stories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn plain_scene(shape: Shape, color: Color, col: usize, actions: Vec<Action>) -> SceneSpec {
        SceneSpec {
            background: 0,
            shape,
            color,
            prop: None,
            row: 2,
            start_col: col,
            actions,
        }
    }

    #[test]
    fn same_seed_same_story() {
        let v = story_vocabulary();
        let cfg = SynthConfig::default();
        assert_eq!(generate_story_sample(0, &cfg, &v).unwrap(), generate_story_sample(0, &cfg, &v).unwrap());
        assert_ne!(generate_story_sample(0, &cfg, &v).unwrap(), generate_story_sample(1, &cfg, &v).unwrap());
    }

    #[test]
    fn coverage_over_a_thousand_seeds() {
        let mut bgs = HashSet::new();
        let mut shapes = HashSet::new();
        let mut colors = HashSet::new();
        for seed in 0..1000 {
            let s = SceneSpec::from_seed(seed, 5);
            bgs.insert(s.background);
            shapes.insert(s.shape);
            colors.insert(s.color);
            for f in 0..5 {
                assert!(s.column_at(f) < GRID);
            }
        }
        assert_eq!((bgs.len(), shapes.len(), colors.len()), (4, 3, 4));
    }

    #[test]
    fn centered_red_circle() {
        let spec = SceneSpec {
            row: 1,
            ..plain_scene(Shape::Circle, Color::Red, 1, vec![Action::Stand])
        };
        let img = render_scene(&spec, 0, 32).unwrap();
        // cell (row 1, col 1) spans pixels 8..16
        assert_eq!(img.pixel_bytes(12, 12), Color::Red.rgb());
        assert_eq!(img.pixel_bytes(0, 0), SKY[0]);
        assert_eq!(img.pixel_bytes(31, 31), GROUND[0]);
        assert!(render_scene(&spec, 0, 24).is_err());
    }

    #[test]
    fn move_right_advances_one_column() {
        let spec = plain_scene(Shape::Triangle, Color::Blue, 0, vec![Action::Stand, Action::MoveRight]);
        assert_eq!(spec.column_at(0), 0);
        assert_eq!(spec.column_at(1), 1);
    }

    #[test]
    fn rendering_is_translation_exact() {
        for size in SIZES {
            for shape in SHAPES {
                let c = size / GRID;
                let a = render_scene(&plain_scene(shape, Color::Yellow, 1, vec![Action::Stand]), 0, size).unwrap();
                let b = render_scene(&plain_scene(shape, Color::Yellow, 2, vec![Action::Stand]), 0, size).unwrap();
                for y in 0..size {
                    for x in c..2 * c {
                        assert_eq!(a.pixel_bytes(x, y), b.pixel_bytes(x + c, y));
                    }
                }
            }
        }
    }

    #[test]
    fn jump_lifts_by_half_a_cell() {
        let spec = plain_scene(Shape::Circle, Color::Green, 1, vec![Action::Stand, Action::Jump]);
        let (a, b) = (render_scene(&spec, 0, 32).unwrap(), render_scene(&spec, 1, 32).unwrap());
        assert_eq!(a.pixel_bytes(12, 20), b.pixel_bytes(12, 16));
        assert_ne!(a, b);
    }

    #[test]
    fn example_caption() {
        let spec = SceneSpec {
            prop: Some((Prop::Ball, 0, 0)),
            ..plain_scene(Shape::Circle, Color::Red, 1, vec![Action::Jump])
        };
        assert_eq!(caption_words(&spec, 0).join(" "), "the red circle jumps near the ball on the grass");
    }

    #[test]
    fn vocabulary_size_matches_grammar() {
        assert_eq!(story_vocabulary().len(), VOCAB_SIZE);
        assert!(VOCAB_SIZE <= 40);
    }

    #[test]
    fn captions_parse_back() {
        for seed in 0..300 {
            let s = SceneSpec::from_seed(seed, 5);
            for f in 0..5 {
                let p = parse_caption(&caption_words(&s, f)).unwrap();
                assert_eq!(
                    p,
                    CaptionParts {
                        color: s.color,
                        shape: s.shape,
                        action: s.actions[f],
                        prop: s.prop.map(|x| x.0),
                        background: s.background,
                    }
                );
            }
        }
        assert!(parse_caption(&["the", "red", "circle"]).is_err());
    }

    #[test]
    fn longest_caption_fits_encoder() {
        let spec = SceneSpec {
            prop: Some((Prop::Tree, 0, 0)),
            ..plain_scene(Shape::SquareWithHat, Color::Red, 1, vec![Action::MoveLeft])
        };
        assert_eq!(caption_words(&spec, 0).len(), 14);
    }
}
