//! Synthetic text-video-prediction data: one colored shape moving over a
//! mid-gray background, with a templated motion instruction. Every sample is
//! a pure function of (dataset seed, index).

use crate::container::{entry_from_tensor, tensor_from_entry, Container};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Xoshiro256};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use std::path::Path;

/// Motion label; also the last word of the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::Left => "LEFT",
            Direction::Right => "RIGHT",
            Direction::Up => "UP",
            Direction::Down => "DOWN",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "LEFT" => Ok(Direction::Left),
            "RIGHT" => Ok(Direction::Right),
            "UP" => Ok(Direction::Up),
            "DOWN" => Ok(Direction::Down),
            other => Err(Error::Vocab(format!("unknown direction label '{other}'"))),
        }
    }

    /// (dx, dy) in pixels per frame unit; y grows downward.
    pub fn unit(self) -> (f64, f64) {
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    /// RGB in [-1, 1] pixel space.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
        }
    }
}

/// Background level in [-1, 1]: exact mid-gray.
pub const BACKGROUND: f64 = 0.0;

/// Shape half-extent in pixels (circle radius / square half-width).
const SHAPE_HALF: f64 = 3.5;
/// Clearance kept between the shape boundary and the frame border.
const EDGE_MARGIN: f64 = 0.5;
/// Supersampling grid per pixel axis for anti-aliasing.
const AA: usize = 4;

/// Dataset geometry; desk-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
    /// Number of conditioning (initial) frames k.
    pub init_frames: usize,
    /// Text token length the tokenizer pads to.
    pub text_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            frames: 8,
            init_frames: 2,
            text_len: 8,
        }
    }
}

/// Sample metadata kept for manifests and debugging.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub shape: ShapeKind,
    pub color: Color,
    pub start: (f64, f64),
    pub velocity: f64,
    pub seed: u64,
}

/// One training/eval record.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample<T: Scalar> {
    /// [frames, channels, height, width] in [-1, 1].
    pub video: Tensor<T>,
    pub prompt: String,
    pub prompt_ids: Vec<u32>,
    pub init_frames: usize,
    pub label: Direction,
    pub meta: SampleMeta,
}

impl<T: Scalar> VideoSample<T> {
    /// The first k frames, [k, channels, height, width].
    pub fn initial_frames(&self) -> Tensor<T> {
        let sh = self.video.shape();
        let (f, per) = (sh[0], sh[1] * sh[2] * sh[3]);
        let k = self.init_frames.min(f);
        Tensor::new(
            vec![k, sh[1], sh[2], sh[3]],
            self.video.data()[..k * per].to_vec(),
        )
        .expect("prefix slice")
    }
}

// ---- vocabulary ------------------------------------------------------------

/// Closed word list; PAD is always id 0 and EOS id 1.
const WORDS: [&str; 24] = [
    "<pad>", "<eos>", "move", "the", "a", "red", "green", "blue", "square", "circle", "left",
    "right", "up", "down", "push", "pull", "slide", "shift", "toward", "away", "fast", "slow",
    "object", "ball",
];

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;

/// Fixed bijective word <-> id map.
#[derive(Debug, Clone)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn size() -> usize {
        WORDS.len()
    }

    pub fn id_of(word: &str) -> Result<u32> {
        WORDS
            .iter()
            .position(|&w| w == word)
            .map(|i| i as u32)
            .ok_or_else(|| Error::Vocab(format!("word '{word}' not in vocabulary")))
    }

    pub fn word_of(id: u32) -> Result<&'static str> {
        WORDS
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("token id {id} out of range")))
    }
}

/// Splits on whitespace, appends EOS, pads with PAD to `text_len`.
/// Errors on unknown words and on prompts that cannot fit.
pub fn tokenize(prompt: &str, text_len: usize) -> Result<Vec<u32>> {
    let mut ids = Vec::with_capacity(text_len);
    for word in prompt.split_whitespace() {
        ids.push(Vocabulary::id_of(word)?);
    }
    ids.push(EOS_ID);
    if ids.len() > text_len {
        return Err(Error::Vocab(format!(
            "prompt needs {} tokens but text length is {text_len}",
            ids.len()
        )));
    }
    ids.resize(text_len, PAD_ID);
    Ok(ids)
}

/// Inverse of `tokenize` on generated prompts: words up to EOS, space-joined.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        if id == EOS_ID || id == PAD_ID {
            break;
        }
        words.push(Vocabulary::word_of(id)?);
    }
    Ok(words.join(" "))
}

// ---- generation ------------------------------------------------------------

fn feasible_range(extent: usize, travel_neg: f64, travel_pos: f64) -> Result<(f64, f64)> {
    let lo = SHAPE_HALF + EDGE_MARGIN + travel_neg;
    let hi = (extent - 1) as f64 - SHAPE_HALF - EDGE_MARGIN - travel_pos;
    if hi < lo {
        return Err(Error::Config(format!(
            "frame extent {extent} too small for in-frame motion (need start in [{lo}, {hi}])"
        )));
    }
    Ok((lo, hi))
}

/// Renders one frame: anti-aliased shape at `center` over the constant
/// background. Coverage comes from an AA x AA subpixel grid, so pixels away
/// from the shape are exactly BACKGROUND.
fn render_frame(
    cfg: &DataConfig,
    kind: ShapeKind,
    color: [f64; 3],
    center: (f64, f64),
    out: &mut [f64],
) {
    let (w, h) = (cfg.width, cfg.height);
    let plane = w * h;
    let (cx, cy) = center;
    let reach = SHAPE_HALF + 1.0;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(w - 1);
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil() as usize).min(h - 1);
    let inv = 1.0 / AA as f64;
    for py in y0..=y1 {
        for px in x0..=x1 {
            let mut hits = 0usize;
            for sy in 0..AA {
                for sx in 0..AA {
                    let x = px as f64 + (sx as f64 + 0.5) * inv - 0.5;
                    let y = py as f64 + (sy as f64 + 0.5) * inv - 0.5;
                    let (dx, dy) = (x - cx, y - cy);
                    let inside = match kind {
                        ShapeKind::Circle => dx * dx + dy * dy <= SHAPE_HALF * SHAPE_HALF,
                        ShapeKind::Square => dx.abs() <= SHAPE_HALF && dy.abs() <= SHAPE_HALF,
                    };
                    if inside {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let coverage = hits as f64 / (AA * AA) as f64;
            for c in 0..cfg.channels {
                let tint = color[c.min(2)];
                out[c * plane + py * w + px] = BACKGROUND + coverage * (tint - BACKGROUND);
            }
        }
    }
}

/// Deterministic sample construction from (dataset seed, index).
pub fn gen_sample<T: Scalar>(
    dataset_seed: u64,
    index: u64,
    cfg: &DataConfig,
) -> Result<VideoSample<T>> {
    let sample_seed = derive_seed(dataset_seed, index);
    let mut rng = Xoshiro256::seed_from_u64(sample_seed);

    let kind = if rng.random_range(0..2u32) == 0 {
        ShapeKind::Square
    } else {
        ShapeKind::Circle
    };
    let color = match rng.random_range(0..3u32) {
        0 => Color::Red,
        1 => Color::Green,
        _ => Color::Blue,
    };
    let direction = Direction::ALL[rng.random_range(0..4u32) as usize];
    let velocity = rng.random_range(2..=3u32) as f64;

    let travel = velocity * (cfg.frames - 1) as f64;
    let (ux, uy) = direction.unit();
    let (x_lo, x_hi) = feasible_range(
        cfg.width,
        if ux < 0.0 { travel } else { 0.0 },
        if ux > 0.0 { travel } else { 0.0 },
    )?;
    let (y_lo, y_hi) = feasible_range(
        cfg.height,
        if uy < 0.0 { travel } else { 0.0 },
        if uy > 0.0 { travel } else { 0.0 },
    )?;
    let start_x = rng.random_range(x_lo..=x_hi);
    let start_y = rng.random_range(y_lo..=y_hi);

    let plane = cfg.channels * cfg.height * cfg.width;
    let mut pixels = vec![BACKGROUND; cfg.frames * plane];
    for frame in 0..cfg.frames {
        let cx = start_x + ux * velocity * frame as f64;
        let cy = start_y + uy * velocity * frame as f64;
        render_frame(
            cfg,
            kind,
            color.rgb(),
            (cx, cy),
            &mut pixels[frame * plane..(frame + 1) * plane],
        );
    }
    let video = Tensor::from_f64_slice(
        &[cfg.frames, cfg.channels, cfg.height, cfg.width],
        &pixels,
    )?;

    let prompt = format!(
        "move the {} {} {}",
        color.word(),
        kind.word(),
        direction.word()
    );
    let prompt_ids = tokenize(&prompt, cfg.text_len)?;
    Ok(VideoSample {
        video,
        prompt,
        prompt_ids,
        init_frames: cfg.init_frames,
        label: direction,
        meta: SampleMeta {
            shape: kind,
            color,
            start: (start_x, start_y),
            velocity,
            seed: sample_seed,
        },
    })
}

/// True centroid of the rendered object in a frame, from pixel mass.
/// Used by construction tests; the evaluation oracle has its own thresholded
/// version.
pub fn frame_centroid<T: Scalar>(video: &Tensor<T>, frame: usize) -> (f64, f64) {
    let sh = video.shape();
    let (c, h, w) = (sh[1], sh[2], sh[3]);
    let plane = h * w;
    let base = frame * c * plane;
    let data = video.data();
    let (mut mx, mut my, mut mass) = (0.0f64, 0.0f64, 0.0f64);
    for py in 0..h {
        for px in 0..w {
            let mut weight = 0.0;
            for ch in 0..c {
                weight += (data[base + ch * plane + py * w + px].as_f64() - BACKGROUND).abs();
            }
            mx += weight * px as f64;
            my += weight * py as f64;
            mass += weight;
        }
    }
    (mx / mass, my / mass)
}

// ---- export / import -------------------------------------------------------

const DATA_FILE: &str = "data.ntc";
const MANIFEST_FILE: &str = "manifest.tsv";

fn config_blob(cfg: &DataConfig, seed: u64, n: u64) -> String {
    format!(
        "height = {}\nwidth = {}\nchannels = {}\nframes = {}\ninit_frames = {}\ntext_len = {}\nseed = {}\nn = {}\n",
        cfg.height, cfg.width, cfg.channels, cfg.frames, cfg.init_frames, cfg.text_len, seed, n
    )
}

fn parse_config_blob(blob: &str) -> Result<(DataConfig, u64, u64)> {
    let mut cfg = DataConfig::default();
    let (mut seed, mut n) = (0u64, 0u64);
    for line in blob.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Container(format!("bad config line '{line}'")))?;
        let value = value.trim();
        let parse = |v: &str| -> Result<u64> {
            v.parse()
                .map_err(|_| Error::Container(format!("bad number '{v}' in dataset config")))
        };
        match key.trim() {
            "height" => cfg.height = parse(value)? as usize,
            "width" => cfg.width = parse(value)? as usize,
            "channels" => cfg.channels = parse(value)? as usize,
            "frames" => cfg.frames = parse(value)? as usize,
            "init_frames" => cfg.init_frames = parse(value)? as usize,
            "text_len" => cfg.text_len = parse(value)? as usize,
            "seed" => seed = parse(value)?,
            "n" => n = parse(value)?,
            other => {
                return Err(Error::Container(format!(
                    "unknown dataset config key '{other}'"
                )))
            }
        }
    }
    Ok((cfg, seed, n))
}

/// Writes n samples into `dir`: a tensor container with the videos plus a
/// tab-separated manifest (index, prompt, label, sample seed).
pub fn export_split<T: Scalar>(seed: u64, n: u64, cfg: &DataConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut container = Container::new(0, [seed, n, 0, 0], config_blob(cfg, seed, n));
    let mut manifest = String::new();
    for index in 0..n {
        let sample: VideoSample<T> = gen_sample(seed, index, cfg)?;
        container.push(format!("video.{index:06}"), entry_from_tensor(&sample.video));
        manifest.push_str(&format!(
            "{index}\t{}\t{}\t{}\n",
            sample.prompt,
            sample.label.label(),
            sample.meta.seed
        ));
    }
    container.save(&dir.join(DATA_FILE))?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Reads a split written by `export_split`. Videos come back bit-exact;
/// prompts and labels come from the manifest.
pub fn import_split<T: Scalar>(dir: &Path) -> Result<(Vec<VideoSample<T>>, DataConfig, u64)> {
    let container = Container::load(&dir.join(DATA_FILE))?;
    let (cfg, seed, n) = parse_config_blob(&container.config)?;
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut samples = Vec::new();
    for line in manifest.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Container(format!(
                "manifest line has {} fields, expected 4: '{line}'",
                fields.len()
            )));
        }
        let index: u64 = fields[0]
            .parse()
            .map_err(|_| Error::Container(format!("bad manifest index '{}'", fields[0])))?;
        let prompt = fields[1].to_string();
        let label = Direction::from_label(fields[2])?;
        let sample_seed: u64 = fields[3]
            .parse()
            .map_err(|_| Error::Container(format!("bad sample seed '{}'", fields[3])))?;
        let video = tensor_from_entry(container.get(&format!("video.{index:06}"))?)?;
        let prompt_ids = tokenize(&prompt, cfg.text_len)?;
        // regenerate metadata deterministically for full fidelity
        let regen: VideoSample<T> = gen_sample(seed, index, &cfg)?;
        if regen.meta.seed != sample_seed {
            return Err(Error::Container(format!(
                "sample {index}: manifest seed {sample_seed} does not match dataset seed"
            )));
        }
        samples.push(VideoSample {
            video,
            prompt,
            prompt_ids,
            init_frames: cfg.init_frames,
            label,
            meta: regen.meta,
        });
    }
    if samples.len() as u64 != n {
        return Err(Error::Container(format!(
            "manifest has {} lines, container header says {n}",
            samples.len()
        )));
    }
    Ok((samples, cfg, seed))
}
