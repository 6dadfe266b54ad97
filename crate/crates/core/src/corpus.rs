//! Synthetic document corpora: generation, geometry, and on-disk format.
//!
//! Each page is a grayscale raster holding a handful of non-overlapping
//! regions. A region's type decides both its texture and the distribution
//! its tokens are drawn from, so the visual and textual content of a region
//! are statistically aligned:
//!
//! | type      | texture                    |
//! |-----------|----------------------------|
//! | title     | thick dark bar             |
//! | paragraph | horizontal stripes         |
//! | table     | checkerboard               |
//! | figure    | left-to-right gradient     |
//!
//! A corpus directory holds `manifest.json`, one `doc_<k>.json` per page and
//! one binary PGM (`P5`, maxval 255) image per page.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::seeding;

pub const FORMAT_VERSION: u32 = 1;

/// Rejection-sampling attempts per region before giving up on it.
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionType {
    Title,
    Paragraph,
    Table,
    Figure,
}

impl RegionType {
    pub const ALL: [RegionType; 4] = [
        RegionType::Title,
        RegionType::Paragraph,
        RegionType::Table,
        RegionType::Figure,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for RegionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionType::Title => "title",
            RegionType::Paragraph => "paragraph",
            RegionType::Table => "table",
            RegionType::Figure => "figure",
        })
    }
}

/// Integer pixel box, origin top-left, right/bottom edges exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_lt: u32,
    pub y_lt: u32,
    pub x_rb: u32,
    pub y_rb: u32,
}

impl BoundingBox {
    pub fn new(x_lt: u32, y_lt: u32, x_rb: u32, y_rb: u32) -> Self {
        Self {
            x_lt,
            y_lt,
            x_rb,
            y_rb,
        }
    }

    pub fn full_page(width: u32, height: u32) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn width(&self) -> u32 {
        self.x_rb.saturating_sub(self.x_lt)
    }

    pub fn height(&self) -> u32 {
        self.y_rb.saturating_sub(self.y_lt)
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.x_lt < other.x_rb
            && other.x_lt < self.x_rb
            && self.y_lt < other.y_rb
            && other.y_lt < self.y_rb
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x_lt < self.x_rb && self.y_lt < self.y_rb && self.x_rb <= width && self.y_rb <= height
    }
}

/// The 6-d layout vector `(x_lt/W, y_lt/H, x_rb/W, y_rb/H, w/W, h/H)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedBox(pub [f64; 6]);

impl NormalizedBox {
    pub const FULL_PAGE: NormalizedBox = NormalizedBox([0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
}

pub fn normalize_box(b: &BoundingBox, width: u32, height: u32) -> Result<NormalizedBox> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("page dimensions must be positive".into()));
    }
    if b.x_rb <= b.x_lt || b.y_rb <= b.y_lt {
        return Err(Error::InvalidInput(format!("degenerate box {b:?}")));
    }
    if !b.within(width, height) {
        return Err(Error::InvalidInput(format!(
            "box {b:?} outside {width}x{height} page"
        )));
    }
    let (w, h) = (f64::from(width), f64::from(height));
    Ok(NormalizedBox([
        f64::from(b.x_lt) / w,
        f64::from(b.y_lt) / h,
        f64::from(b.x_rb) / w,
        f64::from(b.y_rb) / h,
        f64::from(b.x_rb - b.x_lt) / w,
        f64::from(b.y_rb - b.y_lt) / h,
    ]))
}

/// Grayscale page, stored as 8-bit intensities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::InvalidInput(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, intensity: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![quantize_intensity(intensity); width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bytes(&self) -> &[u8] {
        &self.pixels
    }

    /// Intensity in `[0, 1]`.
    pub fn get(&self, x: u32, y: u32) -> f64 {
        f64::from(self.pixels[(y * self.width + x) as usize]) / 255.0
    }

    pub fn set(&mut self, x: u32, y: u32, intensity: f64) {
        self.pixels[(y * self.width + x) as usize] = quantize_intensity(intensity);
    }

    /// Row-major intensities in `[0, 1]`.
    pub fn intensities(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> std::result::Result<Self, String> {
        const BAD: &str = "bad image header";
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(BAD.into());
        }
        // Header: magic, width, height, maxval, each followed by whitespace.
        let mut fields = Vec::with_capacity(3);
        let mut pos = 2;
        while fields.len() < 3 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            let field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse::<u32>().ok())
                .ok_or(BAD)?;
            fields.push(field);
        }
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() || fields[2] != 255 {
            return Err(BAD.into());
        }
        let data = &bytes[pos + 1..];
        let (w, h) = (fields[0], fields[1]);
        if data.len() != w as usize * h as usize {
            return Err(format!(
                "image data holds {} bytes, header says {w}x{h}",
                data.len()
            ));
        }
        Ok(Self {
            width: w,
            height: h,
            pixels: data.to_vec(),
        })
    }
}

fn quantize_intensity(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub tokens: Vec<u32>,
    /// Ground truth for downstream evaluation only.
    pub type_label: RegionType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocumentRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub image: RasterImage,
    pub regions: Vec<Region>,
}

impl DocumentRecord {
    /// Document class: the most frequent region type, ties going to the
    /// lower type index.
    pub fn doc_class(&self) -> RegionType {
        let mut counts = [0usize; 4];
        for r in &self.regions {
            counts[r.type_label.index()] += 1;
        }
        let best = (0..4).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
        RegionType::ALL[best]
    }

    pub fn validate(&self, cfg: &CorpusConfig) -> std::result::Result<(), String> {
        if self.image.width() != self.width || self.image.height() != self.height {
            return Err(format!(
                "image is {}x{}, record says {}x{}",
                self.image.width(),
                self.image.height(),
                self.width,
                self.height
            ));
        }
        if self.regions.is_empty() {
            return Err("document has no regions".into());
        }
        for (i, r) in self.regions.iter().enumerate() {
            if !r.bbox.within(self.width, self.height) {
                return Err(format!("region {i} box {:?} is outside the page", r.bbox));
            }
            if r.tokens.is_empty() || r.tokens.len() > cfg.max_tokens {
                return Err(format!("region {i} has {} tokens", r.tokens.len()));
            }
            if let Some(t) = r.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(format!("region {i} token {t} outside the vocabulary"));
            }
            for (j, o) in self.regions.iter().enumerate().skip(i + 1) {
                if r.bbox.intersects(&o.bbox) {
                    return Err(format!("regions {i} and {j} overlap"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub docs: Vec<DocumentRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Checks that the configuration is internally consistent and that
/// `max_regions` boxes of minimum size can be packed onto one page.
pub fn validate_config(cfg: &CorpusConfig) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    if cfg.width == 0 || cfg.height == 0 {
        return bad("page dimensions must be positive".into());
    }
    if cfg.min_regions == 0 || cfg.min_regions > cfg.max_regions {
        return bad("need 1 <= min_regions <= max_regions".into());
    }
    if cfg.vocab_size < RegionType::ALL.len() {
        return bad("vocab_size must be at least the number of region types".into());
    }
    if cfg.min_tokens == 0 || cfg.min_tokens > cfg.max_tokens {
        return bad("need 1 <= min_tokens <= max_tokens".into());
    }
    if cfg.min_box_width == 0
        || cfg.min_box_height == 0
        || cfg.min_box_width > cfg.max_box_width
        || cfg.min_box_height > cfg.max_box_height
        || cfg.max_box_width > cfg.width
        || cfg.max_box_height > cfg.height
    {
        return bad("box size ranges must be non-empty and fit on the page".into());
    }
    if !(0.0..=1.0).contains(&cfg.home_mass) || !(0.0..=0.5).contains(&cfg.pixel_noise) {
        return bad("home_mass must lie in [0, 1] and pixel_noise in [0, 0.5]".into());
    }
    let per_row = (cfg.width / cfg.min_box_width) as usize;
    let per_col = (cfg.height / cfg.min_box_height) as usize;
    if per_row * per_col < cfg.max_regions {
        return bad(format!(
            "{} regions of at least {}x{} cannot be packed into {}x{}",
            cfg.max_regions, cfg.min_box_width, cfg.min_box_height, cfg.width, cfg.height
        ));
    }
    Ok(())
}

/// Probability of each vocabulary token for regions of type `t`.
///
/// The vocabulary is split into one contiguous block per type; a type puts
/// `home_mass` uniformly on its own block and the rest uniformly on the
/// whole vocabulary.
pub fn token_distribution(cfg: &CorpusConfig, t: RegionType) -> Vec<f64> {
    let v = cfg.vocab_size;
    let k = RegionType::ALL.len();
    let block = v / k;
    let lo = t.index() * block;
    let hi = if t.index() == k - 1 { v } else { lo + block };
    let background = (1.0 - cfg.home_mass) / v as f64;
    let home = cfg.home_mass / (hi - lo) as f64;
    (0..v)
        .map(|i| background + if (lo..hi).contains(&i) { home } else { 0.0 })
        .collect()
}

/// Generates `count` documents. Deterministic in `(seed, count, cfg)`;
/// document `k` depends only on `(seed, k, cfg)`.
pub fn generate_corpus(seed: u64, count: usize, cfg: &CorpusConfig) -> Result<Corpus> {
    generate_corpus_with_threads(seed, count, cfg, 1)
}

pub fn generate_corpus_with_threads(
    seed: u64,
    count: usize,
    cfg: &CorpusConfig,
    threads: usize,
) -> Result<Corpus> {
    if count == 0 {
        return Err(Error::InvalidInput("corpus count must be at least 1".into()));
    }
    validate_config(cfg)?;
    let dists: Vec<WeightedIndex<f64>> = RegionType::ALL
        .iter()
        .map(|&t| WeightedIndex::new(token_distribution(cfg, t)).expect("valid weights"))
        .collect();
    let make = |k: usize| generate_document(seed, k, cfg, &dists);
    let docs = if threads <= 1 {
        (0..count).map(make).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| (0..count).into_par_iter().map(make).collect())
    };
    Ok(Corpus {
        config: cfg.clone(),
        docs,
    })
}

fn generate_document(
    seed: u64,
    k: usize,
    cfg: &CorpusConfig,
    dists: &[WeightedIndex<f64>],
) -> DocumentRecord {
    let mut rng = seeding::stream(seed, seeding::TAG_CORPUS_DOC, k as u64);
    let target = rng.gen_range(cfg.min_regions..=cfg.max_regions);
    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(target);
    for _ in 0..target {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.gen_range(cfg.min_box_width..=cfg.max_box_width);
            let h = rng.gen_range(cfg.min_box_height..=cfg.max_box_height);
            let x = rng.gen_range(0..=cfg.width - w);
            let y = rng.gen_range(0..=cfg.height - h);
            let b = BoundingBox::new(x, y, x + w, y + h);
            if boxes.iter().all(|o| !o.intersects(&b)) {
                boxes.push(b);
                break;
            }
        }
    }
    // The first placement always succeeds, so every page has a region.
    let mut image = RasterImage::filled(cfg.width, cfg.height, 1.0);
    let regions = boxes
        .into_iter()
        .map(|bbox| {
            let t = RegionType::ALL[rng.gen_range(0..RegionType::ALL.len())];
            let n = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
            let tokens = (0..n).map(|_| dists[t.index()].sample(&mut rng) as u32).collect();
            draw_texture(&mut image, &bbox, t, cfg.pixel_noise, &mut rng);
            Region {
                bbox,
                tokens,
                type_label: t,
            }
        })
        .collect();
    DocumentRecord {
        id: format!("doc_{k}"),
        width: cfg.width,
        height: cfg.height,
        image,
        regions,
    }
}

const INK: f64 = 0.15;
const PAPER: f64 = 0.9;

fn draw_texture(img: &mut RasterImage, b: &BoundingBox, t: RegionType, noise: f64, rng: &mut impl Rng) {
    let (w, h) = (b.width(), b.height());
    for dy in 0..h {
        for dx in 0..w {
            let base = match t {
                RegionType::Title => {
                    let margin = h / 5;
                    if dy >= margin && dy < h - margin {
                        INK
                    } else {
                        PAPER
                    }
                }
                RegionType::Paragraph => {
                    if dy % 4 < 2 {
                        INK
                    } else {
                        PAPER
                    }
                }
                RegionType::Table => {
                    if (dx / 4 + dy / 4) % 2 == 0 {
                        INK
                    } else {
                        PAPER
                    }
                }
                RegionType::Figure => {
                    INK + (PAPER - INK) * f64::from(dx) / f64::from(w.max(2) - 1)
                }
            };
            let jitter = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
            img.set(b.x_lt + dx, b.y_lt + dy, base + jitter);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    count: usize,
    config: CorpusConfig,
}

#[derive(Serialize, Deserialize)]
struct RecordFile {
    id: String,
    width: u32,
    height: u32,
    image: String,
    regions: Vec<Region>,
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        count: corpus.docs.len(),
        config: corpus.config.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    for (k, doc) in corpus.docs.iter().enumerate() {
        let image = format!("doc_{k}.pgm");
        let record = RecordFile {
            id: doc.id.clone(),
            width: doc.width,
            height: doc.height,
            image: image.clone(),
            regions: doc.regions.clone(),
        };
        write_json(&dir.join(format!("doc_{k}.json")), &record)?;
        let path = dir.join(&image);
        fs::write(&path, doc.image.to_pgm()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            dir.join("manifest.json"),
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let mut docs = Vec::with_capacity(manifest.count);
    for k in 0..manifest.count {
        let rpath = dir.join(format!("doc_{k}.json"));
        let rec: RecordFile = read_json(&rpath)?;
        let ipath = dir.join(&rec.image);
        let bytes = fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let image = RasterImage::from_pgm(&bytes).map_err(|m| Error::format(&ipath, m))?;
        let doc = DocumentRecord {
            id: rec.id,
            width: rec.width,
            height: rec.height,
            image,
            regions: rec.regions,
        };
        doc.validate(&manifest.config)
            .map_err(|m| Error::format(&rpath, m))?;
        docs.push(doc);
    }
    Ok(Corpus {
        config: manifest.config,
        docs,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
