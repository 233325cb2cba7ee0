//! Image counterfactuals from attention maps.
//!
//! Stages run in a fixed order: pool, normalize, enhance, smooth, resize,
//! blend. High attention marks semantic content, which is faded toward a
//! fill colour so that only the spurious context stays visible.

use std::io::Cursor;
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, FileHeader};

pub const ATTENTION_SCHEMA: &str = "mmdebias/attention";

/// 1-indexed patch position `t = j + P·(i − 1)` for row `i`, column `j`.
pub fn patch_index(i: usize, j: usize, per_row: usize) -> Result<usize> {
    if i < 1 || j < 1 || j > per_row {
        return Err(Error::Index(format!(
            "patch (i={i}, j={j}) outside a grid with {per_row} patches per row"
        )));
    }
    Ok(j + per_row * (i - 1))
}

/// Row-major real grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h * w != data.len() {
            return Err(Error::Shape(format!(
                "{h}x{w} grid needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(h, w, rows.concat())
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Attention weights as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionValues {
    /// Layer-major, then head, then output token, then patch.
    Full { tokens: usize, weights: Vec<f64> },
    /// Already reduced to one value per patch.
    Pooled(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sample_id: String,
    pub patch_h: usize,
    pub patch_w: usize,
    pub layers: usize,
    pub heads: usize,
    pub values: AttentionValues,
}

impl AttentionRecord {
    pub fn pooled(sample_id: impl Into<String>, grid: &Grid) -> Self {
        Self {
            sample_id: sample_id.into(),
            patch_h: grid.h,
            patch_w: grid.w,
            layers: 1,
            heads: 1,
            values: AttentionValues::Pooled(grid.data.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let patches = self.patch_h * self.patch_w;
        if patches == 0 {
            return Err(Error::Shape(format!(
                "{}: empty patch grid",
                self.sample_id
            )));
        }
        let (expected, values) = match &self.values {
            AttentionValues::Full { tokens, weights } => {
                (self.layers * self.heads * tokens * patches, weights)
            }
            AttentionValues::Pooled(v) => (patches, v),
        };
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{}: expected {expected} attention weights, got {}",
                self.sample_id,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric(format!(
                "{}: attention weights must be finite and >= 0",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// How layers and heads are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Mean over layers, sum over heads and output tokens.
    #[default]
    MeanLayers,
    /// Mean over layers and heads, sum over output tokens.
    MeanLayersHeads,
}

/// Last three recorded layers.
pub fn default_layer_window(layers: usize) -> Range<usize> {
    layers.saturating_sub(3)..layers
}

pub fn pool_attention(
    rec: &AttentionRecord,
    window: Option<Range<usize>>,
    mode: PoolMode,
) -> Result<Grid> {
    rec.validate()?;
    let patches = rec.patch_h * rec.patch_w;
    let (tokens, weights) = match &rec.values {
        AttentionValues::Pooled(v) => return Grid::new(rec.patch_h, rec.patch_w, v.clone()),
        AttentionValues::Full { tokens, weights } => (*tokens, weights),
    };
    let window = window.unwrap_or_else(|| default_layer_window(rec.layers));
    if window.is_empty() {
        return Err(Error::Config("empty layer window".into()));
    }
    if window.end > rec.layers {
        return Err(Error::Config(format!(
            "layer window {window:?} exceeds {} recorded layers",
            rec.layers
        )));
    }
    let mut acc = vec![0.0; patches];
    for layer in window.clone() {
        for head in 0..rec.heads {
            for tok in 0..tokens {
                let base = ((layer * rec.heads + head) * tokens + tok) * patches;
                for (a, w) in acc.iter_mut().zip(&weights[base..base + patches]) {
                    *a += w;
                }
            }
        }
    }
    let mut div = window.len() as f64;
    if mode == PoolMode::MeanLayersHeads {
        div *= rec.heads.max(1) as f64;
    }
    acc.iter_mut().for_each(|a| *a /= div);
    Grid::new(rec.patch_h, rec.patch_w, acc)
}

/// Min-max scaling; a constant grid becomes all zeros.
pub fn normalize_mask(grid: &Grid) -> Result<Grid> {
    if grid.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite mask value".into()));
    }
    let lo = grid.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if grid.data.is_empty() || span <= 0.0 {
        vec![0.0; grid.data.len()]
    } else {
        grid.data.iter().map(|v| (v - lo) / span).collect()
    };
    Grid::new(grid.h, grid.w, data)
}

pub fn enhance_mask(grid: &Grid, factor: f64) -> Result<Grid> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Config(format!(
            "enhancement factor {factor} must be > 0"
        )));
    }
    let data = grid
        .data
        .iter()
        .map(|v| (v * factor).clamp(0.0, 1.0))
        .collect();
    Grid::new(grid.h, grid.w, data)
}

/// Square, normalized convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {size} must be odd")));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("kernel sigma {sigma} must be > 0")));
        }
        let r = (size / 2) as f64;
        let mut weights = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 - r, x as f64 - r);
                weights.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { size, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn center(&self) -> f64 {
        self.weights[self.weights.len() / 2]
    }
}

/// Half-sample symmetric reflection (edge value repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    j as usize
}

/// Convolution with reflected borders. The kernel radius may not exceed
/// either grid dimension.
pub fn smooth_mask(grid: &Grid, kernel: &Kernel) -> Result<Grid> {
    if grid.data.is_empty() {
        return Err(Error::Shape("cannot smooth an empty grid".into()));
    }
    let r = kernel.size / 2;
    if r > grid.h || r > grid.w {
        return Err(Error::Config(format!(
            "{0}x{0} kernel is larger than the {1}x{2} grid",
            kernel.size, grid.h, grid.w
        )));
    }
    let r = r as isize;
    let mut out = vec![0.0; grid.data.len()];
    for y in 0..grid.h {
        for x in 0..grid.w {
            let mut acc = 0.0;
            for ky in -r..=r {
                let sy = reflect(y as isize + ky, grid.h);
                for kx in -r..=r {
                    let sx = reflect(x as isize + kx, grid.w);
                    let kw = kernel.weights[((ky + r) as usize) * kernel.size + (kx + r) as usize];
                    acc += kw * grid.at(sy, sx);
                }
            }
            out[y * grid.w + x] = acc.clamp(0.0, 1.0);
        }
    }
    Grid::new(grid.h, grid.w, out)
}

fn sample_axis(dst: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len <= 1 || in_len <= 1 {
        return (0, 0, 0.0);
    }
    let pos = dst as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let lo = (pos.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resize with aligned corners.
pub fn resize_mask(grid: &Grid, h: usize, w: usize) -> Result<Grid> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("cannot resize to {h}x{w}")));
    }
    if grid.data.is_empty() {
        return Err(Error::Shape("cannot resize an empty grid".into()));
    }
    if h == grid.h && w == grid.w {
        return Ok(grid.clone());
    }
    let cols: Vec<_> = (0..w).map(|x| sample_axis(x, w, grid.w)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = sample_axis(y, h, grid.h);
        for &(x0, x1, fx) in &cols {
            let top = grid.at(y0, x0) * (1.0 - fx) + grid.at(y0, x1) * fx;
            let bottom = grid.at(y1, x0) * (1.0 - fx) + grid.at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    Grid::new(h, w, out)
}

/// Full-resolution occlusion weights in [0,1], tagged with the parameters
/// that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaMask {
    pub grid: Grid,
    pub provenance: String,
}

impl AlphaMask {
    pub fn new(grid: Grid, provenance: impl Into<String>) -> Result<Self> {
        if !grid.in_unit_range() {
            return Err(Error::Domain("alpha mask values must lie in [0,1]".into()));
        }
        Ok(Self {
            grid,
            provenance: provenance.into(),
        })
    }
}

/// `round((1 − m)·I + m·fill)` per pixel and channel.
pub fn blend(image: &RgbImage, mask: &AlphaMask, fill: [u8; 3]) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if mask.grid.h != h as usize || mask.grid.w != w as usize {
        return Err(Error::Shape(format!(
            "mask is {}x{}, image is {h}x{w}",
            mask.grid.h, mask.grid.w
        )));
    }
    let mut out = image.clone();
    for (idx, px) in out.pixels_mut().enumerate() {
        let m = mask.grid.data[idx];
        for c in 0..3 {
            let v = (1.0 - m) * px.0[c] as f64 + m * fill[c] as f64;
            px.0[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfImageParams {
    /// Half-open layer range; `None` selects the last three layers.
    pub layer_window: Option<(usize, usize)>,
    pub pool: PoolMode,
    pub enhance: f64,
    pub kernel_size: usize,
    pub sigma: f64,
    pub fill: [u8; 3],
}

impl Default for CfImageParams {
    fn default() -> Self {
        Self {
            layer_window: None,
            pool: PoolMode::MeanLayers,
            enhance: 1.5,
            kernel_size: 3,
            sigma: 1.0,
            fill: [128, 128, 128],
        }
    }
}

/// Runs every stage and returns the occluded image with its mask.
pub fn generate_counterfactual_image(
    image: &DynamicImage,
    rec: &AttentionRecord,
    params: &CfImageParams,
) -> Result<(RgbImage, AlphaMask)> {
    let rgb = image.to_rgb8();
    let (w, h) = rgb.dimensions();
    let window = params.layer_window.map(|(a, b)| a..b);
    let pooled = pool_attention(rec, window, params.pool).map_err(|e| e.in_stage("pool"))?;
    let norm = normalize_mask(&pooled).map_err(|e| e.in_stage("normalize"))?;
    let enhanced = enhance_mask(&norm, params.enhance).map_err(|e| e.in_stage("enhance"))?;
    let kernel =
        Kernel::gaussian(params.kernel_size, params.sigma).map_err(|e| e.in_stage("smooth"))?;
    let smooth = smooth_mask(&enhanced, &kernel).map_err(|e| e.in_stage("smooth"))?;
    let resized = resize_mask(&smooth, h as usize, w as usize).map_err(|e| e.in_stage("resize"))?;
    let mask =
        AlphaMask::new(resized, util::fingerprint(params)).map_err(|e| e.in_stage("resize"))?;
    let out = blend(&rgb, &mask, params.fill).map_err(|e| e.in_stage("blend"))?;
    Ok((out, mask))
}

pub fn read_attention_file(path: &Path) -> Result<(FileHeader, Vec<AttentionRecord>)> {
    util::read_jsonl_expect(path, ATTENTION_SCHEMA)
}

pub fn write_attention_file(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    let header = FileHeader::new(ATTENTION_SCHEMA, util::fingerprint(records));
    util::write_jsonl(path, &header, records)
}

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    Ok(reader.decode()?)
}

/// Counterfactuals are always written as PNG.
pub fn save_png(path: &Path, image: &RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    image.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    util::write_atomic(path, &bytes)
}

/// `photo.jpg` → `photo.cf_image.png`, next to the original.
pub fn counterfactual_path(original: &Path) -> PathBuf {
    let stem = original
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string());
    original.with_file_name(format!("{stem}.cf_image.png"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageJobReport {
    pub written: Vec<(String, PathBuf)>,
    pub failures: Vec<(String, String)>,
}

/// Generates counterfactuals for `(sample_id, image path)` jobs in
/// parallel. Failed samples are reported, not fatal.
pub fn generate_for_corpus(
    jobs: &[(String, PathBuf)],
    records: &[AttentionRecord],
    params: &CfImageParams,
) -> ImageJobReport {
    let by_id: std::collections::HashMap<&str, &AttentionRecord> =
        records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let results: Vec<(String, Result<PathBuf>)> = jobs
        .par_iter()
        .map(|(id, path)| {
            let run = || -> Result<PathBuf> {
                let rec = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::Data(format!("no attention record for `{id}`")))?;
                let img = load_image(path)?;
                let (out, _) = generate_counterfactual_image(&img, rec, params)?;
                let target = counterfactual_path(path);
                save_png(&target, &out)?;
                Ok(target)
            };
            (id.clone(), run())
        })
        .collect();
    let mut report = ImageJobReport::default();
    for (id, r) in results {
        match r {
            Ok(p) => report.written.push((id, p)),
            Err(e) => report.failures.push((id, e.to_string())),
        }
    }
    report
}
