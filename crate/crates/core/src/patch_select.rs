//! Texture-abundance scoring of coarse patches and threshold selection.
//!
//! The primary score is the information content of a patch measured as the
//! bit length of its raw RGB bytes under DEFLATE. Five classical image
//! heuristics are available as baselines.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::slide_io::GlobalPatch;

#[derive(Debug, thiserror::Error)]
pub enum SelectError {
    #[error("empty patch")]
    EmptyPatch,
    #[error("unknown selection method {0}")]
    UnknownMethod(String),
    #[error("empty histogram")]
    EmptyHistogram,
    #[error("no records to select from")]
    NoRecords,
    #[error("invalid score {score} for patch {patch_id}")]
    InvalidScore { patch_id: usize, score: f64 },
    #[error("invalid compressor effort {0}, expected 0-9")]
    InvalidLevel(u32),
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Shannon,
    Ig,
    Canny,
    Dog,
    Log,
    Otsu,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Shannon,
        Method::Ig,
        Method::Canny,
        Method::Dog,
        Method::Log,
        Method::Otsu,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Shannon => "shannon",
            Method::Ig => "ig",
            Method::Canny => "canny",
            Method::Dog => "dog",
            Method::Log => "log",
            Method::Otsu => "otsu",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SelectError::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdRule {
    /// Keep `score > bits`.
    Fixed { bits: f64 },
    /// Keep `score > μ + multiplier·σ` over the slide's scores.
    Adaptive { sigma_multiplier: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Adaptive {
            sigma_multiplier: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionRecord {
    pub patch_id: usize,
    pub method: Method,
    pub score: f64,
    pub kept: bool,
}

/// Parameters of the baseline selectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineParams {
    pub canny_sigma: f64,
    pub canny_low: f64,
    pub canny_high: f64,
    pub dog_sigma: f64,
    pub dog_k: f64,
    pub log_sigma: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            canny_sigma: 1.4,
            canny_low: 0.1,
            canny_high: 0.3,
            dog_sigma: 1.0,
            dog_k: 1.6,
            log_sigma: 2.0,
        }
    }
}

/// Eight times the DEFLATE-compressed length of `pixels` at the given effort.
pub fn shannon_bits(pixels: &[u8], level: u32) -> Result<f64, SelectError> {
    if pixels.is_empty() {
        return Err(SelectError::EmptyPatch);
    }
    if level > 9 {
        return Err(SelectError::InvalidLevel(level));
    }
    let mut enc = DeflateEncoder::new(Vec::with_capacity(pixels.len() / 2), Compression::new(level));
    enc.write_all(pixels)?;
    let compressed = enc.finish()?;
    Ok(8.0 * compressed.len() as f64)
}

/// Luma in `[0, 255]`.
pub fn grayscale(pixels: &[u8]) -> Vec<f64> {
    pixels
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Score of a patch under any method. Shannon uses compressor effort `level`.
pub fn score_patch(patch: &GlobalPatch, method: Method, level: u32, params: &BaselineParams) -> Result<f64, SelectError> {
    match method {
        Method::Shannon => shannon_bits(&patch.pixels, level),
        _ => baseline_score(&patch.pixels, patch.side, method, params),
    }
}

/// Classical texture heuristics on the grayscale patch.
pub fn baseline_score(pixels: &[u8], side: usize, method: Method, params: &BaselineParams) -> Result<f64, SelectError> {
    if pixels.is_empty() || side == 0 {
        return Err(SelectError::EmptyPatch);
    }
    let gray = Plane::new(side, side, grayscale(pixels));
    let score = match method {
        Method::Shannon => return Err(SelectError::UnknownMethod("shannon is not a baseline".into())),
        Method::Ig => {
            let (gx, gy) = gray.central_gradients();
            mean(gx.data.iter().zip(&gy.data).map(|(a, b)| a.hypot(*b)))
        }
        Method::Canny => {
            let edges = canny(&gray, params.canny_sigma, params.canny_low, params.canny_high);
            edges.iter().filter(|&&e| e).count() as f64 / edges.len() as f64
        }
        Method::Dog => {
            let a = gray.gaussian_blur(params.dog_sigma);
            let b = gray.gaussian_blur(params.dog_sigma * params.dog_k);
            mean(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
        }
        Method::Log => {
            let r = gray.convolve_square(&log_kernel(params.log_sigma));
            mean(r.data.iter().map(|v| v.abs()))
        }
        Method::Otsu => {
            let mut hist = [0u64; 256];
            for v in &gray.data {
                hist[v.round().clamp(0.0, 255.0) as usize] += 1;
            }
            if hist.iter().filter(|&&c| c > 0).count() < 2 {
                0.0
            } else {
                let t = otsu_threshold(&hist)?;
                // tissue is darker than slide background
                let fg: u64 = hist[..t as usize].iter().sum();
                fg as f64 / gray.data.len() as f64
            }
        }
    };
    Ok(score)
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Between-class variance `ω₀ω₁(μ₀ − μ₁)²` when levels `< t` form the first
/// class and levels `>= t` the second.
pub fn between_class_variance(hist: &[u64; 256], t: usize) -> f64 {
    let (mut w0, mut s0, mut w1, mut s1) = (0.0, 0.0, 0.0, 0.0);
    for (level, &c) in hist.iter().enumerate() {
        let c = c as f64;
        if level < t {
            w0 += c;
            s0 += c * level as f64;
        } else {
            w1 += c;
            s1 += c * level as f64;
        }
    }
    if w0 == 0.0 || w1 == 0.0 {
        return 0.0;
    }
    let total = w0 + w1;
    let d = s0 / w0 - s1 / w1;
    (w0 / total) * (w1 / total) * d * d
}

/// Otsu level: pixels `>= level` form the upper class. Returns the level with
/// maximal between-class variance, smallest on ties. A histogram with a single
/// occupied level returns that level.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8, SelectError> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(SelectError::EmptyHistogram);
    }
    let occupied: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if occupied.len() == 1 {
        return Ok(occupied[0] as u8);
    }
    // running sums, one pass
    let total_f = total as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0usize, -1.0);
    for t in 0..256 {
        let w1 = total_f - w0;
        let var = if w0 > 0.0 && w1 > 0.0 {
            let d = s0 / w0 - (sum_all - s0) / w1;
            (w0 / total_f) * (w1 / total_f) * d * d
        } else {
            0.0
        };
        if var > best_var {
            best_var = var;
            best = t;
        }
        w0 += hist[t] as f64;
        s0 += t as f64 * hist[t] as f64;
    }
    Ok(best as u8)
}

/// Applies `rule` to `(patch_id, score)` pairs. Statistics are accumulated in
/// ascending patch id order.
pub fn select_patches(records: &[(usize, f64)], method: Method, rule: &ThresholdRule) -> Result<Vec<SelectionRecord>, SelectError> {
    if records.is_empty() {
        return Err(SelectError::NoRecords);
    }
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| r.0);
    for &(patch_id, score) in &sorted {
        if !(score >= 0.0) || !score.is_finite() {
            return Err(SelectError::InvalidScore { patch_id, score });
        }
    }
    let cutoff = threshold_value(&sorted, rule);
    Ok(sorted
        .into_iter()
        .map(|(patch_id, score)| SelectionRecord {
            patch_id,
            method,
            score,
            kept: score > cutoff,
        })
        .collect())
}

/// The cutoff a rule produces for a (sorted) score list.
pub fn threshold_value(sorted: &[(usize, f64)], rule: &ThresholdRule) -> f64 {
    match *rule {
        ThresholdRule::Fixed { bits } => bits,
        ThresholdRule::Adaptive { sigma_multiplier } => {
            let n = sorted.len() as f64;
            let mu = sorted.iter().map(|r| r.1).sum::<f64>() / n;
            let var = sorted.iter().map(|r| (r.1 - mu) * (r.1 - mu)).sum::<f64>() / n;
            mu + sigma_multiplier * var.sqrt()
        }
    }
}

/// One manifest row with the patch's grid position.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub patch_id: usize,
    pub grid_row: usize,
    pub grid_col: usize,
    pub method: Method,
    pub score: f64,
    pub kept: bool,
}

pub const MANIFEST_HEADER: &str = "#patch_id\tgrid_row\tgrid_col\tmethod\tscore\tkept";

pub fn write_manifest<W: Write>(mut w: W, rows: &[ManifestRow]) -> Result<(), SelectError> {
    writeln!(w, "{MANIFEST_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{:.6}\t{}",
            r.patch_id,
            r.grid_row,
            r.grid_col,
            r.method,
            r.score,
            u8::from(r.kept)
        )?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ManifestRow>, SelectError> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| SelectError::Manifest {
            line: line_no,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 tab-separated fields"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        rows.push(ManifestRow {
            patch_id: int(f[0])?,
            grid_row: int(f[1])?,
            grid_col: int(f[2])?,
            method: f[3].parse()?,
            score: f[4].parse().map_err(|_| bad("bad score"))?,
            kept: match f[5] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("kept must be 0 or 1")),
            },
        });
    }
    Ok(rows)
}

/// Grayscale plane with clamped borders.
#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn new(w: usize, h: usize, data: Vec<f64>) -> Self {
        Plane { w, h, data }
    }

    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    fn central_gradients(&self) -> (Plane, Plane) {
        let mut gx = vec![0.0; self.data.len()];
        let mut gy = vec![0.0; self.data.len()];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let i = y as usize * self.w + x as usize;
                gx[i] = (self.at(x + 1, y) - self.at(x - 1, y)) / 2.0;
                gy[i] = (self.at(x, y + 1) - self.at(x, y - 1)) / 2.0;
            }
        }
        (Plane::new(self.w, self.h, gx), Plane::new(self.w, self.h, gy))
    }

    fn convolve_1d(&self, k: &[f64], horizontal: bool) -> Plane {
        let r = (k.len() / 2) as isize;
        let mut out = vec![0.0; self.data.len()];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let mut s = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let o = j as isize - r;
                    s += kv * if horizontal { self.at(x + o, y) } else { self.at(x, y + o) };
                }
                out[y as usize * self.w + x as usize] = s;
            }
        }
        Plane::new(self.w, self.h, out)
    }

    fn gaussian_blur(&self, sigma: f64) -> Plane {
        let k = gaussian_kernel(sigma);
        self.convolve_1d(&k, true).convolve_1d(&k, false)
    }

    fn convolve_square(&self, k: &[Vec<f64>]) -> Plane {
        let r = (k.len() / 2) as isize;
        let mut out = vec![0.0; self.data.len()];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let mut s = 0.0;
                for (ky, row) in k.iter().enumerate() {
                    for (kx, kv) in row.iter().enumerate() {
                        s += kv * self.at(x + kx as isize - r, y + ky as isize - r);
                    }
                }
                out[y as usize * self.w + x as usize] = s;
            }
        }
        Plane::new(self.w, self.h, out)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Sampled Laplacian-of-Gaussian, shifted to zero sum so flat regions give 0.
fn log_kernel(sigma: f64) -> Vec<Vec<f64>> {
    let r = (3.0 * sigma).ceil() as isize;
    let s2 = sigma * sigma;
    let mut k: Vec<Vec<f64>> = (-r..=r)
        .map(|y| {
            (-r..=r)
                .map(|x| {
                    let q = (x * x + y * y) as f64 / (2.0 * s2);
                    -(1.0 / (std::f64::consts::PI * s2 * s2)) * (1.0 - q) * (-q).exp()
                })
                .collect()
        })
        .collect();
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let m = k.iter().flatten().sum::<f64>() / n;
    k.iter_mut().flatten().for_each(|v| *v -= m);
    k
}

/// Canny edge map; hysteresis thresholds are fractions of the maximum
/// gradient magnitude.
fn canny(gray: &Plane, sigma: f64, low: f64, high: f64) -> Vec<bool> {
    let s = gray.gaussian_blur(sigma);
    let (w, h) = (s.w, s.h);
    let mut mag = vec![0.0; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (s.at(x + 1, y - 1) + 2.0 * s.at(x + 1, y) + s.at(x + 1, y + 1))
                - (s.at(x - 1, y - 1) + 2.0 * s.at(x - 1, y) + s.at(x - 1, y + 1));
            let gy = (s.at(x - 1, y + 1) + 2.0 * s.at(x, y + 1) + s.at(x + 1, y + 1))
                - (s.at(x - 1, y - 1) + 2.0 * s.at(x, y - 1) + s.at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = match angle {
                a if !(22.5..157.5).contains(&a) => 0,
                a if a < 67.5 => 1,
                a if a < 112.5 => 2,
                _ => 3,
            };
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-9 {
        return vec![false; w * h];
    }
    let get = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            let m = mag[i];
            if m >= get(x + dx, y + dy) && m >= get(x - dx, y - dy) {
                thin[i] = m;
            }
        }
    }
    let (lo, hi) = (low * max, high * max);
    let mut edge = vec![false; w * h];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= hi {
            edge[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] >= lo {
                    edge[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    edge
}
