//! Seeded synthetic slides with a known texture → expression rule.
//!
//! A slide is a constant background with rectangular tissue blobs aligned to
//! the coarse grid. Tissue is tiled into small grains; each grain is either
//! flat tissue colour or high-frequency noise ("textured") with a per-slide
//! probability. Gene `g` has raw expression
//! `α_g · (textured pixels / tissue pixels) · 1000 + N(0, ε²)`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::eval::log_normalize;
use crate::seeds::rng_for;
use crate::slide_io::RasterImage;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("unknown patch kind {0}")]
    UnknownKind(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Slide(#[from] crate::slide_io::SlideError),
}

const TISSUE_RGB: [u8; 3] = [222, 148, 188];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub side: usize,
    /// Coarse cell side; blobs snap to this grid.
    pub cell: usize,
    pub genes: usize,
    /// Inclusive range of blob counts.
    pub blob_count: (usize, usize),
    /// Inclusive range of blob width/height in cells.
    pub blob_cells: (usize, usize),
    /// Range of the per-slide textured-grain probability.
    pub density: (f64, f64),
    pub grain: usize,
    /// Standard deviation ε of the additive expression noise.
    pub noise_scale: f64,
    /// Seeds the per-gene coefficients α.
    pub dataset_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            side: 1024,
            cell: 64,
            genes: 4,
            blob_count: (1, 6),
            blob_cells: (1, 4),
            density: (0.25, 1.0),
            grain: 4,
            noise_scale: 10.0,
            dataset_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.cell == 0 || self.side < self.cell || self.side % self.cell != 0 {
            return bad(format!("side {} must be a positive multiple of cell {}", self.side, self.cell));
        }
        if self.genes == 0 {
            return bad("at least one gene required".into());
        }
        if self.blob_count.0 > self.blob_count.1 {
            return bad("blob count range is empty".into());
        }
        let cells = self.side / self.cell;
        if self.blob_cells.0 == 0 || self.blob_cells.0 > self.blob_cells.1 || self.blob_cells.1 > cells {
            return bad(format!("blob size range {:?} invalid for {cells} cells", self.blob_cells));
        }
        let (lo, hi) = self.density;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad(format!("density range {:?}", self.density));
        }
        if self.grain == 0 || self.cell % self.grain != 0 {
            return bad(format!("grain {} must divide cell {}", self.grain, self.cell));
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise scale must be non-negative".into());
        }
        Ok(())
    }

    pub fn cells_per_side(&self) -> usize {
        self.side / self.cell
    }

    /// Per-gene coefficients α, fixed by the dataset seed.
    pub fn alphas(&self) -> Vec<f64> {
        let mut rng = rng_for(self.dataset_seed, "synth/alpha");
        (0..self.genes).map(|_| rng.random_range(0.5..2.0)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaskCell {
    pub tissue_px: u32,
    pub textured_px: u32,
}

/// Per-coarse-cell tissue and texture pixel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextureMask {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<MaskCell>,
}

impl TextureMask {
    pub fn is_textured(&self, id: usize) -> bool {
        self.cells[id].textured_px > 0
    }

    pub fn textured_ids(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.is_textured(i)).collect()
    }

    /// Textured pixels over tissue pixels; 0 without tissue.
    pub fn textured_fraction(&self) -> f64 {
        let tissue: u64 = self.cells.iter().map(|c| c.tissue_px as u64).sum();
        let tex: u64 = self.cells.iter().map(|c| c.textured_px as u64).sum();
        if tissue == 0 {
            0.0
        } else {
            tex as f64 / tissue as f64
        }
    }

    pub fn to_bitstring(&self) -> String {
        (0..self.cells.len())
            .map(|i| if self.is_textured(i) { '1' } else { '0' })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SynthSlide {
    pub image: RasterImage,
    pub raw: Vec<f64>,
    pub label: Vec<f64>,
    pub mask: TextureMask,
    pub density: f64,
}

/// Raw expression before noise for a given textured fraction.
pub fn expression_mean(alphas: &[f64], fraction: f64) -> Vec<f64> {
    alphas.iter().map(|a| a * fraction * 1000.0).collect()
}

pub fn generate_slide(seed: u64, cfg: &SynthConfig) -> Result<SynthSlide, SynthError> {
    cfg.validate()?;
    let mut rng = rng_for(seed, "synth/slide");
    let side = cfg.side;
    let cells = cfg.cells_per_side();

    let base = rng.random_range(228u8..=248);
    let bg = [
        base,
        base.saturating_sub(rng.random_range(0..6)),
        base.saturating_add(rng.random_range(0..6)),
    ];
    let mut tissue = vec![false; cells * cells];
    let count = rng.random_range(cfg.blob_count.0..=cfg.blob_count.1);
    for _ in 0..count {
        let bw = rng.random_range(cfg.blob_cells.0..=cfg.blob_cells.1);
        let bh = rng.random_range(cfg.blob_cells.0..=cfg.blob_cells.1);
        let c0 = rng.random_range(0..=cells - bw);
        let r0 = rng.random_range(0..=cells - bh);
        for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                tissue[r * cells + c] = true;
            }
        }
    }
    let density = if cfg.density.0 == cfg.density.1 {
        cfg.density.0
    } else {
        rng.random_range(cfg.density.0..=cfg.density.1)
    };

    let mut data = Vec::with_capacity(side * side * 3);
    for _ in 0..side * side {
        data.extend_from_slice(&bg);
    }
    let mut mask = TextureMask {
        rows: cells,
        cols: cells,
        cells: vec![MaskCell::default(); cells * cells],
    };
    let grains = cfg.cell / cfg.grain;
    for id in (0..cells * cells).filter(|&i| tissue[i]) {
        let (r, c) = (id / cells, id % cells);
        let m = &mut mask.cells[id];
        m.tissue_px = (cfg.cell * cfg.cell) as u32;
        for gy in 0..grains {
            for gx in 0..grains {
                let textured = rng.random_bool(density);
                if textured {
                    m.textured_px += (cfg.grain * cfg.grain) as u32;
                }
                for y in 0..cfg.grain {
                    let py = r * cfg.cell + gy * cfg.grain + y;
                    for x in 0..cfg.grain {
                        let px = c * cfg.cell + gx * cfg.grain + x;
                        let i = (py * side + px) * 3;
                        if textured {
                            rng.fill(&mut data[i..i + 3]);
                        } else {
                            data[i..i + 3].copy_from_slice(&TISSUE_RGB);
                        }
                    }
                }
            }
        }
    }

    let fraction = mask.textured_fraction();
    let noise = Normal::new(0.0, cfg.noise_scale.max(1e-300))
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let raw: Vec<f64> = expression_mean(&cfg.alphas(), fraction)
        .into_iter()
        .map(|m| {
            let e = if cfg.noise_scale > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            m + e
        })
        .collect();
    let clipped: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let label = log_normalize(&clipped).expect("clipped values are non-negative");
    Ok(SynthSlide {
        image: RasterImage::new(side, side, data)?,
        raw,
        label,
        mask,
        density,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchKind {
    Constant,
    Gradient,
    Noise,
    Checkerboard { cell: usize },
}

impl fmt::Display for PatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchKind::Constant => f.write_str("constant"),
            PatchKind::Gradient => f.write_str("gradient"),
            PatchKind::Noise => f.write_str("noise"),
            PatchKind::Checkerboard { .. } => f.write_str("checkerboard"),
        }
    }
}

impl FromStr for PatchKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "constant" => Ok(PatchKind::Constant),
            "gradient" => Ok(PatchKind::Gradient),
            "noise" => Ok(PatchKind::Noise),
            "checkerboard" => Ok(PatchKind::Checkerboard { cell: 8 }),
            _ => Err(SynthError::UnknownKind(s.to_string())),
        }
    }
}

/// Procedural `side×side` RGB patch.
pub fn generate_patch(kind: PatchKind, side: usize, seed: u64) -> Vec<u8> {
    let mut rng = rng_for(seed, "synth/patch");
    let mut out = Vec::with_capacity(side * side * 3);
    match kind {
        PatchKind::Constant => {
            let c: [u8; 3] = rng.random();
            for _ in 0..side * side {
                out.extend_from_slice(&c);
            }
        }
        PatchKind::Gradient => {
            let from: [f64; 3] = [rng.random_range(0.0..128.0), rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)];
            let to: [f64; 3] = [rng.random_range(128.0..256.0), rng.random_range(128.0..256.0), rng.random_range(128.0..256.0)];
            let span = (2 * side.max(2) - 2) as f64;
            for y in 0..side {
                for x in 0..side {
                    let t = (x + y) as f64 / span;
                    for ch in 0..3 {
                        out.push((from[ch] + t * (to[ch] - from[ch])).floor().min(255.0) as u8);
                    }
                }
            }
        }
        PatchKind::Noise => {
            out.resize(side * side * 3, 0);
            rng.fill(&mut out[..]);
        }
        PatchKind::Checkerboard { cell } => {
            let a: [u8; 3] = rng.random();
            let b: [u8; 3] = a.map(|v| v.wrapping_add(128));
            let cell = cell.max(1);
            for y in 0..side {
                for x in 0..side {
                    let c = if (x / cell + y / cell) % 2 == 0 { a } else { b };
                    out.extend_from_slice(&c);
                }
            }
        }
    }
    out
}

/// A generated dataset on disk.
#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub slide_ids: Vec<String>,
    pub labels: Vec<Vec<f64>>,
    pub masks: Vec<TextureMask>,
}

pub fn slide_id(i: usize) -> String {
    format!("slide_{i:03}")
}

/// Writes `<id>.isgr` per slide, `labels.tsv` and `masks.tsv`.
pub fn write_dataset(dir: &Path, n_slides: usize, root_seed: u64, cfg: &SynthConfig) -> Result<DatasetSummary, SynthError> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut labels_file = std::io::BufWriter::new(fs::File::create(dir.join("labels.tsv"))?);
    let mut masks_file = std::io::BufWriter::new(fs::File::create(dir.join("masks.tsv"))?);
    writeln!(
        labels_file,
        "#slide_id{}",
        (0..cfg.genes).map(|g| format!("\tgene_{g}")).collect::<String>()
    )?;
    writeln!(masks_file, "#slide_id\trows\tcols\ttextured_cells")?;
    let mut summary = DatasetSummary {
        slide_ids: Vec::new(),
        labels: Vec::new(),
        masks: Vec::new(),
    };
    for i in 0..n_slides {
        let id = slide_id(i);
        let seed = crate::seeds::derive_seed(root_seed, &format!("synth/{i}"));
        let s = generate_slide(seed, cfg)?;
        s.image.write_raw(&dir.join(format!("{id}.isgr")))?;
        writeln!(
            labels_file,
            "{id}{}",
            s.label.iter().map(|v| format!("\t{v:.9}")).collect::<String>()
        )?;
        writeln!(masks_file, "{id}\t{}\t{}\t{}", s.mask.rows, s.mask.cols, s.mask.to_bitstring())?;
        summary.slide_ids.push(id);
        summary.labels.push(s.label);
        summary.masks.push(s.mask);
    }
    labels_file.flush()?;
    masks_file.flush()?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            side: 256,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn empty_slide() {
        let cfg = SynthConfig {
            blob_count: (0, 0),
            ..small()
        };
        let s = generate_slide(3, &cfg).unwrap();
        assert_eq!(s.mask.textured_fraction(), 0.0);
        assert!(s.mask.textured_ids().is_empty());
        for (raw, lab) in s.raw.iter().zip(&s.label) {
            assert_eq!(*lab, raw.max(0.0).ln_1p());
        }
        let px = s.image.pixel(0, 0);
        assert!(s.image.data().chunks(3).all(|p| p == px));
    }

    #[test]
    fn fully_textured_slide() {
        let cfg = SynthConfig {
            blob_count: (1, 1),
            blob_cells: (4, 4),
            density: (1.0, 1.0),
            ..small()
        };
        let s = generate_slide(11, &cfg).unwrap();
        assert_eq!(s.mask.textured_fraction(), 1.0);
        let alphas = cfg.alphas();
        for ((lab, raw), a) in s.label.iter().zip(&s.raw).zip(&alphas) {
            let noise = raw - a * 1000.0;
            assert!(noise.abs() < 6.0 * cfg.noise_scale);
            assert!((lab - (1.0 + a * 1000.0 + noise).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_slides() {
        let a = generate_slide(42, &small()).unwrap();
        let b = generate_slide(42, &small()).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.label, b.label);
        assert_eq!(a.mask, b.mask);
        let c = generate_slide(43, &small()).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn label_consistency_from_mask() {
        let cfg = small();
        let alphas = cfg.alphas();
        for seed in 0..20 {
            let s = generate_slide(seed, &cfg).unwrap();
            let expected = expression_mean(&alphas, s.mask.textured_fraction());
            for (lab, m) in s.label.iter().zip(expected) {
                let raw = lab.exp() - 1.0;
                assert!(raw == 0.0 || (raw - m).abs() < 6.0 * cfg.noise_scale, "{raw} vs {m}");
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SynthConfig { side: 1000, ..SynthConfig::default() },
            SynthConfig { genes: 0, ..SynthConfig::default() },
            SynthConfig { density: (0.8, 0.2), ..SynthConfig::default() },
            SynthConfig { grain: 5, ..SynthConfig::default() },
            SynthConfig { blob_cells: (0, 2), ..SynthConfig::default() },
        ];
        for c in bad {
            assert!(matches!(generate_slide(0, &c), Err(SynthError::InvalidConfig(_))));
        }
    }

    #[test]
    fn patch_kinds() {
        let c = generate_patch(PatchKind::Constant, 16, 1);
        assert!(c.chunks(3).all(|p| p == &c[..3]));

        let cb = generate_patch(PatchKind::Checkerboard { cell: 8 }, 64, 2);
        let mut colors = std::collections::BTreeSet::new();
        let mut cells = 0;
        for cy in 0..8 {
            for cx in 0..8 {
                let i = ((cy * 8) * 64 + cx * 8) * 3;
                let first = &cb[i..i + 3];
                colors.insert(first.to_vec());
                // uniform within the cell
                for y in 0..8 {
                    for x in 0..8 {
                        let j = ((cy * 8 + y) * 64 + cx * 8 + x) * 3;
                        assert_eq!(&cb[j..j + 3], first);
                    }
                }
                if cx > 0 {
                    let left = ((cy * 8) * 64 + (cx - 1) * 8) * 3;
                    assert_ne!(&cb[left..left + 3], first);
                }
                cells += 1;
            }
        }
        assert_eq!(cells, 64);
        assert_eq!(colors.len(), 2);

        assert_eq!(generate_patch(PatchKind::Noise, 32, 5), generate_patch(PatchKind::Noise, 32, 5));
        assert_ne!(generate_patch(PatchKind::Noise, 32, 5), generate_patch(PatchKind::Noise, 32, 6));
        assert!(matches!("spiral".parse::<PatchKind>(), Err(SynthError::UnknownKind(_))));
    }
}
