//! Stage orchestration: each stage reads its upstream artifacts through their
//! run manifests and writes its own artifacts plus a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, PipelineConfig};
use crate::diff::ParamStore;
use crate::dual_attn::{train_predictor, AttnError, LabeledSlide, Predictor, SlideTokens};
use crate::eval::{feature_probe, kfold_split, pcc, write_eval_report, EvalError, FoldAssignment, ReportLine};
use crate::features::{
    build_local_cube, train_extractor, Discriminator, Extractor, FeatError, FeatureStore, PerceptualNet, TrainTrace,
    MIN_TRAIN_PATCHES,
};
use crate::patch_select::{read_manifest, score_patch, select_patches, write_manifest, BaselineParams, ManifestRow, SelectError};
use crate::seeds::{derive_seed, rng_for};
use crate::slide_io::{decode_raster, tile_coarse, tile_fine, GlobalPatch, RasterImage, SlideError};
use crate::synth::{write_dataset, SynthError};
use crate::verify::{gradient_suite, CheckOutcome};

pub const MANIFEST_NAME: &str = "MANIFEST";
pub const STAGES: [&str; 8] = [
    "synth",
    "tile",
    "select",
    "train-extractor",
    "extract",
    "train-predictor",
    "predict",
    "evaluate",
];
pub const SUBCOMMANDS: [&str; 9] = [
    "synth",
    "tile",
    "select",
    "train-extractor",
    "extract",
    "train-predictor",
    "predict",
    "evaluate",
    "gradcheck",
];
const GRADCHECK_SEEDS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown subcommand {0:?}")]
    UnknownSubcommand(String),
    #[error("missing artifact {path} (run `{stage}` first)")]
    MissingArtifact { stage: String, path: PathBuf },
    #[error("checksum mismatch for {path}: manifest {expected}, file {actual}")]
    ChecksumMismatch { path: PathBuf, expected: String, actual: String },
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
    #[error("{0} gradient checks exceeded tolerance")]
    VerificationFailed(usize),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit status: 1 usage, 2 data, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::UnknownSubcommand(_) => 1,
            PipelineError::VerificationFailed(_) => 3,
            _ => 2,
        }
    }
}

fn malformed(what: impl Into<String>, detail: impl Into<String>) -> PipelineError {
    PipelineError::Malformed { what: what.into(), detail: detail.into() }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Directory holding a stage's artifacts.
pub fn stage_dir(cfg: &PipelineConfig, stage: &str) -> PathBuf {
    match stage {
        "synth" => cfg.data_dir.clone(),
        s => cfg.work_dir.join(s),
    }
}

/// Run manifest: provenance plus the checksum of every artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub stage: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub config: String,
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stage\t{}", self.stage);
        let _ = writeln!(s, "config_sha256\t{}", self.config_sha256);
        let _ = writeln!(s, "seed\t{}", self.seed);
        let _ = writeln!(s, "version\t{}", self.version);
        for (name, sum) in &self.artifacts {
            let _ = writeln!(s, "artifact\t{sum}\t{name}");
        }
        for line in self.config.lines() {
            let _ = writeln!(s, "config\t{line}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut m = Manifest {
            stage: String::new(),
            config_sha256: String::new(),
            seed: 0,
            version: String::new(),
            config: String::new(),
            artifacts: BTreeMap::new(),
        };
        for line in text.lines() {
            let (tag, rest) = line.split_once('\t').ok_or_else(|| malformed("manifest", line))?;
            match tag {
                "stage" => m.stage = rest.to_string(),
                "config_sha256" => m.config_sha256 = rest.to_string(),
                "seed" => m.seed = rest.parse().map_err(|_| malformed("manifest seed", rest))?,
                "version" => m.version = rest.to_string(),
                "artifact" => {
                    let (sum, name) = rest.split_once('\t').ok_or_else(|| malformed("manifest", line))?;
                    m.artifacts.insert(name.to_string(), sum.to_string());
                }
                "config" => {
                    m.config.push_str(rest);
                    m.config.push('\n');
                }
                _ => return Err(malformed("manifest", line)),
            }
        }
        Ok(m)
    }
}

struct StageWriter {
    stage: &'static str,
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl StageWriter {
    fn new(cfg: &PipelineConfig, stage: &'static str) -> Result<Self, PipelineError> {
        let dir = stage_dir(cfg, stage);
        fs::create_dir_all(&dir)?;
        let manifest = dir.join(MANIFEST_NAME);
        if manifest.exists() {
            fs::remove_file(manifest)?;
        }
        Ok(StageWriter { stage, dir, artifacts: BTreeMap::new() })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        fs::write(self.dir.join(name), bytes)?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Registers a file some other routine already wrote.
    fn record(&mut self, name: &str) -> Result<(), PipelineError> {
        let bytes = fs::read(self.dir.join(name))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(self, cfg: &PipelineConfig) -> Result<(), PipelineError> {
        let m = Manifest {
            stage: self.stage.to_string(),
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            version: concat!("isg-core ", env!("CARGO_PKG_VERSION")).to_string(),
            config: cfg.canonical(),
            artifacts: self.artifacts,
        };
        fs::write(self.dir.join(MANIFEST_NAME), m.to_text())?;
        Ok(())
    }
}

/// A completed upstream stage; reads are checked against its manifest.
pub struct Upstream {
    stage: String,
    dir: PathBuf,
    pub manifest: Manifest,
}

impl Upstream {
    pub fn open(cfg: &PipelineConfig, stage: &str) -> Result<Self, PipelineError> {
        let dir = stage_dir(cfg, stage);
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path)
            .map_err(|_| PipelineError::MissingArtifact { stage: stage.to_string(), path: path.clone() })?;
        Ok(Upstream { stage: stage.to_string(), dir, manifest: Manifest::parse(&text)? })
    }

    pub fn read(&self, name: &str) -> Result<Vec<u8>, PipelineError> {
        let path = self.dir.join(name);
        let missing = || PipelineError::MissingArtifact { stage: self.stage.clone(), path: path.clone() };
        let expected = self.manifest.artifacts.get(name).ok_or_else(missing)?;
        let bytes = fs::read(&path).map_err(|_| missing())?;
        let actual = sha256_hex(&bytes);
        if &actual != expected {
            return Err(PipelineError::ChecksumMismatch { path, expected: expected.clone(), actual });
        }
        Ok(bytes)
    }

    fn read_text(&self, name: &str) -> Result<String, PipelineError> {
        String::from_utf8(self.read(name)?).map_err(|e| malformed(name, e.to_string()))
    }
}

/// `labels.tsv`: gene names and one row per slide.
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub genes: Vec<String>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

pub fn parse_labels(text: &str) -> Result<Labels, PipelineError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed("labels", "empty file"))?;
    let genes: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
    let mut rows = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let mut it = line.split('\t');
        let id = it.next().unwrap_or_default().to_string();
        let vals = it
            .map(|v| v.parse::<f64>().map_err(|_| malformed("labels", line)))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != genes.len() {
            return Err(malformed("labels", format!("{id}: {} values for {} genes", vals.len(), genes.len())));
        }
        rows.insert(id, vals);
    }
    Ok(Labels { genes, rows })
}

/// `masks.tsv`: textured coarse cells per slide, row-major.
pub fn parse_masks(text: &str) -> Result<BTreeMap<String, Vec<bool>>, PipelineError> {
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(malformed("masks", line));
        }
        out.insert(f[0].to_string(), f[3].bytes().map(|b| b == b'1').collect());
    }
    Ok(out)
}

fn slide_ids(synth: &Upstream) -> Result<(Labels, Vec<String>), PipelineError> {
    let labels = parse_labels(&synth.read_text("labels.tsv")?)?;
    let ids = labels.rows.keys().cloned().collect();
    Ok((labels, ids))
}

fn load_slide(synth: &Upstream, id: &str) -> Result<RasterImage, PipelineError> {
    Ok(decode_raster(&synth.read(&format!("{id}.isgr"))?)?)
}

fn folds(cfg: &PipelineConfig, ids: &[String]) -> Result<FoldAssignment, PipelineError> {
    Ok(kfold_split(ids, cfg.folds, cfg.eval_seed)?)
}

/// Training and held-out slide ids.
pub fn split(cfg: &PipelineConfig, ids: &[String]) -> Result<(Vec<String>, Vec<String>), PipelineError> {
    let f = folds(cfg, ids)?;
    let (held, train): (Vec<String>, Vec<String>) = ids.iter().cloned().partition(|id| f.folds[id] == cfg.holdout_fold);
    Ok((train, held))
}

fn score_and_select(cfg: &PipelineConfig, patches: &[GlobalPatch]) -> Result<Vec<ManifestRow>, PipelineError> {
    let params = BaselineParams::default();
    let scores = patches
        .par_iter()
        .map(|p| score_patch(p, cfg.method, cfg.level, &params).map(|s| (p.id, s)))
        .collect::<Result<Vec<_>, _>>()?;
    let sel = select_patches(&scores, cfg.method, &cfg.rule)?;
    Ok(sel
        .into_iter()
        .map(|s| {
            let p = &patches[s.patch_id];
            ManifestRow {
                patch_id: s.patch_id,
                grid_row: p.grid_row,
                grid_col: p.grid_col,
                method: s.method,
                score: s.score,
                kept: s.kept,
            }
        })
        .collect())
}

fn read_grid(tile: &Upstream) -> Result<BTreeMap<String, (usize, usize)>, PipelineError> {
    let mut out = BTreeMap::new();
    for line in tile.read_text("grid.tsv")?.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| s.parse::<usize>().map_err(|_| malformed("grid", line));
        if f.len() != 3 {
            return Err(malformed("grid", line));
        }
        out.insert(f[0].to_string(), (parse(f[1])?, parse(f[2])?));
    }
    Ok(out)
}

fn selection_rows(select: &Upstream, id: &str) -> Result<Vec<ManifestRow>, PipelineError> {
    Ok(read_manifest(select.read(&format!("{id}.tsv"))?.as_slice())?)
}

fn extractor_checkpoint(up: &Upstream, name: &str, side: usize, d: usize) -> Result<Extractor, PipelineError> {
    let params = ParamStore::read_checkpoint(up.read(name)?.as_slice())?;
    Ok(Extractor::from_params(side, d, params)?)
}

/// Seeded subsample of at most `cap` items, order preserved.
fn capped<T: Clone>(items: Vec<T>, cap: usize, seed: u64) -> Vec<T> {
    if items.len() <= cap {
        return items;
    }
    let mut idx = sample(&mut rng_for(seed, "cap"), items.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

fn trace_tsv(global: &TrainTrace, local: &TrainTrace) -> String {
    let mut s = String::from("#step\tglobal_total\tglobal_l1\tglobal_lpips\tlocal_total\tlocal_l1\tlocal_lpips\n");
    for i in 0..global.total.len().max(local.total.len()) {
        let v = |t: &[f64]| t.get(i).map_or(String::from("NA"), |x| format!("{x:.9}"));
        let _ = writeln!(
            s,
            "{i}\t{}\t{}\t{}\t{}\t{}\t{}",
            v(&global.total),
            v(&global.l1),
            v(&global.lpips_like),
            v(&local.total),
            v(&local.l1),
            v(&local.lpips_like)
        );
    }
    s
}

/// Global features of `patches` plus their local cubes.
fn feature_store(
    patches: &[&GlobalPatch],
    global: &Extractor,
    local: &Extractor,
    cfg: &PipelineConfig,
) -> Result<FeatureStore, PipelineError> {
    let mut store = FeatureStore::new(cfg.d, cfg.tile.cube_side());
    let px: Vec<&[u8]> = patches.iter().map(|p| p.pixels.as_slice()).collect();
    let globals = global.encode_many(&px)?;
    for (p, g) in patches.iter().zip(&globals) {
        let grid = tile_fine(p, &cfg.tile)?;
        let cube = build_local_cube(&grid, local)?;
        store.push(p.id, p.grid_row, p.grid_col, g, &cube)?;
    }
    Ok(store)
}

fn gene_rows(preds: &BTreeMap<String, Vec<f64>>, ids: &[String]) -> Vec<Vec<f64>> {
    ids.iter().map(|id| preds[id].clone()).collect()
}

pub fn synth(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let mut w = StageWriter::new(cfg, "synth")?;
    let summary = write_dataset(&w.dir, cfg.slides, derive_seed(cfg.seed, "synth"), &cfg.synth)?;
    for id in &summary.slide_ids {
        w.record(&format!("{id}.isgr"))?;
    }
    w.record("labels.tsv")?;
    w.record("masks.tsv")?;
    w.finish(cfg)?;
    Ok(format!("wrote {} slides to {}", summary.slide_ids.len(), cfg.data_dir.display()))
}

pub fn tile(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let synth = Upstream::open(cfg, "synth")?;
    let (_, ids) = slide_ids(&synth)?;
    let mut w = StageWriter::new(cfg, "tile")?;
    let mut grid = String::from("#slide_id\trows\tcols\n");
    let mut total = 0;
    for id in &ids {
        let img = load_slide(&synth, id)?;
        let patches = tile_coarse(&img, &cfg.tile)?;
        let (rows, cols) = (img.height() / cfg.tile.p, img.width() / cfg.tile.p);
        let _ = writeln!(grid, "{id}\t{rows}\t{cols}");
        let mut index = String::from("#patch_id\tgrid_row\tgrid_col\tx\ty\tside\n");
        for p in &patches {
            let _ = writeln!(
                index,
                "{}\t{}\t{}\t{}\t{}\t{}",
                p.id,
                p.grid_row,
                p.grid_col,
                p.grid_col * p.side,
                p.grid_row * p.side,
                p.side
            );
        }
        total += patches.len();
        w.put(&format!("{id}.tsv"), index.as_bytes())?;
    }
    w.put("grid.tsv", grid.as_bytes())?;
    w.finish(cfg)?;
    Ok(format!("tiled {} slides into {total} coarse patches", ids.len()))
}

pub fn select(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let synth = Upstream::open(cfg, "synth")?;
    Upstream::open(cfg, "tile")?;
    let (_, ids) = slide_ids(&synth)?;
    let mut w = StageWriter::new(cfg, "select")?;
    let (mut kept, mut total) = (0, 0);
    for id in &ids {
        let img = load_slide(&synth, id)?;
        let rows = score_and_select(cfg, &tile_coarse(&img, &cfg.tile)?)?;
        kept += rows.iter().filter(|r| r.kept).count();
        total += rows.len();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &rows)?;
        w.put(&format!("{id}.tsv"), &buf)?;
    }
    w.finish(cfg)?;
    Ok(format!("kept {kept} of {total} coarse patches"))
}

pub fn train_extractors(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let synth = Upstream::open(cfg, "synth")?;
    let select = Upstream::open(cfg, "select")?;
    let (_, ids) = slide_ids(&synth)?;
    let (train, _) = split(cfg, &ids)?;

    let mut pool: Vec<GlobalPatch> = Vec::new();
    let mut spare: Vec<(f64, GlobalPatch)> = Vec::new();
    for id in &train {
        let patches = tile_coarse(&load_slide(&synth, id)?, &cfg.tile)?;
        for row in selection_rows(&select, id)? {
            let p = patches[row.patch_id].clone();
            if row.kept {
                pool.push(p);
            } else {
                spare.push((row.score, p));
            }
        }
    }
    if pool.len() < MIN_TRAIN_PATCHES {
        // too few kept patches: top up with the highest-scoring rejected ones
        spare.sort_by(|a, b| b.0.total_cmp(&a.0));
        let need = MIN_TRAIN_PATCHES - pool.len();
        log::warn!("only {} kept training patches; adding {need} top-scoring rejects", pool.len());
        pool.extend(spare.into_iter().take(need).map(|(_, p)| p));
    }
    let pool = capped(pool, cfg.max_patches, derive_seed(cfg.seed, "extractor/global/pool"));
    let mut locals: Vec<Vec<u8>> = Vec::new();
    for p in &pool {
        locals.extend(tile_fine(p, &cfg.tile)?.patches);
    }
    let locals = capped(locals, cfg.max_patches, derive_seed(cfg.seed, "extractor/local/pool"));

    let mut w = StageWriter::new(cfg, "train-extractor")?;
    let mut traces = Vec::new();
    for (scale, side, data) in [
        ("global", cfg.tile.p, pool.iter().map(|p| p.pixels.as_slice()).collect::<Vec<_>>()),
        ("local", cfg.tile.q, locals.iter().map(Vec::as_slice).collect()),
    ] {
        let mut ex = Extractor::new(side, cfg.d, derive_seed(cfg.seed, &format!("extractor/{scale}")))?;
        let phi = PerceptualNet::new(derive_seed(cfg.seed, &format!("extractor/{scale}/phi")));
        let mut disc = Discriminator::new(derive_seed(cfg.seed, &format!("extractor/{scale}/disc")));
        log::info!("training {scale} extractor on {} patches", data.len());
        let trace = train_extractor(&mut ex, &data, &cfg.extract, &phi, &mut disc)?;
        w.put(&format!("{scale}.isgw"), &ex.params.to_checkpoint_bytes())?;
        traces.push(trace);
    }
    w.put("trace.tsv", trace_tsv(&traces[0], &traces[1]).as_bytes())?;
    w.finish(cfg)?;
    let l1 = |t: &TrainTrace| (t.l1.first().copied().unwrap_or(f64::NAN), t.l1.last().copied().unwrap_or(f64::NAN));
    let (g0, g1) = l1(&traces[0]);
    let (l0, l1) = l1(&traces[1]);
    Ok(format!(
        "global extractor: {} patches, l1 {g0:.4} -> {g1:.4}; local extractor: {} patches, l1 {l0:.4} -> {l1:.4}",
        pool.len(),
        locals.len()
    ))
}

pub fn extract(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let synth = Upstream::open(cfg, "synth")?;
    let select = Upstream::open(cfg, "select")?;
    let ext = Upstream::open(cfg, "train-extractor")?;
    let global = extractor_checkpoint(&ext, "global.isgw", cfg.tile.p, cfg.d)?;
    let local = extractor_checkpoint(&ext, "local.isgw", cfg.tile.q, cfg.d)?;
    let (_, ids) = slide_ids(&synth)?;
    let mut w = StageWriter::new(cfg, "extract")?;
    let mut total = 0;
    for id in &ids {
        let patches = tile_coarse(&load_slide(&synth, id)?, &cfg.tile)?;
        let kept: Vec<&GlobalPatch> = selection_rows(&select, id)?
            .iter()
            .filter(|r| r.kept)
            .map(|r| &patches[r.patch_id])
            .collect();
        let store = feature_store(&kept, &global, &local, cfg)?;
        total += store.entries.len();
        w.put(&format!("{id}.isgf"), &store.to_bytes())?;
    }
    w.finish(cfg)?;
    Ok(format!("encoded {total} patches across {} slides", ids.len()))
}

fn load_tokens(cfg: &PipelineConfig, ids: &[String]) -> Result<BTreeMap<String, SlideTokens>, PipelineError> {
    let tile = Upstream::open(cfg, "tile")?;
    let feats = Upstream::open(cfg, "extract")?;
    let grid = read_grid(&tile)?;
    let mut out = BTreeMap::new();
    for id in ids {
        let store = FeatureStore::read(feats.read(&format!("{id}.isgf"))?.as_slice())?;
        let g = *grid.get(id).ok_or_else(|| malformed("grid", format!("no entry for {id}")))?;
        out.insert(id.clone(), SlideTokens::from_store(&store, g)?);
    }
    Ok(out)
}

pub fn train_predictor_stage(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let synth = Upstream::open(cfg, "synth")?;
    let (labels, ids) = slide_ids(&synth)?;
    let (train, held) = split(cfg, &ids)?;
    let tokens = load_tokens(cfg, &ids)?;
    let set = |ids: &[String]| -> Vec<LabeledSlide> { ids.iter().map(|id| (&tokens[id], labels.rows[id].as_slice())).collect() };
    let mut model = Predictor::new(cfg.predictor(), derive_seed(cfg.seed, "predictor/init"))?;
    let trace = train_predictor(&mut model, &set(&train), &set(&held), &cfg.train)?;
    let mut w = StageWriter::new(cfg, "train-predictor")?;
    w.put("model.isgw", &model.params.to_checkpoint_bytes())?;
    let mut t = String::from("#epoch\ttrain_loss\tval_pcc\n");
    for (e, (l, v)) in trace.train_loss.iter().zip(&trace.val_pcc).enumerate() {
        let v = v.map_or(String::from("NA"), |v| format!("{v:.9}"));
        let _ = writeln!(t, "{e}\t{l:.9}\t{v}");
    }
    w.put("trace.tsv", t.as_bytes())?;
    w.finish(cfg)?;
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
    Ok(format!("trained on {} slides, final loss {:.5}", train.len(), last(&trace.train_loss)))
}

/// Full chain for one raw image: tile, select, encode and forward.
pub fn predict_image(
    cfg: &PipelineConfig,
    img: &RasterImage,
    global: &Extractor,
    local: &Extractor,
    model: &Predictor,
) -> Result<Vec<f64>, PipelineError> {
    let patches = tile_coarse(img, &cfg.tile)?;
    let rows = score_and_select(cfg, &patches)?;
    let kept: Vec<&GlobalPatch> = rows.iter().filter(|r| r.kept).map(|r| &patches[r.patch_id]).collect();
    let store = feature_store(&kept, global, local, cfg)?;
    let grid = (img.height() / cfg.tile.p, img.width() / cfg.tile.p);
    let tokens = SlideTokens::from_store(&store, grid)?;
    Ok(model.predict_slide(&tokens, derive_seed(cfg.seed, "predict/cap"))?)
}

pub fn predict(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let synth = Upstream::open(cfg, "synth")?;
    let ext = Upstream::open(cfg, "train-extractor")?;
    let pred = Upstream::open(cfg, "train-predictor")?;
    let global = extractor_checkpoint(&ext, "global.isgw", cfg.tile.p, cfg.d)?;
    let local = extractor_checkpoint(&ext, "local.isgw", cfg.tile.q, cfg.d)?;
    let model = Predictor::from_params(cfg.predictor(), ParamStore::read_checkpoint(pred.read("model.isgw")?.as_slice())?)?;
    let (labels, ids) = slide_ids(&synth)?;

    let mut targets: Vec<(String, RasterImage)> = Vec::new();
    match &cfg.predict_slide {
        Some(path) => {
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            targets.push((id, crate::slide_io::load_raster(path)?));
        }
        None => {
            for id in split(cfg, &ids)?.1 {
                let img = load_slide(&synth, &id)?;
                targets.push((id, img));
            }
        }
    }
    let mut out = String::from("#slide_id\tgene_name\tprediction\tground_truth\n");
    for (id, img) in &targets {
        let y = predict_image(cfg, img, &global, &local, &model)?;
        let truth = labels.rows.get(id);
        for (g, (name, v)) in labels.genes.iter().zip(&y).enumerate() {
            let gt = truth.map_or(String::from("NA"), |t| format!("{:.9}", t[g]));
            let _ = writeln!(out, "{id}\t{name}\t{v:.9}\t{gt}");
        }
    }
    let mut w = StageWriter::new(cfg, "predict")?;
    w.put("predictions.tsv", out.as_bytes())?;
    w.finish(cfg)?;
    Ok(format!("predicted {} slides", targets.len()))
}

/// `(slide_id → (predictions, truths))` from a predictions file; rows
/// without ground truth are skipped.
pub fn parse_predictions(text: &str, genes: &[String]) -> Result<BTreeMap<String, (Vec<f64>, Vec<f64>)>, PipelineError> {
    let mut out: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(malformed("predictions", line));
        }
        if f[3] == "NA" {
            continue;
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| malformed("predictions", line));
        let e = out.entry(f[0].to_string()).or_default();
        if genes.get(e.0.len()).map(String::as_str) != Some(f[1]) {
            return Err(malformed("predictions", format!("unexpected gene order at {line:?}")));
        }
        e.0.push(num(f[2])?);
        e.1.push(num(f[3])?);
    }
    Ok(out)
}

/// Headline numbers written to `summary.tsv` by `evaluate`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub heldout_pcc: f64,
    pub per_gene: Vec<f64>,
    pub recall: f64,
    pub textured_cells: usize,
    pub kept_patches: usize,
    pub probe_trained: f64,
    pub probe_random: f64,
}

impl EvalSummary {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("#metric\tvalue\n");
        let _ = writeln!(s, "heldout_mean_pcc\t{:.9}", self.heldout_pcc);
        for (g, v) in self.per_gene.iter().enumerate() {
            let _ = writeln!(s, "heldout_pcc_gene_{g}\t{v:.9}");
        }
        let _ = writeln!(s, "selection_recall\t{:.9}", self.recall);
        let _ = writeln!(s, "textured_cells\t{}", self.textured_cells);
        let _ = writeln!(s, "kept_patches\t{}", self.kept_patches);
        let _ = writeln!(s, "probe_trained_pcc\t{:.9}", self.probe_trained);
        let _ = writeln!(s, "probe_random_pcc\t{:.9}", self.probe_random);
        s
    }
}

fn mean_feature(vectors: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for v in vectors {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b;
        }
    }
    let n = vectors.len().max(1) as f64;
    m.iter().map(|v| v / n).collect()
}

/// A constant prediction carries no information and scores 0.
fn scored_pcc(pred: &[f64], truth: &[f64], gene: &str) -> Result<f64, EvalError> {
    if pred.iter().all(|v| *v == pred[0]) {
        log::warn!("{gene}: constant prediction over held-out slides, scored 0");
        return Ok(0.0);
    }
    pcc(pred, truth)
}

fn probe_or_zero(feats: &[Vec<f64>], targets: &[Vec<f64>], cfg: &PipelineConfig, which: &str) -> Result<f64, EvalError> {
    match feature_probe(feats, targets, &cfg.probe) {
        Err(EvalError::ConstantInput) => {
            log::warn!("{which} probe: identical features on every slide, scored 0");
            Ok(0.0)
        }
        r => r.map(|p| p.mean_pcc),
    }
}

pub fn evaluate(cfg: &PipelineConfig) -> Result<EvalSummary, PipelineError> {
    let synth = Upstream::open(cfg, "synth")?;
    let select = Upstream::open(cfg, "select")?;
    let feats = Upstream::open(cfg, "extract")?;
    let pred = Upstream::open(cfg, "predict")?;
    let (labels, ids) = slide_ids(&synth)?;
    let (_, held) = split(cfg, &ids)?;

    let preds = parse_predictions(&pred.read_text("predictions.tsv")?, &labels.genes)?;
    let held: Vec<String> = held.into_iter().filter(|id| preds.contains_key(id)).collect();
    if held.len() < 2 {
        return Err(malformed("predictions", "need ground truth for at least two held-out slides"));
    }
    let p = gene_rows(&preds.iter().map(|(k, v)| (k.clone(), v.0.clone())).collect(), &held);
    let t = gene_rows(&preds.iter().map(|(k, v)| (k.clone(), v.1.clone())).collect(), &held);
    let per_gene = (0..labels.genes.len())
        .map(|g| {
            let col = |m: &[Vec<f64>]| m.iter().map(|r| r[g]).collect::<Vec<_>>();
            scored_pcc(&col(&p), &col(&t), &labels.genes[g])
        })
        .collect::<Result<Vec<_>, _>>()?;
    let heldout_pcc = per_gene.iter().sum::<f64>() / per_gene.len() as f64;
    let lines: Vec<ReportLine> = labels
        .genes
        .iter()
        .zip(&per_gene)
        .map(|(name, &pcc)| ReportLine { task: "expression".into(), gene: name.clone(), fold: cfg.holdout_fold.to_string(), pcc })
        .collect();

    let masks = parse_masks(&synth.read_text("masks.tsv")?)?;
    let (mut textured, mut hit, mut kept_total) = (0, 0, 0);
    let random = Extractor::new(cfg.tile.p, cfg.d, derive_seed(cfg.seed, "extractor/global"))?;
    let (mut trained_feats, mut random_feats) = (Vec::new(), Vec::new());
    for id in &ids {
        let mask = masks.get(id).ok_or_else(|| malformed("masks", format!("no entry for {id}")))?;
        let rows = selection_rows(&select, id)?;
        for r in &rows {
            let truth = mask.get(r.patch_id).copied().unwrap_or(false);
            textured += truth as usize;
            hit += (truth && r.kept) as usize;
            kept_total += r.kept as usize;
        }
        let store = FeatureStore::read(feats.read(&format!("{id}.isgf"))?.as_slice())?;
        let globals: Vec<Vec<f64>> = store.entries.iter().map(|e| e.global.iter().map(|&v| v as f64).collect()).collect();
        trained_feats.push(mean_feature(&globals, cfg.d));
        let patches = tile_coarse(&load_slide(&synth, id)?, &cfg.tile)?;
        let kept: Vec<&[u8]> = rows.iter().filter(|r| r.kept).map(|r| patches[r.patch_id].pixels.as_slice()).collect();
        random_feats.push(mean_feature(&random.encode_many(&kept)?, cfg.d));
    }
    let targets: Vec<Vec<f64>> = ids.iter().map(|id| labels.rows[id].clone()).collect();
    let probe_trained = probe_or_zero(&trained_feats, &targets, cfg, "trained")?;
    let probe_random = probe_or_zero(&random_feats, &targets, cfg, "random")?;

    let summary = EvalSummary {
        heldout_pcc,
        per_gene,
        recall: if textured == 0 { f64::NAN } else { hit as f64 / textured as f64 },
        textured_cells: textured,
        kept_patches: kept_total,
        probe_trained,
        probe_random,
    };
    let mut w = StageWriter::new(cfg, "evaluate")?;
    let mut report = Vec::new();
    write_eval_report(&mut report, &lines)?;
    w.put("report.tsv", &report)?;
    w.put("summary.tsv", summary.to_tsv().as_bytes())?;
    w.finish(cfg)?;
    Ok(summary)
}

/// Runs the gradient suite; any check over tolerance is a verification failure.
pub fn gradcheck() -> Result<Vec<CheckOutcome>, PipelineError> {
    let outcomes = gradient_suite(GRADCHECK_SEEDS)?;
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    for o in &outcomes {
        log::info!("{}: max rel err {:.3e} (tol {:.0e})", o.name, o.max_relative_error, o.tolerance);
    }
    if failed > 0 {
        return Err(PipelineError::VerificationFailed(failed));
    }
    Ok(outcomes)
}

/// Dispatches one subcommand and returns a human-readable result line.
pub fn run_subcommand(name: &str, cfg: &PipelineConfig) -> Result<String, PipelineError> {
    match name {
        "synth" => synth(cfg),
        "tile" => tile(cfg),
        "select" => select(cfg),
        "train-extractor" => train_extractors(cfg),
        "extract" => extract(cfg),
        "train-predictor" => train_predictor_stage(cfg),
        "predict" => predict(cfg),
        "evaluate" => evaluate(cfg).map(|s| {
            format!(
                "held-out mean PCC {:.4}; selection recall {:.4}; probe trained {:.4} vs random {:.4}",
                s.heldout_pcc, s.recall, s.probe_trained, s.probe_random
            )
        }),
        "gradcheck" => gradcheck().map(|o| format!("{} gradient checks passed", o.len())),
        other => Err(PipelineError::UnknownSubcommand(other.to_string())),
    }
}

/// Every stage from `synth` through `evaluate`.
pub fn run_all(cfg: &PipelineConfig) -> Result<EvalSummary, PipelineError> {
    for stage in &STAGES[..STAGES.len() - 1] {
        let msg = run_subcommand(stage, cfg)?;
        log::info!("{stage}: {msg}");
    }
    evaluate(cfg)
}

/// Paths of every artifact a completed run has recorded, relative to `root`.
pub fn recorded_artifacts(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for stage in STAGES {
        let up = Upstream::open(cfg, stage)?;
        out.push(up.dir.join(MANIFEST_NAME));
        out.extend(up.manifest.artifacts.keys().map(|k| up.dir.join(k)));
    }
    Ok(out)
}

pub fn relative_to<'a>(path: &'a Path, root: &Path) -> &'a Path {
    path.strip_prefix(root).unwrap_or(path)
}
