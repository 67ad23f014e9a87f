//! Patch feature extraction: a compact conv autoencoder per resolution,
//! a frozen random perceptual net and an optional discriminator.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diff::{Bound, DiffError, Graph, Optimizer, ParamStore, SgdMomentum, Tensor, Var};
use crate::slide_io::LocalPatchGrid;

#[derive(Debug, thiserror::Error)]
pub enum FeatError {
    #[error("patch has {got} bytes, extractor expects side {side} ({expected} bytes)")]
    WrongPatchSize { side: usize, expected: usize, got: usize },
    #[error("invalid extractor config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("training diverged at step {0}")]
    DivergedLoss(usize),
    #[error("feature store: {0}")]
    Format(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const ENC_CH: [usize; 4] = [3, 16, 32, 64];
const PHI_CH: [usize; 4] = [3, 8, 16, 16];
const DISC_CH: [usize; 3] = [3, 8, 16];

/// Scales RGB bytes into [0, 1].
pub fn normalize_pixels(px: &[u8]) -> Vec<f64> {
    px.iter().map(|&v| v as f64 / 255.0).collect()
}

fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn conv_relu(g: &mut Graph, x: Var, b: &Bound, name: &str, stride: usize) -> Result<Var, DiffError> {
    let y = g.conv2d(x, b[&format!("{name}.w") as &str], stride, 1)?;
    let y = g.add_bias(y, b[&format!("{name}.b") as &str])?;
    Ok(g.relu(y))
}

/// Encoder/decoder pair for square patches of one side length.
#[derive(Clone, Debug)]
pub struct Extractor {
    side: usize,
    d: usize,
    pub params: ParamStore,
}

impl Extractor {
    pub fn new(side: usize, d: usize, seed: u64) -> Result<Self, FeatError> {
        if side < 8 || side % 8 != 0 {
            return Err(FeatError::InvalidConfig(format!("patch side {side} must be a positive multiple of 8")));
        }
        if d == 0 {
            return Err(FeatError::InvalidConfig("feature dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for i in 0..3 {
            let (ci, co) = (ENC_CH[i], ENC_CH[i + 1]);
            p.insert(format!("enc.conv{i}.w"), he(&[3, 3, ci, co], 9 * ci, &mut rng));
            p.insert(format!("enc.conv{i}.b"), Tensor::zeros(&[co]));
        }
        let flat = (side / 8) * (side / 8) * ENC_CH[3];
        p.insert("enc.fc.w", Tensor::randn(&[flat, d], (1.0 / flat as f64).sqrt(), &mut rng));
        p.insert("enc.fc.b", Tensor::zeros(&[d]));
        p.insert("dec.fc.w", he(&[d, flat], d, &mut rng));
        p.insert("dec.fc.b", Tensor::zeros(&[flat]));
        for i in 0..3 {
            let (ci, co) = (ENC_CH[3 - i], ENC_CH[2 - i]);
            let w = if i == 2 {
                // small output layer: reconstructions start near zero
                Tensor::randn(&[3, 3, ci, co], 0.1 * (1.0 / (9 * ci) as f64).sqrt(), &mut rng)
            } else {
                he(&[3, 3, ci, co], 9 * ci, &mut rng)
            };
            p.insert(format!("dec.conv{i}.w"), w);
            p.insert(format!("dec.conv{i}.b"), Tensor::zeros(&[co]));
        }
        Ok(Extractor { side, d, params: p })
    }

    pub fn from_params(side: usize, d: usize, params: ParamStore) -> Result<Self, FeatError> {
        let reference = Extractor::new(side, d, 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(FeatError::InvalidConfig(format!("checkpoint lacks {name} with shape {:?}", t.shape()))),
            }
        }
        Ok(Extractor { side, d, params })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Zeroes the final encoder layer.
    pub fn zero_head(&mut self) {
        for name in ["enc.fc.w", "enc.fc.b"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    fn check_len(&self, px: &[u8]) -> Result<(), FeatError> {
        let expected = self.side * self.side * 3;
        if px.len() != expected {
            return Err(FeatError::WrongPatchSize { side: self.side, expected, got: px.len() });
        }
        Ok(())
    }

    pub fn batch_tensor(&self, patches: &[&[u8]]) -> Result<Tensor, FeatError> {
        let mut data = Vec::with_capacity(patches.len() * self.side * self.side * 3);
        for p in patches {
            self.check_len(p)?;
            data.extend(p.iter().map(|&v| v as f64 / 255.0));
        }
        Ok(Tensor::new(&[patches.len(), self.side, self.side, 3], data)?)
    }

    /// `x [n,s,s,3]` → `[n,d]`.
    pub fn encode_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var, DiffError> {
        let n = g.shape(x)[0];
        let mut h = x;
        for i in 0..3 {
            h = conv_relu(g, h, b, &format!("enc.conv{i}"), 2)?;
        }
        let flat = g.value(h).numel() / n;
        let h = g.reshape(h, &[n, flat])?;
        let z = g.matmul(h, b["enc.fc.w"])?;
        g.add_bias(z, b["enc.fc.b"])
    }

    /// `z [n,d]` → `[n,s,s,3]`.
    pub fn decode_graph(&self, g: &mut Graph, b: &Bound, z: Var) -> Result<Var, DiffError> {
        let n = g.shape(z)[0];
        let s8 = self.side / 8;
        let h = g.matmul(z, b["dec.fc.w"])?;
        let h = g.add_bias(h, b["dec.fc.b"])?;
        let h = g.relu(h);
        let mut h = g.reshape(h, &[n, s8, s8, ENC_CH[3]])?;
        for i in 0..3 {
            h = g.upsample2x(h)?;
            let name = format!("dec.conv{i}");
            if i == 2 {
                let y = g.conv2d(h, b[&format!("{name}.w") as &str], 1, 1)?;
                h = g.add_bias(y, b[&format!("{name}.b") as &str])?;
            } else {
                h = conv_relu(g, h, b, &name, 1)?;
            }
        }
        Ok(h)
    }

    /// Features for a batch of patches, row-major `[n][d]`.
    pub fn encode_many(&self, patches: &[&[u8]]) -> Result<Vec<Vec<f64>>, FeatError> {
        const CHUNK: usize = 32;
        let parts: Vec<Result<Vec<Vec<f64>>, FeatError>> = patches
            .par_chunks(CHUNK)
            .map(|chunk| {
                let x = self.batch_tensor(chunk)?;
                let mut g = Graph::new();
                let b = self.params.bind_frozen(&mut g);
                let xv = g.constant(x);
                let z = self.encode_graph(&mut g, &b, xv)?;
                Ok(g.value(z).data().chunks(self.d).map(<[f64]>::to_vec).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(patches.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn encode(&self, patch: &[u8]) -> Result<Vec<f64>, FeatError> {
        Ok(self.encode_many(&[patch])?.remove(0))
    }

    /// Autoencoder output for a batch, `[n,s,s,3]` in normalized units.
    pub fn reconstruct(&self, patches: &[&[u8]]) -> Result<Tensor, FeatError> {
        let x = self.batch_tensor(patches)?;
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let xv = g.constant(x);
        let z = self.encode_graph(&mut g, &b, xv)?;
        let y = self.decode_graph(&mut g, &b, z)?;
        Ok(g.value(y).clone())
    }
}

/// Encodes every fine patch of a grid into a `cube_side × cube_side × d` cube.
pub fn build_local_cube(grid: &LocalPatchGrid, local: &Extractor) -> Result<Tensor, FeatError> {
    let refs: Vec<&[u8]> = grid.patches.iter().map(Vec::as_slice).collect();
    let feats = local.encode_many(&refs)?;
    let data = feats.into_iter().flatten().collect();
    Ok(Tensor::new(&[grid.cube_side, grid.cube_side, local.dim()], data)?)
}

/// Fixed random conv stack used as the perceptual feature map.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    pub params: ParamStore,
}

impl PerceptualNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for i in 0..3 {
            let (ci, co) = (PHI_CH[i], PHI_CH[i + 1]);
            p.insert(format!("phi.conv{i}.w"), he(&[3, 3, ci, co], 9 * ci, &mut rng));
            p.insert(format!("phi.conv{i}.b"), Tensor::zeros(&[co]));
        }
        PerceptualNet { params: p }
    }

    /// Activations of all three layers.
    pub fn features(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Vec<Var>, DiffError> {
        let mut out = Vec::with_capacity(3);
        let mut h = x;
        for i in 0..3 {
            h = conv_relu(g, h, b, &format!("phi.conv{i}"), 2)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Small conv classifier producing one logit per patch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for i in 0..2 {
            let (ci, co) = (DISC_CH[i], DISC_CH[i + 1]);
            p.insert(format!("disc.conv{i}.w"), he(&[3, 3, ci, co], 9 * ci, &mut rng));
            p.insert(format!("disc.conv{i}.b"), Tensor::zeros(&[co]));
        }
        p.insert("disc.fc.w", Tensor::randn(&[DISC_CH[2], 1], (1.0 / DISC_CH[2] as f64).sqrt(), &mut rng));
        p.insert("disc.fc.b", Tensor::zeros(&[1]));
        Discriminator { params: p }
    }

    /// `x [n,s,s,3]` → logits `[n,1]`.
    pub fn logits(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for i in 0..2 {
            h = conv_relu(g, h, b, &format!("disc.conv{i}"), 2)?;
        }
        let h = g.mean_pool_spatial(h)?;
        let y = g.matmul(h, b["disc.fc.w"])?;
        g.add_bias(y, b["disc.fc.b"])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub lpips_like: f64,
    pub gen_adv: f64,
    pub disc_adv: f64,
}

struct LossVars {
    l1: Var,
    lpips: Var,
    gen_adv: Var,
    disc_adv: Var,
}

fn loss_vars(
    g: &mut Graph,
    x: Var,
    x_hat: Var,
    phi: (&PerceptualNet, &Bound),
    disc: (&Discriminator, &Bound),
) -> Result<LossVars, DiffError> {
    let l1 = g.l1_loss(x_hat, x)?;
    let fx = phi.0.features(g, phi.1, x)?;
    let fy = phi.0.features(g, phi.1, x_hat)?;
    let mut lpips = None;
    for (a, b) in fy.into_iter().zip(fx) {
        let t = g.l2_loss(a, b)?;
        lpips = Some(match lpips {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    let lpips = lpips.expect("three layers");
    let real = disc.0.logits(g, disc.1, x)?;
    let fake = disc.0.logits(g, disc.1, x_hat)?;
    let neg_real = g.scale(real, -1.0);
    let neg_fake = g.scale(fake, -1.0);
    let sp_real = g.softplus(neg_real);
    let sp_fake = g.softplus(fake);
    let gen = g.softplus(neg_fake);
    let d_real = g.mean_all(sp_real);
    let d_fake = g.mean_all(sp_fake);
    let disc_adv = g.add(d_real, d_fake)?;
    let gen_adv = g.mean_all(gen);
    Ok(LossVars { l1, lpips, gen_adv, disc_adv })
}

/// All loss terms for a given input and reconstruction, both `[n,s,s,3]`.
pub fn loss_terms(x: &Tensor, x_hat: &Tensor, phi: &PerceptualNet, disc: &Discriminator) -> Result<LossTerms, FeatError> {
    if x.shape() != x_hat.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "loss_terms",
            detail: format!("{:?} vs {:?}", x.shape(), x_hat.shape()),
        }
        .into());
    }
    let mut g = Graph::new();
    let pb = phi.params.bind_frozen(&mut g);
    let db = disc.params.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let yv = g.constant(x_hat.clone());
    let v = loss_vars(&mut g, xv, yv, (phi, &pb), (disc, &db))?;
    Ok(LossTerms {
        l1: g.value(v.l1).item(),
        lpips_like: g.value(v.lpips).item(),
        gen_adv: g.value(v.gen_adv).item(),
        disc_adv: g.value(v.disc_adv).item(),
    })
}

/// Loss terms of the autoencoder on a batch of patches.
pub fn reconstruction_losses(
    patches: &[&[u8]],
    ex: &Extractor,
    phi: &PerceptualNet,
    disc: &Discriminator,
) -> Result<LossTerms, FeatError> {
    let x = ex.batch_tensor(patches)?;
    let y = ex.reconstruct(patches)?;
    loss_terms(&x, &y, phi, disc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch: usize,
    pub adversarial: bool,
    pub disc_lr: f64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        ExtractorTrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            steps: 500,
            batch: 8,
            adversarial: false,
            disc_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainTrace {
    /// Total generator loss per step.
    pub total: Vec<f64>,
    pub l1: Vec<f64>,
    pub lpips_like: Vec<f64>,
    pub gen_adv: Vec<f64>,
}

pub const MIN_TRAIN_PATCHES: usize = 64;

/// Trains `ex` in place. Batches cycle through `patches` in the given order;
/// `phi` stays fixed and `disc` only moves when the adversarial term is on.
pub fn train_extractor(
    ex: &mut Extractor,
    patches: &[&[u8]],
    cfg: &ExtractorTrainConfig,
    phi: &PerceptualNet,
    disc: &mut Discriminator,
) -> Result<TrainTrace, FeatError> {
    if patches.is_empty() {
        return Err(FeatError::EmptyDataset);
    }
    if patches.len() < MIN_TRAIN_PATCHES {
        return Err(FeatError::InvalidConfig(format!(
            "need at least {MIN_TRAIN_PATCHES} training patches, got {}",
            patches.len()
        )));
    }
    if cfg.batch == 0 {
        return Err(FeatError::InvalidConfig("batch size must be positive".into()));
    }
    for p in patches {
        ex.check_len(p)?;
    }
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut disc_opt = SgdMomentum::new(cfg.disc_lr, cfg.momentum);
    let mut trace = TrainTrace::default();
    let n = patches.len();
    for step in 0..cfg.steps {
        let batch: Vec<&[u8]> = (0..cfg.batch).map(|j| patches[(step * cfg.batch + j) % n]).collect();
        let x = ex.batch_tensor(&batch)?;

        let mut g = Graph::new();
        let eb = ex.params.bind(&mut g);
        let pb = phi.params.bind_frozen(&mut g);
        let db = disc.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let z = ex.encode_graph(&mut g, &eb, xv)?;
        let y = ex.decode_graph(&mut g, &eb, z)?;
        let v = loss_vars(&mut g, xv, y, (phi, &pb), (disc, &db))?;
        let mut total = g.add(v.l1, v.lpips)?;
        if cfg.adversarial {
            total = g.add(total, v.gen_adv)?;
        }
        let loss = g.value(total).item();
        if !loss.is_finite() {
            return Err(FeatError::DivergedLoss(step));
        }
        trace.total.push(loss);
        trace.l1.push(g.value(v.l1).item());
        trace.lpips_like.push(g.value(v.lpips).item());
        trace.gen_adv.push(g.value(v.gen_adv).item());
        let mut grads = g.backward(total)?;
        let named = eb.named_grads(&g, &mut grads);
        opt.step(&mut ex.params, &named);

        if cfg.adversarial {
            let x_hat = g.value(y).clone();
            let mut dg = Graph::new();
            let pb = phi.params.bind_frozen(&mut dg);
            let db = disc.params.bind(&mut dg);
            let xv = dg.constant(x);
            let yv = dg.constant(x_hat);
            let v = loss_vars(&mut dg, xv, yv, (phi, &pb), (disc, &db))?;
            if !dg.value(v.disc_adv).item().is_finite() {
                return Err(FeatError::DivergedLoss(step));
            }
            let mut grads = dg.backward(v.disc_adv)?;
            let named = db.named_grads(&dg, &mut grads);
            disc_opt.step(&mut disc.params, &named);
        }
    }
    Ok(trace)
}

pub const STORE_MAGIC: &[u8; 4] = b"ISGF";
pub const STORE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEntry {
    pub patch_id: u32,
    pub grid_row: u32,
    pub grid_col: u32,
    pub global: Vec<f32>,
    /// Row-major `cube_side × cube_side × d`.
    pub cube: Vec<f32>,
}

/// Global features and local cubes for the selected patches of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub d: usize,
    pub cube_side: usize,
    pub entries: Vec<FeatureEntry>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<(), FeatError> {
    let v = u32::try_from(v).map_err(|_| FeatError::Format(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32, FeatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| FeatError::Format(format!("truncated store: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, FeatError> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|e| FeatError::Format(format!("truncated store: {e}")))?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl FeatureStore {
    pub fn new(d: usize, cube_side: usize) -> Self {
        FeatureStore { d, cube_side, entries: Vec::new() }
    }

    pub fn push(&mut self, patch_id: usize, grid_row: usize, grid_col: usize, global: &[f64], cube: &Tensor) -> Result<(), FeatError> {
        if global.len() != self.d || cube.shape() != [self.cube_side, self.cube_side, self.d] {
            return Err(FeatError::Format(format!(
                "entry shapes {} / {:?} do not match d={} cube_side={}",
                global.len(),
                cube.shape(),
                self.d,
                self.cube_side
            )));
        }
        self.entries.push(FeatureEntry {
            patch_id: patch_id as u32,
            grid_row: grid_row as u32,
            grid_col: grid_col as u32,
            global: global.iter().map(|&v| v as f32).collect(),
            cube: cube.data().iter().map(|&v| v as f32).collect(),
        });
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), FeatError> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        put_u32(&mut w, self.d)?;
        put_u32(&mut w, self.cube_side)?;
        put_u32(&mut w, self.entries.len())?;
        for e in &self.entries {
            for v in [e.patch_id, e.grid_row, e.grid_col] {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in e.global.iter().chain(&e.cube) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, FeatError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| FeatError::Format(format!("truncated store: {e}")))?;
        if &magic != STORE_MAGIC {
            return Err(FeatError::Format("bad magic".into()));
        }
        let version = get_u32(&mut r)?;
        if version != STORE_VERSION {
            return Err(FeatError::Format(format!("unsupported version {version}")));
        }
        let d = get_u32(&mut r)? as usize;
        let cube_side = get_u32(&mut r)? as usize;
        let count = get_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let patch_id = get_u32(&mut r)?;
            let grid_row = get_u32(&mut r)?;
            let grid_col = get_u32(&mut r)?;
            let global = get_f32s(&mut r, d)?;
            let cube = get_f32s(&mut r, cube_side * cube_side * d)?;
            entries.push(FeatureEntry { patch_id, grid_row, grid_col, global, cube });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(FeatError::Format("trailing bytes".into()));
        }
        Ok(FeatureStore { d, cube_side, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip() {
        let mut s = FeatureStore::new(2, 2);
        let cube = Tensor::new(&[2, 2, 2], (0..8).map(|v| v as f64 * 0.5).collect()).unwrap();
        s.push(3, 0, 3, &[1.0, -2.0], &cube).unwrap();
        s.push(9, 2, 1, &[0.25, 4.0], &cube).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"ISGF");
        assert_eq!(bytes.len(), 20 + 2 * (12 + 4 * (2 + 8)));
        assert_eq!(FeatureStore::read(&bytes[..]).unwrap(), s);
        assert!(FeatureStore::read(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_bad_sides() {
        assert!(Extractor::new(12, 8, 0).is_err());
        assert!(Extractor::new(16, 0, 0).is_err());
        let ex = Extractor::new(16, 4, 0).unwrap();
        assert!(matches!(ex.encode(&[0u8; 10]), Err(FeatError::WrongPatchSize { .. })));
    }
}
