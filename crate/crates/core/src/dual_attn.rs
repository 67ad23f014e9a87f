//! Dual attention network: per-patch refinement of the global feature and
//! local cube by an MBCONV stack interleaved with attention fusion blocks,
//! then a small transformer over pooled cubes predicting the gene vector.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{clip_grad_norm, Adam, Bound, DiffError, Graph, Optimizer, ParamStore, Tensor, Var};
use crate::eval::mean_gene_pcc;
use crate::features::FeatureStore;
use crate::seeds::derive_seed;

#[derive(Debug, thiserror::Error)]
pub enum AttnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token list is empty")]
    EmptyTokenList,
    #[error("{got} tokens exceed the cap of {cap}")]
    TooManyTokens { got: usize, cap: usize },
    #[error("no trainable slides")]
    EmptyDataset,
    #[error("training diverged in epoch {0}")]
    DivergedLoss(usize),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Weights of one attention fusion block.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    /// `[cube_side², d]`
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wr: Tensor,
    /// `[cube_side², d]`
    pub wz: Tensor,
    pub wp: Tensor,
    pub wf: Tensor,
}

const FUSION_NAMES: [&str; 7] = ["wq", "wk", "wv", "wr", "wz", "wp", "wf"];

impl FusionParams {
    pub fn zeros(cube_side: usize, d: usize) -> Self {
        let s2 = cube_side * cube_side;
        FusionParams {
            wq: Tensor::zeros(&[s2, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wr: Tensor::zeros(&[d, d]),
            wz: Tensor::zeros(&[s2, d]),
            wp: Tensor::zeros(&[d, d]),
            wf: Tensor::zeros(&[d, d]),
        }
    }

    pub fn random(cube_side: usize, d: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let s2 = cube_side * cube_side;
        FusionParams {
            wq: Tensor::randn(&[s2, d], std, rng),
            wk: Tensor::randn(&[d, d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
            wr: Tensor::randn(&[d, d], std, rng),
            wz: Tensor::randn(&[s2, d], std, rng),
            wp: Tensor::randn(&[d, d], std, rng),
            wf: Tensor::randn(&[d, d], std, rng),
        }
    }

    fn tensors(&self) -> [&Tensor; 7] {
        [&self.wq, &self.wk, &self.wv, &self.wr, &self.wz, &self.wp, &self.wf]
    }

    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        for (name, t) in FUSION_NAMES.iter().zip(self.tensors()) {
            store.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self, AttnError> {
        let get = |n: &str| {
            let key = format!("{prefix}.{n}");
            store.get(&key).cloned().ok_or(AttnError::MissingParam(key))
        };
        Ok(FusionParams {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wr: get("wr")?,
            wz: get("wz")?,
            wp: get("wp")?,
            wf: get("wf")?,
        })
    }
}

/// Graph handles of one fusion block's weights.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wr: Var,
    pub wz: Var,
    pub wp: Var,
    pub wf: Var,
}

impl FusionVars {
    pub fn from_bound(b: &Bound, prefix: &str) -> Self {
        let v = |n: &str| b[&format!("{prefix}.{n}") as &str];
        FusionVars {
            wq: v("wq"),
            wk: v("wk"),
            wv: v("wv"),
            wr: v("wr"),
            wz: v("wz"),
            wp: v("wp"),
            wf: v("wf"),
        }
    }

    fn constants(g: &mut Graph, p: &FusionParams) -> Self {
        let [wq, wk, wv, wr, wz, wp, wf] = p.tensors().map(|t| g.constant(t.clone()));
        FusionVars { wq, wk, wv, wr, wz, wp, wf }
    }
}

fn cube_dims(g: &Graph, f: Var, r: Var) -> Result<(usize, usize, usize), AttnError> {
    match (g.shape(f), g.shape(r)) {
        (&[n, d], &[n2, s1, s2, d2]) if n == n2 && d == d2 && s1 == s2 => Ok((n, s1, d)),
        (a, b) => Err(AttnError::ShapeMismatch(format!("f {a:?} with cube {b:?}"))),
    }
}

/// `R·W` applied at every spatial position of `r [n,s,s,d]`.
fn per_position(g: &mut Graph, r: Var, w: Var) -> Result<Var, DiffError> {
    let shape = g.shape(r).to_vec();
    let d = shape[3];
    let rows = g.value(r).numel() / d;
    let flat = g.reshape(r, &[rows, d])?;
    let y = g.matmul(flat, w)?;
    let dout = g.shape(y)[1];
    g.reshape(y, &[shape[0], shape[1], shape[2], dout])
}

/// Sigmoid gate map `A [n,s,s,d]` of the local update.
pub fn local_gates_graph(g: &mut Graph, f: Var, r: Var, w: &FusionVars) -> Result<Var, AttnError> {
    let (n, s, _) = cube_dims(g, f, r)?;
    if g.shape(w.wq)[0] != s * s {
        return Err(AttnError::ShapeMismatch(format!("query weights {:?} for cube side {s}", g.shape(w.wq))));
    }
    let q = g.matmul_nt(f, w.wq)?;
    let q = g.reshape(q, &[n, s, s, 1])?;
    let k = per_position(g, r, w.wk)?;
    let qk = g.hadamard_broadcast(q, k)?;
    Ok(g.sigmoid(qk))
}

/// Batched local update: `f [n,d]`, `r [n,s,s,d]` → `[n,s,s,d]`.
pub fn local_update_graph(g: &mut Graph, f: Var, r: Var, w: &FusionVars) -> Result<Var, AttnError> {
    let a = local_gates_graph(g, f, r, w)?;
    let v = per_position(g, r, w.wv)?;
    let av = g.mul(a, v)?;
    Ok(per_position(g, av, w.wr)?)
}

/// Spatial attention weights `Z [n,s,s,1]` of the global update.
pub fn global_weights_graph(g: &mut Graph, f: Var, r: Var, w: &FusionVars) -> Result<Var, AttnError> {
    let (n, s, _) = cube_dims(g, f, r)?;
    if g.shape(w.wz)[0] != s * s {
        return Err(AttnError::ShapeMismatch(format!("score weights {:?} for cube side {s}", g.shape(w.wz))));
    }
    let z = g.matmul_nt(f, w.wz)?;
    let z = g.reshape(z, &[n, s, s, 1])?;
    Ok(g.softmax_spatial(z)?)
}

/// Batched global update: `f [n,d]`, `r [n,s,s,d]` → `[n,d]`.
pub fn global_update_graph(g: &mut Graph, f: Var, r: Var, w: &FusionVars) -> Result<Var, AttnError> {
    let z = global_weights_graph(g, f, r, w)?;
    let p = per_position(g, r, w.wp)?;
    let zp = g.hadamard_broadcast(z, p)?;
    let pooled = g.sum_spatial(zp)?;
    Ok(g.matmul(pooled, w.wf)?)
}

fn single(g: &mut Graph, f: &[f64], r: &Tensor) -> Result<(Var, Var), AttnError> {
    let &[s1, s2, d] = r.shape() else {
        return Err(AttnError::ShapeMismatch(format!("cube {:?}", r.shape())));
    };
    if f.len() != d {
        return Err(AttnError::ShapeMismatch(format!("f has {} values, cube depth {d}", f.len())));
    }
    let fv = g.constant(Tensor::new(&[1, d], f.to_vec())?);
    let rv = g.constant(r.clone().reshaped(&[1, s1, s2, d])?);
    Ok((fv, rv))
}

/// Local feature update of one cube.
pub fn local_feature_update(f: &[f64], r: &Tensor, p: &FusionParams) -> Result<Tensor, AttnError> {
    let mut g = Graph::new();
    let (fv, rv) = single(&mut g, f, r)?;
    let w = FusionVars::constants(&mut g, p);
    let out = local_update_graph(&mut g, fv, rv, &w)?;
    Ok(g.value(out).clone().reshaped(r.shape())?)
}

/// Global feature update of one (f, cube) pair.
pub fn global_feature_update(f: &[f64], r: &Tensor, p: &FusionParams) -> Result<Vec<f64>, AttnError> {
    let mut g = Graph::new();
    let (fv, rv) = single(&mut g, f, r)?;
    let w = FusionVars::constants(&mut g, p);
    let out = global_update_graph(&mut g, fv, rv, &w)?;
    Ok(g.value(out).data().to_vec())
}

/// Gate map `A` (shaped like the cube) and attention map `Z` (`s×s×1`).
pub fn fusion_maps(f: &[f64], r: &Tensor, p: &FusionParams) -> Result<(Tensor, Tensor), AttnError> {
    let mut g = Graph::new();
    let (fv, rv) = single(&mut g, f, r)?;
    let w = FusionVars::constants(&mut g, p);
    let a = local_gates_graph(&mut g, fv, rv, &w)?;
    let z = global_weights_graph(&mut g, fv, rv, &w)?;
    let s = r.shape()[0];
    Ok((
        g.value(a).clone().reshaped(r.shape())?,
        g.value(z).clone().reshaped(&[s, s, 1])?,
    ))
}

/// Inverted-residual block weights (no biases).
#[derive(Clone, Debug, PartialEq)]
pub struct MbconvParams {
    /// `[1,1,d,e·d]`
    pub expand: Tensor,
    /// `[3,3,e·d]`
    pub depthwise: Tensor,
    /// `[1,1,e·d,d]`
    pub project: Tensor,
}

impl MbconvParams {
    pub fn zeros(d: usize, ratio: usize) -> Self {
        let e = d * ratio;
        MbconvParams {
            expand: Tensor::zeros(&[1, 1, d, e]),
            depthwise: Tensor::zeros(&[3, 3, e]),
            project: Tensor::zeros(&[1, 1, e, d]),
        }
    }

    pub fn random(d: usize, ratio: usize, project_gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let e = d * ratio;
        MbconvParams {
            expand: Tensor::randn(&[1, 1, d, e], (2.0 / d as f64).sqrt(), rng),
            depthwise: Tensor::randn(&[3, 3, e], (2.0 / 9.0f64).sqrt(), rng),
            project: Tensor::randn(&[1, 1, e, d], project_gain * (1.0 / e as f64).sqrt(), rng),
        }
    }

    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.expand"), self.expand.clone());
        store.insert(format!("{prefix}.dw"), self.depthwise.clone());
        store.insert(format!("{prefix}.project"), self.project.clone());
    }
}

/// `r [n,s,s,d]` → `r + project(relu(dw(relu(expand(r)))))`.
pub fn mbconv_graph(g: &mut Graph, r: Var, expand: Var, dw: Var, project: Var) -> Result<Var, DiffError> {
    let h = g.conv2d(r, expand, 1, 0)?;
    let h = g.relu(h);
    let h = g.depthwise_conv2d(h, dw, 1, 1)?;
    let h = g.relu(h);
    let h = g.conv2d(h, project, 1, 0)?;
    g.add(r, h)
}

pub fn mbconv_block(r: &Tensor, p: &MbconvParams) -> Result<Tensor, AttnError> {
    let &[s1, s2, d] = r.shape() else {
        return Err(AttnError::ShapeMismatch(format!("cube {:?}", r.shape())));
    };
    let mut g = Graph::new();
    let rv = g.constant(r.clone().reshaped(&[1, s1, s2, d])?);
    let e = g.constant(p.expand.clone());
    let dw = g.constant(p.depthwise.clone());
    let pr = g.constant(p.project.clone());
    let out = mbconv_graph(&mut g, rv, e, dw, pr)?;
    Ok(g.value(out).clone().reshaped(r.shape())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackConfig {
    pub blocks: usize,
    pub interval: usize,
    pub expansion: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig { blocks: 10, interval: 2, expansion: 4 }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<(), AttnError> {
        if self.blocks == 0 || self.interval == 0 || self.interval > self.blocks || self.expansion == 0 {
            return Err(AttnError::InvalidConfig(format!(
                "stack needs B ≥ 1, 1 ≤ k ≤ B and a positive expansion (B={}, k={}, e={})",
                self.blocks, self.interval, self.expansion
            )));
        }
        Ok(())
    }

    pub fn fusion_count(&self) -> usize {
        self.blocks / self.interval
    }
}

/// Weights of the whole MBCONV/fusion stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackParams {
    pub blocks: Vec<MbconvParams>,
    pub fusions: Vec<FusionParams>,
}

impl StackParams {
    pub fn zeros(cfg: &StackConfig, cube_side: usize, d: usize) -> Self {
        StackParams {
            blocks: (0..cfg.blocks).map(|_| MbconvParams::zeros(d, cfg.expansion)).collect(),
            fusions: (0..cfg.fusion_count()).map(|_| FusionParams::zeros(cube_side, d)).collect(),
        }
    }

    pub fn random(cfg: &StackConfig, cube_side: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        StackParams {
            blocks: (0..cfg.blocks).map(|_| MbconvParams::random(d, cfg.expansion, 0.5, rng)).collect(),
            fusions: (0..cfg.fusion_count())
                .map(|_| {
                    let mut p = FusionParams::random(cube_side, d, (1.0 / d as f64).sqrt(), rng);
                    // gates start near 0.5; keep the cube scale through the block
                    for w in [&mut p.wv, &mut p.wr] {
                        w.data_mut().iter_mut().for_each(|v| *v *= std::f64::consts::SQRT_2);
                    }
                    p
                })
                .collect(),
        }
    }

    pub fn insert_into(&self, store: &mut ParamStore) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.insert_into(store, &format!("stack.mb{i}"));
        }
        for (j, f) in self.fusions.iter().enumerate() {
            f.insert_into(store, &format!("stack.fuse{j}"));
        }
    }
}

/// Runs the stack on a batch; returns the final pair and the number of
/// fusion blocks applied.
pub fn fused_stack_graph(
    g: &mut Graph,
    f: Var,
    r: Var,
    cfg: &StackConfig,
    b: &Bound,
) -> Result<(Var, Var, usize), AttnError> {
    cfg.validate()?;
    cube_dims(g, f, r)?;
    let (mut f, mut r) = (f, r);
    let mut fusions = 0;
    for i in 0..cfg.blocks {
        let p = format!("stack.mb{i}");
        let get = |n: &str| b.get(&format!("{p}.{n}")).ok_or_else(|| AttnError::MissingParam(format!("{p}.{n}")));
        r = mbconv_graph(g, r, get("expand")?, get("dw")?, get("project")?)?;
        if (i + 1) % cfg.interval == 0 {
            let prefix = format!("stack.fuse{fusions}");
            if b.get(&format!("{prefix}.wq")).is_none() {
                return Err(AttnError::MissingParam(prefix));
            }
            let w = FusionVars::from_bound(b, &prefix);
            let r_new = local_update_graph(g, f, r, &w)?;
            let f_new = global_update_graph(g, f, r, &w)?;
            r = r_new;
            f = f_new;
            fusions += 1;
        }
    }
    Ok((f, r, fusions))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackOutput {
    pub f: Vec<f64>,
    pub r: Tensor,
    pub fusions: usize,
}

pub fn fused_stack(f: &[f64], r: &Tensor, cfg: &StackConfig, p: &StackParams) -> Result<StackOutput, AttnError> {
    cfg.validate()?;
    if p.blocks.len() != cfg.blocks || p.fusions.len() != cfg.fusion_count() {
        return Err(AttnError::InvalidConfig("stack parameters do not match the config".into()));
    }
    let mut store = ParamStore::new();
    p.insert_into(&mut store);
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let (fv, rv) = single(&mut g, f, r)?;
    let (fo, ro, fusions) = fused_stack_graph(&mut g, fv, rv, cfg, &b)?;
    Ok(StackOutput {
        f: g.value(fo).data().to_vec(),
        r: g.value(ro).clone().reshaped(r.shape())?,
        fusions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub token_cap: usize,
    pub positional: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            token_cap: 256,
            positional: true,
        }
    }
}

/// 2D sinusoidal encoding of a normalized `(row, col)` position.
pub fn positional_encoding(row: f64, col: f64, d: usize) -> Vec<f64> {
    let per_axis = d / 2;
    let freqs = per_axis / 2;
    let mut out = vec![0.0; d];
    for (axis, u) in [row, col].into_iter().enumerate() {
        for k in 0..freqs {
            let w = std::f64::consts::PI * 64f64.powf(k as f64 / freqs.max(2).saturating_sub(1) as f64);
            out[axis * per_axis + 2 * k] = (u * w).sin();
            out[axis * per_axis + 2 * k + 1] = (u * w).cos();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictorConfig {
    pub cube_side: usize,
    pub d: usize,
    pub genes: usize,
    pub stack: StackConfig,
    pub vit: VitConfig,
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), AttnError> {
        self.stack.validate()?;
        let v = &self.vit;
        if self.d == 0 || self.cube_side == 0 || self.genes == 0 {
            return Err(AttnError::InvalidConfig("d, cube side and gene count must be positive".into()));
        }
        if v.layers == 0 || v.heads == 0 || self.d % v.heads != 0 {
            return Err(AttnError::InvalidConfig(format!(
                "transformer needs ≥1 layer and d={} divisible by heads={}",
                self.d, v.heads
            )));
        }
        if v.token_cap == 0 || v.mlp_ratio == 0 {
            return Err(AttnError::InvalidConfig("token cap and mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

/// The selected patches of one slide as network input.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideTokens {
    /// `[t,d]`
    pub globals: Tensor,
    /// `[t,s,s,d]`
    pub cubes: Tensor,
    /// Normalized `(row, col)` grid coordinates.
    pub coords: Vec<(f64, f64)>,
}

impl SlideTokens {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Tokens from a feature store; `grid` is the coarse grid extent used to
    /// normalize coordinates.
    pub fn from_store(store: &FeatureStore, grid: (usize, usize)) -> Result<Self, AttnError> {
        let (t, d, s) = (store.entries.len(), store.d, store.cube_side);
        let mut globals = Vec::with_capacity(t * d);
        let mut cubes = Vec::with_capacity(t * s * s * d);
        let mut coords = Vec::with_capacity(t);
        for e in &store.entries {
            globals.extend(e.global.iter().map(|&v| v as f64));
            cubes.extend(e.cube.iter().map(|&v| v as f64));
            coords.push((
                e.grid_row as f64 / grid.0.max(1) as f64,
                e.grid_col as f64 / grid.1.max(1) as f64,
            ));
        }
        Ok(SlideTokens {
            globals: Tensor::new(&[t, d], globals)?,
            cubes: Tensor::new(&[t, s, s, d], cubes)?,
            coords,
        })
    }

    /// The tokens at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self, AttnError> {
        let d = self.globals.shape()[1];
        let cube_len = self.cubes.numel() / self.len().max(1);
        let mut globals = Vec::with_capacity(idx.len() * d);
        let mut cubes = Vec::with_capacity(idx.len() * cube_len);
        for &i in idx {
            globals.extend_from_slice(&self.globals.data()[i * d..(i + 1) * d]);
            cubes.extend_from_slice(&self.cubes.data()[i * cube_len..(i + 1) * cube_len]);
        }
        let mut cshape = self.cubes.shape().to_vec();
        cshape[0] = idx.len();
        Ok(SlideTokens {
            globals: Tensor::new(&[idx.len(), d], globals)?,
            cubes: Tensor::new(&cshape, cubes)?,
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
        })
    }

    /// At most `cap` tokens, chosen uniformly with `seed`, in original order.
    pub fn capped(&self, cap: usize, seed: u64) -> Result<Self, AttnError> {
        if self.len() <= cap {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), cap).into_vec();
        idx.sort_unstable();
        self.subset(&idx)
    }
}

/// Stack + transformer + linear head.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub cfg: PredictorConfig,
    pub params: ParamStore,
}

fn ln_params(p: &mut ParamStore, name: &str, d: usize) {
    p.insert(format!("{name}.g"), Tensor::full(&[d], 1.0));
    p.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

impl Predictor {
    pub fn new(cfg: PredictorConfig, seed: u64) -> Result<Self, AttnError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let mut p = ParamStore::new();
        StackParams::random(&cfg.stack, cfg.cube_side, d, &mut rng).insert_into(&mut p);
        let std = (1.0 / d as f64).sqrt();
        p.insert("vit.embed.w", Tensor::randn(&[d, d], std, &mut rng));
        p.insert("vit.embed.b", Tensor::zeros(&[d]));
        let m = d * cfg.vit.mlp_ratio;
        for l in 0..cfg.vit.layers {
            let pre = format!("vit.l{l}");
            ln_params(&mut p, &format!("{pre}.ln1"), d);
            for n in ["q", "k", "v", "o"] {
                p.insert(format!("{pre}.attn.{n}"), Tensor::randn(&[d, d], std, &mut rng));
            }
            p.insert(format!("{pre}.attn.ob"), Tensor::zeros(&[d]));
            ln_params(&mut p, &format!("{pre}.ln2"), d);
            p.insert(format!("{pre}.mlp.w1"), Tensor::randn(&[d, m], (2.0 / d as f64).sqrt(), &mut rng));
            p.insert(format!("{pre}.mlp.b1"), Tensor::zeros(&[m]));
            p.insert(format!("{pre}.mlp.w2"), Tensor::randn(&[m, d], (1.0 / m as f64).sqrt(), &mut rng));
            p.insert(format!("{pre}.mlp.b2"), Tensor::zeros(&[d]));
        }
        ln_params(&mut p, "vit.ln_f", d);
        p.insert("head.w", Tensor::zeros(&[d, cfg.genes]));
        p.insert("head.b", Tensor::zeros(&[cfg.genes]));
        Ok(Predictor { cfg, params: p })
    }

    pub fn from_params(cfg: PredictorConfig, params: ParamStore) -> Result<Self, AttnError> {
        let reference = Predictor::new(cfg, 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(AttnError::MissingParam(format!("{name} {:?}", t.shape()))),
            }
        }
        Ok(Predictor { cfg, params })
    }

    pub fn set_head_bias(&mut self, bias: &[f64]) -> Result<(), AttnError> {
        let t = self.params.get_mut("head.b").ok_or_else(|| AttnError::MissingParam("head.b".into()))?;
        if t.numel() != bias.len() {
            return Err(AttnError::ShapeMismatch(format!("bias of {} for {} genes", bias.len(), t.numel())));
        }
        t.data_mut().copy_from_slice(bias);
        Ok(())
    }

    pub fn head_bias(&self) -> Vec<f64> {
        self.params.get("head.b").map(|t| t.data().to_vec()).unwrap_or_default()
    }

    fn check_tokens(&self, tokens: &SlideTokens) -> Result<(), AttnError> {
        if tokens.is_empty() {
            return Err(AttnError::EmptyTokenList);
        }
        if tokens.len() > self.cfg.vit.token_cap {
            return Err(AttnError::TooManyTokens { got: tokens.len(), cap: self.cfg.vit.token_cap });
        }
        let s = self.cfg.cube_side;
        if tokens.cubes.shape()[1..] != [s, s, self.cfg.d] || tokens.globals.shape()[1] != self.cfg.d {
            return Err(AttnError::ShapeMismatch(format!(
                "tokens {:?}/{:?} for cube side {s}, d {}",
                tokens.globals.shape(),
                tokens.cubes.shape(),
                self.cfg.d
            )));
        }
        Ok(())
    }

    /// Transformer over pooled tokens `x [t,d]` → `[1,genes]`.
    pub fn transformer_graph(&self, g: &mut Graph, b: &Bound, x: Var, coords: &[(f64, f64)]) -> Result<Var, AttnError> {
        let d = self.cfg.d;
        let t = coords.len();
        let x = g.matmul(x, b["vit.embed.w"])?;
        let mut x = g.add_bias(x, b["vit.embed.b"])?;
        if self.cfg.vit.positional {
            let pe: Vec<f64> = coords.iter().flat_map(|&(r, c)| positional_encoding(r, c, d)).collect();
            x = g.add_const(x, &Tensor::new(&[t, d], pe)?)?;
        }
        let heads = self.cfg.vit.heads;
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        for l in 0..self.cfg.vit.layers {
            let pre = format!("vit.l{l}");
            let v = |n: &str| b[&format!("{pre}.{n}") as &str];
            let h = g.layer_norm(x, v("ln1.g"), v("ln1.b"))?;
            let q = g.matmul(h, v("attn.q"))?;
            let k = g.matmul(h, v("attn.k"))?;
            let val = g.matmul(h, v("attn.v"))?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(val, hd * dh, dh)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, inv);
                let a = g.softmax_rows(s, t)?;
                outs.push(g.matmul(a, vh)?);
            }
            let cat = g.concat_cols(&outs)?;
            let o = g.matmul(cat, v("attn.o"))?;
            let o = g.add_bias(o, v("attn.ob"))?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, v("ln2.g"), v("ln2.b"))?;
            let h = g.matmul(h, v("mlp.w1"))?;
            let h = g.add_bias(h, v("mlp.b1"))?;
            let h = g.gelu(h);
            let h = g.matmul(h, v("mlp.w2"))?;
            let h = g.add_bias(h, v("mlp.b2"))?;
            x = g.add(x, h)?;
        }
        let x = g.layer_norm(x, b["vit.ln_f.g"], b["vit.ln_f.b"])?;
        let pooled = g.mean_rows(x)?;
        let y = g.matmul(pooled, b["head.w"])?;
        Ok(g.add_bias(y, b["head.b"])?)
    }

    /// Full forward pass for one slide → `[1,genes]`.
    pub fn forward_graph(&self, g: &mut Graph, b: &Bound, tokens: &SlideTokens) -> Result<Var, AttnError> {
        self.check_tokens(tokens)?;
        let f = g.constant(tokens.globals.clone());
        let r = g.constant(tokens.cubes.clone());
        let (_, r, _) = fused_stack_graph(g, f, r, &self.cfg.stack, b)?;
        let pooled = g.mean_pool_spatial(r)?;
        self.transformer_graph(g, b, pooled, &tokens.coords)
    }

    /// Gene vector for one slide.
    pub fn predict(&self, tokens: &SlideTokens) -> Result<Vec<f64>, AttnError> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let y = self.forward_graph(&mut g, &b, tokens)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Like `predict`, but caps the token count and falls back to the head
    /// bias for slides without tokens.
    pub fn predict_slide(&self, tokens: &SlideTokens, seed: u64) -> Result<Vec<f64>, AttnError> {
        if tokens.is_empty() {
            return Ok(self.head_bias());
        }
        self.predict(&tokens.capped(self.cfg.vit.token_cap, seed)?)
    }

    /// Transformer and head only, on explicit tokens `[t,d]`.
    pub fn vit_predict(&self, tokens: &Tensor, coords: &[(f64, f64)]) -> Result<Vec<f64>, AttnError> {
        if coords.is_empty() {
            return Err(AttnError::EmptyTokenList);
        }
        if coords.len() > self.cfg.vit.token_cap {
            return Err(AttnError::TooManyTokens { got: coords.len(), cap: self.cfg.vit.token_cap });
        }
        if tokens.shape() != [coords.len(), self.cfg.d] {
            return Err(AttnError::ShapeMismatch(format!("tokens {:?}", tokens.shape())));
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let x = g.constant(tokens.clone());
        let y = self.transformer_graph(&mut g, &b, x, coords)?;
        Ok(g.value(y).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Slides per optimizer step.
    pub batch: usize,
    pub clip: f64,
    pub weight_decay: f64,
    /// Tokens drawn per slide and step; 0 uses every token up to the cap.
    pub sample_tokens: usize,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig {
            epochs: 30,
            lr: 3e-4,
            batch: 1,
            clip: 1.0,
            weight_decay: 0.0,
            sample_tokens: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PredictorTrace {
    pub train_loss: Vec<f64>,
    /// Mean gene PCC on the validation slides, when defined.
    pub val_pcc: Vec<Option<f64>>,
}

pub type LabeledSlide<'a> = (&'a SlideTokens, &'a [f64]);

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}")));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Mean-squared-error training with Adam. Slides without tokens are skipped.
/// The head bias starts at the mean training label.
pub fn train_predictor(
    model: &mut Predictor,
    train: &[LabeledSlide<'_>],
    val: &[LabeledSlide<'_>],
    cfg: &PredictorTrainConfig,
) -> Result<PredictorTrace, AttnError> {
    let usable: Vec<&LabeledSlide<'_>> = train.iter().filter(|(t, _)| !t.is_empty()).collect();
    if usable.is_empty() {
        return Err(AttnError::EmptyDataset);
    }
    let n = model.cfg.genes;
    if let Some((_, y)) = train.iter().find(|(_, y)| y.len() != n) {
        return Err(AttnError::ShapeMismatch(format!("label of {} values for {n} genes", y.len())));
    }
    let mut mean = vec![0.0; n];
    for (_, y) in train {
        for (m, v) in mean.iter_mut().zip(*y) {
            *m += v / train.len() as f64;
        }
    }
    model.set_head_bias(&mean)?;
    let batch = cfg.batch.max(1);
    let mut opt = Adam::new(cfg.lr);
    opt.weight_decay = cfg.weight_decay;
    let mut trace = PredictorTrace::default();
    let cap = match cfg.sample_tokens {
        0 => model.cfg.vit.token_cap,
        k => k.min(model.cfg.vit.token_cap),
    };
    for epoch in 0..cfg.epochs {
        let order = epoch_order(usable.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let mut acc: Option<crate::diff::NamedGrads> = None;
            for &i in chunk {
                let (tokens, label) = usable[i];
                let tok = tokens.capped(cap, derive_seed(cfg.seed, &format!("cap/{epoch}/{i}")))?;
                let mut g = Graph::new();
                let b = model.params.bind(&mut g);
                let y = model.forward_graph(&mut g, &b, &tok)?;
                let target = g.constant(Tensor::new(&[1, n], label.to_vec())?);
                let loss = g.l2_loss(y, target)?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(AttnError::DivergedLoss(epoch));
                }
                epoch_loss += lv;
                let mut grads = g.backward(loss)?;
                let named = b.named_grads(&g, &mut grads);
                match acc.as_mut() {
                    None => acc = Some(named),
                    Some(a) => crate::diff::accumulate_grads(a, named),
                }
            }
            let mut grads = acc.expect("chunks are non-empty");
            crate::diff::scale_grads(&mut grads, 1.0 / chunk.len() as f64);
            if cfg.clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.clip);
            }
            let _ = step;
            opt.step(&mut model.params, &grads);
        }
        trace.train_loss.push(epoch_loss / usable.len() as f64);
        trace.val_pcc.push(if val.len() >= 2 {
            let mut preds = Vec::with_capacity(val.len());
            for (i, (t, _)) in val.iter().enumerate() {
                preds.push(model.predict_slide(t, derive_seed(cfg.seed, &format!("val/{i}")))?);
            }
            let gt: Vec<Vec<f64>> = val.iter().map(|(_, y)| y.to_vec()).collect();
            mean_gene_pcc(&preds, &gt).ok().map(|(m, _)| m)
        } else {
            None
        });
    }
    Ok(trace)
}
