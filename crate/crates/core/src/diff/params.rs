use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Index;

use super::graph::{Grads, Graph, Var};
use super::tensor::Tensor;
use super::DiffError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ISGW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Graph handles for every tensor of a [`ParamStore`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

pub type NamedGrads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Moves every tensor into `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), g.param(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Moves every tensor into `g` as a constant (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Serializes in the "ISGW" checkpoint layout (values stored as f32).
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), DiffError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| DiffError::Format(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.rank() as u8])?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, DiffError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DiffError::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(DiffError::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| DiffError::Format("parameter name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let shape = (0..rank[0])
                .map(|_| read_u32(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(store)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl Bound {
    /// Handles for tensors already placed in a graph.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects gradients by parameter name; parameters the loss did not
    /// reach get zero gradients.
    pub fn named_grads(&self, g: &Graph, grads: &mut Grads) -> NamedGrads {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let t = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (k.clone(), t)
            })
            .collect()
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }
}

/// Adds `src` into `dst`, creating entries as needed.
pub fn accumulate_grads(dst: &mut NamedGrads, src: NamedGrads) {
    for (k, t) in src {
        match dst.get_mut(&k) {
            Some(e) => e.add_assign(&t),
            None => {
                dst.insert(k, t);
            }
        }
    }
}

pub fn scale_grads(grads: &mut NamedGrads, c: f64) {
    for t in grads.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= c);
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut NamedGrads, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        scale_grads(grads, max_norm / norm);
    }
    norm
}

pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &NamedGrads);
}

/// Stochastic gradient descent with classical momentum.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }
}

impl Optimizer for SgdMomentum {
    fn step(&mut self, params: &mut ParamStore, grads: &NamedGrads) {
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for ((w, vel), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vel = self.momentum * *vel + gv;
                *w -= self.lr * *vel;
            }
        }
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `w -= lr · decay · w`.
    pub weight_decay: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &NamedGrads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (i, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}
