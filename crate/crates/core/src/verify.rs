//! Gradient verification suite: every differentiable op plus the fusion
//! block and the full predictor, each checked against central differences
//! over several seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{grad_check, Bound, DiffError, Graph, Tensor, Var};
use crate::dual_attn::{
    global_update_graph, local_update_graph, AttnError, FusionParams, FusionVars, Predictor, PredictorConfig,
    SlideTokens, StackConfig, VitConfig,
};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seeds: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

type Case = (Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>>, Vec<Tensor>);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Keeps values at least 0.1 away from zero (relu and l1 kinks).
fn off_kink(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|v| if v.abs() < 0.1 { v + 0.3 * v.signum() } else { v }).collect();
    Tensor::new(&shape, data).expect("same shape")
}

/// `Σ w⊙y` with fixed positive weights so every output coordinate matters.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var, DiffError> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::uniform(&shape, 0.5, 1.5, &mut rng(seed ^ 0x5eed)));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn unary(seed: u64, x: Tensor, op: fn(&mut Graph, Var) -> Result<Var, DiffError>) -> Case {
    (Box::new(move |g: &mut Graph, v: &[Var]| {
        let y = op(g, v[0])?;
        weighted(g, y, seed)
    }), vec![x])
}

fn binary(seed: u64, a: Tensor, b: Tensor, op: fn(&mut Graph, Var, Var) -> Result<Var, DiffError>) -> Case {
    (Box::new(move |g: &mut Graph, v: &[Var]| {
        let y = op(g, v[0], v[1])?;
        weighted(g, y, seed)
    }), vec![a, b])
}

const OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "add_bias",
    "hadamard_broadcast",
    "scale",
    "add_const",
    "sigmoid",
    "relu",
    "softplus",
    "gelu",
    "softmax_rows",
    "softmax_spatial",
    "softmax_last",
    "sum_spatial",
    "mean_pool_spatial",
    "mean_rows",
    "reshape",
    "conv2d",
    "conv2d_strided",
    "depthwise_conv2d",
    "upsample2x",
    "layer_norm",
    "slice_cols",
    "concat_cols",
    "l1_loss",
    "l2_loss",
    "sum_all",
    "mean_all",
];

fn op_case(name: &str, seed: u64) -> Case {
    let mut r = rng(seed);
    let mut randn = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut r);
    match name {
        "matmul" => binary(seed, randn(&[3, 4]), randn(&[4, 2]), |g, a, b| g.matmul(a, b)),
        "matmul_nt" => binary(seed, randn(&[3, 4]), randn(&[5, 4]), |g, a, b| g.matmul_nt(a, b)),
        "add" => binary(seed, randn(&[2, 3]), randn(&[2, 3]), |g, a, b| g.add(a, b)),
        "sub" => binary(seed, randn(&[2, 3]), randn(&[2, 3]), |g, a, b| g.sub(a, b)),
        "mul" => binary(seed, randn(&[2, 3]), randn(&[2, 3]), |g, a, b| g.mul(a, b)),
        "add_bias" => binary(seed, randn(&[3, 4]), randn(&[4]), |g, a, b| g.add_bias(a, b)),
        "hadamard_broadcast" => {
            binary(seed, randn(&[2, 3, 3, 1]), randn(&[2, 3, 3, 4]), |g, a, b| g.hadamard_broadcast(a, b))
        }
        "scale" => unary(seed, randn(&[2, 3]), |g, x| Ok(g.scale(x, -1.7))),
        "add_const" => {
            let c = randn(&[2, 3]);
            (Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.add_const(v[0], &c)?;
                let y = g.mul(y, y)?;
                weighted(g, y, seed)
            }), vec![randn(&[2, 3])])
        }
        "sigmoid" => unary(seed, randn(&[3, 4]), |g, x| Ok(g.sigmoid(x))),
        "relu" => unary(seed, off_kink(randn(&[3, 4])), |g, x| Ok(g.relu(x))),
        "softplus" => unary(seed, randn(&[3, 4]), |g, x| Ok(g.softplus(x))),
        "gelu" => unary(seed, randn(&[3, 4]), |g, x| Ok(g.gelu(x))),
        "softmax_rows" => unary(seed, randn(&[3, 4]), |g, x| g.softmax_rows(x, 4)),
        "softmax_spatial" => unary(seed, randn(&[2, 3, 3, 1]), |g, x| g.softmax_spatial(x)),
        "softmax_last" => unary(seed, randn(&[2, 5]), |g, x| g.softmax_last(x)),
        "sum_spatial" => unary(seed, randn(&[2, 3, 3, 4]), |g, x| g.sum_spatial(x)),
        "mean_pool_spatial" => unary(seed, randn(&[2, 3, 3, 4]), |g, x| g.mean_pool_spatial(x)),
        "mean_rows" => unary(seed, randn(&[4, 3]), |g, x| g.mean_rows(x)),
        "reshape" => unary(seed, randn(&[2, 6]), |g, x| {
            let y = g.reshape(x, &[3, 4])?;
            g.softmax_last(y)
        }),
        "conv2d" => binary(seed, randn(&[2, 5, 5, 2]), randn(&[3, 3, 2, 3]), |g, x, k| g.conv2d(x, k, 1, 1)),
        "conv2d_strided" => binary(seed, randn(&[1, 6, 6, 2]), randn(&[3, 3, 2, 2]), |g, x, k| g.conv2d(x, k, 2, 1)),
        "depthwise_conv2d" => {
            binary(seed, randn(&[2, 4, 4, 3]), randn(&[3, 3, 3]), |g, x, k| g.depthwise_conv2d(x, k, 1, 1))
        }
        "upsample2x" => unary(seed, randn(&[1, 3, 3, 2]), |g, x| g.upsample2x(x)),
        "layer_norm" => {
            let gamma = Tensor::uniform(&[6], 0.5, 1.5, &mut rng(seed ^ 1));
            (Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                weighted(g, y, seed)
            }), vec![randn(&[3, 6]), gamma, randn(&[6])])
        }
        "slice_cols" => unary(seed, randn(&[3, 6]), |g, x| g.slice_cols(x, 1, 3)),
        "concat_cols" => binary(seed, randn(&[3, 2]), randn(&[3, 4]), |g, a, b| g.concat_cols(&[b, a])),
        "l1_loss" => {
            let a = randn(&[3, 4]);
            let gap = off_kink(randn(&[3, 4]));
            let b = Tensor::new(&[3, 4], a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect()).expect("shape");
            (Box::new(|g: &mut Graph, v: &[Var]| g.l1_loss(v[0], v[1])), vec![a, b])
        }
        "l2_loss" => (Box::new(|g: &mut Graph, v: &[Var]| g.l2_loss(v[0], v[1])), vec![randn(&[3, 4]), randn(&[3, 4])]),
        "sum_all" => (Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum_all(y))
        }), vec![randn(&[2, 3])]),
        "mean_all" => (Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.sigmoid(v[0]);
            Ok(g.mean_all(y))
        }), vec![randn(&[2, 3])]),
        other => unreachable!("no case for {other}"),
    }
}

fn attn_to_diff(e: AttnError) -> DiffError {
    match e {
        AttnError::Diff(d) => d,
        other => DiffError::ShapeMismatch { op: "composite", detail: other.to_string() },
    }
}

/// Both fusion updates over a batch of two instances, differentiated with
/// respect to the inputs and all seven weight matrices.
fn fusion_case(seed: u64) -> Case {
    let (s, d) = (3, 4);
    let mut r = rng(seed);
    let p = FusionParams::random(s, d, 0.5, &mut r);
    let f = Tensor::randn(&[2, d], 1.0, &mut r);
    let cube = Tensor::randn(&[2, s, s, d], 1.0, &mut r);
    let mut inputs = vec![f, cube];
    inputs.extend([p.wq, p.wk, p.wv, p.wr, p.wz, p.wp, p.wf]);
    (Box::new(move |g: &mut Graph, v: &[Var]| {
        let w = FusionVars { wq: v[2], wk: v[3], wv: v[4], wr: v[5], wz: v[6], wp: v[7], wf: v[8] };
        let cube = local_update_graph(g, v[0], v[1], &w).map_err(attn_to_diff)?;
        let vec = global_update_graph(g, v[0], v[1], &w).map_err(attn_to_diff)?;
        let a = weighted(g, cube, seed)?;
        let b = weighted(g, vec, seed ^ 7)?;
        g.add(a, b)
    }), inputs)
}

/// L2 loss of a full predictor forward pass with respect to every parameter.
fn end_to_end_case(seed: u64) -> Case {
    let cfg = PredictorConfig {
        cube_side: 2,
        d: 4,
        genes: 2,
        stack: StackConfig { blocks: 2, interval: 1, expansion: 2 },
        vit: VitConfig { layers: 1, heads: 2, mlp_ratio: 2, token_cap: 8, positional: true },
    };
    let mut model = Predictor::new(cfg, seed).expect("valid config");
    let mut r = rng(seed ^ 0xe2e);
    for name in ["head.w", "head.b"] {
        let t = model.params.get_mut(name).expect("head present");
        let shape = t.shape().to_vec();
        *t = Tensor::uniform(&shape, -0.5, 0.5, &mut r);
    }
    let tokens = SlideTokens {
        globals: Tensor::uniform(&[2, 4], -1.0, 1.0, &mut r),
        cubes: Tensor::uniform(&[2, 2, 2, 4], -1.0, 1.0, &mut r),
        coords: vec![(0.0, 0.25), (0.5, 0.75)],
    };
    let target = Tensor::uniform(&[1, 2], -1.0, 1.0, &mut r);
    let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    (Box::new(move |g: &mut Graph, v: &[Var]| {
        let b = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()));
        let y = model.forward_graph(g, &b, &tokens).map_err(attn_to_diff)?;
        let t = g.constant(target.clone());
        g.l2_loss(y, t)
    }), inputs)
}

fn run(name: &'static str, seeds: usize, tolerance: f64, make: impl Fn(u64) -> Case) -> Result<CheckOutcome, DiffError> {
    let mut worst = 0.0f64;
    for seed in 0..seeds as u64 {
        let (f, inputs) = make(seed);
        let rep = grad_check(f, &inputs, EPS)?;
        worst = worst.max(rep.max_relative_error);
    }
    Ok(CheckOutcome { name, seeds, max_relative_error: worst, tolerance })
}

/// Runs every check over `seeds` seeds.
pub fn gradient_suite(seeds: usize) -> Result<Vec<CheckOutcome>, DiffError> {
    let mut out = Vec::with_capacity(OPS.len() + 2);
    for &name in OPS {
        out.push(run(name, seeds, OP_TOLERANCE, |s| op_case(name, s))?);
    }
    out.push(run("fusion_block", seeds, COMPOSITE_TOLERANCE, fusion_case)?);
    out.push(run("end_to_end", seeds, COMPOSITE_TOLERANCE, end_to_end_case)?);
    Ok(out)
}
