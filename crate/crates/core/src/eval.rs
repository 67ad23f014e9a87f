//! Metrics, target normalization, fold assignment and the two-layer feature probe.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Adam, DiffError, Graph, Optimizer, ParamStore, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("constant input has zero variance")]
    ConstantInput,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("negative expression value {0}")]
    NegativeInput(f64),
    #[error("{slides} slides cannot fill {k} folds")]
    TooFewSlides { slides: usize, k: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sample Pearson correlation.
pub fn pcc(pred: &[f64], gt: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(EvalError::LengthMismatch(pred.len(), gt.len()));
    }
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = gt.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pred.iter().zip(gt) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Rank-based (Mann–Whitney) area under the ROC curve; tied scores use
/// average ranks, so each tied positive/negative pair counts one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the mean rank
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Elementwise `ln(1 + x)`.
pub fn log_normalize(raw: &[f64]) -> Result<Vec<f64>, EvalError> {
    raw.iter()
        .map(|&x| {
            if x < 0.0 || x.is_nan() {
                Err(EvalError::NegativeInput(x))
            } else {
                Ok(x.ln_1p())
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle followed by round-robin assignment. Input order does not
/// matter: ids are sorted before shuffling.
pub fn kfold_split(slide_ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment, EvalError> {
    if k == 0 || slide_ids.len() < k {
        return Err(EvalError::TooFewSlides {
            slides: slide_ids.len(),
            k,
        });
    }
    let mut ids = slide_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < k {
        return Err(EvalError::TooFewSlides { slides: ids.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let folds = ids.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldAssignment { k, seed, folds })
}

/// Mean of per-gene PCCs between prediction and truth matrices laid out as
/// one row per slide.
pub fn mean_gene_pcc(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<(f64, Vec<f64>), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch(pred.len(), gt.len()));
    }
    let n = gt.first().map(Vec::len).ok_or(EvalError::EmptyDataset)?;
    let per_gene = (0..n)
        .map(|g| {
            let p: Vec<f64> = pred.iter().map(|r| r[g]).collect();
            let t: Vec<f64> = gt.iter().map(|r| r[g]).collect();
            pcc(&p, &t)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean = per_gene.iter().sum::<f64>() / n as f64;
    Ok((mean, per_gene))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub folds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            folds: 5,
            epochs: 300,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub mean_pcc: f64,
    pub per_gene: Vec<f64>,
    /// Out-of-fold predictions, one row per slide.
    pub predictions: Vec<Vec<f64>>,
}

/// Column means and standard deviations (floored at 1e-12).
fn column_stats(rows: &[&Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-12)
        })
        .collect();
    (mean, std)
}

fn standardize(rows: &[&Vec<f64>], mean: &[f64], std: &[f64]) -> Vec<f64> {
    rows.iter()
        .flat_map(|r| r.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s))
        .collect()
}

/// Cross-validated `d → 2d → n` ReLU perceptron trained with mean-squared
/// error. Reports the mean over genes of the PCC between out-of-fold
/// predictions and labels.
pub fn feature_probe(features: &[Vec<f64>], labels: &[Vec<f64>], cfg: &ProbeConfig) -> Result<ProbeReport, EvalError> {
    if features.is_empty() || labels.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if features.len() != labels.len() {
        return Err(EvalError::LengthMismatch(features.len(), labels.len()));
    }
    if features.len() < 2 * cfg.folds {
        return Err(EvalError::TooFewSlides {
            slides: features.len(),
            k: cfg.folds,
        });
    }
    // identical rows carry no signal; out-of-fold outputs would only reflect fold offsets
    if features.iter().all(|f| f == &features[0]) {
        return Err(EvalError::ConstantInput);
    }
    let d = features[0].len();
    let n = labels[0].len();
    let h = 2 * d;
    let ids: Vec<String> = (0..features.len()).map(|i| format!("{i:06}")).collect();
    let folds = kfold_split(&ids, cfg.folds, cfg.seed)?;
    let mut predictions = vec![vec![0.0; n]; features.len()];

    for fold in 0..cfg.folds {
        let (train, val): (Vec<usize>, Vec<usize>) =
            (0..features.len()).partition(|&i| folds.folds[&ids[i]] != fold);
        let tr_x: Vec<&Vec<f64>> = train.iter().map(|&i| &features[i]).collect();
        let tr_y: Vec<&Vec<f64>> = train.iter().map(|&i| &labels[i]).collect();
        let (xm, xs) = column_stats(&tr_x);
        let (ym, ys) = column_stats(&tr_y);
        let x = Tensor::new(&[train.len(), d], standardize(&tr_x, &xm, &xs))?;
        let y = Tensor::new(&[train.len(), n], standardize(&tr_y, &ym, &ys))?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(fold as u64));
        let mut params = ParamStore::new();
        params.insert("w1", Tensor::randn(&[d, h], (2.0 / d as f64).sqrt(), &mut rng));
        params.insert("b1", Tensor::zeros(&[h]));
        params.insert("w2", Tensor::randn(&[h, n], (1.0 / h as f64).sqrt(), &mut rng));
        params.insert("b2", Tensor::zeros(&[n]));
        let mut opt = Adam::new(cfg.lr);
        for _ in 0..cfg.epochs {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let xi = g.constant(x.clone());
            let yi = g.constant(y.clone());
            let out = mlp(&mut g, &b, xi)?;
            let loss = g.l2_loss(out, yi)?;
            if !g.value(loss).all_finite() {
                return Err(DiffError::NonFiniteValue("probe loss").into());
            }
            let mut grads = g.backward(loss)?;
            let named = b.named_grads(&g, &mut grads);
            opt.step(&mut params, &named);
        }

        let va_x: Vec<&Vec<f64>> = val.iter().map(|&i| &features[i]).collect();
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let xi = g.constant(Tensor::new(&[val.len(), d], standardize(&va_x, &xm, &xs))?);
        let out = mlp(&mut g, &b, xi)?;
        for (r, &i) in g.value(out).data().chunks(n).zip(&val) {
            predictions[i] = r.iter().zip(&ym).zip(&ys).map(|((v, m), s)| v * s + m).collect();
        }
    }
    let (mean_pcc, per_gene) = mean_gene_pcc(&predictions, labels)?;
    Ok(ProbeReport {
        mean_pcc,
        per_gene,
        predictions,
    })
}

fn mlp(g: &mut Graph, b: &crate::diff::Bound, x: crate::diff::Var) -> Result<crate::diff::Var, DiffError> {
    let hdn = g.matmul(x, b["w1"])?;
    let hdn = g.add_bias(hdn, b["b1"])?;
    let hdn = g.relu(hdn);
    let out = g.matmul(hdn, b["w2"])?;
    g.add_bias(out, b["b2"])
}

/// One evaluation line per `(task, gene, fold)` followed by an `AVG` line.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportLine {
    pub task: String,
    pub gene: String,
    pub fold: String,
    pub pcc: f64,
}

pub fn write_eval_report<W: Write>(mut w: W, lines: &[ReportLine]) -> Result<f64, EvalError> {
    writeln!(w, "#task\tgene\tfold\tpcc")?;
    for l in lines {
        writeln!(w, "{}\t{}\t{}\t{:.6}", l.task, l.gene, l.fold, l.pcc)?;
    }
    let avg = if lines.is_empty() {
        f64::NAN
    } else {
        lines.iter().map(|l| l.pcc).sum::<f64>() / lines.len() as f64
    };
    writeln!(w, "AVG\t\t\t{avg:.6}")?;
    Ok(avg)
}
