//! Test oracles shared by the integration suites.
#![allow(dead_code)]

use cofact::{Graph, ParamId, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod corpus;
pub mod grad_cases;

pub const STEP: f64 = 1e-3;
pub const REL_FLOOR: f64 = 1e-3;
const REFINE: [f64; 4] = [1.0, 8.0, 64.0, 512.0];
const PASS: f64 = 1e-5;
const KINK: f64 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub checked: usize,
    /// Entries whose one-sided differences disagree, i.e. a kink lies within
    /// one step of the point.
    pub skipped: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl GradReport {
    /// Compares `analytic` with central differences of `f(delta)`, the loss
    /// with the entry shifted by `delta`. A failing entry is re-probed at
    /// smaller steps; if it still fails and its one-sided differences
    /// disagree, a kink lies within the step and the entry is skipped.
    fn probe(&mut self, analytic: f64, f: impl Fn(f64) -> f64, at: impl FnOnce() -> String) {
        let mid = f(0.0);
        let mut err = f64::INFINITY;
        let mut kink = false;
        for h in REFINE.map(|k| STEP / k) {
            let (plus, minus) = (f(h), f(-h));
            err = rel_err(analytic, (plus - minus) / (2.0 * h));
            if err < PASS {
                break;
            }
            kink = rel_err((plus - mid) / h, (mid - minus) / h) > KINK;
        }
        if err >= PASS && kink {
            self.skipped += 1;
            return;
        }
        self.checked += 1;
        if err > self.worst {
            self.worst = err;
            self.worst_at = at();
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }

    pub fn skip_rate(&self) -> f64 {
        self.skipped as f64 / (self.checked + self.skipped).max(1) as f64
    }

    pub fn assert_within(&self, tol: f64, what: &str) {
        assert!(self.checked > 0, "{what}: nothing checked");
        assert!(self.worst < tol, "{what}: rel err {:.3e} at {} exceeds {tol:e}", self.worst, self.worst_at);
        assert!(self.skip_rate() < 0.01, "{what}: {} of {} entries skipped at kinks", self.skipped, self.checked + self.skipped);
    }
}

/// Fixed projection that turns any output into a scalar with non-trivial
/// gradient everywhere.
fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let v = g.value(out);
    let mut r = rng(0x5eed_0f_9ad);
    let w: Vec<f64> = (0..v.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(v.dims(), w)?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Gradient of `f` with respect to each input tensor versus central
/// differences.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let l = project(&mut g, out).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let l = project(&mut g, out).unwrap();
    g.backward(l).unwrap();

    let mut report = GradReport::default();
    for (k, x) in inputs.iter().enumerate() {
        let grad = g.grad(vars[k]).unwrap_or_else(|| Tensor::zeros(x.dims()));
        for i in 0..x.numel() {
            let shifted = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] = x.data()[i] + delta;
                eval(&xs)
            };
            report.probe(grad.data()[i], shifted, || format!("input {k}[{i}]"));
        }
    }
    report
}

/// Gradient of a scalar loss with respect to stored parameters versus
/// central differences. Up to `per_param` entries of each trainable
/// parameter are sampled with `seed`.
pub fn check_params<F>(store: &ParamStore<f64>, per_param: usize, seed: u64, loss: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let l = loss(&mut g, s).unwrap();
        g.value(l).item()
    };
    let mut analytic = store.clone();
    let mut g = Graph::new();
    let l = loss(&mut g, &analytic).unwrap();
    g.backward(l).unwrap();
    analytic.zero_grad();
    g.accumulate_into(&mut analytic);

    let mut pick = rng(seed);
    let mut report = GradReport::default();
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get(id);
        let n = p.value.numel();
        let entries: Vec<usize> =
            if n <= per_param { (0..n).collect() } else { rand::seq::index::sample(&mut pick, n, per_param).into_vec() };
        let grad = analytic.get(id).grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.dims()));
        for i in entries {
            let shifted = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).value.data_mut()[i] += delta;
                eval(&s)
            };
            report.probe(grad.data()[i], shifted, || format!("{}[{i}]", p.name));
        }
    }
    report
}

/// Same-label-positive supervised contrastive loss by explicit loops.
pub fn supcon_reference(emb: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let z: Vec<Vec<f64>> = emb
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = z.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (dot(&z[i], &z[k]) / tau).exp();
            }
        }
        let mut s = 0.0;
        for &p in &positives {
            s += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total += -s / positives.len() as f64;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Weighted F1 straight from prediction/label lists, class by class.
pub fn brute_force_f1(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    let n = labels.len() as f64;
    let mut total = 0.0;
    for c in 0..classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&p, &y) in preds.iter().zip(labels) {
            match (p == c, y == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        total += f1 * (tp + fn_) / n;
    }
    total
}
