//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so each criterion reports its own
//! timing and measured values. Exits non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::corpus::{corpus, expected_raw, TALLY};
use common::grad_cases;
use common::{brute_force_f1, rng, supcon_reference, uniform};

use cofact::classifier::{cross_entropy, supcon_loss, total_loss, ClassifierHead, LossConfig};
use cofact::config::RunConfig;
use cofact::data::{synthesize, SynthConfig, SyntheticDataset};
use cofact::embedding::AdapterScope;
use cofact::ensemble::{blend, tune, EnsembleSpec, ProbMatrix, Row, TuneOptions, Variant};
use cofact::features::{raw_features, FeatureExtractor, FEATURE_DIM};
use cofact::fusion::{Aggregation, CoAttentionBlock, CoAttentionConfig, EmbeddedStreams, Fusion, FusionLayout};
use cofact::metrics::{confusion, confusion_n, weighted_f1};
use cofact::model::Model;
use cofact::train::{train, Split, TrainOptions, TrainOutcome};
use cofact::{Graph, ParamStore, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let mut cases = grad_cases::tensor_ops();
    cases.extend(grad_cases::modules());
    cases.push(grad_cases::pipeline());
    let mut failed = Vec::new();
    let (mut op_worst, mut e2e_worst, mut checked) = (0.0f64, 0.0f64, 0);
    for case in &cases {
        let r = case.sweep();
        checked += r.checked;
        if case.tol < grad_cases::END_TO_END_TOL {
            op_worst = op_worst.max(r.worst);
        } else {
            e2e_worst = e2e_worst.max(r.worst);
        }
        if !case.passes(&r) {
            failed.push(format!("{} ({:.2e} at {})", case.name, r.worst, r.worst_at));
        }
    }
    let detail = format!(
        "{} cases x {} seeds, {checked} entries; worst op {op_worst:.2e} (<1e-4), worst end-to-end {e2e_worst:.2e} (<1e-3)",
        cases.len(),
        grad_cases::SEEDS.end - grad_cases::SEEDS.start
    );
    ensure(failed.is_empty(), if failed.is_empty() { detail } else { format!("{detail}; failing: {}", failed.join(", ")) })
}

fn fusion_invariants() -> Outcome {
    let mut worst_row = 0.0f64;
    for seed in 0..10u64 {
        let (d, heads) = [(8, 2), (16, 4), (12, 3)][seed as usize % 3];
        let cfg = CoAttentionConfig { d, heads, ff_inner: 2 * d, dropout: 0.0, scale_by_model_dim: false };
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(seed);
        let blk = CoAttentionBlock::new(&mut store, &mut r, "fusion.pair1", cfg).map_err(|e| e.to_string())?;
        let (la, lb) = (r.random_range(1..9), r.random_range(1..9));
        let ta: Tensor<f32> = uniform(&mut r, &[la, d], -3.0, 3.0).cast();
        let tb: Tensor<f32> = uniform(&mut r, &[lb, d], -3.0, 3.0).cast();
        let mut g = Graph::new();
        let (a, b) = (g.constant(ta.clone()), g.constant(tb.clone()));
        let (ab, ba) = blk.co_attend(&mut g, &store, a, b).map_err(|e| e.to_string())?;
        for w in ab.weights.iter().chain(&ba.weights) {
            let w = g.value(*w);
            for row in 0..w.dims()[0] {
                worst_row = worst_row.max((w.row(row).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
        }
        let (ba2, ab2) = blk.co_attend(&mut g, &store, b, a).map_err(|e| e.to_string())?;
        if g.value(ab.out) != g.value(ab2.out) || g.value(ba.out) != g.value(ba2.out) {
            return Err(format!("seed {seed}: swapped inputs did not swap outputs exactly"));
        }

        let pa = Tensor::new(&[la + 2, d], [ta.data(), &vec![0.0; 2 * d][..]].concat()).map_err(|e| e.to_string())?;
        let pb = Tensor::new(&[lb + 3, d], [tb.data(), &vec![0.0; 3 * d][..]].concat()).map_err(|e| e.to_string())?;
        let (pa, pb) = (g.constant(pa), g.constant(pb));
        let (mab, mba) = blk.co_attend_masked(&mut g, &store, pa, la, pb, lb).map_err(|e| e.to_string())?;
        for (dir, valid) in [(&mab, lb), (&mba, la)] {
            for w in &dir.weights {
                let w = g.value(*w);
                if (0..w.dims()[0]).any(|row| w.row(row)[valid..].iter().any(|&v| v != 0.0)) {
                    return Err(format!("seed {seed}: padded key received attention"));
                }
            }
        }

        let mut fstore = ParamStore::<f32>::new();
        let fusion = Fusion::new(&mut fstore, &mut r, cfg, FusionLayout::Full, Aggregation::Mean).map_err(|e| e.to_string())?;
        let mut stream = |len: usize| Some(g.constant(uniform(&mut r, &[len, d], -1.0, 1.0).cast()));
        let e = EmbeddedStreams { claim_text: stream(la), claim_image: stream(lb), doc_text: stream(3), doc_image: stream(2) };
        let out = fusion.fuse(&mut g, &fstore, &e).map_err(|e| e.to_string())?;
        if (out.contexts.len(), out.streams.len()) != (12, 4) {
            return Err(format!("seed {seed}: {} contexts and {} streams", out.contexts.len(), out.streams.len()));
        }
    }
    ensure(
        worst_row < 1e-6,
        format!("10 seeds; max |row sum - 1| {worst_row:.1e} (<1e-6), symmetry exact, 12+4 outputs, padded keys weight 0"),
    )
}

fn random_rows(r: &mut impl Rng, n: usize) -> Vec<Row> {
    (0..n)
        .map(|_| {
            let row: [f64; 5] = std::array::from_fn(|_| r.random_range(0.0..1.0f64).powi(3));
            let s: f64 = row.iter().sum();
            row.map(|v| v / s)
        })
        .collect()
}

fn matrix(id: &str, rows: Vec<Row>) -> ProbMatrix {
    let ids = (0..rows.len()).map(|i| format!("v{i:03}")).collect();
    ProbMatrix::new(id, ids, rows).expect("rows are distributions")
}

fn single_f1(m: &ProbMatrix, labels: &[usize]) -> f64 {
    weighted_f1(&confusion(&m.predictions(), labels).expect("aligned")).expect("non-empty").weighted
}

fn ensemble_lattice() -> Outcome {
    let mut r = rng(3);
    for trial in 0..20 {
        let m = 1 + trial % 4;
        let mats: Vec<_> = (0..m).map(|k| matrix(&format!("m{k}"), random_rows(&mut r, 15))).collect();
        let w: Vec<f64> = (0..m).map(|_| r.random_range(0.01..1.0)).collect();
        let n = [0.125, 0.25, 0.5, 1.0][trial % 4];
        let reduced = [
            (EnsembleSpec::average(m), EnsembleSpec::unified(vec![1.0 / m as f64; m], vec![1.0; m])),
            (
                EnsembleSpec { variant: Variant::Weighted, weights: w.clone(), powers: vec![1.0; m], f1: None },
                EnsembleSpec::unified(w.clone(), vec![1.0; m]),
            ),
            (
                EnsembleSpec { variant: Variant::Power, weights: w.clone(), powers: vec![n; m], f1: None },
                EnsembleSpec::unified(w.clone(), vec![n; m]),
            ),
        ];
        for (a, b) in reduced {
            let bits = |s: &EnsembleSpec| -> Result<Vec<[u64; 5]>, String> {
                Ok(blend(&mats, s).map_err(|e| e.to_string())?.iter().map(|r| r.map(f64::to_bits)).collect())
            };
            if bits(&a)? != bits(&b)? {
                return Err(format!("trial {trial}: {} differs from its unified form", a.variant));
            }
        }
    }

    let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
    let one_hot = |k: usize| std::array::from_fn(|c| if c == k { 0.96 } else { 0.01 });
    let oracle = matrix("oracle", labels.iter().map(|&y| one_hot(y)).collect());
    let adversary = matrix("adversary", labels.iter().map(|&y| one_hot((y + 1) % 5)).collect());
    let noise = matrix("noise", random_rows(&mut r, 50));
    let mut report = Vec::new();
    for (name, mats) in [("oracle+noise", vec![noise.clone(), oracle]), ("adversary+noise", vec![adversary, noise])] {
        let best = mats.iter().map(|m| single_f1(m, &labels)).fold(0.0, f64::max);
        let spec = tune(&mats, &labels, Variant::Unified, &TuneOptions::default()).map_err(|e| e.to_string())?;
        let f1 = spec.f1.unwrap_or(0.0);
        if f1 < best {
            return Err(format!("{name}: tuned F1 {f1:.4} below best single {best:.4}"));
        }
        report.push(format!("{name} tuned {f1:.3} >= single {best:.3}"));
    }
    Ok(format!("60 blends bit-identical to unified form; {}", report.join(", ")))
}

fn loss_oracles() -> Outcome {
    let mut r = rng(44);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(2..=8);
        let d = r.random_range(2..6);
        let emb = uniform(&mut r, &[n, d], -2.0, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let tau = r.random_range(0.1..1.0);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| emb.row(i).to_vec()).collect();
        let mut g = Graph::new();
        let e = g.constant(emb);
        let l = supcon_loss(&mut g, e, &labels, tau).map_err(|e| e.to_string())?;
        worst = worst.max((g.value(l).item() - supcon_reference(&rows, &labels, tau)).abs());
    }
    let mut g = Graph::<f32>::new();
    let p = g.constant(Tensor::full(&[6, 5], 0.2));
    let ce = cross_entropy(&mut g, p, &[0, 1, 2, 3, 4, 0]).map_err(|e| e.to_string())?;
    let ce_err = (g.value(ce).item() as f64 - 5f64.ln()).abs();

    let mut store = ParamStore::<f64>::new();
    let head = ClassifierHead::new(&mut store, &mut r, 10, 6);
    let o = uniform(&mut r, &[6, 10], -1.0, 1.0);
    let labels = [0, 1, 1, 2, 4, 0];
    let mut g = Graph::new();
    let x = g.constant(o);
    let out = head.forward(&mut g, &store, x).map_err(|e| e.to_string())?;
    let plain = cross_entropy(&mut g, out.probs, &labels).map_err(|e| e.to_string())?;
    let parts = total_loss(&mut g, out, &labels, &LossConfig { alpha: 1.0, tau: 0.3 }).map_err(|e| e.to_string())?;
    let exact = g.value(plain).item().to_bits() == g.value(parts.total).item().to_bits();
    ensure(
        worst < 1e-6 && ce_err < 1e-6 && exact,
        format!("supcon vs double loop max err {worst:.1e} (<1e-6) on 50 batches <= 8; |CE(uniform) - ln 5| {ce_err:.1e} (<1e-6); alpha=1 exact: {exact}"),
    )
}

fn metric_oracle() -> Outcome {
    let mut r = rng(25);
    let mut worst = 0.0f64;
    for _ in 0..25 {
        let classes = r.random_range(2..=5);
        let n = r.random_range(1..40);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let preds: Vec<usize> = labels.iter().map(|&y| if r.random_bool(0.6) { y } else { r.random_range(0..classes) }).collect();
        let cm = confusion_n(&preds, &labels, classes).map_err(|e| e.to_string())?;
        let got = weighted_f1(&cm).map_err(|e| e.to_string())?.weighted;
        worst = worst.max((got - brute_force_f1(&preds, &labels, classes)).abs());
    }
    ensure(worst <= 1e-12, format!("25 random matrices, max |diff| {worst:.1e} (<=1e-12)"))
}

fn feature_corpus() -> Outcome {
    let samples = corpus();
    for (s, tally) in samples.iter().zip(&TALLY) {
        let got = raw_features(s);
        if got != expected_raw(tally) {
            return Err(format!("sample {} differs from the hand tally", s.id));
        }
    }
    let fx = FeatureExtractor::fit(&samples);
    let widths_ok = samples.iter().all(|s| fx.extract(s).0.len() == 32) && FEATURE_DIM == 32;
    ensure(widths_ok, "10 samples match the hand tally exactly; width 32".into())
}

fn desk_data() -> Result<(SyntheticDataset, SyntheticDataset), String> {
    let cfg = SynthConfig::new(32);
    let train = synthesize("train", 100, &cfg, 42).map_err(|e| e.to_string())?;
    let val = synthesize("val", 20, &cfg, 43).map_err(|e| e.to_string())?;
    Ok((train, val))
}

struct Desk {
    train: Split,
    val: Split,
    scaler: cofact::features::FeatureScaler,
}

impl Desk {
    fn load() -> Result<Self, String> {
        let (tr, va) = desk_data()?;
        let fx = FeatureExtractor::fit(&tr.manifest.records);
        let mode = cofact::Parallelism::default();
        let train = Split::new(tr.manifest.records.clone(), tr.stream_tensors(), &fx, mode).map_err(|e| e.to_string())?;
        let val = Split::new(va.manifest.records.clone(), va.stream_tensors(), &fx, mode).map_err(|e| e.to_string())?;
        Ok(Desk { train, val, scaler: fx.scaler })
    }

    fn run(&self, cfg: &RunConfig) -> Result<TrainOutcome, String> {
        train(cfg, &self.train, &self.val, self.scaler.clone(), TrainOptions::default(), None).map_err(|e| e.to_string())
    }
}

const SEEDS: [u64; 3] = [42, 43, 44];

fn desk_experiment(desk: &Desk, full: &[TrainOutcome]) -> Outcome {
    let text_only = desk.run(&RunConfig { seed: 42, ..RunConfig::desk().text_only() })?;
    let labels = &desk.val.labels;
    let mats: Vec<ProbMatrix> = full.iter().map(|o| o.val_probs.clone()).collect();
    let singles: Vec<f64> = mats.iter().map(|m| single_f1(m, labels)).collect();
    let best = singles.iter().copied().fold(0.0, f64::max);
    let opts = TuneOptions::default();
    let unified = tune(&mats, labels, Variant::Unified, &opts).map_err(|e| e.to_string())?.f1.unwrap_or(0.0);
    let average = tune(&mats, labels, Variant::Average, &opts).map_err(|e| e.to_string())?.f1.unwrap_or(0.0);
    let text = single_f1(&text_only.val_probs, labels);
    let gap = singles[0] - text;
    let detail = format!(
        "full seed 42 F1 {:.4} (>=0.90; seeds {}), unified {unified:.4} (>= best single {best:.4}, >= average {average:.4}), text-only {text:.4} (gap {:.1} pts, >=5)",
        singles[0],
        singles.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join("/"),
        100.0 * gap
    );
    ensure(singles[0] >= 0.90 && unified >= best && unified >= average && gap >= 0.05, detail)
}

fn adapter_regime(desk: &Desk, adapter: &[TrainOutcome]) -> Outcome {
    let cfg = RunConfig::desk();
    let mut model = Model::<f32>::new(&cfg, desk.train.dims().map_err(|e| e.to_string())?, cfg.seed).map_err(|e| e.to_string())?;
    model.apply_scope(AdapterScope::AdapterOnly);
    let tail = model.image_tail.clone().ok_or("model has no backbone tail")?;
    let bd = tail.dim;
    let trainable = tail.trainable_count(&model.store);
    let mut g = Graph::<f32>::training(1);
    let batch: Vec<_> = (0..8).map(|i| desk.train.sample(i)).collect();
    let labels: Vec<usize> = desk.train.labels[..8].to_vec();
    let out = model.forward(&mut g, &batch).map_err(|e| e.to_string())?;
    let loss = total_loss(&mut g, out, &labels, &cfg.loss()).map_err(|e| e.to_string())?;
    g.backward(loss.total).map_err(|e| e.to_string())?;
    model.store.zero_grad();
    g.accumulate_into(&mut model.store);
    let params = |m: &Model<f32>, prefix: &str| -> Vec<cofact::param::Parameter<f32>> {
        m.store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(_, p)| p.clone()).collect()
    };
    let host_grad_zero = params(&model, "ffn.").iter().all(|p| p.grad.as_ref().is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    let adapter_grad = params(&model, "adapter.").iter().any(|p| p.grad.as_ref().is_some_and(|t| t.data().iter().any(|&v| v != 0.0)));
    let mut host_unchanged = true;
    for o in adapter {
        let initial = Model::<f32>::new(&o.model.cfg, o.model.dims, o.model.cfg.seed).map_err(|e| e.to_string())?;
        let (before, after) = (params(&initial, "ffn."), params(&o.model, "ffn."));
        host_unchanged &= !before.is_empty() && before.iter().zip(&after).all(|(p, q)| p.value == q.value);
    }

    let mut frozen = Vec::new();
    for seed in SEEDS {
        let o = desk.run(&RunConfig { seed, adapter_scope: AdapterScope::Frozen, ..RunConfig::desk() })?;
        frozen.push(single_f1(&o.val_probs, &desk.val.labels));
    }
    let with: Vec<f64> = adapter.iter().map(|o| single_f1(&o.val_probs, &desk.val.labels)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mf) = (mean(&with), mean(&frozen));
    let fmt = |v: &[f64]| v.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join("/");
    ensure(
        host_grad_zero && adapter_grad && host_unchanged && trainable == bd * bd + 2 * bd && with[0] >= frozen[0],
        format!(
            "host grads zero: {host_grad_zero}, host weights unchanged by training: {host_unchanged}, trainable {trainable} = {bd}^2+2*{bd} = {}; seed 42 F1 adapter {:.4} >= frozen {:.4}; over seeds {}: adapter {} (mean {ma:.4}), frozen {} (mean {mf:.4})",
            bd * bd + 2 * bd,
            with[0],
            frozen[0],
            SEEDS.map(|s| s.to_string()).join("/"),
            fmt(&with),
            fmt(&frozen)
        ),
    )
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
}

fn report(c: &Criterion, started: Instant, result: std::thread::Result<Outcome>) -> bool {
    let elapsed = started.elapsed();
    let outcome = result.unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let in_time = c.limit.is_none_or(|l| elapsed <= l);
    let pass = outcome.is_ok() && in_time;
    let limit = c.limit.map_or(String::new(), |l| format!(", limit {}s", l.as_secs()));
    let detail = outcome.unwrap_or_else(|e| e);
    println!("{} [{}] {}: {detail} ({:.1}s{limit})", if pass { "PASS" } else { "FAIL" }, c.id, c.name, elapsed.as_secs_f64());
    pass
}

fn timed(c: Criterion, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f));
    report(&c, t, r)
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let s = Duration::from_secs;
    let mut ok = true;
    ok &= timed(Criterion { id: 1, name: "gradient suite", limit: Some(s(60)) }, gradient_suite);
    ok &= timed(Criterion { id: 2, name: "fusion invariants", limit: Some(s(10)) }, fusion_invariants);
    ok &= timed(Criterion { id: 3, name: "ensemble lattice and tuner", limit: Some(s(30)) }, ensemble_lattice);
    ok &= timed(Criterion { id: 4, name: "loss oracles", limit: None }, loss_oracles);
    ok &= timed(Criterion { id: 5, name: "metric oracle", limit: None }, metric_oracle);
    ok &= timed(Criterion { id: 6, name: "feature extractor", limit: None }, feature_corpus);

    let t7 = Instant::now();
    let prepared = catch_unwind(AssertUnwindSafe(|| -> Result<(Desk, Vec<TrainOutcome>), String> {
        let desk = Desk::load()?;
        let full = SEEDS.iter().map(|&seed| desk.run(&RunConfig { seed, ..RunConfig::desk() })).collect::<Result<_, _>>()?;
        Ok((desk, full))
    }));
    let c7 = Criterion { id: 7, name: "desk-scale experiment", limit: Some(s(600)) };
    let c8 = Criterion { id: 8, name: "adapter regime", limit: None };
    match prepared {
        Ok(Ok((desk, full))) => {
            let r = catch_unwind(AssertUnwindSafe(|| desk_experiment(&desk, &full)));
            ok &= report(&c7, t7, r);
            ok &= timed(c8, || adapter_regime(&desk, &full));
        }
        other => {
            let msg = match other {
                Ok(Err(e)) => e,
                _ => "training panicked".into(),
            };
            ok &= report(&c7, t7, Ok(Err(msg.clone())));
            ok &= report(&c8, Instant::now(), Ok(Err(msg)));
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
