//! Finite-difference cases for every differentiable operation, module and
//! the composed pipeline.

use super::{check_inputs, check_params, rng, uniform, GradReport};

use cofact::classifier::{cross_entropy, supcon_loss, total_loss, ClassifierHead, LossConfig};
use cofact::config::RunConfig;
use cofact::data::{synthesize, SynthConfig};
use cofact::embedding::{AdapterBlock, AdapterScope, StreamEmbedder, StreamId};
use cofact::features::FeatureExtractor;
use cofact::fusion::{Aggregation, CoAttentionBlock, CoAttentionConfig, EmbeddedStreams, Fusion, FusionLayout};
use cofact::model::{InputDims, Model, SampleRef};
use cofact::{Parallelism, ParamStore, Tensor};

pub const SEEDS: std::ops::Range<u64> = 0..10;
pub const OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

pub struct Case {
    pub name: String,
    pub tol: f64,
    run: Box<dyn Fn(u64) -> GradReport>,
}

impl Case {
    fn new(name: impl Into<String>, tol: f64, run: impl Fn(u64) -> GradReport + 'static) -> Self {
        Case { name: name.into(), tol, run: Box::new(run) }
    }

    /// Merged report over every seed.
    pub fn sweep(&self) -> GradReport {
        let mut all = GradReport::default();
        for seed in SEEDS {
            all.merge((self.run)(seed));
        }
        all
    }

    pub fn passes(&self, r: &GradReport) -> bool {
        r.checked > 0 && r.worst < self.tol && r.skip_rate() < 0.01
    }
}

pub fn tensor_ops() -> Vec<Case> {
    let mut cases = vec![
        Case::new("matmul", OP_TOL, |seed| {
            let mut r = rng(seed);
            let (a, b) = (uniform(&mut r, &[4, 3], -1.0, 1.0), uniform(&mut r, &[3, 2], -1.0, 1.0));
            check_inputs(&[a, b], |g, v| g.matmul(v[0], v[1]))
        }),
        Case::new("transpose", OP_TOL, |seed| {
            let a = uniform(&mut rng(seed), &[3, 5], -1.0, 1.0);
            check_inputs(&[a], |g, v| g.transpose(v[0]))
        }),
        Case::new("add/mul/scale", OP_TOL, |seed| {
            let mut r = rng(seed);
            let (a, b) = (uniform(&mut r, &[3, 4], -2.0, 2.0), uniform(&mut r, &[3, 4], -2.0, 2.0));
            check_inputs(&[a, b], |g, v| {
                let s = g.add(v[0], v[1])?;
                let m = g.mul(s, v[1])?;
                Ok(g.scale(m, 0.7))
            })
        }),
        Case::new("add_bias", OP_TOL, |seed| {
            let mut r = rng(seed);
            let (x, b) = (uniform(&mut r, &[4, 3], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0));
            check_inputs(&[x, b], |g, v| g.add_bias(v[0], v[1]))
        }),
        Case::new("relu", OP_TOL, |seed| {
            let x = uniform(&mut rng(seed), &[5, 4], -1.0, 1.0);
            check_inputs(&[x], |g, v| Ok(g.relu(v[0])))
        }),
        Case::new("log_clamped", OP_TOL, |seed| {
            let x = uniform(&mut rng(seed), &[6], 0.2, 3.0);
            check_inputs(&[x], |g, v| Ok(g.log_clamped(v[0], 1e-12)))
        }),
        Case::new("log_softmax_masked", OP_TOL, |seed| {
            let x = uniform(&mut rng(seed), &[4, 4], -2.0, 2.0);
            let keep: Vec<bool> = (0..16).map(|i| i / 4 != i % 4).collect();
            check_inputs(&[x], move |g, v| g.log_softmax_masked(v[0], keep.clone()))
        }),
        Case::new("layer_norm", OP_TOL, |seed| {
            let mut r = rng(seed);
            let x = uniform(&mut r, &[3, 5], -2.0, 2.0);
            let gain = uniform(&mut r, &[5], 0.5, 1.5);
            let bias = uniform(&mut r, &[5], -0.5, 0.5);
            check_inputs(&[x, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
        }),
        Case::new("concat", OP_TOL, |seed| {
            let mut r = rng(seed);
            let (a, b) = (uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[2, 2], -1.0, 1.0));
            check_inputs(&[a, b], |g, v| g.concat(&[v[0], v[1], v[0]], 1))
        }),
        Case::new("narrow/reshape", OP_TOL, |seed| {
            let x = uniform(&mut rng(seed), &[4, 3], -1.0, 1.0);
            check_inputs(&[x], |g, v| {
                let n = g.narrow(v[0], 0, 1, 2)?;
                g.reshape(n, &[3, 2])
            })
        }),
        Case::new("narrow columns", OP_TOL, |seed| {
            let x = uniform(&mut rng(seed), &[3, 6], -1.0, 1.0);
            check_inputs(&[x], |g, v| {
                let a = g.narrow(v[0], 1, 0, 2)?;
                let b = g.narrow(v[0], 1, 3, 3)?;
                g.concat(&[b, a], 1)
            })
        }),
        Case::new("sum", OP_TOL, |seed| {
            let x = uniform(&mut rng(seed), &[2, 2, 2], -1.0, 1.0);
            check_inputs(&[x], |g, v| Ok(g.sum(v[0])))
        }),
        Case::new("dropout", OP_TOL, |seed| {
            let x = uniform(&mut rng(seed), &[4, 4], -1.0, 1.0);
            check_inputs(&[x], move |g, v| g.dropout_seeded(v[0], 0.3, seed))
        }),
        Case::new("l2_normalize_rows", OP_TOL, |seed| {
            let x = uniform(&mut rng(seed), &[3, 4], -1.0, 1.0);
            check_inputs(&[x], |g, v| g.l2_normalize_rows(v[0]))
        }),
    ];
    for axis in [0, 1] {
        cases.push(Case::new(format!("softmax axis {axis}"), OP_TOL, move |seed| {
            let x = uniform(&mut rng(seed), &[3, 4], -2.0, 2.0);
            check_inputs(&[x], |g, v| g.softmax(v[0], axis))
        }));
        cases.push(Case::new(format!("mean axis {axis}"), OP_TOL, move |seed| {
            let x = uniform(&mut rng(seed), &[4, 3], -1.0, 1.0);
            check_inputs(&[x], |g, v| g.mean(v[0], axis))
        }));
        cases.push(Case::new(format!("max axis {axis}"), OP_TOL, move |seed| {
            let x = uniform(&mut rng(seed), &[4, 3], -1.0, 1.0);
            check_inputs(&[x], |g, v| g.max(v[0], axis))
        }));
    }
    cases
}

fn attention_cfg() -> CoAttentionConfig {
    CoAttentionConfig { d: 8, heads: 2, ff_inner: 16, dropout: 0.0, scale_by_model_dim: false }
}

fn streams_of(v: &[cofact::Var]) -> EmbeddedStreams {
    EmbeddedStreams { claim_text: Some(v[0]), claim_image: Some(v[1]), doc_text: Some(v[2]), doc_image: Some(v[3]) }
}

pub fn modules() -> Vec<Case> {
    let mut cases = vec![Case::new("embed_stream", OP_TOL, |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let e = StreamEmbedder::new(&mut store, &mut r, StreamId::ClaimImage, 5, 4);
        let x = uniform(&mut r, &[3, 5], -1.0, 1.0);
        check_params(&store, 64, seed, |g, s| {
            let xv = g.constant(x.clone());
            let y = e.forward(g, s, xv)?;
            Ok(g.sum(y))
        })
    })];
    for scope in [AdapterScope::AdapterOnly, AdapterScope::All] {
        cases.push(Case::new(format!("adapt {scope:?}"), OP_TOL, move |seed| {
            let mut r = rng(seed);
            let mut store = ParamStore::<f64>::new();
            let a = AdapterBlock::new(&mut store, &mut r, "ffn", "adapter", 4);
            a.apply_scope(&mut store, scope);
            for id in [a.adapter_b, a.adapter_v, a.ffn_b1] {
                store.get_mut(id).value = uniform(&mut r, store.get(id).value.dims(), -0.5, 0.5);
            }
            let x = uniform(&mut r, &[3, 4], -1.0, 1.0);
            check_params(&store, 64, seed, |g, s| {
                let xv = g.constant(x.clone());
                let y = a.forward(g, s, xv, scope)?;
                let y = g.mul(y, y)?;
                Ok(g.sum(y))
            })
        }));
    }
    cases.push(Case::new("co_attend", OP_TOL, |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let blk = CoAttentionBlock::new(&mut store, &mut r, "fusion.pair1", attention_cfg()).unwrap();
        let (a, b) = (uniform(&mut r, &[3, 8], -1.0, 1.0), uniform(&mut r, &[4, 8], -1.0, 1.0));
        check_inputs(&[a, b], |g, v| {
            let (ab, ba) = blk.co_attend(g, &store, v[0], v[1])?;
            let ab = g.mean(ab.out, 0)?;
            let ba = g.mean(ba.out, 0)?;
            g.concat(&[ab, ba], 0)
        })
    }));
    cases.push(Case::new("fuse", END_TO_END_TOL, |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let fusion = Fusion::new(&mut store, &mut r, attention_cfg(), FusionLayout::Full, Aggregation::Mean).unwrap();
        let streams: Vec<Tensor<f64>> = [3, 4, 3, 4].iter().map(|&l| uniform(&mut r, &[l, 8], -1.0, 1.0)).collect();
        let mut report = check_inputs(&streams, |g, v| fusion.fuse(g, &store, &streams_of(v))?.concat(g));
        report.merge(check_params(&store, 6, seed, |g, s| {
            let v: Vec<_> = streams.iter().map(|t| g.constant(t.clone())).collect();
            let o = fusion.fuse(g, s, &streams_of(&v))?.concat(g)?;
            let o = g.mul(o, o)?;
            Ok(g.sum(o))
        }));
        report
    }));
    cases.push(Case::new("cross_entropy . classify", OP_TOL, |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let head = ClassifierHead::new(&mut store, &mut r, 12, 6);
        let o = uniform(&mut r, &[5, 12], -1.0, 1.0);
        let labels = [0, 3, 1, 4, 3];
        check_params(&store, 80, seed, |g, s| {
            let x = g.constant(o.clone());
            let out = head.forward(g, s, x)?;
            cross_entropy(g, out.probs, &labels)
        })
    }));
    cases.push(Case::new("supcon", OP_TOL, |seed| {
        let emb = uniform(&mut rng(seed), &[6, 4], -1.0, 1.0);
        let labels = [0, 1, 0, 2, 1, 0];
        let mut rep = check_inputs(&[emb.clone()], |g, v| supcon_loss(g, v[0], &labels, 0.3));
        rep.merge(check_inputs(&[emb], |g, v| supcon_loss(g, v[0], &labels, 1.0)));
        rep
    }));
    cases
}

/// Joint loss of a d=8, h=2 model with dropout, the adapter and the
/// contrastive term all active.
pub fn pipeline() -> Case {
    Case::new("full pipeline", END_TO_END_TOL, |seed| {
        let cfg = RunConfig {
            d: 8,
            heads: 2,
            ff_inner: 16,
            d_m: 8,
            dropout: 0.1,
            alpha: 0.7,
            adapter_scope: AdapterScope::All,
            ..RunConfig::default()
        };
        let synth = SynthConfig { min_len: 2, max_len: 4, ..SynthConfig::new(5) };
        let data = synthesize("train", 2, &synth, seed).unwrap();
        let streams = data.stream_tensors();
        let fx = FeatureExtractor::fit(&data.manifest.records);
        let feats = fx.extract_batch(&data.manifest.records, Parallelism::Sequential);
        let labels: Vec<usize> = data.manifest.records.iter().map(|r| r.label.unwrap().index()).collect();
        let samples: Vec<_> = streams.iter().zip(&feats).map(|(s, f)| SampleRef { streams: s, features: f }).collect();
        let mut model = Model::<f64>::new(&cfg, InputDims::of(&streams[0]), seed).unwrap();
        let id = model.store.id("adapter.v").unwrap();
        model.store.get_mut(id).value = uniform(&mut rng(seed), &[5], -0.3, 0.3);
        check_params(&model.store, 2, seed, |g, store| {
            let m = Model { store: store.clone(), ..model.clone() };
            let out = m.forward(g, &samples)?;
            Ok(total_loss(g, out, &labels, &LossConfig { alpha: 0.7, tau: 0.3 })?.total)
        })
    })
}
