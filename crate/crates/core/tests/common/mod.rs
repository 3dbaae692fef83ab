//! Reference implementations shared by the integration tests: nested-loop
//! transformer pieces written against parameter names, and counting oracles
//! for the ranking metrics.

#![allow(dead_code)]

use afft_core::anticipator::AnticipatorConfig;
use afft_core::data::ModalitySpec;
use afft_core::fusion::{FuserConfig, FuserKind, ScoreStrategy};
use afft_core::gradcheck::check_params;
use afft_core::model::{ModelConfig, Pipeline};
use afft_core::nn::Ctx;
use afft_core::{Graph, ParamStore, Target, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_f64_slice(shape, &vals).unwrap()
}

/// Overwrites every parameter with uniform values in `±scale`, leaving the
/// LayerNorm gains near one so normalized activations keep their size.
pub fn randomize(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let gain = store.name(id).ends_with(".gamma");
        for v in store.get_mut(id).data_mut() {
            let r = rng.random_range(-scale..scale);
            *v = if gain { 1.0 + r } else { r };
        }
    }
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn p<'a>(s: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    s.by_name(name).unwrap_or_else(|_| panic!("missing parameter {name}"))
}

pub fn linear(s: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    let w = p(s, &format!("{name}.weight"));
    let b = p(s, &format!("{name}.bias"));
    let (din, dout) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| b.data()[j] + (0..din).map(|i| row[i] * w.get2(i, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(s: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    let g = p(s, &format!("{name}.gamma")).data();
    let b = p(s, &format!("{name}.beta")).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// Multi-head attention; `allow(r, c)` selects the visible keys.
pub fn attention(s: &ParamStore<f64>, name: &str, heads: usize, q_in: &Mat, kv_in: &Mat, allow: &dyn Fn(usize, usize) -> bool) -> Mat {
    let q = linear(s, &format!("{name}.wq"), q_in);
    let k = linear(s, &format!("{name}.wk"), kv_in);
    let v = linear(s, &format!("{name}.wv"), kv_in);
    let d = q[0].len();
    let dh = d / heads;
    let mut merged = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (r, out) in merged.iter_mut().enumerate() {
            let scores: Vec<Option<f64>> = (0..k.len())
                .map(|c| {
                    allow(r, c).then(|| cols.clone().map(|j| q[r][j] * k[c][j]).sum::<f64>() / (dh as f64).sqrt())
                })
                .collect();
            let max = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |v| (v - max).exp())).collect();
            let z: f64 = e.iter().sum();
            for j in cols.clone() {
                out[j] = (0..k.len()).map(|c| e[c] / z * v[c][j]).sum();
            }
        }
    }
    linear(s, &format!("{name}.wo"), &merged)
}

pub fn mlp(s: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    let h = linear(s, &format!("{name}.fc1"), x);
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    linear(s, &format!("{name}.fc2"), &h)
}

pub fn encoder_block(s: &ParamStore<f64>, name: &str, heads: usize, x: &Mat, allow: &dyn Fn(usize, usize) -> bool) -> Mat {
    let h = layer_norm(s, &format!("{name}.ln1"), x);
    let x = add(x, &attention(s, &format!("{name}.attn"), heads, &h, &h, allow));
    let h = layer_norm(s, &format!("{name}.ln2"), &x);
    add(&x, &mlp(s, &format!("{name}.mlp"), &h))
}

pub fn decoder_block(s: &ParamStore<f64>, name: &str, heads: usize, x: &Mat, memory: &Mat) -> Mat {
    let causal = |r: usize, c: usize| c <= r;
    let h = layer_norm(s, &format!("{name}.ln1"), x);
    let x = add(x, &attention(s, &format!("{name}.self_attn"), heads, &h, &h, &causal));
    let q = layer_norm(s, &format!("{name}.ln2"), &x);
    let kv = layer_norm(s, &format!("{name}.ln_mem"), memory);
    let x = add(&x, &attention(s, &format!("{name}.cross_attn"), heads, &q, &kv, &causal));
    let h = layer_norm(s, &format!("{name}.ln3"), &x);
    add(&x, &mlp(s, &format!("{name}.mlp"), &h))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Position of the truth after sorting classes by descending probability,
/// lower id first among equals.
pub fn sorted_rank(probs: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.iter().position(|&c| c == truth).unwrap()
}

/// Random distributions over `classes` built from small integer weights so
/// that ties are common.
pub fn random_instance(rng: &mut ChaCha8Rng, samples: usize, classes: usize) -> Vec<(Vec<f64>, usize)> {
    (0..samples)
        .map(|_| {
            let w: Vec<f64> = (0..classes).map(|_| rng.random_range(0..4) as f64 + 1.0).collect();
            let s: f64 = w.iter().sum();
            (w.iter().map(|v| v / s).collect(), rng.random_range(0..classes))
        })
        .collect()
}

/// `(top-k accuracy, class-mean top-k recall)` by direct counting, in percent.
pub fn counting_oracle(inst: &[(Vec<f64>, usize)], k: usize) -> (f64, f64) {
    let classes = inst[0].0.len();
    let mut n = vec![0usize; classes];
    let mut h = vec![0usize; classes];
    let mut total = 0usize;
    for (p, t) in inst {
        let hit = sorted_rank(p, *t) < k;
        n[*t] += 1;
        h[*t] += hit as usize;
        total += hit as usize;
    }
    let present: Vec<usize> = (0..classes).filter(|&c| n[c] > 0).collect();
    let recall_sum: f64 = present.iter().map(|&c| h[c] as f64 / n[c] as f64).sum();
    (100.0 * total as f64 / inst.len() as f64, 100.0 * recall_sum / present.len() as f64)
}

pub type Build = fn(&mut Graph<f64>, &[Var]) -> afft_core::Result<Var>;

/// One small scalar-valued graph per differentiable op, with input shapes.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let m2 = g.mul(m, m)?;
            g.sum(m2)
        }),
        ("transpose", vec![vec![3, 2], vec![3, 2]], |g, v| {
            let t = g.transpose(v[0])?;
            let p = g.matmul(t, v[1])?;
            let p = g.mul(p, p)?;
            g.sum(p)
        }),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(v[0], v[1])?;
            let m = g.mul(a, s)?;
            let m = g.mul(m, v[0])?;
            g.sum(m)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            let y = g.mul(y, y)?;
            g.mean(y)
        }),
        ("scale_by", vec![vec![1], vec![2, 3]], |g, v| {
            let y = g.scale_by(v[0], v[1])?;
            let y = g.mul(y, v[1])?;
            g.sum(y)
        }),
        ("softmax_masked", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let mask = [true, false, true, true, true, true, false, false, false, true, true, true];
            let s = g.softmax(v[0], 1, Some(&mask))?;
            let p = g.mul(s, v[1])?;
            g.sum(p)
        }),
        ("softmax_axis0", vec![vec![3, 2], vec![3, 2]], |g, v| {
            let s = g.softmax(v[0], 0, None)?;
            let p = g.mul(s, v[1])?;
            g.sum(p)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5], vec![3, 5]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let y = g.mul(y, v[3])?;
            g.sum(y)
        }),
        ("gelu_relu_sigmoid", vec![vec![2, 4], vec![2, 4]], |g, v| {
            let a = g.gelu(v[0])?;
            let b = g.relu(v[1])?;
            let c = g.sigmoid(v[0])?;
            let ab = g.mul(a, b)?;
            let abc = g.add(ab, c)?;
            g.sum(abc)
        }),
        ("log", vec![vec![2, 3]], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let one = g.constant(Tensor::full(&[2, 3], 1.0));
            let p = g.add(sq, one)?;
            let l = g.log(p)?;
            g.sum(l)
        }),
        ("slice_concat_gather", vec![vec![3, 4], vec![3, 2]], |g, v| {
            let a = g.slice_cols(v[0], 1, 2)?;
            let c = g.concat_cols(&[a, v[1], a])?;
            let r = g.gather_rows(c, &[2, 0, 2])?;
            let rr = g.concat_rows(&[r, c])?;
            let m = g.mean_rows(rr)?;
            let m = g.mul(m, m)?;
            g.sum(m)
        }),
        ("cross_entropy", vec![vec![3, 5]], |g, v| {
            g.cross_entropy(
                v[0],
                &[
                    Target::Class(1),
                    Target::Ignore,
                    Target::Soft(vec![0.1, 0.2, 0.3, 0.4, 0.0]),
                ],
            )
        }),
        ("mse", vec![vec![2, 3], vec![2, 3]], |g, v| g.mse(v[0], v[1])),
        ("mask_mul", vec![vec![2, 2]], |g, v| {
            let m = g.mask_mul(v[0], vec![0.0, 2.0, 1.0, 0.5])?;
            let m = g.mul(m, v[0])?;
            g.sum(m)
        }),
    ]
}

/// Two modalities, `T = 3`, width 8, one block each, no dropout.
pub fn tiny(kind: FuserKind, score: Option<ScoreStrategy>) -> ModelConfig {
    ModelConfig {
        fuser: FuserConfig {
            kind,
            dim: 8,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            drop_path: 0.0,
            max_len: 4,
            ..Default::default()
        },
        anticipator: AnticipatorConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            max_len: 4,
            dropout: 0.0,
            drop_path: 0.0,
        },
        score_fusion: score,
        ..Default::default()
    }
}

/// Worst parameter of a finite-difference check of the full training loss.
pub fn end_to_end_worst(cfg: &ModelConfig, seed: u64, h: f64) -> (String, f64) {
    let specs = [ModalitySpec::new("rgb", 8), ModalitySpec::new("obj", 5)];
    let classes = 4;
    let mut store = ParamStore::<f64>::new();
    let pipeline = Pipeline::build(&mut store, cfg, &specs, classes, seed).unwrap();
    randomize(&mut store, 0.3, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let xs = [rand_tensor(&mut rng, &[3, 8], 1.0), rand_tensor(&mut rng, &[3, 5], 1.0)];
    let frames = vec![Target::Class(1), Target::Class(3), Target::Class(0)];
    let report = check_params(&store, h, |g, s| {
        let mut cx = Ctx::eval(g, s);
        let vars: Vec<_> = xs.iter().map(|x| cx.g.constant(x.clone())).collect();
        pipeline.loss(&mut cx, &vars, Some(&frames), &Target::Class(2))
    })
    .unwrap();
    let w = report.worst().unwrap();
    (w.name.clone(), w.rel_err)
}
