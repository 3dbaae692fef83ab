mod common;

use afft_core::data::ModalitySpec;
use afft_core::fusion::{
    average_fuse, weighted_fuse, Fuser, FuserConfig, FuserKind, MattHead, Projection, ProjectionPolicy,
};
use afft_core::nn::Ctx;
use afft_core::trace::{AttentionTrace, TokenRole};
use afft_core::{Error, Graph, ParamStore, Tensor};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mods(dims: &[usize]) -> Vec<ModalitySpec> {
    dims.iter()
        .enumerate()
        .map(|(i, &d)| ModalitySpec::new(format!("m{i}"), d))
        .collect()
}

fn cfg(kind: FuserKind, dim: usize, layers: usize, heads: usize) -> FuserConfig {
    FuserConfig {
        kind,
        dim,
        layers,
        heads,
        dropout: 0.0,
        drop_path: 0.0,
        max_len: 8,
        ..Default::default()
    }
}

fn build(cfg: &FuserConfig, modalities: &[ModalitySpec], out_dim: usize, seed: u64) -> (ParamStore<f64>, Fuser) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Fuser::new(&mut store, cfg, modalities, out_dim, &mut rng).unwrap();
    randomize(&mut store, 0.5, seed + 1000);
    (store, f)
}

fn run(store: &ParamStore<f64>, f: &Fuser, inputs: &[Tensor<f64>]) -> Tensor<f64> {
    run_traced(store, f, inputs).0
}

fn run_traced(store: &ParamStore<f64>, f: &Fuser, inputs: &[Tensor<f64>]) -> (Tensor<f64>, AttentionTrace) {
    let mut g = Graph::new();
    let mut trace = AttentionTrace::new();
    let z = {
        let mut cx = Ctx::eval(&mut g, store).with_trace(&mut trace);
        let xs: Vec<_> = inputs.iter().map(|t| cx.g.constant(t.clone())).collect();
        f.forward(&mut cx, &xs).unwrap()
    };
    (g.value(z).clone(), trace)
}

fn inputs(rng: &mut ChaCha8Rng, t: usize, dims: &[usize], scale: f64) -> Vec<Tensor<f64>> {
    dims.iter().map(|&d| rand_tensor(rng, &[t, d], scale)).collect()
}

fn project_one(policy: ProjectionPolicy, in_dim: usize, d: usize, x: &Tensor<f64>, set: impl Fn(&mut ParamStore<f64>)) -> (ParamStore<f64>, Tensor<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let proj = Projection::new(&mut store, "p", policy, in_dim, d, &mut rng).unwrap();
    set(&mut store);
    let mut g = Graph::new();
    let y = {
        let mut cx = Ctx::eval(&mut g, &store);
        let xv = cx.g.constant(x.clone());
        proj.forward(&mut cx, xv).unwrap()
    };
    (store.clone(), g.value(y).clone())
}

#[test]
fn sparse_linear_passes_matching_width_through_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let wide = rand_tensor(&mut rng, &[2, 1024], 3.0);
    let (store, y) = project_one(ProjectionPolicy::SparseLinear, 1024, 1024, &wide, |_| {});
    assert!(store.is_empty());
    assert_eq!(y, wide);

    let narrow = rand_tensor(&mut rng, &[2, 352], 3.0);
    let (store, y) = project_one(ProjectionPolicy::SparseLinear, 352, 1024, &narrow, |_| {});
    assert_eq!(y.shape(), &[2, 1024]);
    let expect = linear(&store, "p", &to_mat(&narrow));
    assert!(max_abs_diff(y.data(), &flat(&expect)) < 1e-12);
}

#[test]
fn glu_with_zero_gate_halves_the_value_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 5], 2.0);
    let (store, y) = project_one(ProjectionPolicy::Glu, 5, 4, &x, |s| {
        for v in s.by_name_mut("p.gate.weight").unwrap().data_mut() {
            *v = 0.0;
        }
        randomize_one(s, "p.value.bias");
    });
    let value = linear(&store, "p.value", &to_mat(&x));
    let half: Vec<f64> = flat(&value).iter().map(|v| 0.5 * v).collect();
    assert!(max_abs_diff(y.data(), &half) < 1e-15);
}

fn randomize_one(s: &mut ParamStore<f64>, name: &str) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = s.by_name_mut(name).unwrap();
    let r = rand_tensor(&mut rng, t.shape(), 1.0);
    *t = r;
}

#[test]
fn linear_with_identity_weight_is_the_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 6], 5.0);
    let (_, y) = project_one(ProjectionPolicy::Linear, 6, 6, &x, |s| {
        *s.by_name_mut("p.weight").unwrap() = Tensor::eye(6);
    });
    assert_eq!(y, x);
}

#[test]
fn linear_relu_rectifies() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 6], 5.0);
    let (_, y) = project_one(ProjectionPolicy::LinearRelu, 6, 6, &x, |s| {
        *s.by_name_mut("p.weight").unwrap() = Tensor::eye(6);
    });
    let expect: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(y.data(), expect.as_slice());
}

#[test]
fn sa_matches_per_timestep_encoder_oracle() {
    // M=2, L=1, one head; every timestep is an independent 3-token sequence
    let c = cfg(FuserKind::Sa, 4, 1, 1);
    let (store, f) = build(&c, &mods(&[4, 4]), 4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs = inputs(&mut rng, 3, &[4, 4], 1.0);
    let z = run(&store, &f, &xs);

    let token = p(&store, "fuser.token").row(0).to_vec();
    for i in 0..3 {
        let seq = vec![token.clone(), xs[0].row(i).to_vec(), xs[1].row(i).to_vec()];
        let h = encoder_block(&store, "fuser.block0", 1, &seq, &|_, _| true);
        let out = layer_norm(&store, "fuser.norm", &vec![h[0].clone()]);
        assert!(max_abs_diff(z.row(i), &out[0]) < 1e-12, "timestep {i}");
    }
}

#[test]
fn tokenless_sa_with_bypassed_blocks_is_the_input_mean() {
    let mut c = cfg(FuserKind::SaNoToken, 6, 2, 2);
    c.final_norm = false;
    let (store, mut f) = build(&c, &mods(&[6, 6, 6]), 6, 9);
    f.set_bypass_blocks(true);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xs = inputs(&mut rng, 4, &[6, 6, 6], 3.0);
    let z = run(&store, &f, &xs);
    for (j, v) in z.data().iter().enumerate() {
        let mean = xs.iter().map(|x| x.data()[j]).sum::<f64>() / 3.0;
        assert!((v - mean).abs() < 1e-14);
    }
}

/// Builds the same fuser with modalities listed in `perm` order, sharing
/// every parameter by name.
fn permuted(c: &FuserConfig, specs: &[ModalitySpec], perm: &[usize], store: &ParamStore<f64>) -> (ParamStore<f64>, Fuser) {
    let specs: Vec<ModalitySpec> = perm.iter().map(|&i| specs[i].clone()).collect();
    let mut s2 = ParamStore::new();
    let f2 = Fuser::new(&mut s2, c, &specs, c.dim, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    s2.load_from(store).unwrap();
    (s2, f2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sa_token_output_ignores_modality_order(
        seed in 0u64..1_000,
        m in 2usize..5,
        t in 1usize..4,
        shuffle in any::<u64>(),
        kind in prop_oneof![Just(FuserKind::Sa), Just(FuserKind::SaNoToken)],
    ) {
        use rand::seq::SliceRandom;
        let c = cfg(kind, 8, 2, 2);
        let dims: Vec<usize> = (0..m).map(|i| [8, 5, 3, 8][i]).collect();
        let specs = mods(&dims);
        let (store, f) = build(&c, &specs, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let xs = inputs(&mut rng, t, &dims, 2.0);
        let z = run(&store, &f, &xs);

        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let (s2, f2) = permuted(&c, &specs, &perm, &store);
        let xs2: Vec<Tensor<f64>> = perm.iter().map(|&i| xs[i].clone()).collect();
        let z2 = run(&s2, &f2, &xs2);
        prop_assert!(max_abs_diff(z.data(), z2.data()) < 1e-6);
    }

    #[test]
    fn fused_outputs_stay_finite_for_bounded_inputs(seed in 0u64..1_000, t in 1usize..5, k in 0usize..4) {
        let kind = [FuserKind::Sa, FuserKind::SaNoToken, FuserKind::Tsa, FuserKind::Ca][k];
        let dims = [8, 6, 4];
        let (store, f) = build(&cfg(kind, 8, 2, 2), &mods(&dims), 5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = inputs(&mut rng, t, &dims, 10.0);
        let z = run(&store, &f, &xs);
        prop_assert_eq!(z.shape(), &[t, 5]);
        prop_assert!(z.all_finite());
    }

    #[test]
    fn score_fusion_outputs_are_distributions(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..5),
        wraw in prop::collection::vec(0.01f64..1.0, 4),
    ) {
        let probs: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|v| v / s).collect() })
            .collect();
        let w = &wraw[..probs.len()];
        let ws: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|v| v / ws).collect();
        for out in [average_fuse(&probs).unwrap(), weighted_fuse(&probs, &w).unwrap()] {
            prop_assert!(out.iter().all(|&v| v >= 0.0));
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn perturb_timestep(xs: &[Tensor<f64>], time: usize, by: f64) -> Vec<Tensor<f64>> {
    xs.iter()
        .map(|x| {
            let mut x = x.clone();
            let c = x.cols();
            for v in &mut x.data_mut()[time * c..(time + 1) * c] {
                *v += by;
            }
            x
        })
        .collect()
}

#[test]
fn sa_has_no_cross_timestep_influence() {
    for kind in [FuserKind::Sa, FuserKind::SaNoToken] {
        let dims = [6, 4];
        let (store, f) = build(&cfg(kind, 6, 2, 2), &mods(&dims), 6, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs = inputs(&mut rng, 4, &dims, 1.0);
        let z = run(&store, &f, &xs);
        for j in 0..4 {
            let z2 = run(&store, &f, &perturb_timestep(&xs, j, 0.7));
            for i in 0..4 {
                if i == j {
                    assert_ne!(z.row(i), z2.row(i));
                } else {
                    assert_eq!(z.row(i), z2.row(i), "{kind:?}: time {j} changed time {i}");
                }
            }
        }
    }
}

#[test]
fn tsa_and_ca_are_causal() {
    for kind in [FuserKind::Tsa, FuserKind::Ca] {
        let dims = [6, 4, 5];
        let (store, f) = build(&cfg(kind, 6, 2, 2), &mods(&dims), 6, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let t = 5;
        let xs = inputs(&mut rng, t, &dims, 1.0);
        let z = run(&store, &f, &xs);
        for j in 0..t {
            let z2 = run(&store, &f, &perturb_timestep(&xs, j, -0.9));
            for i in 0..j {
                assert_eq!(z.row(i), z2.row(i), "{kind:?}: time {j} changed time {i}");
            }
            assert_ne!(z.row(j), z2.row(j));
        }
    }
}

#[test]
fn tsa_of_one_step_equals_sa_with_shared_weights() {
    let dims = [6, 6];
    let (mut ts, tf) = build(&cfg(FuserKind::Tsa, 6, 2, 2), &mods(&dims), 6, 16);
    for v in ts.by_name_mut("fuser.pos").unwrap().data_mut() {
        *v = 0.0;
    }
    let mut ss = ParamStore::new();
    let sf = Fuser::new(&mut ss, &cfg(FuserKind::Sa, 6, 2, 2), &mods(&dims), 6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ids: Vec<_> = ss.ids().collect();
    for id in ids {
        let name = ss.name(id).to_string();
        *ss.get_mut(id) = if name == "fuser.token" {
            Tensor::new(vec![1, 6], p(&ts, "fuser.tokens").row(0).to_vec()).unwrap()
        } else {
            p(&ts, &name).clone()
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xs = inputs(&mut rng, 1, &dims, 2.0);
    let a = run(&ts, &tf, &xs);
    let b = run(&ss, &sf, &xs);
    assert!(max_abs_diff(a.data(), b.data()) < 1e-12);
}

#[test]
fn tsa_mask_matches_enumerated_pairs() {
    let (t, m) = (3, 2);
    let (store, f) = build(&cfg(FuserKind::Tsa, 4, 1, 2), &mods(&[4, 4]), 4, 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (_, trace) = run_traced(&store, &f, &inputs(&mut rng, t, &[4, 4], 1.0));
    let layer = &trace.layers[0];

    // rows: query tokens q0..q2, then modality 0 at t0..t2, then modality 1
    let mut expected_roles = Vec::new();
    for time in 0..t {
        expected_roles.push(TokenRole::FusionToken { time });
    }
    for index in 0..m {
        for time in 0..t {
            expected_roles.push(TokenRole::Modality { index, time });
        }
    }
    assert_eq!(&*layer.rows, expected_roles.as_slice());
    let time_of = [0, 1, 2, 0, 1, 2, 0, 1, 2];
    let mut allowed = Vec::new();
    for r in 0..9 {
        for c in 0..9 {
            if time_of[c] <= time_of[r] {
                allowed.push((r, c));
            }
        }
    }
    assert_eq!(allowed.len(), 9 * 6);
    for h in &layer.heads {
        for r in 0..9 {
            for c in 0..9 {
                let w = h.get2(r, c);
                assert_eq!(w > 0.0, allowed.contains(&(r, c)), "pair ({r}, {c})");
            }
        }
    }
}

#[test]
fn ca_with_one_modality_is_projection_plus_position() {
    let (store, f) = build(&cfg(FuserKind::Ca, 5, 6, 1), &mods(&[5]), 5, 20);
    assert_eq!(f.ca_modalities(), Some((0, &[][..])));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let xs = inputs(&mut rng, 3, &[5], 1.0);
    let z = run(&store, &f, &xs);
    let pos = p(&store, "fuser.pos");
    for i in 0..3 {
        let expect: Vec<f64> = xs[0].row(i).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
        assert_eq!(z.row(i), expect.as_slice());
    }
}

#[test]
fn ca_matches_decoder_oracle() {
    let mut c = cfg(FuserKind::Ca, 4, 1, 2);
    c.projection = ProjectionPolicy::Linear;
    let (store, f) = build(&c, &mods(&[3, 5]), 6, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let xs = inputs(&mut rng, 2, &[3, 5], 1.0);
    let z = run(&store, &f, &xs);

    let pos = to_mat(p(&store, "fuser.pos"));
    let pos = pos[..2].to_vec();
    let stream = add(&linear(&store, "fuser.proj.m0", &to_mat(&xs[0])), &pos);
    let memory = add(&linear(&store, "fuser.proj.m1", &to_mat(&xs[1])), &pos);
    let h = decoder_block(&store, "fuser.block0", 2, &stream, &memory);
    let out = linear(&store, "fuser.out", &h);
    assert!(max_abs_diff(z.data(), &flat(&out)) < 1e-12);
}

#[test]
fn ca_cross_attention_rows_sum_to_one() {
    let (store, f) = build(&cfg(FuserKind::Ca, 6, 1, 3), &mods(&[6, 4, 2]), 6, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let (_, trace) = run_traced(&store, &f, &inputs(&mut rng, 4, &[6, 4, 2], 1.0));
    let cross: Vec<_> = trace.layers.iter().filter(|l| l.name.ends_with("cross_attn")).collect();
    assert_eq!(cross.len(), 2);
    for l in cross {
        for h in &l.heads {
            for r in 0..h.rows() {
                assert!((h.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn ca_order_follows_config() {
    let specs = mods(&[4, 4, 4]);
    let mut c = cfg(FuserKind::Ca, 4, 1, 1);
    c.main_modality = Some("m1".into());
    c.modality_order = vec!["m2".into(), "m0".into()];
    let (_, f) = build(&c, &specs, 4, 26);
    assert_eq!(f.ca_modalities(), Some((1, &[2, 0][..])));

    c.main_modality = Some("audio".into());
    let err = Fuser::new(&mut ParamStore::<f64>::new(), &c, &specs, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    c.main_modality = None;
    c.modality_order = vec!["m1".into()];
    assert!(Fuser::new(&mut ParamStore::<f64>::new(), &c, &specs, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn ca_per_modality_positions_are_separate_tables() {
    let mut c = cfg(FuserKind::Ca, 4, 1, 1);
    c.per_modality_pos = true;
    let (store, _) = build(&c, &mods(&[4, 4, 4]), 4, 27);
    assert!(store.id("fuser.pos.m1").is_some());
    assert!(store.id("fuser.pos.m2").is_some());
    assert!(store.id("fuser.pos.m0").is_none());
}

#[test]
fn config_errors() {
    let specs = mods(&[4, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = Fuser::new(&mut ParamStore::<f64>::new(), &cfg(FuserKind::Sa, 6, 1, 4), &specs, 6, &mut rng).unwrap_err();
    assert!(matches!(err, Error::IndivisibleHeads { dim: 6, heads: 4 }));
    assert!(Fuser::new(&mut ParamStore::<f64>::new(), &cfg(FuserKind::Sa, 4, 0, 1), &specs, 4, &mut rng).is_err());
    assert!(Fuser::new(&mut ParamStore::<f64>::new(), &cfg(FuserKind::Sa, 4, 1, 1), &[], 4, &mut rng).is_err());

    let (store, f) = build(&cfg(FuserKind::Tsa, 4, 1, 1), &specs, 4, 28);
    let xs = inputs(&mut rng, 9, &[4, 4], 1.0);
    let mut g = Graph::new();
    let mut cx = Ctx::eval(&mut g, &store);
    let vars: Vec<_> = xs.iter().map(|t| cx.g.constant(t.clone())).collect();
    assert!(matches!(f.forward(&mut cx, &vars), Err(Error::SequenceTooLong { len: 9, max: 8 })));
    assert!(f.forward(&mut cx, &vars[..1]).is_err());
}

#[test]
fn score_fusion_examples() {
    let p = vec![0.2, 0.5, 0.3];
    let same = vec![p.clone(), p.clone(), p.clone()];
    assert_eq!(average_fuse(&same).unwrap(), p);
    let w = weighted_fuse(&same, &[0.1, 0.6, 0.3]).unwrap();
    assert!(max_abs_diff(&w, &p) < 1e-15);
    assert_eq!(average_fuse(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
    assert!(matches!(weighted_fuse(&same, &[0.5, 0.5, 0.5]), Err(Error::Invalid(_))));
    assert!(weighted_fuse(&[vec![0.7, 0.7]], &[1.0]).is_err());
}

fn matt_output(m: usize, probs: &[Vec<f64>], seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = MattHead::new(&mut store, "matt", 7, m, &mut rng).unwrap();
    randomize(&mut store, 0.5, seed);
    let mut g = Graph::new();
    let (alpha, mixed) = {
        let mut cx = Ctx::eval(&mut g, &store);
        let feats = cx.g.constant(rand_tensor(&mut rng, &[1, 7], 3.0));
        let alpha = head.weights(&mut cx, feats).unwrap();
        let ps: Vec<_> = probs
            .iter()
            .map(|p| cx.g.constant(Tensor::from_f64_slice(&[1, p.len()], p).unwrap()))
            .collect();
        (alpha, head.mix(&mut cx, alpha, &ps).unwrap())
    };
    (g.value(alpha).data().to_vec(), g.value(mixed).data().to_vec())
}

#[test]
fn matt_of_one_modality_returns_its_input() {
    let p = vec![0.1, 0.6, 0.3];
    let (alpha, out) = matt_output(1, &[p.clone()], 30);
    assert_eq!(alpha, vec![1.0]);
    assert_eq!(out, p);
}

#[test]
fn matt_of_identical_inputs_is_a_fixed_point() {
    let p = vec![0.25, 0.05, 0.7];
    let (alpha, out) = matt_output(3, &[p.clone(), p.clone(), p.clone()], 31);
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(max_abs_diff(&out, &p) < 1e-15);
}
