use pdaanet_core::gradcheck::grad_check;
use pdaanet_core::pam::{
    ecap_branch, fuse_attention, pam_forward, rsa_branch, rsa_weights, scatter_proposal_weights, simam_weights, AttentionKind,
    PamConfig, PamParams, RegionFeatures, BACKGROUND_WEIGHT,
};
use pdaanet_core::params::{ParamId, ParamStore};
use pdaanet_core::{Tape, Tensor, TensorError, Var, Window};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C: usize = 4;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn params(seed: u64) -> (ParamStore, PamParams) {
    let mut store = ParamStore::new();
    let p = PamParams::init(&mut store, "pam", C, 3, &mut ChaCha8Rng::seed_from_u64(seed));
    (store, p)
}

fn win(r0: usize, r1: usize, c0: usize, c1: usize) -> Window {
    Window { r0, r1, c0, c1 }
}

fn weights_of(store: &ParamStore, p: &PamParams, features: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let b = store.bind_frozen(&mut tape);
    let x = tape.constant(features.clone());
    let w = rsa_weights(&mut tape, &b, p, Some(x)).unwrap().unwrap();
    tape.value(w).clone()
}

#[test]
fn constant_positive_features_give_sigmoid_two() {
    let (mut store, p) = params(1);
    let w = store.get_mut(p.rsa_conv);
    *w = w.map(f64::abs);
    let out = weights_of(&store, &p, &Tensor::full(&[2, C, 4, 4], 0.7));
    let expected = 1.0 / (1.0 + (-2.0f64).exp());
    assert_eq!(out.shape(), &[2, C, 4, 4]);
    for &v in out.data() {
        assert!((v - expected).abs() < 1e-12);
    }
}

#[test]
fn no_proposals_means_no_weights() {
    let (store, p) = params(2);
    let mut tape = Tape::new();
    let b = store.bind_frozen(&mut tape);
    assert!(rsa_weights(&mut tape, &b, &p, None).unwrap().is_none());
    assert!(simam_weights(&mut tape, None, 1e-4).unwrap().is_none());
    let map = scatter_proposal_weights(&mut tape, None, &[], [C, 8, 8]).unwrap();
    assert!(tape.value(map).data().iter().all(|&v| v == BACKGROUND_WEIGHT));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rsa_weights_are_scale_invariant(seed in 0u64..1000, scale in 1e-3f64..1e3) {
        let (store, p) = params(seed);
        let x = random(&[2, C, 4, 4], -1.0, 1.0, seed + 1);
        let a = weights_of(&store, &p, &x);
        let b = weights_of(&store, &p, &x.map(|v| v * scale));
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
        prop_assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fusion_is_linear_in_alpha(a1 in 0.0f64..1.0, a2 in 0.0f64..1.0, seed in 0u64..100) {
        let mut tape = Tape::new();
        let r = tape.constant(random(&[C, 3, 3], -2.0, 2.0, seed));
        let e = tape.constant(random(&[C, 3, 3], -2.0, 2.0, seed + 7));
        let f1 = fuse_attention(&mut tape, r, e, a1).unwrap();
        let f2 = fuse_attention(&mut tape, r, e, a2).unwrap();
        let fm = fuse_attention(&mut tape, r, e, (a1 + a2) / 2.0).unwrap();
        for i in 0..C * 9 {
            let lhs = tape.value(f1).data()[i] + tape.value(f2).data()[i];
            let rhs = 2.0 * tape.value(fm).data()[i];
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}

#[test]
fn scatter_examples() {
    let mut tape = Tape::new();
    let full = tape.constant(Tensor::full(&[1, C, 4, 4], 0.3));
    let map = scatter_proposal_weights(&mut tape, Some(full), &[win(0, 8, 0, 8)], [C, 8, 8]).unwrap();
    assert!(tape.value(map).data().iter().all(|&v| v == 0.3));

    let mut two = vec![0.6; C * 16];
    two.extend(vec![0.9; C * 16]);
    let pair = tape.constant(Tensor::new(&[2, C, 4, 4], two).unwrap());
    let map = scatter_proposal_weights(&mut tape, Some(pair), &[win(0, 4, 0, 4), win(2, 6, 2, 6)], [C, 8, 8]).unwrap();
    let m = tape.value(map).data();
    for ch in 0..C {
        for r in 0..8 {
            for c in 0..8 {
                let in_a = r < 4 && c < 4;
                let in_b = (2..6).contains(&r) && (2..6).contains(&c);
                let want = if in_b {
                    0.9
                } else if in_a {
                    0.6
                } else {
                    BACKGROUND_WEIGHT
                };
                assert_eq!(m[(ch * 8 + r) * 8 + c], want);
            }
        }
    }
}

#[test]
fn rsa_branch_equals_hand_composition() {
    let (store, p) = params(3);
    let mix_v = random(&[C, 8, 8], -1.0, 1.0, 4);
    let feat_v = random(&[1, C, 4, 4], -1.0, 1.0, 5);
    let window = win(1, 7, 2, 5);
    let w = weights_of(&store, &p, &feat_v);

    let mut tape = Tape::new();
    let b = store.bind_frozen(&mut tape);
    let mix = tape.constant(mix_v.clone());
    let regions = RegionFeatures {
        features: Some(tape.constant(feat_v)),
        windows: vec![window],
    };
    let out = rsa_branch(&mut tape, &b, &p, mix, &regions).unwrap();
    let out = tape.value(out).data();
    for ch in 0..C {
        for r in 0..8 {
            for c in 0..8 {
                let weight = if (1..7).contains(&r) && (2..5).contains(&c) {
                    let pr = (r - 1) * 4 / 6;
                    let pc = (c - 2) * 4 / 3;
                    w.data()[(ch * 4 + pr) * 4 + pc]
                } else {
                    BACKGROUND_WEIGHT
                };
                let m = mix_v.data()[(ch * 8 + r) * 8 + c];
                assert!((out[(ch * 8 + r) * 8 + c] - (m + weight * m)).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn ecap_with_zero_parameters_quarters_the_combined_map() {
    let (mut store, p) = params(6);
    for id in [p.ecap_conv1d, p.ecap_pointwise.weight, p.ecap_pointwise.bias] {
        let t = store.get_mut(id);
        *t = Tensor::zeros(t.shape());
    }
    let mix_v = random(&[C, 8, 8], -1.0, 1.0, 7);
    let feat_v = random(&[1, C, 4, 4], 0.0, 1.0, 8);
    let mut tape = Tape::new();
    let b = store.bind_frozen(&mut tape);
    let mix = tape.constant(mix_v.clone());
    let regions = RegionFeatures {
        features: Some(tape.constant(feat_v.clone())),
        windows: vec![win(0, 4, 4, 8)],
    };
    let out = ecap_branch(&mut tape, &b, &p, mix, &regions, true).unwrap();
    let out = tape.value(out).data();
    for ch in 0..C {
        for r in 0..8 {
            for c in 0..8 {
                let mut combined = mix_v.data()[(ch * 8 + r) * 8 + c];
                if r < 4 && c >= 4 {
                    combined += feat_v.data()[(ch * 4 + r) * 4 + (c - 4)];
                }
                assert!((out[(ch * 8 + r) * 8 + c] - 0.25 * combined).abs() < 1e-15);
            }
        }
    }

    let empty = RegionFeatures::empty();
    let out = ecap_branch(&mut tape, &b, &p, mix, &empty, true).unwrap();
    assert_eq!(tape.shape(out), &[C, 8, 8]);
    for (o, m) in tape.value(out).data().iter().zip(mix_v.data()) {
        assert!((o - 0.25 * m).abs() < 1e-15);
    }
}

#[test]
fn residual_endpoints() {
    let (store, p) = params(9);
    let mix_v = random(&[C, 8, 8], -1.0, 1.0, 10);
    let mut tape = Tape::new();
    let b = store.bind_frozen(&mut tape);
    let mix = tape.constant(mix_v.clone());
    let ones = tape.constant(Tensor::ones(&[1, C, 4, 4]));
    let w = scatter_proposal_weights(&mut tape, Some(ones), &[win(0, 8, 0, 8)], [C, 8, 8]).unwrap();
    let wm = tape.mul(w, mix).unwrap();
    let doubled = tape.add(mix, wm).unwrap();
    for (d, m) in tape.value(doubled).data().iter().zip(mix_v.data()) {
        assert_eq!(*d, 2.0 * m);
    }
    // No proposals: half-weight background everywhere.
    let out = rsa_branch(&mut tape, &b, &p, mix, &RegionFeatures::empty()).unwrap();
    for (o, m) in tape.value(out).data().iter().zip(mix_v.data()) {
        assert!((o - 1.5 * m).abs() < 1e-15);
    }
}

#[test]
fn fusion_endpoints_and_midpoint() {
    let (store, p) = params(11);
    let mix_v = random(&[C, 8, 8], -1.0, 1.0, 12);
    let feat_v = random(&[2, C, 4, 4], -1.0, 1.0, 13);
    let windows = vec![win(0, 3, 0, 5), win(4, 8, 2, 8)];
    let run = |alpha: f64| {
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape);
        let mix = tape.constant(mix_v.clone());
        let regions = RegionFeatures {
            features: Some(tape.constant(feat_v.clone())),
            windows: windows.clone(),
        };
        let cfg = PamConfig {
            alpha,
            ..PamConfig::default()
        };
        let r = rsa_branch(&mut tape, &b, &p, mix, &regions).unwrap();
        let e = ecap_branch(&mut tape, &b, &p, mix, &regions, true).unwrap();
        let out = pam_forward(&mut tape, &b, &p, &cfg, mix, &regions).unwrap();
        (tape.value(out.f_att).clone(), tape.value(r).clone(), tape.value(e).clone())
    };
    let (f1, r, _) = run(1.0);
    assert_eq!(f1, r);
    let (f0, _, e) = run(0.0);
    assert_eq!(f0, e);

    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![2.0]));
    let b = tape.constant(Tensor::from_vec(vec![4.0]));
    let m = fuse_attention(&mut tape, a, b, 0.5).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0]);
    let bad = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(fuse_attention(&mut tape, a, bad, 0.5), Err(TensorError::Shape { .. })));
}

#[test]
fn simam_weights_match_closed_form() {
    let x = random(&[1, 2, 4, 4], -1.0, 1.0, 14);
    let lambda = 1e-4;
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let w = simam_weights(&mut tape, Some(v), lambda).unwrap().unwrap();
    let w = tape.value(w).data();
    for ch in 0..2 {
        let s = &x.data()[ch * 16..(ch + 1) * 16];
        let mu = s.iter().sum::<f64>() / 16.0;
        let var = s.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 15.0;
        for i in 0..16 {
            let e = (s[i] - mu).powi(2) / (4.0 * (var + lambda)) + 0.5;
            assert!((w[ch * 16 + i] - 1.0 / (1.0 + (-e).exp())).abs() < 1e-12);
        }
    }
}

fn probe() -> (Tensor, Tensor, Tensor, Vec<Window>) {
    let mix = random(&[C, 6, 6], -1.0, 1.0, 20);
    let feats = random(&[2, C, 4, 4], -1.0, 1.0, 21);
    let readout = random(&[C, 6, 6], -1.0, 1.0, 22);
    (mix, feats, readout, vec![win(0, 4, 0, 3), win(2, 6, 1, 6)])
}

enum Probe {
    Mix,
    Features,
    Param(ParamId),
}

fn functional(
    tape: &mut Tape,
    store: &ParamStore,
    p: &PamParams,
    kind: AttentionKind,
    x: Var,
    probe_at: &Probe,
) -> Result<Var, TensorError> {
    let (mix_v, feat_v, readout, windows) = probe();
    let mut b = store.bind_frozen(tape);
    let mix = match probe_at {
        Probe::Mix => x,
        _ => tape.constant(mix_v),
    };
    let feats = match probe_at {
        Probe::Features => x,
        _ => tape.constant(feat_v),
    };
    if let Probe::Param(id) = probe_at {
        b.set(*id, x);
    }
    let regions = RegionFeatures {
        features: Some(feats),
        windows,
    };
    let cfg = PamConfig {
        alpha: 0.4,
        kind,
        ..PamConfig::default()
    };
    let out = pam_forward(tape, &b, p, &cfg, mix, &regions)?;
    let r = tape.constant(readout);
    let prod = tape.mul(out.f_att, r)?;
    tape.sum(prod)
}

#[test]
fn attention_gradients_match_finite_differences() {
    let (store, p) = params(23);
    let (mix_v, feat_v, _, _) = probe();
    for kind in [AttentionKind::Pairwise, AttentionKind::SimamEca] {
        let mut probes = vec![(Probe::Mix, mix_v.clone()), (Probe::Features, feat_v.clone())];
        if kind == AttentionKind::Pairwise {
            for id in [p.rsa_conv, p.ecap_conv1d, p.ecap_pointwise.weight, p.ecap_pointwise.bias] {
                probes.push((Probe::Param(id), store.get(id).clone()));
            }
        } else {
            probes.push((Probe::Param(p.ecap_conv1d), store.get(p.ecap_conv1d).clone()));
        }
        for (at, x0) in &probes {
            let report = grad_check(|tape, x| functional(tape, &store, &p, kind, x, at), x0, 1e-5, 1e-4).unwrap();
            assert!(report.pass, "{kind:?}: {report:?}");
        }
    }
}
