//! Finite-difference checks of every differentiable op and of the composite
//! losses on small fixed instances.

use pdaanet_core::apc::{consistency_loss, domain_loss, ApcParams, DomainBatch, EmaStore, LossWeights};
use pdaanet_core::detector::{detection_forward_loss, rpn_forward, DetectorConfig, DetectorParams, GroundTruth, ProposalSet};
use pdaanet_core::gradcheck::grad_check;
use pdaanet_core::pam::{pam_forward, AttentionKind, PamConfig, PamParams, RegionFeatures};
use pdaanet_core::params::{ParamId, ParamStore};
use pdaanet_core::synth::BBox;
use pdaanet_core::{Tape, Tensor, TensorError, Var, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Contracts `v` to a scalar through fixed random weights.
fn readout(tp: &mut Tape, v: Var, seed: u64) -> Result<Var, TensorError> {
    let w = random(tp.shape(v), -1.0, 1.0, 1000 + seed);
    let wv = tp.constant(w);
    let p = tp.mul(v, wv)?;
    tp.sum(p)
}

struct Suite {
    results: Vec<CaseResult>,
}

impl Suite {
    fn check(&mut self, name: &str, x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var, TensorError>) {
        let (max_rel_err, pass) = match grad_check(f, x, STEP, TOLERANCE) {
            Ok(r) => (r.max_rel_err, r.pass),
            Err(_) => (f64::NAN, false),
        };
        self.results.push(CaseResult {
            name: name.to_string(),
            max_rel_err,
            pass,
        });
    }
}

fn elementwise(s: &mut Suite) {
    let x = random(&[2, 3, 4], -1.0, 1.0, 1);
    let pos = random(&[2, 3, 4], 0.5, 2.0, 2);
    let other = random(&[2, 3, 4], -1.0, 1.0, 3);
    let bcast = random(&[1, 3, 1], -1.0, 1.0, 4);
    s.check("add", &x, |tp, v| { let o = tp.constant(other.clone()); let y = tp.add(v, o)?; readout(tp, y, 1) });
    s.check("sub (broadcast)", &x, |tp, v| { let o = tp.constant(bcast.clone()); let y = tp.sub(o, v)?; readout(tp, y, 1) });
    s.check("mul (broadcast)", &bcast, |tp, v| { let o = tp.constant(x.clone()); let y = tp.mul(o, v)?; readout(tp, y, 1) });
    s.check("scale", &x, |tp, v| { let y = tp.scale(v, -2.5)?; readout(tp, y, 2) });
    s.check("add_scalar", &x, |tp, v| { let y = tp.add_scalar(v, 0.3)?; readout(tp, y, 2) });
    s.check("relu", &x, |tp, v| { let y = tp.relu(v)?; readout(tp, y, 3) });
    s.check("sigmoid", &x, |tp, v| { let y = tp.sigmoid(v)?; readout(tp, y, 4) });
    s.check("log", &pos, |tp, v| { let y = tp.log(v)?; readout(tp, y, 5) });
    s.check("log_sigmoid", &x, |tp, v| { let y = tp.log_sigmoid(v)?; readout(tp, y, 5) });
    s.check("exp", &x, |tp, v| { let y = tp.exp(v)?; readout(tp, y, 5) });
    s.check("powf", &pos, |tp, v| { let y = tp.powf(v, 0.7)?; readout(tp, y, 6) });
    s.check("clamp", &x, |tp, v| { let y = tp.clamp(v, -0.5, 0.5)?; readout(tp, y, 6) });
    s.check("softmax", &x, |tp, v| { let y = tp.softmax(v)?; readout(tp, y, 7) });
    s.check("log_softmax", &x, |tp, v| { let y = tp.log_softmax(v)?; readout(tp, y, 7) });
    s.check("smooth_l1", &x, |tp, v| { let y = tp.scale(v, 3.0)?; let y = tp.smooth_l1(y)?; readout(tp, y, 8) });
    s.check("sum", &x, |tp, v| tp.sum(v));
    s.check("mean", &x, |tp, v| tp.mean(v));
    s.check("mean_axis", &x, |tp, v| { let y = tp.mean_axis(v, 1)?; readout(tp, y, 9) });
    s.check("reshape", &x, |tp, v| { let y = tp.reshape(v, &[6, 4])?; readout(tp, y, 10) });
    s.check("broadcast_to", &random(&[2, 1, 5], -1.0, 1.0, 5), |tp, v| { let y = tp.broadcast_to(v, &[2, 3, 5])?; readout(tp, y, 11) });
    s.check("grl", &x, |tp, v| {
        // Negative coefficient: the reversed gradient equals the true one.
        let y = tp.grl(v, -1.0)?;
        readout(tp, y, 12)
    });
}

fn structural(s: &mut Suite) {
    let x = random(&[2, 5, 6], -1.0, 1.0, 11);
    let y = random(&[2, 5, 6], -1.0, 1.0, 12);
    let windows = [Window { r0: 0, r1: 5, c0: 0, c1: 6 }, Window { r0: 1, r1: 3, c0: 2, c1: 3 }];
    s.check("concat", &x, |tp, v| { let o = tp.constant(y.clone()); let c = tp.concat(&[v, o, v], 1)?; readout(tp, c, 1) });
    s.check("crop", &x, |tp, v| { let c = tp.crop(v, Window { r0: 1, r1: 4, c0: 2, c1: 6 })?; readout(tp, c, 2) });
    s.check("pad_replicate", &x, |tp, v| { let c = tp.pad_replicate(v, 2)?; readout(tp, c, 3) });
    s.check("adaptive_avg_pool2d", &x, |tp, v| { let c = tp.adaptive_avg_pool2d(v, 3, 4)?; readout(tp, c, 4) });
    s.check("upsample_to", &x, |tp, v| { let c = tp.upsample_to(v, 7, 11)?; readout(tp, c, 5) });
    s.check("cosine_similarity", &x, |tp, v| { let o = tp.constant(y.clone()); let c = tp.cosine_similarity(v, o, 0, 1e-8)?; readout(tp, c, 6) });
    s.check("roi_pool", &x, |tp, v| { let c = tp.roi_pool(v, &windows, 4)?; readout(tp, c, 7) });
    s.check("scatter_max", &random(&[2, 3, 4, 4], -1.0, 1.0, 13), |tp, v| { let c = tp.scatter_max(v, &windows, 5, 6, 0.5)?; readout(tp, c, 8) });
    let a = random(&[3, 4], -1.0, 1.0, 14);
    let b = random(&[4, 2], -1.0, 1.0, 15);
    s.check("matmul (left)", &a, |tp, v| { let o = tp.constant(b.clone()); let c = tp.matmul(v, o)?; readout(tp, c, 9) });
    s.check("matmul (right)", &b, |tp, v| { let o = tp.constant(a.clone()); let c = tp.matmul(o, v)?; readout(tp, c, 9) });

    let img = random(&[2, 5, 5], -1.0, 1.0, 16);
    let k = random(&[3, 2, 3, 3], -1.0, 1.0, 17);
    let bias = random(&[3], -1.0, 1.0, 18);
    s.check("conv2d (input)", &img, |tp, v| {
        let kv = tp.constant(k.clone());
        let bv = tp.constant(bias.clone());
        let c = tp.conv2d(v, kv, Some(bv), 2, 1)?;
        readout(tp, c, 10)
    });
    s.check("conv2d (kernel)", &k, |tp, v| {
        let xv = tp.constant(img.clone());
        let c = tp.conv2d(xv, v, None, 1, 1)?;
        readout(tp, c, 11)
    });
    s.check("conv2d (bias)", &bias, |tp, v| {
        let xv = tp.constant(img.clone());
        let kv = tp.constant(k.clone());
        let c = tp.conv2d(xv, kv, Some(v), 1, 0)?;
        readout(tp, c, 12)
    });
}

/// Detection loss along six random directions of the stride-8 feature map.
fn detection(s: &mut Suite) {
    let mut store = ParamStore::new();
    let params = DetectorParams::init(&mut store, &mut ChaCha8Rng::seed_from_u64(17));
    let base = random(&[64, 8, 8], 0.0, 1.0, 18);
    let directions = random(&[6, 64 * 8 * 8], -1.0, 1.0, 19);
    let gt_boxes = [BBox::new(10.0, 30.0, 26.0, 44.0), BBox::new(40.0, 8.0, 52.0, 26.0)];
    let gt_classes = [1usize, 0];
    let proposals = ProposalSet {
        boxes: vec![BBox::new(12.0, 28.0, 28.0, 44.0), BBox::new(0.0, 0.0, 30.0, 20.0), BBox::new(38.0, 10.0, 54.0, 24.0)],
        objectness: vec![0.9, 0.5, 0.4],
    };
    let cfg = DetectorConfig::default();
    let coeffs = Tensor::new(&[1, 6], vec![0.01, -0.02, 0.015, 0.0, 0.005, -0.01]).expect("shape matches data");
    s.check("L_det", &coeffs, |tape, x| {
        let p = store.bind_frozen(tape);
        let b = tape.constant(base.clone());
        let d = tape.constant(directions.clone());
        let offset = tape.matmul(x, d)?;
        let offset = tape.reshape(offset, &[64, 8, 8])?;
        let f3 = tape.add(b, offset)?;
        let rpn = rpn_forward(tape, &p, &params, f3)?;
        let gt = GroundTruth {
            boxes: &gt_boxes,
            classes: &gt_classes,
        };
        let (_, loss) = detection_forward_loss(tape, &p, &params, f3, &rpn, &proposals, Some(gt), &cfg)?;
        Ok(loss.total)
    });
}

struct DomainToy {
    store: ParamStore,
    apc: [ApcParams; 2],
    features: [Tensor; 4],
    ema: EmaStore,
}

impl DomainToy {
    fn new() -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let apc = [
            ApcParams::init(&mut store, "apc.0", 2, &mut rng),
            ApcParams::init(&mut store, "apc.1", 3, &mut rng),
        ];
        let features = [
            random(&[2, 6, 6], -1.0, 1.0, 31),
            random(&[3, 3, 3], -1.0, 1.0, 32),
            random(&[2, 6, 6], -1.0, 2.0, 33),
            random(&[3, 3, 3], -1.0, 2.0, 34),
        ];
        let mut toy = DomainToy {
            store,
            apc,
            features,
            ema: EmaStore::new(),
        };
        // A first pass seeds the teachers away from the current predictions.
        let mut tape = Tape::new();
        let shifted = toy.features.clone().map(|f| f.map(|v| 1.5 - 2.0 * v));
        let w = LossWeights::default();
        let (_, probs) = toy.losses(&mut tape, &toy.store.clone(), &shifted, None, &w).expect("toy forward");
        consistency_loss(&mut tape, &probs, &mut toy.ema, w.ema_decay).expect("seeding the teachers");
        toy
    }

    /// Domain loss and predictions; `probe` routes one parameter or the first
    /// feature map to `x`.
    #[allow(clippy::type_complexity)]
    fn losses(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &[Tensor; 4],
        probe: Option<(Probe, Var)>,
        w: &LossWeights,
    ) -> Result<(Var, Vec<(pdaanet_core::apc::PredictionKey, Var)>), TensorError> {
        let mut b = store.bind_frozen(tape);
        let mut f: Vec<Var> = features.iter().map(|t| tape.constant(t.clone())).collect();
        match probe {
            Some((Probe::Param(id), x)) => b.set(id, x),
            Some((Probe::Features, x)) => f[0] = x,
            None => {}
        }
        let batch = DomainBatch {
            f_att_s: Some([f[0], f[1]]),
            f_att_t: Some([f[2], f[3]]),
        };
        let out = domain_loss(tape, &b, &self.apc, &batch, w)?;
        Ok((out.l_dom, out.probs))
    }
}

#[derive(Clone, Copy)]
enum Probe {
    Param(ParamId),
    Features,
}

fn domain(s: &mut Suite) {
    let toy = DomainToy::new();
    let w = LossWeights::default();
    // Negative reversal coefficient so the feature gradient is the plain one.
    let plain = LossWeights { lambda2: -1.0, ..w };
    let params: Vec<(&str, ParamId)> = vec![
        ("level 0 weight", toy.apc[0].linear.weight),
        ("level 0 bias", toy.apc[0].linear.bias),
        ("level 1 weight", toy.apc[1].linear.weight),
        ("level 1 bias", toy.apc[1].linear.bias),
    ];
    for &(what, id) in &params {
        s.check(&format!("L_dom ({what})"), toy.store.get(id), |tape, x| {
            Ok(toy.losses(tape, &toy.store, &toy.features, Some((Probe::Param(id), x)), &w)?.0)
        });
        s.check(&format!("L_cr ({what})"), toy.store.get(id), |tape, x| {
            let (_, probs) = toy.losses(tape, &toy.store, &toy.features, Some((Probe::Param(id), x)), &w)?;
            consistency_loss(tape, &probs, &mut toy.ema.clone(), w.ema_decay)
        });
    }
    s.check("L_dom (features)", &toy.features[0], |tape, x| {
        Ok(toy.losses(tape, &toy.store, &toy.features, Some((Probe::Features, x)), &plain)?.0)
    });
    s.check("L_cr (features)", &toy.features[0], |tape, x| {
        let (_, probs) = toy.losses(tape, &toy.store, &toy.features, Some((Probe::Features, x)), &plain)?;
        consistency_loss(tape, &probs, &mut toy.ema.clone(), w.ema_decay)
    });
}

fn attention(s: &mut Suite) {
    const C: usize = 4;
    let mut store = ParamStore::new();
    let p = PamParams::init(&mut store, "pam", C, 3, &mut ChaCha8Rng::seed_from_u64(23));
    let mix = random(&[C, 6, 6], -1.0, 1.0, 20);
    let feats = random(&[2, C, 4, 4], -1.0, 1.0, 21);
    let windows = vec![Window { r0: 0, r1: 4, c0: 0, c1: 3 }, Window { r0: 2, r1: 6, c0: 1, c1: 6 }];
    for (kind, label) in [(AttentionKind::Pairwise, "PAM"), (AttentionKind::SimamEca, "SimAM+ECA")] {
        let cfg = PamConfig {
            alpha: 0.4,
            kind,
            ..PamConfig::default()
        };
        let run = |tape: &mut Tape, mix_v: Var, feat_v: Var, b: &pdaanet_core::params::Binding| -> Result<Var, TensorError> {
            let regions = RegionFeatures {
                features: Some(feat_v),
                windows: windows.clone(),
            };
            let out = pam_forward(tape, b, &p, &cfg, mix_v, &regions)?;
            readout(tape, out.f_att, 20)
        };
        s.check(&format!("{label} (mixed map)"), &mix, |tape, x| {
            let b = store.bind_frozen(tape);
            let f = tape.constant(feats.clone());
            run(tape, x, f, &b)
        });
        s.check(&format!("{label} (proposal features)"), &feats, |tape, x| {
            let b = store.bind_frozen(tape);
            let m = tape.constant(mix.clone());
            run(tape, m, x, &b)
        });
        let ids: Vec<ParamId> = match kind {
            AttentionKind::Pairwise => vec![p.rsa_conv, p.ecap_conv1d, p.ecap_pointwise.weight, p.ecap_pointwise.bias],
            AttentionKind::SimamEca => vec![p.ecap_conv1d],
        };
        for id in ids {
            s.check(&format!("{label} ({})", store.name(id)), store.get(id), |tape, x| {
                let mut b = store.bind_frozen(tape);
                b.set(id, x);
                let m = tape.constant(mix.clone());
                let f = tape.constant(feats.clone());
                run(tape, m, f, &b)
            });
        }
    }
}

/// Runs every case; each result records its worst relative error.
pub fn run_suite() -> Vec<CaseResult> {
    let mut s = Suite { results: Vec::new() };
    elementwise(&mut s);
    structural(&mut s);
    detection(&mut s);
    domain(&mut s);
    attention(&mut s);
    s.results
}
