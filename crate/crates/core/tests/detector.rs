use pdaanet_core::detector::{
    anchor, backbone_forward, decode, detection_forward_loss, head_forward, nms, roi_pool, rpn_forward, select_proposals,
    DetectorConfig, DetectorParams, GroundTruth, ProposalSet, F3_STRIDE, GRID, HEAD_DELTA_SCALE, NUM_LOGITS,
};
use pdaanet_core::gradcheck::grad_check;
use pdaanet_core::params::ParamStore;
use pdaanet_core::synth::{BBox, IMAGE_SIZE};
use pdaanet_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> (ParamStore, DetectorParams) {
    let mut store = ParamStore::new();
    let params = DetectorParams::init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (store, params)
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn pyramid(store: &ParamStore, params: &DetectorParams, image: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(image.clone());
    let pyr = backbone_forward(&mut tape, &p, params, x).unwrap();
    (tape.value(pyr.f2).clone(), tape.value(pyr.f3).clone())
}

#[test]
fn backbone_shapes_and_determinism() {
    let (store, params) = model(3);
    let image = random_tensor(&[3, 64, 64], 0.0, 1.0, 9);
    let (f2, f3) = pyramid(&store, &params, &image);
    assert_eq!(f2.shape(), &[32, 16, 16]);
    assert_eq!(f3.shape(), &[64, 8, 8]);
    let (g2, g3) = pyramid(&store, &params, &image);
    assert_eq!(f2, g2);
    assert_eq!(f3, g3);

    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let bad = tape.constant(Tensor::zeros(&[3, 32, 32]));
    assert!(backbone_forward(&mut tape, &p, &params, bad).is_err());
}

#[test]
fn zero_image_with_zero_biases_gives_zero_pyramid() {
    let (store, params) = model(4);
    let (f2, f3) = pyramid(&store, &params, &Tensor::zeros(&[3, 64, 64]));
    assert!(f2.data().iter().all(|&v| v == 0.0));
    assert!(f3.data().iter().all(|&v| v == 0.0));
}

#[test]
fn equal_objectness_keeps_the_first_cell() {
    let n = GRID * GRID;
    let p = select_proposals(&vec![0.0; n], &vec![0.0; 4 * n], 1, 0.5);
    assert_eq!(p.len(), 1);
    assert_eq!(p.boxes[0], anchor(0).clip(IMAGE_SIZE as f64));
}

#[test]
fn zero_deltas_propose_the_anchors() {
    let n = GRID * GRID;
    let p = select_proposals(&vec![0.0; n], &vec![0.0; 4 * n], n, 1.0);
    assert_eq!(p.len(), n);
    for (i, b) in p.boxes.iter().enumerate() {
        assert_eq!(*b, anchor(i).clip(IMAGE_SIZE as f64));
        assert_eq!(decode(&anchor(i), [0.0; 4]), anchor(i));
    }
}

#[test]
fn nms_examples() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    assert_eq!(nms(&[a, a], &[0.8, 0.9], 0.5), vec![1]);
    assert_eq!(nms(&[a, a, a], &[0.5, 0.5, 0.5], 0.5), vec![0]);
    let b = BBox::new(20.0, 20.0, 30.0, 30.0);
    assert_eq!(nms(&[a, b], &[0.1, 0.2], 0.5), vec![1, 0]);
}

/// The greedy result is the unique subset that is pairwise below the threshold
/// and suppresses every excluded box by an earlier member.
fn nms_oracle(boxes: &[BBox], scores: &[f64], t: f64) -> Vec<usize> {
    let n = boxes.len();
    let before = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut found = None;
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let independent = (0..n).all(|i| (0..n).all(|j| i == j || !inside(i) || !inside(j) || boxes[i].iou(&boxes[j]) <= t));
        let covered = (0..n).all(|i| inside(i) || (0..n).any(|j| inside(j) && before(j, i) && boxes[i].iou(&boxes[j]) > t));
        if independent && covered {
            assert!(found.is_none(), "oracle subset must be unique");
            found = Some(mask);
        }
    }
    let mask = found.unwrap();
    let mut kept: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
    kept.sort_by(|&a, &b| if before(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    kept
}

#[test]
fn nms_matches_brute_force_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let n = rng.random_range(0..=6);
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                let x = rng.random_range(0..8) as f64;
                let y = rng.random_range(0..8) as f64;
                BBox::new(x, y, x + rng.random_range(1..6) as f64, y + rng.random_range(1..6) as f64)
            })
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 / 4.0).collect();
        let t = [0.1, 0.3, 0.5, 0.7][case % 4];
        let kept = nms(&boxes, &scores, t);
        assert_eq!(kept, nms_oracle(&boxes, &scores, t), "case {case}");
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                assert!(boxes[i].iou(&boxes[j]) <= t);
            }
        }
    }
}

#[test]
fn roi_pool_examples() {
    let f3 = random_tensor(&[64, 8, 8], -1.0, 1.0, 5);
    let mut tape = Tape::new();
    let f = tape.constant(f3.clone());

    let full = roi_pool(&mut tape, f, &[BBox::new(0.0, 0.0, 64.0, 64.0)], F3_STRIDE).unwrap();
    let whole = tape.adaptive_avg_pool2d(f, 4, 4).unwrap();
    assert_eq!(tape.value(full).data(), tape.value(whole).data());

    let one = roi_pool(&mut tape, f, &[BBox::new(17.0, 9.0, 23.0, 15.0)], F3_STRIDE).unwrap();
    assert_eq!(tape.shape(one), &[1, 64, 4, 4]);
    let out = tape.value(one).data();
    for c in 0..64 {
        let cell = f3.data()[c * 64 + 8 + 2];
        assert!(out[c * 16..(c + 1) * 16].iter().all(|&v| v == cell));
    }

    let constant = tape.constant(Tensor::full(&[64, 8, 8], 0.25));
    let pooled = roi_pool(&mut tape, constant, &[BBox::new(3.0, 5.0, 40.0, 22.0)], F3_STRIDE).unwrap();
    assert!(tape.value(pooled).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

fn ln_sigmoid(x: f64) -> f64 {
    -(1.0 + (-x).exp()).ln()
}

fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn encode(r: &BBox, g: &BBox) -> [f64; 4] {
    let (rx, ry) = r.center();
    let (gx, gy) = g.center();
    [
        (gx - rx) / r.width(),
        (gy - ry) / r.height(),
        (g.width() / r.width()).ln(),
        (g.height() / r.height()).ln(),
    ]
}

#[test]
fn detection_loss_matches_term_by_term_expansion() {
    let (store, params) = model(11);
    let cfg = DetectorConfig::default();
    let gt_boxes = [BBox::new(13.0, 11.0, 27.0, 29.0)];
    let gt_classes = [2usize];
    let proposals = ProposalSet {
        boxes: vec![BBox::new(14.0, 12.0, 28.0, 28.0), BBox::new(40.0, 40.0, 56.0, 60.0)],
        objectness: vec![0.9, 0.8],
    };
    let f3_value = random_tensor(&[64, 8, 8], 0.0, 1.0, 12);

    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let f3 = tape.constant(f3_value);
    let rpn = rpn_forward(&mut tape, &p, &params, f3).unwrap();
    let gt = GroundTruth {
        boxes: &gt_boxes,
        classes: &gt_classes,
    };
    let (_, loss) = detection_forward_loss(&mut tape, &p, &params, f3, &rpn, &proposals, Some(gt), &cfg).unwrap();

    let logits = tape.value(rpn.logits).data().to_vec();
    let deltas = tape.value(rpn.deltas).data().to_vec();
    let n = GRID * GRID;
    let ious: Vec<f64> = (0..n).map(|i| anchor(i).iou(&gt_boxes[0])).collect();
    let best = (0..n).max_by(|&a, &b| ious[a].total_cmp(&ious[b]).then(b.cmp(&a))).unwrap();
    let label = |i: usize| {
        if ious[i] >= 0.5 || i == best {
            Some(true)
        } else if ious[i] < 0.3 {
            Some(false)
        } else {
            None
        }
    };
    let labeled = (0..n).filter(|&i| label(i).is_some()).count() as f64;
    let positives: Vec<usize> = (0..n).filter(|&i| label(i) == Some(true)).collect();
    let rpn_cls: f64 = (0..n)
        .map(|i| match label(i) {
            Some(true) => -ln_sigmoid(logits[i]),
            Some(false) => -ln_sigmoid(-logits[i]),
            None => 0.0,
        })
        .sum::<f64>()
        / labeled;
    let rpn_reg: f64 = positives
        .iter()
        .map(|&i| {
            let t = encode(&anchor(i), &gt_boxes[0]);
            (0..4).map(|c| smooth_l1(deltas[c * n + i] - t[c])).sum::<f64>()
        })
        .sum::<f64>()
        / (4.0 * positives.len() as f64);

    let mut samples = proposals.boxes.clone();
    samples.push(gt_boxes[0]);
    let mut t2 = Tape::new();
    let p2 = store.bind_frozen(&mut t2);
    let f = t2.constant(tape.value(f3).clone());
    let feats = roi_pool(&mut t2, f, &samples, F3_STRIDE).unwrap();
    let (hl, hd) = head_forward(&mut t2, &p2, &params, feats).unwrap();
    let (hl, hd) = (t2.value(hl).data(), t2.value(hd).data());
    let k = samples.len();
    let mut head_cls = 0.0;
    let mut head_reg = 0.0;
    let mut n_pos = 0;
    for (i, s) in samples.iter().enumerate() {
        let row = &hl[i * NUM_LOGITS..(i + 1) * NUM_LOGITS];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        let positive = s.iou(&gt_boxes[0]) >= 0.5;
        let target = if positive { gt_classes[0] + 1 } else { 0 };
        head_cls += (lse - row[target]) / k as f64;
        if positive {
            n_pos += 1;
            let t = encode(s, &gt_boxes[0]);
            head_reg += (0..4).map(|c| smooth_l1(hd[i * 4 + c] - t[c] * HEAD_DELTA_SCALE[c])).sum::<f64>();
        }
    }
    assert_eq!(n_pos, 2);
    head_reg /= 4.0 * n_pos as f64;

    let v = |x: Var| tape.value(x).item().unwrap();
    assert!((v(loss.rpn_cls) - rpn_cls).abs() < 1e-12);
    assert!((v(loss.rpn_reg) - rpn_reg).abs() < 1e-12);
    assert!((v(loss.head_cls) - head_cls).abs() < 1e-12);
    assert!((v(loss.head_reg) - head_reg).abs() < 1e-12);
    assert!((v(loss.total) - (rpn_cls + rpn_reg + head_cls + head_reg)).abs() < 1e-12);
}

fn head_losses_with_class_bias(store: &mut ParamStore, params: &DetectorParams, bias: f64) -> (f64, f64) {
    let gt_boxes = [BBox::new(16.0, 16.0, 32.0, 32.0)];
    let gt_classes = [0usize];
    store.get_mut(params.cls.bias).data_mut()[1] = bias;
    let proposals = ProposalSet {
        boxes: vec![gt_boxes[0]],
        objectness: vec![0.9],
    };
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let f3 = tape.constant(random_tensor(&[64, 8, 8], 0.0, 1.0, 21));
    let rpn = rpn_forward(&mut tape, &p, params, f3).unwrap();
    let gt = GroundTruth {
        boxes: &gt_boxes,
        classes: &gt_classes,
    };
    let cfg = DetectorConfig::default();
    let (_, loss) = detection_forward_loss(&mut tape, &p, params, f3, &rpn, &proposals, Some(gt), &cfg).unwrap();
    (tape.value(loss.head_cls).item().unwrap(), tape.value(loss.total).item().unwrap())
}

#[test]
fn head_loss_falls_as_the_true_logit_grows() {
    let (mut store, params) = model(13);
    let mut prev = f64::INFINITY;
    for bias in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let (cls, _) = head_losses_with_class_bias(&mut store, &params, bias);
        assert!(cls < prev, "bias {bias}: {cls} !< {prev}");
        prev = cls;
    }
    assert!(prev < 1e-10);
}

#[test]
fn no_positives_means_zero_regression() {
    let (store, params) = model(14);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let f3 = tape.constant(random_tensor(&[64, 8, 8], 0.0, 1.0, 15));
    let rpn = rpn_forward(&mut tape, &p, &params, f3).unwrap();
    let proposals = ProposalSet {
        boxes: vec![BBox::new(0.0, 0.0, 20.0, 20.0)],
        objectness: vec![0.7],
    };
    let gt = GroundTruth { boxes: &[], classes: &[] };
    let cfg = DetectorConfig::default();
    let (_, loss) = detection_forward_loss(&mut tape, &p, &params, f3, &rpn, &proposals, Some(gt), &cfg).unwrap();
    assert_eq!(tape.value(loss.rpn_reg).item(), Some(0.0));
    assert_eq!(tape.value(loss.head_reg).item(), Some(0.0));
    assert!(tape.value(loss.rpn_cls).item().unwrap() > 0.0);
}

#[test]
fn unlabeled_scene_is_a_contract_error() {
    let (store, params) = model(16);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let f3 = tape.constant(Tensor::zeros(&[64, 8, 8]));
    let rpn = rpn_forward(&mut tape, &p, &params, f3).unwrap();
    let proposals = ProposalSet {
        boxes: vec![],
        objectness: vec![],
    };
    let r = detection_forward_loss(&mut tape, &p, &params, f3, &rpn, &proposals, None, &DetectorConfig::default());
    assert!(matches!(r, Err(pdaanet_core::TensorError::Contract(_))));
}

#[test]
fn detection_loss_gradient_matches_finite_differences() {
    let (store, params) = model(17);
    let base = random_tensor(&[64, 8, 8], 0.0, 1.0, 18);
    let directions = random_tensor(&[6, 64 * 8 * 8], -1.0, 1.0, 19);
    let gt_boxes = [BBox::new(10.0, 30.0, 26.0, 44.0), BBox::new(40.0, 8.0, 52.0, 26.0)];
    let gt_classes = [1usize, 0];
    let proposals = ProposalSet {
        boxes: vec![BBox::new(12.0, 28.0, 28.0, 44.0), BBox::new(0.0, 0.0, 30.0, 20.0), BBox::new(38.0, 10.0, 54.0, 24.0)],
        objectness: vec![0.9, 0.5, 0.4],
    };
    let cfg = DetectorConfig::default();
    let coeffs = Tensor::new(&[1, 6], vec![0.01, -0.02, 0.015, 0.0, 0.005, -0.01]).unwrap();
    let report = grad_check(
        |tape, x| {
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
        },
        &coeffs,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}
