//! Model assembly, the two-phase training loop, evaluation, and embeddings
//! for the feature projection.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::apc::{consistency_loss, domain_loss, total_objective, ApcParams, DomainBatch, EmaStore};
use crate::config::{ConfigError, RunConfig, Wiring};
use crate::detector::{
    backbone_forward, detect, detection_forward_loss, propose_regions, rpn_forward, DetectorConfig, DetectorParams,
    FeaturePyramid, LEVELS,
};
use crate::dommix::mix_pyramids;
use crate::metrics::{evaluate_detections, Annotations, EvalReport, MetricError};
use crate::pam::{pam_forward, PamParams, RegionFeatures};
use crate::params::{Adam, AdamConfig, Binding, ParamId, ParamStore};
use crate::synth::{Dataset, Scene};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Every trainable parameter with its layout.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub detector: DetectorParams,
    /// Attention parameters per pyramid level, finest first.
    pub pam: [PamParams; 2],
    /// Domain classifiers per pyramid level, finest first.
    pub apc: [ApcParams; 2],
}

const INIT_STREAM: u64 = 10;
const ORDER_STREAM: u64 = 11;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    /// The parameter set and its order do not depend on the variant, so every
    /// variant starts from the same weights for a given seed.
    pub fn init(seed: u64, ecap_kernel: usize) -> Self {
        let mut rng = stream_rng(seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let detector = DetectorParams::init(&mut store, &mut rng);
        let pam = [0, 1].map(|k| PamParams::init(&mut store, if k == 0 { "pam.2" } else { "pam.3" }, LEVELS[k].1, ecap_kernel, &mut rng));
        let apc = [0, 1].map(|k| ApcParams::init(&mut store, if k == 0 { "apc.2" } else { "apc.3" }, LEVELS[k].1, &mut rng));
        Model {
            store,
            detector,
            pam,
            apc,
        }
    }

    /// Rebuilds the layout around stored values (e.g. loaded from disk).
    pub fn with_values(seed: u64, ecap_kernel: usize, values: Vec<Tensor>) -> Result<Self, TensorError> {
        let mut model = Model::init(seed, ecap_kernel);
        if values.len() != model.store.len() {
            return Err(TensorError::Contract(alloc::format!(
                "expected {} parameter tensors, got {}",
                model.store.len(),
                values.len()
            )));
        }
        for (id, v) in model.store.ids().collect::<Vec<_>>().into_iter().zip(values) {
            if v.shape() != model.store.get(id).shape() {
                return Err(TensorError::shape("load", v.shape(), model.store.get(id).shape()));
            }
            *model.store.get_mut(id) = v;
        }
        Ok(model)
    }
}

/// One row of the training log. Losses not computed in a step are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub l_det: f64,
    pub l_dom: f64,
    pub l_cr: f64,
    pub total: f64,
    /// Fraction of the step's four domain predictions on the correct side of 0.5.
    pub disc_accuracy: Option<f64>,
    pub map50: Option<f64>,
    pub recall: Option<f64>,
}

/// Source index and paired target index of each adaptation pair.
fn pairing(n_source: usize, n_target: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut targets: Vec<usize> = (0..n_target).collect();
    targets.shuffle(rng);
    (0..n_source).map(|j| targets[j % n_target]).collect()
}

pub struct Trainer<'d> {
    pub cfg: RunConfig,
    pub wiring: Wiring,
    pub model: Model,
    data: &'d Dataset,
    opt: Adam,
    /// Parameters of the attention modules and domain classifiers.
    adaptation: Vec<ParamId>,
    ema: EmaStore,
    rng: ChaCha8Rng,
    pair_target: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    iteration: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &RunConfig, data: &'d Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.source.is_empty() || data.target.is_empty() {
            return Err(ConfigError::new("dataset", "training splits must not be empty").into());
        }
        let mut rng = stream_rng(cfg.seed, ORDER_STREAM);
        let pair_target = pairing(data.source.len(), data.target.len(), &mut rng);
        let model = Model::init(cfg.seed, cfg.pam.ecap_kernel);
        let adaptation = model
            .store
            .ids()
            .filter(|&id| model.store.name(id).starts_with("pam.") || model.store.name(id).starts_with("apc."))
            .collect();
        Ok(Trainer {
            wiring: cfg.wiring(),
            model,
            adaptation,
            cfg: cfg.clone(),
            data,
            opt: Adam::new(AdamConfig {
                lr: cfg.optim.lr,
                ..AdamConfig::default()
            }),
            ema: EmaStore::new(),
            rng,
            pair_target,
            order: Vec::new(),
            cursor: 0,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn next_pair(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.data.source.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// Runs one optimisation step and returns its log row (without metrics).
    pub fn step(&mut self) -> Result<MetricsRow, TrainError> {
        self.iteration += 1;
        let it = self.iteration;
        let lr = self.cfg.optim.lr_at(it);
        let pair = self.next_pair();
        let adapt = self.wiring.adapt && it > self.cfg.optim.warmup_source_only_iters;

        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape);
        let source = &self.data.source[pair];
        let src = forward_labeled(&mut tape, &p, &self.model, source, &self.cfg.detector)?;

        let mut row = MetricsRow {
            iteration: it,
            l_det: tape.value(src.l_det).data()[0],
            l_dom: 0.0,
            l_cr: 0.0,
            total: 0.0,
            disc_accuracy: None,
            map50: None,
            recall: None,
        };
        let total = if adapt {
            let target = self.data.target.get(self.pair_target[pair]);
            let x = tape.constant(target.image.clone());
            let tgt = forward_unlabeled(&mut tape, &p, &self.model, x, &self.cfg.detector)?;
            let (f_s, f_t) = attend(&mut tape, &p, &self.model, &self.wiring, &src.branch, &tgt)?;
            let batch = DomainBatch {
                f_att_s: Some(f_s),
                f_att_t: Some(f_t),
            };
            let mut dom = domain_loss(&mut tape, &p, &self.model.apc, &batch, &self.cfg.loss)?;
            for (key, _) in &mut dom.probs {
                key.pair = pair as u32;
            }
            let correct = dom
                .probs
                .iter()
                .filter(|(k, v)| (tape.value(*v).data()[0] > 0.5) == (k.branch == 1))
                .count();
            row.disc_accuracy = Some(correct as f64 / dom.probs.len() as f64);
            let l_cr = consistency_loss(&mut tape, &dom.probs, &mut self.ema, self.cfg.loss.ema_decay)?;
            row.l_dom = tape.value(dom.l_dom).data()[0];
            row.l_cr = tape.value(l_cr).data()[0];
            total_objective(&mut tape, src.l_det, Some(dom.l_dom), Some(l_cr), &self.cfg.loss)?.total
        } else {
            src.l_det
        };
        row.total = tape.value(total).data()[0];
        let grads = tape.backward(total)?;
        let adapt_lr = lr * self.cfg.optim.adapt_lr_scale;
        let adaptation = &self.adaptation;
        self.opt.step_with(&mut self.model.store, &p, &grads, |id| if adaptation.contains(&id) { adapt_lr } else { lr });
        Ok(row)
    }

    /// Runs every remaining iteration, evaluating on the target eval split
    /// every `eval_every` iterations and at the end.
    pub fn run(mut self) -> Result<TrainedRun, TrainError> {
        let mut rows = Vec::with_capacity(self.cfg.optim.iterations);
        while self.iteration < self.cfg.optim.iterations {
            let mut row = self.step()?;
            if row.iteration % self.cfg.eval_every == 0 || row.iteration == self.cfg.optim.iterations {
                let report = evaluate_run(&self.model, &self.data.eval, &self.cfg.detector)?;
                row.map50 = Some(report.map);
                row.recall = Some(report.recall);
            }
            rows.push(row);
        }
        Ok(TrainedRun {
            model: self.model,
            rows,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: Model,
    pub rows: Vec<MetricsRow>,
}

impl TrainedRun {
    /// Metrics of the last evaluation.
    pub fn final_eval(&self) -> Option<(f64, f64)> {
        self.rows.iter().rev().find_map(|r| Some((r.map50?, r.recall?)))
    }
}

pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainedRun, TrainError> {
    Trainer::new(cfg, data)?.run()
}

/// Per-image pieces a branch of the attention module needs.
struct BranchInputs {
    pyramid: FeaturePyramid,
    boxes: Vec<crate::synth::BBox>,
}

struct LabeledForward {
    l_det: Var,
    branch: BranchInputs,
}

fn forward_labeled(tape: &mut Tape, p: &Binding, model: &Model, scene: &Scene, cfg: &DetectorConfig) -> Result<LabeledForward, TensorError> {
    let x = tape.constant(scene.image.clone());
    let pyramid = backbone_forward(tape, p, &model.detector, x)?;
    let rpn = rpn_forward(tape, p, &model.detector, pyramid.f3)?;
    let proposals = propose_regions(tape, &rpn, cfg.k_max, cfg.nms_threshold);
    let (_, loss) = detection_forward_loss(tape, p, &model.detector, pyramid.f3, &rpn, &proposals, Some(scene.ground_truth()), cfg)?;
    Ok(LabeledForward {
        l_det: loss.total,
        branch: BranchInputs {
            pyramid,
            boxes: proposals.boxes,
        },
    })
}

fn forward_unlabeled(tape: &mut Tape, p: &Binding, model: &Model, x: Var, cfg: &DetectorConfig) -> Result<BranchInputs, TensorError> {
    let pyramid = backbone_forward(tape, p, &model.detector, x)?;
    let rpn = rpn_forward(tape, p, &model.detector, pyramid.f3)?;
    let proposals = propose_regions(tape, &rpn, cfg.k_max, cfg.nms_threshold);
    Ok(BranchInputs {
        pyramid,
        boxes: proposals.boxes,
    })
}

/// Mixes the paired pyramids and runs the attention module per level and branch.
fn attend(tape: &mut Tape, p: &Binding, model: &Model, wiring: &Wiring, s: &BranchInputs, t: &BranchInputs) -> Result<([Var; 2], [Var; 2]), TensorError> {
    let mixed = mix_pyramids(tape, &s.pyramid, &t.pyramid, wiring.mix)?;
    let mut f_s = [mixed.mix_s[0]; 2];
    let mut f_t = [mixed.mix_t[0]; 2];
    for (k, &(stride, _)) in LEVELS.iter().enumerate() {
        let rs = RegionFeatures::pool(tape, s.pyramid.level(k), &s.boxes, stride)?;
        f_s[k] = pam_forward(tape, p, &model.pam[k], &wiring.pam, mixed.mix_s[k], &rs)?.f_att;
        let rt = RegionFeatures::pool(tape, t.pyramid.level(k), &t.boxes, stride)?;
        f_t[k] = pam_forward(tape, p, &model.pam[k], &wiring.pam, mixed.mix_t[k], &rt)?.f_att;
    }
    Ok((f_s, f_t))
}

/// Detector-only inference on labelled target scenes, scored at IoU 0.5.
pub fn evaluate_run(model: &Model, scenes: &[Scene], cfg: &DetectorConfig) -> Result<EvalReport, TrainError> {
    let mut dets = Vec::with_capacity(scenes.len());
    let mut truth = Vec::with_capacity(scenes.len());
    for s in scenes {
        dets.push(detect(&model.store, &model.detector, &s.image, cfg)?);
        truth.push(Annotations {
            boxes: s.boxes.clone(),
            classes: s.classes.clone(),
        });
    }
    Ok(evaluate_detections(&dets, &truth, 0.5)?)
}

/// Channel means of the coarsest attended map for a source/target image
/// pair: `(source-dominant branch, target-dominant branch)`.
pub fn attended_embeddings(model: &Model, wiring: &Wiring, cfg: &DetectorConfig, source: &Tensor, target: &Tensor) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    let mut tape = Tape::new();
    let p = model.store.bind_frozen(&mut tape);
    let xs = tape.constant(source.clone());
    let s = forward_unlabeled(&mut tape, &p, model, xs, cfg)?;
    let xt = tape.constant(target.clone());
    let t = forward_unlabeled(&mut tape, &p, model, xt, cfg)?;
    let (fs, ft) = attend(&mut tape, &p, model, wiring, &s, &t)?;
    let gap = |tape: &Tape, v: Var| -> Vec<f64> {
        let val = tape.value(v);
        let hw = val.shape()[1] * val.shape()[2];
        val.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect()
    };
    Ok((gap(&tape, fs[1]), gap(&tape, ft[1])))
}
