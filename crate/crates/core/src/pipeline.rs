//! Float training, calibration-only baselines and the full quantization
//! pipeline: weight grid search, cached float outputs, then one optimization
//! unit at a time (activation grid search, T iterations over scales and
//! rounding offsets, keep-best, freeze).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::calib::{calibrate_activations, grid_search_scale, maxmin_params, CalibMethod, SearchConfig};
use crate::detector::{
    build_detector, decode_boxes, NUM_FEATURES, heads_forward, nms_bev, predict, Box3D, DetectorConfig, DetectorOutput, GridConfig,
};
use crate::eval::{evaluate, EvalReport};
use crate::nn::{adam_step, conv2d_forward, AdamState, Activation, Graph, LayerRole, LayerSpec, Network, Precision, Var};
use crate::quant::{QuantParams, RoundingOffsets, MAX_BITS};
use crate::tgpl::{local_recon_loss, make_pseudo_labels, render_targets, tgpl_loss, BatchTargets, LossWeights, PseudoLabels};
use crate::{Error, Result, Tensor};

/// Bit-width meaning "leave the layer in floating point".
pub const FLOAT_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub score_floor: f64,
    pub max_boxes: usize,
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_floor: 0.1, max_boxes: 500, nms_iou: 0.2 }
    }
}

/// One frame with its ground truth; only training and evaluation see these.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    /// `(1, C, H, W)` pillar features.
    pub input: Tensor<f32>,
    pub boxes: Vec<Box3D>,
}

/// Unlabeled calibration inputs in sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub frame_ids: Vec<usize>,
    /// Each `(1, C, H, W)`.
    pub inputs: Vec<Tensor<f32>>,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// `n` distinct indices from `0..len` in a seed-determined order.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::InsufficientData { requested: n, available: len });
    }
    let mut rng = rand::rngs::ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, len, n).into_vec())
}

pub fn sample_calibration_set(inputs: &[Tensor<f32>], n: usize, seed: u64) -> Result<CalibrationSet> {
    let ids = sample_indices(inputs.len(), n, seed)?;
    Ok(CalibrationSet { inputs: ids.iter().map(|&i| inputs[i].clone()).collect(), frame_ids: ids })
}

fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    Tensor::stack_batch(items)
}

/// Decoded, NMS'd detections for each input frame.
pub fn predict_boxes(net: &Network<f32>, inputs: &[&Tensor<f32>], grid: &GridConfig, dc: &DecodeConfig) -> Result<Vec<Vec<Box3D>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(8) {
        let o = predict(net, &stack(chunk)?)?;
        for i in 0..chunk.len() {
            out.push(nms_bev(&decode_boxes(&o.item(i), grid, dc.score_floor, dc.max_boxes), dc.nms_iou));
        }
    }
    Ok(out)
}

pub fn evaluate_network(
    net: &Network<f32>,
    frames: &[LabeledFrame],
    grid: &GridConfig,
    dc: &DecodeConfig,
    iou: f64,
    classes: usize,
) -> Result<EvalReport> {
    let inputs: Vec<&Tensor<f32>> = frames.iter().map(|f| &f.input).collect();
    let preds = predict_boxes(net, &inputs, grid, dc)?;
    let gts: Vec<Vec<Box3D>> = frames.iter().map(|f| f.boxes.clone()).collect();
    evaluate(&preds, &gts, iou, classes)
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub detector: DetectorConfig,
    /// Epoch budget.
    pub epochs: usize,
    /// Epochs always run before the floor may stop training.
    pub min_epochs: usize,
    pub lr: f64,
    /// Learning rate is multiplied by `lr_decay` after every epoch.
    pub lr_decay: f64,
    pub batch: usize,
    pub seed: u64,
    /// Validation AP the trained model has to reach.
    pub ap_floor: f64,
    pub loss: LossWeights,
    pub decode: DecodeConfig,
    pub eval_iou: f64,
    /// Per-input-channel preconditioning of the first conv during training.
    /// Powers of two, so folding it back into the stored weights is exact.
    pub input_scale: [f32; NUM_FEATURES],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            detector: DetectorConfig::default(),
            epochs: 8,
            min_epochs: 4,
            lr: 2e-3,
            lr_decay: 0.8,
            batch: 8,
            seed: 7,
            ap_floor: 0.6,
            loss: LossWeights::default(),
            decode: DecodeConfig::default(),
            eval_iou: 0.3,
            input_scale: [0.25, 0.25, 1.0, 1.0, 1.0, 0.125],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_ap: Vec<f64>,
    pub final_ap: f64,
}

struct DetectorVars {
    heatmap: Var,
    regression: Var,
    params: Vec<(Var, Var)>,
}

/// Records the whole float detector on `g`; parameters are trainable leaves
/// when `trainable`.
fn record_detector(g: &mut Graph<f32>, net: &Network<f32>, x: Var, trainable: bool) -> Result<DetectorVars> {
    let mut params = Vec::new();
    let leaf = |g: &mut Graph<f32>, t: &Tensor<f32>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
    let mut cur = x;
    let mut backbone_out = None;
    let (mut hm, mut reg) = (None, None);
    for l in &net.layers {
        let w = leaf(g, &l.weight);
        let b = leaf(g, &l.bias);
        params.push((w, b));
        let input = if l.role == LayerRole::Backbone { cur } else { *backbone_out.get_or_insert(cur) };
        let mut y = g.conv2d(input, w, b, l.stride, l.padding)?;
        if l.activation == Activation::Relu {
            y = g.relu(y);
        }
        match l.role {
            LayerRole::Backbone => cur = y,
            LayerRole::HeatmapHead => hm = Some(g.sigmoid(y)),
            LayerRole::RegressionHead => reg = Some(y),
        }
    }
    Ok(DetectorVars {
        heatmap: hm.ok_or_else(|| Error::UnknownLayer("heatmap head".into()))?,
        regression: reg.ok_or_else(|| Error::UnknownLayer("regression head".into()))?,
        params,
    })
}

/// Plain supervised passes over `frames` with ground-truth targets; returns
/// the loss of every step. Used by [`train_fp_baseline`].
pub fn fit(
    net: &mut Network<f32>,
    frames: &[LabeledFrame],
    targets: &[PseudoLabels],
    cfg: &TrainConfig,
    epochs: usize,
    states: &mut Vec<(AdamState, AdamState)>,
    rng: &mut rand::rngs::ChaCha8Rng,
    lr: f64,
) -> Result<Vec<f64>> {
    if frames.len() != targets.len() {
        return Err(Error::LengthMismatch { left: frames.len(), right: targets.len() });
    }
    if states.len() != net.layers.len() {
        *states = net.layers.iter().map(|l| (AdamState::new(l.weight.numel()), AdamState::new(l.bias.numel()))).collect();
    }
    let first = *backbone_positions(net).first().ok_or_else(|| Error::UnknownLayer("backbone".into()))?;
    let k = &cfg.input_scale;
    if net.layers[first].weight.shape()[1] != k.len() {
        return Err(Error::LengthMismatch { left: net.layers[first].weight.shape()[1], right: k.len() });
    }
    let kk = net.layers[first].weight.shape()[2] * net.layers[first].weight.shape()[3];
    // w = v * k on the input-channel axis; training sees v and x / k
    let rescale = |w: &mut Tensor<f32>, up: bool| {
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            let c = (i / kk) % k.len();
            *v = if up { *v * k[c] } else { *v / k[c] };
        }
    };
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..frames.len()).collect();
    rescale(&mut net.layers[first].weight, false);
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut x = stack(&chunk.iter().map(|&i| &frames[i].input).collect::<Vec<_>>())?;
            let plane = x.shape()[2] * x.shape()[3];
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                *v *= k[(i / plane) % k.len()];
            }
            let t: BatchTargets<f32> = PseudoLabels::stack(&chunk.iter().map(|&i| &targets[i]).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let d = record_detector(&mut g, net, xv, true)?;
            let cls = g.focal(d.heatmap, t.heatmap)?;
            let reg = g.l1_masked(d.regression, t.reg, t.mask)?;
            let loss = g.linear(&[(cls, 1.0), (reg, cfg.loss.alpha_reg)]);
            let v = g.scalar(loss);
            if !v.is_finite() {
                rescale(&mut net.layers[first].weight, true);
                return Err(Error::NanLoss { unit: "fp-training".into(), iter: losses.len() });
            }
            losses.push(v);
            let mut grads = g.backward(loss)?;
            for (k, (l, &(w, b))) in net.layers.iter_mut().zip(&d.params).enumerate() {
                adam_step(l.weight.data_mut(), grads.take(w)?.data(), &mut states[k].0, lr)?;
                adam_step(l.bias.data_mut(), grads.take(b)?.data(), &mut states[k].1, lr)?;
            }
        }
    }
    rescale(&mut net.layers[first].weight, true);
    Ok(losses)
}

/// Trains the float detector on ground truth, evaluating after every epoch
/// and stopping once validation AP reaches the floor after `min_epochs`.
pub fn train_fp_baseline(train: &[LabeledFrame], val: &[LabeledFrame], cfg: &TrainConfig) -> Result<(Network<f32>, TrainReport)> {
    if train.is_empty() {
        return Err(Error::InsufficientData { requested: 1, available: 0 });
    }
    let mut net = build_detector(&cfg.detector, cfg.seed)?;
    // He init applies to the preconditioned weights
    let first = &mut net.layers[0].weight;
    let kk = first.shape()[2] * first.shape()[3];
    let k = cfg.input_scale;
    for (i, v) in first.data_mut().iter_mut().enumerate() {
        *v *= k[(i / kk) % k.len()];
    }
    let grid = cfg.detector.grid;
    let targets: Vec<PseudoLabels> = train.iter().map(|f| render_targets(&f.boxes, &grid, cfg.detector.num_classes)).collect();
    let mut rng = rand::rngs::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f00d);
    let mut states = Vec::new();
    let mut report = TrainReport::default();
    let mut lr = cfg.lr;
    for epoch in 1..=cfg.epochs {
        let l = fit(&mut net, train, &targets, cfg, 1, &mut states, &mut rng, lr)?;
        report.step_losses.extend(l);
        lr *= cfg.lr_decay;
        let ap = evaluate_network(&net, val, &grid, &cfg.decode, cfg.eval_iou, cfg.detector.num_classes)?.mean_ap;
        report.epoch_ap.push(ap);
        report.final_ap = ap;
        if ap >= cfg.ap_floor && epoch >= cfg.min_epochs {
            break;
        }
    }
    if report.final_ap < cfg.ap_floor {
        return Err(Error::NonConvergence { ap: report.final_ap, floor: cfg.ap_floor });
    }
    Ok((net, report))
}

// ------------------------------------------------------------ quantization

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Layer,
    Block,
}

impl Granularity {
    pub fn name(&self) -> &'static str {
        match self {
            Granularity::Layer => "layer",
            Granularity::Block => "block",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "layer" => Some(Granularity::Layer),
            "block" => Some(Granularity::Block),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub bits_w: u32,
    pub bits_a: u32,
    pub calib_frames: usize,
    /// Optimization iterations per unit; 0 leaves the calibrated initialization.
    pub iters: usize,
    pub lr_scale: f64,
    pub lr_theta: f64,
    pub batch: usize,
    pub granularity: Granularity,
    /// Consecutive quantizable layers per unit when `granularity` is `Block`.
    pub block_size: usize,
    pub loss: LossWeights,
    pub search: SearchConfig,
    pub seed: u64,
    /// Pseudo-label score threshold, top-K and NMS IoU.
    pub gamma: f64,
    pub top_k: usize,
    pub nms_iou: f64,
    /// Learn rounding offsets; when false they stay at zero.
    pub adaptive_rounding: bool,
    /// Keep weight scales at their grid-search value during optimization.
    pub freeze_weight_scale: bool,
    /// Include the task-guided term in the objective.
    pub tgpl: bool,
    /// Keep-best checkpoints are taken every this many iterations (and at the end).
    pub checkpoint_every: usize,
    /// Calibration frames used for the keep-best objective.
    pub checkpoint_frames: usize,
    pub grid: GridConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bits_w: 8,
            bits_a: 8,
            calib_frames: 256,
            iters: 200,
            lr_scale: 5e-5,
            lr_theta: 5e-3,
            batch: 4,
            granularity: Granularity::Layer,
            block_size: 2,
            loss: LossWeights::default(),
            search: SearchConfig::default(),
            seed: 0,
            gamma: 0.1,
            top_k: 500,
            nms_iou: 0.2,
            adaptive_rounding: true,
            freeze_weight_scale: false,
            tgpl: true,
            checkpoint_every: 50,
            checkpoint_frames: 64,
            grid: GridConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (n, b) in [("bits_w", self.bits_w), ("bits_a", self.bits_a)] {
            if !(2..=MAX_BITS).contains(&b) {
                return bad(format!("{n} must be in 2..={MAX_BITS}, got {b}"));
            }
        }
        if self.batch == 0 || self.calib_frames < self.batch {
            return bad(format!("calib_frames ({}) must be >= batch ({}) > 0", self.calib_frames, self.batch));
        }
        if !(self.lr_scale >= 0.0) || !(self.lr_theta >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        if self.block_size == 0 || self.checkpoint_every == 0 || self.checkpoint_frames == 0 {
            return bad("block_size, checkpoint_every and checkpoint_frames must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("gamma and nms_iou must lie in [0, 1]".into());
        }
        self.loss.validate()?;
        self.search.validate()?;
        self.grid.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub unit: String,
    pub iter: usize,
    pub local: f64,
    pub tgpl: f64,
    pub total: f64,
}

/// Local reconstruction error of one layer on the checkpoint frames, at the
/// calibrated start and for the accepted iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMse {
    pub layer: String,
    pub initial: f64,
    pub final_: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitSummary {
    pub unit: String,
    pub layers: Vec<String>,
    pub chosen_iter: usize,
    pub initial_total: f64,
    pub final_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayer {
    pub name: String,
    pub weights: QuantParams,
    pub activations: QuantParams,
    pub theta: Option<RoundingOffsets>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<IterRecord>,
    pub layer_mse: Vec<LayerMse>,
    pub units: Vec<UnitSummary>,
    /// Parameters of each layer at the moment it was frozen.
    pub frozen: Vec<FrozenLayer>,
    /// Filled by callers that have a clock.
    pub wall_seconds: f64,
}

impl RunLog {
    fn push(&mut self, r: IterRecord) {
        debug_assert!(self
            .records
            .last()
            .is_none_or(|p| p.unit != r.unit || p.iter < r.iter));
        self.records.push(r);
    }
}

fn backbone_positions(net: &Network<f32>) -> Vec<usize> {
    net.layers.iter().enumerate().filter(|(_, l)| l.role == LayerRole::Backbone).map(|(i, _)| i).collect()
}

/// Checks the float-exempt layers: first backbone conv and both heads.
fn check_exempt(net: &Network<f32>) -> Result<()> {
    let bb = backbone_positions(net);
    let first = bb.first().ok_or(Error::MissingFpExempt)?;
    if !net.layers[*first].fp_exempt || net.layers.iter().any(|l| l.role != LayerRole::Backbone && !l.fp_exempt) {
        return Err(Error::MissingFpExempt);
    }
    Ok(())
}

/// Backbone positions (indices into the backbone) of quantizable layers.
fn quantizable(net: &Network<f32>) -> Vec<usize> {
    let bb = backbone_positions(net);
    bb.iter().enumerate().filter(|(_, &i)| !net.layers[i].fp_exempt).map(|(p, _)| p).collect()
}

/// Float backbone traces per frame: inputs of every backbone layer followed
/// by the backbone output.
fn fp_traces(net: &Network<f32>, calib: &CalibrationSet) -> Result<Vec<Vec<Tensor<f32>>>> {
    calib.inputs.iter().map(|x| net.backbone_trace(x)).collect()
}

fn activation_params(traces: &[Vec<Tensor<f32>>], pos: usize, method: CalibMethod, bits: u32, cfg: &SearchConfig) -> Result<QuantParams> {
    let batches: Vec<Tensor<f32>> = traces.iter().map(|t| t[pos].clone()).collect();
    Ok(calibrate_activations(&batches, method, bits, cfg)?.0)
}

fn weight_params(w: &Tensor<f32>, method: CalibMethod, bits: u32, cfg: &SearchConfig) -> Result<QuantParams> {
    match method {
        CalibMethod::MaxMinGrid => Ok(grid_search_scale(w.data(), bits, cfg)?.params),
        _ => maxmin_params(w.data(), bits),
    }
}

/// Calibration-only quantization of every quantizable layer with one method.
///
/// `bits == FLOAT_BITS` returns the network unchanged.
pub fn run_baseline_calibration(
    fp_net: &Network<f32>,
    calib: &CalibrationSet,
    method: CalibMethod,
    bits: u32,
    search: &SearchConfig,
) -> Result<Network<f32>> {
    if bits == FLOAT_BITS {
        return Ok(fp_net.clone());
    }
    check_exempt(fp_net)?;
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let traces = fp_traces(fp_net, calib)?;
    let bb = backbone_positions(fp_net);
    let mut net = fp_net.clone();
    for pos in quantizable(fp_net) {
        let l = &mut net.layers[bb[pos]];
        l.w_quant = Some(weight_params(&l.weight, method, bits, search)?);
        l.a_quant = Some(activation_params(&traces, pos, method, bits, search)?);
        l.theta = None;
        l.precision = Precision::Quantized;
    }
    Ok(net)
}

/// Output error of one quantized layer, measured on float inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerError {
    pub layer: String,
    pub weight_scale: f64,
    pub activation_scale: f64,
    /// Mean squared output error with max-min scales and plain rounding.
    pub mse_maxmin: f64,
    /// Same with the layer's own parameters.
    pub mse: f64,
}

/// Per-layer output MSE of `q_net` against `fp_net` over the calibration set,
/// each layer fed its float input so errors do not compound.
pub fn layer_errors(fp_net: &Network<f32>, q_net: &Network<f32>, calib: &CalibrationSet) -> Result<Vec<LayerError>> {
    let bb = backbone_positions(fp_net);
    if backbone_positions(q_net) != bb {
        return Err(Error::InvalidConfig("networks differ in structure".into()));
    }
    let pos: Vec<usize> = (0..bb.len()).filter(|&p| q_net.layers[bb[p]].is_quantized()).collect();
    // pass 1: pooled max |input| per layer for the max-min reference
    let mut max_in = vec![0.0f64; bb.len()];
    for x in &calib.inputs {
        let t = fp_net.backbone_trace(x)?;
        for &p in &pos {
            max_in[p] = t[p].data().iter().fold(max_in[p], |m, v| m.max(v.abs() as f64));
        }
    }
    let mut refs = Vec::with_capacity(pos.len());
    for &p in &pos {
        let q = &q_net.layers[bb[p]];
        let (wq, aq) = match (q.w_quant, q.a_quant) {
            (Some(w), Some(a)) => (w, a),
            _ => return Err(Error::InvalidConfig(format!("layer {} is quantized without parameters", q.name))),
        };
        let mut m = fp_net.layers[bb[p]].clone();
        m.w_quant = Some(maxmin_params(m.weight.data(), wq.bits as u32)?);
        m.a_quant = Some(maxmin_params(&[max_in[p] as f32], aq.bits as u32)?);
        m.theta = None;
        m.precision = Precision::Quantized;
        refs.push(m);
    }
    let (mut se_mm, mut se, mut n) = (vec![0.0f64; pos.len()], vec![0.0f64; pos.len()], vec![0usize; pos.len()]);
    for x in &calib.inputs {
        let t = fp_net.backbone_trace(x)?;
        for (k, &p) in pos.iter().enumerate() {
            let want = &t[p + 1];
            let sq = |y: Tensor<f32>| -> f64 {
                y.data().iter().zip(want.data()).map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum()
            };
            se_mm[k] += sq(refs[k].forward(&t[p])?);
            se[k] += sq(q_net.layers[bb[p]].forward(&t[p])?);
            n[k] += want.numel();
        }
    }
    Ok(pos
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let q = &q_net.layers[bb[p]];
            let d = n[k].max(1) as f64;
            LayerError {
                layer: q.name.clone(),
                weight_scale: q.w_quant.map_or(0.0, |w| w.scale),
                activation_scale: q.a_quant.map_or(0.0, |a| a.scale),
                mse_maxmin: se_mm[k] / d,
                mse: se[k] / d,
            }
        })
        .collect())
}

/// Trainable state of one layer inside a unit.
#[derive(Clone)]
struct Candidate {
    s_a: f64,
    s_w: f64,
    /// Rounding fractions `theta / s_w`.
    h: Option<Tensor<f32>>,
}

impl Candidate {
    fn apply(&self, l: &LayerSpec<f32>, bits_w: u32, bits_a: u32) -> Result<LayerSpec<f32>> {
        let mut q = l.clone();
        let w = QuantParams::symmetric(self.s_w, bits_w)?;
        q.w_quant = Some(w);
        q.a_quant = Some(QuantParams::symmetric(self.s_a, bits_a)?);
        // all-zero offsets are plain rounding; leave them out
        q.theta = self
            .h
            .as_ref()
            .filter(|h| h.data().iter().any(|&v| v != 0.0))
            .map(|h| RoundingOffsets::from_fractions(h, w.scale));
        q.precision = Precision::Quantized;
        Ok(q)
    }
}

struct UnitCtx<'a> {
    name: String,
    /// Backbone positions in the unit.
    positions: Vec<usize>,
    fp: &'a Network<f32>,
    bb: Vec<usize>,
    traces: &'a [Vec<Tensor<f32>>],
    /// Per-frame input to the unit through the already-frozen quantized prefix.
    inputs: &'a [Tensor<f32>],
    targets: &'a [PseudoLabels],
    cfg: &'a PipelineConfig,
}

struct Objective {
    local: Vec<f64>,
    total: f64,
}

impl UnitCtx<'_> {
    fn layer(&self, pos: usize) -> &LayerSpec<f32> {
        &self.fp.layers[self.bb[pos]]
    }

    fn tail(&self) -> impl Iterator<Item = &LayerSpec<f32>> {
        let last = *self.positions.last().expect("non-empty unit");
        self.bb[last + 1..].iter().map(|&i| &self.fp.layers[i])
    }

    fn stacked(&self, frames: &[usize], pos: usize) -> Result<Tensor<f32>> {
        stack(&frames.iter().map(|&f| &self.traces[f][pos]).collect::<Vec<_>>())
    }

    fn unit_input(&self, frames: &[usize]) -> Result<Tensor<f32>> {
        stack(&frames.iter().map(|&f| &self.inputs[f]).collect::<Vec<_>>())
    }

    fn lambda2(&self) -> f64 {
        if self.cfg.tgpl {
            self.cfg.loss.lambda2
        } else {
            0.0
        }
    }

    /// Unit objective on `frames`, batch by batch, without a tape.
    fn objective(&self, cands: &[Candidate], frames: &[usize]) -> Result<Objective> {
        let q: Vec<LayerSpec<f32>> = self
            .positions
            .iter()
            .zip(cands)
            .map(|(&p, c)| c.apply(self.layer(p), self.cfg.bits_w, self.cfg.bits_a))
            .collect::<Result<_>>()?;
        let mut local = vec![0.0; q.len()];
        let mut tgpl = 0.0;
        let total_frames = frames.len() as f64;
        for chunk in frames.chunks(self.cfg.batch) {
            let share = chunk.len() as f64 / total_frames;
            for (k, (&p, l)) in self.positions.iter().zip(&q).enumerate() {
                let i = self.stacked(chunk, p)?;
                local[k] += share * local_recon_loss(&l.weight, &l.effective_weight()?, &i, l.stride, l.padding)?;
            }
            if self.lambda2() > 0.0 {
                let mut x = self.unit_input(chunk)?;
                for l in q.iter().chain(self.tail()) {
                    x = l.forward(&x)?;
                }
                let out = heads_forward(self.fp, &x)?;
                let t = PseudoLabels::stack(&chunk.iter().map(|&f| &self.targets[f]).collect::<Vec<_>>())?;
                tgpl += share * tgpl_loss(&out, &t, &self.cfg.loss)?;
            }
        }
        let total = self.cfg.loss.lambda1 * local.iter().sum::<f64>() + self.lambda2() * tgpl;
        Ok(Objective { local, total })
    }

    /// One optimization step on a minibatch; returns (local, tgpl, total)
    /// before the update.
    fn step(&self, cands: &mut [Candidate], frames: &[usize], states: &mut [[AdamState; 3]]) -> Result<(f64, f64, f64)> {
        let cfg = self.cfg;
        let mut g: Graph<f32> = Graph::new();
        let n = frames.len() as f64;
        let mut cur = g.constant(self.unit_input(frames)?);
        let mut vars = Vec::new();
        let mut local_terms = Vec::new();
        for (&p, c) in self.positions.iter().zip(cands.iter()) {
            let l = self.layer(p);
            let sa = g.param(Tensor::scalar(c.s_a as f32));
            let sw = if cfg.freeze_weight_scale { g.constant(Tensor::scalar(c.s_w as f32)) } else { g.param(Tensor::scalar(c.s_w as f32)) };
            let h = if cfg.adaptive_rounding { c.h.as_ref().map(|h| g.param(h.clone())) } else { None };
            let w = g.constant(l.weight.clone());
            let b = g.constant(l.bias.clone());
            let zero = g.constant(Tensor::zeros(&[l.weight.shape()[0]]));
            let wq = g.fake_quant(w, sw, h, cfg.bits_w)?;
            let input = g.constant(self.stacked(frames, p)?);
            let zb = vec![0.0f32; l.weight.shape()[0]];
            let reference = conv2d_forward(g.value(input), &l.weight, &zb, l.stride, l.padding)?;
            let yq = g.conv2d(input, wq, zero, l.stride, l.padding)?;
            let reference = g.constant(reference);
            local_terms.push(g.sq_diff(yq, reference, 1.0 / n)?);
            let xq = g.fake_quant(cur, sa, None, cfg.bits_a)?;
            let mut y = g.conv2d(xq, wq, b, l.stride, l.padding)?;
            if l.activation == Activation::Relu {
                y = g.relu(y);
            }
            cur = y;
            vars.push((sa, sw, h));
        }
        let mut terms: Vec<(Var, f64)> = local_terms.iter().map(|&v| (v, cfg.loss.lambda1)).collect();
        let mut tgpl_parts = Vec::new();
        if self.lambda2() > 0.0 {
            for l in self.tail() {
                let w = g.constant(l.weight.clone());
                let b = g.constant(l.bias.clone());
                let mut y = g.conv2d(cur, w, b, l.stride, l.padding)?;
                if l.activation == Activation::Relu {
                    y = g.relu(y);
                }
                cur = y;
            }
            let head = |g: &mut Graph<f32>, role| -> Result<Var> {
                let l = self.fp.head(role).ok_or_else(|| Error::UnknownLayer("head".into()))?;
                let w = g.constant(l.weight.clone());
                let b = g.constant(l.bias.clone());
                g.conv2d(cur, w, b, l.stride, l.padding)
            };
            let hm = head(&mut g, LayerRole::HeatmapHead)?;
            let hm = g.sigmoid(hm);
            let reg = head(&mut g, LayerRole::RegressionHead)?;
            let t: BatchTargets<f32> = PseudoLabels::stack(&frames.iter().map(|&f| &self.targets[f]).collect::<Vec<_>>())?;
            let cls = g.focal(hm, t.heatmap)?;
            let l1 = g.l1_masked(reg, t.reg, t.mask)?;
            terms.push((cls, self.lambda2()));
            terms.push((l1, self.lambda2() * cfg.loss.alpha_reg));
            tgpl_parts = vec![(cls, 1.0), (l1, cfg.loss.alpha_reg)];
        }
        let total = g.linear(&terms);
        let local: f64 = local_terms.iter().map(|&v| g.scalar(v)).sum();
        let tgpl: f64 = tgpl_parts.iter().map(|&(v, c)| c * g.scalar(v)).sum();
        let total_v = g.scalar(total);
        let mut grads = g.backward(total)?;
        for ((c, &(sa, sw, h)), st) in cands.iter_mut().zip(&vars).zip(states.iter_mut()) {
            if let Ok(gs) = grads.take(sa) {
                let mut v = [c.s_a];
                adam_step(&mut v, &[gs.data()[0] as f64], &mut st[0], cfg.lr_scale)?;
                c.s_a = v[0].max(f32::MIN_POSITIVE as f64);
            }
            if !cfg.freeze_weight_scale {
                if let Ok(gs) = grads.take(sw) {
                    let mut v = [c.s_w];
                    adam_step(&mut v, &[gs.data()[0] as f64], &mut st[1], cfg.lr_scale)?;
                    c.s_w = v[0].max(f32::MIN_POSITIVE as f64);
                }
            }
            if let (Some(hv), Some(ht)) = (h, c.h.as_mut()) {
                if let Ok(gh) = grads.take(hv) {
                    adam_step(ht.data_mut(), gh.data(), &mut st[2], cfg.lr_theta)?;
                    ht.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                }
            }
        }
        Ok((local, tgpl, total_v))
    }
}

/// The full pipeline. Returns the quantized network and the run log.
///
/// Ground truth is never touched: the calibration set carries inputs only and
/// the task-guided targets come from the float network's own detections.
pub fn run_lidar_ptq(fp_net: &Network<f32>, calib: &CalibrationSet, cfg: &PipelineConfig) -> Result<(Network<f32>, RunLog)> {
    cfg.validate()?;
    check_exempt(fp_net)?;
    if calib.len() < cfg.batch {
        return Err(Error::InsufficientData { requested: cfg.batch, available: calib.len() });
    }
    let bb = backbone_positions(fp_net);
    let qpos = quantizable(fp_net);
    let mut net = fp_net.clone();
    // weight scales for every layer first
    for &p in &qpos {
        let l = &mut net.layers[bb[p]];
        l.w_quant = Some(grid_search_scale(l.weight.data(), cfg.bits_w, &cfg.search)?.params);
    }
    let traces = fp_traces(fp_net, calib)?;
    // float outputs, rendered once into pseudo-labels
    let targets: Vec<PseudoLabels> = traces
        .iter()
        .map(|t| {
            let out: DetectorOutput<f32> = heads_forward(fp_net, t.last().expect("trace"))?;
            Ok(make_pseudo_labels(&out, cfg.gamma, cfg.top_k, cfg.nms_iou, &cfg.grid))
        })
        .collect::<Result<_>>()?;
    let units: Vec<Vec<usize>> = match cfg.granularity {
        Granularity::Layer => qpos.iter().map(|&p| vec![p]).collect(),
        Granularity::Block => qpos.chunks(cfg.block_size).map(|c| c.to_vec()).collect(),
    };
    let check_frames: Vec<usize> = (0..calib.len().min(cfg.checkpoint_frames)).collect();
    let mut log = RunLog::default();
    let mut rng = rand::rngs::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut inputs: Vec<Tensor<f32>> = match units.first() {
        Some(u) => traces.iter().map(|t| t[u[0]].clone()).collect(),
        None => Vec::new(),
    };
    for (ui, unit) in units.iter().enumerate() {
        let unit = unit.clone();
        let names: Vec<String> = unit.iter().map(|&p| fp_net.layers[bb[p]].name.clone()).collect();
        let ctx = UnitCtx {
            name: names.join("+"),
            positions: unit.clone(),
            fp: fp_net,
            bb: bb.clone(),
            traces: &traces,
            inputs: &inputs,
            targets: &targets,
            cfg,
        };
        let mut cands = Vec::with_capacity(unit.len());
        for &p in &unit {
            let s_a = activation_params(&traces, p, CalibMethod::MaxMinGrid, cfg.bits_a, &cfg.search)?.scale;
            let s_w = net.layers[bb[p]].w_quant.expect("set above").scale;
            let h = cfg.adaptive_rounding.then(|| Tensor::zeros(fp_net.layers[bb[p]].weight.shape()));
            cands.push(Candidate { s_a, s_w, h });
        }
        let init = ctx.objective(&cands, &check_frames)?;
        let (mut best, mut best_obj, mut best_iter) = (cands.clone(), init.total, 0);
        let mut best_local = init.local.clone();
        if cfg.iters > 0 {
            let mut states: Vec<[AdamState; 3]> = unit.iter().map(|_| Default::default()).collect();
            let mut order: Vec<usize> = Vec::new();
            let mut cursor = 0;
            for it in 1..=cfg.iters {
                if cursor + cfg.batch > order.len() {
                    order = (0..calib.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let batch = &order[cursor..cursor + cfg.batch];
                cursor += cfg.batch;
                let (local, tgpl, total) = ctx.step(&mut cands, batch, &mut states)?;
                if !(local.is_finite() && tgpl.is_finite() && total.is_finite()) {
                    return Err(Error::NanLoss { unit: ctx.name.clone(), iter: it });
                }
                log.push(IterRecord { unit: ctx.name.clone(), iter: it, local, tgpl, total });
                if it % cfg.checkpoint_every == 0 || it == cfg.iters {
                    let o = ctx.objective(&cands, &check_frames)?;
                    if !o.total.is_finite() {
                        return Err(Error::NanLoss { unit: ctx.name.clone(), iter: it });
                    }
                    let keeps_local = o.local.iter().zip(&init.local).all(|(a, b)| a <= b);
                    if keeps_local && o.total < best_obj {
                        best = cands.clone();
                        best_obj = o.total;
                        best_iter = it;
                        best_local = o.local;
                    }
                }
            }
        }
        for ((&p, c), (k, name)) in unit.iter().zip(&best).zip(names.iter().enumerate()) {
            let q = c.apply(&fp_net.layers[bb[p]], cfg.bits_w, cfg.bits_a)?;
            log.frozen.push(FrozenLayer {
                name: name.clone(),
                weights: q.w_quant.expect("set"),
                activations: q.a_quant.expect("set"),
                theta: q.theta.clone(),
            });
            log.layer_mse.push(LayerMse { layer: name.clone(), initial: init.local[k], final_: best_local[k] });
            net.layers[bb[p]] = q;
        }
        log.units.push(UnitSummary {
            unit: ctx.name.clone(),
            layers: names,
            chosen_iter: best_iter,
            initial_total: init.total,
            final_total: best_obj,
        });
        // advance the unit inputs through the layers just frozen
        if let Some(next) = units.get(ui + 1) {
            for x in inputs.iter_mut() {
                for p in unit[0]..next[0] {
                    *x = net.layers[bb[p]].forward(x)?;
                }
            }
        }
    }
    Ok((net, log))
}
