//! Pseudo-map pretraining, dual-branch refinement, data consistency and
//! volume assembly.
//!
//! For each adjacent section the central section is registered into the
//! adjacent frame and a network is pretrained on it with the adjacent
//! sampling grid. Its predictions on the adjacent section serve as pseudo
//! labels. Refinement then trains two heads on the frozen backbone: one on
//! the aligned central section, one (with domain-alignment layers) on the
//! adjacent section against confidence-weighted pseudo labels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{register, warp, warp_tensor, AlignedCentral, PlanarTransform, Registration, RegistrationConfig, TransformFamily};
use crate::backbone::{extract_histology_features, model_input, BackboneConfig, HistologyFeatures, ModelParams};
use crate::csg::{uniform_weights, ConfidenceMap};
use crate::filter::Plane;
use crate::metrics::{evaluate, MetricsReport, Population};
use crate::optim::{Adam, AdamConfig, CosineSchedule};
use crate::pdl::{all_sites, insert_pdls, trainable_subset, Stage};
use crate::sample::{Mask, Role, Sample, Section};
use crate::sampling::{apply_mask, make_grid_mask, SamplingGrid};
use crate::tape::{Gradients, Tape, Var};
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_pretrain: usize,
    pub epochs_fmdr: usize,
    pub lr: f32,
    pub lr_floor: f32,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Use pseudo labels at measured pixels too, instead of the measurements.
    pub literal_eq5: bool,
    pub base_width: usize,
    pub depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_pretrain: 500,
            epochs_fmdr: 1000,
            lr: 1e-3,
            lr_floor: 0.0,
            adam: AdamConfig::default(),
            seed: 0,
            literal_eq5: false,
            base_width: 16,
            depth: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.lr_floor < 0.0 || self.lr_floor > self.lr {
            return Err(Error::InvalidArgument(format!("learning rate {} / floor {} invalid", self.lr, self.lr_floor)));
        }
        Ok(())
    }

    pub fn backbone(&self, genes: usize) -> BackboneConfig {
        BackboneConfig { base_width: self.base_width, depth: self.depth, ..BackboneConfig::new(genes) }
    }
}

/// Stage switches mirroring the ablation columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub csa: bool,
    pub fmdr: bool,
    pub pdl: bool,
    pub csg: bool,
    pub dco: bool,
}

impl Toggles {
    pub const fn all() -> Self {
        Self { csa: true, fmdr: true, pdl: true, csg: true, dco: true }
    }

    pub const fn none() -> Self {
        Self { csa: false, fmdr: false, pdl: false, csg: false, dco: false }
    }

    /// The seven ablation rows, baseline first and full pipeline last.
    pub const ABLATION: [Toggles; 7] = [
        Toggles::none(),
        Toggles { fmdr: true, ..Toggles::none() },
        Toggles { csa: true, ..Toggles::none() },
        Toggles { csa: true, fmdr: true, ..Toggles::none() },
        Toggles { csa: true, fmdr: true, pdl: true, ..Toggles::none() },
        Toggles { dco: false, ..Toggles::all() },
        Toggles::all(),
    ];

    /// Enabled switches as a comma-separated list.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [("csa", self.csa), ("fmdr", self.fmdr), ("pdl", self.pdl), ("csg", self.csg), ("dco", self.dco)]
            .iter()
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        if names.is_empty() {
            String::from("none")
        } else {
            names.join(",")
        }
    }
}

impl FromStr for Toggles {
    type Err = Error;

    /// Parses `csa,fmdr,pdl,csg,dco` subsets; `none` and `all` are accepted.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = Toggles::none();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "csa" => t.csa = true,
                "fmdr" => t.fmdr = true,
                "pdl" => t.pdl = true,
                "csg" => t.csg = true,
                "dco" => t.dco = true,
                "all" => t = Toggles::all(),
                "none" => {}
                other => return Err(Error::InvalidArgument(format!("unknown toggle `{other}`"))),
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Refine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: Phase,
    pub section: usize,
    pub epoch: usize,
    pub l_central: f32,
    pub l_adj: f32,
    /// `l_central + l_adj`, the minimized objective.
    pub total: f32,
    pub lr: f32,
}

/// Per-pixel weights broadcast over genes and divided by the pixel count.
fn loss_weights(weights: &[f32], genes: usize, count: usize) -> Tensor {
    let n = weights.len();
    let scale = 1.0 / count as f32;
    Tensor::from_fn(&[genes, n], |i| weights[i % n] * scale)
}

/// `sum_i w_i * |target_i - out_i|^2` with weights already normalized.
fn weighted_sq(tape: &mut Tape<'_>, out: Var, target: &Tensor, weights: &Tensor) -> Result<Var> {
    let t = tape.input(target.clone());
    let d = tape.sub(out, t)?;
    let sq = tape.mul(d, d)?;
    let w = tape.input(weights.clone().reshape(target.shape())?);
    let m = tape.mul(sq, w)?;
    Ok(tape.sum(m))
}

fn central_weights(validity: &Mask, genes: usize) -> Result<Tensor> {
    let count = validity.count();
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    let w: Vec<f32> = validity.data().iter().map(|&v| v as f32).collect();
    Ok(loss_weights(&w, genes, count))
}

fn adjacent_weights(w_tilde: &Plane, genes: usize) -> Result<Tensor> {
    if let Some(&neg) = w_tilde.data.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::NegativeWeight(neg));
    }
    Ok(loss_weights(&w_tilde.data, genes, w_tilde.data.len()))
}

/// Masked mean squared error on the tape: `(1/N_c) sum_valid |G - f|^2`.
pub fn loss_central(tape: &mut Tape<'_>, out: Var, target: &Tensor, validity: &Mask) -> Result<Var> {
    let (g, _, _) = target.dims3()?;
    let w = central_weights(validity, g)?;
    weighted_sq(tape, out, target, &w)
}

/// Confidence-weighted squared error: `(1/N) sum_i w_i |target_i - f_i|^2`.
pub fn loss_adjacent(tape: &mut Tape<'_>, out: Var, target: &Tensor, w_tilde: &Plane) -> Result<Var> {
    let (g, _, _) = target.dims3()?;
    let w = adjacent_weights(w_tilde, g)?;
    weighted_sq(tape, out, target, &w)
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) });
    }
    Ok(())
}

/// Value of [`loss_central`] without a tape.
pub fn central_loss_value(pred: &Tensor, target: &Tensor, validity: &Mask) -> Result<f64> {
    check_same("loss_central", pred, target)?;
    let (g, h, w) = target.dims3()?;
    let n = h * w;
    let count = validity.count();
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    let mut s = 0.0f64;
    for i in (0..n).filter(|&i| validity.is_set(i)) {
        for c in 0..g {
            let d = (target.data()[c * n + i] - pred.data()[c * n + i]) as f64;
            s += d * d;
        }
    }
    Ok(s / count as f64)
}

/// Value of [`loss_adjacent`] without a tape.
pub fn adjacent_loss_value(pred: &Tensor, target: &Tensor, w_tilde: &Plane) -> Result<f64> {
    check_same("loss_adjacent", pred, target)?;
    let (g, h, w) = target.dims3()?;
    let n = h * w;
    if w_tilde.data.len() != n {
        return Err(Error::Shape { op: "loss_adjacent", detail: format!("{} weights for {h}x{w}", w_tilde.data.len()) });
    }
    if let Some(&neg) = w_tilde.data.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::NegativeWeight(neg));
    }
    let mut s = 0.0f64;
    for i in 0..n {
        let mut e = 0.0f64;
        for c in 0..g {
            let d = (target.data()[c * n + i] - pred.data()[c * n + i]) as f64;
            e += d * d;
        }
        s += w_tilde.data[i] as f64 * e;
    }
    Ok(s / n as f64)
}

/// Replaces predictions with measurements wherever `mask` is set.
pub fn dco(pred: &Tensor, measured: &Tensor, mask: &Mask) -> Result<Tensor> {
    check_same("dco", pred, measured)?;
    let (g, h, w) = pred.dims3()?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape { op: "dco", detail: format!("mask {}x{} vs {h}x{w}", mask.height(), mask.width()) });
    }
    let n = h * w;
    let mut out = pred.clone();
    for c in 0..g {
        for i in (0..n).filter(|&i| mask.is_set(i)) {
            out.data_mut()[c * n + i] = measured.data()[c * n + i];
        }
    }
    Ok(out)
}

/// Adjacent-branch targets: measurements where observed, pseudo labels
/// elsewhere; pseudo labels everywhere when `literal` is set.
pub fn adjacent_targets(pseudo: &Tensor, measured: &Tensor, mask: &Mask, literal: bool) -> Result<Tensor> {
    if literal {
        check_same("adjacent_targets", pseudo, measured)?;
        return Ok(pseudo.clone());
    }
    dco(pseudo, measured, mask)
}

/// Network inputs for one section.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput {
    pub input: Tensor,
    pub features: HistologyFeatures,
}

impl NetInput {
    pub fn new(histology: &Tensor, sparse: &Tensor, mask: &Mask, config: &BackboneConfig) -> Result<Self> {
        Ok(Self {
            input: model_input(histology, sparse, mask)?,
            features: extract_histology_features(histology, config.bottleneck_factor())?,
        })
    }

    pub fn for_section(section: &Section, config: &BackboneConfig) -> Result<Self> {
        Self::new(&section.histology.to_tensor(), &section.expression, &section.mask, config)
    }
}

/// Training data for the pseudo-label network: the warped central section
/// seen through the adjacent sampling grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainData {
    pub net: NetInput,
    pub target: Tensor,
    pub validity: Mask,
}

impl PretrainData {
    pub fn new(aligned: &AlignedCentral, grid: &SamplingGrid, config: &BackboneConfig) -> Result<Self> {
        // Grid sites whose preimage left the central frame carry no measurement.
        let observed = grid.mask().and(&aligned.validity);
        let sparse = apply_mask(&aligned.expression, &observed)?;
        Ok(Self {
            net: NetInput::new(&aligned.histology, &sparse, &observed, config)?,
            target: aligned.expression.clone(),
            validity: aligned.validity.clone(),
        })
    }
}

fn step_error(e: Error, stage: &'static str, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { stage, epoch },
        other => other,
    }
}

fn run_tape<'p>(
    store: &'p crate::tape::ParamStore,
    build: impl FnOnce(&mut Tape<'p>) -> Result<Var>,
) -> Result<(f32, Gradients)> {
    let mut tape = Tape::new(store);
    let loss = build(&mut tape)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss)?))
}

/// Trains every parameter of `params` on the aligned central section.
///
/// Updates happen in place, so on divergence `params` holds the last
/// finite state and the error names the failing epoch.
pub fn pretrain_pseudo_network(
    params: &mut ModelParams,
    data: &PretrainData,
    cfg: &TrainConfig,
    section: usize,
    log: &mut Vec<LogRecord>,
) -> Result<()> {
    cfg.validate()?;
    trainable_subset(params, Stage::Pretrain);
    let genes = params.config().genes;
    let weights = central_weights(&data.validity, genes)?;
    let schedule = CosineSchedule::new(cfg.lr, cfg.epochs_pretrain, cfg.lr_floor);
    let mut adam = Adam::new(cfg.adam);
    for epoch in 0..cfg.epochs_pretrain {
        let lr = schedule.rate(epoch);
        let (loss, grads) = run_tape(params.store(), |tape| {
            let x = tape.input(data.net.input.clone());
            let f = tape.input(data.net.features.map.clone());
            let out = params.forward_tape(tape, x, f)?;
            weighted_sq(tape, out, &data.target, &weights)
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { stage: "pretrain", epoch });
        }
        adam.step(params.store_mut(), &grads, lr).map_err(|e| step_error(e, "pretrain", epoch))?;
        log.push(LogRecord { phase: Phase::Pretrain, section, epoch, l_central: loss, l_adj: 0.0, total: loss, lr });
    }
    Ok(())
}

/// Dense pseudo labels for an adjacent section from the pretrained network.
pub fn generate_pseudo_labels(theta0: &ModelParams, adjacent: &NetInput) -> Result<Tensor> {
    theta0.forward(&adjacent.input, &adjacent.features)
}

/// Result of dual-branch refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    /// Central branch: frozen backbone, own head.
    pub theta1: ModelParams,
    /// Adjacent branch: frozen backbone, own head, optional PDLs.
    pub theta2: ModelParams,
}

/// Inputs to one refinement run.
pub struct FmdrInputs<'a> {
    pub central: &'a PretrainData,
    pub adjacent: &'a NetInput,
    /// Adjacent-branch targets, see [`adjacent_targets`].
    pub targets: &'a Tensor,
    pub w_tilde: &'a Plane,
    pub use_pdl: bool,
    pub section: usize,
}

/// Jointly minimizes `L_central + L_adj` over the two heads and the PDLs.
///
/// The branches share no trainable tensor, so each takes its own gradient
/// of the summed loss. The frozen backbone makes the central branch's
/// penultimate features constant; they are computed once. Without PDLs the
/// same holds for the adjacent branch.
pub fn fmdr_refine(theta0: &ModelParams, inputs: &FmdrInputs<'_>, cfg: &TrainConfig, log: &mut Vec<LogRecord>) -> Result<Refined> {
    cfg.validate()?;
    let genes = theta0.config().genes;
    let mut theta1 = theta0.clone();
    trainable_subset(&mut theta1, Stage::FmdrCentral);
    let mut theta2 = theta0.clone();
    if inputs.use_pdl {
        let sites = all_sites(&theta2);
        insert_pdls(&mut theta2, &sites)?;
    }
    trainable_subset(&mut theta2, Stage::FmdrAdjacent);

    let cw = central_weights(&inputs.central.validity, genes)?;
    let aw = adjacent_weights(inputs.w_tilde, genes)?;
    check_same("fmdr_refine", inputs.targets, &inputs.central.target)?;
    let central_feat = theta0.penultimate(&inputs.central.net.input, &inputs.central.net.features)?;
    let adjacent_feat = if inputs.use_pdl { None } else { Some(theta0.penultimate(&inputs.adjacent.input, &inputs.adjacent.features)?) };

    let schedule = CosineSchedule::new(cfg.lr, cfg.epochs_fmdr, cfg.lr_floor);
    let (mut adam1, mut adam2) = (Adam::new(cfg.adam), Adam::new(cfg.adam));
    for epoch in 0..cfg.epochs_fmdr {
        let lr = schedule.rate(epoch);
        let (lc, g1) = run_tape(theta1.store(), |tape| {
            let p = tape.input(central_feat.clone());
            let out = theta1.head_tape(tape, p)?;
            weighted_sq(tape, out, &inputs.central.target, &cw)
        })?;
        let (la, g2) = run_tape(theta2.store(), |tape| {
            let out = match &adjacent_feat {
                Some(p) => {
                    let p = tape.input(p.clone());
                    theta2.head_tape(tape, p)?
                }
                None => {
                    let x = tape.input(inputs.adjacent.input.clone());
                    let f = tape.input(inputs.adjacent.features.map.clone());
                    theta2.forward_tape(tape, x, f)?
                }
            };
            weighted_sq(tape, out, inputs.targets, &aw)
        })?;
        if !(lc + la).is_finite() {
            return Err(Error::Diverged { stage: "fmdr", epoch });
        }
        adam1.step(theta1.store_mut(), &g1, lr).map_err(|e| step_error(e, "fmdr", epoch))?;
        adam2.step(theta2.store_mut(), &g2, lr).map_err(|e| step_error(e, "fmdr", epoch))?;
        log.push(LogRecord { phase: Phase::Refine, section: inputs.section, epoch, l_central: lc, l_adj: la, total: lc + la, lr });
    }
    verify_frozen(theta0, &theta1)?;
    verify_frozen(theta0, &theta2)?;
    Ok(Refined { theta1, theta2 })
}

/// Errors unless every backbone tensor of `branch` is bit-identical to `theta0`'s.
pub fn verify_frozen(theta0: &ModelParams, branch: &ModelParams) -> Result<()> {
    for id in theta0.backbone_ids() {
        if !theta0.store().get(id).bit_eq(branch.store().get(id)) {
            return Err(Error::FrozenModified(String::from(theta0.store().name(id))));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Measured,
    Predicted,
    /// Prediction with measurements substituted at sampled pixels.
    PredictedDco,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumePrediction {
    /// `[n, G, H, W]` in section-index order.
    pub data: Tensor,
    pub indices: Vec<usize>,
    pub provenance: Vec<Provenance>,
    pub genes: Vec<String>,
}

impl VolumePrediction {
    /// `[G, H, W]` slice at stack position `pos`.
    pub fn slice(&self, pos: usize) -> Tensor {
        let s = &self.data.shape()[1..];
        let n: usize = s.iter().product();
        Tensor::new(s.to_vec(), self.data.data()[pos * n..(pos + 1) * n].to_vec()).expect("consistent")
    }
}

/// Stacks the central measurement and every adjacent result.
pub fn assemble_volume(sample: &Sample, finals: &BTreeMap<usize, (Tensor, Provenance)>) -> Result<VolumePrediction> {
    let missing: Vec<usize> =
        sample.sections.iter().filter(|s| s.role == Role::Adjacent && !finals.contains_key(&s.index)).map(|s| s.index).collect();
    if !missing.is_empty() {
        return Err(Error::MissingSections(missing));
    }
    let (g, h, w) = (sample.gene_count(), sample.height(), sample.width());
    let mut data = Vec::with_capacity(sample.sections.len() * g * h * w);
    let mut provenance = Vec::with_capacity(sample.sections.len());
    for s in &sample.sections {
        if s.role == Role::Central {
            data.extend_from_slice(s.expression.data());
            provenance.push(Provenance::Measured);
        } else {
            let (t, p) = &finals[&s.index];
            if t.shape() != [g, h, w] {
                return Err(Error::Shape { op: "assemble_volume", detail: format!("section {}: {:?}", s.index, t.shape()) });
            }
            data.extend_from_slice(t.data());
            provenance.push(*p);
        }
    }
    Ok(VolumePrediction {
        data: Tensor::new(alloc::vec![sample.sections.len(), g, h, w], data)?,
        indices: sample.sections.iter().map(|s| s.index).collect(),
        provenance,
        genes: sample.genes.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructConfig {
    pub train: TrainConfig,
    pub registration: RegistrationConfig,
    pub spacing: usize,
    pub offset: (usize, usize),
}

impl ReconstructConfig {
    pub fn new(train: TrainConfig) -> Self {
        let mut registration = RegistrationConfig::default();
        registration.ransac.seed = train.seed;
        Self { train, registration, spacing: 2, offset: (0, 0) }
    }
}

/// Everything produced for one adjacent section.
#[derive(Clone, Debug, PartialEq)]
pub struct PairResult {
    pub index: usize,
    pub transform: PlanarTransform,
    pub registration: Option<Registration>,
    pub theta0: ModelParams,
    pub pseudo: Tensor,
    pub confidence: Option<ConfidenceMap>,
    pub refined: Option<Refined>,
    /// Network output before measurement substitution.
    pub prediction: Tensor,
    pub final_map: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub toggles: Toggles,
    pub volume: VolumePrediction,
    pub pairs: Vec<PairResult>,
    pub log: Vec<LogRecord>,
}

type TransformKey = [u64; 6];

fn transform_key(t: &PlanarTransform) -> TransformKey {
    t.matrix.map(f64::to_bits)
}

/// Resamples a bottleneck-resolution feature map through a full-resolution
/// transform. Coarse pixel `q` covers full-resolution pixels centred on
/// `f * q + (f - 1) / 2`.
pub fn warp_features(features: &HistologyFeatures, transform: &PlanarTransform, factor: usize) -> Result<HistologyFeatures> {
    let f = factor as f64;
    let c = (f - 1.0) / 2.0;
    let up = PlanarTransform::new([f, 0.0, c, 0.0, f, c], TransformFamily::Similarity)?;
    let coarse = up.inverse()?.compose(transform).compose(&up);
    let (map, _) = warp_tensor(&features.map, &coarse)?;
    Ok(HistologyFeatures { map, source: features.source })
}

#[derive(Clone)]
struct Pretrained {
    data: PretrainData,
    theta0: ModelParams,
    log: Vec<LogRecord>,
}

type RefineKey = (usize, TransformKey, bool, bool);

#[derive(Clone)]
struct RefineEntry {
    refined: Refined,
    confidence: Option<ConfidenceMap>,
    log: Vec<LogRecord>,
}

/// Runs the pipeline on a normalized sample, memoizing pretrained and
/// refined networks so several toggle combinations can share them.
pub struct Reconstructor<'a> {
    sample: &'a Sample,
    cfg: ReconstructConfig,
    backbone: BackboneConfig,
    grid: SamplingGrid,
    loaded: BTreeMap<usize, HistologyFeatures>,
    registrations: BTreeMap<usize, Registration>,
    adjacent: BTreeMap<usize, NetInput>,
    pretrained: BTreeMap<(usize, TransformKey), Pretrained>,
    refined: BTreeMap<RefineKey, RefineEntry>,
}

impl<'a> Reconstructor<'a> {
    pub fn new(sample: &'a Sample, cfg: ReconstructConfig) -> Result<Self> {
        sample.validate()?;
        if sample.stats.is_none() {
            return Err(Error::InvalidArgument(String::from("sample must be normalized before reconstruction")));
        }
        cfg.train.validate()?;
        let backbone = cfg.train.backbone(sample.gene_count());
        backbone.validate()?;
        backbone.check_dims(sample.height(), sample.width())?;
        let grid = make_grid_mask(sample.height(), sample.width(), cfg.spacing, cfg.offset)?;
        for pos in sample.adjacent_positions() {
            if sample.sections[pos].mask != *grid.mask() {
                return Err(Error::InvalidArgument(format!(
                    "section {} is not sampled on the configured grid (spacing {}, offset {:?})",
                    sample.sections[pos].index, cfg.spacing, cfg.offset
                )));
            }
        }
        Ok(Self {
            sample,
            cfg,
            backbone,
            grid,
            loaded: BTreeMap::new(),
            registrations: BTreeMap::new(),
            adjacent: BTreeMap::new(),
            pretrained: BTreeMap::new(),
            refined: BTreeMap::new(),
        })
    }

    /// Replaces the handcrafted histology features of the listed sections
    /// (keyed by section index) with precomputed maps.
    ///
    /// A loaded central map is warped into each adjacent frame at
    /// bottleneck resolution.
    pub fn with_features(mut self, by_index: BTreeMap<usize, Tensor>) -> Result<Self> {
        for (index, map) in by_index {
            let pos = self.sample.position_of(index).ok_or(Error::MissingSections(alloc::vec![index]))?;
            let f = HistologyFeatures::loaded(map, &self.backbone, self.sample.height(), self.sample.width())?;
            self.loaded.insert(pos, f);
        }
        Ok(self)
    }

    pub fn grid(&self) -> &SamplingGrid {
        &self.grid
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.backbone
    }

    /// Central-to-adjacent registration for stack position `pos`.
    pub fn registration(&mut self, pos: usize) -> Result<&Registration> {
        if !self.registrations.contains_key(&pos) {
            let c = self.sample.central().histology.luminance();
            let a = self.sample.sections[pos].histology.luminance();
            let r = register(&c, &a, &self.cfg.registration)?;
            self.registrations.insert(pos, r);
        }
        Ok(&self.registrations[&pos])
    }

    /// The central-to-section transform: identity without alignment, the
    /// stored transform when the section carries one, else a fresh registration.
    pub fn transform_for(&mut self, pos: usize, csa: bool) -> Result<(PlanarTransform, Option<Registration>)> {
        if !csa {
            return Ok((PlanarTransform::identity(), None));
        }
        if let Some(t) = self.sample.sections[pos].transform {
            return Ok((t, None));
        }
        let r = self.registration(pos)?.clone();
        Ok((r.transform, Some(r)))
    }

    /// Network inputs of the section at stack position `pos`.
    pub fn section_input(&mut self, pos: usize) -> Result<NetInput> {
        if !self.adjacent.contains_key(&pos) {
            let s = &self.sample.sections[pos];
            let n = match self.loaded.get(&pos) {
                Some(f) => NetInput { input: model_input(&s.histology.to_tensor(), &s.expression, &s.mask)?, features: f.clone() },
                None => NetInput::for_section(s, &self.backbone)?,
            };
            self.adjacent.insert(pos, n);
        }
        Ok(self.adjacent[&pos].clone())
    }

    /// The central section warped into the frame of `transform`.
    pub fn pretrain_data(&self, transform: &PlanarTransform) -> Result<PretrainData> {
        let central = self.sample.central();
        let aligned = warp(&central.histology.to_tensor(), &central.expression, &central.mask, transform)?;
        let mut data = PretrainData::new(&aligned, &self.grid, &self.backbone)?;
        if let Some(f) = self.loaded.get(&self.sample.central_position()) {
            data.net.features = warp_features(f, transform, self.backbone.bottleneck_factor())?;
        }
        Ok(data)
    }

    fn pretrained(&mut self, pos: usize, transform: &PlanarTransform) -> Result<Pretrained> {
        let key = (pos, transform_key(transform));
        if let Some(own) = self.pretrained.get(&key) {
            return Ok(own.clone());
        }
        let index = self.sample.sections[pos].index;
        // The aligned central section depends only on the transform, so a
        // network trained for another section under the same transform is reused.
        if let Some(p) = self.pretrained.iter().find(|((_, k), _)| *k == key.1).map(|(_, p)| p.clone()) {
            let mut shared = p;
            for r in &mut shared.log {
                r.section = index;
            }
            self.pretrained.insert(key, shared.clone());
            return Ok(shared);
        }
        let data = self.pretrain_data(transform)?;
        let mut theta0 = ModelParams::init(self.backbone.clone(), self.cfg.train.seed)?;
        let mut log = Vec::new();
        pretrain_pseudo_network(&mut theta0, &data, &self.cfg.train, index, &mut log)?;
        let p = Pretrained { data, theta0, log };
        self.pretrained.insert(key, p.clone());
        Ok(p)
    }

    /// Pretrains (or fetches) the pseudo-label network for `pos` under `transform`.
    pub fn theta0(&mut self, pos: usize, transform: &PlanarTransform) -> Result<(ModelParams, Vec<LogRecord>)> {
        let p = self.pretrained(pos, transform)?;
        Ok((p.theta0, p.log))
    }

    /// Uses a previously trained pseudo-label network instead of training one.
    pub fn set_theta0(&mut self, pos: usize, transform: &PlanarTransform, theta0: ModelParams) -> Result<()> {
        if *theta0.config() != self.backbone {
            return Err(Error::InvalidArgument(format!("checkpoint config {:?} does not match {:?}", theta0.config(), self.backbone)));
        }
        let data = self.pretrain_data(transform)?;
        self.pretrained.insert((pos, transform_key(transform)), Pretrained { data, theta0, log: Vec::new() });
        Ok(())
    }

    fn refine(&mut self, pos: usize, transform: &PlanarTransform, toggles: Toggles, pre: &Pretrained, pseudo: &Tensor) -> Result<RefineEntry> {
        let key = (pos, transform_key(transform), toggles.pdl, toggles.csg);
        if let Some(e) = self.refined.get(&key) {
            return Ok(e.clone());
        }
        let adjacent = self.section_input(pos)?;
        let section = &self.sample.sections[pos];
        let confidence = if toggles.csg { Some(ConfidenceMap::build(pseudo, &section.expression, &self.grid)?) } else { None };
        let w_tilde = match &confidence {
            Some(c) => c.w_tilde.clone(),
            None => uniform_weights(self.sample.height(), self.sample.width()),
        };
        let targets = adjacent_targets(pseudo, &section.expression, &section.mask, self.cfg.train.literal_eq5)?;
        let inputs = FmdrInputs {
            central: &pre.data,
            adjacent: &adjacent,
            targets: &targets,
            w_tilde: &w_tilde,
            use_pdl: toggles.pdl,
            section: section.index,
        };
        let mut log = Vec::new();
        let refined = fmdr_refine(&pre.theta0, &inputs, &self.cfg.train, &mut log)?;
        let entry = RefineEntry { refined, confidence, log };
        self.refined.insert(key, entry.clone());
        Ok(entry)
    }

    /// Uses previously refined branches instead of training them.
    pub fn set_refined(&mut self, pos: usize, transform: &PlanarTransform, toggles: Toggles, refined: Refined) -> Result<()> {
        let pre = self.pretrained(pos, transform)?;
        verify_frozen(&pre.theta0, &refined.theta1)?;
        verify_frozen(&pre.theta0, &refined.theta2)?;
        let confidence = if toggles.csg {
            let input = self.section_input(pos)?;
            let pseudo = generate_pseudo_labels(&pre.theta0, &input)?;
            Some(ConfidenceMap::build(&pseudo, &self.sample.sections[pos].expression, &self.grid)?)
        } else {
            None
        };
        let key = (pos, transform_key(transform), toggles.pdl, toggles.csg);
        self.refined.insert(key, RefineEntry { refined, confidence, log: Vec::new() });
        Ok(())
    }

    /// Runs one toggle combination end to end.
    pub fn run(&mut self, toggles: Toggles) -> Result<Reconstruction> {
        let positions: Vec<usize> = self.sample.adjacent_positions().collect();
        let mut finals = BTreeMap::new();
        let mut pairs = Vec::with_capacity(positions.len());
        let mut log = Vec::new();
        for pos in positions {
            let index = self.sample.sections[pos].index;
            let (transform, registration) = self.transform_for(pos, toggles.csa)?;
            let pre = self.pretrained(pos, &transform)?;
            log.extend_from_slice(&pre.log);
            let adjacent = self.section_input(pos)?;
            let pseudo = generate_pseudo_labels(&pre.theta0, &adjacent)?;

            let (prediction, confidence, refined) = if toggles.fmdr {
                let entry = self.refine(pos, &transform, toggles, &pre, &pseudo)?;
                log.extend_from_slice(&entry.log);
                let pred = entry.refined.theta2.forward(&adjacent.input, &adjacent.features)?;
                (pred, entry.confidence, Some(entry.refined))
            } else {
                (pseudo.clone(), None, None)
            };
            let section = &self.sample.sections[pos];
            let (final_map, prov) = if toggles.dco {
                (dco(&prediction, &section.expression, &section.mask)?, Provenance::PredictedDco)
            } else {
                (prediction.clone(), Provenance::Predicted)
            };
            finals.insert(index, (final_map.clone(), prov));
            pairs.push(PairResult {
                index,
                transform,
                registration,
                theta0: pre.theta0,
                pseudo,
                confidence,
                refined,
                prediction,
                final_map,
            });
        }
        let volume = assemble_volume(self.sample, &finals)?;
        Ok(Reconstruction { toggles, volume, pairs, log })
    }
}

/// Scores each adjacent slice of `volume` against normalized truth maps
/// given in stack order.
pub fn evaluate_volume(
    sample: &Sample,
    volume: &VolumePrediction,
    truth: &[Tensor],
    population: Population,
) -> Result<Vec<(usize, MetricsReport)>> {
    if truth.len() != sample.sections.len() {
        return Err(Error::InvalidArgument(format!("{} truth maps for {} sections", truth.len(), sample.sections.len())));
    }
    let mut out = Vec::new();
    for pos in sample.adjacent_positions() {
        let s = &sample.sections[pos];
        out.push((s.index, evaluate(&volume.slice(pos), &truth[pos], &s.mask, population)?));
    }
    Ok(out)
}
