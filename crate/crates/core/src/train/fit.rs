use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use super::dataset::{Dataset, BACKGROUND};
use super::loss::{l1_loss, loss_branch_grad, loss_fuse_grad, psnr, ssim, LpipsStub, Perceptual};
use super::model::{frame_inputs, BranchNodes, FrameInputs, Model, ModelConfig};
use super::TrainError;
use crate::autodiff::{backward, Adam, AdamConfig, Graph, NodeId, ParamId, Tensor};
use crate::fusion::FusionMode;
use crate::rng::SeedTree;
use crate::splat::{
    rasterize, rasterize_grad, Branch, Camera, GaussianPrimitive, Image, SplatError,
};

/// Optimization schedule and loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Separate face and mouth iterations.
    pub branch_iterations: usize,
    /// Joint fine-tune iterations.
    pub joint_iterations: usize,
    /// D-SSIM weight.
    pub lambda: f64,
    /// Perceptual weight.
    pub gamma: f64,
    pub lr_network: f64,
    pub lr_planes: f64,
    pub lr_scene: f64,
    pub seed: u64,
    /// Weight of the view-consistency NLL; zero disables it.
    pub nll_weight: f64,
    /// Std of the Gaussian noise added to `f_tone`, in training and evaluation.
    pub tone_noise: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            branch_iterations: 2000,
            joint_iterations: 500,
            lambda: 0.5,
            gamma: 0.2,
            lr_network: 1e-3,
            lr_planes: 1e-2,
            lr_scene: 2e-4,
            seed: 7,
            nll_weight: 0.0,
            tone_noise: 0.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Video-scale budgets: 50k per branch, 10k joint.
    pub fn paper_scale() -> Self {
        Self {
            branch_iterations: 50_000,
            joint_iterations: 10_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda >= 0.0
            && self.gamma >= 0.0
            && self.nll_weight >= 0.0
            && self.tone_noise >= 0.0)
        {
            return Err(TrainError::Config(
                "lambda, gamma, nll_weight and tone_noise must be non-negative".into(),
            ));
        }
        if ![self.lr_network, self.lr_planes, self.lr_scene]
            .iter()
            .all(|&lr| lr > 0.0 && lr.is_finite())
        {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if self.model.members < 2 {
            return Err(TrainError::Config(
                "uncertainty blocks need at least two members".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Face and mouth trained separately against their masked targets.
    Branch,
    /// Joint fine-tune against the full frame.
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Branch => "branch",
            Stage::Joint => "joint",
        }
    }
}

/// One optimizer step's loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub stage: Stage,
    /// `None` for the joint stage.
    pub branch: Option<Branch>,
    pub frame: usize,
    pub loss: f64,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,stage,branch,frame,loss\n");
    for r in trace {
        let b = r.branch.map_or("joint", |b| b.as_str());
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            r.stage.as_str(),
            b,
            r.frame,
            r.loss
        );
    }
    out
}

/// Losses of one stage and branch, in order.
pub fn trace_losses(trace: &[TraceRow], stage: Stage, branch: Option<Branch>) -> Vec<f64> {
    trace
        .iter()
        .filter(|r| r.stage == stage && r.branch == branch)
        .map(|r| r.loss)
        .collect()
}

/// Trailing means over `window` consecutive values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() + 1 - window);
    let mut s: f64 = values[..window].iter().sum();
    out.push(s / window as f64);
    for i in window..values.len() {
        s += values[i] - values[i - window];
        out.push(s / window as f64);
    }
    out
}

/// Trained model and its per-step losses.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub trace: Vec<TraceRow>,
}

/// Objective value and parameter gradients of one step, before any update.
#[derive(Clone, Debug)]
pub struct StepGradients {
    /// Image loss plus the weighted NLL, if enabled.
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor)>,
}

impl StepGradients {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grads.iter().all(|(_, t)| t.is_finite())
    }
}

/// Loss weights shared by both stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub nll_weight: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lambda: c.lambda,
            gamma: c.gamma,
            nll_weight: c.nll_weight,
        }
    }
}

fn backprop(
    model: &Model,
    mut g: Graph,
    mut objective: NodeId,
    branches: &[&BranchNodes],
    image_loss: f64,
    w: LossWeights,
) -> Result<StepGradients, TrainError> {
    let mut loss = image_loss;
    if w.nll_weight > 0.0 {
        for n in branches {
            let nll = model.nll(&mut g, n);
            loss += w.nll_weight * g.value(nll).item();
            let s = g.scale(nll, w.nll_weight);
            objective = g.add(objective, s);
        }
    }
    let grads = backward(&g, objective)?.for_params(&g);
    Ok(StepGradients { loss, grads })
}

fn nodes_finite(g: &Graph, n: &BranchNodes) -> bool {
    [
        n.deformed.center,
        n.deformed.rotation,
        n.deformed.scale,
        n.opacity,
        n.color,
    ]
    .iter()
    .all(|&id| g.value(id).is_finite())
}

fn non_finite(g: &Graph, nodes: &[&BranchNodes]) -> bool {
    !nodes.iter().all(|n| nodes_finite(g, n))
}

/// L_D of one branch rendered alone against its masked target.
/// The shared audio projection is held constant.
pub fn branch_gradients(
    model: &Model,
    branch: Branch,
    inputs: &FrameInputs,
    target: &Image,
    cam: &Camera,
    w: LossWeights,
) -> Result<StepGradients, TrainError> {
    let mut g = Graph::new();
    let audio = model.audio_node(&mut g, inputs, false);
    let nodes = model.forward_branch(&mut g, branch, inputs, audio)?;
    if non_finite(&g, &[&nodes]) {
        return Err(SplatError::NonFinite.into());
    }
    let prims = Model::primitives(&g, &nodes);
    let img = rasterize(&prims, cam, &BACKGROUND)?;
    let loss = loss_branch_grad(&img, target, w.lambda)?;
    let pg = rasterize_grad(&prims, cam, &BACKGROUND, &loss.grad)?;
    let refs: Vec<_> = pg.iter().collect();
    let sur = Model::surrogate(&mut g, &nodes, &refs);
    backprop(model, g, sur, &[&nodes], loss.value, w)
}

/// L_F of the union render against the full frame, over every parameter.
pub fn joint_gradients(
    model: &Model,
    inputs: &FrameInputs,
    target: &Image,
    cam: &Camera,
    w: LossWeights,
    perceptual: &dyn Perceptual,
) -> Result<StepGradients, TrainError> {
    let mut g = Graph::new();
    let audio = model.audio_node(&mut g, inputs, true);
    let face = model.forward_branch(&mut g, Branch::Face, inputs, audio)?;
    let mouth = model.forward_branch(&mut g, Branch::Mouth, inputs, audio)?;
    if non_finite(&g, &[&face, &mouth]) {
        return Err(SplatError::NonFinite.into());
    }
    let prims = assemble(model, &g, &face, &mouth);
    let img = rasterize(&prims, cam, &BACKGROUND)?;
    let loss = loss_fuse_grad(&img, target, w.lambda, w.gamma, perceptual)?;
    let pg = rasterize_grad(&prims, cam, &BACKGROUND, &loss.grad)?;
    let fr: Vec<_> = model.face.indices.iter().map(|&i| &pg[i]).collect();
    let mr: Vec<_> = model.mouth.indices.iter().map(|&i| &pg[i]).collect();
    let sf = Model::surrogate(&mut g, &face, &fr);
    let sm = Model::surrogate(&mut g, &mouth, &mr);
    let sur = g.add(sf, sm);
    backprop(model, g, sur, &[&face, &mouth], loss.value, w)
}

/// Any non-finite value on the way to an update counts as divergence.
fn guarded(
    result: Result<StepGradients, TrainError>,
    stage: Stage,
    iteration: usize,
) -> Result<StepGradients, TrainError> {
    let diverged = TrainError::Diverged {
        stage: stage.as_str(),
        iteration,
    };
    match result {
        Ok(s) if s.is_finite() => Ok(s),
        Ok(_) | Err(TrainError::Splat(SplatError::NonFinite)) => Err(diverged),
        Err(e) => Err(e),
    }
}

struct Optimizers(Vec<Adam>);

impl Optimizers {
    fn new(model: &Model, groups: [(Vec<ParamId>, f64); 3]) -> Self {
        Optimizers(
            groups
                .into_iter()
                .filter(|(ids, _)| !ids.is_empty())
                .map(|(ids, lr)| Adam::new(&model.store, ids, AdamConfig::with_lr(lr)))
                .collect(),
        )
    }

    fn step(&mut self, model: &mut Model, grads: &[(ParamId, Tensor)]) -> Result<(), TrainError> {
        for a in &mut self.0 {
            a.step(&mut model.store, grads)?;
        }
        Ok(())
    }
}

/// Both branches' deformed primitives in scene order.
fn assemble(
    model: &Model,
    g: &Graph,
    face: &BranchNodes,
    mouth: &BranchNodes,
) -> Vec<GaussianPrimitive> {
    let mut slots: Vec<Option<GaussianPrimitive>> = vec![None; model.primitives];
    for (bm, nodes) in [(&model.face, face), (&model.mouth, mouth)] {
        for (k, p) in Model::primitives(g, nodes).into_iter().enumerate() {
            slots[bm.indices[k]] = Some(p);
        }
    }
    slots
        .into_iter()
        .map(|p| p.expect("every primitive belongs to a branch"))
        .collect()
}

/// Fresh model for `ds` under `cfg`.
pub fn init_model(ds: &Dataset, cfg: &TrainConfig) -> Result<Model, TrainError> {
    Model::new(
        &cfg.model,
        &ds.scene,
        ds.audio.sample_rate,
        &SeedTree::new(cfg.seed),
    )
}

/// Conditioning inputs for every frame under `cfg` (including any tone corruption).
pub fn inputs_for(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<FrameInputs>, TrainError> {
    frame_inputs(ds, &cfg.model, cfg.tone_noise, &SeedTree::new(cfg.seed))
}

/// Two-stage schedule from a fresh model.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    train_with(ds, cfg, &LpipsStub)
}

pub fn train_with(
    ds: &Dataset,
    cfg: &TrainConfig,
    perceptual: &dyn Perceptual,
) -> Result<TrainOutput, TrainError> {
    let mut model = init_model(ds, cfg)?;
    let inputs = inputs_for(ds, cfg)?;
    let trace = train_model(&mut model, ds, &inputs, cfg, perceptual)?;
    Ok(TrainOutput { model, trace })
}

/// Runs stage A (face and mouth separately, each with its own optimizers)
/// and stage B (joint) on `model` in place.
pub fn train_model(
    model: &mut Model,
    ds: &Dataset,
    inputs: &[FrameInputs],
    cfg: &TrainConfig,
    perceptual: &dyn Perceptual,
) -> Result<Vec<TraceRow>, TrainError> {
    cfg.validate()?;
    let train_frames: Vec<usize> = ds.harness.train_frames().collect();
    if train_frames.is_empty() {
        return Err(TrainError::Empty);
    }
    if inputs.len() != ds.frames() {
        return Err(TrainError::Dim(format!(
            "{} input frames for {} dataset frames",
            inputs.len(),
            ds.frames()
        )));
    }
    let mut order = train_frames.clone();
    order.shuffle(&mut SeedTree::new(cfg.seed).stream("frame_order"));
    let cam = ds.camera()?;
    let w = LossWeights::from(cfg);
    let mut trace = Vec::with_capacity(2 * cfg.branch_iterations + cfg.joint_iterations);

    let mut face_opt = Optimizers::new(
        model,
        [
            (model.face.network_params(), cfg.lr_network),
            (model.face.plane_params(), cfg.lr_planes),
            (model.face.scene.params(), cfg.lr_scene),
        ],
    );
    let mut mouth_opt = Optimizers::new(
        model,
        [
            (model.mouth.network_params(), cfg.lr_network),
            (Vec::new(), cfg.lr_planes),
            (model.mouth.scene.params(), cfg.lr_scene),
        ],
    );
    for it in 0..cfg.branch_iterations {
        let f = order[it % order.len()];
        for (branch, opt) in [
            (Branch::Face, &mut face_opt),
            (Branch::Mouth, &mut mouth_opt),
        ] {
            let target = ds.ground_truth(Some(branch), f);
            let step = guarded(
                branch_gradients(model, branch, &inputs[f], target, &cam, w),
                Stage::Branch,
                it,
            )?;
            opt.step(model, &step.grads)?;
            let loss = step.loss;
            trace.push(TraceRow {
                iteration: it,
                stage: Stage::Branch,
                branch: Some(branch),
                frame: f,
                loss,
            });
        }
    }

    let mut net = model.face.network_params();
    net.extend(model.mouth.network_params());
    net.extend(model.audio_proj.params());
    let mut scene = model.face.scene.params();
    scene.extend(model.mouth.scene.params());
    let mut joint_opt = Optimizers::new(
        model,
        [
            (net, cfg.lr_network),
            (model.face.plane_params(), cfg.lr_planes),
            (scene, cfg.lr_scene),
        ],
    );
    for k in 0..cfg.joint_iterations {
        let it = cfg.branch_iterations + k;
        let f = order[it % order.len()];
        let target = ds.ground_truth(None, f);
        let step = guarded(
            joint_gradients(model, &inputs[f], target, &cam, w, perceptual),
            Stage::Joint,
            it,
        )?;
        joint_opt.step(model, &step.grads)?;
        let loss = step.loss;
        trace.push(TraceRow {
            iteration: it,
            stage: Stage::Joint,
            branch: None,
            frame: f,
            loss,
        });
    }
    Ok(trace)
}

/// Joint render of one frame.
pub fn render_frame(
    model: &Model,
    inputs: &FrameInputs,
    cam: &Camera,
) -> Result<Image, TrainError> {
    let mut g = Graph::new();
    let audio = model.audio_node(&mut g, inputs, false);
    let face = model.forward_branch(&mut g, Branch::Face, inputs, audio)?;
    let mouth = model.forward_branch(&mut g, Branch::Mouth, inputs, audio)?;
    let prims = assemble(model, &g, &face, &mouth);
    Ok(rasterize(&prims, cam, &BACKGROUND)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

/// Per-frame and mean image metrics against the full ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

impl EvalReport {
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Result<Self, TrainError> {
        if frames.is_empty() {
            return Err(TrainError::Empty);
        }
        let n = frames.len() as f64;
        let mean = |f: &dyn Fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
        let (p, s, l) = (mean(&|m| m.psnr), mean(&|m| m.ssim), mean(&|m| m.l1));
        Ok(Self {
            frames,
            psnr: p,
            ssim: s,
            l1: l,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("frame psnr ssim l1\n");
        for m in &self.frames {
            let _ = writeln!(out, "{} {:.6} {:.6} {:.6}", m.frame, m.psnr, m.ssim, m.l1);
        }
        let _ = writeln!(out, "mean {:.6} {:.6} {:.6}", self.psnr, self.ssim, self.l1);
        out
    }
}

/// Renders and scores `frames`.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    inputs: &[FrameInputs],
    frames: &[usize],
) -> Result<EvalReport, TrainError> {
    if frames.is_empty() {
        return Err(TrainError::Empty);
    }
    let cam = ds.camera()?;
    let metrics = frames
        .iter()
        .map(|&f| {
            let img = render_frame(model, &inputs[f], &cam)?;
            let gt = ds.ground_truth(None, f);
            Ok(FrameMetrics {
                frame: f,
                psnr: psnr(&img, gt)?,
                ssim: ssim(&img, gt)?,
                l1: l1_loss(&img, gt)?,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    EvalReport::from_frames(metrics)
}

/// Writes `trace.csv`.
pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<(), TrainError> {
    std::fs::write(path, trace_csv(trace))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: FusionMode,
    pub report: EvalReport,
}

/// Held-out metrics of the same schedule under both fusion modes.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub tone_noise: f64,
    pub seed: u64,
    /// Uncertainty first, then uniform.
    pub rows: [AblationRow; 2],
}

impl AblationReport {
    /// Uncertainty minus uniform PSNR.
    pub fn psnr_gain(&self) -> f64 {
        self.rows[0].report.psnr - self.rows[1].report.psnr
    }

    pub fn ssim_gain(&self) -> f64 {
        self.rows[0].report.ssim - self.rows[1].report.ssim
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("mode psnr ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{} {:.6} {:.6}",
                r.mode.as_str(),
                r.report.psnr,
                r.report.ssim
            );
        }
        let _ = writeln!(
            out,
            "# seed {} tone_noise {} psnr_gain {:.6} ssim_gain {:.6}",
            self.seed,
            self.tone_noise,
            self.psnr_gain(),
            self.ssim_gain()
        );
        out
    }
}

/// Trains with uncertainty fusion and with uniform fusion from the same seed
/// and budget and scores both on the held-out frames.
pub fn ablate_fusion(ds: &Dataset, cfg: &TrainConfig) -> Result<AblationReport, TrainError> {
    let heldout: Vec<usize> = ds.harness.heldout_frames().collect();
    let run = |mode: FusionMode| -> Result<AblationRow, TrainError> {
        let mut c = cfg.clone();
        c.model.fusion = mode;
        let out = train(ds, &c)?;
        let inputs = inputs_for(ds, &c)?;
        Ok(AblationRow {
            mode,
            report: evaluate(&out.model, ds, &inputs, &heldout)?,
        })
    };
    Ok(AblationReport {
        tone_noise: cfg.tone_noise,
        seed: cfg.seed,
        rows: [run(FusionMode::Uncertainty)?, run(FusionMode::Uniform)?],
    })
}
