use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use super::dataset::Dataset;
use super::TrainError;
use crate::autodiff::{Graph, Linear, NodeId, ParamId, ParamStore, Tensor};
use crate::deform::{apply_delta_nodes, DeformDecoder, DeformedNodes, HeadInit};
use crate::features::{
    attn_reweight, encode_emotion, extract_frames, mfcc_window, DspConfig, EmotionAttention,
    EmotionTaps, FeaturePlanes, FrameFeatures, ViewDims, ViewKind,
};
use crate::fusion::{consistency_nll, fuse_pipeline, FusionMode, PipelineNodes, UncertaintyBlock};
use crate::rng::SeedTree;
use crate::splat::{Branch, GaussianPrimitive, PrimitiveGrad, Scene};

/// Architecture and conditioning knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub members: usize,
    pub hidden: usize,
    /// Octaves of the sinusoidal primitive state.
    pub fourier_bands: usize,
    pub dims: ViewDims,
    /// MFCC rows behind `f_audio`.
    pub audio_window: usize,
    /// MFCC frames the emotion attention looks at.
    pub emotion_window: usize,
    pub key_dim: usize,
    pub wav_dim: usize,
    pub base_res: usize,
    pub scales: Vec<usize>,
    pub code_dim: usize,
    pub plane_spread: f64,
    pub fusion: FusionMode,
    pub head_init: HeadInit,
    pub dsp: DspConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            state_dim: 32,
            members: crate::fusion::DEFAULT_MEMBERS,
            hidden: 64,
            fourier_bands: 2,
            dims: ViewDims::default(),
            audio_window: 8,
            emotion_window: 16,
            key_dim: 16,
            wav_dim: 32,
            base_res: 64,
            scales: vec![1, 2, 4],
            code_dim: 16,
            plane_spread: 0.1,
            fusion: FusionMode::Uncertainty,
            head_init: HeadInit::Zero,
            dsp: DspConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn state_input_dim(&self) -> usize {
        3 + 6 * self.fourier_bands
    }
}

/// Per-frame conditioning, ready to enter a graph.
#[derive(Clone, Debug)]
pub struct FrameInputs {
    pub f_exp: Tensor,
    pub f_tone: Tensor,
    /// Flattened MFCC window feeding the shared audio projection.
    pub mfcc: Tensor,
    /// Standardized DSP frames around this video frame.
    pub emotion: FrameFeatures,
}

/// Builds every frame's inputs. With `tone_noise > 0` each frame's `f_tone`
/// gets independent `N(0, tone_noise²)` noise from `seed`.
pub fn frame_inputs(
    ds: &Dataset,
    cfg: &ModelConfig,
    tone_noise: f64,
    seed: &SeedTree,
) -> Result<Vec<FrameInputs>, TrainError> {
    let frames = extract_frames(&ds.audio, &cfg.dsp)?.standardized();
    let rate = ds.audio.sample_rate as f64 / frames.hop as f64 / ds.harness.fps;
    let noise = seed.child("tone_noise");
    (0..ds.frames())
        .map(|f| {
            let center = ((f as f64 * rate).round() as usize).min(frames.frames() - 1);
            let mut tone = ds.f_tone[f].clone();
            if tone_noise > 0.0 {
                let mut rng = noise.stream(&f.to_string());
                for v in &mut tone {
                    *v += tone_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Ok(FrameInputs {
                f_exp: Tensor::row(&ds.f_exp[f]),
                f_tone: Tensor::row(&tone),
                mfcc: Tensor::row(&mfcc_window(&frames.mfcc, center, cfg.audio_window)),
                emotion: frames.window(
                    center as isize - (cfg.emotion_window / 2) as isize,
                    cfg.emotion_window,
                ),
            })
        })
        .collect()
}

/// Learnable canonical geometry and appearance of one branch's primitives.
#[derive(Clone, Debug)]
pub struct SceneParams {
    pub center: ParamId,
    pub rotation: ParamId,
    pub log_scale: ParamId,
    pub opacity_logit: ParamId,
    pub color_logit: ParamId,
}

impl SceneParams {
    fn new(store: &mut ParamStore, name: &str, prims: &[GaussianPrimitive]) -> Self {
        let n = prims.len();
        let z = prims[0].color.len();
        let logit = |v: f64| {
            let v = v.clamp(1e-4, 1.0 - 1e-4);
            (v / (1.0 - v)).ln()
        };
        let stack = |cols: usize, f: &dyn Fn(&GaussianPrimitive) -> Vec<f64>| {
            Tensor::matrix(n, cols, prims.iter().flat_map(f).collect())
        };
        Self {
            center: store.add(
                format!("{name}.center"),
                stack(3, &|p| p.center.as_slice().to_vec()),
            ),
            rotation: store.add(
                format!("{name}.rotation"),
                stack(4, &|p| p.rotation.as_slice().to_vec()),
            ),
            log_scale: store.add(
                format!("{name}.log_scale"),
                stack(3, &|p| p.scale.iter().map(|s| s.ln()).collect()),
            ),
            opacity_logit: store.add(
                format!("{name}.opacity_logit"),
                stack(1, &|p| vec![logit(p.opacity)]),
            ),
            color_logit: store.add(
                format!("{name}.color_logit"),
                stack(z, &|p| p.color.iter().map(|&c| logit(c)).collect()),
            ),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.center,
            self.rotation,
            self.log_scale,
            self.opacity_logit,
            self.color_logit,
        ]
    }
}

/// Attention over audio frames plus the tri-plane codebook (face branch only).
#[derive(Clone, Debug)]
pub struct EmotionModule {
    pub attention: EmotionAttention,
    pub planes: FeaturePlanes,
    pub scale_proj: Vec<Linear>,
    pub taps: EmotionTaps,
}

impl EmotionModule {
    pub fn network_params(&self) -> Vec<ParamId> {
        let mut p = self.attention.params();
        p.extend(self.scale_proj.iter().flat_map(|l| l.params()));
        p
    }
}

#[derive(Clone, Debug)]
pub struct BranchModel {
    pub branch: Branch,
    /// Scene indices of this branch's primitives, in scene order.
    pub indices: Vec<usize>,
    /// `n × state_input_dim` sinusoidal code of each canonical center.
    pub state: Tensor,
    pub blocks: Vec<UncertaintyBlock>,
    pub decoder: DeformDecoder,
    pub scene: SceneParams,
    pub emotion: Option<EmotionModule>,
}

impl BranchModel {
    /// Everything trained at the network learning rate.
    pub fn network_params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.extend(self.decoder.params());
        if let Some(e) = &self.emotion {
            p.extend(e.network_params());
        }
        p
    }

    pub fn plane_params(&self) -> Vec<ParamId> {
        self.emotion
            .as_ref()
            .map(|e| e.planes.params())
            .unwrap_or_default()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.network_params();
        p.extend(self.plane_params());
        p.extend(self.scene.params());
        p
    }
}

/// Sinusoidal code `[p, sin(2^k π p), cos(2^k π p)]` of a position in `[0, 1]³`.
pub fn fourier_state(p: &Vector3<f64>, bands: usize) -> Vec<f64> {
    let mut v = p.as_slice().to_vec();
    for k in 0..bands {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        v.extend(p.iter().map(|x| (w * x).sin()));
        v.extend(p.iter().map(|x| (w * x).cos()));
    }
    v
}

/// Canonical centers mapped to the unit cube by the scene bounding box.
pub fn normalized_positions(scene: &Scene) -> Vec<Vector3<f64>> {
    let (lo, hi) = scene.bounds();
    let ext = (hi - lo).map(|e| if e > 0.0 { e } else { 1.0 });
    scene
        .primitives()
        .iter()
        .map(|p| (p.center - lo).component_div(&ext))
        .collect()
}

/// Both branches, the shared audio projection and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// MFCC window → `f_audio`, shared by both branches.
    pub audio_proj: Linear,
    pub face: BranchModel,
    pub mouth: BranchModel,
    pub primitives: usize,
}

/// Graph nodes of one branch for one frame.
#[derive(Clone, Debug)]
pub struct BranchNodes {
    pub deformed: DeformedNodes,
    /// `n × 1`.
    pub opacity: NodeId,
    /// `n × Z`.
    pub color: NodeId,
    pub pipeline: PipelineNodes,
    /// Rows whose rotation fell back to identity.
    pub fallback: Vec<usize>,
}

impl Model {
    /// Fresh model around a canonical scene; the DSP layout fixes encoder widths.
    pub fn new(
        config: &ModelConfig,
        scene: &Scene,
        sample_rate: u32,
        seed: &SeedTree,
    ) -> Result<Model, TrainError> {
        if scene.indices_of(Branch::Face).is_empty() || scene.indices_of(Branch::Mouth).is_empty() {
            return Err(TrainError::Config(
                "the scene needs face and mouth primitives".into(),
            ));
        }
        let mut store = ParamStore::new();
        let tree = seed.child("model");
        let d = &config.dims;
        let audio_proj = Linear::new(
            &mut store,
            "audio_proj",
            config.audio_window * config.dsp.n_mfcc,
            d.audio,
            &mut tree.stream("audio_proj"),
        );
        let positions = normalized_positions(scene);
        let s_in = config.state_input_dim();
        let build = |branch: Branch, store: &mut ParamStore| -> Result<BranchModel, TrainError> {
            let name = branch.as_str();
            let bt = tree.child(name);
            let indices = scene.indices_of(branch);
            let state = Tensor::matrix(
                indices.len(),
                s_in,
                indices
                    .iter()
                    .flat_map(|&i| fourier_state(&positions[i], config.fourier_bands))
                    .collect(),
            );
            let mut views = vec![
                (ViewKind::Audio, d.audio),
                (ViewKind::Exp, d.exp),
                (ViewKind::Tone, d.tone),
            ];
            let emotion = if branch == Branch::Face {
                let mut rng = bt.stream("emotion");
                let attention = EmotionAttention::new(
                    store,
                    &format!("{name}.attention"),
                    config.dsp.fft_len(sample_rate) / 2 + 1,
                    config.dsp.n_mfcc,
                    config.dsp.frame_len(sample_rate),
                    config.key_dim,
                    config.wav_dim,
                    d.emo_attn,
                    &mut rng,
                );
                let planes = FeaturePlanes::new(
                    store,
                    &format!("{name}.planes"),
                    config.base_res,
                    &config.scales,
                    config.code_dim,
                    config.plane_spread,
                    &mut bt.stream("planes"),
                );
                let scale_proj = config
                    .scales
                    .iter()
                    .map(|s| {
                        Linear::new(
                            store,
                            &format!("{name}.emo_proj{s}"),
                            d.emo_attn,
                            config.code_dim,
                            &mut rng,
                        )
                    })
                    .collect();
                let pos: Vec<Vector3<f64>> = indices.iter().map(|&i| positions[i]).collect();
                let taps = EmotionTaps::new(&planes, &pos);
                views.push((ViewKind::Emotion, planes.out_dim()));
                Some(EmotionModule {
                    attention,
                    planes,
                    scale_proj,
                    taps,
                })
            } else {
                None
            };
            let blocks = views
                .iter()
                .map(|&(view, fdim)| {
                    let state_dim = (view != ViewKind::Emotion).then_some(s_in);
                    UncertaintyBlock::new(
                        store,
                        &format!("{name}.{}", view.name()),
                        view,
                        state_dim,
                        fdim,
                        &[config.hidden, config.hidden],
                        config.state_dim,
                        config.members,
                        &bt.child(view.name()),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            let decoder = DeformDecoder::new(
                store,
                &format!("{name}.decoder"),
                branch,
                config.state_dim,
                config.head_init,
                &mut bt.stream("decoder"),
            );
            let prims: Vec<GaussianPrimitive> = indices
                .iter()
                .map(|&i| scene.primitives()[i].clone())
                .collect();
            let scene_params = SceneParams::new(store, &format!("{name}.scene"), &prims);
            Ok(BranchModel {
                branch,
                indices,
                state,
                blocks,
                decoder,
                scene: scene_params,
                emotion,
            })
        };
        let face = build(Branch::Face, &mut store)?;
        let mouth = build(Branch::Mouth, &mut store)?;
        Ok(Model {
            config: config.clone(),
            store,
            audio_proj,
            face,
            mouth,
            primitives: scene.len(),
        })
    }

    pub fn branch(&self, b: Branch) -> &BranchModel {
        match b {
            Branch::Face => &self.face,
            Branch::Mouth => &self.mouth,
        }
    }

    /// `f_audio` for a frame: a trainable node, or a constant when the shared
    /// projection is frozen.
    pub fn audio_node(&self, g: &mut Graph, inputs: &FrameInputs, trainable: bool) -> NodeId {
        if trainable {
            let x = g.constant(inputs.mfcc.clone());
            self.audio_proj.forward(g, &self.store, x)
        } else {
            g.constant(Tensor::row(
                &self.audio_proj.apply_row(&self.store, inputs.mfcc.data()),
            ))
        }
    }

    /// Conditioning, fusion, decoding and deformation of one branch.
    pub fn forward_branch(
        &self,
        g: &mut Graph,
        branch: Branch,
        inputs: &FrameInputs,
        audio: NodeId,
    ) -> Result<BranchNodes, TrainError> {
        let bm = self.branch(branch);
        let store = &self.store;
        let state = g.constant(bm.state.clone());
        let mut features = vec![
            (ViewKind::Audio, audio),
            (ViewKind::Exp, g.constant(inputs.f_exp.clone())),
            (ViewKind::Tone, g.constant(inputs.f_tone.clone())),
        ];
        if let Some(e) = &bm.emotion {
            let att = attn_reweight(g, store, &e.attention, &inputs.emotion)?;
            let f = encode_emotion(g, store, &e.planes, &e.taps, att.feature, &e.scale_proj)?;
            features.push((ViewKind::Emotion, f));
        }
        let pipeline = fuse_pipeline(g, store, &bm.blocks, state, &features, self.config.fusion)?;
        let delta = bm.decoder.forward(g, store, pipeline.fused.mean)?;
        let sp = &bm.scene;
        let center = g.param(store, sp.center);
        let rotation = g.param(store, sp.rotation);
        let log_scale = g.param(store, sp.log_scale);
        let (deformed, fallback) = apply_delta_nodes(g, center, rotation, log_scale, &delta)?;
        let ol = g.param(store, sp.opacity_logit);
        let opacity = g.sigmoid(ol);
        let cl = g.param(store, sp.color_logit);
        let color = g.sigmoid(cl);
        Ok(BranchNodes {
            deformed,
            opacity,
            color,
            pipeline,
            fallback,
        })
    }

    /// Optional regularizer tying each view to the fused mean.
    pub fn nll(&self, g: &mut Graph, nodes: &BranchNodes) -> NodeId {
        consistency_nll(g, &nodes.pipeline)
    }

    /// Renderable primitives from a branch's node values.
    pub fn primitives(g: &Graph, nodes: &BranchNodes) -> Vec<GaussianPrimitive> {
        let (c, r, s) = (
            g.value(nodes.deformed.center),
            g.value(nodes.deformed.rotation),
            g.value(nodes.deformed.scale),
        );
        let (o, col) = (g.value(nodes.opacity), g.value(nodes.color));
        (0..c.rows())
            .map(|i| {
                GaussianPrimitive::new(
                    Vector3::from_column_slice(c.row_slice(i)),
                    Vector3::from_column_slice(s.row_slice(i)),
                    Vector4::from_column_slice(r.row_slice(i)),
                    o.row_slice(i)[0],
                    col.row_slice(i).to_vec(),
                )
            })
            .collect()
    }

    /// `Σ node ⊙ dL/dnode` over a branch's render inputs; its gradient with
    /// respect to every parameter equals that of the image loss.
    pub fn surrogate(g: &mut Graph, nodes: &BranchNodes, grads: &[&PrimitiveGrad]) -> NodeId {
        let n = grads.len();
        let z = grads.first().map_or(0, |p| p.color.len());
        let stack = |cols: usize, f: &dyn Fn(&PrimitiveGrad) -> Vec<f64>| {
            Tensor::matrix(n, cols, grads.iter().flat_map(|p| f(p)).collect())
        };
        let parts = [
            (
                nodes.deformed.center,
                stack(3, &|p| p.center.as_slice().to_vec()),
            ),
            (
                nodes.deformed.rotation,
                stack(4, &|p| p.rotation.as_slice().to_vec()),
            ),
            (
                nodes.deformed.scale,
                stack(3, &|p| p.scale.as_slice().to_vec()),
            ),
            (nodes.opacity, stack(1, &|p| vec![p.opacity])),
            (nodes.color, stack(z, &|p| p.color.clone())),
        ];
        let mut total = None;
        for (node, grad) in parts {
            let c = g.constant(grad);
            let m = g.mul(node, c);
            let s = g.sum(m);
            total = Some(total.map_or(s, |t| g.add(t, s)));
        }
        total.expect("five parts")
    }

    /// Parameters in creation order.
    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Writes every parameter as `name, shape, little-endian f64 data`.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for id in self.store.ids() {
            let name = self.store.name(id).as_bytes();
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name);
            let t = self.store.get(id);
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    /// Overwrites parameters from a checkpoint; names and shapes must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<(), TrainError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| TrainError::Missing(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let bad = |m: &str| TrainError::Format(format!("checkpoint {}: {m}", path.display()));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], TrainError> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize;
        let count = u64_at(take(8)?);
        if count != self.store.len() {
            return Err(bad(&format!(
                "{count} parameters, model has {}",
                self.store.len()
            )));
        }
        let mut loaded = Vec::with_capacity(count);
        for id in self.store.ids() {
            let len = u64_at(take(8)?);
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("bad name"))?;
            if name != self.store.name(id) {
                return Err(bad(&format!(
                    "found {name}, expected {}",
                    self.store.name(id)
                )));
            }
            let rank = u64_at(take(8)?);
            let shape = (0..rank)
                .map(|_| Ok(u64_at(take(8)?)))
                .collect::<Result<Vec<_>, TrainError>>()?;
            if shape != self.store.get(id).shape() {
                return Err(bad(&format!("{name} has shape {shape:?}")));
            }
            let n: usize = shape.iter().product();
            let data: Vec<f64> = take(8 * n)?
                .chunks(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            loaded.push((
                id,
                Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?,
            ));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        for (id, t) in loaded {
            self.store.set(id, t);
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"UASPCKPT";
