use rand::Rng;

use super::{FeatureError, FrameFeatures};
use crate::autodiff::{
    glorot_uniform, Activation, Axis, Graph, Linear, MlpBlock, NodeId, ParamId, ParamStore,
};

/// Spectrogram and MFCC encoders whose summed outputs key a softmax over
/// frames; the weights pool the wav-window embeddings.
#[derive(Clone, Debug)]
pub struct EmotionAttention {
    pub enc_spec: MlpBlock,
    pub enc_mfcc: MlpBlock,
    /// `1 × key_dim`.
    pub query: ParamId,
    /// Raw frame → wav embedding.
    pub wav: Linear,
    /// Pooled embedding → `f_emo_attn`.
    pub proj: Linear,
    pub key_dim: usize,
}

impl EmotionAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec_bins: usize,
        n_mfcc: usize,
        frame_len: usize,
        key_dim: usize,
        wav_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let enc_spec = MlpBlock::new(
            store,
            &format!("{name}.enc_spec"),
            &[spec_bins, 64, key_dim],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        let enc_mfcc = MlpBlock::new(
            store,
            &format!("{name}.enc_mfcc"),
            &[n_mfcc, 32, key_dim],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        let query = store.add(format!("{name}.query"), glorot_uniform(1, key_dim, rng));
        let wav = Linear::new(store, &format!("{name}.wav"), frame_len, wav_dim, rng);
        let proj = Linear::new(store, &format!("{name}.proj"), wav_dim, out_dim, rng);
        Self {
            enc_spec,
            enc_mfcc,
            query,
            wav,
            proj,
            key_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.proj.out_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.enc_spec.params();
        p.extend(self.enc_mfcc.params());
        p.push(self.query);
        p.extend(self.wav.params());
        p.extend(self.proj.params());
        p
    }
}

pub struct AttentionOutput {
    /// `1 × out_dim`.
    pub feature: NodeId,
    /// `frames × 1`, summing to one.
    pub weights: NodeId,
    /// `frames × key_dim`.
    pub keys: NodeId,
}

/// `f_emo_attn = proj(Σ_t w_t · wav(frame_t))` with
/// `w = softmax_t(key_t · query / sqrt(key_dim))`.
pub fn attn_reweight(
    g: &mut Graph,
    store: &ParamStore,
    att: &EmotionAttention,
    frames: &FrameFeatures,
) -> Result<AttentionOutput, FeatureError> {
    if frames.frames() == 0 {
        return Err(FeatureError::Dim("attention over zero frames".into()));
    }
    let checks = [
        (
            "spectrogram",
            frames.spectrogram.cols(),
            att.enc_spec.in_dim(),
        ),
        ("mfcc", frames.mfcc.cols(), att.enc_mfcc.in_dim()),
        ("raw window", frames.windows.cols(), att.wav.in_dim),
        ("spectrogram key", att.enc_spec.out_dim(), att.key_dim),
        ("mfcc key", att.enc_mfcc.out_dim(), att.key_dim),
        ("query", store.get(att.query).cols(), att.key_dim),
    ];
    for (what, got, want) in checks {
        if got != want {
            return Err(FeatureError::Dim(format!("{what}: {got} vs {want}")));
        }
    }
    let spec = g.constant(frames.spectrogram.clone());
    let mfcc = g.constant(frames.mfcc.clone());
    let raw = g.constant(frames.windows.clone());
    let ks = att.enc_spec.forward(g, store, spec);
    let km = att.enc_mfcc.forward(g, store, mfcc);
    let keys = g.add(ks, km);
    let q = g.param(store, att.query);
    let qt = g.transpose(q);
    let logits = g.matmul(keys, qt);
    let logits = g.scale(logits, 1.0 / (att.key_dim as f64).sqrt());
    let weights = g.softmax(logits, Axis::Rows);
    let emb = att.wav.forward(g, store, raw);
    let wt = g.transpose(weights);
    let pooled = g.matmul(wt, emb);
    let feature = att.proj.forward(g, store, pooled);
    Ok(AttentionOutput {
        feature,
        weights,
        keys,
    })
}
