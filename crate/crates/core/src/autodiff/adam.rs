use thiserror::Error;

use super::{ParamId, ParamStore, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum AdamError {
    #[error("expected {expected} parameter/gradient pairs, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error(
        "slot {slot}: parameter shape {param:?}, gradient shape {grad:?}, moment shape {moment:?}"
    )]
    ShapeMismatch {
        slot: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
        moment: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// One bias-corrected Adam update of every `params[i]` by `grads[i]`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
) -> Result<(), AdamError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AdamError::CountMismatch {
            expected: state.m.len(),
            actual: params.len().min(grads.len()),
        });
    }
    for (slot, (p, g)) in params.iter().zip(grads).enumerate() {
        check_slot(slot, p, g, &state.m[slot])?;
    }
    state.step += 1;
    let (c1, c2) = corrections(&state.config, state.step);
    for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        update(
            &state.config,
            c1,
            c2,
            p,
            g,
            &mut state.m[slot],
            &mut state.v[slot],
        );
    }
    Ok(())
}

fn check_slot(slot: usize, p: &Tensor, g: &Tensor, m: &Tensor) -> Result<(), AdamError> {
    if p.shape() != g.shape() && p.dims2() != g.dims2() || p.len() != m.len() {
        return Err(AdamError::ShapeMismatch {
            slot,
            param: p.shape().to_vec(),
            grad: g.shape().to_vec(),
            moment: m.shape().to_vec(),
        });
    }
    Ok(())
}

fn corrections(cfg: &AdamConfig, step: u64) -> (f64, f64) {
    let t = step as i32;
    (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t))
}

fn update(
    cfg: &AdamConfig,
    c1: f64,
    c2: f64,
    p: &mut Tensor,
    g: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (((pi, &gi), mi), vi) in p
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = b1 * *mi + (1.0 - b1) * gi;
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam over a fixed group of parameters living in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub ids: Vec<ParamId>,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, config: AdamConfig) -> Self {
        let shapes: Vec<&[usize]> = ids.iter().map(|&id| store.get(id).shape()).collect();
        let state = AdamState::new(config, &shapes);
        Self { ids, state }
    }

    /// Applies one update; parameters without an entry in `grads` see a zero gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
    ) -> Result<(), AdamError> {
        let mut slot_grads: Vec<Option<&Tensor>> = vec![None; self.ids.len()];
        for (id, g) in grads {
            if let Some(slot) = self.ids.iter().position(|x| x == id) {
                slot_grads[slot] = Some(g);
            }
        }
        for (slot, &id) in self.ids.iter().enumerate() {
            if let Some(g) = slot_grads[slot] {
                check_slot(slot, store.get(id), g, &self.state.m[slot])?;
            }
        }
        self.state.step += 1;
        let (c1, c2) = corrections(&self.state.config, self.state.step);
        for (slot, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id);
            match slot_grads[slot] {
                Some(g) => update(
                    &self.state.config,
                    c1,
                    c2,
                    p,
                    g,
                    &mut self.state.m[slot],
                    &mut self.state.v[slot],
                ),
                None => {
                    let zero = Tensor::zeros(p.shape());
                    update(
                        &self.state.config,
                        c1,
                        c2,
                        p,
                        &zero,
                        &mut self.state.m[slot],
                        &mut self.state.v[slot],
                    );
                }
            }
        }
        Ok(())
    }
}
