use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: true,
        }
    }
}

/// Moment buffers for every trainable tensor of a store.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            step: 0,
            moments: store
                .iter()
                .map(|(_, _, t)| t.requires_grad().then(|| (vec![0.0; t.numel()], vec![0.0; t.numel()])))
                .collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn tracks(&self, id: ParamId) -> bool {
        self.moments.get(id.index()).is_some_and(Option::is_some)
    }
}

/// One Adam update of every trainable tensor from its accumulated
/// gradient. Gradients are checked for finiteness before anything moves.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, cfg: &AdamConfig) -> Result<()> {
    if state.moments.len() != store.len() {
        return Err(Error::Contract("optimizer state belongs to another store".into()));
    }
    for (id, name, t) in store.iter() {
        if let Some(g) = t.grad() {
            if !state.tracks(id) {
                return Err(Error::Contract(format!("`{name}` became trainable after the optimizer was built")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient in `{name}`")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let Some((m, v)) = state.moments[id.index()].as_mut() else { continue };
        let tensor = store.get_mut(id);
        if !tensor.requires_grad() {
            continue;
        }
        let grad: Vec<f32> = tensor.grad().expect("trainable tensor has a grad").to_vec();
        let data = tensor.data_mut();
        for k in 0..data.len() {
            let w = data[k] as f64;
            let mut g = grad[k] as f64;
            if !cfg.decoupled {
                g += cfg.weight_decay * w;
            }
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            let decay = if cfg.decoupled { cfg.weight_decay * w } else { 0.0 };
            data[k] = (w - cfg.lr * (update + decay)) as f32;
        }
    }
    Ok(())
}
