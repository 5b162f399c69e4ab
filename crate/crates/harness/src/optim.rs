//! Decoupled-weight-decay Adam with warmup, cosine decay and global-norm clipping.

use mmtrack::params::{ParamGroup, ParamId, ParamStore};
use mmtrack::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub encoder: f64,
    pub head: f64,
    pub auxiliary: f64,
}

impl GroupRates {
    pub fn of(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Head => self.head,
            ParamGroup::Auxiliary => self.auxiliary,
        }
    }
}

/// Linear warmup to 1, then cosine decay to 0 at `total`.
pub fn lr_scale(step: usize, total: usize, warmup: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = ((step - warmup.min(step)) as f64 / span).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub rates: GroupRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    t: u64,
}

impl AdamW {
    pub fn new(rates: GroupRates, weight_decay: f64) -> Self {
        Self {
            rates,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// One update of every trainable parameter with a gradient. Decay applies to
    /// matrices only.
    pub fn step(&mut self, store: &mut ParamStore<f64>, grads: &[Option<Tensor<f64>>], scale: f64) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let id = ParamId(i);
            let Some(Some(g)) = grads.get(i) else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let lr = self.rates.of(store.group(id)) * scale;
            let p = store.get_mut(id);
            let decay = p.dims().len() == 2 && p.rows() > 1 && p.cols() > 1;
            let n = p.len();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let upd = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                if decay {
                    *w -= lr * self.weight_decay * *w;
                }
                *w -= lr * upd;
            }
        }
    }
}
