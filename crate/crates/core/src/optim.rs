//! Adam with decoupled weight decay (a no-op at the default decay of 0).

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

struct Slot<E: Element> {
    name: String,
    m: Vec<E>,
    v: Vec<E>,
}

/// Optimizer state: first/second moment per parameter plus a step count.
pub struct AdamState<E: Element> {
    pub cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot<E>>,
}

impl<E: Element> AdamState<E> {
    /// Zero moments shaped like the given canonical parameter list.
    pub fn new(cfg: AdamConfig, params: &[(String, &Tensor<E>)]) -> Self {
        AdamState {
            cfg,
            step: 0,
            slots: params
                .iter()
                .map(|(name, t)| Slot {
                    name: name.clone(),
                    m: vec![E::zero(); t.numel()],
                    v: vec![E::zero(); t.numel()],
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam step. `grads[i]` pairs with `params[i]`; `None` entries are
    /// skipped entirely (parameter absent from the graph this run).
    pub fn update(
        &mut self,
        params: Vec<(String, &mut Tensor<E>)>,
        grads: &[Option<Tensor<E>>],
    ) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} parameters, got {} params / {} grads",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step;
        let bc1 = E::from_f64(1.0 - self.cfg.beta1.powi(t as i32));
        let bc2 = E::from_f64(1.0 - self.cfg.beta2.powi(t as i32));
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.cfg.beta2);
        let lr = E::from_f64(self.cfg.lr);
        let wd = E::from_f64(self.cfg.weight_decay);
        let eps = E::from_f64(self.cfg.eps);

        for (slot, ((name, param), grad)) in
            self.slots.iter_mut().zip(params.into_iter().zip(grads))
        {
            let g_t = match grad {
                Some(g) => g,
                None => continue,
            };
            if slot.name != name {
                return Err(Error::Contract(format!(
                    "parameter order drift: optimizer slot {} vs param {}",
                    slot.name, name
                )));
            }
            let g = g_t.data();
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}",
                    name
                )));
            }
            let mut new = param.data().to_vec();
            for i in 0..new.len() {
                slot.m[i] = b1 * slot.m[i] + one_m_b1 * g[i];
                slot.v[i] = b2 * slot.v[i] + one_m_b2 * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                // decoupled decay before the adaptive step
                let p = new[i] - lr * wd * new[i];
                new[i] = p - lr * m_hat / (v_hat.sqrt() + eps);
            }
            *param = Tensor::new(new, param.shape())?;
        }
        Ok(())
    }

    /// (name, m, v) triples for checkpointing, canonical order.
    pub fn moments(&self) -> Vec<(&str, &[E], &[E])> {
        self.slots
            .iter()
            .map(|s| (s.name.as_str(), s.m.as_slice(), s.v.as_slice()))
            .collect()
    }

    pub fn restore(&mut self, step: u64, moments: Vec<(String, Vec<E>, Vec<E>)>) -> Result<()> {
        if moments.len() != self.slots.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer wants {} slots, checkpoint has {}",
                self.slots.len(),
                moments.len()
            )));
        }
        for (slot, (name, m, v)) in self.slots.iter_mut().zip(moments) {
            if slot.name != name {
                return Err(Error::Checkpoint(format!(
                    "optimizer slot {} mismatches checkpoint tensor {}",
                    slot.name, name
                )));
            }
            if m.len() != slot.m.len() || v.len() != slot.v.len() {
                return Err(Error::Checkpoint(format!(
                    "moment shape mismatch for {}",
                    name
                )));
            }
            slot.m = m;
            slot.v = v;
        }
        self.step = step;
        Ok(())
    }
}

/// Global L2 norm over a gradient list (None entries skipped).
pub fn grad_norm<E: Element>(grads: &[Option<Tensor<E>>]) -> f64 {
    let mut acc = 0.0f64;
    for g in grads.iter().flatten() {
        for &x in g.data() {
            let v = x.to_f64();
            acc += v * v;
        }
    }
    acc.sqrt()
}
