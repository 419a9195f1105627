//! Linear stochastic interpolant: forward corruption, velocity target and
//! the denoising loss.
//!
//! The path is x_t = (1−t)·x0 + t·ε over t ∈ [0,1], with the diffusion
//! coefficient w_t = σ_t = t. The velocity target has the closed form
//! ε − x0, so no division by σ_t is ever performed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Lower clamp for training-time timestep draws; avoids the σ_t → 0
/// singularity of the quotient form of the velocity.
pub const T_MIN: f64 = 1e-4;

/// α_t = 1−t, σ_t = t, w_t = σ_t.
#[derive(Debug, Clone, Copy, Default)]
pub struct InterpolantSchedule;

impl InterpolantSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    /// SDE diffusion coefficient w_t.
    pub fn diffusion(&self, t: f64) -> f64 {
        self.sigma(t)
    }
}

/// One corrupted sample: x_t together with the ingredients that produced it.
pub struct NoisySample<E: Element> {
    pub x_t: Tensor<E>,
    pub t: f64,
    pub eps: Tensor<E>,
    pub x0: Tensor<E>,
}

/// x_t = (1−t)·x0 + t·eps for a single scalar t ∈ (0, 1].
pub fn corrupt<E: Element>(x0: &Tensor<E>, eps: &Tensor<E>, t: f64) -> Result<NoisySample<E>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("corrupt needs t in (0,1], got {}", t)));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "corrupt shapes differ: {:?} vs {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let a = E::from_f64(1.0 - t);
    let s = E::from_f64(t);
    let x_t = x0.zip_map(eps, |x, e| a * x + s * e)?;
    Ok(NoisySample {
        x_t,
        t,
        eps: eps.clone(),
        x0: x0.clone(),
    })
}

/// Per-sample timesteps over a batched tensor [b, ...].
pub fn corrupt_batch<E: Element>(
    x0: &Tensor<E>,
    eps: &Tensor<E>,
    t: &[f64],
) -> Result<Tensor<E>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "corrupt shapes differ: {:?} vs {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let b = *x0
        .shape()
        .first()
        .ok_or_else(|| Error::Dimension("corrupt_batch needs a batch axis".into()))?;
    if b != t.len() {
        return Err(Error::Dimension(format!(
            "batch {} vs {} timesteps",
            b,
            t.len()
        )));
    }
    for &ti in t {
        if !(ti > 0.0 && ti <= 1.0) {
            return Err(Error::Domain(format!(
                "corrupt needs t in (0,1], got {}",
                ti
            )));
        }
    }
    let per = x0.numel() / b;
    let xd = x0.data();
    let ed = eps.data();
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let a = E::from_f64(1.0 - ti);
        let s = E::from_f64(ti);
        for j in 0..per {
            out.push(a * xd[i * per + j] + s * ed[i * per + j]);
        }
    }
    Tensor::new(out, x0.shape())
}

/// Closed form of the velocity v_t = (x_t − x0)/σ_t under the linear path:
/// ε − x0, independent of t.
pub fn velocity_target<E: Element>(x0: &Tensor<E>, eps: &Tensor<E>) -> Result<Tensor<E>> {
    eps.zip_map(x0, |e, x| e - x)
}

/// Mean over the batch of the per-sample squared L2 distance
/// (sum over all non-batch axes).
pub fn velocity_loss<E: Element>(tape: &mut Tape<E>, pred: Var, target: &Tensor<E>) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != target.shape() {
        return Err(Error::Dimension(format!(
            "velocity_loss shapes differ: {:?} vs {:?}",
            shape,
            target.shape()
        )));
    }
    let b = shape[0];
    let per: usize = shape[1..].iter().product();
    let tgt = tape.constant(target.clone());
    let diff = tape.sub(pred, tgt)?;
    let sq = tape.mul(diff, diff)?;
    let rows = tape.reshape(sq, &[b, per])?;
    let per_sample = tape.sum_axis(rows, 1)?;
    Ok(tape.mean_all(per_sample))
}

/// I.i.d. uniform timestep draws on [T_MIN, 1].
pub fn sample_t(rng: &mut Prng, batch: usize) -> Vec<f64> {
    (0..batch)
        .map(|_| T_MIN + (1.0 - T_MIN) * rng.gen::<f64>())
        .collect()
}
