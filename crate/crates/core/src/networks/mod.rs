//! The four parametric components: denoising transformer, frozen target
//! encoder, projection head and discriminator.

mod denoiser;
mod discriminator;
mod encoder;
mod projection;

pub use denoiser::{Denoiser, DenoiserConfig, DenoiserVars};
pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorVars};
pub use encoder::{EncoderConfig, FrozenEncoder};
pub use projection::{ProjectionMlp, ProjectionVars};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Default seed for the frozen encoder weights.
pub const DEFAULT_ENCODER_SEED: u64 = 0x5a4a01;

// ── init helpers ─────────────────────────────────────────────────────

/// Uniform(-a, a) with a = sqrt(6/(fan_in+fan_out)).
pub(crate) fn xavier_uniform<E: Element>(
    rng: &mut Prng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<E> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| E::from_f64(a * (2.0 * rng.gen::<f64>() - 1.0)))
}

/// Linear weight [d_in, d_out].
pub(crate) fn linear_weight<E: Element>(rng: &mut Prng, d_in: usize, d_out: usize) -> Tensor<E> {
    xavier_uniform(rng, &[d_in, d_out], d_in, d_out)
}

pub(crate) fn normal_init<E: Element>(rng: &mut Prng, shape: &[usize], std: f64) -> Tensor<E> {
    use rand_distr::Distribution;
    let dist = rand_distr::Normal::new(0.0f64, std).unwrap();
    Tensor::from_fn(shape, |_| E::from_f64(dist.sample(rng)))
}

// ── shared building blocks ───────────────────────────────────────────

/// [b,c,h,w] → [b, N, c·p²] (row-major patch grid, channel-major within a
/// patch).
pub(crate) fn patchify<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Var> {
    let b = tape.shape(x)[0];
    let (gh, gw) = (h / p, w / p);
    let v = tape.reshape(x, &[b, c, gh, p, gw, p])?;
    let v = tape.permute(v, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(v, &[b, gh * gw, c * p * p])
}

/// Inverse of [`patchify`]: [b, N, c·p²] → [b,c,h,w].
pub(crate) fn unpatchify<E: Element>(
    tape: &mut Tape<E>,
    tokens: Var,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Var> {
    let b = tape.shape(tokens)[0];
    let (gh, gw) = (h / p, w / p);
    let v = tape.reshape(tokens, &[b, gh, gw, c, p, p])?;
    let v = tape.permute(v, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(v, &[b, c, h, w])
}

/// Multi-head self-attention with output projection (no residual, input
/// assumed already normalized/modulated). x: [b, N, dim].
pub(crate) fn multi_head_attention<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    heads: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, n, dim) = (shape[0], shape[1], shape[2]);
    let dh = dim / heads;
    let qkv = tape.linear(x, qkv_w, Some(qkv_b))?;
    let to_heads = |tape: &mut Tape<E>, t: Var| -> Result<Var> {
        let v = tape.reshape(t, &[b, n, heads, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        tape.reshape(v, &[b * heads, n, dh])
    };
    let q = tape.slice_last(qkv, 0, dim)?;
    let k = tape.slice_last(qkv, dim, dim)?;
    let v = tape.slice_last(qkv, 2 * dim, dim)?;
    let qh = to_heads(tape, q)?;
    let vh = to_heads(tape, v)?;
    let kt = {
        let kk = tape.reshape(k, &[b, n, heads, dh])?;
        let kk = tape.permute(kk, &[0, 2, 3, 1])?;
        tape.reshape(kk, &[b * heads, dh, n])?
    };
    let scores = tape.bmm(qh, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax(scaled)?;
    let ctx = tape.bmm(attn, vh)?;
    let ctx = tape.reshape(ctx, &[b, heads, n, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, n, dim])?;
    tape.linear(ctx, proj_w, Some(proj_b))
}

/// Sinusoidal embedding of continuous timesteps in [0,1], dimension `dim`
/// (even): [cos | sin] halves over a geometric frequency ladder.
pub(crate) fn timestep_embedding<E: Element>(t: &[f64], dim: usize) -> Tensor<E> {
    let half = dim / 2;
    let max_period = 10_000.0f64;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let scaled = ti * 1000.0;
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            data.push(E::from_f64((scaled * freq).cos()));
        }
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            data.push(E::from_f64((scaled * freq).sin()));
        }
    }
    Tensor::new(data, &[t.len(), dim]).expect("shape by construction")
}

/// Registers a parameter on the tape, trainable or frozen.
pub(crate) fn register<E: Element>(tape: &mut Tape<E>, t: &Tensor<E>, trainable: bool) -> Var {
    if trainable {
        tape.leaf(t.clone().with_grad())
    } else {
        tape.constant(t.clone())
    }
}

/// Shape guard shared by network entry points.
pub(crate) fn expect_shape(actual: &[usize], expected: &[usize], what: &str) -> Result<()> {
    if actual != expected {
        return Err(Error::Dimension(format!(
            "{}: expected {:?}, got {:?}",
            what, expected, actual
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn patchify_round_trip() {
        let x = rng::randn::<f64>(&mut rng::seeded(0), &[2, 3, 4, 4]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let tok = patchify(&mut tape, xv, 3, 4, 4, 2).unwrap();
        assert_eq!(tape.shape(tok), &[2, 4, 12]);
        let back = unpatchify(&mut tape, tok, 3, 4, 4, 2).unwrap();
        assert_eq!(tape.value(back).data(), x.data());
    }

    #[test]
    fn timestep_embedding_shape_and_determinism() {
        let a = timestep_embedding::<f64>(&[0.1, 0.5, 0.9], 16);
        let b = timestep_embedding::<f64>(&[0.1, 0.5, 0.9], 16);
        assert_eq!(a.shape(), &[3, 16]);
        assert_eq!(a.data(), b.data());
        // distinct timesteps embed differently
        assert_ne!(a.data()[..16], a.data()[16..32]);
    }
}
