//! Frozen target encoder: a plain pre-LN ViT over the same patch grid with
//! its own width, weights drawn once from a fixed seed and never updated.

use super::{linear_weight, multi_head_attention, patchify};
use crate::error::Result;
use crate::rng;
use crate::tensor::tape::Tape;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub input: (usize, usize, usize),
    pub seed: u64,
}

impl EncoderConfig {
    pub fn tokens(&self) -> usize {
        let (_, h, w) = self.input;
        (h / self.patch_size) * (w / self.patch_size)
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let (c, _, _) = self.input;
        let pd = c * self.patch_size * self.patch_size;
        let per_block = (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        pd * d + d + self.layers * per_block
    }
}

struct VitBlock<E: Element> {
    qkv_w: Tensor<E>,
    qkv_b: Tensor<E>,
    proj_w: Tensor<E>,
    proj_b: Tensor<E>,
    fc1_w: Tensor<E>,
    fc1_b: Tensor<E>,
    fc2_w: Tensor<E>,
    fc2_b: Tensor<E>,
}

pub struct FrozenEncoder<E: Element> {
    pub cfg: EncoderConfig,
    patch_w: Tensor<E>,
    patch_b: Tensor<E>,
    blocks: Vec<VitBlock<E>>,
}

impl<E: Element> FrozenEncoder<E> {
    /// Draw φ once from `cfg.seed`.
    pub fn init(cfg: EncoderConfig) -> Self {
        let mut r = rng::stream(cfg.seed, 0);
        let d = cfg.dim;
        let (c, _, _) = cfg.input;
        let pd = c * cfg.patch_size * cfg.patch_size;
        let blocks = (0..cfg.layers)
            .map(|_| VitBlock {
                qkv_w: linear_weight(&mut r, d, 3 * d),
                qkv_b: Tensor::zeros(&[3 * d]),
                proj_w: linear_weight(&mut r, d, d),
                proj_b: Tensor::zeros(&[d]),
                fc1_w: linear_weight(&mut r, d, 4 * d),
                fc1_b: Tensor::zeros(&[4 * d]),
                fc2_w: linear_weight(&mut r, 4 * d, d),
                fc2_b: Tensor::zeros(&[d]),
            })
            .collect();
        FrozenEncoder {
            patch_w: linear_weight(&mut r, pd, d),
            patch_b: Tensor::zeros(&[d]),
            blocks,
            cfg,
        }
    }

    /// Frozen parameters, exported for checkpoint round-trips.
    pub fn params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("encoder.patch_w".into(), &self.patch_w),
            ("encoder.patch_b".into(), &self.patch_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("encoder.blocks.{}.{}", i, s);
            out.push((p("qkv_w"), &b.qkv_w));
            out.push((p("qkv_b"), &b.qkv_b));
            out.push((p("proj_w"), &b.proj_w));
            out.push((p("proj_b"), &b.proj_b));
            out.push((p("fc1_w"), &b.fc1_w));
            out.push((p("fc1_b"), &b.fc1_b));
            out.push((p("fc2_w"), &b.fc2_w));
            out.push((p("fc2_b"), &b.fc2_b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("encoder.patch_w".into(), &mut self.patch_w),
            ("encoder.patch_b".into(), &mut self.patch_b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("encoder.blocks.{}.{}", i, s);
            out.push((p("qkv_w"), &mut b.qkv_w));
            out.push((p("qkv_b"), &mut b.qkv_b));
            out.push((p("proj_w"), &mut b.proj_w));
            out.push((p("proj_b"), &mut b.proj_b));
            out.push((p("fc1_w"), &mut b.fc1_w));
            out.push((p("fc1_b"), &mut b.fc1_b));
            out.push((p("fc2_w"), &mut b.fc2_w));
            out.push((p("fc2_b"), &mut b.fc2_b));
        }
        out
    }

    /// Deterministic features of the clean latent: [b, N, dim].
    /// Gradient-free by construction (every weight enters the local tape
    /// as a constant).
    pub fn encode(&self, x0: &Tensor<E>) -> Result<Tensor<E>> {
        let (c, h, w) = self.cfg.input;
        let b = x0.shape()[0];
        super::expect_shape(x0.shape(), &[b, c, h, w], "encoder input")?;
        let mut tape = Tape::new();
        let x_in = tape.constant(x0.clone());
        let tokens = patchify(&mut tape, x_in, c, h, w, self.cfg.patch_size)?;
        let pw = tape.constant(self.patch_w.clone());
        let pb = tape.constant(self.patch_b.clone());
        let mut x = tape.linear(tokens, pw, Some(pb))?;
        for blk in &self.blocks {
            let qkv_w = tape.constant(blk.qkv_w.clone());
            let qkv_b = tape.constant(blk.qkv_b.clone());
            let proj_w = tape.constant(blk.proj_w.clone());
            let proj_b = tape.constant(blk.proj_b.clone());
            let ln1 = tape.layernorm(x)?;
            let attn =
                multi_head_attention(&mut tape, ln1, qkv_w, qkv_b, proj_w, proj_b, self.cfg.heads)?;
            x = tape.add(x, attn)?;
            let fc1_w = tape.constant(blk.fc1_w.clone());
            let fc1_b = tape.constant(blk.fc1_b.clone());
            let fc2_w = tape.constant(blk.fc2_w.clone());
            let fc2_b = tape.constant(blk.fc2_b.clone());
            let ln2 = tape.layernorm(x)?;
            let h1 = tape.linear(ln2, fc1_w, Some(fc1_b))?;
            let h1 = tape.gelu_tanh(h1);
            let h2 = tape.linear(h1, fc2_w, Some(fc2_b))?;
            x = tape.add(x, h2)?;
        }
        let out = tape.layernorm(x)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::bit_equal;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            layers: 2,
            heads: 2,
            patch_size: 2,
            input: (2, 4, 4),
            seed: 7,
        }
    }

    #[test]
    fn frozen_determinism() {
        let enc = FrozenEncoder::<f64>::init(cfg());
        let x = rng::randn(&mut rng::seeded(5), &[2, 2, 4, 4]);
        let a = enc.encode(&x).unwrap();
        let b = enc.encode(&x).unwrap();
        assert!(bit_equal(&a, &b));
        // re-initialized encoder from the same seed gives identical features
        let enc2 = FrozenEncoder::<f64>::init(cfg());
        let c = enc2.encode(&x).unwrap();
        assert!(bit_equal(&a, &c));
    }

    #[test]
    fn output_shape() {
        let enc = FrozenEncoder::<f64>::init(cfg());
        let x = rng::randn(&mut rng::seeded(6), &[3, 2, 4, 4]);
        let z = enc.encode(&x).unwrap();
        assert_eq!(z.shape(), &[3, 4, 8]);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let enc = FrozenEncoder::<f64>::init(cfg());
        let actual: usize = enc.params().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(actual, enc.cfg.param_count());
    }

    #[test]
    fn different_seeds_differ() {
        let mut c2 = cfg();
        c2.seed = 8;
        let a = FrozenEncoder::<f64>::init(cfg());
        let b = FrozenEncoder::<f64>::init(c2);
        let x = rng::randn(&mut rng::seeded(5), &[1, 2, 4, 4]);
        assert!(!bit_equal(&a.encode(&x).unwrap(), &b.encode(&x).unwrap()));
    }
}
