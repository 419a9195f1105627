//! SiT-style denoising transformer with adaLN-zero conditioning.
//!
//! Patch-embeds the latent, runs `layers` transformer blocks whose
//! normalization is modulated by a (timestep + class) conditioning vector,
//! and reads the per-patch velocity off a zero-initialized final layer.
//! The hidden state after block `alignment_depth` (1-indexed) is exposed
//! for representation alignment.

use super::{
    expect_shape, linear_weight, multi_head_attention, normal_init, patchify, register,
    timestep_embedding, unpatchify,
};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    /// 1-indexed block whose output is the alignment hidden state.
    pub alignment_depth: usize,
    /// Latent shape (channels, height, width).
    pub input: (usize, usize, usize),
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim must be even".into()));
        }
        if self.alignment_depth == 0 || self.alignment_depth > self.layers {
            return Err(Error::Config(format!(
                "alignment_depth {} outside 1..={}",
                self.alignment_depth, self.layers
            )));
        }
        if h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "latent {}x{} not divisible by patch {}",
                h, w, self.patch_size
            )));
        }
        if c == 0 || self.num_classes == 0 {
            return Err(Error::Config("empty input channels or class count".into()));
        }
        Ok(())
    }

    /// Token count N = (h/p)·(w/p).
    pub fn tokens(&self) -> usize {
        let (_, h, w) = self.input;
        (h / self.patch_size) * (w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        let (c, _, _) = self.input;
        c * self.patch_size * self.patch_size
    }

    /// Closed-form parameter count; guards silent shape drift.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        let pd = self.patch_dim();
        let patch = pd * h + h;
        let t_mlp = h * h + h + h * h + h;
        let classes = (self.num_classes + 1) * h;
        let per_block = (h * 3 * h + 3 * h)      // qkv
            + (h * h + h)                        // attn proj
            + (h * MLP_RATIO * h + MLP_RATIO * h) // fc1
            + (MLP_RATIO * h * h + h)            // fc2
            + (h * 6 * h + 6 * h); // adaLN modulation
        let final_mod = h * 2 * h + 2 * h;
        let final_lin = h * pd + pd;
        patch + t_mlp + classes + self.layers * per_block + final_mod + final_lin
    }
}

struct Block<E: Element> {
    qkv_w: Tensor<E>,
    qkv_b: Tensor<E>,
    proj_w: Tensor<E>,
    proj_b: Tensor<E>,
    fc1_w: Tensor<E>,
    fc1_b: Tensor<E>,
    fc2_w: Tensor<E>,
    fc2_b: Tensor<E>,
    mod_w: Tensor<E>,
    mod_b: Tensor<E>,
}

pub struct Denoiser<E: Element> {
    pub cfg: DenoiserConfig,
    patch_w: Tensor<E>,
    patch_b: Tensor<E>,
    t_w1: Tensor<E>,
    t_b1: Tensor<E>,
    t_w2: Tensor<E>,
    t_b2: Tensor<E>,
    class_table: Tensor<E>,
    blocks: Vec<Block<E>>,
    final_mod_w: Tensor<E>,
    final_mod_b: Tensor<E>,
    final_w: Tensor<E>,
    final_b: Tensor<E>,
}

/// Tape handles of the registered denoiser parameters.
pub struct DenoiserVars {
    patch_w: Var,
    patch_b: Var,
    t_w1: Var,
    t_b1: Var,
    t_w2: Var,
    t_b2: Var,
    class_table: Var,
    blocks: Vec<[Var; 10]>,
    final_mod_w: Var,
    final_mod_b: Var,
    final_w: Var,
    final_b: Var,
}

impl DenoiserVars {
    /// Vars in the canonical parameter order (matches `Denoiser::params`).
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![
            self.patch_w,
            self.patch_b,
            self.t_w1,
            self.t_b1,
            self.t_w2,
            self.t_b2,
            self.class_table,
        ];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&[
            self.final_mod_w,
            self.final_mod_b,
            self.final_w,
            self.final_b,
        ]);
        out
    }
}

impl<E: Element> Denoiser<E> {
    pub fn init(cfg: DenoiserConfig, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let pd = cfg.patch_dim();
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                qkv_w: linear_weight(rng, h, 3 * h),
                qkv_b: Tensor::zeros(&[3 * h]),
                proj_w: linear_weight(rng, h, h),
                proj_b: Tensor::zeros(&[h]),
                fc1_w: linear_weight(rng, h, MLP_RATIO * h),
                fc1_b: Tensor::zeros(&[MLP_RATIO * h]),
                fc2_w: linear_weight(rng, MLP_RATIO * h, h),
                fc2_b: Tensor::zeros(&[h]),
                // adaLN-zero: modulation starts at identity
                mod_w: Tensor::zeros(&[h, 6 * h]),
                mod_b: Tensor::zeros(&[6 * h]),
            })
            .collect();
        Ok(Denoiser {
            patch_w: linear_weight(rng, pd, h),
            patch_b: Tensor::zeros(&[h]),
            t_w1: normal_init(rng, &[h, h], 0.02),
            t_b1: Tensor::zeros(&[h]),
            t_w2: normal_init(rng, &[h, h], 0.02),
            t_b2: Tensor::zeros(&[h]),
            class_table: normal_init(rng, &[cfg.num_classes + 1, h], 0.02),
            blocks,
            final_mod_w: Tensor::zeros(&[h, 2 * h]),
            final_mod_b: Tensor::zeros(&[2 * h]),
            final_w: Tensor::zeros(&[h, pd]),
            final_b: Tensor::zeros(&[pd]),
            cfg,
        })
    }

    /// Canonical (name, tensor) listing.
    pub fn params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("denoiser.patch_w".into(), &self.patch_w),
            ("denoiser.patch_b".into(), &self.patch_b),
            ("denoiser.t_w1".into(), &self.t_w1),
            ("denoiser.t_b1".into(), &self.t_b1),
            ("denoiser.t_w2".into(), &self.t_w2),
            ("denoiser.t_b2".into(), &self.t_b2),
            ("denoiser.class_table".into(), &self.class_table),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("denoiser.blocks.{}.{}", i, s);
            out.push((p("qkv_w"), &b.qkv_w));
            out.push((p("qkv_b"), &b.qkv_b));
            out.push((p("proj_w"), &b.proj_w));
            out.push((p("proj_b"), &b.proj_b));
            out.push((p("fc1_w"), &b.fc1_w));
            out.push((p("fc1_b"), &b.fc1_b));
            out.push((p("fc2_w"), &b.fc2_w));
            out.push((p("fc2_b"), &b.fc2_b));
            out.push((p("mod_w"), &b.mod_w));
            out.push((p("mod_b"), &b.mod_b));
        }
        out.push(("denoiser.final_mod_w".into(), &self.final_mod_w));
        out.push(("denoiser.final_mod_b".into(), &self.final_mod_b));
        out.push(("denoiser.final_w".into(), &self.final_w));
        out.push(("denoiser.final_b".into(), &self.final_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("denoiser.patch_w".into(), &mut self.patch_w),
            ("denoiser.patch_b".into(), &mut self.patch_b),
            ("denoiser.t_w1".into(), &mut self.t_w1),
            ("denoiser.t_b1".into(), &mut self.t_b1),
            ("denoiser.t_w2".into(), &mut self.t_w2),
            ("denoiser.t_b2".into(), &mut self.t_b2),
            ("denoiser.class_table".into(), &mut self.class_table),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("denoiser.blocks.{}.{}", i, s);
            out.push((p("qkv_w"), &mut b.qkv_w));
            out.push((p("qkv_b"), &mut b.qkv_b));
            out.push((p("proj_w"), &mut b.proj_w));
            out.push((p("proj_b"), &mut b.proj_b));
            out.push((p("fc1_w"), &mut b.fc1_w));
            out.push((p("fc1_b"), &mut b.fc1_b));
            out.push((p("fc2_w"), &mut b.fc2_w));
            out.push((p("fc2_b"), &mut b.fc2_b));
            out.push((p("mod_w"), &mut b.mod_w));
            out.push((p("mod_b"), &mut b.mod_b));
        }
        out.push(("denoiser.final_mod_w".into(), &mut self.final_mod_w));
        out.push(("denoiser.final_mod_b".into(), &mut self.final_mod_b));
        out.push(("denoiser.final_w".into(), &mut self.final_w));
        out.push(("denoiser.final_b".into(), &mut self.final_b));
        out
    }

    pub fn register(&self, tape: &mut Tape<E>, trainable: bool) -> DenoiserVars {
        DenoiserVars {
            patch_w: register(tape, &self.patch_w, trainable),
            patch_b: register(tape, &self.patch_b, trainable),
            t_w1: register(tape, &self.t_w1, trainable),
            t_b1: register(tape, &self.t_b1, trainable),
            t_w2: register(tape, &self.t_w2, trainable),
            t_b2: register(tape, &self.t_b2, trainable),
            class_table: register(tape, &self.class_table, trainable),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    [
                        register(tape, &b.qkv_w, trainable),
                        register(tape, &b.qkv_b, trainable),
                        register(tape, &b.proj_w, trainable),
                        register(tape, &b.proj_b, trainable),
                        register(tape, &b.fc1_w, trainable),
                        register(tape, &b.fc1_b, trainable),
                        register(tape, &b.fc2_w, trainable),
                        register(tape, &b.fc2_b, trainable),
                        register(tape, &b.mod_w, trainable),
                        register(tape, &b.mod_b, trainable),
                    ]
                })
                .collect(),
            final_mod_w: register(tape, &self.final_mod_w, trainable),
            final_mod_b: register(tape, &self.final_mod_b, trainable),
            final_w: register(tape, &self.final_w, trainable),
            final_b: register(tape, &self.final_b, trainable),
        }
    }

    /// Forward pass. Returns the velocity prediction (same shape as the
    /// input latent) and the hidden state after block `alignment_depth`
    /// ([b, N, hidden_dim]).
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        vars: &DenoiserVars,
        x_t: &Tensor<E>,
        t: &[f64],
        labels: &[usize],
    ) -> Result<(Var, Var)> {
        let (c, h, w) = self.cfg.input;
        let b = t.len();
        expect_shape(x_t.shape(), &[b, c, h, w], "denoiser input")?;
        if labels.len() != b {
            return Err(Error::Dimension(format!(
                "{} labels for batch {}",
                labels.len(),
                b
            )));
        }
        for &y in labels {
            if y > self.cfg.num_classes {
                return Err(Error::Domain(format!(
                    "label {} outside 0..={} (last index is the null class)",
                    y, self.cfg.num_classes
                )));
            }
        }
        let hd = self.cfg.hidden_dim;
        let n = self.cfg.tokens();
        let p = self.cfg.patch_size;

        // conditioning vector: timestep MLP + class embedding
        let t_emb = tape.constant(timestep_embedding(t, hd));
        let t_hidden = tape.linear(t_emb, vars.t_w1, Some(vars.t_b1))?;
        let t_hidden = tape.silu(t_hidden);
        let t_out = tape.linear(t_hidden, vars.t_w2, Some(vars.t_b2))?;
        let y_emb = tape.gather(vars.class_table, labels)?;
        let cond = tape.add(t_out, y_emb)?;
        let cond_act = tape.silu(cond); // shared by adaLN of every block

        // patch embedding
        let x_in = tape.constant(x_t.clone());
        let tokens = patchify(tape, x_in, c, h, w, p)?;
        let mut x = tape.linear(tokens, vars.patch_w, Some(vars.patch_b))?;

        let mut z_den = None;
        for (i, bvars) in vars.blocks.iter().enumerate() {
            let [qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b, mod_w, mod_b] = *bvars;
            let m = tape.linear(cond_act, mod_w, Some(mod_b))?; // [b, 6H]
            let take = |tape: &mut Tape<E>, j: usize| -> Result<Var> {
                let s = tape.slice_last(m, j * hd, hd)?;
                tape.reshape(s, &[b, 1, hd])
            };
            let shift_msa = take(tape, 0)?;
            let scale_msa = take(tape, 1)?;
            let gate_msa = take(tape, 2)?;
            let shift_mlp = take(tape, 3)?;
            let scale_mlp = take(tape, 4)?;
            let gate_mlp = take(tape, 5)?;

            let ln1 = tape.layernorm(x)?;
            let xm = modulate(tape, ln1, shift_msa, scale_msa)?;
            let attn = multi_head_attention(
                tape,
                xm,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                self.cfg.heads,
            )?;
            let gated = tape.mul(attn, gate_msa)?;
            x = tape.add(x, gated)?;

            let ln2 = tape.layernorm(x)?;
            let xm2 = modulate(tape, ln2, shift_mlp, scale_mlp)?;
            let h1 = tape.linear(xm2, fc1_w, Some(fc1_b))?;
            let h1 = tape.gelu_tanh(h1);
            let h2 = tape.linear(h1, fc2_w, Some(fc2_b))?;
            let gated2 = tape.mul(h2, gate_mlp)?;
            x = tape.add(x, gated2)?;

            if i + 1 == self.cfg.alignment_depth {
                z_den = Some(x);
            }
        }
        let z_den = z_den.expect("alignment depth within layers");
        debug_assert_eq!(tape.shape(z_den), &[b, n, hd]);

        // final layer: modulated norm then zero-init projection to patches
        let fm = tape.linear(cond_act, vars.final_mod_w, Some(vars.final_mod_b))?;
        let shift = tape.slice_last(fm, 0, hd)?;
        let shift = tape.reshape(shift, &[b, 1, hd])?;
        let scale = tape.slice_last(fm, hd, hd)?;
        let scale = tape.reshape(scale, &[b, 1, hd])?;
        let lnf = tape.layernorm(x)?;
        let xm = modulate(tape, lnf, shift, scale)?;
        let out_tokens = tape.linear(xm, vars.final_w, Some(vars.final_b))?;
        let v_pred = unpatchify(tape, out_tokens, c, h, w, p)?;
        Ok((v_pred, z_den))
    }
}

/// x·(1+scale) + shift with [b,1,H] modulation tensors.
fn modulate<E: Element>(tape: &mut Tape<E>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s1 = tape.add_scalar(scale, 1.0);
    let xs = tape.mul(x, s1)?;
    tape.add(xs, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn toy_cfg() -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            hidden_dim: 16,
            heads: 2,
            patch_size: 2,
            num_classes: 3,
            alignment_depth: 1,
            input: (2, 4, 4),
        }
    }

    #[test]
    fn zero_velocity_at_init() {
        let net = Denoiser::<f64>::init(toy_cfg(), &mut rng::seeded(1)).unwrap();
        let x = rng::randn(&mut rng::seeded(2), &[2, 2, 4, 4]);
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, false);
        let (v, _) = net.forward(&mut tape, &vars, &x, &[0.2, 0.9], &[0, 3]).unwrap();
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hidden_state_shape() {
        let net = Denoiser::<f64>::init(toy_cfg(), &mut rng::seeded(1)).unwrap();
        let x = rng::randn(&mut rng::seeded(2), &[2, 2, 4, 4]);
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, false);
        let (v, z) = net.forward(&mut tape, &vars, &x, &[0.2, 0.9], &[1, 2]).unwrap();
        assert_eq!(tape.shape(v), x.shape());
        assert_eq!(tape.shape(z), &[2, 4, 16]);
    }

    #[test]
    fn label_out_of_range_errors() {
        let net = Denoiser::<f64>::init(toy_cfg(), &mut rng::seeded(1)).unwrap();
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, false);
        assert!(matches!(
            net.forward(&mut tape, &vars, &x, &[0.5], &[4]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn param_count_matches_closed_form() {
        let net = Denoiser::<f64>::init(toy_cfg(), &mut rng::seeded(1)).unwrap();
        let actual: usize = net.params().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(actual, net.cfg.param_count());
    }

    #[test]
    fn params_and_vars_align() {
        let net = Denoiser::<f64>::init(toy_cfg(), &mut rng::seeded(1)).unwrap();
        let mut tape = Tape::<f64>::new();
        let vars = net.register(&mut tape, true);
        let names = net.params();
        let ordered = vars.ordered();
        assert_eq!(names.len(), ordered.len());
        for ((_, t), v) in names.iter().zip(&ordered) {
            assert_eq!(t.shape(), tape.shape(*v));
        }
    }

    #[test]
    fn batch_permutation_equivariance() {
        // permuting the batch permutes outputs identically (no cross-sample mixing)
        let mut cfg = toy_cfg();
        cfg.alignment_depth = 2;
        let mut net = Denoiser::<f64>::init(cfg, &mut rng::seeded(3)).unwrap();
        // non-zero final/modulation weights so outputs are informative
        for (name, t) in net.params_mut() {
            if name.contains("final_w") || name.contains("mod_w") {
                *t = rng::randn(&mut rng::seeded(9), t.shape()).scale(0.1);
            }
        }
        let x = rng::randn(&mut rng::seeded(4), &[3, 2, 4, 4]);
        let per = x.numel() / 3;
        let mut rev = Vec::with_capacity(x.numel());
        for i in (0..3).rev() {
            rev.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
        }
        let xr = Tensor::new(rev, x.shape()).unwrap();

        let mut tape = Tape::new();
        let vars = net.register(&mut tape, false);
        let (v, _) = net
            .forward(&mut tape, &vars, &x, &[0.3, 0.6, 0.9], &[0, 1, 2])
            .unwrap();
        let fwd = tape.value(v).clone();

        let mut tape2 = Tape::new();
        let vars2 = net.register(&mut tape2, false);
        let (v2, _) = net
            .forward(&mut tape2, &vars2, &xr, &[0.9, 0.6, 0.3], &[2, 1, 0])
            .unwrap();
        let rev_fwd = tape2.value(v2).clone();

        for i in 0..3 {
            let a = &fwd.data()[i * per..(i + 1) * per];
            let b = &rev_fwd.data()[(2 - i) * per..(3 - i) * per];
            assert_eq!(a, b);
        }
    }
}
