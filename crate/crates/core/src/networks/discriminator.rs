//! Small conv discriminator over token-grid features: a 1×1 adapter onto
//! the grid, two strided 3×3 blocks with SiLU, global average pooling and
//! a single-logit head. Trained from scratch.

use super::{register, xavier_uniform};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorConfig {
    /// Feature width of the incoming tokens (encoder width).
    pub in_dim: usize,
    /// Channel width of the conv trunk.
    pub width: usize,
}

impl DiscriminatorConfig {
    pub fn param_count(&self) -> usize {
        let (d, c) = (self.in_dim, self.width);
        (c * d + c) + 2 * (c * c * 9 + c) + (c + 1)
    }
}

pub struct Discriminator<E: Element> {
    pub cfg: DiscriminatorConfig,
    adapter_w: Tensor<E>,
    adapter_b: Tensor<E>,
    conv1_w: Tensor<E>,
    conv1_b: Tensor<E>,
    conv2_w: Tensor<E>,
    conv2_b: Tensor<E>,
    head_w: Tensor<E>,
    head_b: Tensor<E>,
}

pub struct DiscriminatorVars {
    adapter_w: Var,
    adapter_b: Var,
    conv1_w: Var,
    conv1_b: Var,
    conv2_w: Var,
    conv2_b: Var,
    head_w: Var,
    head_b: Var,
}

impl DiscriminatorVars {
    pub fn ordered(&self) -> Vec<Var> {
        vec![
            self.adapter_w,
            self.adapter_b,
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.head_w,
            self.head_b,
        ]
    }
}

impl<E: Element> Discriminator<E> {
    pub fn init(cfg: DiscriminatorConfig, rng: &mut Prng) -> Self {
        let (d, c) = (cfg.in_dim, cfg.width);
        Discriminator {
            adapter_w: xavier_uniform(rng, &[c, d, 1, 1], d, c),
            adapter_b: Tensor::zeros(&[c]),
            conv1_w: xavier_uniform(rng, &[c, c, 3, 3], c * 9, c * 9),
            conv1_b: Tensor::zeros(&[c]),
            conv2_w: xavier_uniform(rng, &[c, c, 3, 3], c * 9, c * 9),
            conv2_b: Tensor::zeros(&[c]),
            head_w: xavier_uniform(rng, &[c, 1], c, 1),
            head_b: Tensor::zeros(&[1]),
            cfg,
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<E>)> {
        vec![
            ("disc.adapter_w".into(), &self.adapter_w),
            ("disc.adapter_b".into(), &self.adapter_b),
            ("disc.conv1_w".into(), &self.conv1_w),
            ("disc.conv1_b".into(), &self.conv1_b),
            ("disc.conv2_w".into(), &self.conv2_w),
            ("disc.conv2_b".into(), &self.conv2_b),
            ("disc.head_w".into(), &self.head_w),
            ("disc.head_b".into(), &self.head_b),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        vec![
            ("disc.adapter_w".into(), &mut self.adapter_w),
            ("disc.adapter_b".into(), &mut self.adapter_b),
            ("disc.conv1_w".into(), &mut self.conv1_w),
            ("disc.conv1_b".into(), &mut self.conv1_b),
            ("disc.conv2_w".into(), &mut self.conv2_w),
            ("disc.conv2_b".into(), &mut self.conv2_b),
            ("disc.head_w".into(), &mut self.head_w),
            ("disc.head_b".into(), &mut self.head_b),
        ]
    }

    pub fn register(&self, tape: &mut Tape<E>, trainable: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            adapter_w: register(tape, &self.adapter_w, trainable),
            adapter_b: register(tape, &self.adapter_b, trainable),
            conv1_w: register(tape, &self.conv1_w, trainable),
            conv1_b: register(tape, &self.conv1_b, trainable),
            conv2_w: register(tape, &self.conv2_w, trainable),
            conv2_b: register(tape, &self.conv2_b, trainable),
            head_w: register(tape, &self.head_w, trainable),
            head_b: register(tape, &self.head_b, trainable),
        }
    }

    /// Raw logits [b, 1] from token features [b, N, in_dim]; N must form a
    /// square grid.
    pub fn forward(&self, tape: &mut Tape<E>, vars: &DiscriminatorVars, h: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.in_dim {
            return Err(Error::Dimension(format!(
                "discriminator input {:?}, want [b, N, {}]",
                shape, self.cfg.in_dim
            )));
        }
        let (b, n) = (shape[0], shape[1]);
        let g = (n as f64).sqrt() as usize;
        if g * g != n {
            return Err(Error::Dimension(format!(
                "token count {} is not a square grid",
                n
            )));
        }
        let grid = tape.reshape(h, &[b, g, g, self.cfg.in_dim])?;
        let grid = tape.permute(grid, &[0, 3, 1, 2])?; // [b, D, g, g]
        let x = tape.conv2d(grid, vars.adapter_w, vars.adapter_b, 1, 0)?;
        let x = tape.silu(x);
        let x = tape.conv2d(x, vars.conv1_w, vars.conv1_b, 2, 1)?;
        let x = tape.silu(x);
        let x = tape.conv2d(x, vars.conv2_w, vars.conv2_b, 2, 1)?;
        let x = tape.silu(x);
        let s = tape.shape(x).to_vec(); // [b, c, g', g']
        let pooled = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = tape.mean_axis(pooled, 2)?; // [b, c]
        tape.linear(pooled, vars.head_w, Some(vars.head_b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn disc() -> Discriminator<f64> {
        Discriminator::init(
            DiscriminatorConfig {
                in_dim: 8,
                width: 4,
            },
            &mut rng::seeded(11),
        )
    }

    #[test]
    fn logit_shape() {
        let d = disc();
        let mut tape = Tape::new();
        let vars = d.register(&mut tape, false);
        let h = tape.leaf(rng::randn(&mut rng::seeded(1), &[3, 16, 8]));
        let out = d.forward(&mut tape, &vars, h).unwrap();
        assert_eq!(tape.shape(out), &[3, 1]);
    }

    #[test]
    fn constant_input_gives_identical_logits() {
        let d = disc();
        let mut tape = Tape::new();
        let vars = d.register(&mut tape, false);
        let h = tape.leaf(Tensor::full(&[4, 16, 8], 0.37));
        let out = d.forward(&mut tape, &vars, h).unwrap();
        let v = tape.value(out).data();
        for &x in v {
            assert_eq!(x, v[0]);
        }
    }

    #[test]
    fn non_square_token_grid_errors() {
        let d = disc();
        let mut tape = Tape::new();
        let vars = d.register(&mut tape, false);
        let h = tape.leaf(Tensor::zeros(&[2, 12, 8]));
        assert!(matches!(
            d.forward(&mut tape, &vars, h),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gradient_flows_to_params_and_input() {
        let d = disc();
        let mut tape = Tape::new();
        let vars = d.register(&mut tape, true);
        let h = tape.leaf(rng::randn::<f64>(&mut rng::seeded(2), &[2, 16, 8]).with_grad());
        let out = d.forward(&mut tape, &vars, h).unwrap();
        let loss = tape.mean_all(out);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(h).is_some());
        for v in vars.ordered() {
            assert!(grads.get(v).is_some(), "missing grad for a parameter");
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        let d = disc();
        let actual: usize = d.params().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(actual, d.cfg.param_count());
    }

    #[test]
    fn works_on_2x2_grid() {
        let d = disc();
        let mut tape = Tape::new();
        let vars = d.register(&mut tape, false);
        let h = tape.leaf(rng::randn(&mut rng::seeded(3), &[1, 4, 8]));
        let out = d.forward(&mut tape, &vars, h).unwrap();
        assert_eq!(tape.shape(out), &[1, 1]);
    }
}
