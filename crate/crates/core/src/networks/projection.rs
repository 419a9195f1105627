//! Projection head: three affine layers with SiLU between them, mapping the
//! denoiser hidden width onto the encoder feature width.

use super::{linear_weight, register};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

pub struct ProjectionMlp<E: Element> {
    pub in_dim: usize,
    pub out_dim: usize,
    w1: Tensor<E>,
    b1: Tensor<E>,
    w2: Tensor<E>,
    b2: Tensor<E>,
    w3: Tensor<E>,
    b3: Tensor<E>,
}

pub struct ProjectionVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    w3: Var,
    b3: Var,
}

impl ProjectionVars {
    pub fn ordered(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

impl<E: Element> ProjectionMlp<E> {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Prng) -> Self {
        ProjectionMlp {
            in_dim,
            out_dim,
            w1: linear_weight(rng, in_dim, in_dim),
            b1: Tensor::zeros(&[in_dim]),
            w2: linear_weight(rng, in_dim, in_dim),
            b2: Tensor::zeros(&[in_dim]),
            w3: linear_weight(rng, in_dim, out_dim),
            b3: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * in_dim + in_dim + in_dim * in_dim + in_dim + in_dim * out_dim + out_dim
    }

    pub fn params(&self) -> Vec<(String, &Tensor<E>)> {
        vec![
            ("proj.w1".into(), &self.w1),
            ("proj.b1".into(), &self.b1),
            ("proj.w2".into(), &self.w2),
            ("proj.b2".into(), &self.b2),
            ("proj.w3".into(), &self.w3),
            ("proj.b3".into(), &self.b3),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        vec![
            ("proj.w1".into(), &mut self.w1),
            ("proj.b1".into(), &mut self.b1),
            ("proj.w2".into(), &mut self.w2),
            ("proj.b2".into(), &mut self.b2),
            ("proj.w3".into(), &mut self.w3),
            ("proj.b3".into(), &mut self.b3),
        ]
    }

    pub fn register(&self, tape: &mut Tape<E>, trainable: bool) -> ProjectionVars {
        ProjectionVars {
            w1: register(tape, &self.w1, trainable),
            b1: register(tape, &self.b1, trainable),
            w2: register(tape, &self.w2, trainable),
            b2: register(tape, &self.b2, trainable),
            w3: register(tape, &self.w3, trainable),
            b3: register(tape, &self.b3, trainable),
        }
    }

    /// [b, N, in_dim] → [b, N, out_dim].
    pub fn forward(&self, tape: &mut Tape<E>, vars: &ProjectionVars, z: Var) -> Result<Var> {
        let shape = tape.shape(z);
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::Dimension(format!(
                "projection input {:?} does not end in {}",
                shape, self.in_dim
            )));
        }
        let h = tape.linear(z, vars.w1, Some(vars.b1))?;
        let h = tape.silu(h);
        let h = tape.linear(h, vars.w2, Some(vars.b2))?;
        let h = tape.silu(h);
        tape.linear(h, vars.w3, Some(vars.b3))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::kernels;

    #[test]
    fn output_shape_contract() {
        let mlp = ProjectionMlp::<f64>::init(16, 8, &mut rng::seeded(0));
        let mut tape = Tape::new();
        let vars = mlp.register(&mut tape, false);
        let z = tape.leaf(rng::randn(&mut rng::seeded(1), &[2, 4, 16]));
        let h = mlp.forward(&mut tape, &vars, z).unwrap();
        assert_eq!(tape.shape(h), &[2, 4, 8]);
    }

    #[test]
    fn zero_input_follows_bias_path() {
        // y = w3ᵀ·silu(w2ᵀ·silu(b1) + b2) + b3 when the input is zero
        let mut mlp = ProjectionMlp::<f64>::init(6, 3, &mut rng::seeded(2));
        for (name, t) in mlp.params_mut() {
            if name.ends_with('1') || name.ends_with('2') || name.ends_with('3') {
                if name.contains('b') {
                    *t = rng::randn(&mut rng::seeded(3), t.shape());
                }
            }
        }
        let mut tape = Tape::new();
        let vars = mlp.register(&mut tape, false);
        let z = tape.leaf(Tensor::zeros(&[1, 1, 6]));
        let h = mlp.forward(&mut tape, &vars, z).unwrap();

        let s1: Vec<f64> = mlp.b1.data().iter().map(|&x| kernels::silu(x)).collect();
        let l2 = kernels::matmul(&s1, mlp.w2.data(), 1, 6, 6);
        let s2: Vec<f64> = l2
            .iter()
            .zip(mlp.b2.data())
            .map(|(&x, &b)| kernels::silu(x + b))
            .collect();
        let l3 = kernels::matmul(&s2, mlp.w3.data(), 1, 6, 3);
        for (i, (&got, &want)) in tape
            .value(h)
            .data()
            .iter()
            .zip(l3.iter().zip(mlp.b3.data()).map(|(&x, &b)| x + b).collect::<Vec<_>>().iter())
            .enumerate()
        {
            assert!((got - want).abs() < 1e-12, "slot {}: {} vs {}", i, got, want);
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        let mlp = ProjectionMlp::<f64>::init(16, 8, &mut rng::seeded(0));
        let actual: usize = mlp.params().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(actual, ProjectionMlp::<f64>::param_count(16, 8));
    }
}
