//! Central finite-difference gradient checking for every differentiable op
//! and loss. The checker is forward-eval only, so it stays independent of
//! the reverse-mode path it validates.

use rand::Rng;

use crate::alignment;
use crate::error::Result;
use crate::networks::{Discriminator, DiscriminatorConfig, ProjectionMlp};
use crate::rng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub instances: usize,
    pub pass: bool,
}

/// Returns the scalar loss plus, per input, the registered leaf (None
/// marks an input held constant — skipped by the FD sweep).
type Builder = dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Option<Var>>)>;

struct CheckSpec {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    /// Shift applied to the uniform[-1,1] draw per input (into op domains).
    shifts: Vec<f64>,
    builder: Box<Builder>,
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / fd.abs().max(1e-8)
}

/// Turn any tensor into a scalar via a fixed pseudo-random weighting, so
/// gradients are informative in every component.
fn weighted_sum(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = rng::uniform::<f64>(&mut rng::seeded(0xC0FFEE), &shape, -1.0, 1.0);
    let wv = tape.constant(w);
    let prod = tape.mul(v, wv)?;
    Ok(tape.sum_all(prod))
}

fn run_check(spec: &CheckSpec, instances: usize, seed: u64) -> Result<GradCheckResult> {
    let mut max_err = 0.0f64;
    for inst in 0..instances {
        let mut r = rng::stream(seed, inst as u64);
        let inputs: Vec<Tensor<f64>> = spec
            .shapes
            .iter()
            .zip(&spec.shifts)
            .map(|(shape, &shift)| {
                Tensor::from_fn(shape, |_| shift + 2.0 * r.gen::<f64>() - 1.0)
            })
            .collect();

        // reverse-mode gradients
        let mut tape = Tape::new();
        let grad_inputs: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_grad()).collect();
        let (loss, leaves) = (spec.builder)(&mut tape, &grad_inputs)?;
        let grads = tape.backward(loss)?;
        let ad_grads: Vec<Option<Tensor<f64>>> = leaves
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.map(|v| {
                    grads
                        .get(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))
                })
            })
            .collect();

        // central differences
        let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let (loss, _) = (spec.builder)(&mut tape, inputs)?;
            Ok(tape.value(loss).item())
        };
        for (ti, input) in inputs.iter().enumerate() {
            let ad = match &ad_grads[ti] {
                Some(g) => g,
                None => continue,
            };
            for ci in 0..input.numel() {
                let mut plus = input.data().to_vec();
                let mut minus = plus.clone();
                plus[ci] += FD_STEP;
                minus[ci] -= FD_STEP;
                let mut ip = inputs.to_vec();
                ip[ti] = Tensor::new(plus, input.shape())?;
                let f_plus = eval(&ip)?;
                ip[ti] = Tensor::new(minus, input.shape())?;
                let f_minus = eval(&ip)?;
                let fd = (f_plus - f_minus) / (2.0 * FD_STEP);
                let err = rel_err(ad.data()[ci], fd);
                if err > max_err {
                    max_err = err;
                }
            }
        }
    }
    Ok(GradCheckResult {
        name: spec.name.to_string(),
        max_rel_err: max_err,
        instances,
        pass: max_err < REL_TOL,
    })
}

fn leaf_all(tape: &mut Tape<f64>, inputs: &[Tensor<f64>]) -> Vec<Option<Var>> {
    inputs.iter().map(|t| Some(tape.leaf(t.clone()))).collect()
}

fn op_checks() -> Vec<CheckSpec> {
    let mut specs: Vec<CheckSpec> = Vec::new();
    let mut push = |name: &'static str,
                    shapes: Vec<Vec<usize>>,
                    shifts: Vec<f64>,
                    builder: Box<Builder>| {
        specs.push(CheckSpec {
            name,
            shapes,
            shifts,
            builder,
        });
    };

    push(
        "matmul",
        vec![vec![4, 3], vec![3, 5]],
        vec![0.0, 0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.matmul(v(0), v(1))?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "bmm",
        vec![vec![2, 3, 4], vec![2, 4, 3]],
        vec![0.0, 0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.bmm(v(0), v(1))?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "add",
        vec![vec![2, 3, 4], vec![2, 3, 4]],
        vec![0.0, 0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.add(v(0), v(1))?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "sub_broadcast_suffix",
        vec![vec![2, 3, 4], vec![4]],
        vec![0.0, 0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.sub(v(0), v(1))?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "mul_broadcast_mid",
        vec![vec![2, 3, 4], vec![2, 1, 4]],
        vec![0.0, 0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.mul(v(0), v(1))?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "div",
        vec![vec![3, 4], vec![3, 4]],
        vec![0.0, 2.5],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.div(v(0), v(1))?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "neg_scale_add_scalar",
        vec![vec![3, 4]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.neg(v(0));
            let y = tape.scale(y, -1.7);
            let y = tape.add_scalar(y, 0.3);
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "reshape_permute",
        vec![vec![2, 3, 4]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.permute(v(0), &[2, 0, 1])?;
            let y = tape.reshape(y, &[4, 6])?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "sum_axis",
        vec![vec![2, 3, 4]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.sum_axis(v(0), 1)?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "mean_axis",
        vec![vec![2, 3, 4]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.mean_axis(v(0), 2)?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "max_axis",
        vec![vec![3, 5]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.max_axis(v(0), 1)?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "sum_all_mean_all",
        vec![vec![2, 5]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let s = tape.sum_all(v(0));
            let m = tape.mean_all(v(0));
            let y = tape.add(s, m)?;
            Ok((y, vs))
        }),
    );
    push(
        "silu",
        vec![vec![3, 6]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.silu(v(0));
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "gelu_tanh",
        vec![vec![3, 6]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.gelu_tanh(v(0));
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "sigmoid",
        vec![vec![3, 6]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.sigmoid(v(0));
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "log",
        vec![vec![3, 6]],
        vec![1.5],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.log(v(0))?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "softplus",
        vec![vec![3, 6]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.softplus(v(0));
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "sqrt",
        vec![vec![3, 6]],
        vec![1.5],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.sqrt(v(0))?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "clamp_min",
        vec![vec![3, 6]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.clamp_min(v(0), 0.1);
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "softmax",
        vec![vec![3, 5]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.softmax(v(0))?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "layernorm",
        vec![vec![3, 8]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.layernorm(v(0))?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "conv2d",
        vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
        vec![0.0, 0.0, 0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.conv2d(v(0), v(1), v(2), 1, 1)?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "conv2d_strided",
        vec![vec![1, 2, 6, 6], vec![2, 2, 3, 3], vec![2]],
        vec![0.0, 0.0, 0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.conv2d(v(0), v(1), v(2), 2, 1)?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "gather",
        vec![vec![5, 4]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            // repeated index exercises scatter-add in the backward pass
            let y = tape.gather(v(0), &[0, 2, 2, 4])?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    push(
        "slice_last",
        vec![vec![2, 3, 6]],
        vec![0.0],
        Box::new(|tape, ins| {
            let vs = leaf_all(tape, ins);
            let v = |i: usize| vs[i].unwrap();
            let y = tape.slice_last(v(0), 2, 3)?;
            Ok((weighted_sum(tape, y)?, vs))
        }),
    );
    specs
}

fn loss_checks() -> Vec<CheckSpec> {
    let mut specs: Vec<CheckSpec> = Vec::new();

    specs.push(CheckSpec {
        name: "velocity_loss",
        shapes: vec![vec![2, 6], vec![2, 6]],
        shifts: vec![0.0, 0.0],
        builder: Box::new(|tape, ins| {
            let pred = tape.leaf(ins[0].clone());
            let loss = crate::interpolant::velocity_loss(tape, pred, &ins[1])?;
            Ok((loss, vec![Some(pred), None]))
        }),
    });
    specs.push(CheckSpec {
        name: "patch_alignment_loss",
        shapes: vec![vec![2, 4, 8], vec![2, 4, 8]],
        shifts: vec![0.0, 0.0],
        builder: Box::new(|tape, ins| {
            let z = tape.constant(ins[1].clone());
            let h = tape.leaf(ins[0].clone());
            let loss = alignment::patch_alignment_loss(tape, z, h, alignment::COSINE_EPS)?;
            Ok((loss, vec![Some(h), None]))
        }),
    });
    specs.push(CheckSpec {
        name: "structural_loss",
        shapes: vec![vec![2, 4, 8], vec![2, 4, 8]],
        shifts: vec![0.0, 0.0],
        builder: Box::new(|tape, ins| {
            let z = tape.constant(ins[1].clone());
            let h = tape.leaf(ins[0].clone());
            let loss = alignment::structural_loss(tape, z, h, alignment::COSINE_EPS)?;
            Ok((loss, vec![Some(h), None]))
        }),
    });
    specs.push(CheckSpec {
        name: "adversarial_loss",
        shapes: vec![vec![2, 4, 8]],
        shifts: vec![0.0],
        builder: Box::new(|tape, ins| {
            let disc = Discriminator::<f64>::init(
                DiscriminatorConfig {
                    in_dim: 8,
                    width: 4,
                },
                &mut rng::seeded(0xD15C),
            );
            let h = tape.leaf(ins[0].clone());
            let loss = alignment::adversarial_loss(tape, &disc, h)?;
            Ok((loss, vec![Some(h)]))
        }),
    });
    specs.push(CheckSpec {
        name: "projection_forward",
        shapes: vec![vec![2, 4, 6]],
        shifts: vec![0.0],
        builder: Box::new(|tape, ins| {
            let mlp = ProjectionMlp::<f64>::init(6, 5, &mut rng::seeded(0x9807));
            let vars = mlp.register(tape, false);
            let z = tape.leaf(ins[0].clone());
            let h = mlp.forward(tape, &vars, z)?;
            Ok((weighted_sum(tape, h)?, vec![Some(z)]))
        }),
    });
    specs
}

/// Gradient of the discriminator objective with respect to ψ, checked by
/// central differences over every discriminator parameter component.
fn check_discriminator_params(instances: usize, seed: u64) -> Result<GradCheckResult> {
    let cfg = DiscriminatorConfig {
        in_dim: 6,
        width: 4,
    };
    let mut max_err = 0.0f64;
    for inst in 0..instances {
        let mut r = rng::stream(seed, inst as u64);
        let mut disc = Discriminator::<f64>::init(cfg.clone(), &mut r);
        let z = rng::uniform::<f64>(&mut r, &[2, 4, 6], -1.0, 1.0);
        let h = rng::uniform::<f64>(&mut r, &[2, 4, 6], -1.0, 1.0);

        let mut tape = Tape::new();
        let (loss, vars) = alignment::discriminator_loss(&mut tape, &disc, &z, &h)?;
        let grads = tape.backward(loss)?;
        let ad: Vec<Tensor<f64>> = vars
            .ordered()
            .iter()
            .map(|v| grads.get(*v).unwrap().clone())
            .collect();

        fn set_component(
            disc: &mut Discriminator<f64>,
            pi: usize,
            ci: usize,
            value: f64,
        ) -> Result<f64> {
            let mut params = disc.params_mut();
            let t = &mut params[pi].1;
            let mut data = t.data().to_vec();
            let old = data[ci];
            data[ci] = value;
            **t = Tensor::new(data, t.shape())?;
            Ok(old)
        }
        let eval = |disc: &Discriminator<f64>, z: &Tensor<f64>, h: &Tensor<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let (loss, _) = alignment::discriminator_loss(&mut tape, disc, z, h)?;
            Ok(tape.value(loss).item())
        };

        let n_params = disc.params().len();
        for pi in 0..n_params {
            let numel = disc.params()[pi].1.numel();
            for ci in 0..numel {
                let base = set_component(&mut disc, pi, ci, 0.0)?;
                set_component(&mut disc, pi, ci, base + FD_STEP)?;
                let f_plus = eval(&disc, &z, &h)?;
                set_component(&mut disc, pi, ci, base - FD_STEP)?;
                let f_minus = eval(&disc, &z, &h)?;
                set_component(&mut disc, pi, ci, base)?;
                let fd = (f_plus - f_minus) / (2.0 * FD_STEP);
                let err = rel_err(ad[pi].data()[ci], fd);
                if err > max_err {
                    max_err = err;
                }
            }
        }
    }
    Ok(GradCheckResult {
        name: "discriminator_loss_psi".into(),
        max_rel_err: max_err,
        instances,
        pass: max_err < REL_TOL,
    })
}

/// Run the whole suite. `instances` random instances per check.
pub fn run_suite(instances: usize) -> Result<Vec<GradCheckResult>> {
    let mut results = Vec::new();
    for spec in op_checks().iter().chain(loss_checks().iter()) {
        results.push(run_check(spec, instances, 0xFD0)?);
    }
    // parameter-side check runs fewer instances: it sweeps every ψ component
    results.push(check_discriminator_params(instances.min(5), 0xFD1)?);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_tolerance() {
        // smoke subset here; the acceptance suite runs the full instance count
        let results = run_suite(3).unwrap();
        for r in &results {
            assert!(
                r.pass,
                "{} failed gradcheck: max rel err {:.3e}",
                r.name, r.max_rel_err
            );
        }
        assert!(results.len() >= 25);
    }
}
