//! Multi-level representation alignment losses and the joint objective.
//!
//! Three levels: per-patch cosine alignment against the frozen encoder,
//! Frobenius matching of patch autocorrelation matrices, and a
//! non-saturating GAN game on the projected features. GAN terms are
//! computed in logit space via softplus, which is the exact log-sigmoid
//! form without overflow.

use crate::error::{Error, Result};
use crate::networks::{Discriminator, DiscriminatorVars};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Norm floor inside cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AlignmentConfig {
    /// Weight of the patch-wise cosine term.
    pub lambda: f64,
    /// Weight of the structural (autocorrelation) term.
    pub beta: f64,
    /// Weight of the adversarial term.
    pub gamma: f64,
    pub patch_enabled: bool,
    pub structural_enabled: bool,
    pub adversarial_enabled: bool,
    pub cosine_eps: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            lambda: 0.5,
            beta: 0.5,
            gamma: 0.05,
            patch_enabled: true,
            structural_enabled: true,
            adversarial_enabled: true,
            cosine_eps: COSINE_EPS,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "alignment weights must be non-negative: λ={} β={} γ={}",
                self.lambda, self.beta, self.gamma
            )));
        }
        Ok(())
    }

    /// Weight actually applied (0 when the term is switched off).
    pub fn patch_weight(&self) -> f64 {
        if self.patch_enabled {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn structural_weight(&self) -> f64 {
        if self.structural_enabled {
            self.beta
        } else {
            0.0
        }
    }

    pub fn adversarial_weight(&self) -> f64 {
        if self.adversarial_enabled {
            self.gamma
        } else {
            0.0
        }
    }

    /// Term is worth computing at all.
    pub fn patch_active(&self) -> bool {
        self.patch_weight() > 0.0
    }

    pub fn structural_active(&self) -> bool {
        self.structural_weight() > 0.0
    }

    pub fn adversarial_active(&self) -> bool {
        self.adversarial_weight() > 0.0
    }

    pub fn any_alignment_active(&self) -> bool {
        self.patch_active() || self.structural_active() || self.adversarial_active()
    }
}

/// Per-step loss report. `disc` is informational only; it never enters
/// `total`.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub velocity: f64,
    pub patch: f64,
    pub structural: f64,
    pub adversarial: f64,
    pub total: f64,
    pub disc: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.velocity,
            self.patch,
            self.structural,
            self.adversarial,
            self.total,
            self.disc,
        ]
        .iter()
        .all(|x| x.is_finite())
    }

    /// Name of the first non-finite field, for abort diagnostics.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("velocity", self.velocity),
            ("patch", self.patch),
            ("structural", self.structural),
            ("adversarial", self.adversarial),
            ("total", self.total),
            ("disc", self.disc),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// max(‖row‖, eps) over the last axis, computed as sqrt(max(Σx², eps²)) so
/// the gradient stays defined at zero rows.
fn row_norm_floor<E: Element>(tape: &mut Tape<E>, x: Var, eps: f64) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let ndim = tape.shape(x).len();
    let sums = tape.sum_axis(sq, ndim - 1)?;
    let clamped = tape.clamp_min(sums, eps * eps);
    tape.sqrt(clamped)
}

/// Negative mean cosine similarity between aligned patches (Eq. of the
/// patch-wise term): −E[ 1/N Σₙ sim(z⁽ⁿ⁾, h⁽ⁿ⁾) ].
pub fn patch_alignment_loss<E: Element>(
    tape: &mut Tape<E>,
    z_enc: Var,
    h_den: Var,
    eps: f64,
) -> Result<Var> {
    if tape.shape(z_enc) != tape.shape(h_den) {
        return Err(Error::Dimension(format!(
            "patch alignment shapes differ: {:?} vs {:?}",
            tape.shape(z_enc),
            tape.shape(h_den)
        )));
    }
    if tape.shape(z_enc).len() != 3 {
        return Err(Error::Dimension("patch alignment wants [b, N, D]".into()));
    }
    let prod = tape.mul(z_enc, h_den)?;
    let dots = tape.sum_axis(prod, 2)?; // [b, N]
    let fz = row_norm_floor(tape, z_enc, eps)?;
    let fh = row_norm_floor(tape, h_den, eps)?;
    let denom = tape.mul(fz, fh)?;
    let cos = tape.div(dots, denom)?;
    let mean = tape.mean_all(cos);
    Ok(tape.neg(mean))
}

/// Cosine autocorrelation matrix A[i,j] = (hᵢ·hⱼ)/(max(‖hᵢ‖,ε)·max(‖hⱼ‖,ε))
/// per batch element: [b, N, D] → [b, N, N].
pub fn autocorrelation<E: Element>(tape: &mut Tape<E>, h: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "autocorrelation wants [b, N, D], got {:?}",
            shape
        )));
    }
    let (b, n) = (shape[0], shape[1]);
    let f = row_norm_floor(tape, h, eps)?; // [b, N]
    let f3 = tape.reshape(f, &[b, n, 1])?;
    let hn = tape.div(h, f3)?;
    let hnt = tape.permute(hn, &[0, 2, 1])?;
    tape.bmm(hn, hnt)
}

/// Mean over the batch of ‖A(z_enc) − A(h_den)‖²_F.
pub fn structural_loss<E: Element>(
    tape: &mut Tape<E>,
    z_enc: Var,
    h_den: Var,
    eps: f64,
) -> Result<Var> {
    let (sz, sh) = (tape.shape(z_enc).to_vec(), tape.shape(h_den).to_vec());
    if sz.len() != 3 || sh.len() != 3 || sz[0] != sh[0] || sz[1] != sh[1] {
        return Err(Error::Dimension(format!(
            "structural loss wants matching [b, N, ·]: {:?} vs {:?}",
            sz, sh
        )));
    }
    let (b, n) = (sz[0], sz[1]);
    let az = autocorrelation(tape, z_enc, eps)?;
    let ah = autocorrelation(tape, h_den, eps)?;
    let d = tape.sub(az, ah)?;
    let sq = tape.mul(d, d)?;
    let rows = tape.reshape(sq, &[b, n * n])?;
    let per_sample = tape.sum_axis(rows, 1)?;
    Ok(tape.mean_all(per_sample))
}

/// Discriminator objective: −E[log σ(D(z_enc))] − E[log(1−σ(D(h_den)))],
/// evaluated in logit space as softplus(−ℓ_real) + softplus(ℓ_fake).
///
/// ψ is registered trainable; both feature batches enter as constants
/// (h_den is detached by taking it as a plain tensor).
pub fn discriminator_loss<E: Element>(
    tape: &mut Tape<E>,
    disc: &Discriminator<E>,
    z_enc: &Tensor<E>,
    h_den: &Tensor<E>,
) -> Result<(Var, DiscriminatorVars)> {
    let vars = disc.register(tape, true);
    let real = tape.constant(z_enc.clone());
    let fake = tape.constant(h_den.clone());
    let logit_real = disc.forward(tape, &vars, real)?;
    let logit_fake = disc.forward(tape, &vars, fake)?;
    let neg_real = tape.neg(logit_real);
    let sp_real = tape.softplus(neg_real);
    let sp_fake = tape.softplus(logit_fake);
    let a = tape.mean_all(sp_real);
    let b = tape.mean_all(sp_fake);
    let loss = tape.add(a, b)?;
    Ok((loss, vars))
}

/// Non-saturating generator objective: −E[log σ(D(h_den))] =
/// E[softplus(−D(h_den))]. ψ enters as constants; gradient reaches only
/// h_den (and through it θ and the projection head).
pub fn adversarial_loss<E: Element>(
    tape: &mut Tape<E>,
    disc: &Discriminator<E>,
    h_den: Var,
) -> Result<Var> {
    let vars = disc.register(tape, false);
    let logits = disc.forward(tape, &vars, h_den)?;
    let neg = tape.neg(logits);
    let sp = tape.softplus(neg);
    Ok(tape.mean_all(sp))
}

/// Joint objective: velocity + λ·patch + β·structural + γ·adversarial,
/// composed in that order. Disabled terms contribute 0 and report 0.
pub fn total_loss<E: Element>(
    tape: &mut Tape<E>,
    cfg: &AlignmentConfig,
    velocity: Var,
    patch: Option<Var>,
    structural: Option<Var>,
    adversarial: Option<Var>,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let mut total = velocity;
    let mut bd = LossBreakdown {
        velocity: tape.value(velocity).item().to_f64(),
        ..Default::default()
    };
    if let Some(p) = patch {
        bd.patch = tape.value(p).item().to_f64();
        let w = tape.scale(p, cfg.patch_weight());
        total = tape.add(total, w)?;
    }
    if let Some(s) = structural {
        bd.structural = tape.value(s).item().to_f64();
        let w = tape.scale(s, cfg.structural_weight());
        total = tape.add(total, w)?;
    }
    if let Some(a) = adversarial {
        bd.adversarial = tape.value(a).item().to_f64();
        let w = tape.scale(a, cfg.adversarial_weight());
        total = tape.add(total, w)?;
    }
    bd.total = tape.value(total).item().to_f64();
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::DiscriminatorConfig;
    use crate::rng;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn patch_loss_self_similarity_is_minus_one() {
        let z = rng::randn::<f64>(&mut rng::seeded(0), &[2, 4, 8]);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let hv = tape.leaf(z);
        let l = patch_alignment_loss(&mut tape, zv, hv, COSINE_EPS).unwrap();
        assert!((tape.value(l).item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn patch_loss_orthogonal_is_zero() {
        let z = t64(&[1.0, 0.0, 0.0, 1.0], &[1, 2, 2]);
        let h = t64(&[0.0, 2.0, 3.0, 0.0], &[1, 2, 2]);
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let hv = tape.leaf(h);
        let l = patch_alignment_loss(&mut tape, zv, hv, COSINE_EPS).unwrap();
        assert!(tape.value(l).item().abs() < 1e-14);
    }

    #[test]
    fn patch_loss_hand_example() {
        // z = [[1,0],[0,1]], h = [[1,1],[1,0]] → −(cos45° + 0)/2
        let z = t64(&[1.0, 0.0, 0.0, 1.0], &[1, 2, 2]);
        let h = t64(&[1.0, 1.0, 1.0, 0.0], &[1, 2, 2]);
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let hv = tape.leaf(h);
        let l = patch_alignment_loss(&mut tape, zv, hv, COSINE_EPS).unwrap();
        let expect = -(0.5f64.sqrt() + 0.0) / 2.0;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn autocorrelation_unit_diag_and_known_cases() {
        let h = rng::randn::<f64>(&mut rng::seeded(1), &[2, 3, 5]);
        let mut tape = Tape::new();
        let hv = tape.leaf(h);
        let a = autocorrelation(&mut tape, hv, COSINE_EPS).unwrap();
        let av = tape.value(a);
        assert_eq!(av.shape(), &[2, 3, 3]);
        for b in 0..2 {
            for i in 0..3 {
                assert!((av.data()[b * 9 + i * 3 + i] - 1.0).abs() < 1e-12);
            }
        }

        // orthogonal rows → identity
        let h = t64(&[1.0, 0.0, 0.0, 2.0], &[1, 2, 2]);
        let mut tape = Tape::new();
        let hv = tape.leaf(h);
        let a = autocorrelation(&mut tape, hv, COSINE_EPS).unwrap();
        let av = tape.value(a).data().to_vec();
        for (got, want) in av.iter().zip(&[1.0, 0.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }

        // identical rows → all-ones
        let h = t64(&[0.5, -1.0, 0.5, -1.0], &[1, 2, 2]);
        let mut tape = Tape::new();
        let hv = tape.leaf(h);
        let a = autocorrelation(&mut tape, hv, COSINE_EPS).unwrap();
        for &x in tape.value(a).data() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn autocorrelation_exactly_symmetric() {
        let h = rng::randn::<f64>(&mut rng::seeded(2), &[3, 6, 4]);
        let mut tape = Tape::new();
        let hv = tape.leaf(h);
        let a = autocorrelation(&mut tape, hv, COSINE_EPS).unwrap();
        let av = tape.value(a);
        for b in 0..3 {
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(
                        av.data()[b * 36 + i * 6 + j],
                        av.data()[b * 36 + j * 6 + i]
                    );
                }
            }
        }
    }

    #[test]
    fn structural_loss_zero_on_self_and_scale() {
        let x = rng::randn::<f64>(&mut rng::seeded(3), &[2, 4, 6]);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.leaf(x.clone());
        let l = structural_loss(&mut tape, a, b, COSINE_EPS).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        // positive scaling leaves the cosine autocorrelation unchanged
        for c in [0.5, 2.0] {
            let mut tape = Tape::new();
            let a = tape.constant(x.clone());
            let scaled = tape.leaf(x.scale(c));
            let l = structural_loss(&mut tape, a, scaled, COSINE_EPS).unwrap();
            assert_eq!(tape.value(l).item(), 0.0, "scale {}", c);
        }
        for c in [10.0, 0.3] {
            let mut tape = Tape::new();
            let a = tape.constant(x.clone());
            let scaled = tape.leaf(x.scale(c));
            let l = structural_loss(&mut tape, a, scaled, COSINE_EPS).unwrap();
            assert!(tape.value(l).item().abs() < 1e-20, "scale {}", c);
        }
    }

    #[test]
    fn structural_loss_hand_example() {
        // A(z) = I (orthogonal rows), A(h) = all-ones (identical rows)
        let z = t64(&[1.0, 0.0, 0.0, 1.0], &[1, 2, 2]);
        let h = t64(&[1.0, 2.0, 1.0, 2.0], &[1, 2, 2]);
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let hv = tape.leaf(h);
        let l = structural_loss(&mut tape, zv, hv, COSINE_EPS).unwrap();
        assert!((tape.value(l).item() - 2.0).abs() < 1e-12);
    }

    fn zero_logit_disc() -> Discriminator<f64> {
        let mut d = Discriminator::init(
            DiscriminatorConfig {
                in_dim: 4,
                width: 4,
            },
            &mut rng::seeded(4),
        );
        for (name, t) in d.params_mut() {
            if name.contains("head") {
                *t = Tensor::zeros(t.shape());
            }
        }
        d
    }

    #[test]
    fn disc_loss_at_zero_logits_is_two_log_two() {
        let d = zero_logit_disc();
        let z = rng::randn::<f64>(&mut rng::seeded(5), &[3, 4, 4]);
        let h = rng::randn::<f64>(&mut rng::seeded(6), &[3, 4, 4]);
        let mut tape = Tape::new();
        let (l, _) = discriminator_loss(&mut tape, &d, &z, &h).unwrap();
        assert!((tape.value(l).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn disc_loss_matches_softplus_of_logits() {
        // formula check against an independent forward of the same net
        let d = Discriminator::init(
            DiscriminatorConfig {
                in_dim: 4,
                width: 4,
            },
            &mut rng::seeded(12),
        );
        let z = rng::randn::<f64>(&mut rng::seeded(7), &[3, 4, 4]);
        let h = rng::randn::<f64>(&mut rng::seeded(13), &[3, 4, 4]);
        let logits = |x: &Tensor<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = d.register(&mut tape, false);
            let xv = tape.constant(x.clone());
            let out = d.forward(&mut tape, &vars, xv).unwrap();
            tape.value(out).data().to_vec()
        };
        let lr = logits(&z);
        let lf = logits(&h);
        let expect = lr
            .iter()
            .map(|&x| crate::tensor::kernels::softplus(-x))
            .sum::<f64>()
            / lr.len() as f64
            + lf.iter()
                .map(|&x| crate::tensor::kernels::softplus(x))
                .sum::<f64>()
                / lf.len() as f64;
        let mut tape = Tape::new();
        let (l, _) = discriminator_loss(&mut tape, &d, &z, &h).unwrap();
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn disc_loss_perfect_discriminator_limit() {
        // ℓ_real → +∞, ℓ_fake → −∞ drives softplus(−ℓr) + softplus(ℓf) → 0
        let l: f64 = crate::tensor::kernels::softplus(-50.0f64)
            + crate::tensor::kernels::softplus(-50.0f64);
        assert!(l < 1e-20);
        // and the generator loss at logit → +∞ vanishes too
        assert!(crate::tensor::kernels::softplus(-60.0f64) < 1e-20);
    }

    #[test]
    fn adversarial_loss_known_values() {
        let d = zero_logit_disc();
        let h = rng::randn::<f64>(&mut rng::seeded(8), &[3, 4, 4]);
        let mut tape = Tape::new();
        let hv = tape.leaf(h.with_grad());
        let l = adversarial_loss(&mut tape, &d, hv).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adversarial_gradient_reaches_only_features() {
        let d = zero_logit_disc();
        let h = rng::randn::<f64>(&mut rng::seeded(9), &[2, 4, 4]);
        let mut tape = Tape::new();
        let hv = tape.leaf(h.with_grad());
        let l = adversarial_loss(&mut tape, &d, hv).unwrap();
        let grads = tape.backward(l).unwrap();
        // only the feature leaf is trainable on this tape
        assert_eq!(grads.len(), 1);
        assert!(grads.get(hv).is_some());
    }

    #[test]
    fn discriminator_gradient_reaches_only_psi() {
        let d = zero_logit_disc();
        let z = rng::randn::<f64>(&mut rng::seeded(10), &[2, 4, 4]);
        let h = rng::randn::<f64>(&mut rng::seeded(11), &[2, 4, 4]);
        let mut tape = Tape::new();
        let (l, vars) = discriminator_loss(&mut tape, &d, &z, &h).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.len(), vars.ordered().len());
        for v in vars.ordered() {
            assert!(grads.get(v).is_some());
        }
    }

    #[test]
    fn total_loss_reduces_to_velocity() {
        let cfg = AlignmentConfig {
            lambda: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::scalar(1.25));
        let (total, bd) = total_loss(&mut tape, &cfg, v, None, None, None).unwrap();
        assert_eq!(tape.value(total).item(), 1.25);
        assert_eq!(bd.total, bd.velocity);
        assert_eq!(bd.patch, 0.0);
    }

    #[test]
    fn total_loss_arithmetic_example() {
        let cfg = AlignmentConfig::default(); // λ=0.5 β=0.5 γ=0.05
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::scalar(1.0));
        let p = tape.leaf(Tensor::scalar(-0.5));
        let s = tape.leaf(Tensor::scalar(2.0));
        let a = tape.leaf(Tensor::scalar(0.7));
        let (total, bd) =
            total_loss(&mut tape, &cfg, v, Some(p), Some(s), Some(a)).unwrap();
        assert!((tape.value(total).item() - 1.785).abs() < 1e-12);
        assert!((bd.total - 1.785).abs() < 1e-12);
    }

    #[test]
    fn total_loss_patch_only_matches_two_term_objective() {
        // β=γ=0 must equal velocity + λ·patch exactly
        let cfg = AlignmentConfig {
            beta: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::scalar(0.73));
        let p = tape.leaf(Tensor::scalar(-0.41));
        let (total, _) = total_loss(&mut tape, &cfg, v, Some(p), None, None).unwrap();
        assert_eq!(tape.value(total).item(), 0.73 + 0.5 * (-0.41));
    }

    #[test]
    fn negative_weight_rejected() {
        let cfg = AlignmentConfig {
            lambda: -0.1,
            ..Default::default()
        };
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::scalar(1.0));
        assert!(matches!(
            total_loss(&mut tape, &cfg, v, None, None, None),
            Err(Error::Config(_))
        ));
    }
}
