//! Joint optimization loop: one generator update per step on the combined
//! objective, one discriminator update every fifth step on the same
//! minibatch with detached features.
//!
//! Per-step randomness (timesteps, noise, label dropout) comes from ChaCha
//! stream `step` of the training seed, and batches from stream `step` of
//! the dataset seed, so a resumed run replays the exact remaining stream.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::alignment::{
    adversarial_loss, discriminator_loss, patch_alignment_loss, structural_loss, total_loss,
    LossBreakdown,
};
use crate::config::RunConfig;
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::interpolant::{corrupt_batch, sample_t, velocity_loss, velocity_target};
use crate::networks::{Denoiser, Discriminator, FrozenEncoder, ProjectionMlp};
use crate::optim::{grad_norm, AdamState};
use crate::rng;
use crate::tensor::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Generator updates per discriminator update.
pub const DISC_UPDATE_PERIOD: u64 = 5;

/// Stream offsets reserved for parameter initialization draws.
const INIT_STREAM_BASE: u64 = 1 << 41;

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub losses: LossBreakdown,
    pub grad_norm_gen: f64,
    pub grad_norm_disc: f64,
    pub wall_ms: f64,
}

impl StepMetrics {
    /// One metrics.jsonl object.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "step": self.step,
            "loss_total": self.losses.total,
            "loss_velocity": self.losses.velocity,
            "loss_patch": self.losses.patch,
            "loss_struc": self.losses.structural,
            "loss_adv": self.losses.adversarial,
            "loss_disc": self.losses.disc,
            "grad_norm_gen": self.grad_norm_gen,
            "grad_norm_disc": self.grad_norm_disc,
            "wall_ms": self.wall_ms,
        })
        .to_string()
    }
}

pub struct TrainState<E: Element> {
    pub cfg: RunConfig,
    pub dataset: SyntheticDataset<E>,
    pub denoiser: Denoiser<E>,
    pub encoder: FrozenEncoder<E>,
    pub projection: ProjectionMlp<E>,
    pub discriminator: Discriminator<E>,
    pub gen_opt: AdamState<E>,
    pub disc_opt: AdamState<E>,
    pub global_step: u64,
    pub disc_step: u64,
}

impl<E: Element> TrainState<E>
where
    StandardNormal: Distribution<E>,
{
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let dataset = SyntheticDataset::new(cfg.dataset.clone())?;
        let denoiser = Denoiser::init(
            cfg.denoiser_config(),
            &mut rng::stream(seed, INIT_STREAM_BASE),
        )?;
        let encoder = FrozenEncoder::init(cfg.encoder_config());
        let projection = ProjectionMlp::init(
            cfg.model.hidden_dim,
            cfg.model.encoder_dim,
            &mut rng::stream(seed, INIT_STREAM_BASE + 1),
        );
        let discriminator = Discriminator::init(
            cfg.discriminator_config(),
            &mut rng::stream(seed, INIT_STREAM_BASE + 2),
        );
        let adam = cfg.adam_config();
        let gen_params: Vec<(String, &Tensor<E>)> = denoiser
            .params()
            .into_iter()
            .chain(projection.params())
            .collect();
        let gen_opt = AdamState::new(adam, &gen_params);
        let disc_opt = AdamState::new(adam, &discriminator.params());
        Ok(TrainState {
            cfg,
            dataset,
            denoiser,
            encoder,
            projection,
            discriminator,
            gen_opt,
            disc_opt,
            global_step: 0,
            disc_step: 0,
        })
    }

    /// Draw order per step is fixed: timesteps, noise, dropout mask.
    fn step_draws(&self, step: u64, x0: &Tensor<E>, labels: &[usize]) -> (Vec<f64>, Tensor<E>, Vec<usize>) {
        let mut r = rng::stream(self.cfg.train.seed, step);
        let b = labels.len();
        let t = sample_t(&mut r, b);
        let eps = rng::randn(&mut r, x0.shape());
        let null = self.cfg.dataset.classes;
        let drop = self.cfg.train.label_dropout;
        let labels_in: Vec<usize> = labels
            .iter()
            .map(|&y| if r.gen::<f64>() < drop { null } else { y })
            .collect();
        (t, eps, labels_in)
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        let step = self.global_step;
        let b = self.cfg.train.batch_size;
        let (x0, labels) = self.dataset.batch(step, b)?;
        let (t, eps, labels_in) = self.step_draws(step, &x0, &labels);
        let x_t = corrupt_batch(&x0, &eps, &t)?;
        let target = velocity_target(&x0, &eps)?;

        let acfg = self.cfg.alignment;
        let will_update_disc =
            acfg.adversarial_active() && (self.global_step + 1) % DISC_UPDATE_PERIOD == 0;

        // ── generator pass ───────────────────────────────────────────
        let mut tape = Tape::new();
        let dvars = self.denoiser.register(&mut tape, true);
        let (v_pred, z_den) = self
            .denoiser
            .forward(&mut tape, &dvars, &x_t, &t, &labels_in)?;
        let v_loss = velocity_loss(&mut tape, v_pred, &target)?;

        let mut patch = None;
        let mut struc = None;
        let mut adv = None;
        let mut pvars = None;
        let mut disc_batch: Option<(Tensor<E>, Tensor<E>)> = None;
        if acfg.any_alignment_active() {
            let z_enc = self.encoder.encode(&x0)?;
            let pv = self.projection.register(&mut tape, true);
            let h_den = self.projection.forward(&mut tape, &pv, z_den)?;
            pvars = Some(pv);
            let z_enc_var = tape.constant(z_enc.clone());
            if acfg.patch_active() {
                patch = Some(patch_alignment_loss(
                    &mut tape,
                    z_enc_var,
                    h_den,
                    acfg.cosine_eps,
                )?);
            }
            if acfg.structural_active() {
                struc = Some(structural_loss(
                    &mut tape,
                    z_enc_var,
                    h_den,
                    acfg.cosine_eps,
                )?);
            }
            if acfg.adversarial_active() {
                adv = Some(adversarial_loss(&mut tape, &self.discriminator, h_den)?);
                if will_update_disc {
                    disc_batch = Some((z_enc, tape.value(h_den).clone()));
                }
            }
        }

        let (total_var, mut losses) = total_loss(&mut tape, &acfg, v_loss, patch, struc, adv)?;
        if let Some(term) = losses.first_non_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: term '{}' in {:?}",
                step, term, losses
            )));
        }
        let grads = tape.backward(total_var)?;
        let mut ordered: Vec<Option<Tensor<E>>> = dvars
            .ordered()
            .into_iter()
            .map(|v| grads.get(v).cloned())
            .collect();
        match &pvars {
            Some(pv) => ordered.extend(pv.ordered().into_iter().map(|v| grads.get(v).cloned())),
            None => ordered.extend((0..self.projection.params().len()).map(|_| None)),
        }
        let grad_norm_gen = grad_norm(&ordered);
        if !grad_norm_gen.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite generator gradient at step {}",
                step
            )));
        }
        let gen_params: Vec<(String, &mut Tensor<E>)> = self
            .denoiser
            .params_mut()
            .into_iter()
            .chain(self.projection.params_mut())
            .collect();
        self.gen_opt.update(gen_params, &ordered)?;
        self.global_step += 1;

        // ── discriminator pass (every fifth step) ────────────────────
        let mut grad_norm_disc = 0.0;
        if will_update_disc {
            let (z_enc, h_den) = disc_batch.expect("saved for the disc update");
            let mut dtape = Tape::new();
            let (d_loss, dv) =
                discriminator_loss(&mut dtape, &self.discriminator, &z_enc, &h_den)?;
            losses.disc = dtape.value(d_loss).item().to_f64();
            if !losses.disc.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {}: term 'disc' in {:?}",
                    step, losses
                )));
            }
            let dgrads = dtape.backward(d_loss)?;
            let dlist: Vec<Option<Tensor<E>>> = dv
                .ordered()
                .into_iter()
                .map(|v| dgrads.get(v).cloned())
                .collect();
            grad_norm_disc = grad_norm(&dlist);
            if !grad_norm_disc.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite discriminator gradient at step {}",
                    step
                )));
            }
            self.disc_opt.update(self.discriminator.params_mut(), &dlist)?;
            self.disc_step += 1;
        }
        debug_assert_eq!(self.disc_step, self.disc_step_expected());

        Ok(StepMetrics {
            step,
            losses,
            grad_norm_gen,
            grad_norm_disc,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// floor(global_step / 5) when the adversarial term is active, else 0.
    pub fn disc_step_expected(&self) -> u64 {
        if self.cfg.alignment.adversarial_active() {
            self.global_step / DISC_UPDATE_PERIOD
        } else {
            0
        }
    }

    /// Run until `target_steps`, invoking `sink` after each step.
    pub fn train_to(
        &mut self,
        target_steps: u64,
        mut sink: impl FnMut(&StepMetrics) -> Result<()>,
    ) -> Result<()> {
        while self.global_step < target_steps {
            let m = self.train_step()?;
            sink(&m)?;
        }
        Ok(())
    }
}

/// Append-only metrics.jsonl writer.
pub struct MetricsWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &std::path::Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn append(path: &std::path::Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: std::io::BufWriter::new(
                std::fs::OpenOptions::new().create(true).append(true).open(path)?,
            ),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.out, "{}", m.to_json_line())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
