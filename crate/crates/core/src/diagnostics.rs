//! Representation diagnostics: patch correlation maps, SVD energy of pooled
//! features, a Gaussian Fréchet distance, and the aggregated alignment
//! report bundle.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::alignment;
use crate::error::{Error, Result};
use crate::interpolant::corrupt_batch;
use crate::rng;
use crate::tensor::linalg::{sym_eigen, sym_sqrt, svd_values};
use crate::tensor::tape::Tape;
use crate::tensor::{Element, Tensor};
use crate::trainer::TrainState;

/// Cosine similarity of patch `ref_idx` to every patch of one
/// representation [N, D]. Row `ref_idx` of the autocorrelation matrix.
pub fn patch_correlation_map(h: &Tensor<f64>, ref_idx: usize, eps: f64) -> Result<Vec<f64>> {
    let shape = h.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "correlation map wants [N, D], got {:?}",
            shape
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if ref_idx >= n {
        return Err(Error::Domain(format!(
            "reference patch {} out of {}",
            ref_idx, n
        )));
    }
    let data = h.data();
    // normalize rows first, then dot: matches the autocorrelation op bitwise
    let mut rows = vec![0.0f64; n * d];
    for i in 0..n {
        let mut sumsq = 0.0;
        for k in 0..d {
            sumsq += data[i * d + k] * data[i * d + k];
        }
        let f = sumsq.max(eps * eps).sqrt();
        for k in 0..d {
            rows[i * d + k] = data[i * d + k] / f;
        }
    }
    let mut out = vec![0.0f64; n];
    for j in 0..n {
        let mut acc = 0.0;
        for k in 0..d {
            acc += rows[ref_idx * d + k] * rows[j * d + k];
        }
        out[j] = acc;
    }
    Ok(out)
}

/// Fraction of squared singular values captured by the top k components.
pub fn svd_energy(features: &Tensor<f64>, k: usize) -> Result<f64> {
    let curve = svd_energy_curve(features)?;
    if k == 0 || k > curve.len() {
        return Err(Error::Domain(format!(
            "k={} outside 1..={}",
            k,
            curve.len()
        )));
    }
    Ok(curve[k - 1])
}

/// Cumulative energy fractions for k = 1..=min(M,D).
pub fn svd_energy_curve(features: &Tensor<f64>) -> Result<Vec<f64>> {
    let sv = svd_values(features)?;
    let mut cum = Vec::with_capacity(sv.len());
    let mut acc = 0.0f64;
    for s in &sv {
        acc += s * s;
        cum.push(acc);
    }
    let total = acc;
    if total == 0.0 {
        return Err(Error::Numeric("zero-energy feature matrix".into()));
    }
    Ok(cum.into_iter().map(|c| c / total).collect())
}

/// Squared 2-Wasserstein distance between Gaussians:
/// ‖Δμ‖² + tr(A + B − 2·(A·B)^{1/2}).
pub fn frechet_gaussian(
    mu_a: &[f64],
    cov_a: &[f64],
    mu_b: &[f64],
    cov_b: &[f64],
) -> Result<f64> {
    let n = mu_a.len();
    if mu_b.len() != n || cov_a.len() != n * n || cov_b.len() != n * n {
        return Err(Error::Dimension(format!(
            "frechet wants means of {} and {0}x{0} covariances",
            n
        )));
    }
    for m in [cov_a, cov_b] {
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (m[i * n + j] - m[j * n + i]).abs();
                let scale = m[i * n + j].abs().max(m[j * n + i].abs()).max(1.0);
                if d > 1e-8 * scale {
                    return Err(Error::Domain("covariance matrix is not symmetric".into()));
                }
            }
        }
    }
    let mut mean_term = 0.0;
    for i in 0..n {
        let d = mu_a[i] - mu_b[i];
        mean_term += d * d;
    }
    // tr((A·B)^{1/2}) via the symmetric form: eigenvalues of S·B·S, S=A^{1/2}
    let s = sym_sqrt(cov_a, n)?;
    let mut sb = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += s[i * n + k] * cov_b[k * n + j];
            }
            sb[i * n + j] = acc;
        }
    }
    let mut sbs = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += sb[i * n + k] * s[k * n + j];
            }
            sbs[i * n + j] = acc;
        }
    }
    // enforce exact symmetry before the eigen solve
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (sbs[i * n + j] + sbs[j * n + i]);
            sbs[i * n + j] = avg;
            sbs[j * n + i] = avg;
        }
    }
    let eig = sym_eigen(&sbs, n)?;
    let tr_sqrt: f64 = eig.values.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..n).map(|i| cov_a[i * n + i]).sum();
    let tr_b: f64 = (0..n).map(|i| cov_b[i * n + i]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

/// Sample mean and covariance of rows ([n, d] → (d, d×d)).
pub fn gaussian_moments(samples: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = samples.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Dimension(format!(
            "moments want [n>=2, d], got {:?}",
            shape
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let data = samples.data();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += data[i * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for i in 0..n {
        for a in 0..d {
            let da = data[i * d + a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (data[i * d + b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok((mean, cov))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorrMap {
    pub image: usize,
    pub patch: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AlignmentReport {
    /// Mean patch cosine similarity (−L_patch); absent when raw hidden
    /// states of a different width are probed.
    pub mean_patch_cosine: Option<f64>,
    pub mean_structural_loss: f64,
    pub hidden_energy_curve: Vec<f64>,
    pub encoder_energy_curve: Vec<f64>,
    pub images: usize,
    pub grid: (usize, usize),
    pub t_probe: f64,
    pub use_raw_hidden: bool,
    pub corr_maps: Vec<CorrMap>,
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub t_probe: f64,
    pub eval_batches: u64,
    pub eval_batch_size: usize,
    pub ref_patches: Vec<usize>,
    pub use_raw_hidden: bool,
    pub seed: u64,
}

/// Probe hidden states at noise level `t_probe` over a seeded evaluation
/// set and aggregate the alignment diagnostics.
pub fn alignment_report<E: Element>(
    state: &TrainState<E>,
    opts: &ReportOptions,
) -> Result<AlignmentReport>
where
    StandardNormal: Distribution<E>,
{
    if !(opts.t_probe > 0.0 && opts.t_probe <= 1.0) {
        return Err(Error::Domain(format!(
            "t_probe {} outside (0,1]",
            opts.t_probe
        )));
    }
    if opts.eval_batches == 0 || opts.eval_batch_size == 0 {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let mut z_parts = Vec::new();
    let mut h_parts = Vec::new();
    for k in 0..opts.eval_batches {
        let (x0, labels) = state.dataset.eval_batch(k, opts.eval_batch_size)?;
        let z_enc = state.encoder.encode(&x0)?;
        let mut r = rng::stream(opts.seed, k);
        let eps = rng::randn::<E>(&mut r, x0.shape());
        let t = vec![opts.t_probe; labels.len()];
        let x_t = corrupt_batch(&x0, &eps, &t)?;
        let mut tape = Tape::new();
        let dvars = state.denoiser.register(&mut tape, false);
        let (_, z_den) = state.denoiser.forward(&mut tape, &dvars, &x_t, &t, &labels)?;
        let h = if opts.use_raw_hidden {
            tape.value(z_den).clone()
        } else {
            let pvars = state.projection.register(&mut tape, false);
            let h_den = state.projection.forward(&mut tape, &pvars, z_den)?;
            tape.value(h_den).clone()
        };
        z_parts.push(z_enc);
        h_parts.push(h);
    }
    report_from_features(&z_parts, &h_parts, opts)
}

/// Core aggregation over per-batch feature tensors ([b, N, D] each).
pub fn report_from_features<E: Element>(
    z_batches: &[Tensor<E>],
    h_batches: &[Tensor<E>],
    opts: &ReportOptions,
) -> Result<AlignmentReport> {
    if z_batches.is_empty() || z_batches.len() != h_batches.len() {
        return Err(Error::Contract("mismatched evaluation batches".into()));
    }
    let eps = alignment::COSINE_EPS;
    let widths_match = z_batches[0].shape()[2] == h_batches[0].shape()[2];
    let mut cos_sum = 0.0f64;
    let mut struc_sum = 0.0f64;
    let mut images = 0usize;
    for (z, h) in z_batches.iter().zip(h_batches) {
        let b = z.shape()[0];
        images += b;
        let mut tape = Tape::<E>::new();
        let zv = tape.constant(z.clone());
        let hv = tape.constant(h.clone());
        if widths_match {
            let l = alignment::patch_alignment_loss(&mut tape, zv, hv, eps)?;
            cos_sum += -tape.value(l).item().to_f64() * b as f64;
        }
        let s = alignment::structural_loss(&mut tape, zv, hv, eps)?;
        struc_sum += tape.value(s).item().to_f64() * b as f64;
    }
    let mean_patch_cosine = widths_match.then_some(cos_sum / images as f64);
    let mean_structural_loss = struc_sum / images as f64;

    let pool = |batches: &[Tensor<E>]| -> Result<Tensor<f64>> {
        let d = batches[0].shape()[2];
        let mut rows = Vec::new();
        for b in batches {
            rows.extend(b.data().iter().map(|x| x.to_f64()));
        }
        let m = rows.len() / d;
        Tensor::new(rows, &[m, d])
    };
    let hidden_energy_curve = svd_energy_curve(&pool(h_batches)?)?;
    let encoder_energy_curve = svd_energy_curve(&pool(z_batches)?)?;

    let n = h_batches[0].shape()[1];
    let g = (n as f64).sqrt().round() as usize;
    let grid = if g * g == n { (g, g) } else { (1, n) };
    let mut corr_maps = Vec::new();
    let first = &h_batches[0];
    let d = first.shape()[2];
    for image in 0..first.shape()[0].min(4) {
        let rows: Vec<f64> = first.data()[image * n * d..(image + 1) * n * d]
            .iter()
            .map(|x| x.to_f64())
            .collect();
        let rep = Tensor::new(rows, &[n, d])?;
        for &patch in &opts.ref_patches {
            if patch >= n {
                return Err(Error::Domain(format!(
                    "reference patch {} out of {}",
                    patch, n
                )));
            }
            corr_maps.push(CorrMap {
                image,
                patch,
                values: patch_correlation_map(&rep, patch, eps)?,
            });
        }
    }

    Ok(AlignmentReport {
        mean_patch_cosine,
        mean_structural_loss,
        hidden_energy_curve,
        encoder_energy_curve,
        images,
        grid,
        t_probe: opts.t_probe,
        use_raw_hidden: opts.use_raw_hidden,
        corr_maps,
    })
}

/// Write `report.json`, `energy_curve.csv` and `corrmap_<image>_<patch>.csv`.
pub fn write_report_bundle(report: &AlignmentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_vec_pretty(report)?,
    )?;

    let mut f = std::fs::File::create(dir.join("energy_curve.csv"))?;
    writeln!(f, "k,hidden_energy,encoder_energy")?;
    let kmax = report
        .hidden_energy_curve
        .len()
        .max(report.encoder_energy_curve.len());
    for k in 0..kmax {
        let h = report
            .hidden_energy_curve
            .get(k)
            .map(|v| v.to_string())
            .unwrap_or_default();
        let e = report
            .encoder_energy_curve
            .get(k)
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(f, "{},{},{}", k + 1, h, e)?;
    }

    for map in &report.corr_maps {
        let path = dir.join(format!("corrmap_{}_{}.csv", map.image, map.patch));
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "grid,{},{}", report.grid.0, report.grid.1)?;
        writeln!(f, "row,col,value")?;
        for (i, v) in map.values.iter().enumerate() {
            writeln!(f, "{},{},{}", i / report.grid.1, i % report.grid.1, v)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn correlation_map_reference_is_one() {
        let h = rng::randn::<f64>(&mut rng::seeded(0), &[6, 4]);
        let m = patch_correlation_map(&h, 2, 1e-8).unwrap();
        assert!((m[2] - 1.0).abs() < 1e-12);
        assert!(m.iter().all(|v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(v)));
    }

    #[test]
    fn correlation_map_orthogonal_is_one_hot() {
        let h = Tensor::new(
            vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0],
            &[3, 3],
        )
        .unwrap();
        let m = patch_correlation_map(&h, 1, 1e-8).unwrap();
        assert!((m[1] - 1.0).abs() < 1e-12);
        assert!(m[0].abs() < 1e-12 && m[2].abs() < 1e-12);
    }

    #[test]
    fn correlation_map_matches_autocorrelation_row() {
        let h = rng::randn::<f64>(&mut rng::seeded(1), &[5, 7]);
        let m = patch_correlation_map(&h, 3, 1e-8).unwrap();
        let mut tape = Tape::<f64>::new();
        let hv = tape.leaf(h.reshaped(&[1, 5, 7]).unwrap());
        let a = alignment::autocorrelation(&mut tape, hv, 1e-8).unwrap();
        let row = &tape.value(a).data()[3 * 5..4 * 5];
        assert_eq!(&m[..], row);
    }

    #[test]
    fn duplicated_patch_shows_twice() {
        let mut data = rng::randn::<f64>(&mut rng::seeded(2), &[4, 3])
            .data()
            .to_vec();
        for k in 0..3 {
            data[3 * 3 + k] = data[k]; // patch 3 duplicates patch 0
        }
        let h = Tensor::new(data, &[4, 3]).unwrap();
        let m = patch_correlation_map(&h, 0, 1e-8).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert!((m[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_energy_known_cases() {
        // rank-1: all energy in the first value
        let u = [1.0f64, 2.0, -1.0];
        let v = [0.5f64, 1.5];
        let mut data = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                data[i * 2 + j] = u[i] * v[j];
            }
        }
        let m = Tensor::new(data, &[3, 2]).unwrap();
        assert!((svd_energy(&m, 1).unwrap() - 1.0).abs() < 1e-12);

        // identity: energy is k/n
        let eye = Tensor::from_fn(&[100, 100], |i| if i % 101 == 0 { 1.0 } else { 0.0 });
        assert!((svd_energy(&eye, 50).unwrap() - 0.5).abs() < 1e-12);

        // completeness and monotonicity
        let r = rng::randn::<f64>(&mut rng::seeded(3), &[64, 32]);
        let curve = svd_energy_curve(&r).unwrap();
        assert!((curve[curve.len() - 1] - 1.0).abs() < 1e-10);
        assert!(curve.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(svd_energy(&r, 0).is_err());
        assert!(svd_energy(&r, 33).is_err());
    }

    #[test]
    fn frechet_known_values() {
        // identical Gaussians
        let mu = [0.3, -1.0];
        let cov = [2.0, 0.3, 0.3, 1.0];
        assert!(frechet_gaussian(&mu, &cov, &mu, &cov).unwrap() < 1e-10);

        // 1-D unit variance, means 0 and 3 → 9
        let d = frechet_gaussian(&[0.0], &[1.0], &[3.0], &[1.0]).unwrap();
        assert!((d - 9.0).abs() < 1e-10);

        // commuting diagonals: diag(1,4) vs diag(4,1) → 2·5 − 2·(2+2) = 2
        let d = frechet_gaussian(
            &[0.0, 0.0],
            &[1.0, 0.0, 0.0, 4.0],
            &[0.0, 0.0],
            &[4.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        assert!((d - 2.0).abs() < 1e-10);
    }

    #[test]
    fn frechet_symmetric() {
        let mu_a = [0.1, 0.5, -0.2];
        let mu_b = [-0.4, 0.0, 0.3];
        let cov_a = [1.0, 0.2, 0.0, 0.2, 2.0, 0.1, 0.0, 0.1, 0.5];
        let cov_b = [0.8, -0.1, 0.0, -0.1, 1.5, 0.2, 0.0, 0.2, 1.1];
        let ab = frechet_gaussian(&mu_a, &cov_a, &mu_b, &cov_b).unwrap();
        let ba = frechet_gaussian(&mu_b, &cov_b, &mu_a, &cov_a).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab > 0.0);
    }

    #[test]
    fn frechet_rejects_asymmetric_covariance() {
        let bad = [1.0, 0.5, -0.5, 1.0];
        assert!(frechet_gaussian(&[0.0, 0.0], &bad, &[0.0, 0.0], &bad).is_err());
    }

    #[test]
    fn moments_recover_known_gaussian() {
        let mut r = rng::seeded(4);
        let n = 20_000;
        let samples = Tensor::<f64>::from_fn(&[n, 2], |i| {
            use rand_distr::Distribution;
            let z: f64 = rand_distr::StandardNormal.sample(&mut r);
            if i % 2 == 0 {
                1.0 + z
            } else {
                -2.0 + 0.5 * z
            }
        });
        let (mean, cov) = gaussian_moments(&samples).unwrap();
        assert!((mean[0] - 1.0).abs() < 0.05);
        assert!((mean[1] + 2.0).abs() < 0.05);
        assert!((cov[0] - 1.0).abs() < 0.05);
        assert!((cov[3] - 0.25).abs() < 0.02);
    }

    #[test]
    fn self_comparison_report() {
        let z = rng::randn::<f64>(&mut rng::seeded(5), &[4, 16, 8]);
        let opts = ReportOptions {
            t_probe: 0.5,
            eval_batches: 1,
            eval_batch_size: 4,
            ref_patches: vec![0],
            use_raw_hidden: false,
            seed: 0,
        };
        let rep = report_from_features(&[z.clone()], &[z], &opts).unwrap();
        assert!((rep.mean_patch_cosine.unwrap() - 1.0).abs() < 1e-10);
        assert!(rep.mean_structural_loss.abs() < 1e-20);
        assert_eq!(rep.hidden_energy_curve, rep.encoder_energy_curve);
        assert_eq!(rep.grid, (4, 4));
    }

    #[test]
    fn random_projection_cosine_concentrates_near_zero() {
        // independent random features: mean cosine within ±0.1 over 256 reps
        let z = rng::randn::<f64>(&mut rng::seeded(6), &[256, 4, 8]);
        let h = rng::randn::<f64>(&mut rng::seeded(7), &[256, 4, 8]);
        let opts = ReportOptions {
            t_probe: 0.5,
            eval_batches: 1,
            eval_batch_size: 256,
            ref_patches: vec![],
            use_raw_hidden: false,
            seed: 0,
        };
        let rep = report_from_features(&[z], &[h], &opts).unwrap();
        assert!(rep.mean_patch_cosine.unwrap().abs() < 0.1);
    }
}
