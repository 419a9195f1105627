use repalign::config::RunConfig;
use repalign::interpolant::{corrupt_batch, sample_t, velocity_loss, velocity_target};
use repalign::networks::Denoiser;
use repalign::rng;
use repalign::tensor::tape::Tape;
use std::time::Instant;

fn main() {
    let mut cfg = RunConfig::toy();
    cfg.model.hidden_dim = 64;
    let dcfg = cfg.denoiser_config();
    let net = Denoiser::<f32>::init(dcfg, &mut rng::seeded(0)).unwrap();
    let ds = repalign::data::SyntheticDataset::<f32>::new(cfg.dataset.clone()).unwrap();
    let (x0, labels) = ds.batch(0, 64).unwrap();
    let mut r = rng::seeded(1);
    let t = sample_t(&mut r, 64);
    let eps = rng::randn(&mut r, x0.shape());
    let x_t = corrupt_batch(&x0, &eps, &t).unwrap();
    let target = velocity_target(&x0, &eps).unwrap();

    // forward only
    let t0 = Instant::now();
    let n = 20;
    for _ in 0..n {
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, false);
        let (_v, _z) = net.forward(&mut tape, &vars, &x_t, &t, &labels).unwrap();
    }
    println!("forward only: {:.1} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);

    // forward + loss + backward
    let t0 = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, true);
        let (v, _z) = net.forward(&mut tape, &vars, &x_t, &t, &labels).unwrap();
        let loss = velocity_loss(&mut tape, v, &target).unwrap();
        let _g = tape.backward(loss).unwrap();
    }
    println!("fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);

    let enc = repalign::networks::FrozenEncoder::<f32>::init(cfg.encoder_config());
    let t0 = Instant::now();
    for _ in 0..n {
        let _z = enc.encode(&x0).unwrap();
    }
    println!("encoder fwd: {:.1} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);
}
