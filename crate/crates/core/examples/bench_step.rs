use repalign::config::RunConfig;
use repalign::trainer::TrainState;
use std::time::Instant;

fn main() {
    for (hd, layers, label) in [(64usize, 6usize, "h64 L6"), (128, 6, "h128 L6")] {
        let mut cfg = RunConfig::toy();
        cfg.model.hidden_dim = hd;
        cfg.model.layers = layers;
        let mut st = TrainState::<f32>::new(cfg).unwrap();
        for _ in 0..3 { st.train_step().unwrap(); }
        let t0 = Instant::now();
        let n = 40;
        for _ in 0..n { st.train_step().unwrap(); }
        let dt = t0.elapsed().as_secs_f64();
        println!("{}: {:.1} ms/step (full align)", label, dt / n as f64 * 1e3);

        let mut cfg2 = RunConfig::toy();
        cfg2.model.hidden_dim = hd;
        cfg2.model.layers = layers;
        cfg2.alignment.lambda = 0.0; cfg2.alignment.beta = 0.0; cfg2.alignment.gamma = 0.0;
        let mut st2 = TrainState::<f32>::new(cfg2).unwrap();
        for _ in 0..3 { st2.train_step().unwrap(); }
        let t0 = Instant::now();
        for _ in 0..n { st2.train_step().unwrap(); }
        let dt = t0.elapsed().as_secs_f64();
        println!("{}: {:.1} ms/step (velocity only)", label, dt / n as f64 * 1e3);
    }
}
