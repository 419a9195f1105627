use repalign::config::RunConfig;
use repalign::trainer::TrainState;

fn main() {
    let mut cfg = RunConfig::toy();
    cfg.model.hidden_dim = 64;
    cfg.alignment.lambda = 0.0;
    cfg.alignment.beta = 0.0;
    cfg.alignment.gamma = 0.0;
    let mut st = TrainState::<f32>::new(cfg).unwrap();
    for _ in 0..3 {
        st.train_step().unwrap();
    }
    let t0 = std::time::Instant::now();
    for _ in 0..20 {
        st.train_step().unwrap();
    }
    println!("velocity-only: {:.1} ms/step", t0.elapsed().as_secs_f64() / 20.0 * 1e3);
    #[cfg(feature = "opprof")]
    repalign::tensor::tape::opprof::dump_and_reset();
}
