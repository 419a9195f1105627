use repalign::tensor::kernels;
use std::time::Instant;

fn main() {
    let n = 262_144usize;
    let x: Vec<f32> = (0..n).map(|i| (i as f32 * 0.001).sin()).collect();

    // map with fresh alloc each time
    let t0 = Instant::now();
    let reps = 100;
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let y: Vec<f32> = x.iter().map(|&v| kernels::gelu_tanh(v)).collect();
        sink += y[1000];
    }
    println!("gelu map fresh-alloc: {:.3} ms ({:.1} ns/elem), sink {}", 
        t0.elapsed().as_secs_f64() / reps as f64 * 1e3,
        t0.elapsed().as_secs_f64() / reps as f64 / n as f64 * 1e9, sink);

    // map into preallocated buffer
    let mut y = vec![0.0f32; n];
    let t0 = Instant::now();
    for _ in 0..reps {
        for i in 0..n {
            y[i] = kernels::gelu_tanh(x[i]);
        }
        sink += y[1000];
    }
    println!("gelu map prealloc: {:.3} ms ({:.1} ns/elem), sink {}", 
        t0.elapsed().as_secs_f64() / reps as f64 * 1e3,
        t0.elapsed().as_secs_f64() / reps as f64 / n as f64 * 1e9, sink);

    // pure alloc+free of 1MB
    let t0 = Instant::now();
    for _ in 0..reps {
        let y = vec![0.0f32; n];
        sink += y[1000];
    }
    println!("alloc 1MB zeroed: {:.3} ms, sink {}", 
        t0.elapsed().as_secs_f64() / reps as f64 * 1e3, sink);

    // silu
    let t0 = Instant::now();
    for _ in 0..reps {
        for i in 0..n {
            y[i] = kernels::silu(x[i]);
        }
        sink += y[1000];
    }
    println!("silu prealloc: {:.3} ms ({:.1} ns/elem), sink {}", 
        t0.elapsed().as_secs_f64() / reps as f64 * 1e3,
        t0.elapsed().as_secs_f64() / reps as f64 / n as f64 * 1e9, sink);
}
