use repalign::rng;
use repalign::tensor::tape::Tape;
use repalign::tensor::Tensor;
use std::time::Instant;

fn main() {
    let b = 64usize;
    let n = 16usize;
    let h = 64usize;
    let heads = 4usize;
    let dh = h / heads;
    let reps = 30;

    let x = rng::randn::<f32>(&mut rng::seeded(0), &[b, n, h]);
    let qkv_w = rng::randn::<f32>(&mut rng::seeded(1), &[h, 3 * h]);
    let qkv_b = rng::randn::<f32>(&mut rng::seeded(2), &[3 * h]);

    // stage 1: linear only
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(qkv_w.clone());
        let bb = tape.constant(qkv_b.clone());
        let _ = tape.linear(xv, w, Some(bb)).unwrap();
    }
    println!("linear qkv: {:.3} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // stage 2: head split (slice + reshape + permute)
    let qkv = rng::randn::<f32>(&mut rng::seeded(3), &[b, n, 3 * h]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let qkvv = tape.constant(qkv.clone());
        for i in 0..3 {
            let s = tape.slice_last(qkvv, i * h, h).unwrap();
            let r = tape.reshape(s, &[b, n, heads, dh]).unwrap();
            let p = tape.permute(r, &[0, 2, 1, 3]).unwrap();
            let _ = tape.reshape(p, &[b * heads, n, dh]).unwrap();
        }
    }
    println!("head split x3: {:.3} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // stage 3: bmm + softmax + bmm
    let q = rng::randn::<f32>(&mut rng::seeded(4), &[b * heads, n, dh]);
    let kt = rng::randn::<f32>(&mut rng::seeded(5), &[b * heads, dh, n]);
    let v = rng::randn::<f32>(&mut rng::seeded(6), &[b * heads, n, dh]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let qv = tape.constant(q.clone());
        let ktv = tape.constant(kt.clone());
        let vv = tape.constant(v.clone());
        let s = tape.bmm(qv, ktv).unwrap();
        let s = tape.scale(s, 0.25);
        let a = tape.softmax(s).unwrap();
        let _ = tape.bmm(a, vv).unwrap();
    }
    println!("attn core: {:.3} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // stage 4: layernorm + modulate
    let sc = rng::randn::<f32>(&mut rng::seeded(7), &[b, 1, h]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let scv = tape.constant(sc.clone());
        let ln = tape.layernorm(xv).unwrap();
        let s1 = tape.add_scalar(scv, 1.0);
        let m = tape.mul(ln, s1).unwrap();
        let _ = tape.add(m, scv).unwrap();
    }
    println!("ln+modulate: {:.3} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // stage 5: mlp
    let fc1_w = rng::randn::<f32>(&mut rng::seeded(8), &[h, 4 * h]);
    let fc1_b = Tensor::<f32>::zeros(&[4 * h]);
    let fc2_w = rng::randn::<f32>(&mut rng::seeded(9), &[4 * h, h]);
    let fc2_b = Tensor::<f32>::zeros(&[h]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let w1 = tape.constant(fc1_w.clone());
        let b1 = tape.constant(fc1_b.clone());
        let w2 = tape.constant(fc2_w.clone());
        let b2 = tape.constant(fc2_b.clone());
        let h1 = tape.linear(xv, w1, Some(b1)).unwrap();
        let g = tape.gelu_tanh(h1);
        let _ = tape.linear(g, w2, Some(b2)).unwrap();
    }
    println!("mlp: {:.3} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
