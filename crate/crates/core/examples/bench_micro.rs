use repalign::tensor::kernels;
use std::time::Instant;

fn timeit(name: &str, mut f: impl FnMut(), n: usize) {
    let t0 = Instant::now();
    for _ in 0..n { f(); }
    println!("{}: {:.3} ms", name, t0.elapsed().as_secs_f64() / n as f64 * 1e3);
}

fn main() {
    let a = vec![0.5f32; 1024 * 64];
    let b = vec![0.5f32; 64 * 192];
    timeit("matmul 1024x64x192", || { let _ = kernels::matmul(&a, &b, 1024, 64, 192); }, 50);

    let x = vec![0.5f32; 64 * 16 * 4 * 16];
    timeit("permute [64,16,4,16]", || { let _ = kernels::permute(&x, &[64, 16, 4, 16], &[0, 2, 1, 3]); }, 50);

    let big = vec![0.5f32; 64 * 16 * 64];
    timeit("layernorm 1024x64", || { let _ = kernels::layernorm_rows(&big, 1024, 64, 1e-5f32); }, 50);

    let attn = vec![0.5f32; 256 * 16 * 16];
    timeit("softmax 4096x16", || { let _ = kernels::softmax_rows(&attn, 4096, 16); }, 50);

    let h1 = vec![0.5f32; 64 * 16 * 256];
    timeit("silu map 262k", || { let _: Vec<f32> = h1.iter().map(|&v| kernels::silu(v)).collect(); }, 50);

    timeit("alloc+zero 262k f32", || { let v = vec![0.0f32; 262144]; std::hint::black_box(&v); }, 50);

    let q = vec![0.5f32; 256 * 16 * 16];
    let k = vec![0.5f32; 256 * 16 * 16];
    timeit("bmm 256x16x16x16", || { let _ = kernels::bmm(&q, &k, 256, 16, 16, 16); }, 50);

    timeit("gemm only (matrixmultiply direct)", || {
        let mut c = vec![0.0f32; 1024 * 192];
        unsafe { matrixmultiply_sgemm(&a, &b, &mut c, 1024, 64, 192); }
    }, 50);
}

unsafe fn matrixmultiply_sgemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    // through the same Element path
    use repalign::tensor::Element;
    f32::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, 0.0, c);
}
