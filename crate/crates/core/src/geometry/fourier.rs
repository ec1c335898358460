/// `cos(i·π·t / N_t)` for `i < k`.
pub fn fourier_basis(k: usize, t: f64, num_frames: usize) -> Vec<f64> {
    let n = num_frames.max(1) as f64;
    (0..k)
        .map(|i| {
            if i == 0 {
                1.0
            } else {
                (i as f64 * std::f64::consts::PI * t / n).cos()
            }
        })
        .collect()
}

/// Time-varying coefficient `z = Σ f_i cos(iπt/N_t)`.
///
/// The constant term is evaluated as `f_0 · 1.0` so that `k = 1` returns
/// `f_0` unchanged at every timestep.
pub fn eval_fourier(f: &[f64], t: f64, num_frames: usize) -> f64 {
    let n = num_frames.max(1) as f64;
    let mut z = f[0] * 1.0;
    for (i, fi) in f.iter().enumerate().skip(1) {
        z += fi * (i as f64 * std::f64::consts::PI * t / n).cos();
    }
    z
}
