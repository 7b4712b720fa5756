//! Throughput check for the denoiser forward pass; sampling cost is
//! `sample_steps` of these per attack candidate.

use cdma::denoiser::{Denoiser, DenoiserConfig};
use cdma::tensor::Tensor;

fn main() {
    let den = Denoiser::build(
        DenoiserConfig {
            channels: 3,
            size: 8,
            base_width: 16,
            depth: 1,
            time_dim: 32,
        },
        1,
    )
    .unwrap();
    let x = Tensor::full(&[3, 8, 8], 0.4);
    let c = Tensor::full(&[3, 8, 8], 0.6);
    let n = 2000;
    let t0 = std::time::Instant::now();
    for i in 0..n {
        let _ = den.predict_noise(&x, 1 + (i % 2000), &c).unwrap();
    }
    let dt = t0.elapsed();
    println!(
        "{n} predict_noise calls in {dt:?} -> {:.3} ms/call",
        dt.as_secs_f64() * 1e3 / n as f64
    );
}
