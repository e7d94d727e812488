//! Synthetic screens, tensor files, channel projection and compute estimates.

mod screen;
mod tensor_file;

pub use screen::{control_pool, sample_conditions, sample_screen, PhiKind, ScreenConfig, ScreenSpec, CONTROL};
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor, write_tensor, TENSOR_MAGIC};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Cell-paint channel → RGB weights, one row per input channel
/// (Hoechst, ConA, Phalloidin, Syto14, MitoTracker, WGA).
pub const CP_WEIGHTS: [[f64; 3]; 6] = [
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
    [0.5, 0.5, 0.0],
];

/// Projects `B × 6 × H × W` cell-paint images to `B × 3 × H × W` RGB.
pub fn cp2rgb(images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 6 {
        return Err(Error::Contract(format!("cp2rgb expects B×6×H×W, got {s:?}")));
    }
    let (b, plane) = (s[0], s[2] * s[3]);
    let x = images.data();
    let mut out = vec![0.0; b * 3 * plane];
    for i in 0..b {
        for k in 0..3 {
            let dst = &mut out[(i * 3 + k) * plane..(i * 3 + k + 1) * plane];
            for (c, w) in CP_WEIGHTS.iter().enumerate() {
                let src = &x[(i * 6 + c) * plane..(i * 6 + c + 1) * plane];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += v * w[k];
                }
            }
        }
    }
    Tensor::new(vec![b, 3, s[2], s[3]], out)
}

/// Training compute in ExaFLOPs: per-image forward FLOPs × batch × steps × 3
/// (forward plus a backward of twice the cost), fused multiply-adds counted once.
pub fn estimate_train_flops(flops_per_forward: f64, global_batch: f64, steps: f64) -> f64 {
    flops_per_forward * global_batch * steps * 3.0 / 1e18
}
