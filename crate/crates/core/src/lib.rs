//! Ultra-light low-light image enhancement.
//!
//! A 58-parameter convolutional operator is applied three times with shared
//! weights to produce a feature pyramid; the last map drives an iterated
//! quadratic tone curve, and a parameter-free restoration step reinjects detail
//! from all three maps after every iteration. Training is fully unsupervised.
//!
//! ```no_run
//! use liteie::{enhance_image, load_image, save_image, deserialize_weights, EnhanceConfig};
//!
//! let weights = deserialize_weights("liteie.lie")?;
//! let dark = load_image("dark.png")?;
//! let bright = enhance_image(&weights, &dark, &EnhanceConfig::default())?;
//! save_image(&bright, "bright.png")?;
//! # Ok::<(), liteie::Error>(())
//! ```

pub mod bench;
pub mod enhance;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod parallel;
pub mod train;

pub use enhance::{enhance_image, enhance_step, restore_step, EnhanceConfig};
pub use error::{Error, Result};
pub use imaging::{load_image, random_crop, resize_bilinear, save_image, ImageTensor, Tensor};
pub use losses::{total_loss, LossBreakdown, LossConfig};
pub use metrics::{mae_mse, psnr, ssim, MetricsReport};
pub use net::{
    deserialize_weights, extract_features, init_weights, param_count, serialize_weights, FeaturePyramid, NetTopology,
    Weights,
};
pub use train::{backward_gradients, fd_gradients, train, TrainConfig};

/// Float types the kernels are instantiated for (`f32` inference, `f64` training).
pub trait Real: num_traits::Float + Send + Sync + std::fmt::Debug + 'static {
    /// Hyperbolic tangent used by the inference kernels.
    fn act_tanh(self) -> Self {
        self.tanh()
    }
}

impl Real for f32 {
    #[inline(always)]
    fn act_tanh(self) -> Self {
        fast_tanh_f32(self)
    }
}

impl Real for f64 {}

/// Branch-free rational tanh for `f32`, within 5e-7 of the exact value and
/// exactly odd; vectorises where `f32::tanh` does not.
#[inline(always)]
#[allow(clippy::excessive_precision)]
pub fn fast_tanh_f32(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    const A: [f32; 7] = [
        4.893_524_6e-3,
        6.372_619_3e-4,
        1.485_722_4e-5,
        5.122_297e-8,
        -8.604_671_5e-11,
        2.000_187_9e-13,
        -2.760_768_5e-16,
    ];
    const B: [f32; 4] = [4.893_525_2e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];
    let small = x.abs() < 4e-4;
    let c = x.clamp(-CLAMP, CLAMP);
    let x2 = c * c;
    let mut p = A[6];
    for a in A[..6].iter().rev() {
        p = p * x2 + a;
    }
    let p = p * c;
    let q = ((B[3] * x2 + B[2]) * x2 + B[1]) * x2 + B[0];
    if small {
        x
    } else {
        p / q
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_close_to_exact() {
        let mut worst = 0.0f64;
        let n = 2_000_000;
        for i in 0..=n {
            let x = -12.0 + 24.0 * i as f64 / n as f64;
            let err = (f64::from(fast_tanh_f32(x as f32)) - (x as f32 as f64).tanh()).abs();
            worst = worst.max(err);
        }
        assert!(worst < 5e-7, "{worst}");
        for x in [0.0f32, 1e-5, 0.3, 2.0, 50.0] {
            assert_eq!(fast_tanh_f32(-x), -fast_tanh_f32(x));
        }
        assert_eq!(fast_tanh_f32(1e30), fast_tanh_f32(8.0));
        assert!(fast_tanh_f32(9.0) <= 1.0);
    }
}
