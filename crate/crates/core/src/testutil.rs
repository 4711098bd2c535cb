//! Shared fixtures for unit tests.

use crate::network::NetConfig;

/// Small but structurally complete configuration: 16 px frames, two pyramid
/// scales, D = 36. Fast enough for gradient checks and micro-training runs.
pub fn tiny_config() -> NetConfig {
    NetConfig {
        input_resolution: 16,
        pyramid_scales: vec![16, 8],
        maps_per_scale: 2,
        kernel_size: 3,
        sigma: 0.1,
        mc_samples: 1,
        motion_channels: vec![4, 4, 6, 6, 8, 18],
        image_channels: vec![4, 4, 4, 2],
        decoder_channels: vec![6, 6, 3],
    }
}
