//! Pinned constants for the 2-D toy generators.
//!
//! Each generator draws a raw point and adds isotropic Gaussian noise with
//! standard deviation `noise_scale × DEFAULT_NOISE`; the result is then
//! standardized per axis with the exact moments of the raw law.

use std::f64::consts::PI;

/// Checkerboard: `x ~ U(−2, 2)`, `y` uniform on the four alternating unit
/// cells of the column. No noise by default.
pub const CHECKERBOARD_HALF_WIDTH: f64 = 2.0;
pub const CHECKERBOARD_NOISE: f64 = 0.0;

/// Eight Gaussians: modes at angles `kπ/4` on a circle.
pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0 * std::f64::consts::SQRT_2;
pub const EIGHT_GAUSSIANS_NOISE: f64 = 0.5 / std::f64::consts::SQRT_2;

/// Two moons: upper arc `(cos θ, sin θ)` and lower arc
/// `(1 − cos θ, 0.5 − sin θ)`, `θ ~ U(0, π)`, equal probability.
pub const TWO_MOONS_NOISE: f64 = 0.1;

/// Swiss roll: `s ~ U(1.5π, 4.5π)`, point `(s cos s, s sin s) / 5`.
pub const SWISS_ROLL_RANGE: (f64, f64) = (1.5 * PI, 4.5 * PI);
pub const SWISS_ROLL_SCALE: f64 = 0.2;
/// Noise before the `1/5` scaling.
pub const SWISS_ROLL_NOISE: f64 = 0.5;

/// Two spirals: `s = 3π·sqrt(U)`, arm `(−s cos s, s sin s) / 3` and its mirror.
pub const TWO_SPIRALS_TURN: f64 = 3.0 * PI;
pub const TWO_SPIRALS_SCALE: f64 = 1.0 / 3.0;
pub const TWO_SPIRALS_NOISE: f64 = 0.1;

/// Pinwheel: five blades; radial coordinate `1 + 0.3·ε₁`, tangential
/// `0.1·ε₂`, rotated by `2πk/5 + 0.25·exp(radial)`, then doubled.
pub const PINWHEEL_BLADES: usize = 5;
pub const PINWHEEL_RADIAL_STD: f64 = 0.3;
pub const PINWHEEL_TANGENTIAL_STD: f64 = 0.1;
pub const PINWHEEL_RATE: f64 = 0.25;
pub const PINWHEEL_SCALE: f64 = 2.0;

/// DGMM: modes per dimension, mean box, per-component variance.
pub const DGMM_MODES_PER_DIM: usize = 2;
pub const DGMM_MEAN_BOX: f64 = 2.0;
pub const DGMM_VARIANCE: f64 = 0.04;
