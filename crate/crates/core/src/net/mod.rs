//! The average-velocity network `u(x, r, t)`.
//!
//! A plain MLP over the concatenated input `(x, r, t)` with three kinds of
//! evaluation:
//!
//! * [`MlpModel::forward`]: the network output.
//! * [`MlpModel::jvp`]: forward-mode directional derivative, computed by
//!   pushing a tangent alongside the primal through every layer (dual
//!   numbers, one pass).
//! * [`MlpModel::param_grad`]: reverse-mode vector-Jacobian product
//!   `gᵀ·seed` against the flat parameter vector.
//!
//! Parameters live in one flat `Vec<f64>`; [`Architecture`] holds the offsets.
//! Layer `l` stores its weight matrix row-major (`fan_out × fan_in`) followed
//! by its bias. Hidden layers apply the activation, the output layer is
//! linear.
//!
//! The batched entry points ([`forward_batch`], [`forward_tape`],
//! [`backward`]) work on row-major input matrices and are what the trainer
//! uses; the single-sample methods are thin wrappers over them.

mod checkpoint;
mod ema;
mod gemm;

pub use checkpoint::{Checkpoint, OptimizerSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ema::EmaState;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `d` for which [`MlpModel::spatial_jacobian`] assembles a dense matrix.
pub const DENSE_JACOBIAN_LIMIT: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }

    /// Value and first derivative at `z`.
    #[inline]
    pub fn eval(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                (z * s, s * (1.0 + z * (1.0 - s)))
            }
            Activation::Identity => (z, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlot {
    weight: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Layer widths plus the flat-parameter layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
    activation: Activation,
    slots: Vec<LayerSlot>,
    n_params: usize,
}

impl Architecture {
    /// Input width `d + 2`, the given hidden widths, output width `d`.
    pub fn new(d: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(d + 2);
        sizes.extend_from_slice(hidden);
        sizes.push(d);
        Self::from_layer_sizes(sizes, activation)
    }

    pub fn from_layer_sizes(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("need at least input and output widths".into()));
        }
        if layer_sizes.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let d = *layer_sizes.last().unwrap();
        if layer_sizes[0] != d + 2 {
            return Err(Error::Config(format!(
                "input width {} must equal output width {} + 2",
                layer_sizes[0], d
            )));
        }
        let mut slots = Vec::with_capacity(layer_sizes.len() - 1);
        let mut offset = 0;
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = offset;
            let bias = weight + fan_in * fan_out;
            offset = bias + fan_out;
            slots.push(LayerSlot {
                weight,
                bias,
                fan_in,
                fan_out,
            });
        }
        Ok(Self {
            layer_sizes,
            activation,
            slots,
            n_params: offset,
        })
    }

    /// Three hidden layers of 128 units with SiLU.
    pub fn default_for(d: usize) -> Self {
        Self::new(d, &[128, 128, 128], Activation::Silu).expect("valid default architecture")
    }

    pub fn d(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_layers(&self) -> usize {
        self.slots.len()
    }

    /// Offset of weight `(row, col)` of `layer` in the flat vector.
    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        let s = &self.slots[layer];
        s.weight + row * s.fan_in + col
    }

    pub fn bias_index(&self, layer: usize, row: usize) -> usize {
        self.slots[layer].bias + row
    }

    fn weights<'a>(&self, params: &'a [f64], layer: usize) -> &'a [f64] {
        let s = &self.slots[layer];
        &params[s.weight..s.bias]
    }

    fn biases<'a>(&self, params: &'a [f64], layer: usize) -> &'a [f64] {
        let s = &self.slots[layer];
        &params[s.bias..s.bias + s.fan_out]
    }

    /// Uniform initialization with bound `gain / sqrt(fan_in)` for weights and
    /// `1 / sqrt(fan_in)` for biases.
    pub fn init_params<R: Rng + ?Sized>(&self, gain: f64, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params];
        for s in &self.slots {
            let scale = 1.0 / (s.fan_in as f64).sqrt();
            let wb = gain * scale;
            for p in &mut params[s.weight..s.bias] {
                *p = rng.random_range(-wb..=wb);
            }
            for p in &mut params[s.bias..s.bias + s.fan_out] {
                *p = rng.random_range(-scale..=scale);
            }
        }
        params
    }
}

/// Default weight gain. Puts the output std of the default SiLU stack near
/// one at initialization; with gain 1 it sits around 0.02 to 0.06.
pub const DEFAULT_INIT_GAIN: f64 = 2.4;

/// Output of [`MlpModel::jvp`].
#[derive(Clone, Debug, PartialEq)]
pub struct JvpResult {
    pub value: Vec<f64>,
    pub directional: Vec<f64>,
}

/// Network architecture plus a parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    arch: Architecture,
    params: Vec<f64>,
}

impl MlpModel {
    pub fn zeros(arch: Architecture) -> Self {
        let params = vec![0.0; arch.n_params];
        Self { arch, params }
    }

    pub fn init<R: Rng + ?Sized>(arch: Architecture, gain: f64, rng: &mut R) -> Self {
        let params = arch.init_params(gain, rng);
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.n_params {
            return Err(Error::DimensionMismatch {
                expected: arch.n_params,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteInput("parameters"));
        }
        Ok(Self { arch, params })
    }

    /// Same architecture, different parameters (for EMA shadows and probes).
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_params(self.arch.clone(), params)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn d(&self) -> usize {
        self.arch.d()
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    fn input_row(&self, x: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
        let d = self.d();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) || !r.is_finite() || !t.is_finite() {
            return Err(Error::NonFiniteInput("network input"));
        }
        let mut row = Vec::with_capacity(d + 2);
        row.extend_from_slice(x);
        row.push(r);
        row.push(t);
        Ok(row)
    }

    pub fn forward(&self, x: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
        let row = self.input_row(x, r, t)?;
        forward_batch(&self.arch, &self.params, &row)
    }

    /// Directional derivative along `tangent = (dx, dr, dt)`.
    pub fn jvp(&self, x: &[f64], r: f64, t: f64, tangent: &[f64]) -> Result<JvpResult> {
        let row = self.input_row(x, r, t)?;
        if tangent.len() != row.len() {
            return Err(Error::DimensionMismatch {
                expected: row.len(),
                got: tangent.len(),
            });
        }
        if tangent.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("tangent"));
        }
        let pass = forward_tape(&self.arch, &self.params, &row, Some(tangent))?;
        Ok(JvpResult {
            value: pass.outputs,
            directional: pass.directional,
        })
    }

    /// `gᵀ·seed` where `g = ∂u/∂θ` is the `d × p` parameter Jacobian.
    pub fn param_grad(&self, x: &[f64], r: f64, t: f64, seed: &[f64]) -> Result<Vec<f64>> {
        let row = self.input_row(x, r, t)?;
        if seed.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: seed.len(),
            });
        }
        if seed.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("seed"));
        }
        let pass = forward_tape(&self.arch, &self.params, &row, None)?;
        let mut grad = vec![0.0; self.n_params()];
        backward(&self.arch, &self.params, &pass.tape, seed, &mut grad);
        Ok(grad)
    }

    /// `∂u/∂x` as a dense `d × d` matrix, one JVP per column.
    pub fn spatial_jacobian(&self, x: &[f64], r: f64, t: f64) -> Result<DMatrix<f64>> {
        let d = self.d();
        if d > DENSE_JACOBIAN_LIMIT {
            return Err(Error::DenseGuard {
                d,
                limit: DENSE_JACOBIAN_LIMIT,
            });
        }
        let mut jac = DMatrix::zeros(d, d);
        let mut tangent = vec![0.0; d + 2];
        for j in 0..d {
            tangent[j] = 1.0;
            let col = self.jvp(x, r, t, &tangent)?.directional;
            tangent[j] = 0.0;
            for (i, v) in col.into_iter().enumerate() {
                jac[(i, j)] = v;
            }
        }
        Ok(jac)
    }

    /// The full parameter Jacobian `g` (`d × p`), one reverse pass per row.
    pub fn param_jacobian(&self, x: &[f64], r: f64, t: f64) -> Result<DMatrix<f64>> {
        let d = self.d();
        let p = self.n_params();
        let mut g = DMatrix::zeros(d, p);
        let mut seed = vec![0.0; d];
        for i in 0..d {
            seed[i] = 1.0;
            let row = self.param_grad(x, r, t, &seed)?;
            seed[i] = 0.0;
            for (j, v) in row.into_iter().enumerate() {
                g[(i, j)] = v;
            }
        }
        Ok(g)
    }
}

/// Cached intermediate values of a forward pass, consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    rows: usize,
    /// Stacked input of each layer (primal rows first, then tangent rows).
    inputs: Vec<Vec<f64>>,
    /// Activation derivative at each hidden layer's pre-activation (primal rows).
    derivs: Vec<Vec<f64>>,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Result of [`forward_tape`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    /// `rows × d` network outputs.
    pub outputs: Vec<f64>,
    /// `tangent_rows × d` directional derivatives (empty without tangents).
    pub directional: Vec<f64>,
}

/// Plain forward pass over `inputs` (row-major, `rows × (d + 2)`).
pub fn forward_batch(arch: &Architecture, params: &[f64], inputs: &[f64]) -> Result<Vec<f64>> {
    let width = arch.input_width();
    debug_assert_eq!(inputs.len() % width, 0);
    let rows = inputs.len() / width;
    let mut current = inputs.to_vec();
    let last = arch.n_layers() - 1;
    for l in 0..arch.n_layers() {
        let s = arch.slots[l];
        let mut z = broadcast_bias(arch.biases(params, l), rows);
        gemm::a_wt(rows, s.fan_in, s.fan_out, &current, arch.weights(params, l), &mut z, 1.0);
        if l < last {
            let act = arch.activation;
            for v in z.iter_mut() {
                *v = act.eval(*v).0;
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: l });
        }
        current = z;
    }
    Ok(current)
}

/// Forward pass that records a [`Tape`], optionally pushing tangents.
///
/// `tangents` holds one row per leading row of `inputs` (it may cover only a
/// prefix of the batch); the directional derivatives come back in the same
/// order.
pub fn forward_tape(
    arch: &Architecture,
    params: &[f64],
    inputs: &[f64],
    tangents: Option<&[f64]>,
) -> Result<ForwardPass> {
    let width = arch.input_width();
    debug_assert_eq!(inputs.len() % width, 0);
    let rows = inputs.len() / width;
    let tangent_rows = tangents.map_or(0, |t| t.len() / width);
    debug_assert!(tangent_rows <= rows);
    let total = rows + tangent_rows;

    let mut stacked = Vec::with_capacity(total * width);
    stacked.extend_from_slice(inputs);
    if let Some(t) = tangents {
        stacked.extend_from_slice(t);
    }

    let n_layers = arch.n_layers();
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut derivs = Vec::with_capacity(n_layers.saturating_sub(1));
    let act = arch.activation;

    for l in 0..n_layers {
        let s = arch.slots[l];
        let mut z = vec![0.0; total * s.fan_out];
        let bias = arch.biases(params, l);
        for row in z[..rows * s.fan_out].chunks_exact_mut(s.fan_out) {
            row.copy_from_slice(bias);
        }
        gemm::a_wt(total, s.fan_in, s.fan_out, &stacked, arch.weights(params, l), &mut z, 1.0);

        if l + 1 < n_layers {
            let mut deriv = vec![0.0; rows * s.fan_out];
            for (v, dv) in z[..rows * s.fan_out].iter_mut().zip(deriv.iter_mut()) {
                let (a, da) = act.eval(*v);
                *v = a;
                *dv = da;
            }
            let (_, tangent_part) = z.split_at_mut(rows * s.fan_out);
            for (v, dv) in tangent_part.iter_mut().zip(deriv.iter()) {
                *v *= dv;
            }
            derivs.push(deriv);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: l });
        }
        layer_inputs.push(std::mem::replace(&mut stacked, z));
    }

    let d = arch.d();
    let directional = stacked.split_off(rows * d);
    Ok(ForwardPass {
        tape: Tape {
            rows,
            inputs: layer_inputs,
            derivs,
        },
        outputs: stacked,
        directional,
    })
}

/// Accumulates `Σ_rows gᵀ·seed_row` into `grad`.
///
/// `seed` is `rows × d`, one row per primal row of the tape.
pub fn backward(arch: &Architecture, params: &[f64], tape: &Tape, seed: &[f64], grad: &mut [f64]) {
    let rows = tape.rows;
    debug_assert_eq!(seed.len(), rows * arch.d());
    debug_assert_eq!(grad.len(), arch.n_params);
    let mut delta = seed.to_vec();
    for l in (0..arch.n_layers()).rev() {
        let s = arch.slots[l];
        let x = &tape.inputs[l][..rows * s.fan_in];
        gemm::at_b(s.fan_out, rows, s.fan_in, &delta, x, &mut grad[s.weight..s.bias]);
        let gb = &mut grad[s.bias..s.bias + s.fan_out];
        for row in delta.chunks_exact(s.fan_out) {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
        if l > 0 {
            let mut dx = vec![0.0; rows * s.fan_in];
            gemm::a_b(rows, s.fan_out, s.fan_in, &delta, arch.weights(params, l), &mut dx);
            for (v, dv) in dx.iter_mut().zip(&tape.derivs[l - 1]) {
                *v *= dv;
            }
            delta = dx;
        }
    }
}

fn broadcast_bias(bias: &[f64], rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> MlpModel {
        let arch = Architecture::new(2, &[8, 8], Activation::Silu).unwrap();
        MlpModel::init(arch, DEFAULT_INIT_GAIN, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn param_count_matches_layout() {
        let arch = Architecture::new(3, &[7, 5], Activation::Silu).unwrap();
        assert_eq!(arch.n_params(), (5 + 1) * 7 + (7 + 1) * 5 + (5 + 1) * 3);
        let arch = Architecture::default_for(2);
        assert_eq!(arch.n_params(), 5 * 128 + 129 * 128 * 2 + 129 * 2);
    }

    #[test]
    fn rejects_bad_input_width() {
        assert!(Architecture::from_layer_sizes(vec![3, 4, 2], Activation::Silu).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = MlpModel::zeros(Architecture::new(2, &[16], Activation::Silu).unwrap());
        assert_eq!(m.forward(&[0.3, -1.2], 0.1, 0.7).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_selecting_x() {
        let arch = Architecture::new(2, &[], Activation::Silu).unwrap();
        let mut m = MlpModel::zeros(arch.clone());
        m.params_mut()[arch.weight_index(0, 0, 0)] = 1.0;
        m.params_mut()[arch.weight_index(0, 1, 1)] = 1.0;
        assert_eq!(m.forward(&[0.25, -4.0], 0.2, 0.9).unwrap(), vec![0.25, -4.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny(3);
        let a = m.forward(&[0.1, 0.2], 0.3, 0.4).unwrap();
        let b = m.forward(&[0.1, 0.2], 0.3, 0.4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_tangent_zero_directional() {
        let m = tiny(4);
        let out = m.jvp(&[0.5, -0.5], 0.2, 0.6, &[0.0; 4]).unwrap();
        assert_eq!(out.directional, vec![0.0, 0.0]);
        assert_eq!(out.value, m.forward(&[0.5, -0.5], 0.2, 0.6).unwrap());
    }

    #[test]
    fn zero_seed_zero_gradient() {
        let m = tiny(5);
        let g = m.param_grad(&[0.5, -0.5], 0.2, 0.6, &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_network_jacobian_is_weight_block() {
        let arch = Architecture::new(2, &[], Activation::Silu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = MlpModel::init(arch.clone(), 1.0, &mut rng);
        let jac = m.spatial_jacobian(&[0.4, 0.1], 0.0, 1.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(jac[(i, j)], m.params()[arch.weight_index(0, i, j)]);
            }
        }
    }

    #[test]
    fn jacobian_columns_are_jvps() {
        let m = tiny(6);
        let x = [0.3, 0.8];
        let jac = m.spatial_jacobian(&x, 0.1, 0.5).unwrap();
        let col = m.jvp(&x, 0.1, 0.5, &[0.0, 1.0, 0.0, 0.0]).unwrap().directional;
        assert_eq!(jac[(0, 1)], col[0]);
        assert_eq!(jac[(1, 1)], col[1]);
    }

    #[test]
    fn dense_guard() {
        let arch = Architecture::new(300, &[], Activation::Silu).unwrap();
        let m = MlpModel::zeros(arch);
        let err = m.spatial_jacobian(&vec![0.0; 300], 0.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::DenseGuard { .. }));
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let arch = Architecture::new(1, &[2], Activation::Silu).unwrap();
        let mut m = MlpModel::zeros(arch.clone());
        m.params_mut()[arch.weight_index(0, 0, 0)] = 1e308;
        let err = m.forward(&[1e10], 0.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteActivation { layer: 0 }));
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let m = tiny(7);
        let rows = [[0.1, 0.2, 0.0, 0.5], [-0.4, 1.1, 0.3, 0.9], [2.0, -1.0, 0.5, 0.5]];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let out = forward_batch(m.arch(), m.params(), &flat).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let single = m.forward(&r[..2], r[2], r[3]).unwrap();
            for k in 0..2 {
                assert!((out[i * 2 + k] - single[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn tangent_prefix_only_affects_leading_rows() {
        let m = tiny(8);
        let inputs = [0.1, 0.2, 0.0, 0.5, -0.4, 1.1, 0.3, 0.9];
        let tangent = [1.0, -0.5, 0.0, 1.0];
        let pass = forward_tape(m.arch(), m.params(), &inputs, Some(&tangent)).unwrap();
        assert_eq!(pass.outputs.len(), 4);
        assert_eq!(pass.directional.len(), 2);
        let single = m.jvp(&[0.1, 0.2], 0.0, 0.5, &tangent).unwrap();
        for k in 0..2 {
            assert!((pass.directional[k] - single.directional[k]).abs() < 1e-13);
        }
    }
}
