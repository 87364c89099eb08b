//! Dense feed-forward networks stored as flat parameter vectors.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!(
                "activation: unknown value {other:?} (expected tanh, relu or sigmoid)"
            ))),
        }
    }
}

/// Architecture of one network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Input width first, output width last.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

/// Index ranges of one layer inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_in × fan_out` weight block.
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

impl NetSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, init_seed: u64) -> Self {
        Self {
            layer_widths,
            activation,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "layer_widths needs at least an input and an output width, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "layer_widths must all be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated widths")
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let bias = weights.end..weights.end + fan_out;
                offset = bias.end;
                LayerSlot {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                }
            })
            .collect()
    }
}

/// Flat parameters of one network together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayerSlot>,
}

impl ParamVector {
    pub fn zeros(spec: &NetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            values: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Weights uniform on `±1/√fan_in`, biases zero; deterministic in `init_seed`.
pub fn net_init(spec: &NetSpec) -> Result<ParamVector> {
    let mut params = ParamVector::zeros(spec)?;
    fill_init(spec, &mut params.values);
    Ok(params)
}

/// Writes a fresh initialisation of `spec` into `out` (length `param_count`).
pub(crate) fn fill_init(spec: &NetSpec, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    for slot in spec.layout() {
        let bound = (1.0 / slot.fan_in as f64).sqrt();
        for w in &mut out[slot.weights.clone()] {
            *w = rng.random_range(-bound..bound);
        }
        for b in &mut out[slot.bias.clone()] {
            *b = 0.0;
        }
    }
}

/// Evaluates the network on a batch (`n × input_dim`) without recording a tape.
pub fn forward_batch(params: &[f64], spec: &NetSpec, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::Contract(format!(
            "parameter vector has {} entries, architecture needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    if x.ncols() != spec.input_dim() {
        return Err(Error::Contract(format!(
            "input has width {}, network expects {}",
            x.ncols(),
            spec.input_dim()
        )));
    }
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut h = x.to_owned();
    for (i, slot) in layout.iter().enumerate() {
        let w = ArrayView2::from_shape((slot.fan_in, slot.fan_out), &params[slot.weights.clone()])
            .expect("weight block shape");
        let b = ndarray::ArrayView1::from(&params[slot.bias.clone()]);
        h = h.dot(&w) + b;
        if i < last {
            h.mapv_inplace(|v| spec.activation.apply(v));
        }
    }
    Ok(h)
}

/// Single-input forward pass.
pub fn net_forward(params: &ParamVector, spec: &NetSpec, x: &[f64]) -> Result<Vec<f64>> {
    let input = ArrayView2::from_shape((1, x.len()), x).expect("row view");
    Ok(forward_batch(&params.values, spec, input)?.into_raw_vec_and_offset().0)
}

/// Records the network on `tape`. Its parameters are the `param_count`
/// entries of the flat row `flat` starting at `offset`.
pub fn net_on_tape(tape: &mut Tape, spec: &NetSpec, flat: Var, offset: usize, x: Var) -> Var {
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut h = x;
    for (i, slot) in layout.iter().enumerate() {
        let w = tape.slice(flat, offset + slot.weights.start, slot.fan_in, slot.fan_out);
        let b = tape.slice(flat, offset + slot.bias.start, 1, slot.fan_out);
        let z = tape.matmul(h, w);
        h = tape.add_bias(z, b);
        if i < last {
            h = spec.activation.on_tape(tape, h);
        }
    }
    h
}

/// Value and gradient of a scalar computation with respect to a flat
/// parameter vector. `loss_eval` receives the tape and the parameters as a
/// `1 × P` trainable row.
pub fn grad_params<F>(params: &[f64], loss_eval: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let flat = tape.parameter(Array2::from_shape_vec((1, params.len()), params.to_vec()).expect("flat row"));
    let loss = loss_eval(&mut tape, flat)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar_value(loss), grads.flat(&tape, flat)))
}

/// Gradient of a scalar-output network with respect to its input.
pub fn grad_input(params: &ParamVector, spec: &NetSpec, x: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.output_dim() != 1 {
        return Err(Error::Contract(format!(
            "input gradient needs a scalar-output network, output width is {}",
            spec.output_dim()
        )));
    }
    if x.len() != spec.input_dim() {
        return Err(Error::Contract(format!(
            "input has width {}, network expects {}",
            x.len(),
            spec.input_dim()
        )));
    }
    let mut tape = Tape::new();
    let flat = tape.constant(Array2::from_shape_vec((1, params.len()), params.values.clone()).expect("flat row"));
    let input = tape.parameter(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
    let out = net_on_tape(&mut tape, spec, flat, 0, input);
    let grads = tape.backward(out)?;
    Ok(grads.flat(&tape, input))
}
