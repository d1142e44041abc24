use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use super::real::Real;
use super::rng::RngStream;
use super::tape::{Gradients, Tape, Var};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Layer widths (input first, output last) and the hidden activation.
/// The output layer is always affine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = MlpSpec {
            layer_widths,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `input -> hidden... -> output`.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, activation)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.layer_widths.len() >= 2,
            Config,
            "an MLP needs at least input and output widths, got {:?}",
            self.layer_widths
        );
        ensure!(
            self.layer_widths.iter().all(|&w| w >= 1),
            Config,
            "layer widths must be positive: {:?}",
            self.layer_widths
        );
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let l = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset = l.bias_offset + w[1];
                l
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layout()
            .last()
            .map(|l| l.bias_offset + l.fan_out)
            .unwrap_or(0)
    }
}

/// Position of one affine layer inside the flat parameter vector. The weight
/// block is row-major `fan_in x fan_out`, so a layer computes `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

/// Weights of one MLP, stored flat with a layout manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F> {
    spec: MlpSpec,
    layout: Vec<LayerLayout>,
    data: Vec<F>,
}

impl<F: Real> MlpParams<F> {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let data = vec![F::zero(); spec.num_params()];
        Ok(MlpParams { spec, layout, data })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut RngStream) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        for l in p.layout.clone() {
            let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for v in &mut p.data[l.weight_offset..l.bias_offset] {
                *v = F::from_f64_lossy((2.0 * rng.uniform() - 1.0) * bound);
            }
        }
        Ok(p)
    }

    pub fn from_flat(spec: MlpSpec, data: Vec<F>) -> Result<Self> {
        spec.validate()?;
        ensure!(
            data.len() == spec.num_params(),
            InvalidInput,
            "parameter count {} does not match spec ({})",
            data.len(),
            spec.num_params()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            InvalidInput,
            "non-finite parameter"
        );
        let layout = spec.layout();
        Ok(MlpParams { spec, layout, data })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, F> {
        let l = self.layout[layer];
        ArrayView2::from_shape(
            (l.fan_in, l.fan_out),
            &self.data[l.weight_offset..l.bias_offset],
        )
        .expect("layout is consistent")
    }

    pub fn weight_mut(&mut self, layer: usize) -> ArrayViewMut2<'_, F> {
        let l = self.layout[layer];
        ArrayViewMut2::from_shape(
            (l.fan_in, l.fan_out),
            &mut self.data[l.weight_offset..l.bias_offset],
        )
        .expect("layout is consistent")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, F> {
        let l = self.layout[layer];
        ArrayView1::from(&self.data[l.bias_offset..l.bias_offset + l.fan_out])
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [F] {
        let l = self.layout[layer];
        &mut self.data[l.bias_offset..l.bias_offset + l.fan_out]
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, input: &[F]) -> Result<Vec<F>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("1 x n view");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass for a batch, one example per row.
    pub fn forward_batch(&self, input: ArrayView2<'_, F>) -> Result<Array2<F>> {
        ensure!(
            input.ncols() == self.spec.input_width(),
            InvalidInput,
            "MLP expects input width {}, got {}",
            self.spec.input_width(),
            input.ncols()
        );
        let last = self.layout.len() - 1;
        let mut h = input.to_owned();
        for i in 0..self.layout.len() {
            h = h.dot(&self.weight(i));
            h += &self.bias(i).insert_axis(Axis(0));
            if i < last {
                match self.spec.activation {
                    Activation::Relu => h.mapv_inplace(|v| v.max(F::zero())),
                    Activation::Tanh => h.mapv_inplace(|v| v.tanh()),
                }
            }
        }
        Ok(h)
    }

    /// Records the weights on `tape` as trainable leaves.
    pub fn on_tape<'t>(&self, tape: &'t Tape<F>) -> MlpVars<'t, F> {
        self.record(tape, true)
    }

    /// Records the weights as constants; no gradients are kept for them.
    pub fn constants_on<'t>(&self, tape: &'t Tape<F>) -> MlpVars<'t, F> {
        self.record(tape, false)
    }

    fn record<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> MlpVars<'t, F> {
        let leaf = |v: Array2<F>| {
            if trainable {
                tape.param(v)
            } else {
                tape.constant(v)
            }
        };
        let layers = (0..self.layout.len())
            .map(|i| {
                let w = leaf(self.weight(i).to_owned());
                let b = leaf(self.bias(i).insert_axis(Axis(0)).to_owned());
                (w, b)
            })
            .collect();
        MlpVars {
            layers,
            activation: self.spec.activation,
            layout: self.layout.clone(),
            input_width: self.spec.input_width(),
        }
    }
}

/// An [`MlpParams`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct MlpVars<'t, F: Real> {
    layers: Vec<(Var<'t, F>, Var<'t, F>)>,
    activation: Activation,
    layout: Vec<LayerLayout>,
    input_width: usize,
}

impl<'t, F: Real> MlpVars<'t, F> {
    pub fn forward(&self, input: &Var<'t, F>) -> Result<Var<'t, F>> {
        ensure!(
            input.shape().1 == self.input_width,
            InvalidInput,
            "MLP expects input width {}, got {}",
            self.input_width,
            input.shape().1
        );
        let last = self.layers.len() - 1;
        let mut h = *input;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add_bias(b)?;
            if i < last {
                h = match self.activation {
                    Activation::Relu => h.relu(),
                    Activation::Tanh => h.tanh(),
                };
            }
        }
        Ok(h)
    }

    /// Gradient in the flat [`MlpParams`] layout. Parameters the loss does
    /// not touch get zeros.
    pub fn gradient(&self, grads: &Gradients<F>) -> Vec<F> {
        let total = self
            .layout
            .last()
            .map(|l| l.bias_offset + l.fan_out)
            .unwrap_or(0);
        let mut flat = vec![F::zero(); total];
        for ((w, b), l) in self.layers.iter().zip(&self.layout) {
            if let Some(gw) = grads.wrt(*w) {
                flat[l.weight_offset..l.bias_offset]
                    .iter_mut()
                    .zip(gw.iter())
                    .for_each(|(d, s)| *d = *s);
            }
            if let Some(gb) = grads.wrt(*b) {
                flat[l.bias_offset..l.bias_offset + l.fan_out]
                    .iter_mut()
                    .zip(gb.iter())
                    .for_each(|(d, s)| *d = *s);
            }
        }
        flat
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_rejects_degenerate_widths() {
        assert!(MlpSpec::new(vec![3], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Relu).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(vec![4, 5, 3], Activation::Tanh).unwrap();
        let p = MlpParams::<f64>::zeros(spec).unwrap();
        assert_eq!(p.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Relu).unwrap();
        let mut p = MlpParams::<f64>::zeros(spec).unwrap();
        for i in 0..3 {
            p.weight_mut(0)[[i, i]] = 1.0;
        }
        let v = [0.25, -1.5, 7.0];
        assert_eq!(p.forward(&v).unwrap(), v.to_vec());
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Tanh).unwrap();
        let p = MlpParams::<f64>::zeros(spec).unwrap();
        assert!(p.forward(&[1.0]).is_err());
    }

    #[test]
    fn layout_is_contiguous() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Tanh).unwrap();
        let l = spec.layout();
        assert_eq!(l[0].weight_offset, 0);
        assert_eq!(l[0].bias_offset, 6);
        assert_eq!(l[1].weight_offset, 9);
        assert_eq!(l[1].bias_offset, 12);
        assert_eq!(spec.num_params(), 13);
    }

    #[test]
    fn forward_is_bit_identical_across_calls() {
        let spec = MlpSpec::new(vec![5, 8, 4], Activation::Relu).unwrap();
        let p = MlpParams::<f64>::init(spec, &mut RngStream::new(3, 0)).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 0.9];
        assert_eq!(p.forward(&x).unwrap(), p.forward(&x).unwrap());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let spec = MlpSpec::new(vec![3, 6, 6, 2], Activation::Tanh).unwrap();
        let p = MlpParams::<f64>::init(spec, &mut RngStream::new(9, 1)).unwrap();
        let x = ndarray::array![[0.3, -0.2, 1.1], [0.0, 0.5, -0.7]];
        let plain = p.forward_batch(x.view()).unwrap();
        let tape = Tape::new();
        let vars = p.on_tape(&tape);
        let out = vars.forward(&tape.constant(x)).unwrap();
        assert_eq!(*out.value(), plain);
    }
}
