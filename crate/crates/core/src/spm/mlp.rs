use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::types::{PredictionModel, TestState};

/// Pre-activations of the output unit are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`
/// before the logistic, so predictions stay inside `[9.4e-14, 1 - 9.4e-14]`.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }
    fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }
    fn end(&self) -> usize {
        self.bias_offset() + self.fan_out
    }
}

/// Fully connected network: ReLU hidden layers, one logistic output unit.
///
/// Parameters live in one flat vector. Each layer stores its weight matrix
/// row-major as `fan_out x fan_in`, followed by its `fan_out` biases; layers
/// follow each other from input to output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    widths: Vec<usize>,
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

fn layout(widths: &[usize]) -> Result<Vec<LayerShape>> {
    if widths.len() < 2 {
        return Err(invalid("an MLP needs at least input and output widths"));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(invalid("layer widths must be positive"));
    }
    if *widths.last().unwrap() != 1 {
        return Err(invalid("output width must be 1"));
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for pair in widths.windows(2) {
        let l = LayerShape {
            fan_in: pair[0],
            fan_out: pair[1],
            offset,
        };
        offset = l.end();
        layers.push(l);
    }
    Ok(layers)
}

/// Number of parameters of an MLP with the given widths.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|p| (p[0] + 1) * p[1]).sum()
}

/// Randomly initialized network `d -> hidden... -> 1`.
///
/// Weights are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases are zero.
pub fn init_model(d: usize, hidden: &[usize], rng: &mut Rng) -> Result<MlpModel> {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(d);
    widths.extend_from_slice(hidden);
    widths.push(1);
    let mut model = MlpModel::zeros(&widths)?;
    for l in model.layers.clone() {
        let bound = 1.0 / (l.fan_in as f64).sqrt();
        for w in &mut model.params[l.offset..l.bias_offset()] {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(model)
}

#[inline]
fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ln(1 + e^z) without overflow
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl MlpModel {
    /// Network with every parameter zero; predicts exactly 0.5 everywhere.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        let layers = layout(widths)?;
        let n = layers.last().map(|l| l.end()).unwrap_or(0);
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(widths)?;
        if params.len() != m.params.len() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        m.params = params;
        Ok(m)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn weights(&self, l: &LayerShape) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((l.fan_out, l.fan_in), &self.params[l.offset..l.bias_offset()])
            .expect("layout is consistent")
    }

    fn biases(&self, l: &LayerShape) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[l.bias_offset()..l.end()])
    }

    /// Activations of every layer; `acts[0]` is the hidden output of layer 0,
    /// the last entry is the raw (unclamped) output pre-activation.
    fn forward(&self, x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let n = x.nrows();
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            let input = if k == 0 { x } else { acts[k - 1].view() };
            let mut z = Array2::<f64>::zeros((n, l.fan_out));
            z += &self.biases(l);
            general_mat_mul(1.0, &input, &self.weights(l).t(), 1.0, &mut z);
            if k + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Output pre-activations (before the clamp) for each row of `x`.
    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let mut acts = self.forward(x);
        Ok(acts.pop().unwrap().index_axis_move(Axis(1), 0))
    }

    /// Failure probability for each row of `x`.
    pub fn predict_rows(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self
            .logits(x)?
            .iter()
            .map(|&z| logistic(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
            .collect())
    }

    pub fn predict_one(&self, state: &TestState) -> Result<f64> {
        state.check_dim(self.input_dim())?;
        let x = ArrayView2::from_shape((1, state.dim()), state.as_slice()).unwrap();
        Ok(self.predict_rows(x)?[0])
    }

    /// Mean (optionally weighted) binary cross-entropy over the batch, and its
    /// exact gradient with respect to the flat parameter vector.
    ///
    /// `loss = (1/n) * sum_i w_i * CE(predict(x_i), y_i)` with `w_i = 1` when
    /// `weights` is `None`.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<'_, f64>,
        labels: &[bool],
        weights: Option<&[f64]>,
    ) -> Result<(f64, Vec<f64>)> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        if labels.len() != n {
            return Err(invalid("label count does not match batch"));
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(invalid("weight count does not match batch"));
            }
            if let Some(bad) = w.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
                return Err(invalid(format!("weights must be positive and finite, got {bad}")));
            }
        }

        let acts = self.forward(x);
        let out = acts.last().unwrap();
        let inv_n = 1.0 / n as f64;

        let mut loss = 0.0;
        let mut delta = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            let z = out[[i, 0]];
            let zc = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            let y = if labels[i] { 1.0 } else { 0.0 };
            let w = weights.map_or(1.0, |w| w[i]);
            loss += w * (softplus(zc) - y * zc);
            if z.abs() < LOGIT_CLAMP {
                delta[[i, 0]] = w * (logistic(zc) - y) * inv_n;
            }
        }
        loss *= inv_n;

        let mut grad = vec![0.0; self.params.len()];
        for k in (0..self.layers.len()).rev() {
            let l = self.layers[k];
            let input = if k == 0 { x } else { acts[k - 1].view() };
            {
                let (gw, gb) = grad[l.offset..l.end()].split_at_mut(l.weight_len());
                let mut gw = ndarray::ArrayViewMut2::from_shape((l.fan_out, l.fan_in), gw).unwrap();
                general_mat_mul(1.0, &delta.t(), &input, 0.0, &mut gw);
                for (g, col) in gb.iter_mut().zip(delta.axis_iter(Axis(1))) {
                    *g = col.sum();
                }
            }
            if k > 0 {
                let mut prev = delta.dot(&self.weights(&l));
                ndarray::Zip::from(&mut prev)
                    .and(&acts[k - 1])
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = prev;
            }
        }
        Ok((loss, grad))
    }
}

impl PredictionModel for MlpModel {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn predict(&self, state: &TestState) -> f64 {
        self.predict_one(state).expect("state dimension mismatch")
    }

    fn predict_batch(&self, states: &[TestState]) -> Vec<f64> {
        if states.is_empty() {
            return Vec::new();
        }
        let d = self.input_dim();
        let mut flat = Vec::with_capacity(states.len() * d);
        for s in states {
            assert_eq!(s.dim(), d, "state dimension mismatch");
            flat.extend_from_slice(s.as_slice());
        }
        let x = Array2::from_shape_vec((states.len(), d), flat).unwrap();
        self.predict_rows(x.view()).unwrap()
    }
}
