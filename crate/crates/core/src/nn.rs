//! Dense network kernel: activations, fully connected and LSTM layers,
//! forward evaluation, analytic Jacobians and the per-step backward pass.
//!
//! Weight matrices are stored `out × in` and applied as `W x + b`.
//! Packed LSTM matrices stack the four gate blocks in the fixed order
//! input (i), forget (f), cell candidate (g), output (o).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix, Vector};

/// Row-block order of packed LSTM matrices; recorded in every model file.
pub const GATE_ORDER: &str = "ifgo";

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn tanh_act(z: f64) -> f64 {
    z.tanh()
}

#[inline]
pub fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => relu(z),
            Activation::Linear => z,
        }
    }

    /// Derivative with the subgradient convention `relu'(0) = 0`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcLayer {
    pub weights: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

impl FcLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        FcLayer {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Uniform initialization in `±1/√fan_in`.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        FcLayer {
            weights: uniform_matrix(outputs, inputs, bound, rng),
            bias: (0..outputs).map(|_| rng.gen_range(-bound..=bound)).collect(),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.bias.len() != self.weights.rows() {
            return Err(Error::dim(name, self.weights.rows(), self.bias.len()));
        }
        if !self.weights.is_finite() || self.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: name.into() });
        }
        Ok(())
    }

    /// Pre-activation `W u + b`.
    pub fn pre_activation(&self, u: &[f64]) -> Result<Vector> {
        if u.len() != self.inputs() {
            return Err(Error::dim("fc layer input", self.inputs(), u.len()));
        }
        let mut z = self.weights.matvec(u);
        axpy(1.0, &self.bias, &mut z);
        Ok(z)
    }

    pub fn forward(&self, u: &[f64]) -> Result<Vector> {
        let mut z = self.pre_activation(u)?;
        z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        Ok(z)
    }

    /// `∂out/∂u`; relu rows with non-positive pre-activation are zero.
    pub fn jacobian(&self, u: &[f64]) -> Result<Matrix> {
        let z = self.pre_activation(u)?;
        let mut j = self.weights.clone();
        let d: Vec<f64> = z.iter().map(|v| self.activation.derivative(*v)).collect();
        j.scale_rows(&d);
        Ok(j)
    }

    /// Accumulates parameter gradients for one sample and returns `∂L/∂u`.
    ///
    /// `pre` is the cached pre-activation, `d_out` the gradient wrt the output.
    pub fn backward(&self, input: &[f64], pre: &[f64], d_out: &[f64], grad: &mut FcGrad) -> Vector {
        let d_pre: Vector = d_out
            .iter()
            .zip(pre)
            .map(|(g, z)| g * self.activation.derivative(*z))
            .collect();
        grad.weights.rank1_acc(1.0, &d_pre, input);
        axpy(1.0, &d_pre, &mut grad.bias);
        let mut d_in = vec![0.0; self.inputs()];
        self.weights.matvec_t_acc(&d_pre, &mut d_in);
        d_in
    }
}

pub fn fc_forward(layer: &FcLayer, u: &[f64]) -> Result<Vector> {
    layer.forward(u)
}

pub fn fc_jacobian(layer: &FcLayer, u: &[f64]) -> Result<Matrix> {
    layer.jacobian(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGrad {
    pub weights: Matrix,
    pub bias: Vector,
}

impl FcGrad {
    pub fn zeros_like(layer: &FcLayer) -> Self {
        FcGrad {
            weights: Matrix::zeros(layer.outputs(), layer.inputs()),
            bias: vec![0.0; layer.outputs()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    /// `4n_h × n_u`, gate blocks in [`GATE_ORDER`].
    pub w_input: Matrix,
    /// `4n_h × n_h`, gate blocks in [`GATE_ORDER`].
    pub w_hidden: Matrix,
    pub bias: Vector,
    pub hidden_size: usize,
}

/// Short-term (`h`) and long-term (`c`) state of one LSTM layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(n: usize) -> Self {
        LstmState {
            h: vec![0.0; n],
            c: vec![0.0; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| v.is_finite())
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub input: Vector,
    pub prev: LstmState,
    pub i: Vector,
    pub f: Vector,
    pub g: Vector,
    pub o: Vector,
    pub c: Vector,
    pub tanh_c: Vector,
}

/// Jacobians of one LSTM step `(u, h, c) ↦ (h', c')`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmJacobians {
    pub dh_du: Matrix,
    pub dh_dh: Matrix,
    pub dh_dc: Matrix,
    pub dc_du: Matrix,
    pub dc_dh: Matrix,
    pub dc_dc: Matrix,
}

impl LstmLayer {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        LstmLayer {
            w_input: Matrix::zeros(4 * hidden, inputs),
            w_hidden: Matrix::zeros(4 * hidden, hidden),
            bias: vec![0.0; 4 * hidden],
            hidden_size: hidden,
        }
    }

    pub fn init<R: Rng>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((inputs + hidden) as f64).sqrt();
        LstmLayer {
            w_input: uniform_matrix(4 * hidden, inputs, bound, rng),
            w_hidden: uniform_matrix(4 * hidden, hidden, bound, rng),
            bias: (0..4 * hidden).map(|_| rng.gen_range(-bound..=bound)).collect(),
            hidden_size: hidden,
        }
    }

    pub fn inputs(&self) -> usize {
        self.w_input.cols()
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let n4 = 4 * self.hidden_size;
        if self.w_input.rows() != n4 {
            return Err(Error::dim(format!("{name}.w_input rows"), n4, self.w_input.rows()));
        }
        if self.w_hidden.rows() != n4 {
            return Err(Error::dim(format!("{name}.w_hidden rows"), n4, self.w_hidden.rows()));
        }
        if self.w_hidden.cols() != self.hidden_size {
            return Err(Error::dim(
                format!("{name}.w_hidden cols"),
                self.hidden_size,
                self.w_hidden.cols(),
            ));
        }
        if self.bias.len() != n4 {
            return Err(Error::dim(format!("{name}.bias"), n4, self.bias.len()));
        }
        if !self.w_input.is_finite() || !self.w_hidden.is_finite() || self.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: name.into() });
        }
        Ok(())
    }

    fn check(&self, u: &[f64], prev: &LstmState) -> Result<()> {
        if u.len() != self.inputs() {
            return Err(Error::dim("lstm input", self.inputs(), u.len()));
        }
        if prev.h.len() != self.hidden_size {
            return Err(Error::dim("lstm hidden state", self.hidden_size, prev.h.len()));
        }
        if prev.c.len() != self.hidden_size {
            return Err(Error::dim("lstm cell state", self.hidden_size, prev.c.len()));
        }
        Ok(())
    }

    /// Gate activations `(i, f, g, o)` for the given input and state.
    fn gates(&self, u: &[f64], h: &[f64]) -> (Vector, Vector, Vector, Vector) {
        let n = self.hidden_size;
        let mut z = self.w_input.matvec(u);
        let zh = self.w_hidden.matvec(h);
        axpy(1.0, &zh, &mut z);
        axpy(1.0, &self.bias, &mut z);
        let i = z[..n].iter().map(|v| sigmoid(*v)).collect();
        let f = z[n..2 * n].iter().map(|v| sigmoid(*v)).collect();
        let g = z[2 * n..3 * n].iter().map(|v| tanh_act(*v)).collect();
        let o = z[3 * n..].iter().map(|v| sigmoid(*v)).collect();
        (i, f, g, o)
    }

    pub fn step(&self, u: &[f64], prev: &LstmState) -> Result<(Vector, LstmState)> {
        self.check(u, prev)?;
        let n = self.hidden_size;
        let mut z = self.bias.clone();
        for (k, zk) in z.iter_mut().enumerate() {
            *zk += dot(self.w_input.row(k), u) + dot(self.w_hidden.row(k), &prev.h);
        }
        let mut h = vec![0.0; n];
        let mut c = vec![0.0; n];
        for k in 0..n {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[n + k]);
            let g = tanh_act(z[2 * n + k]);
            let o = sigmoid(z[3 * n + k]);
            c[k] = f * prev.c[k] + i * g;
            h[k] = o * tanh_act(c[k]);
        }
        Ok((h.clone(), LstmState { h, c }))
    }

    pub fn step_cached(&self, u: &[f64], prev: &LstmState) -> Result<LstmCache> {
        self.check(u, prev)?;
        let (i, f, g, o) = self.gates(u, &prev.h);
        let c: Vector = (0..self.hidden_size)
            .map(|k| f[k] * prev.c[k] + i[k] * g[k])
            .collect();
        let tanh_c = c.iter().map(|v| tanh_act(*v)).collect();
        Ok(LstmCache {
            input: u.to_vec(),
            prev: prev.clone(),
            i,
            f,
            g,
            o,
            c,
            tanh_c,
        })
    }

    pub fn jacobians(&self, u: &[f64], prev: &LstmState) -> Result<LstmJacobians> {
        let cache = self.step_cached(u, prev)?;
        Ok(self.jacobians_from_cache(&cache))
    }

    pub fn jacobians_from_cache(&self, k: &LstmCache) -> LstmJacobians {
        let n = self.hidden_size;
        // ∂c'/∂z for the i, f, g blocks and ∂h'/∂z for the o block
        let d_i: Vector = (0..n).map(|j| k.g[j] * k.i[j] * (1.0 - k.i[j])).collect();
        let d_f: Vector = (0..n).map(|j| k.prev.c[j] * k.f[j] * (1.0 - k.f[j])).collect();
        let d_g: Vector = (0..n).map(|j| k.i[j] * (1.0 - k.g[j] * k.g[j])).collect();
        let d_o: Vector = (0..n).map(|j| k.tanh_c[j] * k.o[j] * (1.0 - k.o[j])).collect();
        let dh_dcnew: Vector = (0..n).map(|j| k.o[j] * (1.0 - k.tanh_c[j] * k.tanh_c[j])).collect();

        let gate_product = |w: &Matrix| -> (Matrix, Matrix) {
            let cols = w.cols();
            let mut dc = Matrix::zeros(n, cols);
            let mut dh = Matrix::zeros(n, cols);
            for j in 0..n {
                let row = dc.row_mut(j);
                axpy(d_i[j], w.row(j), row);
                axpy(d_f[j], w.row(n + j), row);
                axpy(d_g[j], w.row(2 * n + j), row);
                let dc_row = dc.row(j).to_vec();
                let hrow = dh.row_mut(j);
                axpy(d_o[j], w.row(3 * n + j), hrow);
                axpy(dh_dcnew[j], &dc_row, hrow);
            }
            (dc, dh)
        };
        let (dc_du, dh_du) = gate_product(&self.w_input);
        let (dc_dh, dh_dh) = gate_product(&self.w_hidden);
        let dc_dc = Matrix::from_diag(&k.f);
        let dh_dc_diag: Vector = (0..n).map(|j| dh_dcnew[j] * k.f[j]).collect();
        LstmJacobians {
            dh_du,
            dh_dh,
            dh_dc: Matrix::from_diag(&dh_dc_diag),
            dc_du,
            dc_dh,
            dc_dc,
        }
    }

    /// One step of backpropagation through time.
    ///
    /// Takes gradients wrt this step's outputs `h'` and `c'` (including what
    /// flows back from later steps), accumulates parameter gradients, and
    /// returns gradients wrt `(u, h_prev, c_prev)`.
    pub fn backward(
        &self,
        k: &LstmCache,
        d_h: &[f64],
        d_c_next: &[f64],
        grad: &mut LstmGrad,
    ) -> (Vector, Vector, Vector) {
        let n = self.hidden_size;
        let mut d_z = vec![0.0; 4 * n];
        let mut d_c_prev = vec![0.0; n];
        for j in 0..n {
            let d_c = d_c_next[j] + d_h[j] * k.o[j] * (1.0 - k.tanh_c[j] * k.tanh_c[j]);
            d_z[j] = d_c * k.g[j] * k.i[j] * (1.0 - k.i[j]);
            d_z[n + j] = d_c * k.prev.c[j] * k.f[j] * (1.0 - k.f[j]);
            d_z[2 * n + j] = d_c * k.i[j] * (1.0 - k.g[j] * k.g[j]);
            d_z[3 * n + j] = d_h[j] * k.tanh_c[j] * k.o[j] * (1.0 - k.o[j]);
            d_c_prev[j] = d_c * k.f[j];
        }
        grad.w_input.rank1_acc(1.0, &d_z, &k.input);
        grad.w_hidden.rank1_acc(1.0, &d_z, &k.prev.h);
        axpy(1.0, &d_z, &mut grad.bias);
        let mut d_u = vec![0.0; self.inputs()];
        self.w_input.matvec_t_acc(&d_z, &mut d_u);
        let mut d_h_prev = vec![0.0; n];
        self.w_hidden.matvec_t_acc(&d_z, &mut d_h_prev);
        (d_u, d_h_prev, d_c_prev)
    }
}

pub fn lstm_step(layer: &LstmLayer, u: &[f64], prev: &LstmState) -> Result<(Vector, LstmState)> {
    layer.step(u, prev)
}

pub fn lstm_step_jacobians(layer: &LstmLayer, u: &[f64], prev: &LstmState) -> Result<LstmJacobians> {
    layer.jacobians(u, prev)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrad {
    pub w_input: Matrix,
    pub w_hidden: Matrix,
    pub bias: Vector,
}

impl LstmGrad {
    pub fn zeros_like(layer: &LstmLayer) -> Self {
        LstmGrad {
            w_input: Matrix::zeros(layer.w_input.rows(), layer.w_input.cols()),
            w_hidden: Matrix::zeros(layer.w_hidden.rows(), layer.w_hidden.cols()),
            bias: vec![0.0; layer.bias.len()],
        }
    }
}
