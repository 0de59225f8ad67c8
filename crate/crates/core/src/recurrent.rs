//! The FC → LSTM → FC → FC stack shared by the performance network, the
//! emission network and the imitation controller.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix, Vector};
use crate::nn::{Activation, FcGrad, FcLayer, LstmCache, LstmGrad, LstmLayer, LstmState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentNet {
    pub fc_in: FcLayer,
    pub lstm: LstmLayer,
    pub fc_mid: FcLayer,
    pub head: FcLayer,
}

/// Shape of a [`RecurrentNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub inputs: usize,
    pub fc_width: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub head: Activation,
}

#[derive(Debug, Clone)]
pub struct StepCache {
    pub input: Vector,
    pub pre_in: Vector,
    pub a_in: Vector,
    pub lstm: LstmCache,
    pub h: Vector,
    pub pre_mid: Vector,
    pub a_mid: Vector,
    pub pre_head: Vector,
    pub out: Vector,
}

impl StepCache {
    pub fn next_state(&self) -> LstmState {
        LstmState {
            h: self.h.clone(),
            c: self.lstm.c.clone(),
        }
    }
}

/// Jacobians of one network step `(input, h, c) ↦ (out, h', c')`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetJacobians {
    pub dy_du: Matrix,
    pub dy_dh: Matrix,
    pub dy_dc: Matrix,
    pub dh_du: Matrix,
    pub dh_dh: Matrix,
    pub dh_dc: Matrix,
    pub dc_du: Matrix,
    pub dc_dh: Matrix,
    pub dc_dc: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad {
    pub fc_in: FcGrad,
    pub lstm: LstmGrad,
    pub fc_mid: FcGrad,
    pub head: FcGrad,
}

impl NetGrad {
    pub fn zeros_like(net: &RecurrentNet) -> Self {
        NetGrad {
            fc_in: FcGrad::zeros_like(&net.fc_in),
            lstm: LstmGrad::zeros_like(&net.lstm),
            fc_mid: FcGrad::zeros_like(&net.fc_mid),
            head: FcGrad::zeros_like(&net.head),
        }
    }

    pub fn all_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.fc_in.weights.data_mut(),
            &mut self.fc_in.bias,
            self.lstm.w_input.data_mut(),
            self.lstm.w_hidden.data_mut(),
            &mut self.lstm.bias,
            self.fc_mid.weights.data_mut(),
            &mut self.fc_mid.bias,
            self.head.weights.data_mut(),
            &mut self.head.bias,
        ]
    }

    pub fn all(&self) -> Vec<&[f64]> {
        vec![
            self.fc_in.weights.data(),
            &self.fc_in.bias,
            self.lstm.w_input.data(),
            self.lstm.w_hidden.data(),
            &self.lstm.bias,
            self.fc_mid.weights.data(),
            &self.fc_mid.bias,
            self.head.weights.data(),
            &self.head.bias,
        ]
    }

    /// `self += other`, in a fixed element order.
    pub fn add_assign(&mut self, other: &NetGrad) {
        for (dst, src) in self.all_mut().into_iter().zip(other.all()) {
            axpy(1.0, src, dst);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for dst in self.all_mut() {
            dst.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Adds `coef · W` for every weight matrix (biases untouched).
    pub fn add_weight_decay(&mut self, net: &RecurrentNet, coef: f64) {
        let weights = [
            (&mut self.fc_in.weights, &net.fc_in.weights),
            (&mut self.lstm.w_input, &net.lstm.w_input),
            (&mut self.lstm.w_hidden, &net.lstm.w_hidden),
            (&mut self.fc_mid.weights, &net.fc_mid.weights),
            (&mut self.head.weights, &net.head.weights),
        ];
        for (g, w) in weights {
            axpy(coef, w.data(), g.data_mut());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.all().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.all()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl RecurrentNet {
    pub fn init<R: Rng>(shape: NetShape, rng: &mut R) -> Self {
        RecurrentNet {
            fc_in: FcLayer::init(shape.inputs, shape.fc_width, Activation::Relu, rng),
            lstm: LstmLayer::init(shape.fc_width, shape.hidden, rng),
            fc_mid: FcLayer::init(shape.hidden, shape.fc_width, Activation::Relu, rng),
            head: FcLayer::init(shape.fc_width, shape.outputs, shape.head, rng),
        }
    }

    pub fn zeros(shape: NetShape) -> Self {
        RecurrentNet {
            fc_in: FcLayer::zeros(shape.inputs, shape.fc_width, Activation::Relu),
            lstm: LstmLayer::zeros(shape.fc_width, shape.hidden),
            fc_mid: FcLayer::zeros(shape.hidden, shape.fc_width, Activation::Relu),
            head: FcLayer::zeros(shape.fc_width, shape.outputs, shape.head),
        }
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            inputs: self.fc_in.inputs(),
            fc_width: self.fc_in.outputs(),
            hidden: self.lstm.hidden_size,
            outputs: self.head.outputs(),
            head: self.head.activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.fc_in.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.head.outputs()
    }

    pub fn hidden_size(&self) -> usize {
        self.lstm.hidden_size
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        self.fc_in.validate(&format!("{name}.fc_in"))?;
        self.lstm.validate(&format!("{name}.lstm"))?;
        self.fc_mid.validate(&format!("{name}.fc_mid"))?;
        self.head.validate(&format!("{name}.head"))?;
        let links = [
            ("lstm input", self.fc_in.outputs(), self.lstm.inputs()),
            ("fc_mid input", self.lstm.hidden_size, self.fc_mid.inputs()),
            ("head input", self.fc_mid.outputs(), self.head.inputs()),
        ];
        for (what, expected, got) in links {
            if expected != got {
                return Err(Error::dim(format!("{name}.{what}"), expected, got));
            }
        }
        Ok(())
    }

    pub fn step(&self, input: &[f64], state: &LstmState) -> Result<(Vector, LstmState)> {
        let a_in = self.fc_in.forward(input)?;
        let (h, next) = self.lstm.step(&a_in, state)?;
        let a_mid = self.fc_mid.forward(&h)?;
        let out = self.head.forward(&a_mid)?;
        Ok((out, next))
    }

    pub fn step_cached(&self, input: &[f64], state: &LstmState) -> Result<StepCache> {
        let pre_in = self.fc_in.pre_activation(input)?;
        let a_in: Vector = pre_in.iter().map(|z| self.fc_in.activation.apply(*z)).collect();
        let lstm = self.lstm.step_cached(&a_in, state)?;
        let h: Vector = lstm.o.iter().zip(&lstm.tanh_c).map(|(o, t)| o * t).collect();
        let pre_mid = self.fc_mid.pre_activation(&h)?;
        let a_mid: Vector = pre_mid.iter().map(|z| self.fc_mid.activation.apply(*z)).collect();
        let pre_head = self.head.pre_activation(&a_mid)?;
        let out = pre_head.iter().map(|z| self.head.activation.apply(*z)).collect();
        Ok(StepCache {
            input: input.to_vec(),
            pre_in,
            a_in,
            lstm,
            h,
            pre_mid,
            a_mid,
            pre_head,
            out,
        })
    }

    pub fn jacobians(&self, input: &[f64], state: &LstmState) -> Result<NetJacobians> {
        let cache = self.step_cached(input, state)?;
        Ok(self.jacobians_from_cache(&cache))
    }

    pub fn jacobians_from_cache(&self, k: &StepCache) -> NetJacobians {
        let mut j_in = self.fc_in.weights.clone();
        let d: Vec<f64> = k.pre_in.iter().map(|z| self.fc_in.activation.derivative(*z)).collect();
        j_in.scale_rows(&d);
        let lj = self.lstm.jacobians_from_cache(&k.lstm);

        // out = head(fc_mid(h')): J_out = J_head · J_mid
        let mut j_mid = self.fc_mid.weights.clone();
        let d: Vec<f64> = k.pre_mid.iter().map(|z| self.fc_mid.activation.derivative(*z)).collect();
        j_mid.scale_rows(&d);
        let mut j_head = self.head.weights.clone();
        let d: Vec<f64> = k.pre_head.iter().map(|z| self.head.activation.derivative(*z)).collect();
        j_head.scale_rows(&d);
        let j_out = j_head.matmul(&j_mid);

        let dh_du = lj.dh_du.matmul(&j_in);
        let dc_du = lj.dc_du.matmul(&j_in);
        NetJacobians {
            dy_du: j_out.matmul(&dh_du),
            dy_dh: j_out.matmul(&lj.dh_dh),
            dy_dc: j_out.matmul(&lj.dh_dc),
            dh_du,
            dh_dh: lj.dh_dh,
            dh_dc: lj.dh_dc,
            dc_du,
            dc_dh: lj.dc_dh,
            dc_dc: lj.dc_dc,
        }
    }

    /// Runs the net over a sequence from `init`, returning per-step outputs.
    pub fn run(&self, inputs: &[Vector], init: &LstmState) -> Result<Vec<Vector>> {
        let mut state = init.clone();
        let mut outs = Vec::with_capacity(inputs.len());
        for u in inputs {
            let (y, next) = self.step(u, &state)?;
            outs.push(y);
            state = next;
        }
        Ok(outs)
    }

    /// Backpropagation through time over one chunk.
    ///
    /// Accumulates the gradient of the *unnormalized* squared error
    /// `Σ_k Σ_j (ŷ_kj − y_kj)²` into `grad` and returns that sum.
    pub fn bptt(&self, inputs: &[Vector], targets: &[Vector], init: &LstmState, grad: &mut NetGrad) -> Result<f64> {
        if inputs.len() != targets.len() {
            return Err(Error::dim("bptt targets", inputs.len(), targets.len()));
        }
        let mut caches = Vec::with_capacity(inputs.len());
        let mut state = init.clone();
        for u in inputs {
            let cache = self.step_cached(u, &state)?;
            state = cache.next_state();
            caches.push(cache);
        }
        let n = self.lstm.hidden_size;
        let mut d_h_next = vec![0.0; n];
        let mut d_c_next = vec![0.0; n];
        let mut sse = 0.0;
        for (k, t) in caches.iter().zip(targets).rev() {
            if t.len() != k.out.len() {
                return Err(Error::dim("bptt target width", k.out.len(), t.len()));
            }
            let d_out: Vector = k.out.iter().zip(t).map(|(y, t)| 2.0 * (y - t)).collect();
            sse += k.out.iter().zip(t).map(|(y, t)| (y - t) * (y - t)).sum::<f64>();
            let d_mid = self.head.backward(&k.a_mid, &k.pre_head, &d_out, &mut grad.head);
            let mut d_h = self.fc_mid.backward(&k.h, &k.pre_mid, &d_mid, &mut grad.fc_mid);
            axpy(1.0, &d_h_next, &mut d_h);
            let (d_a_in, d_h_prev, d_c_prev) = self.lstm.backward(&k.lstm, &d_h, &d_c_next, &mut grad.lstm);
            self.fc_in.backward(&k.input, &k.pre_in, &d_a_in, &mut grad.fc_in);
            d_h_next = d_h_prev;
            d_c_next = d_c_prev;
        }
        if !sse.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite {
                layer: "bptt gradient".into(),
            });
        }
        Ok(sse)
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.fc_in.weights.frobenius_sq()
            + self.lstm.w_input.frobenius_sq()
            + self.lstm.w_hidden.frobenius_sq()
            + self.fc_mid.weights.frobenius_sq()
            + self.head.weights.frobenius_sq()
    }

    /// Flat mutable parameter views paired with "is a weight matrix" flags,
    /// in the same order as [`NetGrad::all`].
    pub fn param_slices_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        vec![
            (self.fc_in.weights.data_mut(), true),
            (&mut self.fc_in.bias, false),
            (self.lstm.w_input.data_mut(), true),
            (self.lstm.w_hidden.data_mut(), true),
            (&mut self.lstm.bias, false),
            (self.fc_mid.weights.data_mut(), true),
            (&mut self.fc_mid.bias, false),
            (self.head.weights.data_mut(), true),
            (&mut self.head.bias, false),
        ]
    }

    pub fn param_count(&self) -> usize {
        let mut copy = self.clone();
        copy.param_slices_mut().iter().map(|(s, _)| s.len()).sum()
    }
}
