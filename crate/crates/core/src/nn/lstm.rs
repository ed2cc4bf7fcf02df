use ndarray::{s, concatenate, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::param::{join, Param, Params};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unidirectional LSTM with gate order input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w_ih: Param,
    pub w_hh: Param,
    pub bias: Param,
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Array2<f64>,
    /// Post-nonlinearity gates `[i, f, g, o]`, `T x 4H`.
    gates: Array2<f64>,
    cells: Array2<f64>,
    tanh_cells: Array2<f64>,
    pub hidden: Array2<f64>,
}

impl Lstm {
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Lstm {
            w_ih: Param::glorot(input, 4 * hidden, rng),
            w_hh: Param::glorot(hidden, 4 * hidden, rng),
            bias: Param::bias(4 * hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.value.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.value.nrows()
    }

    /// Runs over the rows of `x` in order and returns the hidden states.
    pub fn forward(&self, x: ArrayView2<f64>) -> LstmCache {
        let t_len = x.nrows();
        let h = self.hidden_dim();
        let mut gates = x.dot(&self.w_ih.value) + &self.bias.value;
        let mut cells = Array2::zeros((t_len, h));
        let mut tanh_cells = Array2::zeros((t_len, h));
        let mut hidden = Array2::zeros((t_len, h));
        for t in 0..t_len {
            if t > 0 {
                let rec = hidden.row(t - 1).dot(&self.w_hh.value);
                let mut z = gates.row_mut(t);
                z += &rec;
            }
            let mut z = gates.row_mut(t);
            z.slice_mut(s![..2 * h]).mapv_inplace(sigmoid);
            z.slice_mut(s![2 * h..3 * h]).mapv_inplace(f64::tanh);
            z.slice_mut(s![3 * h..]).mapv_inplace(sigmoid);
            for k in 0..h {
                let prev = if t > 0 { cells[[t - 1, k]] } else { 0.0 };
                let c = z[h + k] * prev + z[k] * z[2 * h + k];
                let tc = c.tanh();
                cells[[t, k]] = c;
                tanh_cells[[t, k]] = tc;
                hidden[[t, k]] = z[3 * h + k] * tc;
            }
        }
        LstmCache {
            x: x.to_owned(),
            gates,
            cells,
            tanh_cells,
            hidden,
        }
    }

    /// Backpropagates `d_hidden` (gradient w.r.t. every output state),
    /// accumulating parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &LstmCache, d_hidden: ArrayView2<f64>) -> Array2<f64> {
        let t_len = cache.x.nrows();
        let h = self.hidden_dim();
        let mut dz = Array2::zeros((t_len, 4 * h));
        let mut dh_next = ndarray::Array1::<f64>::zeros(h);
        let mut dc_next = ndarray::Array1::<f64>::zeros(h);
        for t in (0..t_len).rev() {
            let g = cache.gates.row(t);
            let mut dzt = dz.row_mut(t);
            for k in 0..h {
                let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let tc = cache.tanh_cells[[t, k]];
                let dh = d_hidden[[t, k]] + dh_next[k];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                let c_prev = if t > 0 { cache.cells[[t - 1, k]] } else { 0.0 };
                dzt[k] = dc * gg * i * (1.0 - i);
                dzt[h + k] = dc * c_prev * f * (1.0 - f);
                dzt[2 * h + k] = dc * i * (1.0 - gg * gg);
                dzt[3 * h + k] = d_o * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            dh_next = dzt.dot(&self.w_hh.value.t());
        }
        if t_len > 1 {
            let prev = cache.hidden.slice(s![..t_len - 1, ..]);
            self.w_hh.grad += &prev.t().dot(&dz.slice(s![1.., ..]));
        }
        self.w_ih.grad += &cache.x.t().dot(&dz);
        self.bias.grad += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
        dz.dot(&self.w_ih.value.t())
    }
}

impl Params for Lstm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "w_ih"), &self.w_ih);
        f(&join(prefix, "w_hh"), &self.w_hh);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w_ih"), &mut self.w_ih);
        f(&join(prefix, "w_hh"), &mut self.w_hh);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub(crate) fn reverse_rows(x: ArrayView2<f64>) -> Array2<f64> {
    x.slice(s![..;-1, ..]).to_owned()
}

/// Forward and backward LSTMs whose outputs are concatenated per position,
/// forward half first.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    pub fwd: LstmCache,
    /// Cache of the backward LSTM, in reversed time order.
    pub bwd: LstmCache,
}

impl BiLstmCache {
    /// Forward-direction state at each position (`T x H`).
    pub fn forward_states(&self) -> ArrayView2<'_, f64> {
        self.fwd.hidden.view()
    }

    /// Backward-direction state at each position in natural order.
    pub fn backward_states(&self) -> Array2<f64> {
        reverse_rows(self.bwd.hidden.view())
    }

    pub fn output(&self) -> Array2<f64> {
        concatenate![Axis(1), self.fwd.hidden, self.backward_states()]
    }
}

impl BiLstm {
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstm {
            fwd: Lstm::new(input, hidden, rng),
            bwd: Lstm::new(input, hidden, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fwd.input_dim()
    }

    /// Width of the concatenated output.
    pub fn output_dim(&self) -> usize {
        self.fwd.hidden_dim() + self.bwd.hidden_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> BiLstmCache {
        BiLstmCache {
            fwd: self.fwd.forward(x),
            bwd: self.bwd.forward(reverse_rows(x).view()),
        }
    }

    /// `d_out` is `T x 2H`, laid out like [`BiLstmCache::output`].
    pub fn backward(&mut self, cache: &BiLstmCache, d_out: ArrayView2<f64>) -> Array2<f64> {
        let h = self.fwd.hidden_dim();
        let dx_f = self.fwd.backward(&cache.fwd, d_out.slice(s![.., ..h]));
        let d_b = reverse_rows(d_out.slice(s![.., h..]));
        let dx_b = self.bwd.backward(&cache.bwd, d_b.view());
        let mut dx = dx_f;
        Zip::from(&mut dx)
            .and(&reverse_rows(dx_b.view()))
            .for_each(|a, &b| *a += b);
        dx
    }
}

impl Params for BiLstm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fwd.visit(&join(prefix, "fwd"), f);
        self.bwd.visit(&join(prefix, "bwd"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fwd.visit_mut(&join(prefix, "fwd"), f);
        self.bwd.visit_mut(&join(prefix, "bwd"), f);
    }
}
