use ndarray::Array2;
use rand::Rng;

/// A trainable tensor with its accumulated gradient.
///
/// Vectors are stored as `1 x n` matrices so every parameter shares one
/// shape type.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    /// Whether the L2 penalty applies (weights yes, biases no).
    pub decay: bool,
}

impl Param {
    pub fn new(value: Array2<f64>, decay: bool) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param { value, grad, decay }
    }

    pub fn zeros(rows: usize, cols: usize, decay: bool) -> Self {
        Param::new(Array2::zeros((rows, cols)), decay)
    }

    /// Uniform Glorot initialization over `[-a, a]`, `a = sqrt(6 / (rows + cols))`.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Param::new(Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a)), true)
    }

    /// Bias vector of zeros, excluded from weight decay.
    pub fn bias(n: usize) -> Self {
        Param::zeros(1, n, false)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Structured access to every parameter of a layer or model under a
/// dotted path name.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Param {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(prefix, self)
    }
}
