use std::collections::HashMap;

use ndarray::{Array2, Zip};

use super::param::Param;

#[derive(Debug, Clone)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
    steps: i32,
}

/// Adam with per-parameter step counters, so a parameter that starts
/// training late gets fresh bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of `param` from its accumulated gradient.
    pub fn step(&mut self, name: &str, param: &mut Param, lr: f64) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Array2::zeros(param.value.raw_dim()),
            v: Array2::zeros(param.value.raw_dim()),
            steps: 0,
        });
        st.steps += 1;
        let c1 = 1.0 - b1.powi(st.steps);
        let c2 = 1.0 - b2.powi(st.steps);
        Zip::from(&mut param.value)
            .and(&param.grad)
            .and(&mut st.m)
            .and(&mut st.v)
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::zeros(1, 2, true);
        p.grad[[0, 0]] = 3.0;
        p.grad[[0, 1]] = -0.1;
        let mut adam = Adam::new();
        adam.step("p", &mut p, 0.01);
        assert!((p.value[[0, 0]] + 0.01).abs() < 1e-9);
        assert!((p.value[[0, 1]] - 0.01).abs() < 1e-6);
    }
}
