//! Minimal dense layers with hand-written reverse mode.

use rand::Rng;

/// Walks named parameter tensors in a fixed order.
///
/// Gradients are stored in the same structs as the parameters, so one
/// traversal order serves checkpoints, the optimizer, and gradient checks.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    /// Overwrites every parameter from a flat vector in visit order.
    fn assign_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        });
        assert_eq!(offset, values.len(), "flat vector length mismatch");
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, t| t.fill(value));
    }

    /// `self += alpha * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, alpha: f64)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.len();
            for (a, b) in t.iter_mut().zip(&flat[offset..offset + n]) {
                *a += alpha * b;
            }
            offset += n;
        });
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Fully connected layer. `weight[i * outputs + o]` maps input `i` to output `o`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights and biases uniform in ±1/√inputs.
    pub fn uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
        let weight = draw(inputs * outputs);
        let bias = draw(outputs);
        Self {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weight[i * self.outputs..(i + 1) * self.outputs]
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        debug_assert_eq!(y.len(), self.outputs);
        y.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yo, w) in y.iter_mut().zip(self.row(i)) {
                *yo += xi * w;
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.outputs];
        self.forward(x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and, if given, writes the
    /// input gradient into `gx`.
    pub fn backward(&self, x: &[f64], gy: &[f64], grad: &mut Linear, gx: Option<&mut [f64]>) {
        for (b, g) in grad.bias.iter_mut().zip(gy) {
            *b += g;
        }
        let out = self.outputs;
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (w, g) in grad.weight[i * out..(i + 1) * out].iter_mut().zip(gy) {
                *w += xi * g;
            }
        }
        if let Some(gx) = gx {
            for (i, g) in gx.iter_mut().enumerate() {
                *g = dot(self.row(i), gy);
            }
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Dot product with four fixed accumulation lanes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries where the rectified output was not positive.
pub fn relu_backward(g: &mut [f64], activated: &[f64]) {
    for (g, &a) in g.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax cross-entropy over `logits` and its gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}
