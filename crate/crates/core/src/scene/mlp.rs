use rand::Rng;

/// Two-layer perceptron with a rectified hidden layer. Weights are row-major
/// `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Mlp {
            inputs,
            hidden,
            outputs,
            w1: vec![0.0; hidden * inputs],
            b1: vec![0.0; hidden],
            w2: vec![0.0; outputs * hidden],
            b2: vec![0.0; outputs],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn random<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        let mut mlp = Mlp::zeros(inputs, hidden, outputs);
        let b1 = 1.0 / (inputs as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        mlp.w1.iter_mut().for_each(|w| *w = rng.random_range(-b1..b1));
        mlp.b1.iter_mut().for_each(|w| *w = rng.random_range(-b1..b1));
        mlp.w2.iter_mut().for_each(|w| *w = rng.random_range(-b2..b2));
        mlp.b2.iter_mut().for_each(|w| *w = rng.random_range(-b2..b2));
        mlp
    }

    /// Writes the hidden pre-activations and the outputs.
    pub fn forward(&self, x: &[f64], hidden_pre: &mut [f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        for (h, pre) in hidden_pre.iter_mut().enumerate() {
            let row = &self.w1[h * self.inputs..(h + 1) * self.inputs];
            *pre = self.b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            *y = self.b2[o]
                + row
                    .iter()
                    .zip(hidden_pre.iter())
                    .map(|(w, &p)| w * p.max(0.0))
                    .sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grad` and the input gradient into `d_x`.
    pub fn backward(&self, x: &[f64], hidden_pre: &[f64], d_out: &[f64], grad: &mut MlpGrad, d_x: &mut [f64]) {
        let mut d_hidden = vec![0.0; self.hidden];
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b2[o] += g;
            let row = o * self.hidden;
            for h in 0..self.hidden {
                let act = hidden_pre[h].max(0.0);
                grad.w2[row + h] += g * act;
                d_hidden[h] += g * self.w2[row + h];
            }
        }
        for h in 0..self.hidden {
            if hidden_pre[h] <= 0.0 {
                continue;
            }
            let g = d_hidden[h];
            grad.b1[h] += g;
            let row = h * self.inputs;
            for i in 0..self.inputs {
                grad.w1[row + i] += g * x[i];
                d_x[i] += g * self.w1[row + i];
            }
        }
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }
}

impl MlpGrad {
    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}
