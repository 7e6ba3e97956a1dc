use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::AutodiffError;
use crate::matrix::Matrix;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Relu,
}

/// Map applied to the final linear layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputTransform {
    #[default]
    Identity,
    /// `scale * sigmoid(z)`, a bounded positive output.
    SigmoidPositive { scale: f64 },
    /// `softplus(z)`, an unbounded positive output.
    Softplus,
    /// `factor * z`.
    Scaled { factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Layer widths including input and output, e.g. `[1, 10, 20, 10, 1]`.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub hidden: Activation,
    #[serde(default)]
    pub output: OutputTransform,
}

impl MlpConfig {
    pub fn new(widths: &[usize]) -> Self {
        Self {
            widths: widths.to_vec(),
            hidden: Activation::Tanh,
            output: OutputTransform::Identity,
        }
    }

    pub fn with_output(mut self, output: OutputTransform) -> Self {
        self.output = output;
        self
    }

    /// Number of weights; layers carry no bias.
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(AutodiffError::InvalidNetwork("need at least input and output widths".into()));
        }
        if self.widths.contains(&0) {
            return Err(AutodiffError::InvalidNetwork("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Bias-free fully connected network whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<ParamId>,
}

fn apply_hidden(tape: &mut Tape, act: Activation, x: Var) -> Result<Var> {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Relu => tape.relu(x),
    }
}

fn hidden_value(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Relu => x.max(0.0),
    }
}

fn output_value(out: OutputTransform, z: f64) -> f64 {
    match out {
        OutputTransform::Identity => z,
        OutputTransform::SigmoidPositive { scale } => scale / (1.0 + (-z).exp()),
        OutputTransform::Softplus => {
            if z > 30.0 {
                z
            } else {
                z.exp().ln_1p()
            }
        }
        OutputTransform::Scaled { factor } => factor * z,
    }
}

impl Mlp {
    /// Registers layer weights `{prefix}.w{l}` with uniform initialisation
    /// in `±1/sqrt(fan_in)`.
    pub fn register(store: &mut ParamStore, prefix: &str, config: MlpConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        for (l, w) in config.widths.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let data = (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect();
            layers.push(store.insert(&format!("{prefix}.w{l}"), &[w[0], w[1]], data, true)?);
        }
        Ok(Self { config, layers })
    }

    /// Reattaches to weights already present in `store` (e.g. after loading
    /// a checkpoint).
    pub fn attach(store: &ParamStore, prefix: &str, config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        for (l, w) in config.widths.windows(2).enumerate() {
            let id = store.id(&format!("{prefix}.w{l}"))?;
            if store.entry(id).shape != [w[0], w[1]] {
                return Err(AutodiffError::InvalidNetwork(format!(
                    "layer {l} of {prefix} has shape {:?}, expected {:?}",
                    store.entry(id).shape,
                    [w[0], w[1]]
                )));
            }
            layers.push(id);
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ParamId] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.config.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.config.widths.last().expect("validated widths")
    }

    /// Applies the network row-wise to `x` (`n x in`), giving `n x out`.
    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        let got = tape.try_value(x)?.cols();
        if got != self.input_width() {
            return Err(AutodiffError::InputWidth {
                expected: self.input_width(),
                got,
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &id) in self.layers.iter().enumerate() {
            h = tape.matmul(h, binding.var(id))?;
            if l < last {
                h = apply_hidden(tape, self.config.hidden, h)?;
            }
        }
        match self.config.output {
            OutputTransform::Identity => Ok(h),
            OutputTransform::SigmoidPositive { scale } => {
                let s = tape.sigmoid(h)?;
                tape.scale(s, scale)
            }
            OutputTransform::Softplus => tape.softplus(h),
            OutputTransform::Scaled { factor } => tape.scale(h, factor),
        }
    }

    /// Tape-free evaluation on a batch of rows.
    pub fn evaluate(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_width() {
            return Err(AutodiffError::InputWidth {
                expected: self.input_width(),
                got: x.cols(),
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, &id) in self.layers.iter().enumerate() {
            h = h.matmul(store.value(id));
            if l < last {
                let act = self.config.hidden;
                h = h.map(|v| hidden_value(act, v));
            }
        }
        let out = self.config.output;
        Ok(h.map(|z| output_value(out, z)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reaction_network_has_880_weights() {
        let cfg = MlpConfig::new(&[2, 20, 20, 20, 2]);
        assert_eq!(cfg.param_count(), 880);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Mlp::register(&mut store, "phi", cfg, &mut rng).unwrap();
        assert_eq!(store.total_count(), 880);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::register(&mut store, "n", MlpConfig::new(&[1, 4, 1]), &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.leaf(Matrix::zeros(3, 2));
        assert!(matches!(
            mlp.forward(&mut tape, &b, x),
            Err(AutodiffError::InputWidth { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn taped_and_plain_evaluation_agree() {
        for out in [
            OutputTransform::Identity,
            OutputTransform::SigmoidPositive { scale: 3.0 },
            OutputTransform::Softplus,
            OutputTransform::Scaled { factor: 0.1 },
        ] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let cfg = MlpConfig::new(&[1, 10, 20, 10, 1]).with_output(out);
            let mlp = Mlp::register(&mut store, "n", cfg, &mut rng).unwrap();
            let x = Matrix::column(vec![-1.0, -0.3, 0.0, 0.4, 2.0]);
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            let y = mlp.forward(&mut tape, &b, xv).unwrap();
            let plain = mlp.evaluate(&store, &x).unwrap();
            for (a, p) in tape.value(y).data().iter().zip(plain.data()) {
                assert!((a - p).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mk = |seed| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Mlp::register(&mut store, "n", MlpConfig::new(&[4, 3]), &mut rng).unwrap();
            store.flat_trainable()
        };
        assert_eq!(mk(1), mk(1));
        assert_ne!(mk(1), mk(2));
        assert!(mk(3).iter().all(|w| w.abs() <= 0.5));
    }
}
