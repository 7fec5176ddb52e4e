use super::session::{Mode, Session, BN_EPS};
use super::{Init, ParamSpec, Result};
use crate::tensor::Var;

/// `ReLU(BN(Conv3x3(x)))`, with no conv bias since BN follows.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvBlock {
    pub fn new(prefix: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_ch,
            out_ch,
        }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let o = self.out_ch;
        vec![
            ParamSpec::trainable(
                self.name("conv.weight"),
                vec![o, self.in_ch, 3, 3],
                Init::HeUniform {
                    fan_in: 9 * self.in_ch,
                },
            ),
            ParamSpec::trainable(self.name("bn.weight"), vec![o], Init::Ones),
            ParamSpec::trainable(self.name("bn.bias"), vec![o], Init::Zeros),
            ParamSpec::buffer(self.name("bn.running_mean"), vec![o], Init::Zeros),
            ParamSpec::buffer(self.name("bn.running_var"), vec![o], Init::Ones),
        ]
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let k = s.param(&self.name("conv.weight"))?;
        let gamma = s.param(&self.name("bn.weight"))?;
        let beta = s.param(&self.name("bn.bias"))?;
        let y = s.graph.conv2d(x, k)?;
        let mean_name = self.name("bn.running_mean");
        let var_name = self.name("bn.running_var");
        let y = match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph.batchnorm2d(y, gamma, beta, BN_EPS)?;
                let n = stats.count as f64;
                let unbiased = stats.var.iter().map(|v| v * n / (n - 1.0)).collect();
                s.record_bn(&mean_name, &var_name, stats.mean, unbiased)?;
                y
            }
            Mode::Eval => {
                let mean = s.buffer(&mean_name)?.data().to_vec();
                let var = s.buffer(&var_name)?.data().to_vec();
                s.graph
                    .batchnorm2d_eval(y, gamma, beta, &mean, &var, BN_EPS)?
            }
        };
        Ok(s.graph.relu(y))
    }
}

/// `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AffineMap {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::trainable(
                format!("{}.weight", self.prefix),
                vec![self.in_dim, self.out_dim],
                Init::HeUniform {
                    fan_in: self.in_dim,
                },
            ),
            ParamSpec::trainable(
                format!("{}.bias", self.prefix),
                vec![self.out_dim],
                Init::Zeros,
            ),
        ]
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(&format!("{}.weight", self.prefix))?;
        let b = s.param(&format!("{}.bias", self.prefix))?;
        let y = s.graph.matmul(x, w)?;
        Ok(s.graph.add_bias(y, b)?)
    }
}
