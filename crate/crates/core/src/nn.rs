//! Named parameter sets, binding onto graphs, and the Adam optimizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces values from `(name, tensor)` pairs; every name must exist with
    /// the same shape.
    pub fn load_named<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        for (name, t) in entries {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::format("checkpoint", format!("unknown parameter {name}")))?;
            if self.values[idx].shape() != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        self.values[idx].shape()
                    ),
                ));
            }
            self.values[idx] = t.clone();
        }
        Ok(())
    }

    /// Puts every parameter on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }
}

/// The graph nodes of one bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps nodes already on a graph, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients after a backward pass, zero where unreached.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.grad_or_zero(v)).collect()
    }
}

/// A 3x3 (or k x k) convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = c_in * k * k;
        let weight = ps.add(format!("{name}.weight"), Tensor::fan_in_uniform(&[c_out, c_in, k, k], fan_in, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv { weight, bias, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), p.var(self.bias), 1, self.pad)
    }
}

/// A fully-connected layer.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = ps.add(format!("{name}.weight"), Tensor::fan_in_uniform(&[d_out, d_in], d_in, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Dense { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                *w -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Elementwise `acc += scale * add` over matching gradient lists.
pub fn accumulate(acc: &mut [Tensor], add: &[Tensor], scale: f64) {
    for (a, b) in acc.iter_mut().zip(add) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += scale * y;
        }
    }
}

pub fn zero_grads(params: &ParamSet) -> Vec<Tensor> {
    params.values().iter().map(|t| Tensor::zeros(t.shape())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        let g = vec![Tensor::new(&[2], vec![0.3, -5.0]).unwrap()];
        opt.step(&mut ps, &g).unwrap();
        let w = ps.values()[0].data();
        assert!((w[0] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 2e-4)).abs() < 1e-9);
    }

    #[test]
    fn adam_published_defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2), (2e-4, 0.5, 0.999));
    }

    #[test]
    fn load_named_checks_shapes() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::zeros(&[2]));
        let bad = Tensor::zeros(&[3]);
        assert!(ps.load_named([("a", &bad)]).is_err());
        assert!(ps.load_named([("b", &bad)]).is_err());
        let good = Tensor::full(&[2], 4.0);
        ps.load_named([("a", &good)]).unwrap();
        assert_eq!(ps.values()[0], good);
    }
}
