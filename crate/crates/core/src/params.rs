//! Named parameter storage and the forward-pass context built on top of it.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BnMode, BnStats, Graph, Scalar, Tensor, Var};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.01;

/// Trainable tensors and batch-norm running statistics, keyed by dotted path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    bn: BTreeMap<String, BnStats<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            bn: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t.with_grad());
    }

    /// Normal init scaled by fan-out, `std = sqrt(2 / (C_out·k·k))`.
    pub fn insert_conv(&mut self, name: impl Into<String>, c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) {
        let std = (2.0 / (c_out * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let t = Tensor::from_fn(vec![c_out, c_in, k, k], |_| T::from_f64_lossy(dist.sample(rng)));
        self.insert(name, t);
    }

    /// Transposed-conv weight `[C_in, C_out, k, k]`, same fan-out scaling.
    pub fn insert_deconv(&mut self, name: impl Into<String>, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) {
        let std = (2.0 / (c_out * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let t = Tensor::from_fn(vec![c_in, c_out, k, k], |_| T::from_f64_lossy(dist.sample(rng)));
        self.insert(name, t);
    }

    /// `{prefix}.gamma = 1`, `{prefix}.beta = 0` and fresh running statistics.
    pub fn insert_bn(&mut self, prefix: &str, channels: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::full(vec![channels], T::one()));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(vec![channels]));
        self.bn.insert(prefix.to_string(), BnStats::new(channels, BN_EPS, BN_MOMENTUM));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn bn_stats(&self, prefix: &str) -> Result<&BnStats<T>> {
        self.bn
            .get(prefix)
            .ok_or_else(|| Error::config(format!("missing batch-norm statistics `{prefix}`")))
    }

    pub fn bn_stats_mut(&mut self, prefix: &str) -> Result<&mut BnStats<T>> {
        self.bn
            .get_mut(prefix)
            .ok_or_else(|| Error::config(format!("missing batch-norm statistics `{prefix}`")))
    }

    pub fn insert_bn_stats(&mut self, prefix: impl Into<String>, stats: BnStats<T>) {
        self.bn.insert(prefix.into(), stats);
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn bn_entries(&self) -> impl Iterator<Item = (&str, &BnStats<T>)> {
        self.bn.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of trainable scalars, optionally restricted to a name prefix.
    pub fn num_trainable(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Adds the gradients of every parameter recorded on `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, grads: &crate::tensor::Gradients<T>) -> Result<()> {
        for (name, g) in graph.param_grads(grads) {
            self.get_mut(name)?.accumulate_grad(g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::from_f64_lossy(factor);
        for t in self.params.values_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = *v * f);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &T| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN));
        ParamStore {
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            bn: self
                .bn
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        BnStats {
                            running_mean: s.running_mean.iter().map(conv).collect(),
                            running_var: s.running_var.iter().map(conv).collect(),
                            eps: conv(&s.eps),
                            momentum: conv(&s.momentum),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// One forward pass: the tape, the parameters it reads, and the batch-norm mode.
pub struct Forward<'a, T> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: BnMode,
}

impl<T: Scalar> Forward<'_, T> {
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        Ok(self.graph.param(name, t))
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let stats = self.store.bn_stats_mut(prefix)?;
        self.graph.batch_norm(x, gamma, beta, stats, self.mode)
    }

    /// `relu(bn(conv(x)))` with an unbiased conv at `{prefix}.conv.weight`
    /// and batch norm at `{prefix}.bn`.
    pub fn conv_bn_relu(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.conv.weight"))?;
        let y = self.graph.conv2d(x, w, None, stride, pad)?;
        let y = self.batch_norm(&format!("{prefix}.bn"), y)?;
        self.graph.relu(y)
    }
}
