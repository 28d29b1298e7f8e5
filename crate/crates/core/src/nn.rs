//! Named parameter storage and the per-pass forward context shared by every
//! layer.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::autograd::{BnMode, Tape, Var};
use crate::error::{config_err, contract_err, Result};
use crate::rng::Rng;
use crate::tensor::{cst, Float, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Trainable.
    Param,
    /// Persistent state updated outside the optimizer (BN running stats).
    Buffer,
}

/// Ordered name → tensor map holding a model's parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, (Tensor<T>, Kind)>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>, kind: Kind) {
        self.entries.insert(name.into(), (t, kind));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|(t, _)| t)
            .ok_or_else(|| config_err!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|(t, _)| t)
            .ok_or_else(|| config_err!("missing parameter `{name}`"))
    }

    pub fn kind(&self, name: &str) -> Option<Kind> {
        self.entries.get(name).map(|(_, k)| *k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, Kind)> {
        self.entries.iter().map(|(n, (t, k))| (n.as_str(), t, *k))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, Kind)> {
        self.entries
            .iter_mut()
            .map(|(n, (t, k))| (n.as_str(), t, *k))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, _, k)| *k == Kind::Param)
            .map(|(n, _, _)| n.to_string())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for (_, t, _) in self.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, (t, k))| (n.clone(), (t.cast::<U>(), *k)))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape, the parameters it reads, and the BN running
/// statistics it wants written back.
pub struct Ctx<'s, T: Float> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    vars: HashMap<String, Var>,
    mode: Mode,
    frozen: Vec<String>,
    updates: Vec<(String, Vec<T>)>,
}

impl<'s, T: Float> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: HashMap::new(),
            mode,
            frozen: Vec::new(),
            updates: Vec::new(),
        }
    }

    /// Parameters under `prefix` get no gradient and their BN layers use
    /// running statistics.
    pub fn freeze(&mut self, prefix: &str) {
        self.frozen.push(prefix.to_string());
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Tape handle for a stored parameter, recorded once per pass.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let trainable = self.store.kind(name) == Some(Kind::Param) && !self.is_frozen(name);
        let v = if trainable {
            let mut node = Tensor::new(t.shape(), t.data().to_vec())?;
            node = node.with_requires_grad(true);
            self.tape.leaf(&node)
        } else {
            self.tape.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of parameters read so far in this pass.
    pub fn touched(&self) -> Vec<String> {
        let mut v: Vec<String> = self.vars.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// x · W + b with `W: [in, out]`, applied over the last axis.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn conv(
        &mut self,
        x: Var,
        prefix: &str,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = if bias {
            Some(self.param(&format!("{prefix}.b"))?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, stride, padding)
    }

    /// Batch norm over channel axis 1 of an NCHW input.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let train = self.mode == Mode::Train && !self.is_frozen(prefix);
        if train {
            let (y, stats) = self.tape.batch_norm(x, g, b, 1, BnMode::Train, BN_EPS)?;
            let stats = stats.ok_or_else(|| contract_err!("train batch norm returned no stats"))?;
            let m = cst::<T>(BN_MOMENTUM);
            let keep = T::one() - m;
            let old_mean = self.store.get(&mean_name)?.data();
            let old_var = self.store.get(&var_name)?.data();
            let new_mean = old_mean
                .iter()
                .zip(&stats.mean)
                .map(|(&o, &s)| keep * o + m * s)
                .collect();
            let new_var = old_var
                .iter()
                .zip(&stats.var)
                .map(|(&o, &s)| keep * o + m * s)
                .collect();
            self.updates.push((mean_name, new_mean));
            self.updates.push((var_name, new_var));
            Ok(y)
        } else {
            let mean = self.store.get(&mean_name)?.data();
            let var = self.store.get(&var_name)?.data();
            let (y, _) = self
                .tape
                .batch_norm(x, g, b, 1, BnMode::Eval { mean, var }, BN_EPS)?;
            Ok(y)
        }
    }

    /// Consumes the pass after `backward`, returning per-parameter gradients
    /// and pending buffer updates.
    pub fn finish(self) -> PassOutput<T> {
        let mut grads = Vec::new();
        for (name, v) in &self.vars {
            if let Some(g) = self.tape.grad(*v) {
                grads.push((name.clone(), g.to_vec()));
            }
        }
        grads.sort_by(|a, b| a.0.cmp(&b.0));
        PassOutput {
            grads,
            buffer_updates: self.updates,
        }
    }
}

/// Gradients and running-statistic updates collected from one pass.
#[derive(Debug, Default)]
pub struct PassOutput<T> {
    pub grads: Vec<(String, Vec<T>)>,
    pub buffer_updates: Vec<(String, Vec<T>)>,
}

impl<T: Float> PassOutput<T> {
    pub fn apply_buffers(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, data) in &self.buffer_updates {
            store.get_mut(name)?.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    pub fn accumulate_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, g) in &self.grads {
            store.get_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// How a parameter is filled at initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    /// Kaiming-uniform for ReLU layers: U(±√(6 / fan_in)).
    KaimingUniform {
        fan_in: usize,
    },
    /// Normal(0, std) redrawn outside ±2·std.
    TruncNormal {
        std: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: Kind,
    pub fill: Fill,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Truncated-normal std for linear layers at the reference width.
pub const LINEAR_STD: f64 = 0.02;
pub const REFERENCE_WIDTH: usize = 768;

/// Linear-layer std scaled with width so each layer keeps the gain it has at
/// the reference width: `0.02 · √(768 / D)`, exactly 0.02 at D = 768.
pub fn width_scaled_std(embed_dim: usize) -> f64 {
    LINEAR_STD * (REFERENCE_WIDTH as f64 / embed_dim as f64).sqrt()
}

/// Collects parameter specs under canonical names before any allocation.
#[derive(Debug)]
pub struct Init {
    pub specs: Vec<ParamSpec>,
    /// Std of truncated-normal linear weights.
    pub linear_std: f64,
}

impl Default for Init {
    fn default() -> Self {
        Self::new()
    }
}

impl Init {
    pub fn new() -> Self {
        Self::with_linear_std(LINEAR_STD)
    }

    pub fn with_linear_std(linear_std: f64) -> Self {
        Self {
            specs: Vec::new(),
            linear_std,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], kind: Kind, fill: Fill) {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
            fill,
        });
    }

    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        let std = self.linear_std;
        self.add(
            format!("{prefix}.w"),
            &[d_in, d_out],
            Kind::Param,
            Fill::TruncNormal { std },
        );
        self.add(format!("{prefix}.b"), &[d_out], Kind::Param, Fill::Zeros);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.gamma"), &[d], Kind::Param, Fill::Ones);
        self.add(format!("{prefix}.beta"), &[d], Kind::Param, Fill::Zeros);
    }

    pub fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, bias: bool) {
        let fan_in = c_in * k * k;
        self.add(
            format!("{prefix}.w"),
            &[c_out, c_in, k, k],
            Kind::Param,
            Fill::KaimingUniform { fan_in },
        );
        if bias {
            self.add(format!("{prefix}.b"), &[c_out], Kind::Param, Fill::Zeros);
        }
    }

    pub fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.gamma"), &[c], Kind::Param, Fill::Ones);
        self.add(format!("{prefix}.beta"), &[c], Kind::Param, Fill::Zeros);
        self.add(
            format!("{prefix}.running_mean"),
            &[c],
            Kind::Buffer,
            Fill::Zeros,
        );
        self.add(
            format!("{prefix}.running_var"),
            &[c],
            Kind::Buffer,
            Fill::Ones,
        );
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) {
        self.add(name, shape, Kind::Param, Fill::TruncNormal { std });
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.add(name, shape, Kind::Param, Fill::Zeros);
    }

    /// Allocates every spec. Each random tensor draws from its own stream
    /// forked from `seed` by name, so adding a parameter never shifts others.
    pub fn materialize<T: Float>(&self, seed: u64) -> ParamStore<T> {
        let root = Rng::new(seed);
        let mut store = ParamStore::new();
        for spec in &self.specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.fill {
                Fill::Zeros => vec![T::zero(); n],
                Fill::Ones => vec![T::one(); n],
                Fill::KaimingUniform { fan_in } => {
                    let mut r = root.fork(&spec.name);
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::from_f64(r.uniform(-bound, bound)))
                        .collect()
                }
                Fill::TruncNormal { std } => {
                    let mut r = root.fork(&spec.name);
                    (0..n).map(|_| T::from_f64(r.trunc_normal(std))).collect()
                }
            };
            let t = Tensor::new(&spec.shape, data).expect("spec shape matches data");
            store.insert(spec.name.clone(), t, spec.kind);
        }
        store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_follow_momentum() {
        let mut init = Init::new();
        init.batch_norm("bn", 1);
        let mut store = init.materialize::<f64>(0);
        let x = Tensor::from_f64(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Train);
        let xv = ctx.input(&x);
        ctx.batch_norm(xv, "bn").unwrap();
        let out = ctx.finish();
        out.apply_buffers(&mut store).unwrap();
        // batch mean 2.5, unbiased var 5/3
        let m = store.get("bn.running_mean").unwrap().data()[0];
        let v = store.get("bn.running_var").unwrap().data()[0];
        assert!((m - 0.25).abs() < 1e-12);
        assert!((v - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut init = Init::new();
        init.linear("a", 2, 2);
        init.linear("b", 2, 1);
        let store = init.materialize::<f64>(1);
        let x = Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Train);
        ctx.freeze("a");
        let xv = ctx.input(&x);
        let h = ctx.linear(xv, "a").unwrap();
        let y = ctx.linear(h, "b").unwrap();
        let loss = ctx.tape.sum_all(y).unwrap();
        ctx.tape.backward(loss).unwrap();
        let names: Vec<String> = ctx.finish().grads.into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b.b".to_string(), "b.w".to_string()]);
    }
}
