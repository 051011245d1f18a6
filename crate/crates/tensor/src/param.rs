use std::collections::HashMap;

use crate::error::{arg_err, Result, TensorError};
use crate::norm::BatchNormStats;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Buffers (running statistics) are stored alongside weights but are
    /// never touched by the optimizer.
    pub trainable: bool,
}

/// Ordered, uniquely named collection of weights and buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

pub const RUNNING_MEAN: &str = "running_mean";
pub const RUNNING_VAR: &str = "running_var";
pub const BATCHES_TRACKED: &str = "batches_tracked";

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(arg_err("param", format!("duplicate parameter name `{name}`")));
        }
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite { op: "param" });
        }
        let idx = self.params.len();
        let tensor = tensor.with_requires_grad(trainable);
        self.index.insert(name.clone(), idx);
        self.params.push(Param { name, tensor, trainable });
        Ok(idx)
    }

    /// Adds `gamma`, `beta` and the running-statistics buffers under `prefix`.
    pub fn add_batchnorm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        let s = Shape::vector(channels);
        self.add(format!("{prefix}.gamma"), Tensor::full(s, T::one()), true)?;
        self.add(format!("{prefix}.beta"), Tensor::zeros(s), true)?;
        self.add(format!("{prefix}.{RUNNING_MEAN}"), Tensor::zeros(s), false)?;
        self.add(format!("{prefix}.{RUNNING_VAR}"), Tensor::full(s, T::one()), false)?;
        self.add(format!("{prefix}.{BATCHES_TRACKED}"), Tensor::zeros(Shape::scalar()), false)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        Ok(&self.params[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        let i = self.index_of(name)?;
        Ok(&mut self.params[i])
    }

    pub fn by_index(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter().filter(|p| p.trainable)
    }

    /// Number of trainable scalars; buffers excluded.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|p| p.tensor.shape().numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn read_bn_stats(&self, prefix: &str) -> Result<BatchNormStats<T>> {
        let mean = self.get(&format!("{prefix}.{RUNNING_MEAN}"))?.tensor.data().to_vec();
        let var = self.get(&format!("{prefix}.{RUNNING_VAR}"))?.tensor.data().to_vec();
        let tracked = self.get(&format!("{prefix}.{BATCHES_TRACKED}"))?.tensor.item()?;
        Ok(BatchNormStats { mean, var, batches_tracked: tracked.as_f64() as u64 })
    }

    pub fn write_bn_stats(&mut self, prefix: &str, stats: &BatchNormStats<T>) -> Result<()> {
        self.get_mut(&format!("{prefix}.{RUNNING_MEAN}"))?.tensor.data_mut().copy_from_slice(&stats.mean);
        self.get_mut(&format!("{prefix}.{RUNNING_VAR}"))?.tensor.data_mut().copy_from_slice(&stats.var);
        self.get_mut(&format!("{prefix}.{BATCHES_TRACKED}"))?.tensor.data_mut()[0] =
            T::lit(stats.batches_tracked as f64);
        Ok(())
    }

    /// Converts every tensor to another scalar type. Gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast(), trainable: p.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut p = ParamSet::<f32>::new();
        p.add("a", Tensor::zeros(Shape::scalar()), true).unwrap();
        assert!(p.add("a", Tensor::zeros(Shape::scalar()), true).is_err());
    }

    #[test]
    fn buffers_are_not_counted() {
        let mut p = ParamSet::<f32>::new();
        p.add_batchnorm("bn", 3).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(p.num_trainable(), 6);
    }

    #[test]
    fn bn_stats_roundtrip() {
        let mut p = ParamSet::<f64>::new();
        p.add_batchnorm("bn", 2).unwrap();
        let stats = BatchNormStats { mean: vec![1.0, 2.0], var: vec![3.0, 4.0], batches_tracked: 7 };
        p.write_bn_stats("bn", &stats).unwrap();
        assert_eq!(p.read_bn_stats("bn").unwrap(), stats);
    }
}
