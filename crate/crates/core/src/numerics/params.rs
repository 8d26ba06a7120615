use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Adam hyper-parameters. Only the learning rate is normally tuned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

/// Named parameters in insertion order, with per-parameter Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    adam: IndexMap<String, AdamState<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            adam: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter `{name}`")));
        }
        let n = t.len();
        self.adam.insert(
            name.clone(),
            AdamState {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                t: 0,
            },
        );
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn adam_state(&self, name: &str) -> Option<&AdamState<T>> {
        self.adam.get(name)
    }

    /// Replaces the values of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, data: &[T]) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))?;
        if t.len() != data.len() {
            return Err(Error::dim(
                "set",
                format!("`{name}` holds {} values, got {}", t.len(), data.len()),
            ));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[T]) -> Result<()> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter `{name}`")))?
            .accumulate_grad(g)
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|t| t.clear_grad());
    }

    /// Scales every accumulated gradient by `c` (batch averaging).
    pub fn scale_grads(&mut self, c: T) {
        for t in self.params.values_mut() {
            if let Some(mut g) = t.take_grad() {
                g.iter_mut().for_each(|x| *x *= c);
                t.accumulate_grad(&g).expect("same length");
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// One bias-corrected Adam update of every parameter, then clears gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        self.adam_step_where(cfg, |_| true)
    }

    /// Adam update restricted to parameters selected by `trainable`; all
    /// gradients (selected or not) are cleared afterwards.
    pub fn adam_step_where(&mut self, cfg: &AdamConfig, trainable: impl Fn(&str) -> bool) -> Result<()> {
        if !(cfg.lr >= 0.0) {
            return Err(Error::Parameter(format!("learning rate must be non-negative, got {}", cfg.lr)));
        }
        if let Some((name, _)) = self
            .params
            .iter()
            .find(|(n, t)| trainable(n) && t.grad().is_none())
        {
            return Err(Error::State(format!("missing gradient for parameter `{name}`")));
        }
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let eps = T::lit(cfg.eps);
        for (name, param) in self.params.iter_mut() {
            let Some(grad) = param.take_grad() else { continue };
            if !trainable(name) {
                continue;
            }
            let st = self.adam.get_mut(name).expect("state created with parameter");
            st.t += 1;
            let bc1 = T::lit(1.0 - cfg.beta1.powi(st.t as i32));
            let bc2 = T::lit(1.0 - cfg.beta2.powi(st.t as i32));
            let lr = T::lit(cfg.lr);
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Copies values into a store of another scalar type (Adam state reset).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in &self.params {
            out.insert(name.clone(), t.cast()).expect("names unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut s = scalar_store(0.7);
        s.accumulate_grad("w", &[0.0]).unwrap();
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0);
        s.accumulate_grad("w", &[1.0]).unwrap();
        let cfg = AdamConfig::with_lr(1e-4);
        s.adam_step(&cfg).unwrap();
        let expected = -1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.adam_state("w").unwrap().t, 1);
        assert!(s.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 0.0001);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = scalar_store(0.0);
        s.insert("bias", Tensor::scalar(0.0)).unwrap();
        s.accumulate_grad("w", &[1.0]).unwrap();
        let err = s.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn insertion_order_and_uniqueness() {
        let mut s = ParamStore::<f32>::new();
        for n in ["z", "a", "m"] {
            s.insert(n, Tensor::zeros(&[2])).unwrap();
        }
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), ["z", "a", "m"]);
    }
}
