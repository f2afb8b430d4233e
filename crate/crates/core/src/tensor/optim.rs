use super::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named tensor with its momentum buffer.
///
/// Non-trainable entries (batch-norm running statistics) live in the same
/// store so checkpoints carry them, but the optimizer skips them.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub momentum: Vec<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        let momentum = vec![T::zero(); value.len()];
        self.params.push(Param {
            name,
            value,
            momentum,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// `Σ θ²` over trainable parameters.
    pub fn squared_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.value.data().iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    momentum: p.momentum.iter().map(|m| U::of(m.as_f64())).collect(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Replaces values from `(name, tensor)` pairs; every stored name must be present.
    pub fn load_values(&mut self, named: &[(String, Tensor<T>)]) -> Result<(), TensorError> {
        for p in self.params.iter_mut() {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load parameter",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Gradient slots parallel to a `ParamStore`. Backward passes accumulate here.
#[derive(Debug, Clone)]
pub struct GradBuffer<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Real> GradBuffer<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        GradBuffer {
            grads: store.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in self.grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, values: &[T]) {
        for (g, v) in self.grads[id.0].iter_mut().zip(values) {
            *g += *v;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Sum of squares restricted to a set of parameters.
    pub fn squared_norm_of(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|id| self.grads[id.0].iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SgdOptions {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// SGD with momentum. The loss gradient is clipped to the global norm first;
/// weight decay then adds the gradient of `c·‖θ‖²`, i.e. `2cθ`.
pub fn sgd_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &GradBuffer<T>,
    opts: &SgdOptions,
) -> Result<SgdReport, TensorError> {
    for (p, g) in store.params.iter().zip(&grads.grads) {
        if p.trainable && g.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteGradient(p.name.clone()));
        }
    }
    let grad_norm = store
        .params
        .iter()
        .zip(&grads.grads)
        .filter(|(p, _)| p.trainable)
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    let clip_scale = match opts.grad_clip_norm {
        Some(max) if grad_norm > max => max / grad_norm,
        _ => 1.0,
    };
    let scale = T::of(clip_scale);
    let decay = T::of(2.0 * opts.weight_decay);
    let mu = T::of(opts.momentum);
    let lr = T::of(opts.lr);
    for (p, g) in store.params.iter_mut().zip(&grads.grads) {
        if !p.trainable {
            continue;
        }
        let Param { value, momentum, .. } = p;
        for ((theta, m), grad) in value.data_mut().iter_mut().zip(momentum.iter_mut()).zip(g) {
            let step = *grad * scale + decay * *theta;
            *m = mu * *m + step;
            *theta -= lr * *m;
        }
    }
    Ok(SgdReport {
        grad_norm,
        clip_scale,
    })
}
