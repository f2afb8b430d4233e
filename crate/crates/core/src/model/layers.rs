use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, LstmState, ParamId, ParamStore, Real, Tensor, TensorError, Var};

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    /// Uniform `±1/√fan_in` initialization, or all zeros.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
        zero: bool,
    ) -> Self {
        let (w, b) = if zero {
            (Tensor::zeros(&[inputs, outputs]), Tensor::zeros(&[outputs]))
        } else {
            let bound = 1.0 / (inputs as f64).sqrt();
            (uniform(rng, &[inputs, outputs], bound), uniform(rng, &[outputs], bound))
        };
        Dense {
            w: store.add(format!("{name}.w"), w),
            b: Some(store.add(format!("{name}.b"), b)),
        }
    }

    /// For layers feeding a batch norm, whose shift makes a bias redundant.
    pub fn unbiased<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Dense {
            w: store.add(format!("{name}.w"), uniform(rng, &[inputs, outputs], bound)),
            b: None,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, TensorError> {
        match self.b {
            Some(b) => g.linear(x, self.w, b),
            None => {
                let w = g.param(self.w);
                g.matmul(x, w)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            var: store.add_buffer(format!("{name}.running_var"), Tensor::filled(&[channels], T::one())),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, train: bool) -> Result<Var, TensorError> {
        g.batch_norm(x, self.gamma, self.beta, self.mean, self.var, train)
    }
}

/// 3×3 same-padding convolution without bias; every use feeds a batch norm.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
}

impl Conv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((cin * 9) as f64).sqrt();
        Conv {
            w: store.add(format!("{name}.w"), uniform(rng, &[cout, cin, 3, 3], bound)),
        }
    }
}

/// `relu(bn(dense(x)))`.
#[derive(Debug, Clone, Copy)]
pub struct DenseBnRelu {
    pub dense: Dense,
    pub bn: BatchNorm,
}

impl DenseBnRelu {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng) -> Self {
        DenseBnRelu {
            dense: Dense::unbiased(store, name, i, o, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), o),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, train: bool) -> Result<Var, TensorError> {
        let y = self.dense.forward(g, x)?;
        let y = self.bn.forward(g, y, train)?;
        Ok(g.relu(y))
    }
}

/// `relu(x + bn(dense(relu(bn(dense(x))))))`.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub first: DenseBnRelu,
    pub second: Dense,
    pub bn: BatchNorm,
}

impl ResBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            first: DenseBnRelu::new(store, &format!("{name}.0"), width, width, rng),
            second: Dense::unbiased(store, &format!("{name}.1"), width, width, rng),
            bn: BatchNorm::new(store, &format!("{name}.1.bn"), width),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, train: bool) -> Result<Var, TensorError> {
        let y = self.first.forward(g, x, train)?;
        let y = self.second.forward(g, y)?;
        let y = self.bn.forward(g, y, train)?;
        let y = g.add(y, x)?;
        Ok(g.relu(y))
    }
}

/// Convolutional counterpart of [`ResBlock`] on `[n, c, h, w]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvResBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
}

impl ConvResBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, planes: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvResBlock {
            conv1: Conv::new(store, &format!("{name}.0"), planes, planes, rng),
            bn1: BatchNorm::new(store, &format!("{name}.0.bn"), planes),
            conv2: Conv::new(store, &format!("{name}.1"), planes, planes, rng),
            bn2: BatchNorm::new(store, &format!("{name}.1.bn"), planes),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, train: bool) -> Result<Var, TensorError> {
        let y = g.conv2d(x, self.conv1.w, None, 1)?;
        let y = self.bn1.forward(g, y, train)?;
        let y = g.relu(y);
        let y = g.conv2d(y, self.conv2.w, None, 1)?;
        let y = self.bn2.forward(g, y, train)?;
        let y = g.add(y, x)?;
        Ok(g.relu(y))
    }
}

/// Hidden `DenseBnRelu` layers followed by a plain linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Vec<DenseBnRelu>,
    pub out: Dense,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        sizes: &[usize],
        rng: &mut ChaCha8Rng,
        zero_out: bool,
    ) -> Self {
        assert!(sizes.len() >= 2);
        let last = sizes.len() - 1;
        let hidden = (0..last - 1)
            .map(|i| DenseBnRelu::new(store, &format!("{name}.{i}"), sizes[i], sizes[i + 1], rng))
            .collect();
        let out = Dense::new(store, &format!("{name}.{}", last - 1), sizes[last - 1], sizes[last], rng, zero_out);
        Mlp { hidden, out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, train: bool) -> Result<Var, TensorError> {
        let mut y = x;
        for layer in &self.hidden {
            y = layer.forward(g, y, train)?;
        }
        self.out.forward(g, y)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Lstm {
            w_ih: store.add(format!("{name}.w_ih"), uniform(rng, &[inputs, 4 * hidden], bound)),
            w_hh: store.add(format!("{name}.w_hh"), uniform(rng, &[hidden, 4 * hidden], bound)),
            b: store.add(format!("{name}.b"), uniform(rng, &[4 * hidden], bound)),
            hidden,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, state: LstmState) -> Result<LstmState, TensorError> {
        g.lstm_cell(x, state, self.w_ih, self.w_hh, self.b)
    }
}
