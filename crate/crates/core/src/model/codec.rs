//! Scalar ↔ categorical codec over a compressed support.

const EPS: f64 = 0.001;

/// `h(x) = sign(x)(√(|x|+1) − 1) + εx`.
pub fn transform(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    x.signum() * ((x.abs() + 1.0).sqrt() - 1.0) + EPS * x
}

/// Exact inverse of [`transform`].
pub fn inverse_transform(y: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    let a = ((1.0 + 4.0 * EPS * (y.abs() + 1.0 + EPS)).sqrt() - 1.0) / (2.0 * EPS);
    y.signum() * (a * a - 1.0)
}

/// Evenly spaced bins over `[-S, S]` in transformed space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Support {
    pub half_width: f64,
    pub bins: usize,
}

impl Support {
    pub fn new(half_width: f64, bins: usize) -> Self {
        assert!(bins >= 3 && bins % 2 == 1 && half_width > 0.0);
        Support { half_width, bins }
    }

    pub fn step(&self) -> f64 {
        2.0 * self.half_width / (self.bins - 1) as f64
    }

    pub fn bin_value(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.step()
    }

    /// Largest scalar representable without clamping.
    pub fn max_scalar(&self) -> f64 {
        inverse_transform(self.half_width)
    }

    /// Two-hot target. Returns the distribution and whether `x` was clamped.
    pub fn encode(&self, x: f64) -> (Vec<f64>, bool) {
        assert!(x.is_finite(), "cannot encode non-finite scalar {x}");
        let mut probs = vec![0.0; self.bins];
        let y = transform(x);
        let clamped = y.abs() > self.half_width;
        let y = y.clamp(-self.half_width, self.half_width);
        let pos = (y + self.half_width) / self.step();
        let lo = (pos.floor() as usize).min(self.bins - 1);
        let frac = pos - lo as f64;
        if lo + 1 < self.bins && frac > 0.0 {
            probs[lo] = 1.0 - frac;
            probs[lo + 1] = frac;
        } else {
            probs[lo] = 1.0;
        }
        (probs, clamped)
    }

    /// Expectation over bins, mapped back through the inverse transform.
    pub fn decode(&self, probs: &[f64]) -> f64 {
        debug_assert_eq!(probs.len(), self.bins);
        // paired around the centre bin so symmetric mass cancels exactly
        let mid = self.bins / 2;
        let y: f64 = (1..=mid)
            .map(|k| (probs[mid + k] - probs[mid - k]) * k as f64)
            .sum::<f64>()
            * self.step();
        inverse_transform(y)
    }

    pub fn decode_logits(&self, logits: &[f64]) -> f64 {
        self.decode(&softmax(logits))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
