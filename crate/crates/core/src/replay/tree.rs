/// Complete binary tree over a fixed number of leaves keeping subtree sums
/// of `p^α` and subtree maxima of `p`.
#[derive(Debug, Clone)]
pub struct PriorityTree {
    leaves: usize,
    sum: Vec<f64>,
    max: Vec<f64>,
}

impl PriorityTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        PriorityTree {
            leaves,
            sum: vec![0.0; 2 * leaves],
            max: vec![0.0; 2 * leaves],
        }
    }

    /// Sets leaf `i` to raw priority `p`, storing `weighted = p^α` for sampling.
    pub fn set(&mut self, i: usize, p: f64, weighted: f64) {
        let mut n = i + self.leaves;
        self.sum[n] = weighted;
        self.max[n] = p;
        while n > 1 {
            n /= 2;
            // recomputed from children so repeated updates never drift
            self.sum[n] = self.sum[2 * n] + self.sum[2 * n + 1];
            self.max[n] = self.max[2 * n].max(self.max[2 * n + 1]);
        }
    }

    pub fn weighted(&self, i: usize) -> f64 {
        self.sum[i + self.leaves]
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.max[i + self.leaves]
    }

    pub fn total(&self) -> f64 {
        self.sum[1]
    }

    pub fn max_priority(&self) -> f64 {
        self.max[1]
    }

    /// Leaf whose cumulative interval contains `u ∈ [0, total)`.
    pub fn find(&self, mut u: f64) -> usize {
        let mut n = 1;
        while n < self.leaves {
            let left = 2 * n;
            if u < self.sum[left] || self.sum[left + 1] == 0.0 {
                n = left;
            } else {
                u -= self.sum[left];
                n = left + 1;
            }
        }
        n - self.leaves
    }
}
