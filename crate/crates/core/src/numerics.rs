//! Stable scalar primitives shared by the solver and the loss family.

/// Max-shifted log-sum-exp over a slice. Returns `-inf` for an empty slice
/// or all `-inf` inputs.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Logistic function computed without overflow on either tail.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` with the standard stable branch.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `-log logistic(z)`, the per-comparison loss kernel.
#[inline]
pub fn neg_log_logistic(z: f64) -> f64 {
    softplus(-z)
}

/// Writes the row-wise log-softmax of `row` into `out` (max-shifted).
pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let lse = logsumexp(row);
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

/// Compensated accumulator; keeps long reductions near machine precision
/// and independent of term count.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum
    }
}
