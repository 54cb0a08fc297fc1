//! Order-stable reductions and Monte-Carlo error estimates: compensated
//! (Neumaier) summation, Welford moments with merging, leave-one-out
//! jackknife over trajectory blocks, and a small least-squares slope fit.
//!
//! Parallel ensembles collect per-trajectory results in index order and fold
//! them sequentially through these accumulators, so repeated runs with the
//! same seed produce bit-identical statistics regardless of thread count.

use crate::scalar::Scalar;

/// Neumaier compensated sum: error-free for well-scaled inputs where the
/// naive sum loses low-order bits.
#[derive(Clone, Copy, Debug)]
pub struct CompSum<T: Scalar> {
    s: T,
    c: T,
}

impl<T: Scalar> Default for CompSum<T> {
    fn default() -> Self {
        CompSum { s: T::zero(), c: T::zero() }
    }
}

impl<T: Scalar> CompSum<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: T) {
        let t = self.s + v;
        if self.s.abs() >= v.abs() {
            self.c += (self.s - t) + v;
        } else {
            self.c += (v - t) + self.s;
        }
        self.s = t;
    }

    pub fn total(&self) -> T {
        self.s + self.c
    }
}

pub fn comp_sum<T: Scalar>(vals: impl IntoIterator<Item = T>) -> T {
    let mut acc = CompSum::new();
    for v in vals {
        acc.add(v);
    }
    acc.total()
}

/// Streaming mean/variance (Welford), mergeable across blocks.
#[derive(Clone, Copy, Debug)]
pub struct Welford<T: Scalar> {
    n: u64,
    mean: T,
    m2: T,
}

impl<T: Scalar> Default for Welford<T> {
    fn default() -> Self {
        Welford { n: 0, mean: T::zero(), m2: T::zero() }
    }
}

impl<T: Scalar> Welford<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, v: T) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / T::of(self.n as f64);
        let d2 = v - self.mean;
        self.m2 += d * d2;
    }

    pub fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (T::of(self.n as f64), T::of(other.n as f64));
        let n = na + nb;
        let d = other.mean - self.mean;
        self.mean += d * nb / n;
        self.m2 += other.m2 + d * d * na * nb / n;
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn var(&self) -> T {
        if self.n < 2 {
            T::zero()
        } else {
            self.m2 / T::of((self.n - 1) as f64)
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> T {
        if self.n < 2 {
            T::zero()
        } else {
            (self.var() / T::of(self.n as f64)).sqrt()
        }
    }
}

pub fn mean_and_se<T: Scalar>(vals: &[T]) -> (T, T) {
    let mut w = Welford::new();
    for &v in vals {
        w.push(v);
    }
    (w.mean(), w.se())
}

/// Leave-one-out jackknife for a ratio-of-sums estimator over blocks:
/// θ̂ = ΣS_b / ΣW_b, SE from the spread of the leave-one-out estimates.
/// With unit weights this reduces to the classical SE of block means.
pub fn jackknife_ratio<T: Scalar>(blocks: &[(T, T)]) -> (T, T) {
    let b = blocks.len();
    assert!(b >= 2, "jackknife needs at least two blocks");
    let mut s_tot = CompSum::new();
    let mut w_tot = CompSum::new();
    for &(s, w) in blocks {
        s_tot.add(s);
        w_tot.add(w);
    }
    let (s_tot, w_tot) = (s_tot.total(), w_tot.total());
    assert!(w_tot > T::zero(), "total weight must be positive");
    let theta = s_tot / w_tot;

    let mut loo = Vec::with_capacity(b);
    let mut loo_mean = CompSum::new();
    for &(s, w) in blocks {
        let denom = w_tot - w;
        let t = if denom > T::zero() { (s_tot - s) / denom } else { theta };
        loo.push(t);
        loo_mean.add(t);
    }
    let mbar = loo_mean.total() / T::of(b as f64);
    let mut dev = CompSum::new();
    for t in loo {
        let d = t - mbar;
        dev.add(d * d);
    }
    let bf = T::of(b as f64);
    let se = ((bf - T::one()) / bf * dev.total()).sqrt();
    (theta, se)
}

/// Least-squares slope of y against t (used on log-transformed decay data).
pub fn ls_slope<T: Scalar>(ts: &[T], ys: &[T]) -> T {
    assert_eq!(ts.len(), ys.len());
    assert!(ts.len() >= 2);
    let n = T::of(ts.len() as f64);
    let tm = comp_sum(ts.iter().copied()) / n;
    let ym = comp_sum(ys.iter().copied()) / n;
    let mut num = CompSum::new();
    let mut den = CompSum::new();
    for (&t, &y) in ts.iter().zip(ys) {
        num.add((t - tm) * (y - ym));
        den.add((t - tm) * (t - tm));
    }
    num.total() / den.total()
}
