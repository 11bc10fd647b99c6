use std::sync::atomic::{AtomicU64, Ordering};

/// A denoiser `D(x, sigma)`: the only view of the data the solvers and the
/// KLUB estimator get. Implementations must be pure.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    /// Writes `D(x, sigma)` into `out`. Callers guarantee `sigma > 0` and
    /// `x.len() == out.len() == self.dim()`.
    fn denoise(&self, x: &[f64], sigma: f64, out: &mut [f64]);
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64, out: &mut [f64]) {
        (**self).denoise(x, sigma, out)
    }
}

/// Wraps a closure as a denoiser.
pub struct FnDenoiser<F> {
    dim: usize,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x: &[f64], sigma: f64, out: &mut [f64]) {
        (self.f)(x, sigma, out)
    }
}

/// Counts evaluations of the wrapped denoiser.
pub struct Counting<D> {
    inner: D,
    calls: AtomicU64,
}

impl<D: Denoiser> Counting<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: Denoiser> Denoiser for Counting<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64, out: &mut [f64]) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.denoise(x, sigma, out)
    }
}
