use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point scalar the toolkit is generic over (`f32` or `f64`).
///
/// Collects the numeric traits the spectral kernels need, plus a Gaussian
/// sampling hook so `rand_distr` bounds do not leak into every generic
/// signature. Constants are converted through `of`, which is infallible for
/// the config-scale values used here.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + rustfft::FftNum
    + std::iter::Sum
    + std::fmt::Display
    + std::fmt::LowerExp
    + Default
{
    fn of(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn two() -> Self {
        Self::of(2.0)
    }
    fn half() -> Self {
        Self::of(0.5)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}
