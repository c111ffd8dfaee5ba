//! Synthetic sensor noise: additive Gaussian, scaled Poisson (shot noise)
//! and multiplicative speckle, alone or chained.
//!
//! `sigma` and `eps` are standard deviations on the 0-255 scale; `lam` is the
//! base-10 exponent of the photon count, so `y = Poisson(x * 10^lam) / 10^lam`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Error, Result};
use crate::imaging::Image;

pub const SIGMA: f64 = 35.0;
pub const LAM_RANGE: (f64, f64) = (2.0, 4.0);
pub const EPS_RANGE: (f64, f64) = (2.0, 25.0);

/// Seeded generator used for every stochastic operation in the crate.
pub type RandomSource = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> RandomSource {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    None,
    Gaussian,
    Poisson,
    Speckle,
    /// Gaussian, then Poisson, then speckle.
    Triplet,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::None,
        DegradationKind::Gaussian,
        DegradationKind::Poisson,
        DegradationKind::Speckle,
        DegradationKind::Triplet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::None => "none",
            DegradationKind::Gaussian => "gaussian",
            DegradationKind::Poisson => "poisson",
            DegradationKind::Speckle => "speckle",
            DegradationKind::Triplet => "triplet",
        }
    }

    fn uses_poisson(self) -> bool {
        matches!(self, DegradationKind::Poisson | DegradationKind::Triplet)
    }

    fn uses_speckle(self) -> bool {
        matches!(self, DegradationKind::Speckle | DegradationKind::Triplet)
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid!("unknown degradation kind {s:?}"))
    }
}

/// A fully determined degradation: kind, noise levels and the noise seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub sigma: f64,
    pub lam: f64,
    pub eps: f64,
    pub seed: u64,
}

impl DegradationSpec {
    /// `sigma = 35` and the midpoints of the `lam` and `eps` ranges.
    pub fn new(kind: DegradationKind, seed: u64) -> Self {
        DegradationSpec {
            kind,
            sigma: SIGMA,
            lam: (LAM_RANGE.0 + LAM_RANGE.1) / 2.0,
            eps: (EPS_RANGE.0 + EPS_RANGE.1) / 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.sigma.is_finite() && self.sigma >= 0.0,
            "sigma must be finite and non-negative, got {}",
            self.sigma
        );
        if self.kind.uses_poisson() {
            check_lam(self.lam)?;
        }
        if self.kind.uses_speckle() {
            check_eps(self.eps)?;
        }
        Ok(())
    }
}

fn check_lam(lam: f64) -> Result<()> {
    ensure!(
        (LAM_RANGE.0..=LAM_RANGE.1).contains(&lam),
        "lam must lie in [{}, {}], got {lam}",
        LAM_RANGE.0,
        LAM_RANGE.1
    );
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    ensure!(
        (EPS_RANGE.0..=EPS_RANGE.1).contains(&eps),
        "eps must lie in [{}, {}], got {eps}",
        EPS_RANGE.0,
        EPS_RANGE.1
    );
    Ok(())
}

fn map_pixels(x: &Image, mut f: impl FnMut(f64) -> f64) -> Result<Image> {
    let (c, h, w) = x.dims();
    Image::from_clamped(c, h, w, x.data().iter().map(|&v| f(v)).collect())
}

/// `clamp(x + n, 0, 1)`, `n ~ N(0, sigma / 255)` per element.
pub fn apply_gaussian<R: Rng>(x: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    ensure!(
        sigma.is_finite() && sigma >= 0.0,
        "sigma must be finite and non-negative, got {sigma}"
    );
    let sd = sigma / 255.0;
    map_pixels(x, |v| {
        let n: f64 = rng.sample(StandardNormal);
        v + sd * n
    })
}

/// `clamp(Poisson(x * 10^lam) / 10^lam, 0, 1)` per element.
pub fn apply_poisson<R: Rng>(x: &Image, lam: f64, rng: &mut R) -> Result<Image> {
    check_lam(lam)?;
    let scale = 10f64.powf(lam);
    let mut out = Vec::with_capacity(x.data().len());
    for &v in x.data() {
        let mean = v * scale;
        let draw = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|e| invalid!("poisson mean {mean}: {e}"))?
                .sample(rng)
        } else {
            0.0
        };
        out.push(draw / scale);
    }
    let (c, h, w) = x.dims();
    Image::from_clamped(c, h, w, out)
}

/// `clamp(x * (1 + n), 0, 1)`, `n ~ N(0, eps / 255)` per element.
pub fn apply_speckle<R: Rng>(x: &Image, eps: f64, rng: &mut R) -> Result<Image> {
    check_eps(eps)?;
    speckle_unbounded(x, eps, rng)
}

/// Speckle with any non-negative `eps`, for probing the small-noise limit.
pub fn speckle_unbounded<R: Rng>(x: &Image, eps: f64, rng: &mut R) -> Result<Image> {
    ensure!(
        eps.is_finite() && eps >= 0.0,
        "eps must be finite and non-negative, got {eps}"
    );
    let sd = eps / 255.0;
    map_pixels(x, |v| {
        let n: f64 = rng.sample(StandardNormal);
        v * (1.0 + sd * n)
    })
}

/// Draws a kind uniformly from `kinds` with `sigma = 35`, `lam ~ U[2,4]`,
/// `eps ~ U[2,25]` and a fresh noise seed.
pub fn sample_spec<R: Rng>(rng: &mut R, kinds: &[DegradationKind]) -> Result<DegradationSpec> {
    ensure!(!kinds.is_empty(), "sample_spec needs at least one degradation kind");
    let kind = kinds[rng.random_range(0..kinds.len())];
    let lam = rng.random_range(LAM_RANGE.0..=LAM_RANGE.1);
    let eps = rng.random_range(EPS_RANGE.0..=EPS_RANGE.1);
    let seed = rng.random();
    Ok(DegradationSpec {
        kind,
        sigma: SIGMA,
        lam,
        eps,
        seed,
    })
}

/// Applies `spec` with noise drawn from `spec.seed`.
pub fn apply(x: &Image, spec: &DegradationSpec) -> Result<Image> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    match spec.kind {
        DegradationKind::None => Ok(x.clone()),
        DegradationKind::Gaussian => apply_gaussian(x, spec.sigma, &mut rng),
        DegradationKind::Poisson => apply_poisson(x, spec.lam, &mut rng),
        DegradationKind::Speckle => apply_speckle(x, spec.eps, &mut rng),
        DegradationKind::Triplet => {
            let y = apply_gaussian(x, spec.sigma, &mut rng)?;
            let y = apply_poisson(&y, spec.lam, &mut rng)?;
            apply_speckle(&y, spec.eps, &mut rng)
        }
    }
}
