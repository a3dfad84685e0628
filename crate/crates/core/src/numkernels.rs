//! Small symmetric linear algebra, chi-square distribution functions and the
//! random samplers used by the design, inference and simulation code.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Eigenvalues above `-PSD_FLOOR * trace` are treated as zero.
pub const PSD_FLOOR: f64 = 1e-9;
/// Smallest reciprocal condition number accepted by [`sym_inverse`].
pub const RCOND_MIN: f64 = 1e-12;
/// Default proposal cap for one batch of ball-truncated normal draws.
pub const DEFAULT_PROPOSAL_CAP: u64 = 10_000_000;

/// Seeded, splittable random stream. Each `(seed, stream_id)` pair maps to its
/// own ChaCha20 stream, so distinct ids never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Child stream keyed by `key`, deterministic in (seed, stream_id, key).
    pub fn substream(&self, key: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(key.wrapping_add(0x5eed))),
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Symmetric matrices

pub fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Largest absolute asymmetry relative to the largest absolute entry.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_square(m)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("matrix has non-finite entries".into()));
    }
    Ok(SymmetricEigen::new(symmetrize(m)))
}

fn rebuild(e: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = e.eigenvalues.len();
    let mut scaled = e.eigenvectors.clone();
    for j in 0..n {
        let s = f(e.eigenvalues[j]);
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    symmetrize(&(scaled * e.eigenvectors.transpose()))
}

/// Eigenvalues with those inside the PSD floor clamped to zero; errors on
/// anything more negative.
fn clamped_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = eigen(m)?;
    let trace: f64 = m.diagonal().iter().sum();
    let floor = -PSD_FLOOR * trace.abs();
    let min = e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < floor || (min < 0.0 && trace == 0.0) {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
            trace,
        });
    }
    for v in e.eigenvalues.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(e)
}

/// Projects a numerically PSD matrix onto the PSD cone by zeroing eigenvalues
/// within the tolerance floor.
pub fn clamp_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = clamped_eigen(m)?;
    Ok(rebuild(&e, |v| v))
}

/// Symmetric square root of a PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = clamped_eigen(m)?;
    Ok(rebuild(&e, f64::sqrt))
}

/// Reciprocal condition number from the eigenvalue spread.
pub fn rcond(m: &DMatrix<f64>) -> Result<f64> {
    let e = eigen(m)?;
    Ok(rcond_of(&e))
}

fn rcond_of(e: &SymmetricEigen<f64, nalgebra::Dyn>) -> f64 {
    let max = e.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = e.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if max == 0.0 || !max.is_finite() {
        0.0
    } else {
        min / max
    }
}

/// Inverse of a symmetric matrix; `what` names the matrix in the error.
pub fn sym_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let e = eigen(m)?;
    let rc = rcond_of(&e);
    if rc < RCOND_MIN {
        return Err(Error::Singular { what, rcond: rc });
    }
    Ok(rebuild(&e, |v| 1.0 / v))
}

/// Inverse symmetric square root of a positive definite matrix.
pub fn pd_inv_sqrt(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let e = eigen(m)?;
    let rc = rcond_of(&e);
    if rc < RCOND_MIN || e.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(Error::Singular { what, rcond: rc });
    }
    Ok(rebuild(&e, |v| 1.0 / v.sqrt()))
}

/// Pseudo-inverse of a PSD matrix restricted to the eigen-directions whose
/// eigenvalue is at least `RCOND_MIN` times the largest.
#[derive(Debug, Clone)]
pub struct RangeFactor {
    pub matrix: DMatrix<f64>,
    pub pinv: DMatrix<f64>,
    /// n x rank matrix U_r diag(lambda_r^{-1/2}); `inv_sqrt_range^T m inv_sqrt_range = I_rank`.
    pub inv_sqrt_range: DMatrix<f64>,
    pub rank: usize,
}

impl RangeFactor {
    pub fn new(m: &DMatrix<f64>, what: &'static str) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            return Ok(Self {
                matrix: m.clone(),
                pinv: DMatrix::zeros(0, 0),
                inv_sqrt_range: DMatrix::zeros(0, 0),
                rank: 0,
            });
        }
        let e = eigen(m)?;
        let max = e.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let min = e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) {
            return Err(Error::Singular { what, rcond: 0.0 });
        }
        if min < -PSD_FLOOR * max * n as f64 {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
                trace: m.trace(),
            });
        }
        let keep: Vec<usize> = (0..n).filter(|&j| e.eigenvalues[j] >= RCOND_MIN * max).collect();
        let rank = keep.len();
        let mut inv_sqrt_range = DMatrix::zeros(n, rank);
        for (c, &j) in keep.iter().enumerate() {
            let s = 1.0 / e.eigenvalues[j].sqrt();
            for i in 0..n {
                inv_sqrt_range[(i, c)] = e.eigenvectors[(i, j)] * s;
            }
        }
        let pinv = symmetrize(&(&inv_sqrt_range * inv_sqrt_range.transpose()));
        Ok(Self {
            matrix: m.clone(),
            pinv,
            inv_sqrt_range,
            rank,
        })
    }
}

/// Kronecker product A ⊗ B.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

// ---------------------------------------------------------------------------
// Chi-square distribution

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Power series.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        // Continued fraction for Q(a, x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        let q = (log_prefix + h.ln()).exp();
        (1.0 - q).max(0.0)
    }
}

fn check_dof(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Domain("chi-square degrees of freedom must be positive".into()));
    }
    Ok(())
}

pub fn chi2_cdf(k: usize, x: f64) -> Result<f64> {
    check_dof(k)?;
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!("chi-square argument {x} is negative or NaN")));
    }
    if k == 2 {
        return Ok(-(-x / 2.0).exp_m1());
    }
    Ok(gamma_p(k as f64 / 2.0, x / 2.0))
}

pub fn chi2_quantile(k: usize, p: f64) -> Result<f64> {
    check_dof(k)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability {p} outside (0, 1)")));
    }
    if k == 2 {
        return Ok(-2.0 * (-p).ln_1p());
    }
    let mut lo = 0.0;
    let mut hi = (k as f64).max(1.0);
    while chi2_cdf(k, hi)? < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_cdf(k, mid)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Variance shrinkage of a standard normal conditioned on `|D|^2 <= d`.
pub fn r_factor(k: usize, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("threshold {d} must be positive")));
    }
    let denom = chi2_cdf(k, d)?;
    if denom < 1e-300 {
        return Err(Error::Underflow { k, d });
    }
    Ok((chi2_cdf(k + 2, d)? / denom).min(1.0))
}

// ---------------------------------------------------------------------------
// Samplers

pub fn sample_normal<R: Rng + ?Sized>(mean: f64, var: f64, rng: &mut R) -> Result<f64> {
    if !(var >= 0.0) || !mean.is_finite() {
        return Err(Error::Domain(format!("normal({mean}, {var})")));
    }
    let z: f64 = StandardNormal.sample(rng);
    Ok(mean + var.sqrt() * z)
}

pub fn sample_uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Domain(format!("uniform({lo}, {hi})")));
    }
    let u: f64 = rng.random();
    Ok(lo + (hi - lo) * u)
}

/// Poisson draw by sequential inversion for `lambda <= 30`; above that the
/// transformed-rejection sampler from `rand_distr` (exact).
pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<u64> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("poisson({lambda})")));
    }
    if lambda == 0.0 {
        return Ok(0);
    }
    if lambda <= 30.0 {
        let u: f64 = rng.random();
        let mut k = 0u64;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
            if p == 0.0 {
                break;
            }
        }
        return Ok(k);
    }
    let dist = rand_distr::Poisson::new(lambda).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(dist.sample(rng) as u64)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(out: &mut [f64], rng: &mut R) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// Draws from a standard normal in `R^k` conditioned on the ball `|D|^2 <= d`.
#[derive(Debug, Clone)]
pub struct BallDraws {
    /// One draw per row.
    pub draws: DMatrix<f64>,
    pub proposals: u64,
}

/// Plain rejection sampler. `cap` bounds the proposals spent on the batch.
/// At very small acceptance rates a radial sampler (uniform direction times
/// a truncated chi radius) would avoid the rejection cost.
pub fn sample_truncated_normal_ball<R: Rng + ?Sized>(
    k: usize,
    d: f64,
    n: usize,
    cap: u64,
    rng: &mut R,
) -> Result<BallDraws> {
    if k == 0 || !(d > 0.0) {
        return Err(Error::Domain(format!("ball sampler with k={k}, d={d}")));
    }
    let mut draws = DMatrix::zeros(n, k);
    let mut buf = vec![0.0; k];
    let mut proposals = 0u64;
    let mut filled = 0;
    while filled < n {
        if proposals >= cap {
            return Err(Error::RejectionBudgetExceeded {
                budget: cap,
                best_distance: None,
                best: None,
            });
        }
        proposals += 1;
        standard_normal_vec(&mut buf, rng);
        let norm2: f64 = buf.iter().map(|v| v * v).sum();
        if norm2 <= d {
            for (j, v) in buf.iter().enumerate() {
                draws[(filled, j)] = *v;
            }
            filled += 1;
        }
    }
    Ok(BallDraws { draws, proposals })
}
