//! Monte-Carlo sampling of the rerandomization limit law, its quantiles, and
//! joint and per-effect confidence sets.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::moments::SigmaBlocks;
use crate::numkernels::{
    chi2_quantile, psd_sqrt, sample_truncated_normal_ball, standard_normal_vec, sym_inverse, RngStream,
    DEFAULT_PROPOSAL_CAP,
};

pub const DEFAULT_MC_SIZE: usize = 100_000;
/// Ball-truncated draws are generated in batches of this size, each with its
/// own proposal cap.
pub const ZETA_BATCH: usize = 10_000;

/// Independent standard normal draws in R^3 and ball-truncated standard
/// normal draws in R^k, one pair per row.
#[derive(Debug, Clone)]
pub struct BaseDraws {
    pub eps: DMatrix<f64>,
    pub zeta: DMatrix<f64>,
    pub d: f64,
    pub proposals: u64,
}

impl BaseDraws {
    pub fn generate(n: usize, k: usize, d: f64, stream: RngStream) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("at least one Monte-Carlo draw is needed".into()));
        }
        let mut eps = DMatrix::zeros(n, 3);
        let mut rng = stream.substream(1).rng();
        let mut buf = [0.0; 3];
        for i in 0..n {
            standard_normal_vec(&mut buf, &mut rng);
            for j in 0..3 {
                eps[(i, j)] = buf[j];
            }
        }
        let mut zeta = DMatrix::zeros(n, k);
        let mut proposals = 0;
        if k > 0 {
            let mut rng = stream.substream(2).rng();
            let mut start = 0;
            while start < n {
                let len = ZETA_BATCH.min(n - start);
                let batch = sample_truncated_normal_ball(k, d, len, DEFAULT_PROPOSAL_CAP, &mut rng)?;
                zeta.view_mut((start, 0), (len, k)).copy_from(&batch.draws);
                proposals += batch.proposals;
                start += len;
            }
        }
        Ok(Self {
            eps,
            zeta,
            d,
            proposals,
        })
    }

    pub fn len(&self) -> usize {
        self.eps.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k(&self) -> usize {
        self.zeta.ncols()
    }
}

/// phi = perp^{1/2} eps + Sigma_tx Sigma_xx^{-1/2} zeta, with Sigma_xx^{-1/2}
/// taken on the range of Sigma_xx so zeta has dimension rank(Sigma_xx).
#[derive(Debug, Clone)]
pub struct LimitLawSampler {
    pub perp: DMatrix<f64>,
    pub perp_sqrt: DMatrix<f64>,
    /// 3 x rank(Sigma_xx).
    pub coupling: DMatrix<f64>,
}

impl LimitLawSampler {
    pub fn from_blocks(blocks: &SigmaBlocks) -> Result<Self> {
        let perp_sqrt = psd_sqrt(&blocks.perp)?;
        let coupling = &blocks.sigma_tx * &blocks.xx_factor.inv_sqrt_range;
        Ok(Self {
            perp: blocks.perp.clone(),
            perp_sqrt,
            coupling,
        })
    }

    pub fn from_parts(perp: DMatrix<f64>, coupling: DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            perp_sqrt: psd_sqrt(&perp)?,
            perp,
            coupling,
        })
    }
}

/// n x 3 draws of phi using the shared base draws.
pub fn sample_phi(sampler: &LimitLawSampler, base: &BaseDraws) -> Result<DMatrix<f64>> {
    if sampler.coupling.ncols() != base.k() {
        return Err(Error::Dimension(format!(
            "coupling has {} columns, base draws have dimension {}",
            sampler.coupling.ncols(),
            base.k()
        )));
    }
    let mut phi = &base.eps * sampler.perp_sqrt.transpose();
    if base.k() > 0 {
        phi += &base.zeta * sampler.coupling.transpose();
    }
    Ok(phi)
}

/// Inverse-ECDF quantile: the ceil(p n)-th smallest value.
pub fn empirical_quantile(values: &mut [f64], p: f64) -> f64 {
    let n = values.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

/// 1 - xi quantile of phi^T perp^-1 phi.
pub fn c_quantile(sampler: &LimitLawSampler, base: &BaseDraws, xi: f64) -> Result<f64> {
    check_xi(xi)?;
    let inv = sym_inverse(&sampler.perp, "perp")?;
    let phi = sample_phi(sampler, base)?;
    let proj = &phi * &inv;
    let mut q: Vec<f64> = (0..phi.nrows())
        .map(|i| (0..3).map(|j| phi[(i, j)] * proj[(i, j)]).sum())
        .collect();
    Ok(empirical_quantile(&mut q, 1.0 - xi))
}

fn check_xi(xi: f64) -> Result<()> {
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::Domain(format!("xi = {xi} outside (0, 1)")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    Randomized,
    Rerandomized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegionKind {
    WaldChi2,
    MonteCarloQuantile,
}

/// {tau : W (tau_hat - tau)^T shape^-1 (tau_hat - tau) <= radius}.
#[derive(Debug, Clone)]
pub struct ConfidenceRegion {
    pub center: Vector3<f64>,
    pub shape: Matrix3<f64>,
    pub radius: f64,
    pub kind: RegionKind,
    pub scale: f64,
    shape_inv: Matrix3<f64>,
}

impl ConfidenceRegion {
    pub fn new(center: Vector3<f64>, shape: &DMatrix<f64>, radius: f64, kind: RegionKind, scale: f64) -> Result<Self> {
        let inv = sym_inverse(shape, "perp")?;
        Ok(Self {
            center,
            shape: Matrix3::from_iterator(shape.iter().cloned()),
            radius,
            kind,
            scale,
            shape_inv: Matrix3::from_iterator(inv.iter().cloned()),
        })
    }

    pub fn distance(&self, tau: &Vector3<f64>) -> f64 {
        let d = self.center - tau;
        self.scale * d.dot(&(self.shape_inv * d))
    }

    pub fn contains(&self, tau: &Vector3<f64>) -> bool {
        self.distance(tau) <= self.radius
    }

    /// Volume up to the constant 4/3 pi W^{-3/2}.
    pub fn relative_volume(&self) -> f64 {
        self.shape.determinant().max(0.0).sqrt() * self.radius.powf(1.5)
    }
}

pub fn joint_region(
    tau_hat: Vector3<f64>,
    blocks: &SigmaBlocks,
    scheme: Scheme,
    xi: f64,
    w: usize,
    base: Option<&BaseDraws>,
) -> Result<ConfidenceRegion> {
    check_xi(xi)?;
    let scale = w as f64;
    match scheme {
        Scheme::Randomized => ConfidenceRegion::new(
            tau_hat,
            &blocks.sigma_tt,
            chi2_quantile(3, 1.0 - xi)?,
            RegionKind::WaldChi2,
            scale,
        ),
        Scheme::Rerandomized => {
            let base = base.ok_or_else(|| Error::Domain("rerandomized region needs Monte-Carlo draws".into()))?;
            let sampler = LimitLawSampler::from_blocks(blocks)?;
            let c = c_quantile(&sampler, base, xi)?;
            ConfidenceRegion::new(tau_hat, &blocks.perp, c, RegionKind::MonteCarloQuantile, scale)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectInterval {
    pub lower: f64,
    pub upper: f64,
    /// Standard error of the point estimate.
    pub se: f64,
}

impl EffectInterval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Marginal law of sqrt(W)(tau_hat - tau) used for per-effect intervals.
pub enum MarginalLaw<'a> {
    /// Normal with the given 3 x 3 covariance.
    Normal(&'a DMatrix<f64>),
    Convolution(&'a LimitLawSampler, &'a BaseDraws),
}

pub fn normal_quantile_upper(xi: f64) -> Result<f64> {
    check_xi(xi)?;
    Ok(chi2_quantile(1, 1.0 - xi)?.sqrt())
}

/// Symmetric two-sided 1 - xi intervals per effect.
pub fn per_effect_intervals(
    tau_hat: &Vector3<f64>,
    law: MarginalLaw<'_>,
    xi: f64,
    w: usize,
) -> Result<[EffectInterval; 3]> {
    check_xi(xi)?;
    let root_w = (w as f64).sqrt();
    let (half, se): ([f64; 3], [f64; 3]) = match law {
        MarginalLaw::Normal(cov) => {
            let z = normal_quantile_upper(xi)?;
            let sd: [f64; 3] = std::array::from_fn(|j| cov[(j, j)].max(0.0).sqrt());
            (sd.map(|s| z * s), sd)
        }
        MarginalLaw::Convolution(sampler, base) => {
            let phi = sample_phi(sampler, base)?;
            let n = phi.nrows() as f64;
            let mut half = [0.0; 3];
            let mut sd = [0.0; 3];
            let mut buf = vec![0.0; phi.nrows()];
            for j in 0..3 {
                let col = phi.column(j);
                let mean = col.sum() / n;
                let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
                sd[j] = if n > 1.0 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
                for (b, v) in buf.iter_mut().zip(col.iter()) {
                    *b = v.abs();
                }
                half[j] = empirical_quantile(&mut buf, 1.0 - xi);
            }
            (half, sd)
        }
    };
    Ok(std::array::from_fn(|j| EffectInterval {
        lower: tau_hat[j] - half[j] / root_w,
        upper: tau_hat[j] + half[j] / root_w,
        se: se[j] / root_w,
    }))
}
