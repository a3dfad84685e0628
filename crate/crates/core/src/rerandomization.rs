//! Mahalanobis balance criteria on covariate contrasts and the accept/reject
//! rerandomization loop.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::design::{randomize_into, Assignment, ValidatedDesign};
use crate::error::{Error, Result};
use crate::estimators::{contrast_of, Flavor};
use crate::moments::{covariate_moments, CovariateMoments};
use crate::numkernels::{chi2_quantile, RngStream};

pub const DEFAULT_MAX_DRAWS: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct BalanceCriterion {
    pub flavor: Flavor,
    pub threshold_d: f64,
    /// Pseudo-inverse of cov(tau_hat_x) = Sigma_xx / W.
    pub inv_cov: DMatrix<f64>,
    /// Rank of Sigma_xx; the threshold uses chi-square(rank).
    pub rank: usize,
    l: usize,
    /// Centered covariates, row-major N x L.
    x_rows: Vec<f64>,
}

impl BalanceCriterion {
    pub fn l(&self) -> usize {
        self.l
    }
}

/// Criterion with threshold at the `acceptance_rate` quantile of
/// chi-square(rank Sigma_xx), which is chi-square(3L) unless some covariate
/// contrasts vanish identically.
pub fn build_criterion(
    design: &ValidatedDesign,
    x: &DMatrix<f64>,
    flavor: Flavor,
    acceptance_rate: f64,
) -> Result<BalanceCriterion> {
    let cov = covariate_moments(design, x)?;
    criterion_from_moments(design, &cov, flavor, acceptance_rate)
}

pub fn criterion_from_moments(
    design: &ValidatedDesign,
    cov: &CovariateMoments,
    flavor: Flavor,
    acceptance_rate: f64,
) -> Result<BalanceCriterion> {
    if !(acceptance_rate > 0.0 && acceptance_rate < 1.0) {
        return Err(Error::Domain(format!(
            "acceptance rate {acceptance_rate} outside (0, 1)"
        )));
    }
    let l = cov.dim();
    if l == 0 {
        return Err(Error::Dimension(
            "balance criterion needs at least one covariate".into(),
        ));
    }
    let factor = cov.sigma_factor(design, flavor, "sigma_xx")?;
    let inv_cov = &factor.pinv * design.w() as f64;
    let rank = factor.rank;
    let threshold_d = chi2_quantile(rank, acceptance_rate)?;
    let x_rows = cov.centered.transpose().as_slice().to_vec();
    Ok(BalanceCriterion {
        flavor,
        threshold_d,
        inv_cov,
        rank,
        l,
        x_rows,
    })
}

/// Covariate contrasts for the criterion's flavor, length 3L.
pub fn criterion_contrasts(
    criterion: &BalanceCriterion,
    design: &ValidatedDesign,
    assignment: &Assignment,
) -> DVector<f64> {
    let l = criterion.l;
    let mut sums = vec![0.0; 4 * l];
    let mut ones = [0.0; 4];
    for w in 0..design.w() {
        let a = assignment.a_levels[w] as usize;
        let inv = [1.0 / design.p_unit(w, 2 * a), 1.0 / design.p_unit(w, 2 * a + 1)];
        for i in design.units(w) {
            let b = assignment.b_flat[i] as usize;
            let z = 2 * a + b;
            ones[z] += inv[b];
            let row = &criterion.x_rows[i * l..(i + 1) * l];
            let acc = &mut sums[z * l..(z + 1) * l];
            for (s, x) in acc.iter_mut().zip(row) {
                *s += inv[b] * x;
            }
        }
    }
    let mut out = DVector::zeros(3 * l);
    for j in 0..l {
        let mut col: [f64; 4] = std::array::from_fn(|z| sums[z * l + j]);
        if criterion.flavor == Flavor::Hajek {
            for z in 0..4 {
                col[z] /= ones[z];
            }
        } else {
            let n = design.n() as f64;
            col.iter_mut().for_each(|v| *v /= n);
        }
        let c = contrast_of(&col);
        for e in 0..3 {
            out[e * l + j] = c[e];
        }
    }
    out
}

pub fn mahalanobis(criterion: &BalanceCriterion, design: &ValidatedDesign, assignment: &Assignment) -> f64 {
    let t = criterion_contrasts(criterion, design, assignment);
    let q = t.dot(&(&criterion.inv_cov * &t));
    q.max(0.0)
}

#[derive(Debug, Clone)]
pub struct Rerandomized {
    pub assignment: Assignment,
    pub draws_used: u64,
    pub distance: f64,
}

/// Draws assignments until the Mahalanobis distance is at most the threshold.
pub fn rerandomize_with<R: Rng + ?Sized>(
    design: &ValidatedDesign,
    criterion: &BalanceCriterion,
    rng: &mut R,
    max_draws: u64,
) -> Result<Rerandomized> {
    if max_draws == 0 {
        return Err(Error::Domain("max_draws must be at least 1".into()));
    }
    let mut current = Assignment {
        a_levels: Vec::new(),
        b_flat: Vec::new(),
    };
    let mut best: Option<(f64, Assignment)> = None;
    for draw in 1..=max_draws {
        randomize_into(design, rng, &mut current);
        let m = mahalanobis(criterion, design, &current);
        if m <= criterion.threshold_d {
            return Ok(Rerandomized {
                assignment: current,
                draws_used: draw,
                distance: m,
            });
        }
        if best.as_ref().is_none_or(|(bm, _)| m < *bm) {
            best = Some((m, current.clone()));
        }
    }
    let (best_distance, best) = best.map(|(m, a)| (Some(m), Some(Box::new(a)))).unwrap_or((None, None));
    Err(Error::RejectionBudgetExceeded {
        budget: max_draws,
        best_distance,
        best,
    })
}

pub fn rerandomize(
    design: &ValidatedDesign,
    criterion: &BalanceCriterion,
    stream: RngStream,
    max_draws: u64,
) -> Result<Rerandomized> {
    rerandomize_with(design, criterion, &mut stream.rng(), max_draws)
}
