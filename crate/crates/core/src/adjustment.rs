//! Regression adjustment (aggregate OLS and inverse-probability WLS with
//! cluster-robust covariances) and the projection estimator.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::Serialize;

use crate::design::{Assignment, ValidatedDesign};
use crate::error::{Error, Result};
use crate::estimators::{arm_estimate, contrast_matrix, contrast_of, covariate_contrasts, Adjustment, Flavor};
use crate::moments::{
    cross_moments, ht_unit_plugins, plot_arm_means, sigma_tt_estimated, sigma_xt_estimated, CovariateMoments,
    Provenance, SigmaBlocks,
};
use crate::numkernels::{sym_inverse, RangeFactor};

/// Relative residual norm below which a column counts as collinear with the
/// columns before it.
pub const COLLINEAR_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// Coefficients, zero for dropped columns.
    pub coef: DVector<f64>,
    pub kept: Vec<bool>,
    /// Cluster-robust covariance (zero rows/columns for dropped columns).
    pub vcov: DMatrix<f64>,
    pub residuals: DVector<f64>,
}

/// Weighted least squares with whole-cluster robust covariance
/// bread * sum_g s_g s_g^T * bread * G/(G-1), where s_g sums x_i w_i e_i over
/// cluster g. Collinear columns are dropped, later columns first.
pub fn cluster_least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: Option<&[f64]>,
    clusters: &[usize],
    n_clusters: usize,
) -> Result<LeastSquares> {
    let (n, p) = x.shape();
    if y.len() != n || clusters.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::Dimension("regression inputs have mismatched rows".into()));
    }
    let sw: Vec<f64> = match weights {
        Some(w) => w.iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; n],
    };
    let mut xw = x.clone();
    for (i, s) in sw.iter().enumerate() {
        xw.row_mut(i).scale_mut(*s);
    }
    let yw = DVector::from_iterator(n, y.iter().zip(&sw).map(|(v, s)| v * s));

    // Greedy column selection with twice-applied Gram-Schmidt.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = vec![false; p];
    for j in 0..p {
        let col = xw.column(j).clone_owned();
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = col;
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let rn = r.norm();
        if rn > COLLINEAR_TOL * norm {
            basis.push(r / rn);
            kept[j] = true;
        }
    }
    let idx: Vec<usize> = (0..p).filter(|&j| kept[j]).collect();
    let k = idx.len();
    let xk = DMatrix::from_fn(n, k, |i, c| xw[(i, idx[c])]);
    let qr = xk.qr();
    let r = qr.r();
    let qty = qr.q().transpose() * &yw;
    let beta_k = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficientDesignMatrix("triangular solve failed".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::RankDeficientDesignMatrix("triangular inverse failed".into()))?;
    let bread = &r_inv * r_inv.transpose();

    let mut coef = DVector::zeros(p);
    for (c, &j) in idx.iter().enumerate() {
        coef[j] = beta_k[c];
    }
    let residuals = y - x * &coef;
    let mut scores = DMatrix::zeros(n_clusters, k);
    for i in 0..n {
        let wi = weights.map_or(1.0, |w| w[i]);
        let f = wi * residuals[i];
        let g = clusters[i];
        for (c, &j) in idx.iter().enumerate() {
            scores[(g, c)] += x[(i, j)] * f;
        }
    }
    let meat = scores.transpose() * &scores;
    let g = n_clusters as f64;
    let vk = &bread * meat * &bread * (g / (g - 1.0));
    let mut vcov = DMatrix::zeros(p, p);
    for (c, &j) in idx.iter().enumerate() {
        for (d, &m) in idx.iter().enumerate() {
            vcov[(j, m)] = 0.5 * (vk[(c, d)] + vk[(d, c)]);
        }
    }
    Ok(LeastSquares {
        coef,
        kept,
        vcov,
        residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FitKind {
    Ag,
    Wls,
    AgAlpha,
}

#[derive(Debug, Clone)]
pub struct RegressionFit {
    /// Arm intercepts in arm order 00, 01, 10, 11.
    pub beta: [f64; 4],
    /// Per-arm slopes on centered covariates, with the whole-plot size slope
    /// last for the alpha variant.
    pub gamma: Vec<DVector<f64>>,
    /// 4 x 4 cluster-robust covariance of `beta`.
    pub vcov: DMatrix<f64>,
    pub kind: FitKind,
    /// Grand mean used to center the analysis covariates.
    pub v_mean: DVector<f64>,
    pub warnings: Vec<String>,
}

impl RegressionFit {
    pub fn flavor(&self) -> Flavor {
        match self.kind {
            FitKind::Wls => Flavor::Hajek,
            FitKind::Ag | FitKind::AgAlpha => Flavor::Ht,
        }
    }

    pub fn tau_hat(&self) -> Vector3<f64> {
        contrast_of(&self.beta)
    }
}

/// Column index of arm `z`'s slope on covariate `j` in the interacted design.
fn slope_col(z: usize, j: usize, width: usize) -> usize {
    4 + z * width + j
}

fn unpack(ls: LeastSquares, j: usize, with_alpha: bool, kind: FitKind, v_mean: DVector<f64>) -> Result<RegressionFit> {
    let names = |c: usize| -> String {
        if c < 4 {
            format!("arm {c} intercept")
        } else if c < 4 + 4 * j {
            format!("arm {} slope on covariate {}", (c - 4) / j, (c - 4) % j)
        } else {
            format!("arm {} slope on whole-plot size", c - 4 - 4 * j)
        }
    };
    for z in 0..4 {
        if !ls.kept[z] {
            return Err(Error::RankDeficientDesignMatrix(names(z)));
        }
    }
    let warnings = ls
        .kept
        .iter()
        .enumerate()
        .filter(|(_, &k)| !k)
        .map(|(c, _)| format!("dropped collinear column: {}", names(c)))
        .collect();
    let width = j + usize::from(with_alpha);
    let gamma = (0..4)
        .map(|z| {
            DVector::from_fn(width, |c, _| {
                if c < j {
                    ls.coef[slope_col(z, c, j)]
                } else {
                    ls.coef[4 + 4 * j + z]
                }
            })
        })
        .collect();
    Ok(RegressionFit {
        beta: [ls.coef[0], ls.coef[1], ls.coef[2], ls.coef[3]],
        gamma,
        vcov: ls.vcov.view((0, 0), (4, 4)).clone_owned(),
        kind,
        v_mean,
        warnings,
    })
}

fn check_inputs(design: &ValidatedDesign, y: &DVector<f64>, v: &DMatrix<f64>) -> Result<()> {
    if y.len() != design.n() || v.nrows() != design.n() {
        return Err(Error::Dimension("outcome or covariate rows differ from N".into()));
    }
    Ok(())
}

/// Inverse-probability weighted regression over all subplots of Y on arm
/// indicators and arm indicators times centered covariates.
pub fn fit_wls_lin(
    design: &ValidatedDesign,
    assignment: &Assignment,
    y: &DVector<f64>,
    v: &DMatrix<f64>,
) -> Result<RegressionFit> {
    check_inputs(design, y, v)?;
    let (vc, v_mean) = crate::estimators::center_columns(v);
    let j = v.ncols();
    let n = design.n();
    let mut x = DMatrix::zeros(n, 4 + 4 * j);
    let mut weights = vec![0.0; n];
    let mut clusters = vec![0; n];
    for w in 0..design.w() {
        for i in design.units(w) {
            let z = assignment.z(w, i);
            x[(i, z)] = 1.0;
            for c in 0..j {
                x[(i, slope_col(z, c, j))] = vc[(i, c)];
            }
            weights[i] = 1.0 / design.p_unit(w, z);
            clusters[i] = w;
        }
    }
    let ls = cluster_least_squares(&x, y, Some(&weights), &clusters, design.w())?;
    unpack(ls, j, false, FitKind::Wls, v_mean)
}

/// Aggregate regression over the 2W (whole plot, factor-B arm) cells of
/// alpha_w Y_w(z) on arm indicators and arm indicators times
/// alpha_w (v_w(z) - v_bar), optionally adding arm indicators times (alpha_w - 1).
pub fn fit_ag_lin(
    design: &ValidatedDesign,
    assignment: &Assignment,
    y: &DVector<f64>,
    v: &DMatrix<f64>,
    include_alpha: bool,
) -> Result<RegressionFit> {
    check_inputs(design, y, v)?;
    let j = v.ncols();
    let v_mean = DVector::from_iterator(j, v.column_iter().map(|c| c.sum() / design.n() as f64));
    let y_cells = plot_arm_means(design, assignment, y);
    let p = 4 + 4 * j + if include_alpha { 4 } else { 0 };
    let rows = 2 * design.w();
    let mut x = DMatrix::zeros(rows, p);
    let mut resp = DVector::zeros(rows);
    let mut clusters = vec![0; rows];
    for w in 0..design.w() {
        let a = assignment.a_levels[w] as usize;
        let al = design.alpha(w);
        let mut v_sums = DMatrix::<f64>::zeros(2, j);
        for i in design.units(w) {
            let b = assignment.b_flat[i] as usize;
            for c in 0..j {
                v_sums[(b, c)] += v[(i, c)];
            }
        }
        for b in 0..2 {
            let r = 2 * w + b;
            let z = 2 * a + b;
            let mb = design.m_arm(w, b) as f64;
            resp[r] = al * y_cells[(w, b)];
            clusters[r] = w;
            x[(r, z)] = 1.0;
            for c in 0..j {
                x[(r, slope_col(z, c, j))] = al * (v_sums[(b, c)] / mb - v_mean[c]);
            }
            if include_alpha {
                x[(r, 4 + 4 * j + z)] = al - 1.0;
            }
        }
    }
    let ls = cluster_least_squares(&x, &resp, None, &clusters, design.w())?;
    let kind = if include_alpha { FitKind::AgAlpha } else { FitKind::Ag };
    unpack(ls, j, include_alpha, kind, v_mean)
}

/// Observed outcomes net of the fitted covariate slopes: Y - (v - v_bar)^T gamma_z,
/// and for the alpha variant also gamma_alpha,z (alpha_w - 1)/alpha_w so that
/// alpha_w times the plot mean matches the aggregate regression's response scale.
pub fn adjusted_outcomes(
    fit: &RegressionFit,
    design: &ValidatedDesign,
    assignment: &Assignment,
    y: &DVector<f64>,
    v: &DMatrix<f64>,
) -> DVector<f64> {
    let j = v.ncols();
    let mut out = y.clone();
    for w in 0..design.w() {
        let al = design.alpha(w);
        for i in design.units(w) {
            let z = assignment.z(w, i);
            let g = &fit.gamma[z];
            let mut shift = 0.0;
            for c in 0..j {
                shift += (v[(i, c)] - fit.v_mean[c]) * g[c];
            }
            if fit.kind == FitKind::AgAlpha {
                shift += g[j] * (al - 1.0) / al;
            }
            out[i] -= shift;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct AdjustedEstimate {
    pub tau_hat: Vector3<f64>,
    /// For regression adjustment: (W G V G^T, plug-in cross block on adjusted
    /// outcomes, Sigma_xx). For projection: (unadjusted Sigma_tt, cross block
    /// with v, Sigma_vv), so `perp` is the projection variance.
    pub blocks: SigmaBlocks,
    pub kind: Adjustment,
    pub warnings: Vec<String>,
}

pub fn adjusted_estimate(
    fit: &RegressionFit,
    design: &ValidatedDesign,
    assignment: &Assignment,
    y: &DVector<f64>,
    v: &DMatrix<f64>,
    x_moments: &CovariateMoments,
) -> Result<AdjustedEstimate> {
    let flavor = fit.flavor();
    let g = contrast_matrix();
    let sigma_tt = crate::numkernels::symmetrize(&(&g * &fit.vcov * g.transpose() * design.w() as f64));
    let y_adj = adjusted_outcomes(fit, design, assignment, y, v);
    let sigma_tx = sigma_xt_estimated(design, assignment, &y_adj, &x_moments.centered, flavor)?.transpose();
    let xx = x_moments.sigma_factor(design, flavor, "sigma_xx")?;
    let blocks = SigmaBlocks::assemble(sigma_tt, sigma_tx, xx, flavor, Provenance::Estimated)?;
    let kind = match fit.kind {
        FitKind::AgAlpha => Adjustment::LAlpha,
        _ => Adjustment::L,
    };
    Ok(AdjustedEstimate {
        tau_hat: fit.tau_hat(),
        blocks,
        kind,
        warnings: fit.warnings.clone(),
    })
}

struct ProjectionParts {
    tau_hat: Vector3<f64>,
    sigma_tt: DMatrix<f64>,
    sigma_tv: DMatrix<f64>,
    vv: RangeFactor,
}

fn projection_parts(
    design: &ValidatedDesign,
    assignment: &Assignment,
    y: &DVector<f64>,
    v_moments: &CovariateMoments,
    flavor: Flavor,
) -> Result<ProjectionParts> {
    let ym = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let arm = arm_estimate(&ym, assignment, design, flavor)?;
    let tau = contrast_of(&[arm.values[0], arm.values[1], arm.values[2], arm.values[3]]);
    let v_arm = arm_estimate(&v_moments.centered, assignment, design, flavor)?;
    let tau_v = covariate_contrasts(&v_arm);
    let sigma_tt = sigma_tt_estimated(design, assignment, y, flavor)?;
    let u = ht_unit_plugins(design, assignment, y);
    let sigma_tv = cross_moments(design, &v_moments.centered, &u)?
        .sigma_xt(design, flavor)
        .transpose();
    let vv = v_moments.sigma_factor(design, flavor, "sigma_vv")?;
    let shift = &sigma_tv * &vv.pinv * tau_v;
    Ok(ProjectionParts {
        tau_hat: Vector3::new(tau[0] - shift[0], tau[1] - shift[1], tau[2] - shift[2]),
        sigma_tt,
        sigma_tv,
        vv,
    })
}

/// tau_hat - Sigma_tv Sigma_vv^+ tau_hat_v.
pub fn projection_point(
    design: &ValidatedDesign,
    assignment: &Assignment,
    y: &DVector<f64>,
    v_moments: &CovariateMoments,
    flavor: Flavor,
) -> Result<Vector3<f64>> {
    Ok(projection_parts(design, assignment, y, v_moments, flavor)?.tau_hat)
}

/// Projection estimate with variance Sigma_tt - Sigma_tv Sigma_vv^+ Sigma_vt.
pub fn projection_estimate(
    design: &ValidatedDesign,
    assignment: &Assignment,
    y: &DVector<f64>,
    v_moments: &CovariateMoments,
    flavor: Flavor,
) -> Result<AdjustedEstimate> {
    let parts = projection_parts(design, assignment, y, v_moments, flavor)?;
    let blocks = SigmaBlocks::assemble(parts.sigma_tt, parts.sigma_tv, parts.vv, flavor, Provenance::Estimated)?;
    Ok(AdjustedEstimate {
        tau_hat: parts.tau_hat,
        blocks,
        kind: Adjustment::P,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HeterogeneityDiagnostics {
    /// Max-abs entry of the within-plot covariate block Psi_vv.
    pub psi_vv_norm: f64,
    /// Max-abs entry of (N-1)^-1 sum (v_ws - v_w)(v_ws - v_w)^T.
    pub q_in_vv_norm: f64,
}

pub fn q_in_vv(design: &ValidatedDesign, v: &DMatrix<f64>) -> DMatrix<f64> {
    let j = v.ncols();
    let mut q = DMatrix::zeros(j, j);
    let mut dev = vec![0.0; j];
    for w in 0..design.w() {
        let range = design.units(w);
        let mw = range.len() as f64;
        let mean: Vec<f64> = (0..j)
            .map(|c| range.clone().map(|i| v[(i, c)]).sum::<f64>() / mw)
            .collect();
        for i in range {
            for c in 0..j {
                dev[c] = v[(i, c)] - mean[c];
            }
            for c in 0..j {
                for d in 0..j {
                    q[(c, d)] += dev[c] * dev[d];
                }
            }
        }
    }
    q / (design.n() as f64 - 1.0)
}

pub fn heterogeneity_diagnostics(design: &ValidatedDesign, v: &DMatrix<f64>) -> Result<HeterogeneityDiagnostics> {
    let m = crate::moments::covariate_moments(design, v)?;
    Ok(HeterogeneityDiagnostics {
        psi_vv_norm: m.psi.amax(),
        q_in_vv_norm: q_in_vv(design, v).amax(),
    })
}

/// Probability limits of the per-arm slopes of both regressions.
#[derive(Debug, Clone)]
pub struct SlopeLimits {
    pub wls: Vec<DVector<f64>>,
    pub ag: Vec<DVector<f64>>,
}

/// gamma_wls,z = Q_vv^-1 Q_vY(z) and gamma_ag,z = T_vv(z)^-1 T_vY(z) with
/// T_vv(z) = S_ht,vv + p_a Psi_vv(z, z) and T_vY(z) = S_ht,vY(z) + p_a Psi_vY(z, z).
pub fn slope_limits(design: &ValidatedDesign, table: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<SlopeLimits> {
    let vm = crate::moments::covariate_moments(design, v)?;
    let j = v.ncols();
    let cross = cross_moments(design, &vm.centered, table)?;
    let (yc, _) = crate::estimators::center_columns(table);
    let nm1 = design.n() as f64 - 1.0;
    let q_vv = vm.centered.transpose() * &vm.centered / nm1;
    let q_vy = vm.centered.transpose() * &yc / nm1;
    let q_inv = sym_inverse(&q_vv, "q_vv")?;
    let mut wls = Vec::with_capacity(4);
    let mut ag = Vec::with_capacity(4);
    for z in 0..4 {
        wls.push(&q_inv * q_vy.column(z));
        let pa = design.p(z >> 1);
        let t_vv = &vm.s_ht + vm.psi.view((z * j, z * j), (j, j)) * pa;
        let t_vy = cross.s_ht.column(z) + cross.psi.view((z * j, z), (j, 1)) * pa;
        ag.push(sym_inverse(&t_vv, "t_vv")? * t_vy);
    }
    Ok(SlopeLimits { wls, ag })
}
