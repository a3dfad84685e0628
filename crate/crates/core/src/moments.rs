//! Between- and within-whole-plot covariance blocks, the joint covariance of
//! effect and covariate-contrast estimators, and their sample analogs.

use nalgebra::{DMatrix, DVector};

use crate::design::{Assignment, ValidatedDesign};
use crate::error::{Error, Result};
use crate::estimators::{contrast_kron, contrast_matrix, Flavor};
use crate::numkernels::{clamp_psd, rcond, RangeFactor, RCOND_MIN};

/// H(z, z') = 1{a = a'}/p_a - 1.
pub fn h_entry(design: &ValidatedDesign, z: usize, zp: usize) -> f64 {
    let (a, ap) = (z >> 1, zp >> 1);
    let diag = if a == ap { 1.0 / design.p(a) } else { 0.0 };
    diag - 1.0
}

/// H_w(z, z') = 1{a = a'}/p_a * (1{b = b'}/q_wb - 1).
pub fn hw_entry(design: &ValidatedDesign, w: usize, z: usize, zp: usize) -> f64 {
    let (a, ap) = (z >> 1, zp >> 1);
    if a != ap {
        return 0.0;
    }
    let (b, bp) = (z & 1, zp & 1);
    let inner = if b == bp { 1.0 / design.q(w, b) } else { 0.0 } - 1.0;
    inner / design.p(a)
}

pub fn h_matrix(design: &ValidatedDesign) -> DMatrix<f64> {
    DMatrix::from_fn(4, 4, |z, zp| h_entry(design, z, zp))
}

pub fn hw_matrix(design: &ValidatedDesign, w: usize) -> DMatrix<f64> {
    DMatrix::from_fn(4, 4, |z, zp| hw_entry(design, w, z, zp))
}

/// Whole-plot means (W x p) and grand mean (p) of a per-unit matrix.
fn plot_and_grand_means(design: &ValidatedDesign, m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let p = m.ncols();
    let mut plot = DMatrix::zeros(design.w(), p);
    let mut grand = DVector::zeros(p);
    for w in 0..design.w() {
        let range = design.units(w);
        let mw = range.len() as f64;
        for j in 0..p {
            let s: f64 = range.clone().map(|i| m[(i, j)]).sum();
            plot[(w, j)] = s / mw;
            grand[j] += s;
        }
    }
    grand /= design.n() as f64;
    (plot, grand)
}

/// Between-plot blocks for both flavors:
/// ht:  (W-1)^-1 sum_w (a_w P_w - P)(a_w Q_w - Q)^T
/// haj: (W-1)^-1 sum_w a_w^2 (P_w - P)(Q_w - Q)^T
fn between(
    design: &ValidatedDesign,
    p_plot: &DMatrix<f64>,
    p_bar: &DVector<f64>,
    q_plot: &DMatrix<f64>,
    q_bar: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (dp, dq) = (p_plot.ncols(), q_plot.ncols());
    let mut ht = DMatrix::zeros(dp, dq);
    let mut haj = DMatrix::zeros(dp, dq);
    let mut dev_p_ht = vec![0.0; dp];
    let mut dev_p_haj = vec![0.0; dp];
    for w in 0..design.w() {
        let a = design.alpha(w);
        for i in 0..dp {
            dev_p_ht[i] = a * p_plot[(w, i)] - p_bar[i];
            dev_p_haj[i] = a * (p_plot[(w, i)] - p_bar[i]);
        }
        for j in 0..dq {
            let dq_ht = a * q_plot[(w, j)] - q_bar[j];
            let dq_haj = a * (q_plot[(w, j)] - q_bar[j]);
            for i in 0..dp {
                ht[(i, j)] += dev_p_ht[i] * dq_ht;
                haj[(i, j)] += dev_p_haj[i] * dq_haj;
            }
        }
    }
    let scale = 1.0 / (design.w() as f64 - 1.0);
    (ht * scale, haj * scale)
}

/// Within-plot block (M_w-1)^-1 sum_s a_w^2 (P_ws - P_w)(Q_ws - Q_w)^T.
fn within(
    design: &ValidatedDesign,
    w: usize,
    p: &DMatrix<f64>,
    p_plot: &DMatrix<f64>,
    q: &DMatrix<f64>,
    q_plot: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (dp, dq) = (p.ncols(), q.ncols());
    let mut out = DMatrix::zeros(dp, dq);
    let mut dev = vec![0.0; dp];
    for s in design.units(w) {
        for i in 0..dp {
            dev[i] = p[(s, i)] - p_plot[(w, i)];
        }
        for j in 0..dq {
            let dj = q[(s, j)] - q_plot[(w, j)];
            for i in 0..dp {
                out[(i, j)] += dev[i] * dj;
            }
        }
    }
    let a = design.alpha(w);
    out * (a * a / (design.m(w) as f64 - 1.0))
}

fn check_plots(design: &ValidatedDesign) -> Result<()> {
    for w in 0..design.w() {
        if design.m(w) < 2 {
            return Err(Error::DegenerateWholePlot { plot: w.to_string() });
        }
    }
    Ok(())
}

/// Covariate blocks: S_{*,xx} for both flavors and Psi_xx.
#[derive(Debug, Clone)]
pub struct CovariateMoments {
    /// Mean subtracted from the raw covariates.
    pub mean: DVector<f64>,
    /// Covariates after centering, N x L.
    pub centered: DMatrix<f64>,
    pub s_ht: DMatrix<f64>,
    pub s_haj: DMatrix<f64>,
    /// 4L x 4L.
    pub psi: DMatrix<f64>,
}

impl CovariateMoments {
    pub fn dim(&self) -> usize {
        self.centered.ncols()
    }

    pub fn s_star(&self, flavor: Flavor) -> &DMatrix<f64> {
        match flavor {
            Flavor::Ht => &self.s_ht,
            Flavor::Hajek => &self.s_haj,
        }
    }

    /// (G ⊗ I_L)(H ⊗ S_{*,xx} + Psi_xx)(G ⊗ I_L)^T, 3L x 3L.
    pub fn sigma(&self, design: &ValidatedDesign, flavor: Flavor) -> DMatrix<f64> {
        let l = self.dim();
        let gk = contrast_kron(l);
        let inner = h_matrix(design).kronecker(self.s_star(flavor)) + &self.psi;
        let out = &gk * inner * gk.transpose();
        crate::numkernels::symmetrize(&out)
    }

    /// Range factor of `sigma`. Collinear covariate columns are an error;
    /// contrast directions that vanish for every assignment (for example the
    /// factor-B contrasts of a covariate constant within whole plots) are
    /// dropped from the range.
    pub fn sigma_factor(&self, design: &ValidatedDesign, flavor: Flavor, what: &'static str) -> Result<RangeFactor> {
        if self.dim() == 0 {
            return RangeFactor::new(&DMatrix::zeros(0, 0), what);
        }
        // Work on unit-variance columns so the rank decisions do not depend
        // on the units the covariates are measured in.
        let gram = self.centered.transpose() * &self.centered;
        let l = self.dim();
        let inv_sd = DVector::from_fn(l, |j, _| 1.0 / gram[(j, j)].sqrt());
        if inv_sd.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular { what, rcond: 0.0 });
        }
        let d = DMatrix::from_diagonal(&inv_sd);
        let rc = rcond(&(&d * &gram * &d))?;
        if rc < RCOND_MIN {
            return Err(Error::Singular { what, rcond: rc });
        }
        let k = DMatrix::<f64>::identity(3, 3).kronecker(&d);
        let sigma = self.sigma(design, flavor);
        let scaled = RangeFactor::new(&(&k * &sigma * &k), what)?;
        Ok(RangeFactor {
            matrix: sigma,
            pinv: crate::numkernels::symmetrize(&(&k * &scaled.pinv * &k)),
            inv_sqrt_range: &k * &scaled.inv_sqrt_range,
            rank: scaled.rank,
        })
    }
}

/// Centers covariates at their grand mean and computes their moment blocks.
pub fn covariate_moments(design: &ValidatedDesign, x: &DMatrix<f64>) -> Result<CovariateMoments> {
    check_plots(design)?;
    if x.nrows() != design.n() {
        return Err(Error::Dimension("covariate rows differ from N".into()));
    }
    let (centered, mean) = crate::estimators::center_columns(x);
    let l = centered.ncols();
    let (plot, grand) = plot_and_grand_means(design, &centered);
    let (s_ht, s_haj) = between(design, &plot, &grand, &plot, &grand);
    let mut psi = DMatrix::zeros(4 * l, 4 * l);
    for w in 0..design.w() {
        let sw = within(design, w, &centered, &plot, &centered, &plot);
        let mw = design.m(w) as f64;
        for z in 0..4 {
            for zp in 0..4 {
                let h = hw_entry(design, w, z, zp);
                if h == 0.0 {
                    continue;
                }
                let mut block = psi.view_mut((z * l, zp * l), (l, l));
                block += &sw * (h / mw);
            }
        }
    }
    psi /= design.w() as f64;
    Ok(CovariateMoments {
        mean,
        centered,
        s_ht,
        s_haj,
        psi,
    })
}

/// Cross blocks between centered covariates and a per-unit 4-column outcome
/// matrix (potential outcomes, or their inverse-probability plug-ins).
#[derive(Debug, Clone)]
pub struct CrossMoments {
    /// L x 4.
    pub s_ht: DMatrix<f64>,
    pub s_haj: DMatrix<f64>,
    /// 4L x 4, block (z, z') = W^-1 sum_w M_w^-1 H_w(z, z') S_{w,xY}(z').
    pub psi: DMatrix<f64>,
}

impl CrossMoments {
    pub fn s_star(&self, flavor: Flavor) -> &DMatrix<f64> {
        match flavor {
            Flavor::Ht => &self.s_ht,
            Flavor::Hajek => &self.s_haj,
        }
    }

    /// (G ⊗ I_L){(H ⊗ 1_L) ∘ (1_4 ⊗ S_{*,xY}) + Psi_xY} G^T, 3L x 3.
    pub fn sigma_xt(&self, design: &ValidatedDesign, flavor: Flavor) -> DMatrix<f64> {
        let l = self.s_ht.nrows();
        let s = self.s_star(flavor);
        let mut inner = self.psi.clone();
        for z in 0..4 {
            for zp in 0..4 {
                let h = h_entry(design, z, zp);
                for i in 0..l {
                    inner[(z * l + i, zp)] += h * s[(i, zp)];
                }
            }
        }
        contrast_kron(l) * inner * contrast_matrix().transpose()
    }
}

pub fn cross_moments(design: &ValidatedDesign, xc: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<CrossMoments> {
    check_plots(design)?;
    if xc.nrows() != design.n() || u.nrows() != design.n() || u.ncols() != 4 {
        return Err(Error::Dimension("cross moments need N x L and N x 4 inputs".into()));
    }
    let l = xc.ncols();
    let (x_plot, x_bar) = plot_and_grand_means(design, xc);
    let (u_plot, u_bar) = plot_and_grand_means(design, u);
    let (s_ht, s_haj) = between(design, &x_plot, &x_bar, &u_plot, &u_bar);
    let mut psi = DMatrix::zeros(4 * l, 4);
    for w in 0..design.w() {
        let sw = within(design, w, xc, &x_plot, u, &u_plot);
        let mw = design.m(w) as f64;
        for z in 0..4 {
            for zp in 0..4 {
                let h = hw_entry(design, w, z, zp);
                if h == 0.0 {
                    continue;
                }
                for i in 0..l {
                    psi[(z * l + i, zp)] += h / mw * sw[(i, zp)];
                }
            }
        }
    }
    psi /= design.w() as f64;
    Ok(CrossMoments { s_ht, s_haj, psi })
}

/// Population covariance building blocks for a full potential-outcome table.
#[derive(Debug, Clone)]
pub struct PopulationMoments {
    pub y_bar: [f64; 4],
    pub s_ht: DMatrix<f64>,
    pub s_haj: DMatrix<f64>,
    pub s_w: Vec<DMatrix<f64>>,
    pub psi: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub h_w: Vec<DMatrix<f64>>,
    pub covariates: CovariateMoments,
    pub cross: CrossMoments,
}

impl PopulationMoments {
    pub fn s_star(&self, flavor: Flavor) -> &DMatrix<f64> {
        match flavor {
            Flavor::Ht => &self.s_ht,
            Flavor::Hajek => &self.s_haj,
        }
    }

    pub fn tau(&self) -> nalgebra::Vector3<f64> {
        crate::estimators::contrast_of(&self.y_bar)
    }
}

pub fn population_moments(
    design: &ValidatedDesign,
    table: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<PopulationMoments> {
    check_plots(design)?;
    if table.nrows() != design.n() || table.ncols() != 4 {
        return Err(Error::Dimension("potential table must be N x 4".into()));
    }
    let (y_plot, y_bar) = plot_and_grand_means(design, table);
    let (s_ht, s_haj) = between(design, &y_plot, &y_bar, &y_plot, &y_bar);
    let mut s_w = Vec::with_capacity(design.w());
    let mut h_w = Vec::with_capacity(design.w());
    let mut psi = DMatrix::zeros(4, 4);
    for w in 0..design.w() {
        let sw = within(design, w, table, &y_plot, table, &y_plot);
        let hw = hw_matrix(design, w);
        psi += hw.component_mul(&sw) / design.m(w) as f64;
        s_w.push(sw);
        h_w.push(hw);
    }
    psi /= design.w() as f64;
    let covariates = covariate_moments(design, x)?;
    let cross = cross_moments(design, &covariates.centered, table)?;
    Ok(PopulationMoments {
        y_bar: [y_bar[0], y_bar[1], y_bar[2], y_bar[3]],
        s_ht,
        s_haj,
        s_w,
        psi,
        h: h_matrix(design),
        h_w,
        covariates,
        cross,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Population,
    Estimated,
}

/// Joint covariance of sqrt(W) (tau_hat, tau_hat_x) with the split of the
/// effect block into the part explained by covariate contrasts and the rest.
#[derive(Debug, Clone)]
pub struct SigmaBlocks {
    pub sigma_tt: DMatrix<f64>,
    /// 3 x 3L.
    pub sigma_tx: DMatrix<f64>,
    pub sigma_xx: DMatrix<f64>,
    pub xx_factor: RangeFactor,
    pub parallel: DMatrix<f64>,
    /// sigma_tt - parallel before PSD clamping.
    pub perp_raw: DMatrix<f64>,
    /// PSD-clamped residual block.
    pub perp: DMatrix<f64>,
    pub flavor: Flavor,
    pub provenance: Provenance,
}

impl SigmaBlocks {
    pub fn assemble(
        sigma_tt: DMatrix<f64>,
        sigma_tx: DMatrix<f64>,
        xx_factor: RangeFactor,
        flavor: Flavor,
        provenance: Provenance,
    ) -> Result<Self> {
        let parallel = if xx_factor.rank == 0 {
            DMatrix::zeros(3, 3)
        } else {
            let half = &sigma_tx * &xx_factor.inv_sqrt_range;
            crate::numkernels::symmetrize(&(&half * half.transpose()))
        };
        let sigma_xx = xx_factor.matrix.clone();
        let perp_raw = &sigma_tt - &parallel;
        let perp = clamp_psd(&perp_raw)?;
        Ok(Self {
            sigma_tt,
            sigma_tx,
            sigma_xx,
            xx_factor,
            parallel,
            perp_raw,
            perp,
            flavor,
            provenance,
        })
    }

    pub fn l(&self) -> usize {
        self.sigma_xx.nrows() / 3
    }
}

pub fn sigma_population(design: &ValidatedDesign, moments: &PopulationMoments, flavor: Flavor) -> Result<SigmaBlocks> {
    let g = contrast_matrix();
    let inner = moments.h.component_mul(moments.s_star(flavor)) + &moments.psi;
    let sigma_tt = crate::numkernels::symmetrize(&(&g * inner * g.transpose()));
    let xx = moments.covariates.sigma_factor(design, flavor, "sigma_xx")?;
    let sigma_tx = moments.cross.sigma_xt(design, flavor).transpose();
    SigmaBlocks::assemble(sigma_tt, sigma_tx, xx, flavor, Provenance::Population)
}

/// Per-plot sample means of the observed outcome in each factor-B arm, W x 2.
pub fn plot_arm_means(design: &ValidatedDesign, assignment: &Assignment, y: &DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(design.w(), 2);
    for w in 0..design.w() {
        let mut sums = [0.0; 2];
        for i in design.units(w) {
            sums[assignment.b_flat[i] as usize] += y[i];
        }
        for b in 0..2 {
            out[(w, b)] = sums[b] / design.m_arm(w, b) as f64;
        }
    }
    out
}

/// Per-arm sample analogs of S_* restricted to pairs sharing the factor-A
/// level: `out[a]` is the 2x2 block over arms (a0, a1).
pub fn s_hat_blocks(
    design: &ValidatedDesign,
    assignment: &Assignment,
    y: &DVector<f64>,
    flavor: Flavor,
) -> Result<[DMatrix<f64>; 2]> {
    design.has_variance_arms()?;
    let plot = plot_arm_means(design, assignment, y);
    let w_tot = design.w() as f64;
    // HT arm means W^-1 sum_{A_w = a} alpha_w Y_w(z) / p_a, and the HT total of 1.
    let mut ht = [[0.0; 2]; 2];
    let mut one = [0.0; 2];
    for w in 0..design.w() {
        let a = assignment.a_levels[w] as usize;
        let al = design.alpha(w);
        one[a] += al / (w_tot * design.p(a));
        for b in 0..2 {
            ht[a][b] += al * plot[(w, b)] / (w_tot * design.p(a));
        }
    }
    let mut out = [DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)];
    for w in 0..design.w() {
        let a = assignment.a_levels[w] as usize;
        let al = design.alpha(w);
        let dev: [f64; 2] = std::array::from_fn(|b| match flavor {
            Flavor::Ht => al * plot[(w, b)] - ht[a][b],
            Flavor::Hajek => al * (plot[(w, b)] - ht[a][b] / one[a]),
        });
        for b in 0..2 {
            for bp in 0..2 {
                out[a][(b, bp)] += dev[b] * dev[bp];
            }
        }
    }
    for (a, block) in out.iter_mut().enumerate() {
        *block /= design.w_arm(a) as f64 - 1.0;
    }
    Ok(out)
}

/// G blockdiag(p_0^-1 S_hat^(0), p_1^-1 S_hat^(1)) G^T.
pub fn sigma_tt_estimated(
    design: &ValidatedDesign,
    assignment: &Assignment,
    y: &DVector<f64>,
    flavor: Flavor,
) -> Result<DMatrix<f64>> {
    let blocks = s_hat_blocks(design, assignment, y, flavor)?;
    let mut inner = DMatrix::zeros(4, 4);
    for a in 0..2 {
        let mut view = inner.view_mut((2 * a, 2 * a), (2, 2));
        view += &blocks[a] / design.p(a);
    }
    let g = contrast_matrix();
    Ok(crate::numkernels::symmetrize(&(&g * inner * g.transpose())))
}

/// Per-unit inverse-probability plug-ins 1{Z_ws = z} Y_ws / p_ws(z), N x 4.
pub fn ht_unit_plugins(design: &ValidatedDesign, assignment: &Assignment, y: &DVector<f64>) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(design.n(), 4);
    for w in 0..design.w() {
        for i in design.units(w) {
            let z = assignment.z(w, i);
            u[(i, z)] = y[i] / design.p_unit(w, z);
        }
    }
    u
}

/// Estimated 3L x 3 cross block from observed outcomes and centered covariates.
pub fn sigma_xt_estimated(
    design: &ValidatedDesign,
    assignment: &Assignment,
    y: &DVector<f64>,
    xc: &DMatrix<f64>,
    flavor: Flavor,
) -> Result<DMatrix<f64>> {
    let u = ht_unit_plugins(design, assignment, y);
    Ok(cross_moments(design, xc, &u)?.sigma_xt(design, flavor))
}

/// Estimated blocks: block-diagonal effect covariance, plug-in cross block and
/// the population covariate block (covariates are fully observed).
pub fn sigma_estimated(
    design: &ValidatedDesign,
    assignment: &Assignment,
    y: &DVector<f64>,
    covariates: &CovariateMoments,
    flavor: Flavor,
) -> Result<SigmaBlocks> {
    let sigma_tt = sigma_tt_estimated(design, assignment, y, flavor)?;
    let sigma_tx = sigma_xt_estimated(design, assignment, y, &covariates.centered, flavor)?.transpose();
    let xx = covariates.sigma_factor(design, flavor, "sigma_xx")?;
    SigmaBlocks::assemble(sigma_tt, sigma_tx, xx, flavor, Provenance::Estimated)
}
