//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's estimators or moment code.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use splitplot::design::{Assignment, DesignSpec, PlotSize};

/// Contrast rows A, B, AB over arms 00, 01, 10, 11.
pub const G: [[f64; 4]; 3] = [[-0.5, -0.5, 0.5, 0.5], [-0.5, 0.5, -0.5, 0.5], [1.0, -1.0, -1.0, 1.0]];

pub fn g_matrix() -> DMatrix<f64> {
    DMatrix::from_fn(3, 4, |i, j| G[i][j])
}

/// Plain description of a split-plot design.
#[derive(Debug, Clone)]
pub struct Plan {
    pub w1: usize,
    pub m: Vec<usize>,
    pub m1: Vec<usize>,
}

impl Plan {
    pub fn toy() -> Self {
        Self {
            w1: 2,
            m: vec![2, 2, 3, 3],
            m1: vec![1, 1, 1, 2],
        }
    }

    pub fn tiny() -> Self {
        Self {
            w1: 1,
            m: vec![2, 2],
            m1: vec![1, 1],
        }
    }

    pub fn spec(&self) -> DesignSpec {
        DesignSpec {
            w1: self.w1,
            plot_sizes: self
                .m
                .iter()
                .zip(&self.m1)
                .map(|(&m, &m1)| PlotSize { m, m1 })
                .collect(),
        }
    }

    pub fn w(&self) -> usize {
        self.m.len()
    }

    pub fn n(&self) -> usize {
        self.m.iter().sum()
    }

    /// Whole plot of each unit in flattened order.
    pub fn plot_of(&self) -> Vec<usize> {
        self.m
            .iter()
            .enumerate()
            .flat_map(|(w, &m)| std::iter::repeat_n(w, m))
            .collect()
    }

    pub fn pa(&self, a: usize) -> f64 {
        let w1 = self.w1 as f64;
        let w = self.w() as f64;
        if a == 1 {
            w1 / w
        } else {
            (w - w1) / w
        }
    }

    pub fn qb(&self, w: usize, b: usize) -> f64 {
        let m1 = self.m1[w] as f64;
        let m = self.m[w] as f64;
        if b == 1 {
            m1 / m
        } else {
            (m - m1) / m
        }
    }

    pub fn alpha(&self, w: usize) -> f64 {
        self.m[w] as f64 * self.w() as f64 / self.n() as f64
    }
}

/// Every 0/1 vector of length n with k ones, by bitmask.
pub fn k_subsets(n: usize, k: usize) -> Vec<Vec<u8>> {
    (0u32..(1 << n))
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..n).map(|i| ((mask >> i) & 1) as u8).collect())
        .collect()
}

/// All assignments of the plan, flattened factor-B levels, equal probability.
pub fn all_assignments(plan: &Plan) -> Vec<Assignment> {
    let mut out: Vec<Assignment> = k_subsets(plan.w(), plan.w1)
        .into_iter()
        .map(|a| Assignment {
            a_levels: a,
            b_flat: Vec::new(),
        })
        .collect();
    for w in 0..plan.w() {
        let choices = k_subsets(plan.m[w], plan.m1[w]);
        out = out
            .into_iter()
            .flat_map(|asg| {
                choices.iter().map(move |c| {
                    let mut next = asg.clone();
                    next.b_flat.extend_from_slice(c);
                    next
                })
            })
            .collect();
    }
    out
}

pub fn unit_arm(plan: &Plan, asg: &Assignment, i: usize) -> usize {
    let w = plan.plot_of()[i];
    2 * asg.a_levels[w] as usize + asg.b_flat[i] as usize
}

/// HT arm means N^-1 sum_{S(z)} Y / (p_a q_wb) and the HT totals of 1.
pub fn ht_means(plan: &Plan, asg: &Assignment, y: &[f64]) -> ([f64; 4], [f64; 4]) {
    let plots = plan.plot_of();
    let n = plan.n() as f64;
    let mut sums = [0.0; 4];
    let mut ones = [0.0; 4];
    for (i, &yi) in y.iter().enumerate() {
        let w = plots[i];
        let a = asg.a_levels[w] as usize;
        let b = asg.b_flat[i] as usize;
        let p = plan.pa(a) * plan.qb(w, b);
        sums[2 * a + b] += yi / p;
        ones[2 * a + b] += 1.0 / p;
    }
    (sums.map(|s| s / n), ones.map(|o| o / n))
}

pub fn hajek_means(plan: &Plan, asg: &Assignment, y: &[f64]) -> [f64; 4] {
    let (m, o) = ht_means(plan, asg, y);
    std::array::from_fn(|z| m[z] / o[z])
}

pub fn contrast(y: &[f64; 4]) -> [f64; 3] {
    std::array::from_fn(|e| (0..4).map(|z| G[e][z] * y[z]).sum())
}

/// Columns of an N x p matrix centered at their grand mean.
pub fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut c in out.column_iter_mut() {
        let mean = c.sum() / c.len() as f64;
        c.add_scalar_mut(-mean);
    }
    out
}

/// Deterministic potential-outcome table and covariates for the plan,
/// heterogeneous in plot, unit and arm.
pub fn toy_population(plan: &Plan, l: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let plots = plan.plot_of();
    let n = plan.n();
    let table = DMatrix::from_fn(n, 4, |i, z| {
        let w = plots[i] as f64;
        (1.3 * i as f64 + 0.7 * z as f64).sin()
            + 0.5 * w * (z as f64 - 1.5)
            + z as f64
            + 0.2 * (i * i) as f64 / n as f64
    });
    let x = DMatrix::from_fn(n, l, |i, j| {
        let w = plots[i] as f64;
        (2.1 * i as f64 + j as f64).cos() + 0.3 * w * (j as f64 + 1.0) + 0.1 * ((i * (j + 2)) % 5) as f64
    });
    (table, x)
}

/// Exact mean and W-scaled covariance of a statistic over the enumeration.
pub struct Moments {
    pub mean: DVector<f64>,
    pub w_cov: DMatrix<f64>,
}

pub fn enumeration_moments(plan: &Plan, stat: impl Fn(&Assignment) -> DVector<f64>) -> Moments {
    let all = all_assignments(plan);
    let p = 1.0 / all.len() as f64;
    let stats: Vec<DVector<f64>> = all.iter().map(stat).collect();
    let k = stats[0].len();
    let mut mean = DVector::zeros(k);
    for s in &stats {
        mean += s * p;
    }
    let mut cov = DMatrix::zeros(k, k);
    for s in &stats {
        let d = s - &mean;
        cov += &d * d.transpose() * p;
    }
    Moments {
        mean,
        w_cov: cov * plan.w() as f64,
    }
}

/// Stacked (tau_hat_ht, tau_hat_ht,x) for one assignment, x already centered.
pub fn ht_joint(plan: &Plan, asg: &Assignment, table: &DMatrix<f64>, xc: &DMatrix<f64>) -> DVector<f64> {
    let n = plan.n();
    let y: Vec<f64> = (0..n).map(|i| table[(i, unit_arm(plan, asg, i))]).collect();
    let l = xc.ncols();
    let mut out = DVector::zeros(3 + 3 * l);
    let t = contrast(&ht_means(plan, asg, &y).0);
    for e in 0..3 {
        out[e] = t[e];
    }
    for j in 0..l {
        let col: Vec<f64> = xc.column(j).iter().copied().collect();
        let c = contrast(&ht_means(plan, asg, &col).0);
        for e in 0..3 {
            out[3 + e * l + j] = c[e];
        }
    }
    out
}

/// Sample analog of the HT effect covariance from observed outcomes:
/// G blockdiag(S^(0)/p_0, S^(1)/p_1) G^T with S^(a) the sample covariance
/// over plots at A = a of alpha_w times the per-arm plot means.
pub fn naive_sigma_tt_hat(plan: &Plan, asg: &Assignment, y: &[f64]) -> DMatrix<f64> {
    let plots = plan.plot_of();
    let w_n = plan.w();
    let mut cells = vec![[0.0; 2]; w_n];
    for (i, &yi) in y.iter().enumerate() {
        let w = plots[i];
        let b = asg.b_flat[i] as usize;
        let size = if b == 1 { plan.m1[w] } else { plan.m[w] - plan.m1[w] };
        cells[w][b] += yi / size as f64;
    }
    let mut inner = DMatrix::zeros(4, 4);
    for a in 0..2 {
        let members: Vec<usize> = (0..w_n).filter(|&w| asg.a_levels[w] as usize == a).collect();
        let k = members.len() as f64;
        let vals: Vec<[f64; 2]> = members
            .iter()
            .map(|&w| [plan.alpha(w) * cells[w][0], plan.alpha(w) * cells[w][1]])
            .collect();
        let mean = [0, 1].map(|b| vals.iter().map(|v| v[b]).sum::<f64>() / k);
        for b in 0..2 {
            for bp in 0..2 {
                let s: f64 = vals.iter().map(|v| (v[b] - mean[b]) * (v[bp] - mean[bp])).sum::<f64>() / (k - 1.0);
                inner[(2 * a + b, 2 * a + bp)] = s / plan.pa(a);
            }
        }
    }
    let g = g_matrix();
    &g * inner * g.transpose()
}

/// Between-plot HT covariance of the potential outcomes:
/// (W-1)^-1 sum_w (alpha_w Ybar_w - Ybar)(alpha_w Ybar_w - Ybar)^T.
pub fn naive_s_ht(plan: &Plan, table: &DMatrix<f64>) -> DMatrix<f64> {
    let plots = plan.plot_of();
    let w_n = plan.w();
    let mut plot_means = vec![[0.0; 4]; w_n];
    for i in 0..plan.n() {
        for z in 0..4 {
            plot_means[plots[i]][z] += table[(i, z)] / plan.m[plots[i]] as f64;
        }
    }
    let grand: [f64; 4] = std::array::from_fn(|z| table.column(z).sum() / plan.n() as f64);
    let mut s = DMatrix::zeros(4, 4);
    for (w, pm) in plot_means.iter().enumerate() {
        let d: [f64; 4] = std::array::from_fn(|z| plan.alpha(w) * pm[z] - grand[z]);
        for z in 0..4 {
            for zp in 0..4 {
                s[(z, zp)] += d[z] * d[zp];
            }
        }
    }
    s / (w_n as f64 - 1.0)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).amax()
}

/// Sample mean and standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}
