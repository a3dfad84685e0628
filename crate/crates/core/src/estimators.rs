//! Contrast matrix and Horvitz-Thompson / Hajek arm-mean estimators.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::design::{Assignment, ValidatedDesign};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Flavor {
    #[serde(rename = "ht")]
    Ht,
    #[serde(rename = "haj")]
    Hajek,
}

impl Flavor {
    pub fn name(self) -> &'static str {
        match self {
            Flavor::Ht => "ht",
            Flavor::Hajek => "haj",
        }
    }
}

/// Rows: main effect of A, main effect of B, interaction. Columns: arms 00, 01, 10, 11.
pub fn contrast_matrix() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        4,
        &[
            -0.5, -0.5, 0.5, 0.5, //
            -0.5, 0.5, -0.5, 0.5, //
            1.0, -1.0, -1.0, 1.0,
        ],
    )
}

/// G ⊗ I_L, mapping a z-major stacked 4L vector to the 3L effect-major stack.
pub fn contrast_kron(l: usize) -> DMatrix<f64> {
    contrast_matrix().kronecker(&DMatrix::identity(l, l))
}

#[derive(Debug, Clone)]
pub struct ArmMeans {
    /// 4 x dim, rows in arm order 00, 01, 10, 11.
    pub values: DMatrix<f64>,
    /// HT estimates of the constant 1 per arm.
    pub normalizers: [f64; 4],
    pub flavor: Flavor,
}

/// Inverse-probability-weighted arm means of each column of `values` (N x dim).
pub fn arm_estimate(
    values: &DMatrix<f64>,
    assignment: &Assignment,
    design: &ValidatedDesign,
    flavor: Flavor,
) -> Result<ArmMeans> {
    if values.nrows() != design.n() {
        return Err(Error::Dimension(format!(
            "{} rows for N = {}",
            values.nrows(),
            design.n()
        )));
    }
    let dim = values.ncols();
    let mut sums = DMatrix::zeros(4, dim);
    let mut ones = [0.0; 4];
    let mut counts = [0usize; 4];
    for w in 0..design.w() {
        let inv = [
            1.0 / design.p_unit(w, 0),
            1.0 / design.p_unit(w, 1),
            1.0 / design.p_unit(w, 2),
            1.0 / design.p_unit(w, 3),
        ];
        for i in design.units(w) {
            let z = assignment.z(w, i);
            ones[z] += inv[z];
            counts[z] += 1;
            for j in 0..dim {
                sums[(z, j)] += inv[z] * values[(i, j)];
            }
        }
    }
    let n = design.n() as f64;
    for (z, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyArm { arm: z });
        }
    }
    let normalizers = ones.map(|o| o / n);
    let mut means = sums / n;
    if flavor == Flavor::Hajek {
        for z in 0..4 {
            let s = normalizers[z];
            means.row_mut(z).iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(ArmMeans {
        values: means,
        normalizers,
        flavor,
    })
}

pub fn arm_estimate_vec(
    y: &DVector<f64>,
    assignment: &Assignment,
    design: &ValidatedDesign,
    flavor: Flavor,
) -> Result<ArmMeans> {
    let m = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    arm_estimate(&m, assignment, design, flavor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adjustment {
    None,
    L,
    LAlpha,
    P,
}

#[derive(Debug, Clone)]
pub struct EffectEstimate {
    pub tau_hat: Vector3<f64>,
    pub flavor: Flavor,
    pub adjustment: Adjustment,
}

/// tau = G * (arm means) for a scalar outcome.
pub fn effect_estimate(arm: &ArmMeans) -> Result<EffectEstimate> {
    if arm.values.ncols() != 1 {
        return Err(Error::Dimension("effect estimate needs a scalar outcome".into()));
    }
    Ok(EffectEstimate {
        tau_hat: contrast_of(&[arm.values[0], arm.values[1], arm.values[2], arm.values[3]]),
        flavor: arm.flavor,
        adjustment: Adjustment::None,
    })
}

pub fn contrast_of(y: &[f64; 4]) -> Vector3<f64> {
    Vector3::new(
        0.5 * (y[2] + y[3] - y[0] - y[1]),
        0.5 * (y[1] + y[3] - y[0] - y[2]),
        y[0] - y[1] - y[2] + y[3],
    )
}

/// Stacked covariate contrasts (A block, B block, AB block), length 3L.
pub fn covariate_contrasts(arm: &ArmMeans) -> DVector<f64> {
    let l = arm.values.ncols();
    let mut out = DVector::zeros(3 * l);
    for j in 0..l {
        let col = [
            arm.values[(0, j)],
            arm.values[(1, j)],
            arm.values[(2, j)],
            arm.values[(3, j)],
        ];
        let c = contrast_of(&col);
        for e in 0..3 {
            out[e * l + j] = c[e];
        }
    }
    out
}

/// Subtracts column means; returns the centered matrix and the means.
pub fn center_columns(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.nrows().max(1) as f64;
    let means = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n));
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (out, means)
}
