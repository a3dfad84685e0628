//! Split-plot designs: validation, two-stage randomization and exhaustive
//! enumeration of the assignment space.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernels::RngStream;

/// Default cap on the size of an enumerated assignment space.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSize {
    /// Number of subplots in the whole plot.
    pub m: usize,
    /// Number of subplots receiving factor-B level 1.
    pub m1: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    /// Number of whole plots receiving factor-A level 1.
    pub w1: usize,
    pub plot_sizes: Vec<PlotSize>,
}

impl DesignSpec {
    pub fn w(&self) -> usize {
        self.plot_sizes.len()
    }
}

/// A design with all derived quantities precomputed.
#[derive(Debug, Clone)]
pub struct ValidatedDesign {
    spec: DesignSpec,
    n: usize,
    arm_counts: [usize; 2],
    p: [f64; 2],
    q: Vec<[f64; 2]>,
    alpha: Vec<f64>,
    offsets: Vec<usize>,
    warnings: Vec<String>,
}

pub fn validate_design(spec: DesignSpec) -> Result<ValidatedDesign> {
    let w = spec.w();
    if w < 2 || spec.w1 < 1 || spec.w1 > w - 1 {
        return Err(Error::invalid_design(format!(
            "W1 = {} must lie in [1, W - 1] with W = {w}",
            spec.w1
        )));
    }
    let mut warnings = Vec::new();
    let mut offsets = Vec::with_capacity(w + 1);
    let mut n = 0;
    let mut singleton_arms = Vec::new();
    for (i, ps) in spec.plot_sizes.iter().enumerate() {
        if ps.m < 2 {
            return Err(Error::invalid_design(format!("whole plot {i} has M_w = {} < 2", ps.m)));
        }
        if ps.m1 < 1 || ps.m1 >= ps.m {
            return Err(Error::invalid_design(format!(
                "whole plot {i} has M_w1 = {} and M_w0 = {}; both must be at least 1",
                ps.m1,
                ps.m as i64 - ps.m1 as i64
            )));
        }
        if ps.m1 == 1 || ps.m - ps.m1 == 1 {
            singleton_arms.push(i);
        }
        offsets.push(n);
        n += ps.m;
    }
    offsets.push(n);
    if !singleton_arms.is_empty() {
        let shown: Vec<String> = singleton_arms.iter().take(10).map(|i| i.to_string()).collect();
        let more = if singleton_arms.len() > 10 { ", ..." } else { "" };
        warnings.push(format!(
            "{} whole plot(s) have a factor-B arm with a single subplot: {}{more}",
            singleton_arms.len(),
            shown.join(", ")
        ));
    }
    let w1 = spec.w1;
    let w0 = w - w1;
    if w0 < 2 || w1 < 2 {
        warnings.push(format!(
            "factor-A arms have {w0} and {w1} whole plots; variance estimation needs at least 2 each"
        ));
    }
    let nbar = n as f64 / w as f64;
    let q = spec
        .plot_sizes
        .iter()
        .map(|ps| {
            let m = ps.m as f64;
            [(ps.m - ps.m1) as f64 / m, ps.m1 as f64 / m]
        })
        .collect();
    let alpha = spec.plot_sizes.iter().map(|ps| ps.m as f64 / nbar).collect();
    Ok(ValidatedDesign {
        n,
        arm_counts: [w0, w1],
        p: [w0 as f64 / w as f64, w1 as f64 / w as f64],
        q,
        alpha,
        offsets,
        warnings,
        spec,
    })
}

impl ValidatedDesign {
    pub fn spec(&self) -> &DesignSpec {
        &self.spec
    }
    pub fn w(&self) -> usize {
        self.spec.w()
    }
    pub fn w1(&self) -> usize {
        self.spec.w1
    }
    /// Whole-plot count in factor-A arm `a`.
    pub fn w_arm(&self, a: usize) -> usize {
        self.arm_counts[a]
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn p(&self, a: usize) -> f64 {
        self.p[a]
    }
    pub fn q(&self, w: usize, b: usize) -> f64 {
        self.q[w][b]
    }
    pub fn alpha(&self, w: usize) -> f64 {
        self.alpha[w]
    }
    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }
    pub fn m(&self, w: usize) -> usize {
        self.spec.plot_sizes[w].m
    }
    /// Subplot count of factor-B arm `b` in whole plot `w`.
    pub fn m_arm(&self, w: usize, b: usize) -> usize {
        let ps = self.spec.plot_sizes[w];
        if b == 1 {
            ps.m1
        } else {
            ps.m - ps.m1
        }
    }
    pub fn mbar(&self) -> f64 {
        self.n as f64 / self.w() as f64
    }
    /// Row range of whole plot `w` in the flattened unit order.
    pub fn units(&self, w: usize) -> std::ops::Range<usize> {
        self.offsets[w]..self.offsets[w + 1]
    }
    /// Inclusion probability of a unit of whole plot `w` in arm `z = 2a + b`.
    pub fn p_unit(&self, w: usize, z: usize) -> f64 {
        self.p[z >> 1] * self.q[w][z & 1]
    }
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
    pub fn has_variance_arms(&self) -> Result<()> {
        for a in 0..2 {
            if self.arm_counts[a] < 2 {
                return Err(Error::InsufficientArms {
                    arm: a,
                    count: self.arm_counts[a],
                });
            }
        }
        Ok(())
    }
}

/// Realized treatment assignment. Factor-B levels are stored flat in unit
/// order; use [`Assignment::b_of`] for per-plot slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub a_levels: Vec<u8>,
    pub b_flat: Vec<u8>,
}

impl Assignment {
    pub fn from_ragged(design: &ValidatedDesign, a_levels: Vec<u8>, b_levels: &[Vec<u8>]) -> Result<Self> {
        if b_levels.len() != design.w() {
            return Err(Error::Dimension(format!(
                "{} factor-B lists for {} whole plots",
                b_levels.len(),
                design.w()
            )));
        }
        let b_flat = b_levels.iter().flatten().copied().collect();
        let asg = Self { a_levels, b_flat };
        asg.check(design)?;
        Ok(asg)
    }

    pub fn b_of(&self, design: &ValidatedDesign, w: usize) -> &[u8] {
        &self.b_flat[design.units(w)]
    }

    pub fn b_ragged(&self, design: &ValidatedDesign) -> Vec<Vec<u8>> {
        (0..design.w()).map(|w| self.b_of(design, w).to_vec()).collect()
    }

    /// Treatment index `2a + b` of the unit in flattened row `i` of plot `w`.
    #[inline]
    pub fn z(&self, w: usize, i: usize) -> usize {
        2 * self.a_levels[w] as usize + self.b_flat[i] as usize
    }

    /// Verifies the exact arm counts required by the design.
    pub fn check(&self, design: &ValidatedDesign) -> Result<()> {
        if self.a_levels.len() != design.w() || self.b_flat.len() != design.n() {
            return Err(Error::Dimension("assignment does not match design size".into()));
        }
        if self.a_levels.iter().chain(self.b_flat.iter()).any(|&v| v > 1) {
            return Err(Error::invalid_design("factor levels must be 0 or 1"));
        }
        let w1 = self.a_levels.iter().filter(|&&a| a == 1).count();
        if w1 != design.w1() {
            return Err(Error::CountMismatch(format!(
                "{w1} whole plots at A = 1, design requires {}",
                design.w1()
            )));
        }
        for w in 0..design.w() {
            let m1 = self.b_of(design, w).iter().filter(|&&b| b == 1).count();
            if m1 != design.m_arm(w, 1) {
                return Err(Error::CountMismatch(format!(
                    "whole plot {w} has {m1} subplots at B = 1, design requires {}",
                    design.m_arm(w, 1)
                )));
            }
        }
        Ok(())
    }
}

/// Marks a uniformly random `k`-subset of `levels` with 1 by partial Fisher-Yates.
fn choose_subset<R: Rng + ?Sized>(levels: &mut [u8], idx: &mut Vec<usize>, k: usize, rng: &mut R) {
    let n = levels.len();
    idx.clear();
    idx.extend(0..n);
    levels.iter_mut().for_each(|v| *v = 0);
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
        levels[idx[i]] = 1;
    }
}

/// Two-stage randomization into an existing buffer (avoids reallocation in
/// rerandomization loops).
pub fn randomize_into<R: Rng + ?Sized>(design: &ValidatedDesign, rng: &mut R, out: &mut Assignment) {
    let mut idx = Vec::with_capacity(design.w());
    out.a_levels.resize(design.w(), 0);
    out.b_flat.resize(design.n(), 0);
    choose_subset(&mut out.a_levels, &mut idx, design.w1(), rng);
    for w in 0..design.w() {
        let k = design.m_arm(w, 1);
        choose_subset(&mut out.b_flat[design.units(w)], &mut idx, k, rng);
    }
}

pub fn randomize_with<R: Rng + ?Sized>(design: &ValidatedDesign, rng: &mut R) -> Assignment {
    let mut out = Assignment {
        a_levels: Vec::new(),
        b_flat: Vec::new(),
    };
    randomize_into(design, rng, &mut out);
    out
}

pub fn randomize(design: &ValidatedDesign, stream: RngStream) -> Assignment {
    randomize_with(design, &mut stream.rng())
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Number of assignments the design admits.
pub fn assignment_count(design: &ValidatedDesign) -> f64 {
    let mut count = binomial(design.w(), design.w1());
    for w in 0..design.w() {
        count *= binomial(design.m(w), design.m_arm(w, 1));
    }
    count.round()
}

/// All 0/1 vectors of length `n` with exactly `k` ones, in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<u8>> {
    fn rec(n: usize, k: usize, prefix: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        let ones: usize = prefix.iter().map(|&v| v as usize).sum();
        let left = n - prefix.len();
        if ones + left < k || ones > k {
            return;
        }
        if left == 0 {
            out.push(prefix.clone());
            return;
        }
        for v in [0u8, 1] {
            prefix.push(v);
            rec(n, k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut Vec::with_capacity(n), &mut out);
    out
}

/// Iterator over every assignment with its probability.
pub struct Enumeration<'a> {
    design: &'a ValidatedDesign,
    a_sets: Vec<Vec<u8>>,
    b_sets: Vec<Vec<Vec<u8>>>,
    counter: Vec<usize>,
    prob: f64,
    done: bool,
}

impl Iterator for Enumeration<'_> {
    type Item = (Assignment, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let a_levels = self.a_sets[self.counter[0]].clone();
        let mut b_flat = Vec::with_capacity(self.design.n());
        for (w, sets) in self.b_sets.iter().enumerate() {
            b_flat.extend_from_slice(&sets[self.counter[w + 1]]);
        }
        // Mixed-radix increment, last whole plot fastest.
        let mut pos = self.counter.len();
        loop {
            if pos == 0 {
                self.done = true;
                break;
            }
            pos -= 1;
            let radix = if pos == 0 {
                self.a_sets.len()
            } else {
                self.b_sets[pos - 1].len()
            };
            self.counter[pos] += 1;
            if self.counter[pos] < radix {
                break;
            }
            self.counter[pos] = 0;
        }
        Some((Assignment { a_levels, b_flat }, self.prob))
    }
}

pub fn enumerate_assignments(design: &ValidatedDesign, cap: u64) -> Result<Enumeration<'_>> {
    let count = assignment_count(design);
    if count > cap as f64 {
        return Err(Error::SpaceTooLarge { count, cap });
    }
    let a_sets = subsets(design.w(), design.w1());
    let b_sets = (0..design.w())
        .map(|w| subsets(design.m(w), design.m_arm(w, 1)))
        .collect();
    Ok(Enumeration {
        design,
        a_sets,
        b_sets,
        counter: vec![0; design.w() + 1],
        prob: 1.0 / count,
        done: false,
    })
}

/// Per-unit outcome data.
#[derive(Debug, Clone)]
pub enum Outcomes {
    Observed(DVector<f64>),
    /// Columns ordered 00, 01, 10, 11.
    Potential(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub struct PopulationData {
    /// N x L design covariates.
    pub x: DMatrix<f64>,
    /// N x J analysis covariates.
    pub v: DMatrix<f64>,
    /// L x J linking matrix with x = C v, when known.
    pub link: Option<DMatrix<f64>>,
    pub outcomes: Outcomes,
}

impl PopulationData {
    pub fn check(&self, design: &ValidatedDesign) -> Result<()> {
        let n = design.n();
        if self.x.nrows() != n || self.v.nrows() != n {
            return Err(Error::Dimension(format!(
                "covariate rows ({}, {}) do not match N = {n}",
                self.x.nrows(),
                self.v.nrows()
            )));
        }
        match &self.outcomes {
            Outcomes::Observed(y) if y.len() != n => {
                return Err(Error::Dimension("observed outcome length differs from N".into()))
            }
            Outcomes::Potential(y) if y.nrows() != n || y.ncols() != 4 => {
                return Err(Error::Dimension("potential table must be N x 4".into()))
            }
            _ => {}
        }
        if let Some(c) = &self.link {
            if c.nrows() != self.x.ncols() || c.ncols() != self.v.ncols() {
                return Err(Error::Dimension("linking matrix must be L x J".into()));
            }
            let implied = &self.v * c.transpose();
            let gap = (&implied - &self.x).amax();
            if gap > 1e-10 {
                return Err(Error::Schema(format!("x differs from C v by {gap:e}")));
            }
        }
        Ok(())
    }

    /// Observed outcomes, revealing the potential table through `assignment`
    /// when needed.
    pub fn observed(&self, design: &ValidatedDesign, assignment: &Assignment) -> DVector<f64> {
        match &self.outcomes {
            Outcomes::Observed(y) => y.clone(),
            Outcomes::Potential(table) => observe(table, design, assignment),
        }
    }
}

pub fn observe(table: &DMatrix<f64>, design: &ValidatedDesign, assignment: &Assignment) -> DVector<f64> {
    let mut y = DVector::zeros(design.n());
    for w in 0..design.w() {
        for i in design.units(w) {
            y[i] = table[(i, assignment.z(w, i))];
        }
    }
    y
}
