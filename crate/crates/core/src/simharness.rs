//! Synthetic populations and replicated randomization / rerandomization
//! studies with per-estimator operating characteristics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjustment::{adjusted_estimate, fit_ag_lin, fit_wls_lin, projection_estimate, projection_point};
use crate::design::{
    observe, randomize_with, validate_design, Assignment, DesignSpec, Outcomes, PlotSize, PopulationData,
    ValidatedDesign,
};
use crate::error::{Error, Result};
use crate::estimators::{arm_estimate_vec, effect_estimate, Flavor};
use crate::inference::{per_effect_intervals, BaseDraws, EffectInterval, LimitLawSampler, MarginalLaw};
use crate::moments::{covariate_moments, sigma_estimated, sigma_tt_estimated, CovariateMoments};
use crate::numkernels::{sample_normal, sample_poisson, sample_uniform, RngStream};
use crate::rerandomization::{criterion_from_moments, rerandomize_with, BalanceCriterion};

const STREAM_POPULATION: u64 = 1;
const STREAM_BASE_DRAWS: u64 = 2;
const STREAM_REPLICATION: u64 = 3;

pub const EFFECT_NAMES: [&str; 3] = ["A", "B", "AB"];

/// How the potential outcomes depend on the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeForm {
    /// Quadratic in the unit's own covariates.
    UnitCovariates,
    /// Quadratic in the whole-plot average of the first covariate and the
    /// population average of the second.
    PlotAveraged,
}

/// Every constant of the population generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub w: usize,
    pub w1: usize,
    pub poisson_m0: f64,
    pub poisson_m1: f64,
    /// Floor applied to each Poisson subplot count.
    pub min_arm_size: usize,
    pub v_mean: f64,
    pub v_var: f64,
    /// Variance of the within-plot covariate perturbation (0 keeps covariates
    /// constant within whole plots).
    pub delta_var: f64,
    /// Indices of the analysis covariates used as design covariates.
    pub x_columns: Vec<usize>,
    pub outcome_form: OutcomeForm,
    pub theta_var: f64,
    pub noise_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "sim1-wholeplot")]
    Sim1WholePlot,
    #[serde(rename = "sim1-varying")]
    Sim1Varying,
    #[serde(rename = "supp-s1")]
    SuppS1,
    #[serde(rename = "custom")]
    Custom(GeneratorParams),
}

impl Scenario {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sim1-wholeplot" => Ok(Scenario::Sim1WholePlot),
            "sim1-varying" => Ok(Scenario::Sim1Varying),
            "supp-s1" => Ok(Scenario::SuppS1),
            other => Err(Error::Config(format!(
                "unknown scenario `{other}` (expected sim1-wholeplot, sim1-varying or supp-s1)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Sim1WholePlot => "sim1-wholeplot",
            Scenario::Sim1Varying => "sim1-varying",
            Scenario::SuppS1 => "supp-s1",
            Scenario::Custom(_) => "custom",
        }
    }

    pub fn params(&self) -> GeneratorParams {
        let sim1 = GeneratorParams {
            w: 600,
            w1: 180,
            poisson_m0: 5.0,
            poisson_m1: 3.0,
            min_arm_size: 2,
            v_mean: 0.6,
            v_var: 0.8,
            delta_var: 0.0,
            x_columns: vec![0],
            outcome_form: OutcomeForm::UnitCovariates,
            theta_var: 0.2,
            noise_half_width: 1.0,
        };
        match self {
            Scenario::Sim1WholePlot => sim1,
            Scenario::Sim1Varying => GeneratorParams { delta_var: 0.5, ..sim1 },
            Scenario::SuppS1 => GeneratorParams {
                w: 1200,
                w1: 1080,
                poisson_m0: 3.0,
                poisson_m1: 8.0,
                delta_var: 2.0,
                x_columns: vec![0, 1],
                outcome_form: OutcomeForm::PlotAveraged,
                ..sim1
            },
            Scenario::Custom(p) => p.clone(),
        }
    }

    /// Estimator/scheme cells reported for the scenario by default.
    pub fn default_cells(&self) -> Vec<Cell> {
        let labels: &[&str] = match self {
            Scenario::SuppS1 => &["ht.rnd", "ht", "ht.P", "ht.L"],
            _ => &[
                "ht.rnd", "ht", "ht.P", "ht.L", "ht.L.a", "haj.rnd", "haj", "haj.P", "haj.L",
            ],
        };
        labels.iter().map(|l| Cell::parse(l).expect("built-in label")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedPopulation {
    pub spec: DesignSpec,
    pub data: PopulationData,
    pub tau: Vector3<f64>,
}

fn draw<T>(r: Result<T>) -> T {
    r.expect("generator parameters validated")
}

fn check_params(p: &GeneratorParams) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
    if p.w < 2 || p.w1 == 0 || p.w1 >= p.w {
        return bad("need 1 <= w1 < w");
    }
    if p.min_arm_size < 1 {
        return bad("min_arm_size must be at least 1");
    }
    if !(p.poisson_m0 >= 0.0 && p.poisson_m1 >= 0.0 && p.v_var >= 0.0 && p.delta_var >= 0.0 && p.theta_var >= 0.0) {
        return bad("rates and variances must be non-negative");
    }
    if !(p.noise_half_width > 0.0) {
        return bad("noise_half_width must be positive");
    }
    if p.x_columns.is_empty() || p.x_columns.iter().any(|&c| c > 1) {
        return bad("x_columns must be a non-empty subset of {0, 1}");
    }
    Ok(())
}

/// Draws the population once; every replication of a study reuses it.
pub fn generate_population(params: &GeneratorParams, stream: RngStream) -> Result<GeneratedPopulation> {
    check_params(params)?;
    let mut rng = stream.rng();
    let w = params.w;
    let mut plot_sizes = Vec::with_capacity(w);
    for _ in 0..w {
        let m0 = (draw(sample_poisson(params.poisson_m0, &mut rng)) as usize).max(params.min_arm_size);
        let m1 = (draw(sample_poisson(params.poisson_m1, &mut rng)) as usize).max(params.min_arm_size);
        plot_sizes.push(PlotSize { m: m0 + m1, m1 });
    }
    let spec = DesignSpec {
        w1: params.w1,
        plot_sizes,
    };
    let design = validate_design(spec.clone())?;
    let n = design.n();
    let mut v = DMatrix::zeros(n, 2);
    for w in 0..w {
        let centre = [
            draw(sample_normal(params.v_mean, params.v_var, &mut rng)),
            draw(sample_normal(params.v_mean, params.v_var, &mut rng)),
        ];
        for i in design.units(w) {
            for c in 0..2 {
                v[(i, c)] = centre[c];
            }
        }
    }
    if params.delta_var > 0.0 {
        for i in 0..n {
            for c in 0..2 {
                v[(i, c)] += draw(sample_normal(0.0, params.delta_var, &mut rng));
            }
        }
    }
    let max_m = (0..w).map(|i| design.m(i)).max().unwrap_or(1) as f64;
    let theta: Vec<f64> = (0..w)
        .map(|i| {
            draw(sample_normal(
                2.0 * max_m / design.m(i) as f64,
                params.theta_var,
                &mut rng,
            ))
        })
        .collect();
    let h = params.noise_half_width;
    let noise: Vec<f64> = (0..n).map(|_| draw(sample_uniform(-h, h, &mut rng))).collect();

    let v2_mean = v.column(1).sum() / n as f64;
    let mut table = DMatrix::zeros(n, 4);
    for w in 0..w {
        let range = design.units(w);
        let v1_plot = range.clone().map(|i| v[(i, 0)]).sum::<f64>() / range.len() as f64;
        for i in range {
            let f = match params.outcome_form {
                OutcomeForm::UnitCovariates => v[(i, 0)].powi(2) + v[(i, 1)].powi(2),
                OutcomeForm::PlotAveraged => v1_plot.powi(2) + v2_mean.powi(2),
            };
            let t = theta[w];
            let e = noise[i];
            table[(i, 0)] = t + 0.5 + 2.0 * f + e;
            table[(i, 1)] = -0.5 * t + 1.0 + f + e;
            table[(i, 2)] = 0.5 * t + 1.0 - f + e;
            table[(i, 3)] = t + 2.0 + 2.0 * f + e;
        }
    }
    let link = DMatrix::from_fn(params.x_columns.len(), 2, |r, c| {
        if params.x_columns[r] == c {
            1.0
        } else {
            0.0
        }
    });
    let x = &v * link.transpose();
    let y_bar: Vec<f64> = table.column_iter().map(|c| c.sum() / n as f64).collect();
    let tau = crate::estimators::contrast_of(&[y_bar[0], y_bar[1], y_bar[2], y_bar[3]]);
    Ok(GeneratedPopulation {
        spec,
        data: PopulationData {
            x,
            v,
            link: Some(link),
            outcomes: Outcomes::Potential(table),
        },
        tau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    Ht,
    Haj,
    HtP,
    HajP,
    HtL,
    HajL,
    HtLAlpha,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ht => "ht",
            EstimatorKind::Haj => "haj",
            EstimatorKind::HtP => "ht.P",
            EstimatorKind::HajP => "haj.P",
            EstimatorKind::HtL => "ht.L",
            EstimatorKind::HajL => "haj.L",
            EstimatorKind::HtLAlpha => "ht.L.a",
        }
    }

    pub fn flavor(self) -> Flavor {
        match self {
            EstimatorKind::Ht | EstimatorKind::HtP | EstimatorKind::HtL | EstimatorKind::HtLAlpha => Flavor::Ht,
            _ => Flavor::Hajek,
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        [
            EstimatorKind::Ht,
            EstimatorKind::Haj,
            EstimatorKind::HtP,
            EstimatorKind::HajP,
            EstimatorKind::HtL,
            EstimatorKind::HajL,
            EstimatorKind::HtLAlpha,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Classic two-stage randomization.
    Rnd,
    /// Rerandomization on the HT covariate contrasts.
    MHt,
    /// Rerandomization on the Hajek covariate contrasts.
    MHaj,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Rnd => "rnd",
            SchemeKind::MHt => "m_ht",
            SchemeKind::MHaj => "m_haj",
        }
    }

    fn flavor(self) -> Option<Flavor> {
        match self {
            SchemeKind::Rnd => None,
            SchemeKind::MHt => Some(Flavor::Ht),
            SchemeKind::MHaj => Some(Flavor::Hajek),
        }
    }

    fn index(self) -> u64 {
        match self {
            SchemeKind::Rnd => 0,
            SchemeKind::MHt => 1,
            SchemeKind::MHaj => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub estimator: EstimatorKind,
    pub scheme: SchemeKind,
}

impl Cell {
    /// Parses labels such as `ht.rnd` (classic randomization) or `haj.P`
    /// (rerandomized on the matching flavor's criterion).
    pub fn parse(label: &str) -> Result<Self> {
        let (name, rnd) = match label.strip_suffix(".rnd") {
            Some(base) => (base, true),
            None => (label, false),
        };
        let estimator =
            EstimatorKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown estimator cell `{label}`")))?;
        let scheme = if rnd {
            SchemeKind::Rnd
        } else {
            match estimator.flavor() {
                Flavor::Ht => SchemeKind::MHt,
                Flavor::Hajek => SchemeKind::MHaj,
            }
        };
        Ok(Self { estimator, scheme })
    }

    pub fn label(&self) -> String {
        match self.scheme {
            SchemeKind::Rnd => format!("{}.rnd", self.estimator.name()),
            _ => self.estimator.name().to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub replications: usize,
    pub alpha: f64,
    pub xi: f64,
    pub seed: u64,
    pub cells: Vec<Cell>,
    pub mc_size: usize,
    pub max_draws: u64,
    pub threads: usize,
}

impl StudyConfig {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        let cells = scenario.default_cells();
        Self {
            scenario,
            replications: 2000,
            alpha: 0.01,
            xi: 0.05,
            seed,
            cells,
            mc_size: crate::inference::DEFAULT_MC_SIZE,
            max_draws: crate::rerandomization::DEFAULT_MAX_DRAWS,
            threads: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.cells.is_empty() {
            return Err(Error::Config("no estimator cells requested".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(Error::Config("alpha and xi must lie in (0, 1)".into()));
        }
        if self.mc_size == 0 || self.max_draws == 0 {
            return Err(Error::Config("mc_size and max_draws must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub estimator: String,
    pub scheme: String,
    pub effect: String,
    pub bias: f64,
    pub sd: Option<f64>,
    pub ese: Option<f64>,
    pub coverage: f64,
    pub mean_length: f64,
    pub acceptance_rate: f64,
}

/// Raw per-replication output of one cell.
#[derive(Debug, Clone)]
pub struct CellSamples {
    pub cell: Cell,
    /// One entry per replication with a point estimate.
    pub tau_hat: Vec<[f64; 3]>,
    /// Interval fields, one entry per replication whose intervals succeeded.
    pub se: Vec<[f64; 3]>,
    pub covered: Vec<[bool; 3]>,
    pub length: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub scheme: String,
    pub estimator: Option<String>,
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct StudyMetrics {
    pub rows: Vec<MetricRow>,
    pub samples: Vec<CellSamples>,
    pub tau: [f64; 3],
    pub failures: Vec<Failure>,
    pub replications: usize,
    /// Accepted assignments per proposal, per scheme.
    pub acceptance: Vec<(SchemeKind, f64)>,
    pub wall_clock_secs: f64,
}

/// Shared, read-only state of a study.
struct StudyContext<'a> {
    design: &'a ValidatedDesign,
    table: &'a DMatrix<f64>,
    v: &'a DMatrix<f64>,
    x_moments: CovariateMoments,
    v_moments: CovariateMoments,
    /// Limit-law draws per rerandomized scheme.
    base: Vec<(SchemeKind, BaseDraws)>,
    xi: f64,
}

type IntervalOutcome = std::result::Result<[EffectInterval; 3], String>;
type CellOutcome = std::result::Result<(Vector3<f64>, IntervalOutcome), String>;

/// Point estimate, and intervals unless their variance blocks fail.
fn evaluate_cell(
    ctx: &StudyContext<'_>,
    cell: Cell,
    asg: &Assignment,
    y: &DVector<f64>,
) -> Result<(Vector3<f64>, IntervalOutcome)> {
    let design = ctx.design;
    let w = design.w();
    let flavor = cell.estimator.flavor();
    let rerandomized = cell.scheme != SchemeKind::Rnd;
    let convolution = |blocks: &crate::moments::SigmaBlocks, tau: &Vector3<f64>| -> Result<[EffectInterval; 3]> {
        let base = ctx
            .base
            .iter()
            .find(|(k, _)| *k == cell.scheme)
            .map(|(_, b)| b)
            .expect("base draws exist for rerandomized cells");
        let sampler = LimitLawSampler::from_blocks(blocks)?;
        per_effect_intervals(tau, MarginalLaw::Convolution(&sampler, base), ctx.xi, w)
    };
    let (tau, intervals) = match cell.estimator {
        EstimatorKind::Ht | EstimatorKind::Haj => {
            let tau = effect_estimate(&arm_estimate_vec(y, asg, design, flavor)?)?.tau_hat;
            let intervals = if rerandomized {
                sigma_estimated(design, asg, y, &ctx.x_moments, flavor).and_then(|b| convolution(&b, &tau))
            } else {
                sigma_tt_estimated(design, asg, y, flavor)
                    .and_then(|s| per_effect_intervals(&tau, MarginalLaw::Normal(&s), ctx.xi, w))
            };
            (tau, intervals)
        }
        EstimatorKind::HtP | EstimatorKind::HajP => {
            let tau = projection_point(design, asg, y, &ctx.v_moments, flavor)?;
            let intervals = projection_estimate(design, asg, y, &ctx.v_moments, flavor)
                .and_then(|est| per_effect_intervals(&tau, MarginalLaw::Normal(&est.blocks.perp), ctx.xi, w));
            (tau, intervals)
        }
        EstimatorKind::HtL | EstimatorKind::HajL | EstimatorKind::HtLAlpha => {
            let fit = match cell.estimator {
                EstimatorKind::HajL => fit_wls_lin(design, asg, y, ctx.v)?,
                EstimatorKind::HtL => fit_ag_lin(design, asg, y, ctx.v, false)?,
                _ => fit_ag_lin(design, asg, y, ctx.v, true)?,
            };
            let tau = fit.tau_hat();
            let intervals = if rerandomized {
                adjusted_estimate(&fit, design, asg, y, ctx.v, &ctx.x_moments)
                    .and_then(|est| convolution(&est.blocks, &tau))
            } else {
                let g = crate::estimators::contrast_matrix();
                let s = &g * &fit.vcov * g.transpose() * w as f64;
                per_effect_intervals(&tau, MarginalLaw::Normal(&s), ctx.xi, w)
            };
            (tau, intervals)
        }
    };
    Ok((tau, intervals.map_err(|e| e.to_string())))
}

struct Replication {
    proposals: u64,
    outcome: std::result::Result<Vec<CellOutcome>, String>,
}

fn run_replication(
    ctx: &StudyContext<'_>,
    criterion: Option<&BalanceCriterion>,
    cells: &[Cell],
    stream: RngStream,
    max_draws: u64,
) -> Replication {
    let mut rng = stream.rng();
    let (asg, proposals) = match criterion {
        None => (randomize_with(ctx.design, &mut rng), 1),
        Some(c) => match rerandomize_with(ctx.design, c, &mut rng, max_draws) {
            Ok(r) => (r.assignment, r.draws_used),
            Err(e) => {
                return Replication {
                    proposals: max_draws,
                    outcome: Err(e.to_string()),
                }
            }
        },
    };
    debug_assert!(asg.check(ctx.design).is_ok());
    let y = observe(ctx.table, ctx.design, &asg);
    let outcomes = cells
        .iter()
        .map(|&cell| evaluate_cell(ctx, cell, &asg, &y).map_err(|e| e.to_string()))
        .collect();
    Replication {
        proposals,
        outcome: Ok(outcomes),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt())
}

pub fn run_study(config: &StudyConfig) -> Result<StudyMetrics> {
    config.validate()?;
    let start = Instant::now();
    let params = config.scenario.params();
    let pop = generate_population(&params, RngStream::new(config.seed, STREAM_POPULATION))?;
    let design = validate_design(pop.spec.clone())?;
    design.has_variance_arms()?;
    let table = match &pop.data.outcomes {
        Outcomes::Potential(t) => t.clone(),
        Outcomes::Observed(_) => unreachable!("generator produces potential outcomes"),
    };
    let x_moments = covariate_moments(&design, &pop.data.x)?;
    let v_moments = covariate_moments(&design, &pop.data.v)?;

    let mut schemes: Vec<SchemeKind> = config.cells.iter().map(|c| c.scheme).collect();
    schemes.sort();
    schemes.dedup();
    for cell in &config.cells {
        if let Some(f) = cell.scheme.flavor() {
            if f != cell.estimator.flavor() {
                return Err(Error::Config(format!(
                    "estimator {} cannot be analysed under scheme {}",
                    cell.estimator.name(),
                    cell.scheme.name()
                )));
            }
        }
    }
    let criteria: Vec<(SchemeKind, Option<BalanceCriterion>)> = schemes
        .iter()
        .map(|&s| {
            let c = match s.flavor() {
                None => None,
                Some(f) => Some(criterion_from_moments(&design, &x_moments, f, config.alpha)?),
            };
            Ok((s, c))
        })
        .collect::<Result<_>>()?;
    let mut base: Vec<(SchemeKind, BaseDraws)> = Vec::new();
    for (scheme, c) in &criteria {
        let Some(c) = c else { continue };
        let shared = base
            .iter()
            .find(|(_, b)| b.k() == c.rank && b.d == c.threshold_d)
            .map(|(_, b)| b.clone());
        let draws = match shared {
            Some(b) => b,
            None => BaseDraws::generate(
                config.mc_size,
                c.rank,
                c.threshold_d,
                RngStream::new(config.seed, STREAM_BASE_DRAWS),
            )?,
        };
        base.push((*scheme, draws));
    }
    let ctx = StudyContext {
        design: &design,
        table: &table,
        v: &pop.data.v,
        x_moments,
        v_moments,
        base,
        xi: config.xi,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let mut acceptance = Vec::new();
    for (scheme, criterion) in &criteria {
        let cells: Vec<Cell> = config.cells.iter().copied().filter(|c| c.scheme == *scheme).collect();
        let root = RngStream::new(config.seed, STREAM_REPLICATION).substream(scheme.index());
        let reps: Vec<Replication> = pool.install(|| {
            (0..config.replications)
                .into_par_iter()
                .map(|r| {
                    run_replication(
                        &ctx,
                        criterion.as_ref(),
                        &cells,
                        root.substream(r as u64),
                        config.max_draws,
                    )
                })
                .collect()
        });
        let total: u64 = reps.iter().map(|r| r.proposals).sum();
        let accepted = reps.iter().filter(|r| r.outcome.is_ok()).count();
        acceptance.push((*scheme, accepted as f64 / total as f64));
        let mut per_cell: Vec<CellSamples> = cells
            .iter()
            .map(|&cell| CellSamples {
                cell,
                tau_hat: Vec::new(),
                se: Vec::new(),
                covered: Vec::new(),
                length: Vec::new(),
            })
            .collect();
        for (r, rep) in reps.into_iter().enumerate() {
            match rep.outcome {
                Err(message) => failures.push(Failure {
                    scheme: scheme.name().into(),
                    estimator: None,
                    replication: r,
                    message,
                }),
                Ok(outcomes) => {
                    for (k, out) in outcomes.into_iter().enumerate() {
                        match out {
                            Ok((tau, iv)) => {
                                let s = &mut per_cell[k];
                                s.tau_hat.push([tau[0], tau[1], tau[2]]);
                                match iv {
                                    Ok(iv) => {
                                        s.se.push(iv.map(|i| i.se));
                                        s.covered.push(std::array::from_fn(|j| iv[j].contains(pop.tau[j])));
                                        s.length.push(iv.map(|i| i.length()));
                                    }
                                    Err(message) => failures.push(Failure {
                                        scheme: scheme.name().into(),
                                        estimator: Some(cells[k].estimator.name().into()),
                                        replication: r,
                                        message: format!("interval: {message}"),
                                    }),
                                }
                            }
                            Err(message) => failures.push(Failure {
                                scheme: scheme.name().into(),
                                estimator: Some(cells[k].estimator.name().into()),
                                replication: r,
                                message,
                            }),
                        }
                    }
                }
            }
        }
        samples.extend(per_cell);
    }

    // Rows in the order the cells were requested.
    let mut rows = Vec::new();
    for cell in &config.cells {
        let s = samples.iter().find(|s| s.cell == *cell).expect("every cell sampled");
        let rate = acceptance
            .iter()
            .find(|(k, _)| *k == cell.scheme)
            .map(|(_, r)| *r)
            .unwrap_or(f64::NAN);
        for j in 0..3 {
            let est: Vec<f64> = s.tau_hat.iter().map(|t| t[j]).collect();
            let n = est.len();
            let n_iv = s.se.len();
            let (bias, sd) = if n == 0 {
                (f64::NAN, None)
            } else {
                (mean(&est) - pop.tau[j], sample_sd(&est))
            };
            let (ese, coverage, mean_length) = if n_iv == 0 {
                (None, f64::NAN, f64::NAN)
            } else {
                let se: Vec<f64> = s.se.iter().map(|v| v[j]).collect();
                let len: Vec<f64> = s.length.iter().map(|v| v[j]).collect();
                let cov = s.covered.iter().filter(|c| c[j]).count() as f64 / n_iv as f64;
                (sd.map(|d| mean(&se) - d), cov, mean(&len))
            };
            rows.push(MetricRow {
                estimator: cell.estimator.name().into(),
                scheme: cell.scheme.name().into(),
                effect: EFFECT_NAMES[j].into(),
                bias,
                sd,
                ese,
                coverage,
                mean_length,
                acceptance_rate: rate,
            });
        }
    }
    Ok(StudyMetrics {
        rows,
        samples,
        tau: [pop.tau[0], pop.tau[1], pop.tau[2]],
        failures,
        replications: config.replications,
        acceptance,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

impl StudyMetrics {
    pub fn row(&self, estimator: &str, scheme: &str, effect: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.scheme == scheme && r.effect == effect)
    }

    pub fn cell_samples(&self, label: &str) -> Option<&CellSamples> {
        let cell = Cell::parse(label).ok()?;
        self.samples.iter().find(|s| s.cell == cell)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

pub const METRIC_COLUMNS: [&str; 9] = [
    "estimator",
    "scheme",
    "effect",
    "bias",
    "sd",
    "ese",
    "coverage",
    "mean_length",
    "acceptance_rate",
];

/// Decimal float with 17 significant digits; empty when absent.
pub fn format_float(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.16e}"),
        Some(x) if x.is_nan() => "NaN".into(),
        Some(x) => {
            if x > 0.0 {
                "inf".into()
            } else {
                "-inf".into()
            }
        }
        None => String::new(),
    }
}

fn parse_float(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::Schema(format!("bad float `{s}`: {e}")))
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = METRIC_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let fields = [
            r.estimator.clone(),
            r.scheme.clone(),
            r.effect.clone(),
            format_float(Some(r.bias)),
            format_float(r.sd),
            format_float(r.ese),
            format_float(Some(r.coverage)),
            format_float(Some(r.mean_length)),
            format_float(Some(r.acceptance_rate)),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    columns: [&'static str; 9],
    tau: [f64; 3],
    replications: usize,
    rows: &'a [MetricRow],
    failures: &'a [Failure],
}

/// Metric rows with the true effects and replication failures, as JSON.
pub fn metrics_json(metrics: &StudyMetrics) -> Result<String> {
    let doc = MetricsJson {
        columns: METRIC_COLUMNS,
        tau: metrics.tau,
        replications: metrics.replications,
        rows: &metrics.rows,
        failures: &metrics.failures,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::Schema(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn export_metrics(metrics: &StudyMetrics, path: &Path, format: ExportFormat) -> Result<()> {
    let body = match format {
        ExportFormat::Csv => metrics_csv(&metrics.rows),
        ExportFormat::Json => metrics_json(metrics)?,
    };
    let io = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(body.as_bytes()).map_err(io)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Schema(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Schema(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != METRIC_COLUMNS {
        return Err(Error::Schema(format!("unexpected metric header {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Schema(e.to_string()))?;
        let req = |i: usize| -> Result<f64> {
            parse_float(&rec[i])?.ok_or_else(|| Error::Schema(format!("missing {}", METRIC_COLUMNS[i])))
        };
        rows.push(MetricRow {
            estimator: rec[0].to_string(),
            scheme: rec[1].to_string(),
            effect: rec[2].to_string(),
            bias: req(3)?,
            sd: parse_float(&rec[4])?,
            ese: parse_float(&rec[5])?,
            coverage: req(6)?,
            mean_length: req(7)?,
            acceptance_rate: req(8)?,
        });
    }
    Ok(rows)
}
