//! Acceptance harness. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any counted criterion fails. The full-scale simulation studies
//! take several minutes on one core.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::Plan;
use nalgebra::{DMatrix, DVector};
use splitplot::adjustment::{fit_ag_lin, fit_wls_lin};
use splitplot::design::*;
use splitplot::estimators::{arm_estimate, arm_estimate_vec, center_columns, contrast_kron, contrast_matrix, Flavor};
use splitplot::inference::{c_quantile, empirical_quantile, sample_phi, BaseDraws, LimitLawSampler};
use splitplot::moments::{
    covariate_moments, population_moments, sigma_estimated, sigma_population, sigma_tt_estimated, sigma_xt_estimated,
    SigmaBlocks,
};
use splitplot::numkernels::{chi2_quantile, kron, r_factor, standard_normal_vec, RngStream};
use splitplot::rerandomization::{build_criterion, mahalanobis};
use splitplot::simharness::*;

const SEED: u64 = 1;
const REPLICATIONS: usize = 2000;
const MC_SIZE: usize = 100_000;

#[derive(Default)]
struct Report {
    failed: Vec<String>,
}

impl Report {
    fn check(&mut self, id: &str, ok: bool, detail: String) {
        println!("{} {id} {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(id.into());
        }
    }
}

fn main() {
    let mut report = Report::default();
    let start = Instant::now();
    enumeration_exactness(&mut report);
    identities(&mut report);
    distributional(&mut report);
    let whole = run_scenario(Scenario::Sim1WholePlot);
    let varying = run_scenario(Scenario::Sim1Varying);
    let supp = run_scenario(Scenario::SuppS1);
    rerandomization_study(&mut report, &whole);
    projection_and_lin_studies(&mut report, &varying, &supp);
    determinism(&mut report);
    println!(
        "summary: {} failed {:?}, {:.0}s",
        report.failed.len(),
        report.failed,
        start.elapsed().as_secs_f64()
    );
    if !report.failed.is_empty() {
        std::process::exit(1);
    }
}

fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn enumeration_exactness(report: &mut Report) {
    let t0 = Instant::now();
    let l = 2;
    let plan = Plan::toy();
    let d = validate_design(plan.spec()).unwrap();
    let (table, x) = common::toy_population(&plan, l);
    let pop = population_moments(&d, &table, &x).unwrap();
    let xc = common::centered(&x);
    let all = common::all_assignments(&plan);
    let m = common::enumeration_moments(&plan, |asg| common::ht_joint(&plan, asg, &table, &xc));

    let tau = pop.tau();
    let bias_t = (0..3).map(|e| (m.mean[e] - tau[e]).abs()).fold(0.0, f64::max);
    let bias_x = m.mean.rows(3, 3 * l).amax();

    let g = contrast_matrix();
    let want_tt = &g * (pop.h.component_mul(&pop.s_ht) + &pop.psi) * g.transpose();
    let gl = contrast_kron(l);
    let want_xx = &gl * (kron(&pop.h, &pop.covariates.s_ht) + &pop.covariates.psi) * gl.transpose();
    let err_tt = max_diff(&m.w_cov.view((0, 0), (3, 3)).into_owned(), &want_tt);
    let err_xx = max_diff(&m.w_cov.view((3, 3), (3 * l, 3 * l)).into_owned(), &want_xx);

    let blocks = sigma_population(&d, &pop, Flavor::Ht).unwrap();
    let p = 1.0 / all.len() as f64;
    let mut e_tt = DMatrix::zeros(3, 3);
    let mut e_xt = DMatrix::zeros(3 * l, 3);
    for asg in &all {
        let y = observe(&table, &d, asg);
        e_tt += sigma_tt_estimated(&d, asg, &y, Flavor::Ht).unwrap() * p;
        e_xt += sigma_xt_estimated(&d, asg, &y, &pop.covariates.centered, Flavor::Ht).unwrap() * p;
    }
    let err_cross = max_diff(&e_xt, &blocks.sigma_tx.transpose());
    let err_gap = max_diff(&(e_tt - &blocks.sigma_tt), &(&g * &pop.s_ht * g.transpose()));
    let secs = t0.elapsed().as_secs_f64();

    let n = all.len();
    report.check(
        "1a",
        bias_t < 1e-12 && bias_x < 1e-12,
        format!(
            "enumeration ({n} assignments): effect bias {bias_t:.1e}, covariate contrast mean {bias_x:.1e} (tol 1e-12)"
        ),
    );
    report.check(
        "1b",
        err_tt < 1e-10 && err_xx < 1e-10,
        format!(
            "enumeration: scaled effect covariance error {err_tt:.1e}, covariate block error {err_xx:.1e} (tol 1e-10)"
        ),
    );
    report.check(
        "1c",
        err_cross < 1e-10,
        format!("enumeration: cross plug-in bias {err_cross:.1e} (tol 1e-10)"),
    );
    report.check(
        "1d",
        err_gap < 1e-10 && n <= 10_000 && secs < 1.0,
        format!("enumeration: plug-in excess equals between-plot term, error {err_gap:.1e} (tol 1e-10), {secs:.3}s"),
    );
}

struct Realization {
    plan: Plan,
    d: ValidatedDesign,
    asg: Assignment,
    y: DVector<f64>,
    v: DMatrix<f64>,
}

fn realization(seed: u64) -> Realization {
    let mut rng = RngStream::new(seed, 40).rng();
    let w = 12 + (seed as usize % 20);
    let mut buf = vec![0.0; 2 * w];
    standard_normal_vec(&mut buf, &mut rng);
    let m: Vec<usize> = (0..w).map(|k| 2 + (buf[k].abs() * 3.0) as usize).collect();
    let m1: Vec<usize> = (0..w).map(|k| 1 + (buf[w + k].abs() as usize).min(m[k] - 2)).collect();
    let plan = Plan { w1: w / 3, m, m1 };
    let d = validate_design(plan.spec()).unwrap();
    let asg = randomize(&d, RngStream::new(seed, 41));
    let n = d.n();
    let mut noise = vec![0.0; 3 * n];
    standard_normal_vec(&mut noise, &mut rng);
    let plots = plan.plot_of();
    let v = DMatrix::from_fn(n, 2, |i, j| noise[3 * i + j] + 0.4 * (plots[i] % 3) as f64);
    let y = DVector::from_fn(n, |i, _| {
        let z = common::unit_arm(&plan, &asg, i) as f64;
        2.0 + z + (1.0 - 0.2 * z) * v[(i, 0)] + 0.5 * v[(i, 1)] + noise[3 * i + 2]
    });
    Realization { plan, d, asg, y, v }
}

fn identities(report: &mut Report) {
    let (mut no_cov, mut lin, mut shift) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..25 {
        let r = realization(seed);
        let empty = DMatrix::zeros(r.d.n(), 0);
        let ag = fit_ag_lin(&r.d, &r.asg, &r.y, &empty, false).unwrap();
        let wls = fit_wls_lin(&r.d, &r.asg, &r.y, &empty).unwrap();
        let (ht, _) = common::ht_means(&r.plan, &r.asg, r.y.as_slice());
        let haj = common::hajek_means(&r.plan, &r.asg, r.y.as_slice());
        for z in 0..4 {
            no_cov = no_cov.max((ag.beta[z] - ht[z]).abs()).max((wls.beta[z] - haj[z]).abs());
        }

        let (vc, _) = center_columns(&r.v);
        for (fit, flavor) in [
            (fit_ag_lin(&r.d, &r.asg, &r.y, &r.v, false).unwrap(), Flavor::Ht),
            (fit_wls_lin(&r.d, &r.asg, &r.y, &r.v).unwrap(), Flavor::Hajek),
        ] {
            let ym = arm_estimate_vec(&r.y, &r.asg, &r.d, flavor).unwrap();
            let vm = arm_estimate(&vc, &r.asg, &r.d, flavor).unwrap();
            for z in 0..4 {
                let want = ym.values[z] - vm.values.row(z).transpose().dot(&fit.gamma[z]);
                lin = lin.max((fit.beta[z] - want).abs());
            }
        }

        let c = 37.5 * (seed as f64 - 12.0);
        let a = arm_estimate_vec(&r.y, &r.asg, &r.d, Flavor::Hajek).unwrap();
        let b = arm_estimate_vec(&r.y.add_scalar(c), &r.asg, &r.d, Flavor::Hajek).unwrap();
        for z in 0..4 {
            shift = shift.max((b.values[z] - a.values[z] - c).abs() / (1.0 + c.abs()));
        }
    }
    let ones = contrast_matrix() * DVector::from_element(4, 1.0);
    let kron_ones = contrast_kron(3) * DVector::from_element(12, 1.0);
    report.check(
        "2a",
        no_cov < 1e-10,
        format!(
            "25 realizations: covariate-free regression intercepts vs HT and Hajek arm means {no_cov:.1e} (tol 1e-10)"
        ),
    );
    report.check(
        "2b",
        lin < 1e-8,
        format!("25 realizations: intercepts equal adjusted arm means {lin:.1e} (tol 1e-8)"),
    );
    report.check(
        "2c",
        shift < 1e-12,
        format!(
            "25 realizations: Hajek arm means shift with the outcome, relative rounding error {shift:.1e} (tol 1e-12)"
        ),
    );
    report.check(
        "2d",
        ones.iter().all(|&v| v == 0.0) && kron_ones.iter().all(|&v| v == 0.0),
        "contrast rows annihilate constants exactly".into(),
    );
}

fn sample_cov(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut r in c.row_iter_mut() {
        r -= &mean;
    }
    c.transpose() * &c / (n - 1.0)
}

fn chi2_3_density(x: f64) -> f64 {
    x.sqrt() * (-x / 2.0).exp() / (2.0f64.powf(1.5) * std::f64::consts::PI.sqrt() / 2.0)
}

/// Standard error of the empirical p-quantile of chi-square(3) from n draws.
fn quantile_se(p: f64, n: usize) -> f64 {
    let q = chi2_quantile(3, p).unwrap();
    (p * (1.0 - p) / n as f64).sqrt() / chi2_3_density(q)
}

/// Estimated blocks from the first randomization of the full-scale population
/// with a within-plot covariate whose residual block is positive semidefinite.
fn estimated_sim1_blocks() -> (SigmaBlocks, GeneratedPopulation) {
    let pop = generate_population(&Scenario::Sim1Varying.params(), RngStream::new(SEED, 1)).unwrap();
    let d = validate_design(pop.spec.clone()).unwrap();
    let xm = covariate_moments(&d, &pop.data.x).unwrap();
    for s in 0.. {
        let asg = randomize(&d, RngStream::new(SEED, 60).substream(s));
        let y = pop.data.observed(&d, &asg);
        if let Ok(b) = sigma_estimated(&d, &asg, &y, &xm, Flavor::Ht) {
            return (b, pop);
        }
    }
    unreachable!()
}

fn distributional(report: &mut Report) {
    let t0 = Instant::now();
    let n_ball = 500_000;
    let mut worst = 0.0f64;
    for l in [1, 2] {
        let k = 3 * l;
        let d = chi2_quantile(k, 0.01).unwrap();
        let base = BaseDraws::generate(n_ball, k, d, RngStream::new(SEED, 70 + l as u64)).unwrap();
        let r = r_factor(k, d).unwrap();
        let c = sample_cov(&base.zeta);
        worst = worst.max((c - DMatrix::identity(k, k) * r).amax() / r);
    }
    report.check(
        "3a",
        worst < 0.02,
        format!("truncated normal covariance vs scaled identity, dims 3 and 6, {n_ball} draws: max relative error {worst:.4} (tol 0.02)"),
    );

    let (blocks, pop) = estimated_sim1_blocks();
    let d = validate_design(pop.spec.clone()).unwrap();
    let mut rates = Vec::new();
    let draws = 20_000;
    for flavor in [Flavor::Ht, Flavor::Hajek] {
        let c = build_criterion(&d, &pop.data.x, flavor, 0.01).unwrap();
        let mut rng = RngStream::new(SEED, 80).rng();
        let hits = (0..draws)
            .filter(|_| mahalanobis(&c, &d, &randomize_with(&d, &mut rng)) <= c.threshold_d)
            .count();
        rates.push(hits as f64 / draws as f64);
    }
    report.check(
        "3b",
        rates.iter().all(|r| (0.005..=0.02).contains(r)),
        format!(
            "acceptance rate at 1% target, W=600, {draws} draws: HT {:.4}, Hajek {:.4} (range [0.005, 0.02])",
            rates[0], rates[1]
        ),
    );

    let k = blocks.xx_factor.rank;
    let thr = chi2_quantile(k, 0.01).unwrap();
    let big = BaseDraws::generate(1_000_000, k, thr, RngStream::new(SEED, 2)).unwrap();
    let sampler = LimitLawSampler::from_blocks(&blocks).unwrap();
    let want = &blocks.perp + &blocks.parallel * r_factor(k, thr).unwrap();
    let got = sample_cov(&sample_phi(&sampler, &big).unwrap());
    let rel = (&got - &want).amax() / want.diagonal().amax();
    report.check(
        "3c",
        rel < 0.03,
        format!("limit-law draw covariance vs residual plus scaled explained block, 1e6 draws: relative error {rel:.4} (tol 0.03)"),
    );

    let base = BaseDraws::generate(MC_SIZE, k, thr, RngStream::new(SEED, 2)).unwrap();
    let c_hat = c_quantile(&sampler, &base, 0.05).unwrap();
    let wald = chi2_quantile(3, 0.95).unwrap();
    let tol = 3.0 * quantile_se(0.95, MC_SIZE);
    // Coupling to the covariates can only raise this quantile, so the bound
    // relies on the coupling being weak; the total-metric check below holds
    // regardless.
    report.check(
        "3d",
        c_hat <= wald + tol,
        format!("Monte-Carlo region quantile {c_hat:.4} vs chi-square(3) 0.95 quantile {wald:.4} + 3 MC SE {tol:.4}"),
    );
    let phi = sample_phi(&sampler, &base).unwrap();
    let inv = blocks.sigma_tt.clone().try_inverse().unwrap();
    let mut q: Vec<f64> = phi.row_iter().map(|r| (r * &inv * r.transpose())[(0, 0)]).collect();
    let c_total = empirical_quantile(&mut q, 0.95);
    report.check(
        "3e",
        c_total <= wald + tol && c_hat >= wald - tol,
        format!(
            "same draws measured in the total-covariance metric: quantile {c_total:.4} <= {:.4}; residual-metric quantile {c_hat:.4} >= {:.4}",
            wald + tol,
            wald - tol
        ),
    );
    println!("info distributional checks took {:.0}s", t0.elapsed().as_secs_f64());
}

fn run_scenario(scenario: Scenario) -> StudyMetrics {
    let name = scenario.name();
    let mut cfg = StudyConfig::new(scenario, SEED);
    cfg.replications = REPLICATIONS;
    cfg.mc_size = MC_SIZE;
    cfg.threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let m = run_study(&cfg).unwrap();
    let mut by_cell: BTreeMap<String, usize> = BTreeMap::new();
    for f in &m.failures {
        let key = format!(
            "{}/{}",
            f.estimator.clone().unwrap_or_else(|| "design".into()),
            f.scheme
        );
        *by_cell.entry(key).or_default() += 1;
    }
    println!(
        "info {name}: R={REPLICATIONS}, tau={:?}, acceptance {:?}, {:.0}s, failed replications {by_cell:?}",
        m.tau, m.acceptance, m.wall_clock_secs
    );
    m
}

/// Monte-Carlo standard error of a sample standard deviation from R draws.
fn sd_se(sd: f64, r: usize) -> f64 {
    sd / (2.0 * (r as f64 - 1.0)).sqrt()
}

fn sd_of(m: &StudyMetrics, estimator: &str, scheme: &str, effect: &str) -> (f64, f64) {
    let row = m
        .row(estimator, scheme, effect)
        .unwrap_or_else(|| panic!("missing {estimator}/{scheme}/{effect}"));
    let sd = row.sd.unwrap();
    (sd, sd_se(sd, m.replications))
}

fn rerandomization_scheme(flavor: &str) -> &'static str {
    if flavor == "ht" {
        "m_ht"
    } else {
        "m_haj"
    }
}

fn coverage_check(report: &mut Report, id: &str, studies: &[&StudyMetrics]) {
    let worst = studies
        .iter()
        .flat_map(|m| {
            m.rows
                .iter()
                .map(|r| (r.coverage, format!("{}/{}/{}", r.estimator, r.scheme, r.effect)))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    report.check(
        id,
        studies.iter().all(|m| m.rows.iter().all(|r| r.coverage >= 0.93)),
        format!(
            "all 95% interval coverages >= 0.93: minimum {:.4} at {}",
            worst.0, worst.1
        ),
    );
}

fn rerandomization_study(report: &mut Report, m: &StudyMetrics) {
    let mut ok = true;
    let mut detail = Vec::new();
    for flavor in ["ht", "haj"] {
        for effect in EFFECT_NAMES {
            let (rr, _) = sd_of(m, flavor, rerandomization_scheme(flavor), effect);
            let (cr, _) = sd_of(m, flavor, "rnd", effect);
            ok &= rr < cr;
            detail.push(format!("{flavor} {effect} {rr:.4}<{cr:.4}"));
        }
    }
    report.check(
        "4a",
        ok,
        format!(
            "whole-plot covariate: rerandomization sd below complete randomization: {}",
            detail.join(", ")
        ),
    );

    let mut ok = true;
    let mut detail = Vec::new();
    for effect in EFFECT_NAMES {
        let (best, best_se) = sd_of(m, "ht.L.a", "m_ht", effect);
        let mut margin = f64::INFINITY;
        for row in m.rows.iter().filter(|r| r.effect == effect) {
            let sd = row.sd.unwrap();
            let tol = 2.0 * (best_se.powi(2) + sd_se(sd, m.replications).powi(2)).sqrt();
            margin = margin.min(sd + tol - best);
        }
        ok &= margin >= 0.0;
        detail.push(format!("{effect} sd {best:.4} slack {margin:.4}"));
    }
    report.check(
        "4b",
        ok,
        format!("whole-plot covariate: alpha-augmented HT regression under rerandomization has the smallest sd within 2 MC SE: {}", detail.join(", ")),
    );

    coverage_check(report, "4c", &[m]);

    let mut ok = true;
    let mut worst = (f64::INFINITY, String::new());
    for row in &m.rows {
        let label = if row.scheme == "rnd" {
            format!("{}.rnd", row.estimator)
        } else {
            row.estimator.clone()
        };
        let s = m.cell_samples(&label).unwrap();
        let j = EFFECT_NAMES.iter().position(|e| *e == row.effect).unwrap();
        let se: Vec<f64> = s.se.iter().map(|v| v[j]).collect();
        let (_, se_sd) = common::mean_sd(&se);
        let sd = row.sd.unwrap();
        let tol = ((se_sd * se_sd) / se.len() as f64 + sd_se(sd, m.replications).powi(2)).sqrt();
        let z = row.ese.unwrap() / tol;
        ok &= z >= -2.0;
        if z < worst.0 {
            worst = (z, format!("{label}/{}", row.effect));
        }
    }
    report.check(
        "4d",
        ok,
        format!(
            "whole-plot covariate: mean standard error minus sd >= -2 MC SE: smallest {:.2} SE at {}",
            worst.0, worst.1
        ),
    );
}

fn projection_and_lin_studies(report: &mut Report, varying: &StudyMetrics, supp: &StudyMetrics) {
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, m, flavors) in [
        ("sim1-varying", varying, &["ht", "haj"][..]),
        ("supp-s1", supp, &["ht"][..]),
    ] {
        for &flavor in flavors {
            let scheme = rerandomization_scheme(flavor);
            for effect in EFFECT_NAMES {
                let (p, p_se) = sd_of(m, &format!("{flavor}.P"), scheme, effect);
                let (u, u_se) = sd_of(m, flavor, scheme, effect);
                let tol = 2.0 * (p_se * p_se + u_se * u_se).sqrt();
                ok &= p <= u + tol;
                detail.push(format!("{name} {flavor} {effect} {p:.4}<={u:.4}+{tol:.4}"));
            }
        }
    }
    report.check(
        "5a",
        ok,
        format!(
            "projection adjustment never increases sd under rerandomization (2 MC SE): {}",
            detail.join(", ")
        ),
    );

    let mut best = (f64::NEG_INFINITY, "");
    for effect in EFFECT_NAMES {
        let (l, l_se) = sd_of(supp, "ht.L", "m_ht", effect);
        let (u, u_se) = sd_of(supp, "ht", "m_ht", effect);
        let z = (l - u) / (l_se * l_se + u_se * u_se).sqrt();
        if z > best.0 {
            best = (z, effect);
        }
    }
    report.check(
        "5b",
        best.0 >= 2.0,
        format!(
            "heterogeneous within-plot covariate: HT regression adjustment raises sd for effect {} by {:.2} MC SE (need >= 2)",
            best.1, best.0
        ),
    );
    coverage_check(report, "5c", &[varying, supp]);
}

fn determinism(report: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (k, threads) in [1, 1, 2].into_iter().enumerate() {
        let mut cfg = StudyConfig::new(
            Scenario::Custom(GeneratorParams {
                w: 120,
                w1: 36,
                ..Scenario::Sim1Varying.params()
            }),
            SEED,
        );
        cfg.replications = 40;
        cfg.mc_size = 5_000;
        cfg.threads = threads;
        let m = run_study(&cfg).unwrap();
        let path = dir.path().join(format!("metrics{k}.csv"));
        export_metrics(&m, &path, ExportFormat::Csv).unwrap();
        let json = dir.path().join(format!("metrics{k}.json"));
        export_metrics(&m, &json, ExportFormat::Json).unwrap();
        bytes.push((std::fs::read(&path).unwrap(), std::fs::read(&json).unwrap()));
    }
    let same = bytes.windows(2).all(|w| w[0] == w[1]);
    report.check(
        "6",
        same,
        "identical config and seed give byte-identical CSV and JSON metrics across runs and thread counts".into(),
    );
}
