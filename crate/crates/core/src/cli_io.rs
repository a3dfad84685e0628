//! Command-line surface: run configuration, unit-level CSV ingestion, the
//! subcommand drivers and their output formats.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector, Vector3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adjustment::{adjusted_estimate, fit_ag_lin, fit_wls_lin, heterogeneity_diagnostics, projection_estimate};
use crate::design::{
    enumerate_assignments, observe, randomize, validate_design, Assignment, DesignSpec, Outcomes, PlotSize,
    PopulationData, ValidatedDesign, DEFAULT_ENUMERATION_CAP,
};
use crate::error::{Error, Result};
use crate::estimators::{
    arm_estimate, arm_estimate_vec, contrast_matrix, covariate_contrasts, effect_estimate, Flavor,
};
use crate::inference::{
    joint_region, per_effect_intervals, BaseDraws, ConfidenceRegion, EffectInterval, LimitLawSampler, MarginalLaw,
    RegionKind, Scheme, DEFAULT_MC_SIZE,
};
use crate::moments::{
    covariate_moments, population_moments, sigma_estimated, sigma_tt_estimated, sigma_xt_estimated, SigmaBlocks,
};
use crate::numkernels::{chi2_quantile, RngStream};
use crate::rerandomization::{build_criterion, rerandomize, DEFAULT_MAX_DRAWS};
use crate::simharness::{
    export_metrics, metrics_csv, metrics_json, run_study, Cell, ExportFormat, GeneratorParams, Scenario, StudyConfig,
    EFFECT_NAMES,
};

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_XI: f64 = 0.05;
pub const DEFAULT_REPLICATIONS: usize = 2000;
/// Seed used by `oracle-check` when none is given.
pub const DEFAULT_ORACLE_SEED: u64 = 1;
/// Stream of the assignment drawn by `randomize` and `rerandomize`.
const STREAM_ASSIGNMENT: u64 = 0;
/// Stream of the limit-law draws used by `analyze`.
const STREAM_ANALYSIS_DRAWS: u64 = 2;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AdjustmentName {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "L")]
    L,
    #[serde(rename = "L.a")]
    LAlpha,
    #[serde(rename = "P")]
    P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    #[default]
    Rnd,
    Rerandomized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FormatName {
    #[default]
    Csv,
    Json,
}

impl From<FormatName> for ExportFormat {
    fn from(f: FormatName) -> Self {
        match f {
            FormatName::Csv => ExportFormat::Csv,
            FormatName::Json => ExportFormat::Json,
        }
    }
}

/// Column mapping of a unit-level CSV file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSchema {
    pub path: PathBuf,
    #[serde(default = "default_whole_plot")]
    pub whole_plot: String,
    #[serde(default = "default_subplot")]
    pub subplot: String,
    /// Design covariates used by the balance criterion.
    #[serde(default)]
    pub x: Vec<String>,
    /// Analysis covariates for regression adjustment and projection; defaults to `x`.
    pub v: Option<Vec<String>>,
    pub outcome: Option<String>,
    /// Potential outcome columns ordered 00, 01, 10, 11.
    pub potential: Option<[String; 4]>,
    /// Observed factor-A level per row (constant within whole plots).
    pub a: Option<String>,
    /// Observed factor-B level per row.
    pub b: Option<String>,
    /// Per-row count of factor-B treated subplots in the row's whole plot.
    pub m1: Option<String>,
    /// Number of whole plots at A = 1.
    pub w1: Option<usize>,
    #[serde(default)]
    pub drop_degenerate: bool,
}

fn default_whole_plot() -> String {
    "whole_plot_id".into()
}

fn default_subplot() -> String {
    "subplot_id".into()
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub adjustment: AdjustmentName,
    #[serde(default)]
    pub scheme: SchemeName,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub scenario: String,
    /// Generator constants for `scenario = "custom"`.
    pub generator: Option<GeneratorParams>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub cells: Option<Vec<String>>,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub format: FormatName,
    pub out: Option<PathBuf>,
}

fn default_replications() -> usize {
    DEFAULT_REPLICATIONS
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default = "default_mc_size")]
    pub mc_size: usize,
    #[serde(default = "default_max_draws")]
    pub max_draws: u64,
    #[serde(default = "default_flavor")]
    pub flavor: Flavor,
    /// Inline design.
    pub design: Option<DesignSpec>,
    /// JSON design sidecar.
    pub design_file: Option<PathBuf>,
    pub data: Option<DataSchema>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub simulate: Option<SimulateConfig>,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_xi() -> f64 {
    DEFAULT_XI
}

fn default_mc_size() -> usize {
    DEFAULT_MC_SIZE
}

fn default_max_draws() -> u64 {
    DEFAULT_MAX_DRAWS
}

fn default_flavor() -> Flavor {
    Flavor::Ht
}

/// Parses and validates a TOML run configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a configuration file; relative paths inside it resolve against the
/// file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let Some(p) = cfg.design_file.as_mut() {
        resolve(p);
    }
    if let Some(d) = cfg.data.as_mut() {
        resolve(&mut d.path);
    }
    if let Some(p) = cfg.simulate.as_mut().and_then(|s| s.out.as_mut()) {
        resolve(p);
    }
    Ok(cfg)
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("xi", self.xi)?;
        if self.mc_size == 0 {
            return Err(Error::Config("mc_size must be positive".into()));
        }
        if self.max_draws == 0 {
            return Err(Error::Config("max_draws must be positive".into()));
        }
        if self.design.is_some() && self.design_file.is_some() {
            return Err(Error::Config("give either [design] or design_file, not both".into()));
        }
        if let Some(d) = &self.data {
            if d.outcome.is_some() && d.potential.is_some() {
                return Err(Error::Config(
                    "give either data.outcome or data.potential, not both".into(),
                ));
            }
        }
        if let Some(s) = &self.simulate {
            if s.replications == 0 {
                return Err(Error::Config("simulate.replications must be positive".into()));
            }
            if s.threads == 0 {
                return Err(Error::Config("simulate.threads must be positive".into()));
            }
            scenario_from(&s.scenario, s.generator.as_ref())?;
        }
        Ok(())
    }

    /// Explicit design from `[design]` or the sidecar file, if any.
    pub fn explicit_design(&self) -> Result<Option<DesignSpec>> {
        if let Some(d) = &self.design {
            return Ok(Some(d.clone()));
        }
        match &self.design_file {
            Some(p) => Ok(Some(read_design_json(p)?)),
            None => Ok(None),
        }
    }

    /// Study configuration for the `[simulate]` section.
    pub fn study_config(&self) -> Result<StudyConfig> {
        let s = self
            .simulate
            .as_ref()
            .ok_or_else(|| Error::Config("missing [simulate] section".into()))?;
        let scenario = scenario_from(&s.scenario, s.generator.as_ref())?;
        let mut study = StudyConfig::new(scenario, self.seed);
        study.replications = s.replications;
        study.alpha = self.alpha;
        study.xi = self.xi;
        study.mc_size = self.mc_size;
        study.max_draws = self.max_draws;
        study.threads = s.threads;
        if let Some(cells) = &s.cells {
            study.cells = cells.iter().map(|c| Cell::parse(c)).collect::<Result<_>>()?;
        }
        Ok(study)
    }
}

/// Scenario by name; spelling variants such as `Sim1_WholePlot` are accepted.
pub fn scenario_from(name: &str, generator: Option<&GeneratorParams>) -> Result<Scenario> {
    let key: String = name
        .chars()
        .filter(|c| *c != '-' && *c != '_')
        .flat_map(char::to_lowercase)
        .collect();
    let scenario = match key.as_str() {
        "sim1wholeplot" => Scenario::Sim1WholePlot,
        "sim1varying" => Scenario::Sim1Varying,
        "supps1" => Scenario::SuppS1,
        "custom" => {
            let p = generator.ok_or_else(|| Error::Config("scenario `custom` needs [simulate.generator]".into()))?;
            return Ok(Scenario::Custom(p.clone()));
        }
        _ => return Scenario::from_name(name),
    };
    if generator.is_some() {
        return Err(Error::Config(format!(
            "[simulate.generator] only applies to scenario `custom`, not `{name}`"
        )));
    }
    Ok(scenario)
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_design_json(path: &Path) -> Result<DesignSpec> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// CSV ingestion

/// Unit-level data grouped by whole plot in file order.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub spec: DesignSpec,
    /// N x L, unit order.
    pub x: DMatrix<f64>,
    /// N x J, unit order.
    pub v: DMatrix<f64>,
    pub outcomes: Option<Outcomes>,
    pub assignment: Option<Assignment>,
    pub whole_plot_ids: Vec<String>,
    /// Subplot id of each unit, unit order.
    pub subplot_ids: Vec<String>,
    pub warnings: Vec<String>,
}

impl Ingested {
    pub fn population(&self) -> Result<PopulationData> {
        let outcomes = self
            .outcomes
            .clone()
            .ok_or_else(|| Error::Config("data has no outcome or potential-outcome columns".into()))?;
        Ok(PopulationData {
            x: self.x.clone(),
            v: self.v.clone(),
            link: None,
            outcomes,
        })
    }
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn get(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    }
}

struct Row {
    line: u64,
    plot: String,
    subplot: String,
    fields: Vec<String>,
}

fn parse_number(row: &Row, col: usize, name: &str) -> Result<f64> {
    let s = &row.fields[col];
    let v: f64 = s.parse().map_err(|_| {
        Error::Schema(format!(
            "line {}: column `{name}` has non-numeric value `{s}`",
            row.line
        ))
    })?;
    if !v.is_finite() {
        return Err(Error::Schema(format!(
            "line {}: column `{name}` is not finite",
            row.line
        )));
    }
    Ok(v)
}

fn parse_level(row: &Row, col: usize, name: &str) -> Result<u8> {
    match row.fields[col].as_str() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Schema(format!(
            "line {}: column `{name}` must be 0 or 1, got `{other}`",
            row.line
        ))),
    }
}

/// Reads a unit-level CSV. Columns are addressed by name, rows are grouped by
/// whole plot in order of first appearance. The design comes from `design`
/// when given, otherwise from the data (`m1` column or observed `b`, and
/// `w1` or observed `a`).
pub fn ingest_csv(path: &Path, schema: &DataSchema, design: Option<&DesignSpec>) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Schema(e.to_string()))?.clone();
    let mut index = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if index.insert(h.to_string(), i).is_some() {
            return Err(Error::Schema(format!("duplicate column `{h}`")));
        }
    }
    let cols = Columns { index };
    let plot_col = cols.get(&schema.whole_plot)?;
    let sub_col = cols.get(&schema.subplot)?;
    let x_cols: Vec<usize> = schema.x.iter().map(|c| cols.get(c)).collect::<Result<_>>()?;
    let v_names = schema.v.clone().unwrap_or_else(|| schema.x.clone());
    let v_cols: Vec<usize> = v_names.iter().map(|c| cols.get(c)).collect::<Result<_>>()?;
    let y_col = schema.outcome.as_deref().map(|c| cols.get(c)).transpose()?;
    let pot_cols = match &schema.potential {
        Some(names) => Some(names.iter().map(|c| cols.get(c)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let a_col = schema.a.as_deref().map(|c| cols.get(c)).transpose()?;
    let b_col = schema.b.as_deref().map(|c| cols.get(c)).transpose()?;
    let m1_col = schema.m1.as_deref().map(|c| cols.get(c)).transpose()?;

    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Schema(e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        rows.push(Row {
            line,
            plot: rec[plot_col].to_string(),
            subplot: rec[sub_col].to_string(),
            fields: rec.iter().map(str::to_string).collect(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    // Group by whole plot, first appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups
            .entry(r.plot.clone())
            .or_insert_with(|| {
                order.push(r.plot.clone());
                Vec::new()
            })
            .push(i);
    }
    for id in &order {
        let mut seen = std::collections::HashSet::new();
        for &i in &groups[id] {
            if !seen.insert(rows[i].subplot.as_str()) {
                return Err(Error::Schema(format!(
                    "line {}: duplicate subplot `{}` in whole plot `{id}`",
                    rows[i].line, rows[i].subplot
                )));
            }
        }
    }

    let mut warnings = Vec::new();
    let mut explicit = design.cloned();
    if let Some(d) = &explicit {
        if d.plot_sizes.len() != order.len() {
            return Err(Error::CountMismatch(format!(
                "design has {} whole plots, data has {}",
                d.plot_sizes.len(),
                order.len()
            )));
        }
    }
    let mut kept = Vec::with_capacity(order.len());
    let mut kept_sizes = Vec::new();
    for (w, id) in order.iter().enumerate() {
        if groups[id].len() == 1 {
            if !schema.drop_degenerate {
                return Err(Error::DegenerateWholePlot { plot: id.clone() });
            }
            warnings.push(format!("dropped whole plot `{id}` with a single subplot"));
            continue;
        }
        kept.push(id.clone());
        if let Some(d) = &explicit {
            kept_sizes.push(d.plot_sizes[w]);
        }
    }
    if let Some(d) = explicit.as_mut() {
        d.plot_sizes = kept_sizes;
    }

    // Unit order: whole plots in `kept` order, rows in file order within each.
    let units: Vec<usize> = kept.iter().flat_map(|id| groups[id].iter().copied()).collect();
    let n = units.len();
    let column = |cs: &[usize], names: &[String]| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(n, cs.len());
        for (i, &r) in units.iter().enumerate() {
            for (j, (&c, name)) in cs.iter().zip(names).enumerate() {
                m[(i, j)] = parse_number(&rows[r], c, name)?;
            }
        }
        Ok(m)
    };
    let x = column(&x_cols, &schema.x)?;
    let v = column(&v_cols, &v_names)?;
    let outcomes = if let Some(c) = y_col {
        let y = column(
            &[c],
            std::slice::from_ref(schema.outcome.as_ref().expect("outcome column named")),
        )?;
        Some(Outcomes::Observed(DVector::from_column_slice(y.as_slice())))
    } else if let Some(cs) = &pot_cols {
        let names = schema.potential.as_ref().expect("potential columns named");
        Some(Outcomes::Potential(column(cs, names)?))
    } else {
        None
    };

    // Observed assignment, if present.
    let mut a_levels = Vec::new();
    if let Some(c) = a_col {
        let name = schema.a.as_deref().unwrap_or_default();
        for id in &kept {
            let g = &groups[id];
            let a = parse_level(&rows[g[0]], c, name)?;
            for &r in g {
                if parse_level(&rows[r], c, name)? != a {
                    return Err(Error::Schema(format!(
                        "line {}: factor A varies within whole plot `{id}`",
                        rows[r].line
                    )));
                }
            }
            a_levels.push(a);
        }
    }
    let mut b_flat = Vec::new();
    if let Some(c) = b_col {
        let name = schema.b.as_deref().unwrap_or_default();
        for &r in &units {
            b_flat.push(parse_level(&rows[r], c, name)?);
        }
    }

    let spec = match explicit {
        Some(mut d) => {
            for (w, id) in kept.iter().enumerate() {
                if d.plot_sizes[w].m != groups[id].len() {
                    return Err(Error::CountMismatch(format!(
                        "whole plot `{id}` has {} rows, design expects {}",
                        groups[id].len(),
                        d.plot_sizes[w].m
                    )));
                }
            }
            if kept.len() < order.len() && a_col.is_some() {
                d.w1 = a_levels.iter().filter(|&&a| a == 1).count();
            }
            d
        }
        None => {
            let mut sizes = Vec::with_capacity(kept.len());
            let mut offset = 0;
            for id in &kept {
                let g = &groups[id];
                let m = g.len();
                let m1 = if let Some(c) = m1_col {
                    let name = schema.m1.as_deref().unwrap_or_default();
                    let first = parse_number(&rows[g[0]], c, name)?;
                    for &r in g {
                        if parse_number(&rows[r], c, name)? != first {
                            return Err(Error::Schema(format!(
                                "line {}: column `{name}` varies within whole plot `{id}`",
                                rows[r].line
                            )));
                        }
                    }
                    if first < 0.0 || first.fract() != 0.0 {
                        return Err(Error::Schema(format!("column `{name}` must hold counts, got {first}")));
                    }
                    first as usize
                } else if b_col.is_some() {
                    b_flat[offset..offset + m].iter().filter(|&&b| b == 1).count()
                } else {
                    return Err(Error::Schema(
                        "cannot determine factor-B arm sizes: give data.m1, data.b or a design".into(),
                    ));
                };
                sizes.push(PlotSize { m, m1 });
                offset += m;
            }
            let w1 = match (schema.w1, a_col) {
                (Some(w1), _) => w1,
                (None, Some(_)) => a_levels.iter().filter(|&&a| a == 1).count(),
                (None, None) => {
                    return Err(Error::Schema(
                        "cannot determine the factor-A arm size: give data.w1, data.a or a design".into(),
                    ))
                }
            };
            DesignSpec { w1, plot_sizes: sizes }
        }
    };

    let assignment = match (a_col, b_col) {
        (Some(_), Some(_)) => {
            let design = validate_design(spec.clone())?;
            let asg = Assignment { a_levels, b_flat };
            asg.check(&design)?;
            Some(asg)
        }
        (None, None) => None,
        _ => {
            return Err(Error::Schema(
                "an observed assignment needs both data.a and data.b".into(),
            ))
        }
    };

    Ok(Ingested {
        spec,
        x,
        v,
        outcomes,
        assignment,
        whole_plot_ids: kept,
        subplot_ids: units.iter().map(|&r| rows[r].subplot.clone()).collect(),
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Outputs

/// Assignment table with columns whole_plot_id, subplot_id, a, b.
pub fn assignment_csv(design: &ValidatedDesign, asg: &Assignment, ids: Option<(&[String], &[String])>) -> String {
    let mut out = String::from("whole_plot_id,subplot_id,a,b\n");
    for w in 0..design.w() {
        for (k, i) in design.units(w).enumerate() {
            let (plot, sub) = match ids {
                Some((p, s)) => (p[w].clone(), s[i].clone()),
                None => (w.to_string(), k.to_string()),
            };
            out.push_str(&format!("{plot},{sub},{},{}\n", asg.a_levels[w], asg.b_flat[i]));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct IntervalReport {
    pub effect: &'static str,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionReport {
    pub kind: &'static str,
    pub radius: f64,
    /// Shape matrix, row-major; the region is W (tau_hat - tau)^T shape^-1 (tau_hat - tau) <= radius.
    pub shape: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub flavor: Flavor,
    pub adjustment: AdjustmentName,
    pub scheme: SchemeName,
    pub w: usize,
    pub n: usize,
    pub xi: f64,
    pub intervals: Vec<IntervalReport>,
    pub region: RegionReport,
    pub heterogeneity: Option<crate::adjustment::HeterogeneityDiagnostics>,
    pub warnings: Vec<String>,
}

fn region_report(r: &ConfidenceRegion) -> RegionReport {
    RegionReport {
        kind: match r.kind {
            RegionKind::WaldChi2 => "wald_chi2",
            RegionKind::MonteCarloQuantile => "monte_carlo_quantile",
        },
        radius: r.radius,
        shape: std::array::from_fn(|i| std::array::from_fn(|j| r.shape[(i, j)])),
    }
}

/// Point estimate, per-effect intervals and joint region for observed data.
pub fn analyze(cfg: &RunConfig, data: &Ingested) -> Result<AnalysisReport> {
    let design = validate_design(data.spec.clone())?;
    let asg = data
        .assignment
        .as_ref()
        .ok_or_else(|| Error::Config("analyze needs observed assignment columns data.a and data.b".into()))?;
    let y = match &data.outcomes {
        Some(Outcomes::Observed(y)) => y.clone(),
        Some(Outcomes::Potential(t)) => observe(t, &design, asg),
        None => return Err(Error::Config("analyze needs data.outcome".into())),
    };
    let flavor = cfg.flavor;
    let adjustment = cfg.analysis.adjustment;
    let scheme = cfg.analysis.scheme;
    let w = design.w();
    let mut warnings: Vec<String> = design.warnings().to_vec();
    warnings.extend(data.warnings.iter().cloned());
    let rerandomized = scheme == SchemeName::Rerandomized;
    if rerandomized && data.x.ncols() == 0 {
        return Err(Error::Config(
            "the rerandomized scheme needs design covariates data.x".into(),
        ));
    }
    if matches!(
        adjustment,
        AdjustmentName::L | AdjustmentName::LAlpha | AdjustmentName::P
    ) && data.v.ncols() == 0
    {
        return Err(Error::Config(
            "adjusted estimators need analysis covariates data.v".into(),
        ));
    }
    if adjustment == AdjustmentName::LAlpha && flavor != Flavor::Ht {
        return Err(Error::Config(
            "adjustment `L.a` is defined for the ht flavor only".into(),
        ));
    }
    let x_moments = covariate_moments(&design, &data.x)?;
    let base = if rerandomized {
        let crit = build_criterion(&design, &data.x, flavor, cfg.alpha)?;
        Some(BaseDraws::generate(
            cfg.mc_size,
            crit.rank,
            crit.threshold_d,
            RngStream::new(cfg.seed, STREAM_ANALYSIS_DRAWS),
        )?)
    } else {
        None
    };

    let (tau, intervals, region) = match adjustment {
        AdjustmentName::None => {
            let tau = effect_estimate(&arm_estimate_vec(&y, asg, &design, flavor)?)?.tau_hat;
            if rerandomized {
                let blocks = sigma_estimated(&design, asg, &y, &x_moments, flavor)?;
                limit_law_outputs(tau, &blocks, cfg.xi, w, base.as_ref().expect("draws generated"))?
            } else {
                let sigma_tt = sigma_tt_estimated(&design, asg, &y, flavor)?;
                normal_outputs(tau, &sigma_tt, cfg.xi, w)?
            }
        }
        AdjustmentName::P => {
            let v_moments = covariate_moments(&design, &data.v)?;
            let est = projection_estimate(&design, asg, &y, &v_moments, flavor)?;
            warnings.extend(est.warnings.iter().cloned());
            normal_outputs(est.tau_hat, &est.blocks.perp, cfg.xi, w)?
        }
        AdjustmentName::L | AdjustmentName::LAlpha => {
            let fit = match (adjustment, flavor) {
                (AdjustmentName::LAlpha, _) => fit_ag_lin(&design, asg, &y, &data.v, true)?,
                (_, Flavor::Ht) => fit_ag_lin(&design, asg, &y, &data.v, false)?,
                (_, Flavor::Hajek) => fit_wls_lin(&design, asg, &y, &data.v)?,
            };
            warnings.extend(fit.warnings.iter().cloned());
            let tau = fit.tau_hat();
            if rerandomized {
                let est = adjusted_estimate(&fit, &design, asg, &y, &data.v, &x_moments)?;
                limit_law_outputs(tau, &est.blocks, cfg.xi, w, base.as_ref().expect("draws generated"))?
            } else {
                let g = contrast_matrix();
                let sigma_tt = crate::numkernels::symmetrize(&(&g * &fit.vcov * g.transpose() * w as f64));
                normal_outputs(tau, &sigma_tt, cfg.xi, w)?
            }
        }
    };
    let heterogeneity = if data.v.ncols() > 0 {
        Some(heterogeneity_diagnostics(&design, &data.v)?)
    } else {
        None
    };
    Ok(AnalysisReport {
        flavor,
        adjustment,
        scheme,
        w,
        n: design.n(),
        xi: cfg.xi,
        intervals: (0..3)
            .map(|j| IntervalReport {
                effect: EFFECT_NAMES[j],
                estimate: tau[j],
                lower: intervals[j].lower,
                upper: intervals[j].upper,
                se: intervals[j].se,
            })
            .collect(),
        region: region_report(&region),
        heterogeneity,
        warnings,
    })
}

type Outputs = (Vector3<f64>, [EffectInterval; 3], ConfidenceRegion);

fn normal_outputs(tau: Vector3<f64>, cov: &DMatrix<f64>, xi: f64, w: usize) -> Result<Outputs> {
    let intervals = per_effect_intervals(&tau, MarginalLaw::Normal(cov), xi, w)?;
    let region = ConfidenceRegion::new(tau, cov, chi2_quantile(3, 1.0 - xi)?, RegionKind::WaldChi2, w as f64)?;
    Ok((tau, intervals, region))
}

fn limit_law_outputs(tau: Vector3<f64>, blocks: &SigmaBlocks, xi: f64, w: usize, base: &BaseDraws) -> Result<Outputs> {
    let sampler = LimitLawSampler::from_blocks(blocks)?;
    let intervals = per_effect_intervals(&tau, MarginalLaw::Convolution(&sampler, base), xi, w)?;
    let region = joint_region(tau, blocks, Scheme::Rerandomized, xi, w, Some(base))?;
    Ok((tau, intervals, region))
}

// ---------------------------------------------------------------------------
// Enumeration self-check

#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn scaled_error(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).amax() / want.amax().max(1.0)
}

/// Exhaustively enumerates the design's assignments for a seeded population
/// with `l` covariates and compares exact moments of the HT estimators with
/// their closed forms.
pub fn oracle_suite(spec: DesignSpec, seed: u64, l: usize) -> Result<Vec<OracleCheck>> {
    let design = validate_design(spec)?;
    design.has_variance_arms()?;
    let n = design.n();
    let mut rng = RngStream::new(seed, 0).rng();
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut table = DMatrix::zeros(n, 4);
    let mut x = DMatrix::zeros(n, l);
    for w in 0..design.w() {
        let plot: [f64; 4] = std::array::from_fn(|_| normal());
        for i in design.units(w) {
            for z in 0..4 {
                table[(i, z)] = plot[z] + normal() + z as f64;
            }
            for j in 0..l {
                x[(i, j)] = normal() + 0.5 * plot[j % 4];
            }
        }
    }
    let pop = population_moments(&design, &table, &x)?;
    let g = contrast_matrix();
    let sigma_tt = &g * (pop.h.component_mul(&pop.s_ht) + &pop.psi) * g.transpose();
    let sigma_xx = pop.covariates.sigma(&design, Flavor::Ht);
    let sigma_xt = pop.cross.sigma_xt(&design, Flavor::Ht);
    let gap = &g * &pop.s_ht * g.transpose();
    let tau = pop.tau();
    let xc = &pop.covariates.centered;

    let k = 3 + 3 * l;
    let mut mean = DVector::zeros(k);
    let mut second = DMatrix::zeros(k, k);
    let mut e_tt_hat = DMatrix::zeros(3, 3);
    let mut e_xt_hat = DMatrix::zeros(3 * l, 3);
    let mut total = 0.0;
    for (asg, prob) in enumerate_assignments(&design, DEFAULT_ENUMERATION_CAP)? {
        let y = observe(&table, &design, &asg);
        let t = effect_estimate(&arm_estimate_vec(&y, &asg, &design, Flavor::Ht)?)?.tau_hat;
        let tx = covariate_contrasts(&arm_estimate(xc, &asg, &design, Flavor::Ht)?);
        let mut joint = DVector::zeros(k);
        joint.rows_mut(0, 3).copy_from(&t);
        joint.rows_mut(3, 3 * l).copy_from(&tx);
        mean += &joint * prob;
        second += &joint * joint.transpose() * prob;
        e_tt_hat += sigma_tt_estimated(&design, &asg, &y, Flavor::Ht)? * prob;
        e_xt_hat += sigma_xt_estimated(&design, &asg, &y, xc, Flavor::Ht)? * prob;
        total += prob;
    }
    let cov = (&second - &mean * mean.transpose()) * design.w() as f64;
    let tau_m = DMatrix::from_column_slice(3, 1, tau.as_slice());
    let mean_t = DMatrix::from_column_slice(3, 1, mean.rows(0, 3).as_slice());
    let mean_x = DMatrix::from_iterator(3 * l, 1, mean.rows(3, 3 * l).iter().cloned());
    let cov_tt = cov.view((0, 0), (3, 3)).into_owned();
    let cov_xx = cov.view((3, 3), (3 * l, 3 * l)).into_owned();
    let cov_xt = cov.view((3, 0), (3 * l, 3)).into_owned();
    let check = |name, got: &DMatrix<f64>, want: &DMatrix<f64>, tolerance| {
        let max_error = scaled_error(got, want);
        OracleCheck {
            name,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    };
    Ok(vec![
        check(
            "probabilities_sum_to_one",
            &DMatrix::from_element(1, 1, total),
            &DMatrix::from_element(1, 1, 1.0),
            1e-12,
        ),
        check("ht_unbiased", &mean_t, &tau_m, 1e-12),
        check(
            "ht_covariate_contrasts_centered",
            &mean_x,
            &DMatrix::zeros(3 * l, 1),
            1e-12,
        ),
        check("ht_covariance", &cov_tt, &sigma_tt, 1e-10),
        check("ht_covariate_covariance", &cov_xx, &sigma_xx, 1e-10),
        check("ht_cross_covariance", &cov_xt, &sigma_xt, 1e-10),
        check("cross_estimator_unbiased", &e_xt_hat, &sigma_xt, 1e-10),
        check("variance_estimator_gap", &(&e_tt_hat - &sigma_tt), &gap, 1e-10),
    ])
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(
    name = "splitplot",
    version,
    about = "Design and analysis of rerandomized 2x2 split-plot experiments"
)]
struct Cli {
    /// Report errors as JSON objects {code, message, context} on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw one assignment by two-stage randomization.
    Randomize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Assignment CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw assignments until the covariate balance criterion accepts.
    Rerandomize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        max_draws: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate effects and confidence sets from observed data.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Report JSON path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte-Carlo study and write its metric table.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        mc_size: Option<usize>,
        /// Comma-separated cells such as ht.rnd,ht,ht.P.
        #[arg(long, value_delimiter = ',')]
        cells: Option<Vec<String>>,
        #[arg(long, value_enum)]
        format: Option<FormatName>,
    },
    /// Check exact enumeration moments against closed forms on a small design.
    OracleCheck {
        /// JSON design file.
        #[arg(long)]
        design: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ORACLE_SEED)]
        seed: u64,
        /// Number of covariates in the generated population.
        #[arg(long, default_value_t = 1)]
        covariates: usize,
    },
}

fn write_output(path: Option<&Path>, body: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, body).map_err(|source| Error::Io {
            path: p.display().to_string(),
            source,
        }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(body.as_bytes()).map_err(|source| Error::Io {
                path: "<stdout>".into(),
                source,
            })
        }
    }
}

fn design_and_data(cfg: &RunConfig) -> Result<(DesignSpec, Option<Ingested>)> {
    let explicit = cfg.explicit_design()?;
    match &cfg.data {
        Some(schema) => {
            let data = ingest_csv(&schema.path, schema, explicit.as_ref())?;
            Ok((data.spec.clone(), Some(data)))
        }
        None => {
            let spec =
                explicit.ok_or_else(|| Error::Config("no design: give [design], design_file or [data]".into()))?;
            Ok((spec, None))
        }
    }
}

fn warn_all(lines: &[String]) {
    for l in lines {
        eprintln!("warning: {l}");
    }
}

/// Exit code 3 reports a failed oracle check.
fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Randomize { config, seed, out } => {
            let cfg = load_config(&config)?;
            let (spec, data) = design_and_data(&cfg)?;
            let design = validate_design(spec)?;
            warn_all(design.warnings());
            if let Some(d) = &data {
                warn_all(&d.warnings);
            }
            let asg = randomize(&design, RngStream::new(seed.unwrap_or(cfg.seed), STREAM_ASSIGNMENT));
            let ids = data
                .as_ref()
                .map(|d| (d.whole_plot_ids.as_slice(), d.subplot_ids.as_slice()));
            write_output(out.as_deref(), &assignment_csv(&design, &asg, ids))?;
            Ok(0)
        }
        Command::Rerandomize {
            config,
            seed,
            alpha,
            max_draws,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(m) = max_draws {
                cfg.max_draws = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let (spec, data) = design_and_data(&cfg)?;
            let data = data.ok_or_else(|| Error::Config("rerandomize needs covariates from [data]".into()))?;
            if data.x.ncols() == 0 {
                return Err(Error::Config("rerandomize needs design covariates data.x".into()));
            }
            let design = validate_design(spec)?;
            warn_all(design.warnings());
            warn_all(&data.warnings);
            let crit = build_criterion(&design, &data.x, cfg.flavor, cfg.alpha)?;
            let r = rerandomize(
                &design,
                &crit,
                RngStream::new(cfg.seed, STREAM_ASSIGNMENT),
                cfg.max_draws,
            )?;
            eprintln!(
                "accepted after {} draws: distance {:.6e} <= threshold {:.6e} (rank {})",
                r.draws_used, r.distance, crit.threshold_d, crit.rank
            );
            let ids = Some((data.whole_plot_ids.as_slice(), data.subplot_ids.as_slice()));
            write_output(out.as_deref(), &assignment_csv(&design, &r.assignment, ids))?;
            Ok(0)
        }
        Command::Analyze { config, out } => {
            let cfg = load_config(&config)?;
            let (_, data) = design_and_data(&cfg)?;
            let data = data.ok_or_else(|| Error::Config("analyze needs [data]".into()))?;
            let report = analyze(&cfg, &data)?;
            warn_all(&report.warnings);
            let mut body = serde_json::to_string_pretty(&report).map_err(|e| Error::Schema(e.to_string()))?;
            body.push('\n');
            write_output(out.as_deref(), &body)?;
            Ok(0)
        }
        Command::Simulate {
            config,
            scenario,
            seed,
            out,
            replications,
            threads,
            mc_size,
            cells,
            format,
        } => {
            let (mut study, mut fmt, mut path) = match &config {
                Some(p) => {
                    let cfg = load_config(p)?;
                    let study = cfg.study_config()?;
                    let s = cfg.simulate.as_ref().expect("study_config checked the section");
                    (study, s.format, s.out.clone())
                }
                None => {
                    let name = scenario
                        .as_deref()
                        .ok_or_else(|| Error::Config("simulate needs --scenario or --config".into()))?;
                    let seed = seed.ok_or_else(|| Error::Config("simulate needs --seed".into()))?;
                    (
                        StudyConfig::new(scenario_from(name, None)?, seed),
                        FormatName::Csv,
                        None,
                    )
                }
            };
            if config.is_some() {
                if let Some(name) = &scenario {
                    study.scenario = scenario_from(name, None)?;
                    study.cells = study.scenario.default_cells();
                }
                if let Some(s) = seed {
                    study.seed = s;
                }
            }
            if let Some(r) = replications {
                study.replications = r;
            }
            if let Some(t) = threads {
                study.threads = t;
            }
            if let Some(m) = mc_size {
                study.mc_size = m;
            }
            if let Some(c) = cells {
                study.cells = c.iter().map(|l| Cell::parse(l)).collect::<Result<_>>()?;
            }
            if let Some(f) = format {
                fmt = f;
            }
            if out.is_some() {
                path = out;
            }
            let metrics = run_study(&study)?;
            if !metrics.failures.is_empty() {
                eprintln!(
                    "warning: {} replication-level failures (listed in JSON output)",
                    metrics.failures.len()
                );
            }
            match path {
                Some(p) => export_metrics(&metrics, &p, fmt.into())?,
                None => match fmt {
                    FormatName::Csv => write_output(None, &metrics_csv(&metrics.rows))?,
                    FormatName::Json => write_output(None, &metrics_json(&metrics)?)?,
                },
            }
            Ok(0)
        }
        Command::OracleCheck {
            design,
            seed,
            covariates,
        } => {
            let spec = read_design_json(&design)?;
            let checks = oracle_suite(spec, seed, covariates)?;
            let mut all = true;
            for c in &checks {
                all &= c.passed;
                println!(
                    "{} {} max_error={:.3e} tolerance={:.0e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_error,
                    c.tolerance
                );
            }
            Ok(if all { 0 } else { 3 })
        }
    }
}

fn report_error(e: &Error, json_errors: bool) {
    if json_errors {
        let doc = json!({ "code": e.code(), "message": e.to_string(), "context": e.context() });
        eprintln!("{doc}");
        return;
    }
    eprintln!("error: {e}");
    if let Error::RejectionBudgetExceeded {
        best_distance: Some(d),
        best: Some(best),
        ..
    } = e
    {
        eprintln!("best distance seen: {d:.6e}");
        let a: String = best.a_levels.iter().map(|v| char::from(b'0' + v)).collect();
        let b: String = best.b_flat.iter().map(|v| char::from(b'0' + v)).collect();
        eprintln!("best assignment: a={a} b={b}");
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json_errors = args.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            if json_errors {
                let doc = json!({ "code": "UsageError", "message": e.to_string().trim_end(), "context": {} });
                eprintln!("{doc}");
            } else {
                eprint!("{e}");
            }
            return 2;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            report_error(&e, json_errors);
            e.exit_code()
        }
    }
}
