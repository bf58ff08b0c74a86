//! Seeded Monte Carlo over `(a, xi)`: experiment plans, an append-only
//! checksummed ledger, moment reports, scaling fits and plot tables.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corr_field::{lattice_driver_variance, CorrelationKernel, MatrixProfile};
use crate::error::{Error, Result};
use crate::gauss_kernels::CherryTable;
use crate::lattice_noise::{time_autoconvolution, MollifierSpec, Point, ScalarField, SpaceTimeGrid};
use crate::quadrature::gauss_legendre;
use crate::regular_part::{regular_part_field, ParabolicSolverConfig};
use crate::renorm_trees::{
    pair, x1_quantity, x2_quantity, x3_quantity, LollipopEngine, RealizationSpec, TestFunction, TreeInputs, TreeOptions,
};
use crate::stats::{abs_moment_root, ols, quantile};

/// Quantity paired with `psi^lambda` in a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectTag {
    LollipopHat,
    /// Unrenormalized square `lollipop_hat^2`.
    CherryHat,
    CherryBar,
    ChickenfootBar,
    X1,
    X2,
    X3,
    RegularPartM1,
    RegularPartM2,
    RegularPartM3,
}

impl ObjectTag {
    /// Exponent of `|log lambda|` in the moment bound, where one is stated.
    pub fn target_exponent(self) -> Option<f64> {
        match self {
            ObjectTag::LollipopHat | ObjectTag::X1 => Some(1.0),
            ObjectTag::CherryBar | ObjectTag::X2 => Some(1.5),
            ObjectTag::ChickenfootBar | ObjectTag::X3 => Some(2.5),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectTag::LollipopHat => "lollipop_hat",
            ObjectTag::CherryHat => "cherry_hat",
            ObjectTag::CherryBar => "cherry_bar",
            ObjectTag::ChickenfootBar => "chickenfoot_bar",
            ObjectTag::X1 => "x1",
            ObjectTag::X2 => "x2",
            ObjectTag::X3 => "x3",
            ObjectTag::RegularPartM1 => "regular_part_m1",
            ObjectTag::RegularPartM2 => "regular_part_m2",
            ObjectTag::RegularPartM3 => "regular_part_m3",
        }
    }

    fn regular_power(self) -> Option<i32> {
        match self {
            ObjectTag::RegularPartM1 => Some(1),
            ObjectTag::RegularPartM2 => Some(2),
            ObjectTag::RegularPartM3 => Some(3),
            _ => None,
        }
    }

    fn needs_trees(self) -> bool {
        matches!(
            self,
            ObjectTag::LollipopHat | ObjectTag::CherryHat | ObjectTag::CherryBar | ObjectTag::ChickenfootBar
        )
    }
}

/// Periodic box and step bounds; each `delta` gets its own grid with
/// `dx <= min(dx_max, delta/2, lambda_min/2)` and
/// `dt <= min(dt_max, delta^2/2, lambda_min^2/2)`, padded by `delta^2`
/// before `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRule {
    pub half_width: f64,
    pub dx_max: f64,
    pub dt_max: f64,
    /// Last time on the grid; by default the end of the latest test support.
    #[serde(default)]
    pub horizon: Option<f64>,
}

impl GridRule {
    pub fn grid_for(&self, delta: f64, lambda_min: f64, t_end: f64) -> Result<SpaceTimeGrid> {
        if !(self.half_width > 0.0 && self.dx_max > 0.0 && self.dt_max > 0.0) {
            return Err(Error::Config("grid rule needs positive half_width, dx_max, dt_max".into()));
        }
        let shrink = 1.0 - 1e-9;
        let dx_bound = self.dx_max.min(delta / 2.0).min(lambda_min / 2.0) * shrink;
        let mut n = (2.0 * self.half_width / dx_bound).ceil() as usize;
        n += n % 2;
        let dx = 2.0 * self.half_width / n as f64;
        let dt = self.dt_max.min(delta * delta / 2.0).min(lambda_min * lambda_min / 2.0) * shrink;
        let pad = (delta * delta / dt).ceil() as usize;
        let end = self.horizon.unwrap_or(t_end).max(t_end);
        let steps = (end / dt - 1e-9).ceil() as usize;
        SpaceTimeGrid::new(pad + steps + 1, n, n, dt, dx, dx, -(pad as f64) * dt)
    }
}

/// One Monte Carlo study: every object is paired with every test function
/// `psi^lambda` centred at every site, on the same realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub objects: Vec<ObjectTag>,
    pub p: Vec<u32>,
    pub lambdas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub realizations: usize,
    pub base_seed: u64,
    pub grid: GridRule,
    pub kernel: CorrelationKernel,
    pub profile: MatrixProfile,
    /// Base points `(t, x, y)` of the test functions.
    pub sites: Vec<[f64; 3]>,
    pub engine: LollipopEngine,
    #[serde(default)]
    pub solver: Option<ParabolicSolverConfig>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.p.is_empty() || self.lambdas.is_empty() || self.deltas.is_empty() || self.sites.is_empty()
        {
            return Err(Error::Config("plan needs objects, p, lambdas, deltas and sites".into()));
        }
        if let Some(p) = self.p.iter().find(|p| !(1..=3).contains(*p) && **p != 4) {
            return Err(Error::Config(format!("moment order {p} not supported")));
        }
        let e_inv = (-1.0f64).exp();
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && **l <= e_inv + 1e-15)) {
            return Err(Error::Config(format!("lambda {l} outside (0, 1/e]")));
        }
        if let Some(d) = self.deltas.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return Err(Error::Config(format!("delta {d} outside (0, 1)")));
        }
        if let Some(s) = self.sites.iter().find(|s| s[0] < 0.0) {
            return Err(Error::Config(format!("site {s:?} lies before t = 0")));
        }
        for d in 0..self.deltas.len() {
            let grid = self.grid_for(d)?;
            for t in self.tests() {
                t?.check_on(&grid)?;
            }
        }
        Ok(())
    }

    fn lambda_min(&self) -> f64 {
        self.lambdas.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn t_end(&self) -> f64 {
        let lmax = self.lambdas.iter().copied().fold(0.0, f64::max);
        self.sites.iter().map(|s| s[0]).fold(0.0, f64::max) + lmax * lmax
    }

    pub fn grid_for(&self, delta_index: usize) -> Result<SpaceTimeGrid> {
        self.grid.grid_for(self.deltas[delta_index], self.lambda_min(), self.t_end())
    }

    pub fn realization_spec(&self, delta_index: usize) -> Result<RealizationSpec> {
        Ok(RealizationSpec {
            grid: self.grid_for(delta_index)?,
            mollifier: MollifierSpec::new(self.deltas[delta_index])?,
            kernel: self.kernel,
            profile: self.profile,
        })
    }

    /// Test functions in `(site, lambda)` order.
    fn tests(&self) -> impl Iterator<Item = Result<TestFunction>> + '_ {
        self.sites
            .iter()
            .flat_map(move |s| self.lambdas.iter().map(move |&l| TestFunction::new(l, Point::new(s[0], s[1], s[2]))))
    }

    /// Position of `(object, site, lambda)` in a sample row.
    pub fn value_index(&self, object: usize, site: usize, lambda: usize) -> usize {
        (object * self.sites.len() + site) * self.lambdas.len() + lambda
    }

    pub fn values_per_row(&self) -> usize {
        self.objects.len() * self.sites.len() * self.lambdas.len()
    }
}

/// Pairings of all objects with all test functions for one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub delta_index: usize,
    pub realization: usize,
    pub values: Vec<f64>,
    /// Largest pointwise deviation from the renormalization identities.
    pub identity_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerRow {
    Plan { plan: ExperimentPlan },
    Sample(SampleRow),
}

/// `E^{1/p} |(object, psi^lambda)|^p` for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub object: ObjectTag,
    pub site: usize,
    pub p: u32,
    pub lambda: f64,
    pub delta: f64,
    pub estimate: f64,
    pub se: f64,
    pub realizations: usize,
    pub base_seed: u64,
    pub wall_seconds: f64,
}

/// Parsed ledger contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub plan: Option<ExperimentPlan>,
    pub samples: Vec<SampleRow>,
}

impl Ledger {
    /// Pairings of `object` with `psi^lambda` at `site` over the realizations of one `delta`.
    pub fn values(&self, object: ObjectTag, site: usize, lambda_index: usize, delta_index: usize) -> Result<Vec<f64>> {
        let plan = self.plan.as_ref().ok_or_else(|| Error::Config("ledger has no plan".into()))?;
        let o = plan
            .objects
            .iter()
            .position(|x| *x == object)
            .ok_or_else(|| Error::Config(format!("object {} not in plan", object.name())))?;
        let idx = plan.value_index(o, site, lambda_index);
        Ok(self
            .samples
            .iter()
            .filter(|s| s.delta_index == delta_index)
            .map(|s| s.values[idx])
            .collect())
    }

    pub fn reports(&self) -> Vec<MomentReport> {
        let Some(plan) = &self.plan else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (d, &delta) in plan.deltas.iter().enumerate() {
            let rows: Vec<&SampleRow> = self.samples.iter().filter(|s| s.delta_index == d).collect();
            if rows.is_empty() {
                continue;
            }
            for (o, &object) in plan.objects.iter().enumerate() {
                for site in 0..plan.sites.len() {
                    for (l, &lambda) in plan.lambdas.iter().enumerate() {
                        let idx = plan.value_index(o, site, l);
                        let vals: Vec<f64> = rows.iter().map(|r| r.values[idx]).collect();
                        for &p in &plan.p {
                            let m = abs_moment_root(&vals, p as f64);
                            out.push(MomentReport {
                                object,
                                site,
                                p,
                                lambda,
                                delta,
                                estimate: m.estimate,
                                se: m.se,
                                realizations: vals.len(),
                                base_seed: plan.base_seed,
                                wall_seconds: 0.0,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

fn checksum(payload: &str) -> String {
    hex::encode(Sha256::digest(payload.as_bytes()))
}

fn encode_row(row: &LedgerRow) -> Result<String> {
    // keys are sorted by the default map, so the payload is canonical
    let value = serde_json::to_value(row).map_err(|e| Error::Io(e.to_string()))?;
    let payload = serde_json::to_string(&value).map_err(|e| Error::Io(e.to_string()))?;
    let sum = checksum(&payload);
    Ok(format!("{{\"row\":{payload},\"sha256\":\"{sum}\"}}"))
}

fn decode_row(line: &str, number: usize) -> Result<LedgerRow> {
    let corrupt = |reason: &str| Error::LedgerCorrupt {
        line: number,
        reason: reason.into(),
    };
    let payload = line
        .strip_prefix("{\"row\":")
        .and_then(|rest| rest.rsplit_once(",\"sha256\":\""))
        .and_then(|(payload, tail)| tail.strip_suffix("\"}").map(|sum| (payload, sum)));
    let (payload, sum) = payload.ok_or_else(|| corrupt("malformed row"))?;
    if checksum(payload) != sum {
        return Err(corrupt("checksum mismatch"));
    }
    serde_json::from_str(payload).map_err(|e| corrupt(&e.to_string()))
}

/// Reads and verifies every row.
pub fn read_ledger(path: &Path) -> Result<Ledger> {
    let file = File::open(path)?;
    let mut plan = None;
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match decode_row(&line, n + 1)? {
            LedgerRow::Plan { plan: p } => {
                if plan.is_some() {
                    return Err(Error::LedgerCorrupt {
                        line: n + 1,
                        reason: "second plan row".into(),
                    });
                }
                plan = Some(p);
            }
            LedgerRow::Sample(s) => {
                if plan.is_none() {
                    return Err(Error::LedgerCorrupt {
                        line: n + 1,
                        reason: "sample before plan".into(),
                    });
                }
                samples.push(s);
            }
        }
    }
    Ok(Ledger { plan, samples })
}

pub fn ledger_path(out_dir: &Path) -> PathBuf {
    out_dir.join("ledger.jsonl")
}

/// Per-`delta` state shared by the realizations of that cell.
struct Cell {
    spec: RealizationSpec,
    tests: Vec<TestFunction>,
    table: Option<CherryTable>,
    test_fields: Vec<ScalarField>,
}

fn prepare_cell(plan: &ExperimentPlan, d: usize) -> Result<Cell> {
    let spec = plan.realization_spec(d)?;
    let tests: Vec<TestFunction> = plan.tests().collect::<Result<_>>()?;
    let needs_trees = plan.objects.iter().any(|o| o.needs_trees());
    let table = if needs_trees && !plan.kernel.is_zero() {
        let sd = lattice_driver_variance(&plan.kernel, &spec.grid).sqrt();
        Some(CherryTable::build(&spec.grid, &plan.profile, &spec.mollifier, (-8.0 * sd, 8.0 * sd), 24)?)
    } else {
        None
    };
    let needs_fields = plan.objects.iter().any(|o| matches!(o, ObjectTag::X1 | ObjectTag::X2));
    let test_fields = if needs_fields {
        tests.iter().map(|t| ScalarField::from_fn(spec.grid, |z| t.eval(z))).collect()
    } else {
        Vec::new()
    };
    Ok(Cell {
        spec,
        tests,
        table,
        test_fields,
    })
}

fn not_computed() -> Error {
    Error::Config("requested quantity was not computed".into())
}

fn evaluate(plan: &ExperimentPlan, cell: &Cell, d: usize, r: usize) -> Result<SampleRow> {
    let inputs = TreeInputs::sample(&cell.spec, plan.base_seed, r as u64)?;
    let trees = if plan.objects.iter().any(|o| o.needs_trees()) {
        Some(inputs.trees(
            &cell.spec,
            TreeOptions {
                engine: plan.engine,
                cherry_table: cell.table.as_ref(),
            },
        )?)
    } else {
        None
    };
    let regular = if plan.objects.iter().any(|o| o.regular_power().is_some()) {
        let nodes = match plan.engine {
            LollipopEngine::Spectral { nodes } => nodes,
            LollipopEngine::Direct => 16,
        };
        Some(regular_part_field(
            &inputs.coeff,
            &inputs.xi_delta,
            &plan.solver.unwrap_or_default(),
            nodes,
        )?)
    } else {
        None
    };
    let mut values = vec![0.0; plan.values_per_row()];
    let n_l = plan.lambdas.len();
    for (o, object) in plan.objects.iter().enumerate() {
        let field = match object {
            ObjectTag::CherryHat => trees.as_ref().map(|t| {
                let sq = t.lollipop_hat.values.iter().map(|v| v * v).collect();
                ScalarField::from_values(t.lollipop_hat.grid, sq)
            }),
            ObjectTag::RegularPartM1 | ObjectTag::RegularPartM2 | ObjectTag::RegularPartM3 => regular.as_ref().map(|f| {
                let m = object.regular_power().unwrap_or(1);
                ScalarField::from_values(f.grid, f.values.iter().map(|v| v.powi(m)).collect())
            }),
            _ => None,
        }
        .transpose()?;
        for (q, test) in cell.tests.iter().enumerate() {
            let (site, l) = (q / n_l, q % n_l);
            let v = match object {
                ObjectTag::LollipopHat => pair(&trees.as_ref().ok_or_else(not_computed)?.lollipop_hat, test)?,
                ObjectTag::CherryBar => pair(&trees.as_ref().ok_or_else(not_computed)?.cherry_bar, test)?,
                ObjectTag::ChickenfootBar => pair(&trees.as_ref().ok_or_else(not_computed)?.chickenfoot_bar, test)?,
                ObjectTag::X1 => x1_quantity(&cell.test_fields[q], &inputs.coeff, &inputs.xi_delta)?,
                ObjectTag::X2 => x2_quantity(&cell.test_fields[q], &inputs.coeff, &inputs.xi_delta, &cell.spec.mollifier)?,
                ObjectTag::X3 => x3_quantity(test, &inputs.coeff, &inputs.xi_delta, &cell.spec.mollifier)?,
                _ => pair(field.as_ref().ok_or_else(not_computed)?, test)?,
            };
            values[plan.value_index(o, site, l)] = v;
        }
    }
    Ok(SampleRow {
        delta_index: d,
        realization: r,
        values,
        identity_residual: trees.as_ref().map_or(0.0, |t| t.identity_residual()),
    })
}

/// Runs (or resumes) a plan, appending one checksummed row per realization
/// to `out_dir/ledger.jsonl`. Rows are written in `(delta, realization)`
/// order, so an interrupted run resumed later yields the same file.
pub fn run_plan(plan: &ExperimentPlan, out_dir: &Path, budget_seconds: Option<f64>) -> Result<Vec<MomentReport>> {
    let start = Instant::now();
    if plan.realizations == 0 {
        return Ok(Vec::new());
    }
    plan.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let path = ledger_path(out_dir);
    let mut done = BTreeSet::new();
    let mut fresh = true;
    if path.exists() {
        let ledger = read_ledger(&path)?;
        match &ledger.plan {
            Some(p) if p == plan => fresh = false,
            Some(_) => return Err(Error::Config(format!("{} belongs to a different plan", path.display()))),
            None => {}
        }
        done.extend(ledger.samples.iter().map(|s| (s.delta_index, s.realization)));
    }
    let mut file = if fresh {
        let mut f = File::create(&path)?;
        writeln!(f, "{}", encode_row(&LedgerRow::Plan { plan: plan.clone() })?)?;
        f
    } else {
        OpenOptions::new().append(true).open(&path)?
    };
    let chunk = (4 * rayon::current_num_threads()).max(8);
    for d in 0..plan.deltas.len() {
        let todo: Vec<usize> = (0..plan.realizations).filter(|r| !done.contains(&(d, *r))).collect();
        if todo.is_empty() {
            continue;
        }
        let cell = prepare_cell(plan, d)?;
        for batch in todo.chunks(chunk) {
            if let Some(b) = budget_seconds {
                if start.elapsed().as_secs_f64() > b {
                    return Err(Error::BudgetExceeded { budget_seconds: b });
                }
            }
            let rows = batch
                .par_iter()
                .map(|&r| evaluate(plan, &cell, d, r))
                .collect::<Result<Vec<_>>>()?;
            let mut text = String::new();
            for row in rows {
                text.push_str(&encode_row(&LedgerRow::Sample(row))?);
                text.push('\n');
            }
            file.write_all(text.as_bytes())?;
            file.flush()?;
        }
    }
    let wall = start.elapsed().as_secs_f64();
    let mut reports = read_ledger(&path)?.reports();
    reports.iter_mut().for_each(|r| r.wall_seconds = wall);
    Ok(reports)
}

/// Regression of `log estimate` on `log |log lambda|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub object: ObjectTag,
    pub p: u32,
    pub delta: f64,
    pub beta: f64,
    pub intercept: f64,
    pub r2: f64,
    pub residuals: Vec<f64>,
    /// 95% interval for `beta`.
    pub beta_ci: (f64, f64),
    pub target: Option<f64>,
    pub n_lambda: usize,
}

/// Fits the reports of one object and moment order at the first `delta` and
/// site found. The interval comes from a parametric bootstrap that redraws
/// each estimate from its normal approximation.
pub fn fit_scaling(reports: &[MomentReport], object: ObjectTag, p: u32) -> Result<ScalingFit> {
    let first = reports
        .iter()
        .find(|r| r.object == object && r.p == p)
        .ok_or(Error::InsufficientPoints { needed: 4, got: 0 })?;
    let cell: Vec<&MomentReport> = reports
        .iter()
        .filter(|r| r.object == object && r.p == p && r.delta == first.delta && r.site == first.site)
        .collect();
    let distinct: BTreeSet<u64> = cell.iter().map(|r| r.lambda.to_bits()).collect();
    if distinct.len() < 4 || cell.len() != distinct.len() {
        return Err(Error::InsufficientPoints {
            needed: 4,
            got: distinct.len(),
        });
    }
    let x: Vec<f64> = cell.iter().map(|r| r.lambda.ln().abs().ln()).collect();
    let y: Vec<f64> = cell.iter().map(|r| r.estimate.ln()).collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-positive estimate in scaling fit".into()));
    }
    let fit = ols(&x, &y)?;
    let residuals = x.iter().zip(&y).map(|(a, b)| b - fit.intercept - fit.slope * a).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1e);
    let mut betas = Vec::with_capacity(2000);
    for _ in 0..2000 {
        let yb: Vec<f64> = cell
            .iter()
            .map(|r| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (r.estimate + r.se * z).max(r.estimate * 1e-3).ln()
            })
            .collect();
        betas.push(ols(&x, &yb)?.slope);
    }
    betas.sort_by(f64::total_cmp);
    Ok(ScalingFit {
        object,
        p,
        delta: first.delta,
        beta: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        residuals,
        beta_ci: (quantile(&betas, 0.025), quantile(&betas, 0.975)),
        target: object.target_exponent(),
        n_lambda: cell.len(),
    })
}

/// `max / min` of `estimate / |log lambda|^target` over one sweep.
pub fn normalized_spread(reports: &[MomentReport], object: ObjectTag, p: u32, site: usize, target: f64) -> Option<f64> {
    let v: Vec<f64> = reports
        .iter()
        .filter(|r| r.object == object && r.p == p && r.site == site)
        .map(|r| r.estimate / r.lambda.ln().abs().powf(target))
        .collect();
    if v.is_empty() {
        return None;
    }
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    Some(hi / lo)
}

/// Second moments of the unrenormalized and renormalized squares across `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenormStudy {
    pub lambda: f64,
    pub deltas: Vec<f64>,
    pub unrenormalized: Vec<f64>,
    pub unrenormalized_se: Vec<f64>,
    pub renormalized: Vec<f64>,
    pub renormalized_se: Vec<f64>,
    /// Value at the smallest `delta` over the value at the largest.
    pub unrenormalized_growth: f64,
    /// `max / min` over the sweep.
    pub renormalized_spread: f64,
}

pub fn renormalization_necessity_study(plan: &ExperimentPlan, out_dir: &Path, budget_seconds: Option<f64>) -> Result<RenormStudy> {
    let mut deltas = plan.deltas.clone();
    deltas.sort_by(f64::total_cmp);
    if deltas.len() < 3 || deltas[deltas.len() - 1] < 4.0 * deltas[0] {
        return Err(Error::Config("need at least three deltas spanning a factor of 4".into()));
    }
    let mut plan = plan.clone();
    plan.objects = vec![ObjectTag::CherryHat, ObjectTag::CherryBar];
    plan.p = vec![2];
    let reports = run_plan(&plan, out_dir, budget_seconds)?;
    let lambda = plan.lambdas[0];
    let pick = |object: ObjectTag, delta: f64| {
        reports
            .iter()
            .find(|r| r.object == object && r.site == 0 && r.lambda == lambda && r.delta == delta)
            .map(|r| (r.estimate * r.estimate, 2.0 * r.estimate * r.se))
            .ok_or_else(not_computed)
    };
    let (mut un, mut un_se, mut re, mut re_se) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &d in &deltas {
        let (a, b) = pick(ObjectTag::CherryHat, d)?;
        un.push(a);
        un_se.push(b);
        let (a, b) = pick(ObjectTag::CherryBar, d)?;
        re.push(a);
        re_se.push(b);
    }
    let hi = re.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = re.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RenormStudy {
        lambda,
        unrenormalized_growth: un[0] / un[un.len() - 1],
        renormalized_spread: hi / lo,
        deltas,
        unrenormalized: un,
        unrenormalized_se: un_se,
        renormalized: re,
        renormalized_se: re_se,
    })
}

/// Filter for plot tables.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlotQuery {
    pub object: Option<ObjectTag>,
    pub p: Option<u32>,
}

const CSV_HEADER: [&str; 10] = [
    "object",
    "site",
    "p",
    "lambda",
    "delta",
    "estimate",
    "se",
    "realizations",
    "base_seed",
    "wall_seconds",
];

/// Writes `reports.csv` and a whitespace-separated `plot_long.dat` with one
/// block per `(object, p, delta, site)`.
pub fn emit_plot_data(ledger: &Path, query: PlotQuery, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let reports: Vec<MomentReport> = read_ledger(ledger)?
        .reports()
        .into_iter()
        .filter(|r| query.object.is_none_or(|o| o == r.object) && query.p.is_none_or(|p| p == r.p))
        .collect();
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("reports.csv");
    write_reports_csv(&reports, &csv_path)?;
    let long_path = out_dir.join("plot_long.dat");
    let mut text = String::from("# object p delta site lambda abs_log_lambda estimate se\n");
    let mut last = None;
    for r in &reports {
        let key = (r.object, r.p, r.delta.to_bits(), r.site);
        if last.is_some() && last != Some(key) {
            text.push_str("\n\n");
        }
        last = Some(key);
        text.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            r.object.name(),
            r.p,
            r.delta,
            r.site,
            r.lambda,
            r.lambda.ln().abs(),
            r.estimate,
            r.se
        ));
    }
    std::fs::write(&long_path, text)?;
    Ok((csv_path, long_path))
}

pub fn write_reports_csv(reports: &[MomentReport], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(CSV_HEADER).map_err(|e| Error::Io(e.to_string()))?;
    for r in reports {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<MomentReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    r.deserialize().map(|x| x.map_err(|e| Error::Io(e.to_string()))).collect()
}

/// Exact covariance of the constant-coefficient frozen solution for
/// `a = c Id`, started at `t = 0`:
/// `int_0^t ds int_0^tt ds' Psi(s - s') pi^2 N(0, (2c(t - s) + 2c(tt - s') + delta^2) Id)(h)`
/// with `Psi` the time autoconvolution of the mollifier.
pub fn lollipop_covariance(c: f64, spec: &MollifierSpec, t: f64, tt: f64, h: f64) -> f64 {
    if t <= 0.0 || tt <= 0.0 {
        return 0.0;
    }
    thread_local! {
        static RULES: ((Vec<f64>, Vec<f64>), (Vec<f64>, Vec<f64>)) = (gauss_legendre(16), gauss_legendre(20));
    }
    let d2 = spec.delta * spec.delta;
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    RULES.with(|(ru, rs)| {
        let mut total = 0.0;
        // u = s - s'; the s-range changes form at these points
        let mut cuts = vec![-2.0 * d2, 2.0 * d2, 0.0, -tt, t - tt, t];
        cuts.retain(|c| c.abs() <= 2.0 * d2);
        cuts.sort_by(f64::total_cmp);
        for w in cuts.windows(2) {
            let (ua, ub) = (w[0], w[1]);
            if ub - ua <= 0.0 {
                continue;
            }
            for (xu, wu) in ru.0.iter().zip(&ru.1) {
                let u = 0.5 * (ua + ub) + 0.5 * (ub - ua) * xu;
                let psi = time_autoconvolution(spec, u);
                if psi == 0.0 {
                    continue;
                }
                let lo = u.max(0.0);
                let hi = t.min(tt + u);
                if hi <= lo {
                    continue;
                }
                let mut inner = 0.0;
                for (xs, ws) in rs.0.iter().zip(&rs.1) {
                    let s = 0.5 * (lo + hi) + 0.5 * (hi - lo) * xs;
                    let var = 2.0 * c * (t - s) + 2.0 * c * (tt - s + u) + d2;
                    inner += ws * (-h * h / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var);
                }
                total += wu * 0.5 * (ub - ua) * psi * inner * 0.5 * (hi - lo);
            }
        }
        pi2 * total
    })
}

/// `int q(y) q(y + rho e) dy` for `q(y) = (1 - |y|^2)^4` on the unit disc.
fn profile_autocorrelation(rho: f64) -> f64 {
    if rho >= 2.0 {
        return 0.0;
    }
    let (xr, wr) = gauss_legendre(40);
    let n_theta = 96;
    let mut acc = 0.0;
    for (x, w) in xr.iter().zip(&wr) {
        let r = 0.5 + 0.5 * x;
        let q1 = (1.0 - r * r).powi(4);
        let mut ring = 0.0;
        for m in 0..n_theta {
            let th = 2.0 * std::f64::consts::PI * m as f64 / n_theta as f64;
            let (yx, yy) = (r * th.cos() + rho, r * th.sin());
            let r2 = yx * yx + yy * yy;
            if r2 < 1.0 {
                ring += (1.0 - r2).powi(4);
            }
        }
        acc += 0.5 * w * r * q1 * ring * 2.0 * std::f64::consts::PI / n_theta as f64;
    }
    acc
}

/// `E[(cherry_bar, psi^lambda)^2] = 2 int int psi psi C^2` for `a = c Id`,
/// using the radial reduction of the spatial integrals.
pub fn cherry_second_moment_oracle(c: f64, spec: &MollifierSpec, test: &TestFunction) -> f64 {
    let l = test.lambda;
    let (xt, wt) = gauss_legendre(24);
    let (xr, wr) = gauss_legendre(32);
    let taus: Vec<(f64, f64)> = xt
        .iter()
        .zip(&wt)
        .map(|(x, w)| {
            let tau = 0.5 + 0.5 * x;
            (tau, 0.5 * w * (4.0 * tau * (1.0 - tau)).powi(4))
        })
        .collect();
    let rhos: Vec<(f64, f64)> = xr
        .iter()
        .zip(&wr)
        .map(|(x, w)| {
            let rho = 1.0 + x;
            (rho, w * 2.0 * std::f64::consts::PI * rho * profile_autocorrelation(rho))
        })
        .collect();
    let total: f64 = taus
        .par_iter()
        .map(|&(tau, wa)| {
            let t = test.base.t + l * l * tau;
            let mut acc = 0.0;
            for &(tau2, wb) in &taus {
                let tt = test.base.t + l * l * tau2;
                for &(rho, wrho) in &rhos {
                    let cov = lollipop_covariance(c, spec, t, tt, l * rho);
                    acc += wa * wb * wrho * cov * cov;
                }
            }
            acc
        })
        .sum();
    2.0 * total
}

/// Correlation kernel by family name, as used in config files.
pub fn kernel_from_name(family: &str, scale: f64, amplitude: f64) -> Result<CorrelationKernel> {
    match family {
        "gaussian_bump" => Ok(CorrelationKernel::gaussian_bump(scale, amplitude)),
        "compact_bump" => Ok(CorrelationKernel::compact_bump(scale, amplitude)),
        "zero" => Ok(CorrelationKernel::zero()),
        other => Err(Error::Config(format!("unknown correlation family {other}"))),
    }
}

/// Study configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub grid: GridRule,
    pub mollifier: MollifierSection,
    pub correlation: CorrelationSection,
    pub profile: ProfileSection,
    pub plan: PlanSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifierSection {
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationSection {
    pub family: String,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Defaults to the amplitude giving `g` unit standard deviation.
    #[serde(default)]
    pub amplitude: Option<f64>,
}

fn default_scale() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub kind: String,
    pub lambda: f64,
    #[serde(default)]
    pub theta_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub objects: Vec<ObjectTag>,
    pub p: Vec<u32>,
    pub lambdas: Vec<f64>,
    pub realizations: usize,
    #[serde(default)]
    pub seed: u64,
    pub sites: Vec<[f64; 3]>,
    #[serde(default = "default_nodes")]
    pub chebyshev_nodes: usize,
    #[serde(default)]
    pub direct: bool,
}

fn default_nodes() -> usize {
    16
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_plan(&self) -> Result<ExperimentPlan> {
        let c = &self.correlation;
        let amplitude = match (c.amplitude, c.family.as_str()) {
            (Some(a), _) => a,
            (None, "gaussian_bump") => unit_variance_amplitude(c.scale),
            (None, _) => 1.0,
        };
        let kernel = kernel_from_name(&c.family, c.scale, amplitude)?;
        let profile = match self.profile.kind.as_str() {
            "isotropic_logistic" => MatrixProfile::isotropic_logistic(self.profile.lambda),
            "anisotropic_rotation" => MatrixProfile::anisotropic_rotation(self.profile.lambda, self.profile.theta_max.unwrap_or(0.5)),
            other => return Err(Error::Config(format!("unknown profile {other}"))),
        };
        let plan = ExperimentPlan {
            objects: self.plan.objects.clone(),
            p: self.plan.p.clone(),
            lambdas: self.plan.lambdas.clone(),
            deltas: self.mollifier.deltas.clone(),
            realizations: self.plan.realizations,
            base_seed: self.plan.seed,
            grid: self.grid,
            kernel,
            profile,
            sites: self.plan.sites.clone(),
            engine: if self.plan.direct {
                LollipopEngine::Direct
            } else {
                LollipopEngine::Spectral {
                    nodes: self.plan.chebyshev_nodes,
                }
            },
            solver: None,
        };
        if plan.realizations > 0 {
            plan.validate()?;
        }
        Ok(plan)
    }
}

/// Amplitude of the Gaussian bump for which the continuum driver has unit
/// variance, from `int m^2 = amp^2 pi l^4 / 2`.
pub fn unit_variance_amplitude(scale: f64) -> f64 {
    (2.0 / (std::f64::consts::PI * scale.powi(4))).sqrt()
}

/// Outcome of one exact-oracle check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> OracleCheck {
    OracleCheck {
        name: name.into(),
        passed,
        detail,
    }
}

/// The exact-oracle suites: Gaussian integration by parts, Wick products
/// against Hermite polynomials and Isserlis moments, kernel mass, the
/// finite-difference residual of the kernel and the Gaussian semigroup.
pub fn oracle_suite(seed: u64) -> Result<Vec<OracleCheck>> {
    use crate::gauss_kernels::{heat_kernel, heat_residual_l1};
    use crate::linalg::Sym2;
    use crate::quadrature::{integrate_adaptive, QuadratureTolerance};
    use crate::wick_calculus::{hermite_he, isserlis_moment, randomized_ibp_suite, wick_product, GaussianVector};

    let mut out = Vec::new();
    let ibp = randomized_ibp_suite(100, seed)?;
    let worst = ibp.iter().map(|r| r.abs_err).fold(0.0, f64::max);
    out.push(check("ibp_suite", ibp.len() == 100 && worst <= 1e-10, format!("{} instances, max error {worst:.3e}", ibp.len())));

    let mut worst: f64 = 0.0;
    for n in 1..=6 {
        let cov = GaussianVector::new(n, vec![1.0; n * n])?;
        for &x in &[-1.7, -0.3, 0.0, 0.8, 2.4] {
            worst = worst.max((wick_product(&vec![x; n], &cov)? - hermite_he(n, x)).abs());
        }
    }
    let rho: f64 = 0.35;
    let pair = GaussianVector::new(2, vec![1.0, rho, rho, 1.0])?;
    let iss = [
        (isserlis_moment(&[4], &GaussianVector::identity(1))? - 3.0).abs(),
        (isserlis_moment(&[2, 2], &pair)? - (1.0 + 2.0 * rho * rho)).abs(),
        (isserlis_moment(&[3, 3], &pair)? - (9.0 * rho + 6.0 * rho.powi(3))).abs(),
    ];
    worst = iss.iter().copied().fold(worst, f64::max);
    out.push(check("wick_hermite_isserlis", worst <= 1e-12, format!("max error {worst:.3e}")));

    let tol = QuadratureTolerance {
        relative: 1e-10,
        absolute: 1e-13,
        max_evaluations: 400_000,
    };
    let mut worst: f64 = 0.0;
    for a in [Sym2::IDENTITY, Sym2::new(0.7, 0.2, 0.5), Sym2::new(0.3, -0.1, 1.2)] {
        for s in [0.05, 0.5, 2.0] {
            let r = 12.0 * (2.0 * s * a.eigenvalues().1).sqrt();
            let mass = integrate_adaptive(|x| integrate_adaptive(|y| Ok(heat_kernel(&a, s, [x, y])), -r, r, tol), -r, r, tol)?;
            worst = worst.max((mass - 1.0).abs());
        }
    }
    out.push(check("kernel_mass", worst <= 1e-6, format!("max deviation {worst:.3e}")));

    let a = Sym2::new(0.8, 0.25, 0.6);
    let r: Vec<f64> = [0.1, 0.05, 0.025].iter().map(|&h| heat_residual_l1(&a, h)).collect();
    let orders: Vec<f64> = r.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
    out.push(check("kernel_pde_residual_order", min_order >= 1.8, format!("observed orders {orders:.3?}")));

    let err = semigroup_sup_error(1.0, 1.0, 0.02).max(semigroup_sup_error(0.5, 2.0, 0.02));
    out.push(check("gaussian_semigroup", err <= 1e-4, format!("sup error {err:.3e}")));
    Ok(out)
}

/// Sup over a few points of `|h^2 sum G_s1(u) G_s2(x - u) - G_sqrt(s1^2 + s2^2)(x)|`
/// on the lattice `h Z^2` truncated at radius 8.
pub fn semigroup_sup_error(s1: f64, s2: f64, h: f64) -> f64 {
    use crate::lattice_noise::gaussian_density;
    let n = (8.0 / h).round() as i64;
    let target = (s1 * s1 + s2 * s2).sqrt();
    [[0.0, 0.0], [0.7, -0.3], [1.5, 1.1], [-2.2, 0.4]]
        .par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for a in -n..=n {
                let u = a as f64 * h;
                for b in -n..=n {
                    let v = b as f64 * h;
                    acc += gaussian_density(s1, [u, v]) * gaussian_density(s2, [p[0] - u, p[1] - v]);
                }
            }
            (acc * h * h - gaussian_density(target, *p)).abs()
        })
        .reduce(|| 0.0, f64::max)
}
