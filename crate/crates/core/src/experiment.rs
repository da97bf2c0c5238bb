//! Experiment configuration, per-stage runners that write their artifacts to
//! disk, the full benchmark reproduction with a pass/fail summary, and tidy
//! plot-data export.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adp::{adp_attack_run, adp_learn, AdpConfig, AdpTrace};
use crate::attack::{self, AttackOptions, AttackSolution, FeasibilityReport, Verdict, FEASIBILITY_GRID, FEASIBILITY_TOL};
use crate::batch::{self, BatchOptions, ControlLaw, PoisonedDataset};
use crate::bounds::{perturbation_bounds, verify_bounds, PerturbMode, PerturbationBounds, VerifyReport};
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64};
use crate::lqg::{dlqg, CostParams, LinearSystem, Policy, ValueQuad};
use crate::vehicle;

/// A value given inline or as a path to a JSON file (relative to the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    File(PathBuf),
    Inline(T),
}

impl<T: DeserializeOwned + Clone> Source<T> {
    pub fn resolve(&self, base: &Path) -> Result<T> {
        match self {
            Source::Inline(v) => Ok(v.clone()),
            Source::File(p) => io::read_json(&base.join(p)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub batch: u64,
    pub adp: u64,
    pub bounds: u64,
}

/// Policy the batch attacker aims for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchTarget {
    /// Keep the gain the clean learner computes and impose the target's offset.
    #[default]
    LearnedGainTargetOffset,
    /// The configured target policy as is.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSettings {
    pub steps: usize,
    pub control: ControlLaw,
    pub target: BatchTarget,
    pub options: BatchOptions,
}

impl Default for BatchSettings {
    fn default() -> Self {
        BatchSettings { steps: 400, control: ControlLaw::default(), target: BatchTarget::default(), options: BatchOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdpSettings {
    /// Process-noise level of the plant the online learner interacts with.
    pub plant_noise_std: f64,
    /// Initial stabilizing policy; the benchmark one when absent.
    pub init: Option<Source<Policy>>,
    pub config: AdpConfig,
}

impl Default for AdpSettings {
    fn default() -> Self {
        AdpSettings { plant_noise_std: 0.0, init: None, config: AdpConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSettings {
    pub trials: usize,
    pub eps: f64,
}

impl Default for BoundsSettings {
    fn default() -> Self {
        BoundsSettings { trials: 100, eps: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeasibilitySettings {
    /// Trial input weight as rows; identity when absent.
    pub e_trial: Option<Vec<Vec<f64>>>,
    pub grid: usize,
}

impl Default for FeasibilitySettings {
    fn default() -> Self {
        FeasibilitySettings { e_trial: None, grid: FEASIBILITY_GRID }
    }
}

/// Pass/fail tolerances of the reproduction summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub optimal_gain_abs: f64,
    pub optimal_offset_norm: f64,
    pub attack_objective_rel: f64,
    pub falsified_entry_abs: f64,
    pub certification_abs: f64,
    pub batch_clean_offset_norm: f64,
    pub batch_offset_abs: f64,
    /// Entries of the reference offset below this magnitude are exempt from the sign check.
    pub batch_sign_floor: f64,
    pub batch_falsification_band: [f64; 2],
    pub adp_policy_abs: f64,
    pub adp_max_updates: usize,
    pub feasibility_cond2: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            optimal_gain_abs: 1e-3,
            optimal_offset_norm: 1e-6,
            attack_objective_rel: 1e-2,
            falsified_entry_abs: 5e-3,
            certification_abs: 1e-3,
            batch_clean_offset_norm: 1e-4,
            batch_offset_abs: 0.15,
            batch_sign_floor: 0.15,
            batch_falsification_band: [0.015, 0.035],
            adp_policy_abs: 5e-2,
            adp_max_updates: 60,
            feasibility_cond2: FEASIBILITY_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: Source<LinearSystem>,
    pub cost: Source<CostParams>,
    pub gamma: f64,
    pub target: Source<Policy>,
    pub x0: Vec<f64>,
    pub seeds: Seeds,
    pub attack: AttackOptions,
    pub batch: BatchSettings,
    pub adp: AdpSettings,
    pub bounds: BoundsSettings,
    pub feasibility: FeasibilitySettings,
    pub tolerances: Tolerances,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            system: Source::Inline(vehicle::system()),
            cost: Source::Inline(vehicle::cost()),
            gamma: vehicle::GAMMA,
            target: Source::Inline(vehicle::target()),
            x0: vehicle::X0.to_vec(),
            seeds: Seeds::default(),
            attack: AttackOptions::default(),
            batch: BatchSettings::default(),
            adp: AdpSettings::default(),
            bounds: BoundsSettings::default(),
            feasibility: FeasibilitySettings::default(),
            tolerances: Tolerances::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        if !path.is_file() {
            return Err(Error::Config(format!("config not found: {}", path.display())));
        }
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base)?;
        Ok((cfg, base))
    }

    /// Overrides every seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds { batch: seed, adp: seed, bounds: seed };
        self
    }

    /// Loads referenced files and checks dimensions and parameter ranges.
    pub fn resolve(&self, base: &Path) -> Result<Setup> {
        let sys = self.system.resolve(base)?;
        sys.validate()?;
        let cost = self.cost.resolve(base)?;
        cost.check_against(&sys)?;
        let target = self.target.resolve(base)?;
        target.check_against(&sys)?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.x0.len() != sys.n() {
            return Err(Error::Config(format!("x0 has length {}, system has n = {}", self.x0.len(), sys.n())));
        }
        let adp_init = match &self.adp.init {
            Some(src) => src.resolve(base)?,
            None => vehicle::initial_policy(),
        };
        let e_trial = match &self.feasibility.e_trial {
            Some(rows) => io::matrix_from_rows(rows).map_err(Error::Config)?,
            None => DMatrix::identity(sys.m(), sys.m()),
        };
        self.adp.config.validate()?;
        if self.batch.steps == 0 || self.bounds.trials == 0 || self.feasibility.grid == 0 {
            return Err(Error::Config("batch.steps, bounds.trials and feasibility.grid must be positive".into()));
        }
        Ok(Setup { x0: DVector::from_row_slice(&self.x0), sys, cost, target, adp_init, e_trial, gamma: self.gamma })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Fully resolved inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub sys: LinearSystem,
    pub cost: CostParams,
    pub target: Policy,
    pub gamma: f64,
    pub x0: DVector<f64>,
    pub adp_init: Policy,
    pub e_trial: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutput {
    pub policy: Policy,
    pub value: ValueQuad,
    pub closed_loop_radius: f64,
}

pub fn run_solve(setup: &Setup, out: &Path) -> Result<SolveOutput> {
    let (policy, value) = dlqg(&setup.sys, &setup.cost, setup.gamma)?;
    io::write_json(&out.join("policy.json"), &policy)?;
    io::write_json(&out.join("value.json"), &value)?;
    let closed_loop_radius = policy.closed_loop_radius(&setup.sys);
    Ok(SolveOutput { policy, value, closed_loop_radius })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsOutput {
    pub bounds: PerturbationBounds,
    pub verify_all: VerifyReport,
    pub verify_state_only: VerifyReport,
}

pub fn run_bounds(setup: &Setup, settings: &BoundsSettings, seed: u64, out: &Path) -> Result<BoundsOutput> {
    let bounds = perturbation_bounds(&setup.sys, &setup.cost, setup.gamma)?;
    let verify = |mode| verify_bounds(&setup.sys, &setup.cost, setup.gamma, settings.trials, settings.eps, seed, mode);
    let res = BoundsOutput { bounds, verify_all: verify(PerturbMode::ALL)?, verify_state_only: verify(PerturbMode::STATE_ONLY)? };
    io::write_json(&out.join("bounds.json"), &res)?;
    Ok(res)
}

pub fn run_attack(setup: &Setup, opts: &AttackOptions, dump_problem: bool, out: &Path) -> Result<AttackSolution> {
    if dump_problem {
        let (prob, _) = attack::build_attack_problem(&setup.sys, &setup.cost, setup.gamma, &setup.target, opts.eps_strict)?;
        io::write_json(&out.join("attack_problem.json"), &prob)?;
    }
    let sol = attack::synthesize(&setup.sys, &setup.cost, setup.gamma, &setup.target, opts)?;
    io::write_json(&out.join("attack_solution.json"), &sol)?;
    Ok(sol)
}

pub fn run_feasibility(setup: &Setup, grid: usize, out: &Path) -> Result<FeasibilityReport> {
    let rep = attack::feasibility_check(&setup.sys, &setup.e_trial, setup.gamma, &setup.target, grid)?;
    io::write_json(&out.join("feasibility.json"), &rep)?;
    let mut w = io::csv_writer(&out.join("feasibility_series.csv"))?;
    w.write_record(["omega", "min_eig"])?;
    for p in &rep.series {
        w.write_record([fmt_f64(p.omega), p.min_eig.map(fmt_f64).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub steps: usize,
    pub diverged: bool,
    pub clean: batch::BatchResult,
    pub target: Policy,
    pub attack: PoisonedDatasetSummary,
    pub poisoned: batch::BatchResult,
}

/// [`PoisonedDataset`] without the transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonedDatasetSummary {
    pub cost_dag: CostParams,
    pub relative_falsification: f64,
    pub falsification: f64,
    pub cost_norm: f64,
    pub status: crate::conic::SolveStatus,
    pub iterations: usize,
    pub certified: bool,
}

impl From<&PoisonedDataset> for PoisonedDatasetSummary {
    fn from(p: &PoisonedDataset) -> Self {
        PoisonedDatasetSummary {
            cost_dag: p.cost_dag.clone(),
            relative_falsification: p.relative_falsification,
            falsification: p.falsification,
            cost_norm: p.base.costs().norm(),
            status: p.status,
            iterations: p.iterations,
            certified: p.certified,
        }
    }
}

/// Generate, learn clean, attack, learn poisoned; writes `dataset.csv`, `poisoned.csv`, `dataset_meta.json`, `batch_summary.json`.
pub fn run_batch(setup: &Setup, settings: &BatchSettings, seed: u64, out: &Path) -> Result<BatchSummary> {
    let ds = batch::generate_dataset(&setup.sys, &setup.cost, settings.steps, &settings.control, &setup.x0, seed)?;
    batch::write_dataset_csv(&out.join("dataset.csv"), &ds, None)?;
    io::write_json(&out.join("dataset_meta.json"), &ds.meta)?;
    let clean = batch::batch_learn(&ds, setup.gamma, &settings.options)?;
    let target = match settings.target {
        BatchTarget::LearnedGainTargetOffset => Policy::new(clean.policy.gain.clone(), setup.target.offset.clone())?,
        BatchTarget::Target => setup.target.clone(),
    };
    let pois = batch::batch_attack(&ds, setup.gamma, &target, &settings.options)?;
    batch::write_dataset_csv(&out.join("poisoned.csv"), &ds, Some(&pois.c_dag))?;
    let poisoned = batch::batch_learn(&pois.poisoned(), setup.gamma, &settings.options)?;
    let summary = BatchSummary { steps: ds.len(), diverged: ds.meta.diverged, clean, target, attack: (&pois).into(), poisoned };
    io::write_json(&out.join("batch_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdpRunSummary {
    pub policy: Policy,
    pub updates: usize,
    pub steps: usize,
    pub converged: bool,
    pub resets: usize,
    pub inner_counts: Vec<usize>,
    pub update_norms: Vec<f64>,
}

impl AdpRunSummary {
    fn new(policy: &Policy, trace: &AdpTrace) -> Self {
        AdpRunSummary {
            policy: policy.clone(),
            updates: trace.updates(),
            steps: trace.steps(),
            converged: trace.converged,
            resets: trace.resets,
            inner_counts: trace.inner_counts.clone(),
            update_norms: trace.update_norms.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdpSummary {
    pub clean: AdpRunSummary,
    pub attacked: AdpRunSummary,
    pub cost_dag: CostParams,
    /// Largest `|c' - c|` seen by the attacked learner.
    pub max_cost_deviation: f64,
}

/// Clean and attacked online runs, executed concurrently.
pub fn run_adp(setup: &Setup, settings: &AdpSettings, attack_opts: &AttackOptions, seed: u64, out: &Path) -> Result<AdpSummary> {
    let plant = setup.sys.with_noise(settings.plant_noise_std);
    let cfg = AdpConfig { seed, ..settings.config };
    let (clean, attacked) = rayon::join(
        || adp_learn(&plant, &setup.cost, setup.gamma, &setup.adp_init, &setup.x0, &cfg),
        || adp_attack_run(&plant, &setup.cost, setup.gamma, &setup.target, &setup.adp_init, &setup.x0, &cfg, attack_opts),
    );
    let (clean_policy, clean_trace) = clean?;
    let attacked = attacked?;
    clean_trace.write_csv(&out.join("clean_trace.csv"))?;
    clean_trace.write_policies_json(&out.join("clean_policies.json"))?;
    attacked.trace.write_csv(&out.join("attacked_trace.csv"))?;
    attacked.trace.write_policies_json(&out.join("attacked_policies.json"))?;
    let max_cost_deviation = attacked.trace.cost_log.iter().filter_map(|e| e.c_dagger.map(|cd| (cd - e.c).abs())).fold(0.0, f64::max);
    let summary = AdpSummary {
        clean: AdpRunSummary::new(&clean_policy, &clean_trace),
        attacked: AdpRunSummary::new(&attacked.policy, &attacked.trace),
        cost_dag: attacked.attack.cost_dag.clone(),
        max_cost_deviation,
    };
    io::write_json(&out.join("adp_summary.json"), &summary)?;
    Ok(summary)
}

/// One produced number compared with its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub reference: Option<f64>,
    pub criterion: String,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, reference: None, criterion: format!("<= {limit:e}"), pass: value <= limit }
    }

    fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, reference: None, criterion: format!(">= {limit:e}"), pass: value >= limit }
    }

    fn close(name: &str, value: f64, reference: f64, tol: f64) -> Self {
        Check {
            name: name.into(),
            value,
            reference: Some(reference),
            criterion: format!("|value - reference| <= {tol:e}"),
            pass: (value - reference).abs() <= tol,
        }
    }

    fn flag(name: &str, ok: bool, criterion: &str) -> Self {
        Check { name: name.into(), value: if ok { 1.0 } else { 0.0 }, reference: None, criterion: criterion.into(), pass: ok }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub stages: Vec<StageRecord>,
    pub checks: Vec<Check>,
    pub all_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub files: Vec<String>,
}

/// Largest entry difference between two policies.
fn policy_gap(a: &Policy, b: &Policy) -> f64 {
    a.max_abs_diff(b)
}

fn max_entry_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

fn solve_checks(s: &SolveOutput, tol: &Tolerances) -> Vec<Check> {
    let reference = vehicle::reference::optimal_policy();
    vec![
        Check::at_most("optimal_gain_max_abs_error", max_entry_gap(&s.policy.gain, &reference.gain), tol.optimal_gain_abs),
        Check::at_most("optimal_offset_norm", s.policy.offset.norm(), tol.optimal_offset_norm),
    ]
}

fn attack_checks(a: &AttackSolution, tol: &Tolerances) -> Vec<Check> {
    let r = vehicle::reference::falsified_cost();
    let entry_gap = max_entry_gap(&a.cost_dag.d_mat, &r.d_mat)
        .max((&a.cost_dag.d_vec - &r.d_vec).abs().max())
        .max(max_entry_gap(&a.cost_dag.e_mat, &r.e_mat));
    let target_obj = vehicle::reference::ATTACK_OBJECTIVE;
    vec![
        Check::close("attack_objective", a.objective, target_obj, tol.attack_objective_rel * target_obj),
        Check::at_most("falsified_entries_max_abs_error", entry_gap, tol.falsified_entry_abs),
        Check::at_most("certification_max_abs_error", a.certification_error.unwrap_or(f64::INFINITY), tol.certification_abs),
    ]
}

fn batch_checks(b: &BatchSummary, tol: &Tolerances) -> Vec<Check> {
    let mut out = vec![Check::at_most("batch_clean_offset_norm", b.clean.policy.offset.norm(), tol.batch_clean_offset_norm)];
    for (i, reference) in vehicle::reference::BATCH_POISONED_OFFSET.iter().enumerate() {
        let v = b.poisoned.policy.offset[i];
        out.push(Check::close(&format!("batch_poisoned_offset_{}", i + 1), v, *reference, tol.batch_offset_abs));
        if reference.abs() > tol.batch_sign_floor {
            out.push(Check::flag(
                &format!("batch_poisoned_offset_{}_sign", i + 1),
                v.signum() == reference.signum(),
                "sign matches reference",
            ));
        }
    }
    let [lo, hi] = tol.batch_falsification_band;
    let rel = b.attack.relative_falsification;
    out.push(Check {
        name: "batch_relative_falsification".into(),
        value: rel,
        reference: Some(vehicle::reference::BATCH_RELATIVE_FALSIFICATION),
        criterion: format!("in [{lo}, {hi}]"),
        pass: (lo..=hi).contains(&rel),
    });
    out
}

fn adp_checks(a: &AdpSummary, setup: &Setup, tol: &Tolerances) -> Vec<Check> {
    vec![
        Check::at_most(
            "adp_clean_policy_max_abs_error",
            policy_gap(&a.clean.policy, &vehicle::reference::optimal_policy()),
            tol.adp_policy_abs,
        ),
        Check::at_most("adp_attacked_policy_max_abs_error", policy_gap(&a.attacked.policy, &setup.target), tol.adp_policy_abs),
        Check::flag("adp_clean_converged", a.clean.converged && a.clean.updates <= tol.adp_max_updates, "converged within the update cap"),
        Check::flag(
            "adp_attacked_converged",
            a.attacked.converged && a.attacked.updates <= tol.adp_max_updates,
            "converged within the update cap",
        ),
    ]
}

fn bounds_checks(b: &BoundsOutput) -> Vec<Check> {
    vec![
        Check::at_most("bound_violations_all", b.verify_all.violations as f64, 0.0),
        Check::at_most("bound_violations_state_only", b.verify_state_only.violations as f64, 0.0),
    ]
}

fn feasibility_checks(f: &FeasibilityReport, tol: &Tolerances) -> Vec<Check> {
    vec![
        Check::flag("feasibility_verdict", f.verdict == Verdict::FeasibleEvidence, "feasible_evidence"),
        Check::at_least("feasibility_cond2", f.cond2_min_eig_over_grid, -tol.feasibility_cond2),
    ]
}

/// Runs the whole benchmark pipeline and writes every artifact plus `summary.json` and `manifest.json`.
pub fn reproduce(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<Summary> {
    let setup = cfg.resolve(base)?;
    fs::create_dir_all(out)?;
    io::write_json(&out.join("config.json"), cfg)?;
    let tol = &cfg.tolerances;
    let mut stages: Vec<StageRecord> = Vec::new();
    let mut checks: Vec<Check> = Vec::new();
    let mut failed = false;
    let mut policies = serde_json::Map::new();

    macro_rules! stage {
        ($name:expr, $body:expr) => {{
            if failed {
                stages.push(StageRecord { name: $name.into(), status: StageStatus::Skipped, error: None });
                None
            } else {
                let started = std::time::Instant::now();
                match $body {
                    Ok(v) => {
                        log::info!("stage {} finished in {:.2?}", $name, started.elapsed());
                        stages.push(StageRecord { name: $name.into(), status: StageStatus::Ok, error: None });
                        Some(v)
                    }
                    Err(e) => {
                        log::error!("stage {} failed: {e}", $name);
                        failed = true;
                        stages.push(StageRecord { name: $name.into(), status: StageStatus::Failed, error: Some(e.to_string()) });
                        None
                    }
                }
            }
        }};
    }

    let policy_json = |p: &Policy| serde_json::to_value(p).expect("policy serializes");
    policies.insert("target".into(), policy_json(&setup.target));
    if let Some(s) = stage!("solve", run_solve(&setup, out)) {
        checks.extend(solve_checks(&s, tol));
        policies.insert("optimal".into(), policy_json(&s.policy));
    }
    if let Some(a) = stage!("attack", run_attack(&setup, &cfg.attack, false, out)) {
        checks.extend(attack_checks(&a, tol));
        if let Some(p) = &a.achieved {
            policies.insert("attack_certified".into(), policy_json(p));
        }
    }
    if let Some(f) = stage!("feasibility", run_feasibility(&setup, cfg.feasibility.grid, out)) {
        checks.extend(feasibility_checks(&f, tol));
    }
    if let Some(b) = stage!("bounds", run_bounds(&setup, &cfg.bounds, cfg.seeds.bounds, out)) {
        checks.extend(bounds_checks(&b));
    }
    if let Some(b) = stage!("batch", run_batch(&setup, &cfg.batch, cfg.seeds.batch, &out.join("batch_run"))) {
        checks.extend(batch_checks(&b, tol));
        policies.insert("batch_clean".into(), policy_json(&b.clean.policy));
        policies.insert("batch_target".into(), policy_json(&b.target));
        policies.insert("batch_poisoned".into(), policy_json(&b.poisoned.policy));
    }
    if let Some(a) = stage!("adp", run_adp(&setup, &cfg.adp, &cfg.attack, cfg.seeds.adp, &out.join("adp_run"))) {
        checks.extend(adp_checks(&a, &setup, tol));
        policies.insert("adp_clean".into(), policy_json(&a.clean.policy));
        policies.insert("adp_attacked".into(), policy_json(&a.attacked.policy));
    }
    io::write_json(&out.join("table_policies.json"), &policies)?;

    let all_pass = !failed && checks.iter().all(|c| c.pass);
    let summary = Summary { stages, checks, all_pass };
    io::write_json(&out.join("summary.json"), &summary)?;
    write_manifest(cfg, out)?;
    Ok(summary)
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Writes `manifest.json` listing every file currently in `out`.
pub fn write_manifest(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let mut files = Vec::new();
    list_files(out, out, &mut files)?;
    files.retain(|f| f != "manifest.json");
    files.sort();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds,
        files,
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Deserialize)]
struct PolicyEntry {
    z: usize,
    #[serde(flatten)]
    policy: Policy,
}

fn read_column(path: &Path, names: &[&str]) -> Result<Vec<Vec<Option<f64>>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| header.iter().position(|h| h == *n).ok_or_else(|| Error::Config(format!("{} lacks column {n}", path.display()))))
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (col, &i) in cols.iter_mut().zip(&idx) {
            let field = rec[i].trim();
            col.push(if field.is_empty() {
                None
            } else {
                Some(field.parse::<f64>().map_err(|e| Error::Config(format!("bad number {field:?} in {}: {e}", path.display())))?)
            });
        }
    }
    Ok(cols)
}

fn write_cost_series(src: &Path, dst: &Path, time_col: &str) -> Result<usize> {
    let cols = read_column(src, &[time_col, "c", "c_dagger"])?;
    let mut w = io::csv_writer(dst)?;
    w.write_record(["t", "c", "c_dagger", "difference"])?;
    for ((t, c), cd) in cols[0].iter().zip(&cols[1]).zip(&cols[2]) {
        let (t, c) = (t.unwrap_or(f64::NAN), c.unwrap_or(f64::NAN));
        let cd = cd.unwrap_or(c);
        w.write_record([format!("{}", t as u64), fmt_f64(c), fmt_f64(cd), fmt_f64(cd - c)])?;
    }
    w.flush()?;
    Ok(cols[0].len())
}

/// Emits tidy CSV series from a reproduction directory into `run_dir/plotdata`; returns the files written.
pub fn plotdata(run_dir: &Path) -> Result<Vec<PathBuf>> {
    if !run_dir.is_dir() {
        return Err(Error::Config(format!("run directory not found: {}", run_dir.display())));
    }
    let dst = run_dir.join("plotdata");
    let mut written = Vec::new();

    let batch_src = run_dir.join("batch_run").join("poisoned.csv");
    if batch_src.is_file() {
        let path = dst.join("batch_costs.csv");
        write_cost_series(&batch_src, &path, "t")?;
        written.push(path);
    }

    let adp_src = run_dir.join("adp_run").join("attacked_trace.csv");
    if adp_src.is_file() {
        let path = dst.join("adp_costs.csv");
        write_cost_series(&adp_src, &path, "t")?;
        written.push(path);
    }

    let table = run_dir.join("table_policies.json");
    let references: serde_json::Map<String, serde_json::Value> = if table.is_file() { io::read_json(&table)? } else { Default::default() };
    let reference = |key: &str| -> Result<Option<Policy>> {
        references.get(key).map(|v| serde_json::from_value(v.clone()).map_err(Error::from)).transpose()
    };
    let runs = [("clean", "clean_policies.json", reference("optimal")?), ("attacked", "attacked_policies.json", reference("target")?)];
    if runs.iter().any(|(_, f, r)| r.is_some() && run_dir.join("adp_run").join(f).is_file()) {
        let path = dst.join("adp_policy_distance.csv");
        let mut w = io::csv_writer(&path)?;
        w.write_record(["run", "z", "gain_distance_fro", "offset_distance"])?;
        for (name, file, refp) in &runs {
            let (Some(refp), true) = (refp, run_dir.join("adp_run").join(file).is_file()) else { continue };
            let entries: Vec<PolicyEntry> = io::read_json(&run_dir.join("adp_run").join(file))?;
            for e in entries {
                w.write_record([
                    name.to_string(),
                    e.z.to_string(),
                    fmt_f64((&e.policy.gain - &refp.gain).norm()),
                    fmt_f64((&e.policy.offset - &refp.offset).norm()),
                ])?;
            }
        }
        w.flush()?;
        written.push(path);
    }

    if written.is_empty() {
        return Err(Error::Config(format!("no run traces found in {}", run_dir.display())));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("lqg-deceive-exp-{name}-{}", std::process::id()));
        fs::remove_dir_all(&dir).ok();
        dir
    }

    #[test]
    fn default_config_round_trips_and_resolves() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let setup = cfg.resolve(Path::new(".")).unwrap();
        assert_eq!(setup.sys, vehicle::system());
        assert_eq!(cfg.hash(), back.hash());
        assert_ne!(cfg.hash(), cfg.clone().with_seed(5).hash());
    }

    #[test]
    fn committed_default_config_matches_built_in() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
        let (cfg, _) = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"gama": 0.9}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"adp": {"config": {"betta": 1}}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"attack": {"solver": {"rhoo": 1}}}"#).is_err());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"gamma": 0.5}"#).unwrap();
        assert_eq!(partial.gamma, 0.5);
    }

    #[test]
    fn missing_config_and_bad_dimensions() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/config.json")).unwrap_err();
        assert!(err.to_string().contains("config not found"));
        let cfg = ExperimentConfig { x0: vec![1.0], ..Default::default() };
        assert!(matches!(cfg.resolve(Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn file_sources_resolve_relative_to_config() {
        let dir = tmp("sources");
        io::write_json(&dir.join("sys.json"), &vehicle::system()).unwrap();
        let text = r#"{"system": "sys.json"}"#;
        fs::write(dir.join("cfg.json"), text).unwrap();
        let (cfg, base) = ExperimentConfig::load(&dir.join("cfg.json")).unwrap();
        assert_eq!(cfg.resolve(&base).unwrap().sys, vehicle::system());
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn solve_with_zero_linear_term_has_zero_offset() {
        let dir = tmp("solve");
        let setup = ExperimentConfig::default().resolve(Path::new(".")).unwrap();
        let s = run_solve(&setup, &dir).unwrap();
        assert!(s.policy.offset.iter().all(|v| *v == 0.0));
        let back: Policy = io::read_json(&dir.join("policy.json")).unwrap();
        assert!(back.max_abs_diff(&s.policy) < 1e-15);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn plotdata_rejects_empty_dir() {
        let dir = tmp("empty");
        fs::create_dir_all(&dir).unwrap();
        assert!(plotdata(&dir).is_err());
        assert!(plotdata(&dir.join("missing")).is_err());
        fs::remove_dir_all(dir).ok();
    }
}
