//! Scenario files, the command pipeline and result emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bargaining::{self, BargainingOutcome, BargainingProblem};
use crate::cooperation::{self, RegionGrid, RepeatedGameConfig};
use crate::error::{Error, Result};
use crate::game::{self, scalar, AggregatorConfig, SearchSettings};
use crate::market::{DemandProfile, Network};
use crate::storage::StorageUnit;
use crate::system::System;
use crate::welfare::{self, MpmpConfig};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepeatedDefaults {
    pub discount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u64,
    pub metadata: Metadata,
    pub network: Network,
    pub demand: DemandProfile,
    pub units: Vec<StorageUnit>,
    pub aggregator: AggregatorConfig,
    pub repeated: RepeatedDefaults,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpmp: Option<MpmpConfig>,
}

impl Scenario {
    pub fn system(&self) -> Result<System> {
        System::new(self.network.clone(), self.demand.clone(), self.units.clone())
    }

    /// Checks every cross-reference eagerly.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Version {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let system = self.system()?;
        self.aggregator.validate(&system)?;
        cooperation::validate_discount(self.repeated.discount).map_err(|e| rename_field(e, "repeated.discount"))?;
        if let Some(m) = &self.mpmp {
            m.validate(&self.network).map_err(|e| rename_field(e, "mpmp.constants"))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

fn rename_field(e: Error, field: &str) -> Error {
    match e {
        Error::Validation { message, .. } => Error::validation(field, message),
        e => e,
    }
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let version = value
        .get("schema_version")
        .ok_or_else(|| Error::validation("schema_version", "missing"))?
        .as_u64()
        .ok_or_else(|| Error::validation("schema_version", "must be a nonnegative integer"))?;
    if version != SCHEMA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let scenario: Scenario = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        // missing fields are reported against the enclosing object
        let field = match inner.split('`').nth(1) {
            Some(name) if inner.starts_with("missing field") && path == "." => name.to_string(),
            Some(name) if inner.starts_with("missing field") => format!("{path}.{name}"),
            _ => path,
        };
        Error::validation(field, inner)
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    parse_scenario(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Validate,
    Clear,
    Stackelberg,
    Cooperate,
    Bargain,
    Social,
    Mpmp,
    Compare,
    Sweep,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Validate,
        Command::Clear,
        Command::Stackelberg,
        Command::Cooperate,
        Command::Bargain,
        Command::Social,
        Command::Mpmp,
        Command::Compare,
        Command::Sweep,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Clear => "clear",
            Command::Stackelberg => "stackelberg",
            Command::Cooperate => "cooperate",
            Command::Bargain => "bargain",
            Command::Social => "social",
            Command::Mpmp => "mpmp",
            Command::Compare => "compare",
            Command::Sweep => "sweep",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown command {s}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub search: SearchSettings,
    /// Overrides the scenario's discount factor.
    pub discount: Option<f64>,
    /// `clear` without storage instead of at the profit-maximizing schedules.
    pub zero_storage: bool,
    /// Resolution of region rasters, frontiers and curves.
    pub points: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            search: SearchSettings::default(),
            discount: None,
            zero_storage: false,
            points: 41,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        if let Some(d) = self.discount {
            cooperation::validate_discount(d)?;
        }
        if self.points < 2 {
            return Err(Error::validation("points", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario_name: String,
    pub scenario_hash: String,
    pub command: Command,
    pub settings: RunSettings,
    /// Headline scalars, also printed by the CLI.
    pub summary: BTreeMap<String, f64>,
    pub outputs: Value,
    /// Files written next to the JSON record.
    pub files: Vec<String>,
    pub wall_time_seconds: f64,
}

trait Stage<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        })
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("outputs serialize")
}

struct Emitter<'a> {
    dir: Option<&'a Path>,
    files: Vec<String>,
}

impl Emitter<'_> {
    fn csv(&mut self, name: &str, write: impl FnOnce(BufWriter<File>) -> Result<()>) -> Result<()> {
        if let Some(dir) = self.dir {
            let file = File::create(dir.join(name))?;
            write(BufWriter::new(file))?;
            self.files.push(name.to_string());
        }
        Ok(())
    }
}

/// Runs `command` on `scenario`; with `out_dir`, writes `<command>.json` and
/// the command's CSV files there.
pub fn run_pipeline(
    scenario: &Scenario,
    command: Command,
    settings: &RunSettings,
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    let start = Instant::now();
    settings.validate().stage("settings")?;
    scenario.validate().stage("validate")?;
    let system = scenario.system().stage("validate")?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(Error::from).stage("output directory")?;
    }
    let mut emit = Emitter {
        dir: out_dir,
        files: Vec::new(),
    };
    let ctx = Context {
        scenario,
        system: &system,
        settings,
        discount: settings.discount.unwrap_or(scenario.repeated.discount),
    };
    let (summary, outputs) = match command {
        Command::Validate => ctx.validate(),
        Command::Clear => ctx.clear()?,
        Command::Stackelberg => ctx.stackelberg()?,
        Command::Cooperate => ctx.cooperate(&mut emit)?,
        Command::Bargain => ctx.bargain(&mut emit)?,
        Command::Social => ctx.social()?,
        Command::Mpmp => ctx.mpmp()?,
        Command::Compare => ctx.compare()?,
        Command::Sweep => ctx.sweep(&mut emit)?,
    };
    let mut record = RunRecord {
        scenario_name: scenario.metadata.name.clone(),
        scenario_hash: scenario.hash(),
        command,
        settings: settings.clone(),
        summary,
        outputs,
        files: emit.files,
        wall_time_seconds: 0.0,
    };
    record.wall_time_seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        let name = format!("{}.json", command.as_str());
        let text = serde_json::to_string_pretty(&record).expect("record serializes");
        fs::write(dir.join(&name), text).map_err(Error::from).stage("write")?;
        record.files.push(name);
    }
    Ok(record)
}

type Produced = (BTreeMap<String, f64>, Value);

fn summary<const N: usize>(items: [(&str, f64); N]) -> BTreeMap<String, f64> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

struct Context<'a> {
    scenario: &'a Scenario,
    system: &'a System,
    settings: &'a RunSettings,
    discount: f64,
}

impl Context<'_> {
    fn config(&self) -> &AggregatorConfig {
        &self.scenario.aggregator
    }

    fn search(&self) -> &SearchSettings {
        &self.settings.search
    }

    fn validate(&self) -> Produced {
        let s = summary([
            ("n_buses", self.system.network.n_buses as f64),
            ("horizon", self.system.horizon() as f64),
            ("n_units", self.system.units.len() as f64),
            ("n_lines", self.system.network.n_lines() as f64),
        ]);
        let v = to_value(&s);
        (s, v)
    }

    fn clear(&self) -> Result<Produced> {
        let solver = &self.search().solver;
        let schedules = if self.settings.zero_storage {
            self.system.zero_schedules()
        } else {
            bargaining::max_aggregate_profit(self.system, self.config(), self.search())
                .stage("aggregate optimum")?
                .schedules
        };
        let market = self.system.clear(&schedules, solver).stage("clear")?;
        let load_payment = market.load_payment(&self.system.demand);
        let s = summary([
            ("system_cost", market.system_cost),
            ("load_payment", load_payment),
            ("kkt_residual", market.kkt_residual),
        ]);
        let v = serde_json::json!({
            "zero_storage": self.settings.zero_storage,
            "schedules": schedules,
            "market": market,
            "load_payment": load_payment,
        });
        Ok((s, v))
    }

    fn stackelberg(&self) -> Result<Produced> {
        let out = game::solve_stackelberg(self.system, self.config(), self.search()).stage("stackelberg")?;
        let market = self.system.clear(&out.schedules, &self.search().solver).stage("clear")?;
        let mut s = summary([
            ("agg_profit", out.agg_profit),
            ("su_profit_total", out.su_profits.iter().sum()),
            ("system_cost", market.system_cost),
        ]);
        let spread = scalar::is_scalarizable(self.system).then(|| {
            let unit = &self.system.units[0];
            (scalar::spread(unit, &out.prices[0]), scalar::charge_of(&out.schedules[0]))
        });
        if let Some((dtau, x)) = spread {
            s.insert("spread".into(), dtau);
            s.insert("charge".into(), x);
        }
        let v = serde_json::json!({
            "outcome": out,
            "spread": spread.map(|p| p.0),
            "system_cost": market.system_cost,
        });
        Ok((s, v))
    }

    fn bargaining(&self) -> Result<(BargainingProblem, BargainingOutcome)> {
        let problem =
            BargainingProblem::build(self.system, self.config(), self.discount, self.search()).stage("bargaining problem")?;
        let outcome = bargaining::bargain(self.system, &problem, &self.search().solver).stage("bargain")?;
        Ok((problem, outcome))
    }

    fn frontier(&self, problem: &BargainingProblem, outcome: &BargainingOutcome, emit: &mut Emitter) -> Result<()> {
        let unit = problem.managed[0];
        let points = bargaining::bargaining_frontier(
            self.system,
            problem,
            outcome,
            unit,
            self.settings.points,
            &self.search().solver,
        )
        .stage("frontier")?;
        emit.csv("frontier.csv", |w| bargaining::write_frontier_csv(&points, w)).stage("write")
    }

    fn bargain(&self, emit: &mut Emitter) -> Result<Produced> {
        let (problem, outcome) = self.bargaining()?;
        let mut s = summary([
            ("pi_star", outcome.pi_star),
            ("agg_profit", outcome.agg_profit),
            ("su_profit_total", outcome.su_profits.iter().sum()),
            ("sweeps", outcome.sweeps as f64),
        ]);
        if let Some(dtau) = outcome.spread {
            s.insert("spread".into(), dtau);
        }
        self.frontier(&problem, &outcome, emit)?;
        let v = serde_json::json!({ "problem": problem, "outcome": outcome });
        Ok((s, v))
    }

    fn cooperate(&self, emit: &mut Emitter) -> Result<Produced> {
        let (_, outcome) = self.bargaining()?;
        let repeated = RepeatedGameConfig {
            discount: self.discount,
            agreed_prices: outcome.agreed_prices.clone(),
            agreed_schedules: outcome.agreed_schedules.clone(),
        };
        let report = cooperation::cooperation_margins(self.system, self.config(), &repeated, self.search())
            .stage("cooperation margins")?;
        let min_su = report.su_margins.iter().copied().fold(f64::INFINITY, f64::min);
        let min_agg = report.agg_margin_per_su.iter().copied().fold(f64::INFINITY, f64::min);
        let mut s = summary([
            ("discount", self.discount),
            ("min_su_margin", min_su),
            ("min_agg_margin", min_agg),
            ("cooperative", f64::from(u8::from(report.cooperative))),
        ]);
        let mut v = serde_json::json!({
            "discount": self.discount,
            "agreement": outcome,
            "margins": report,
        });
        if scalar::is_scalarizable(self.system) {
            let solver = &self.search().solver;
            let dis = cooperation::scalar_disagreement(self.system, self.config(), self.search())
                .stage("disagreement point")?;
            let grid = RegionGrid::default_for(self.system, solver, self.settings.points).stage("cooperation region")?;
            let cells = cooperation::region_with(self.system, self.config(), self.discount, &grid, dis, solver)
                .stage("cooperation region")?;
            emit.csv("region.csv", |w| cooperation::write_region_csv(&cells, w)).stage("write")?;
            let x_hat = scalar::charge_of(&outcome.agreed_schedules[0]);
            let interval = cooperation::cooperation_interval(
                self.system,
                self.config(),
                self.discount,
                x_hat,
                (grid.dtau_min, grid.dtau_max),
                dis,
                solver,
            )
            .stage("cooperation interval")?;
            if let Some(a) = interval.agg_endpoint {
                s.insert("agg_endpoint".into(), a);
            }
            if let Some(e) = interval.su_endpoint {
                s.insert("su_endpoint".into(), e);
            }
            let mut counts = BTreeMap::new();
            for c in &cells {
                *counts.entry(c.label.as_str()).or_insert(0usize) += 1;
            }
            v["scalar"] = serde_json::json!({
                "disagreement": dis,
                "x_hat": x_hat,
                "grid": grid,
                "interval": interval,
                "region_counts": counts,
            });
        }
        Ok((s, v))
    }

    fn social(&self) -> Result<Produced> {
        let solver = &self.search().solver;
        let so = welfare::social_optimum(self.system, solver).stage("social optimum")?;
        let report = welfare::welfare_report(self.system, &so.schedules, solver).stage("welfare report")?;
        let s = summary([
            ("system_cost", so.system_cost),
            ("cost_no_storage", report.cost_no_storage),
            ("coalition_profit", report.agg_su_profit),
            ("load_payment", report.load_payment),
            ("kkt_residual", so.kkt_residual),
        ]);
        let v = serde_json::json!({ "optimum": so, "report": report });
        Ok((s, v))
    }

    fn mpmp(&self) -> Result<Produced> {
        let solver = &self.search().solver;
        let config = self
            .scenario
            .mpmp
            .clone()
            .unwrap_or_else(|| MpmpConfig::zeros(&self.system.network));
        let out = welfare::clear_with_mpmp(self.system, &config, solver).stage("mpmp")?;
        let so = welfare::social_optimum(self.system, solver).stage("social optimum")?;
        let distance = out
            .outcome
            .schedules
            .iter()
            .zip(&so.schedules)
            .flat_map(|(a, b)| (&a.to_vector() - &b.to_vector()).iter().map(|v| v.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        let s = summary([
            ("system_cost", out.report.cost_at_actions),
            ("social_cost", so.system_cost),
            ("coalition_profit", out.coalition_profit),
            ("distance_to_social", distance),
        ]);
        let v = serde_json::json!({
            "config": config,
            "result": out,
            "social_optimum": so,
            "distance_to_social": distance,
        });
        Ok((s, v))
    }

    fn compare(&self) -> Result<Produced> {
        let rows = welfare::compare(self.system, self.config(), self.search()).stage("compare")?;
        let mut s = BTreeMap::new();
        for r in &rows {
            let key = r.label.replace(' ', "_");
            s.insert(format!("{key}.profit"), r.profit);
            s.insert(format!("{key}.system_cost"), r.system_cost);
            s.insert(format!("{key}.load_payment"), r.load_payment);
        }
        Ok((s, to_value(&rows)))
    }

    fn sweep(&self, emit: &mut Emitter) -> Result<Produced> {
        let solver = &self.search().solver;
        let curve = welfare::sweep_cost_profit_curves(self.system, self.config(), self.settings.points, self.search())
            .stage("cost-profit curves")?;
        emit.csv("curve.csv", |w| welfare::write_curve_csv(&curve, w)).stage("write")?;
        let mut v = serde_json::json!({ "curve_points": curve.len() });
        if scalar::is_scalarizable(self.system) {
            let dis =
                cooperation::scalar_disagreement(self.system, self.config(), self.search()).stage("disagreement point")?;
            let grid = RegionGrid::default_for(self.system, solver, self.settings.points).stage("cooperation region")?;
            let cells = cooperation::region_with(self.system, self.config(), self.discount, &grid, dis, solver)
                .stage("cooperation region")?;
            emit.csv("region.csv", |w| cooperation::write_region_csv(&cells, w)).stage("write")?;
            v["region_cells"] = cells.len().into();
            v["disagreement"] = to_value(&dis);
        }
        let (problem, outcome) = self.bargaining()?;
        self.frontier(&problem, &outcome, emit)?;
        let mut s = BTreeMap::new();
        for p in curve.iter().filter(|p| !p.label.is_empty()) {
            s.insert(format!("{}.x", p.label), p.x);
            s.insert(format!("{}.system_cost", p.label), p.system_cost);
            s.insert(format!("{}.aggregate_profit", p.label), p.aggregate_profit);
        }
        let labelled: Vec<_> = curve.iter().filter(|p| !p.label.is_empty()).collect();
        v["labelled_points"] = to_value(&labelled);
        v["bargaining"] = to_value(&outcome);
        Ok((s, v))
    }
}

/// Table of profit, system cost and load payment per comparison row.
pub fn format_comparison(rows: &[welfare::ComparisonRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:>12} {:>12} {:>12}", "", "profit", "system cost", "load payment");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<18} {:>12.4} {:>12.4} {:>12.4}",
            r.label, r.profit, r.system_cost, r.load_payment
        );
    }
    out
}
