//! Experiment orchestration behind the `fedsim` CLI.
//!
//! An experiment is described by one TOML file (see `configs/default.toml`).
//! Every command writes into `output_dir`:
//!
//! ```text
//! output_dir/
//!   config.resolved          fully-resolved config, TOML
//!   reports.csv              method,center_id,group,n_pos,n_neg,f1,auroc
//!   summary.csv              method,group,n_centers,mean_f1,sd_f1,mean_auroc,sd_auroc
//!   methods.csv              init/best checksums and selected round per method
//!   {method}/rounds.jsonl    federated methods: one RoundRecord per line
//!   {method}/epochs.jsonl    centralized: one EpochRecord per line
//!   {method}/{center}.jsonl  local baselines: per-center EpochRecords
//!   {method}/matrix.csv      local baselines: every model on every center
//!   {method}/model.json      selected model
//!   grid.csv                 `grid` only
//!   fold{j}/...              `kfold` only: one run layout per fold
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_federation, kfold_center_rotation, load_csv_federation, ClientDataset, DomainShift,
    FederationLayout, Range, SynthConfig,
};
use crate::error::{Error, Result};
use crate::federation::{
    run_centralized, run_federation_with, run_local_baselines, FederationConfig, RoundLog,
    StrategyConfig,
};
use crate::metrics::{
    evaluate_local_models, evaluate_model, summarize, write_reports_csv, write_summary_csv,
    EvalGroup, EvalReport, SummaryTable, DEFAULT_THRESHOLD,
};
use crate::model::{ModelSpec, OptimizerConfig};
use crate::param::ParameterSet;
use crate::rng::{Purpose, RngStream};

/// Synthetic data section; the experiment seed is used for generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub n_centers: usize,
    pub input_dim: usize,
    pub patients_per_center: Range<usize>,
    pub tiles_per_patient: Range<usize>,
    pub class_pos_fraction: Range<f64>,
    pub class_separation: f64,
    pub domain_shift: DomainShift,
}

impl SyntheticSource {
    pub fn with_seed(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_centers: self.n_centers,
            input_dim: self.input_dim,
            patients_per_center: self.patients_per_center,
            tiles_per_patient: self.tiles_per_patient,
            class_pos_fraction: self.class_pos_fraction,
            class_separation: self.class_separation,
            domain_shift: self.domain_shift,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Csv { path: PathBuf },
}

/// Either explicit center lists or a seeded random division.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayoutConfig {
    Explicit {
        training_centers: Vec<String>,
        independent_centers: Vec<String>,
    },
    Random {
        n_training: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    pub local_epochs_per_round: u32,
    pub batch_size: usize,
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_rounds() -> u32 {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MethodKind {
    Centralized,
    Local,
    FedAvg { cdr: f64 },
    FedProx { prox_mu: f64, cdr: f64 },
    FedDropoutAvg { fdr: f64, cdr: f64 },
}

impl MethodKind {
    pub fn label(&self) -> &'static str {
        match self {
            MethodKind::Centralized => "centralized",
            MethodKind::Local => "local",
            MethodKind::FedAvg { .. } => "fedavg",
            MethodKind::FedProx { .. } => "fedprox",
            MethodKind::FedDropoutAvg { .. } => "feddropoutavg",
        }
    }

    pub fn strategy(&self) -> Option<StrategyConfig> {
        match *self {
            MethodKind::Centralized | MethodKind::Local => None,
            MethodKind::FedAvg { cdr } => Some(StrategyConfig {
                cdr,
                ..StrategyConfig::fedavg()
            }),
            MethodKind::FedProx { prox_mu, cdr } => Some(StrategyConfig {
                cdr,
                ..StrategyConfig::fedprox(prox_mu)
            }),
            MethodKind::FedDropoutAvg { fdr, cdr } => Some(StrategyConfig::feddropoutavg(fdr, cdr)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    /// Output name; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub kind: MethodKind,
}

impl MethodConfig {
    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.kind.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub cdr_values: Vec<f64>,
    pub fdr_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<LayoutConfig>,
    pub training: TrainingConfig,
    pub methods: Vec<MethodConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kfold: Option<usize>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(out) = &overrides.output_dir {
            self.output_dir = out.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(s) = &self.data {
            s.with_seed(self.seed).validate()?;
            if s.input_dim != self.training.model.input_dim {
                return Err(Error::Config(format!(
                    "model input_dim {} does not match data input_dim {}",
                    self.training.model.input_dim, s.input_dim
                )));
            }
        }
        self.training.model.validate()?;
        self.training.optimizer.validate()?;
        if self.training.rounds == 0
            || self.training.local_epochs_per_round == 0
            || self.training.batch_size == 0
        {
            return Err(Error::Config(
                "rounds, local_epochs_per_round and batch_size must be positive".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !names.insert(m.name()) {
                return Err(Error::Config(format!("duplicate method name {}", m.name())));
            }
            if let Some(s) = m.kind.strategy() {
                s.validate()?;
            }
        }
        if let Some(grid) = &self.grid {
            if grid.cdr_values.is_empty() || grid.fdr_values.is_empty() {
                return Err(Error::Config("grid value lists must be non-empty".into()));
            }
            for &fdr in &grid.fdr_values {
                for &cdr in &grid.cdr_values {
                    StrategyConfig::feddropoutavg(fdr, cdr).validate()?;
                }
            }
            let has_dropout = self
                .methods
                .iter()
                .any(|m| matches!(m.kind, MethodKind::FedDropoutAvg { .. }));
            if !has_dropout {
                return Err(Error::Config(
                    "a grid is only valid together with a feddropoutavg method".into(),
                ));
            }
        }
        if let Some(k) = self.kfold {
            if k < 2 {
                return Err(Error::Config(format!("kfold must be at least 2, got {k}")));
            }
        }
        Ok(())
    }

    fn federation_config(&self, clients: &[String], strategy: StrategyConfig) -> FederationConfig {
        FederationConfig {
            rounds: self.training.rounds,
            local_epochs_per_round: self.training.local_epochs_per_round,
            batch_size: self.training.batch_size,
            clients: clients.to_vec(),
            seed: self.seed,
            strategy,
            model: self.training.model.clone(),
            optimizer: self.training.optimizer,
        }
    }
}

/// Read, override and validate a config file. Every failure here is a
/// configuration error.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<BTreeMap<String, ClientDataset>> {
    let datasets = match &cfg.data {
        DataSource::Synthetic(s) => generate_federation(&s.with_seed(cfg.seed))?,
        DataSource::Csv { path } => load_csv_federation(path, cfg.seed)?,
    };
    let dim = cfg.training.model.input_dim;
    if let Some(bad) = datasets.values().find(|d| d.input_dim() != Some(dim)) {
        return Err(Error::Data(format!(
            "center {} has feature dimension {:?}, model expects {dim}",
            bad.center_id,
            bad.input_dim()
        )));
    }
    Ok(datasets)
}

pub fn resolve_layout(
    cfg: &ExperimentConfig,
    datasets: &BTreeMap<String, ClientDataset>,
) -> Result<FederationLayout> {
    let centers: Vec<String> = datasets.keys().cloned().collect();
    let layout = match &cfg.layout {
        Some(LayoutConfig::Explicit {
            training_centers,
            independent_centers,
        }) => FederationLayout {
            training_centers: training_centers.clone(),
            independent_centers: independent_centers.clone(),
        },
        Some(LayoutConfig::Random { n_training }) => FederationLayout::random(
            &centers,
            *n_training,
            RngStream::server(cfg.seed, 0, Purpose::Layout),
        )?,
        None => FederationLayout {
            training_centers: centers,
            independent_centers: Vec::new(),
        },
    };
    layout.validate()?;
    for c in layout
        .training_centers
        .iter()
        .chain(&layout.independent_centers)
    {
        if !datasets.contains_key(c) {
            return Err(Error::Config(format!("layout names unknown center {c}")));
        }
    }
    Ok(layout)
}

/// What one method produced.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub name: String,
    pub kind: MethodKind,
    pub init_checksum: u64,
    /// Selected round (federated) or epoch (centralized); `None` for local.
    pub best_index: Option<u32>,
    /// Checksum of the selected model (sum over centers for local).
    pub best_checksum: u64,
    /// Total validation loss of the selected model(s).
    pub best_val_loss: f64,
    pub reports: Vec<EvalReport>,
    pub best_models: BTreeMap<String, ParameterSet>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub layout: FederationLayout,
    pub methods: Vec<MethodOutcome>,
    pub summary: SummaryTable,
}

impl Comparison {
    pub fn method(&self, name: &str) -> Option<&MethodOutcome> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn report_rows(&self) -> Vec<(String, EvalReport)> {
        self.methods
            .iter()
            .flat_map(|m| m.reports.iter().map(|r| (m.name.clone(), r.clone())))
            .collect()
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn run_method(
    cfg: &ExperimentConfig,
    method: &MethodConfig,
    datasets: &BTreeMap<String, ClientDataset>,
    layout: &FederationLayout,
    out: Option<&Path>,
) -> Result<MethodOutcome> {
    let name = method.name().to_string();
    let dir = out.map(|o| o.join(&name));
    if let Some(d) = &dir {
        create_dir(d)?;
    }
    info!("running {name}");
    let clients = &layout.training_centers;
    let outcome = match method.kind {
        MethodKind::Centralized => {
            let fed = cfg.federation_config(clients, StrategyConfig::fedavg());
            let result = run_centralized(&fed, datasets)?;
            if let Some(d) = &dir {
                let mut log = RoundLog::create(&d.join("epochs.jsonl"))?;
                for r in &result.history {
                    log.append(r)?;
                }
                result.best_model.save(&d.join("model.json"))?;
            }
            MethodOutcome {
                name,
                kind: method.kind,
                init_checksum: result.init_checksum,
                best_index: Some(result.best_epoch),
                best_checksum: result.best_model.checksum(),
                best_val_loss: result.history[result.best_epoch as usize].val_loss,
                reports: evaluate_model(&result.best_model, datasets, layout, DEFAULT_THRESHOLD)?,
                best_models: BTreeMap::from([("global".to_string(), result.best_model)]),
            }
        }
        MethodKind::Local => {
            let fed = cfg.federation_config(clients, StrategyConfig::fedavg());
            let results = run_local_baselines(&fed, datasets)?;
            let models: BTreeMap<String, ParameterSet> = results
                .iter()
                .map(|(c, r)| (c.clone(), r.best_model.clone()))
                .collect();
            let (reports, cells) =
                evaluate_local_models(&models, datasets, layout, DEFAULT_THRESHOLD)?;
            if let Some(d) = &dir {
                for (center, r) in &results {
                    let mut log = RoundLog::create(&d.join(format!("{center}.jsonl")))?;
                    for e in &r.history {
                        log.append(e)?;
                    }
                    r.best_model.save(&d.join(format!("model_{center}.json")))?;
                }
                let path = d.join("matrix.csv");
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record([
                    "model_center",
                    "center_id",
                    "group",
                    "n_pos",
                    "n_neg",
                    "f1",
                    "auroc",
                ])?;
                for c in &cells {
                    let r = &c.report;
                    w.write_record([
                        c.model_center.clone(),
                        r.center_id.clone(),
                        r.group.to_string(),
                        r.n_pos.to_string(),
                        r.n_neg.to_string(),
                        r.f1.to_string(),
                        r.auroc.map(|v| v.to_string()).unwrap_or_default(),
                    ])?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
            let init = results.values().next().map_or(0, |r| r.init_checksum);
            if results.values().any(|r| r.init_checksum != init) {
                return Err(Error::Data(
                    "local baselines started from different models".into(),
                ));
            }
            MethodOutcome {
                name,
                kind: method.kind,
                init_checksum: init,
                best_index: None,
                best_checksum: models
                    .values()
                    .fold(0u64, |acc, m| acc.wrapping_add(m.checksum())),
                best_val_loss: results
                    .values()
                    .map(|r| r.history[r.best_epoch as usize].val_loss)
                    .sum(),
                reports,
                best_models: models,
            }
        }
        kind => {
            let strategy = kind.strategy().expect("federated method");
            let fed = cfg.federation_config(clients, strategy);
            let mut log = match &dir {
                Some(d) => Some(RoundLog::create(&d.join("rounds.jsonl"))?),
                None => None,
            };
            let result = run_federation_with(&fed, datasets, |r| match log.as_mut() {
                Some(l) => l.append(r),
                None => Ok(()),
            })?;
            if let Some(d) = &dir {
                result.best_model.save(&d.join("model.json"))?;
            }
            MethodOutcome {
                name,
                kind,
                init_checksum: result.init_checksum,
                best_index: Some(result.best_round),
                best_checksum: result.best_model.checksum(),
                best_val_loss: result.history[result.best_round as usize].total_val_loss,
                reports: evaluate_model(&result.best_model, datasets, layout, DEFAULT_THRESHOLD)?,
                best_models: BTreeMap::from([("global".to_string(), result.best_model)]),
            }
        }
    };
    Ok(outcome)
}

fn write_methods_csv(path: &Path, methods: &[MethodOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "kind",
        "init_checksum",
        "best_index",
        "best_checksum",
        "best_val_loss",
    ])?;
    for m in methods {
        w.write_record([
            m.name.clone(),
            m.kind.label().to_string(),
            m.init_checksum.to_string(),
            m.best_index.map(|i| i.to_string()).unwrap_or_default(),
            m.best_checksum.to_string(),
            m.best_val_loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Train and evaluate every configured method on one layout. All methods share
/// data, layout, initial model and optimizer recipe; the shared initial model
/// is verified by checksum. Writes result files when `out` is given.
pub fn compare_methods(
    cfg: &ExperimentConfig,
    datasets: &BTreeMap<String, ClientDataset>,
    layout: &FederationLayout,
    out: Option<&Path>,
) -> Result<Comparison> {
    if let Some(o) = out {
        create_dir(o)?;
    }
    let methods = cfg
        .methods
        .iter()
        .map(|m| run_method(cfg, m, datasets, layout, out))
        .collect::<Result<Vec<_>>>()?;

    let init = methods[0].init_checksum;
    if let Some(m) = methods.iter().find(|m| m.init_checksum != init) {
        return Err(Error::Data(format!(
            "method {} started from a different model ({} vs {init})",
            m.name, m.init_checksum
        )));
    }
    info!("all methods started from model checksum {init}");

    let grouped: Vec<(String, Vec<EvalReport>)> = methods
        .iter()
        .map(|m| (m.name.clone(), m.reports.clone()))
        .collect();
    let summary = summarize(&grouped)?;
    let comparison = Comparison {
        layout: layout.clone(),
        methods,
        summary,
    };
    if let Some(o) = out {
        write_reports_csv(&o.join("reports.csv"), &comparison.report_rows())?;
        write_summary_csv(&o.join("summary.csv"), &comparison.summary)?;
        write_methods_csv(&o.join("methods.csv"), &comparison.methods)?;
        let layout_json = serde_json::to_string_pretty(layout)?;
        let path = o.join("layout.json");
        fs::write(&path, layout_json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(comparison)
}

fn write_resolved(cfg: &ExperimentConfig) -> Result<()> {
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("config.resolved");
    let mut resolved = cfg.clone();
    for m in &mut resolved.methods {
        m.name = Some(m.name().to_string());
    }
    fs::write(&path, resolved.to_toml()?).map_err(|e| Error::io(&path, e))
}

/// `fedsim run`: every method on one layout.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Comparison> {
    write_resolved(cfg)?;
    let datasets = load_datasets(cfg)?;
    let layout = resolve_layout(cfg, &datasets)?;
    compare_methods(cfg, &datasets, &layout, Some(&cfg.output_dir))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cdr: f64,
    pub fdr: f64,
    pub best_round: u32,
    pub total_val_loss: f64,
    pub mean_f1_local: f64,
    pub mean_f1_independent: Option<f64>,
    pub best_checksum: u64,
    pub selected: bool,
}

/// `fedsim grid`: one FedDropoutAvg run per `(cdr, fdr)` pair; the pair with
/// the lowest total validation loss is marked selected (first on ties).
pub fn cmd_grid(cfg: &ExperimentConfig) -> Result<Vec<GridRow>> {
    let grid = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [grid] section".into()))?;
    write_resolved(cfg)?;
    let datasets = load_datasets(cfg)?;
    let layout = resolve_layout(cfg, &datasets)?;
    let cells: Vec<(f64, f64)> = grid
        .cdr_values
        .iter()
        .flat_map(|&c| grid.fdr_values.iter().map(move |&f| (c, f)))
        .collect();
    let grid_dir = cfg.output_dir.join("grid");
    create_dir(&grid_dir)?;

    let mut rows = cells
        .par_iter()
        .map(|&(cdr, fdr)| {
            let method = MethodConfig {
                name: Some(format!("cdr{cdr}_fdr{fdr}")),
                kind: MethodKind::FedDropoutAvg { fdr, cdr },
            };
            let outcome = run_method(cfg, &method, &datasets, &layout, Some(&grid_dir))?;
            let mean = |g: EvalGroup| {
                let f1s: Vec<f64> = outcome
                    .reports
                    .iter()
                    .filter(|r| r.group == g)
                    .map(|r| r.f1)
                    .collect();
                (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64)
            };
            Ok(GridRow {
                cdr,
                fdr,
                best_round: outcome.best_index.unwrap_or(0),
                total_val_loss: outcome.best_val_loss,
                mean_f1_local: mean(EvalGroup::LocalTest).unwrap_or(f64::NAN),
                mean_f1_independent: mean(EvalGroup::Independent),
                best_checksum: outcome.best_checksum,
                selected: false,
            })
        })
        .collect::<Result<Vec<GridRow>>>()?;

    let best = rows
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
            Some((_, l)) if l <= r.total_val_loss => acc,
            _ => Some((i, r.total_val_loss)),
        })
        .map(|(i, _)| i)
        .expect("non-empty grid");
    rows[best].selected = true;

    let path = cfg.output_dir.join("grid.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Read back `grid.csv`.
pub fn read_grid_csv(path: &Path) -> Result<Vec<GridRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone)]
pub struct KfoldOutcome {
    pub folds: Vec<Comparison>,
    pub pooled: SummaryTable,
}

/// `fedsim kfold`: rotate which group of centers is held out, run every
/// method per fold, and pool the reports of all folds into one summary.
pub fn cmd_kfold(cfg: &ExperimentConfig) -> Result<KfoldOutcome> {
    let k = cfg
        .kfold
        .ok_or_else(|| Error::Config("config has no kfold setting".into()))?;
    write_resolved(cfg)?;
    let datasets = load_datasets(cfg)?;
    let centers: Vec<String> = datasets.keys().cloned().collect();
    let layouts =
        kfold_center_rotation(&centers, k, RngStream::server(cfg.seed, 1, Purpose::Layout))?;

    let mut folds = Vec::with_capacity(k);
    for (j, layout) in layouts.iter().enumerate() {
        layout.validate()?;
        let dir = cfg.output_dir.join(format!("fold{j}"));
        folds.push(compare_methods(cfg, &datasets, layout, Some(&dir))?);
    }
    let mut pooled: Vec<(String, Vec<EvalReport>)> = cfg
        .methods
        .iter()
        .map(|m| (m.name().to_string(), Vec::new()))
        .collect();
    for fold in &folds {
        for (name, reports) in &mut pooled {
            reports.extend(
                fold.method(name)
                    .expect("method ran")
                    .reports
                    .iter()
                    .cloned(),
            );
        }
    }
    let pooled = summarize(&pooled)?;
    write_summary_csv(&cfg.output_dir.join("summary.csv"), &pooled)?;
    Ok(KfoldOutcome { folds, pooled })
}

/// Default experiment config shipped with the repository.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::Strategy;

    #[test]
    fn default_config_parses() {
        let cfg = ExperimentConfig::from_toml(DEFAULT_CONFIG).unwrap();
        assert_eq!(cfg.training.rounds, 20);
        assert_eq!(cfg.methods.len(), 5);
        assert_eq!(cfg.training.optimizer, OptimizerConfig::default());
        let grid = cfg.grid.as_ref().unwrap();
        assert_eq!(grid.cdr_values, vec![0.0, 0.1, 0.2, 0.4]);
        assert_eq!(grid.fdr_values, vec![0.0, 0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_toml(DEFAULT_CONFIG).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = DEFAULT_CONFIG.to_string();
        let cases = [
            base.replace("prox_mu = 0.01", "prox_mu = 0.0"),
            base.replace("fdr = 0.3", "fdr = 1.5"),
            base.replace("kfold = 3", "kfold = 1"),
            base.replace("batch_size = ", "batch_sz = "),
            base.replace("hidden_dims = [16]", "hidden_dims = []"),
        ];
        for (i, text) in cases.iter().enumerate() {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))),
                "case {i} accepted"
            );
        }
    }

    #[test]
    fn grid_requires_dropout_method() {
        let mut cfg = ExperimentConfig::from_toml(DEFAULT_CONFIG).unwrap();
        cfg.methods
            .retain(|m| !matches!(m.kind, MethodKind::FedDropoutAvg { .. }));
        assert!(cfg.validate().is_err());
        cfg.grid = None;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn method_names_default_to_kind() {
        let m = MethodConfig {
            name: None,
            kind: MethodKind::FedAvg { cdr: 0.0 },
        };
        assert_eq!(m.name(), "fedavg");
        assert_eq!(m.kind.strategy().unwrap().strategy, Strategy::FedAvg);
    }
}
