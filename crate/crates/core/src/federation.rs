//! Server round loop, client selection and the three aggregation strategies.
//!
//! Each round the server picks `max(1, floor(C·(1 − cdr)))` clients uniformly
//! without replacement, sends them the current global model, lets each run its
//! local epochs, and aggregates the returned models:
//!
//! * **FedAvg / FedProx** take the sample-weighted mean
//!   `θ ← Σ_i (N_i / N) θ_i`, with `N` summed over this round's participants.
//!   FedProx differs only on the client side, where the loss carries a
//!   proximal pull `(μ/2)·||θ − θ_round_start||²`.
//! * **FedDropoutAvg** draws an independent keep-mask per client (each
//!   parameter kept with probability `1 − fdr`) and averages every parameter
//!   over the clients that kept it:
//!   `α_{k,l,i} = N_i R_{k,l,i} / Σ_j N_j R_{k,l,j}`. Where every client
//!   dropped a parameter the previous global value is retained.
//!
//! All randomness is drawn from [`RngStream`]s keyed by seed, round and
//! client, so clients may train concurrently without affecting results.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::debug;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{
    eval_loss, init_params, local_train_epoch, ClassWeights, LossConfig, ModelSpec,
    OptimizerConfig, OptimizerState,
};
use crate::param::{check_rate, draw_mask, DropoutMask, ParameterSet};
use crate::rng::{Purpose, RngStream, SERVER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAvg,
    FedProx,
    FedDropoutAvg,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::FedDropoutAvg => "feddropoutavg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Federated dropout rate: probability a client parameter is left out.
    pub fdr: f64,
    /// Client dropout rate: controls how many clients sit out each round.
    pub cdr: f64,
    pub prox_mu: f64,
}

impl StrategyConfig {
    pub fn fedavg() -> Self {
        Self {
            strategy: Strategy::FedAvg,
            fdr: 0.0,
            cdr: 0.0,
            prox_mu: 0.0,
        }
    }

    pub fn fedprox(prox_mu: f64) -> Self {
        Self {
            strategy: Strategy::FedProx,
            prox_mu,
            ..Self::fedavg()
        }
    }

    pub fn feddropoutavg(fdr: f64, cdr: f64) -> Self {
        Self {
            strategy: Strategy::FedDropoutAvg,
            fdr,
            cdr,
            prox_mu: 0.0,
        }
    }

    /// Range checks needed for a run to be well defined.
    pub fn check_ranges(&self) -> Result<()> {
        check_rate("fdr", self.fdr)?;
        check_rate("cdr", self.cdr)?;
        if !(self.prox_mu.is_finite() && self.prox_mu >= 0.0) {
            return Err(Error::Config(format!(
                "prox_mu must be finite and >= 0, got {}",
                self.prox_mu
            )));
        }
        if self.strategy != Strategy::FedDropoutAvg && self.fdr != 0.0 {
            return Err(Error::Config(format!(
                "fdr applies only to feddropoutavg ({} given fdr = {})",
                self.strategy.as_str(),
                self.fdr
            )));
        }
        if self.strategy != Strategy::FedProx && self.prox_mu != 0.0 {
            return Err(Error::Config(format!(
                "prox_mu applies only to fedprox ({} given prox_mu = {})",
                self.strategy.as_str(),
                self.prox_mu
            )));
        }
        Ok(())
    }

    /// Range checks plus the requirement that FedProx actually has a proximal
    /// term. Used for user-facing configuration.
    pub fn validate(&self) -> Result<()> {
        self.check_ranges()?;
        if self.strategy == Strategy::FedProx && self.prox_mu <= 0.0 {
            return Err(Error::Config("fedprox requires prox_mu > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: u32,
    pub local_epochs_per_round: u32,
    pub batch_size: usize,
    /// Participating client ids; their order fixes client indices.
    pub clients: Vec<String>,
    pub seed: u64,
    pub strategy: StrategyConfig,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
}

impl FederationConfig {
    fn check(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.local_epochs_per_round == 0 {
            return Err(Error::Config(
                "local_epochs_per_round must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.clients.is_empty() {
            return Err(Error::Config("no clients".into()));
        }
        self.strategy.check_ranges()?;
        self.model.validate()?;
        self.optimizer.validate()
    }

    /// The initial global model shared by every method run with this seed.
    pub fn initial_model(&self) -> Result<ParameterSet> {
        init_params(
            &self.model,
            RngStream::new(self.seed, 0, SERVER, Purpose::Init),
        )
    }
}

/// Number of clients taking part in each round: `max(1, floor(C·(1 − cdr)))`.
pub fn selection_count(n_clients: usize, cdr: f64) -> usize {
    // The 1e-9 keeps products like 10·(1 − 0.3) = 6.999... from flooring to 6.
    let kept = (n_clients as f64 * (1.0 - cdr) + 1e-9).floor() as usize;
    kept.clamp(1, n_clients.max(1))
}

/// Uniform sample without replacement of `selection_count` client indices,
/// returned in ascending (canonical) order.
pub fn select_clients(n_clients: usize, cdr: f64, stream: RngStream) -> Vec<usize> {
    let k = selection_count(n_clients, cdr);
    if k >= n_clients {
        return (0..n_clients).collect();
    }
    let mut chosen = index::sample(&mut stream.rng(), n_clients, k).into_vec();
    chosen.sort_unstable();
    chosen
}

fn total_mass(models: &[(ParameterSet, u64)]) -> Result<u64> {
    let first = models
        .first()
        .ok_or_else(|| Error::Data("no client models to aggregate".into()))?;
    let mut total = 0u64;
    for (p, n) in models {
        first.0.check_congruent(p)?;
        if *n == 0 {
            return Err(Error::Data("client with zero samples".into()));
        }
        total += n;
    }
    Ok(total)
}

/// Sample-weighted average `Σ (N_i / N) θ_i` over the given models.
pub fn aggregate_fedavg(models: &[(ParameterSet, u64)]) -> Result<ParameterSet> {
    let total = total_mass(models)? as f64;
    let mut acc = models[0].0.new_zeroed();
    for (p, n) in models {
        acc.axpy_assign(*n as f64 / total, p)?;
    }
    Ok(acc)
}

/// Per-parameter contribution weights of one masked aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionWeights {
    n_clients: usize,
    /// Per layer: survivor mass of each parameter index.
    survivor_mass: Vec<Vec<u64>>,
    /// Per layer: `alpha[k * n_clients + i]`.
    alphas: Vec<Vec<f64>>,
}

impl ContributionWeights {
    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    /// Total samples of clients that kept parameter `index` of layer `layer`.
    pub fn survivor_mass(&self, layer: usize, index: usize) -> u64 {
        self.survivor_mass[layer][index]
    }

    pub fn alpha(&self, layer: usize, index: usize, client: usize) -> f64 {
        self.alphas[layer][index * self.n_clients + client]
    }

    pub fn alphas_at(&self, layer: usize, index: usize) -> &[f64] {
        &self.alphas[layer][index * self.n_clients..(index + 1) * self.n_clients]
    }

    /// Number of parameters no client contributed to.
    pub fn fallback_count(&self) -> usize {
        self.survivor_mass
            .iter()
            .flatten()
            .filter(|&&m| m == 0)
            .count()
    }
}

/// Masked weighted average. At each parameter index the surviving clients
/// are averaged with weights `N_i R_i / Σ_j N_j R_j`; indices nobody kept take
/// the value of `prev_global`.
pub fn aggregate_masked(
    models: &[(ParameterSet, u64)],
    masks: &[DropoutMask],
    prev_global: &ParameterSet,
) -> Result<(ParameterSet, ContributionWeights)> {
    total_mass(models)?;
    prev_global.check_congruent(&models[0].0)?;
    if masks.len() != models.len() {
        return Err(Error::Data(format!(
            "{} masks for {} models",
            masks.len(),
            models.len()
        )));
    }
    if let Some(bad) = masks.iter().position(|m| !m.is_congruent(prev_global)) {
        return Err(Error::Congruence(format!(
            "mask {bad} does not match the model"
        )));
    }

    let n_clients = models.len();
    let mut out = prev_global.clone();
    let mut survivor_mass = Vec::with_capacity(out.layers().len());
    let mut alphas = Vec::with_capacity(out.layers().len());
    for (l, layer) in out.layers_mut().iter_mut().enumerate() {
        let len = layer.values.len();
        let mut masses = vec![0u64; len];
        let mut layer_alphas = vec![0.0; len * n_clients];
        for (k, value) in layer.values.iter_mut().enumerate() {
            let mass: u64 = models
                .iter()
                .zip(masks)
                .filter(|(_, m)| m.layers()[l][k])
                .map(|(&(_, n), _)| n)
                .sum();
            masses[k] = mass;
            if mass == 0 {
                continue;
            }
            let mut acc = 0.0;
            for (i, ((p, n), m)) in models.iter().zip(masks).enumerate() {
                if m.layers()[l][k] {
                    let alpha = *n as f64 / mass as f64;
                    layer_alphas[k * n_clients + i] = alpha;
                    acc += alpha * p.layer(l).values[k];
                }
            }
            *value = acc;
        }
        survivor_mass.push(masses);
        alphas.push(layer_alphas);
    }
    out.ensure_finite("masked aggregation")?;
    Ok((
        out,
        ContributionWeights {
            n_clients,
            survivor_mass,
            alphas,
        },
    ))
}

/// Dropout-masked aggregation. `clients[j]` is the client index of
/// `models[j]`; its mask is drawn from the `(seed, round, client, Mask)`
/// stream.
pub fn aggregate_feddropoutavg(
    models: &[(ParameterSet, u64)],
    clients: &[usize],
    fdr: f64,
    prev_global: &ParameterSet,
    seed: u64,
    round: u32,
) -> Result<(ParameterSet, ContributionWeights)> {
    if clients.len() != models.len() {
        return Err(Error::Data("one client index per model is required".into()));
    }
    let masks = clients
        .iter()
        .map(|&c| {
            draw_mask(
                prev_global,
                fdr,
                RngStream::new(seed, u64::from(round), c as u64, Purpose::Mask),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_masked(models, &masks, prev_global)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStat {
    pub client_id: String,
    pub train_loss: f64,
    pub n_samples: u64,
}

/// Audit record of one federated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub selected_client_ids: Vec<String>,
    pub clients: Vec<ClientRoundStat>,
    pub checksum: u64,
    pub total_val_loss: f64,
    /// Parameters no selected client kept (FedDropoutAvg only).
    pub fallback_indices: usize,
    pub wall_time_ms: f64,
}

/// Append-only JSON-lines writer for [`RoundRecord`]s.
pub struct RoundLog {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl RoundLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.writer, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Read back a JSON-lines file written by [`RoundLog`].
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

struct Client<'a> {
    id: String,
    train: Vec<&'a Sample>,
    val: Vec<&'a Sample>,
    loss: LossConfig,
}

fn prepare_clients<'a>(
    ids: &[String],
    datasets: &'a BTreeMap<String, ClientDataset>,
) -> Result<Vec<Client<'a>>> {
    ids.iter()
        .map(|id| {
            let ds = datasets
                .get(id)
                .ok_or_else(|| Error::Data(format!("unknown center {id}")))?;
            let train = ds.split(Split::Train);
            let val = ds.split(Split::Val);
            if train.is_empty() || val.is_empty() {
                return Err(Error::Data(format!(
                    "center {id} needs non-empty train and val splits"
                )));
            }
            let weights = ClassWeights::inverse_frequency(train.iter().copied());
            Ok(Client {
                id: id.clone(),
                train,
                val,
                loss: LossConfig::weighted(weights),
            })
        })
        .collect()
}

fn total_val_loss(model: &ParameterSet, clients: &[Client]) -> Result<f64> {
    clients
        .iter()
        .map(|c| eval_loss(model, &c.val, &c.loss))
        .sum()
}

/// Server-side state of a running federation.
pub struct Federation<'a> {
    cfg: FederationConfig,
    clients: Vec<Client<'a>>,
    global: ParameterSet,
}

impl<'a> Federation<'a> {
    pub fn new(
        cfg: FederationConfig,
        datasets: &'a BTreeMap<String, ClientDataset>,
    ) -> Result<Self> {
        cfg.check()?;
        let clients = prepare_clients(&cfg.clients, datasets)?;
        let global = cfg.initial_model()?;
        Ok(Self {
            cfg,
            clients,
            global,
        })
    }

    pub fn global(&self) -> &ParameterSet {
        &self.global
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    /// Broadcast, local training, aggregation. Round indices start at 0.
    pub fn run_round(&mut self, round: u32) -> Result<RoundRecord> {
        let started = Instant::now();
        let cfg = &self.cfg;
        let strategy = cfg.strategy;
        let selected = select_clients(
            self.clients.len(),
            strategy.cdr,
            RngStream::server(cfg.seed, u64::from(round), Purpose::Select),
        );
        let anchor = (strategy.strategy == Strategy::FedProx && strategy.prox_mu > 0.0)
            .then(|| self.global.clone());
        let global = &self.global;

        let trained: Vec<(ParameterSet, f64)> = selected
            .par_iter()
            .map(|&i| -> Result<(ParameterSet, f64)> {
                let client = &self.clients[i];
                let loss_cfg = LossConfig {
                    prox_mu: if anchor.is_some() {
                        strategy.prox_mu
                    } else {
                        0.0
                    },
                    ..client.loss
                };
                let mut params = global.clone();
                let mut opt = OptimizerState::new(cfg.optimizer, &params);
                let mut loss = 0.0;
                for e in 0..cfg.local_epochs_per_round {
                    let epoch = round * cfg.local_epochs_per_round + e;
                    let stream =
                        RngStream::new(cfg.seed, u64::from(epoch), i as u64, Purpose::Shuffle);
                    (params, loss) = local_train_epoch(
                        &params,
                        &client.train,
                        &loss_cfg,
                        anchor.as_ref(),
                        &mut opt,
                        epoch,
                        cfg.batch_size,
                        stream,
                    )?;
                }
                Ok((params, loss))
            })
            .collect::<Result<_>>()?;

        let stats: Vec<ClientRoundStat> = selected
            .iter()
            .zip(&trained)
            .map(|(&i, (_, loss))| ClientRoundStat {
                client_id: self.clients[i].id.clone(),
                train_loss: *loss,
                n_samples: self.clients[i].train.len() as u64,
            })
            .collect();
        let models: Vec<(ParameterSet, u64)> = trained
            .into_iter()
            .zip(&stats)
            .map(|((p, _), s)| (p, s.n_samples))
            .collect();

        let (next, fallback_indices) = match strategy.strategy {
            Strategy::FedAvg | Strategy::FedProx => (aggregate_fedavg(&models)?, 0),
            Strategy::FedDropoutAvg => {
                let (p, w) = aggregate_feddropoutavg(
                    &models,
                    &selected,
                    strategy.fdr,
                    &self.global,
                    cfg.seed,
                    round,
                )?;
                (p, w.fallback_count())
            }
        };
        let val_loss = total_val_loss(&next, &self.clients)?;
        self.global = next;
        debug!(
            "round {round}: {} clients, val loss {val_loss:.6}, fallback {fallback_indices}",
            selected.len()
        );
        Ok(RoundRecord {
            round,
            selected_client_ids: stats.iter().map(|s| s.client_id.clone()).collect(),
            clients: stats,
            checksum: self.global.checksum(),
            total_val_loss: val_loss,
            fallback_indices,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FederationResult {
    pub best_model: ParameterSet,
    /// Round index (0-based) whose aggregate was selected.
    pub best_round: u32,
    pub init_checksum: u64,
    pub history: Vec<RoundRecord>,
}

/// Run every round and keep the aggregate with the lowest total validation
/// loss over the training centers (earliest round on ties).
pub fn run_federation(
    cfg: &FederationConfig,
    datasets: &BTreeMap<String, ClientDataset>,
) -> Result<FederationResult> {
    run_federation_with(cfg, datasets, |_| Ok(()))
}

/// [`run_federation`] with a callback invoked after every round.
pub fn run_federation_with(
    cfg: &FederationConfig,
    datasets: &BTreeMap<String, ClientDataset>,
    mut on_round: impl FnMut(&RoundRecord) -> Result<()>,
) -> Result<FederationResult> {
    let mut fed = Federation::new(cfg.clone(), datasets)?;
    let init_checksum = fed.global().checksum();
    let mut best: Option<(f64, u32, ParameterSet)> = None;
    let mut history = Vec::with_capacity(cfg.rounds as usize);
    for t in 0..cfg.rounds {
        let record = fed.run_round(t)?;
        on_round(&record)?;
        if best
            .as_ref()
            .is_none_or(|(loss, _, _)| record.total_val_loss < *loss)
        {
            best = Some((record.total_val_loss, t, fed.global().clone()));
        }
        history.push(record);
    }
    let (_, best_round, best_model) = best.expect("rounds >= 1");
    Ok(FederationResult {
        best_model,
        best_round,
        init_checksum,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub checksum: u64,
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub best_model: ParameterSet,
    pub best_epoch: u32,
    pub init_checksum: u64,
    pub history: Vec<EpochRecord>,
}

/// Plain (non-federated) training for `cfg.rounds · local_epochs_per_round`
/// epochs with best-epoch selection on `val`. Momentum persists across
/// epochs. `slot` is the client index used for shuffle streams.
fn train_isolated(
    cfg: &FederationConfig,
    train: &[&Sample],
    val: &[&Sample],
    slot: usize,
) -> Result<TrainingResult> {
    let loss_cfg = LossConfig::weighted(ClassWeights::inverse_frequency(train.iter().copied()));
    let mut params = cfg.initial_model()?;
    let init_checksum = params.checksum();
    let mut opt = OptimizerState::new(cfg.optimizer, &params);
    let mut best: Option<(f64, u32, ParameterSet)> = None;
    let epochs = cfg.rounds * cfg.local_epochs_per_round;
    let mut history = Vec::with_capacity(epochs as usize);
    for epoch in 0..epochs {
        let stream = RngStream::new(cfg.seed, u64::from(epoch), slot as u64, Purpose::Shuffle);
        let (next, train_loss) = local_train_epoch(
            &params,
            train,
            &loss_cfg,
            None,
            &mut opt,
            epoch,
            cfg.batch_size,
            stream,
        )?;
        params = next;
        let val_loss = eval_loss(&params, val, &loss_cfg)?;
        if best.as_ref().is_none_or(|(l, _, _)| val_loss < *l) {
            best = Some((val_loss, epoch, params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            checksum: params.checksum(),
        });
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainingResult {
        best_model,
        best_epoch,
        init_checksum,
        history,
    })
}

/// One model trained on the union of every client's training split, selected
/// on the union of their validation splits.
pub fn run_centralized(
    cfg: &FederationConfig,
    datasets: &BTreeMap<String, ClientDataset>,
) -> Result<TrainingResult> {
    cfg.check()?;
    let clients = prepare_clients(&cfg.clients, datasets)?;
    let train: Vec<&Sample> = clients
        .iter()
        .flat_map(|c| c.train.iter().copied())
        .collect();
    let val: Vec<&Sample> = clients.iter().flat_map(|c| c.val.iter().copied()).collect();
    train_isolated(cfg, &train, &val, 0)
}

/// One model per client trained only on its own data.
pub fn run_local_baselines(
    cfg: &FederationConfig,
    datasets: &BTreeMap<String, ClientDataset>,
) -> Result<BTreeMap<String, TrainingResult>> {
    cfg.check()?;
    let clients = prepare_clients(&cfg.clients, datasets)?;
    let results: Vec<TrainingResult> = clients
        .par_iter()
        .enumerate()
        .map(|(i, c)| train_isolated(cfg, &c.train, &c.val, i))
        .collect::<Result<_>>()?;
    Ok(clients.iter().map(|c| c.id.clone()).zip(results).collect())
}
