//! In-process federated simulation: FedAvg rounds with DP local training and
//! a public shared dataset mixed into every client's data.
//!
//! Each round the server samples clients without replacement, broadcasts the
//! global model, every selected client trains locally on its partition plus
//! the shared data, and the server averages the returned models weighted by
//! client data size. All randomness is derived from `(seed, round, client)`,
//! so results do not depend on the order in which clients run.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLedger;
use crate::data::{dirichlet_partition, Dataset};
use crate::dp_optim::{train_from, TrainConfig, STREAM_INIT};
use crate::error::{Error, Result};
use crate::nn::{evaluate, init_model, ModelState};
use crate::numerics::{RngState, Tensor};
use crate::scalar::Scalar;

const STREAM_SHARED: u64 = 10;
const STREAM_PARTITION: u64 = 11;
const STREAM_SELECT: u64 = 12;
const STREAM_CLIENT: u64 = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    /// Fraction of the training set set aside as public shared data.
    #[serde(default)]
    pub shared_fraction: f64,
    /// Dirichlet concentration of the label partition.
    pub alpha: f64,
    /// Local optimizer settings; `epochs` and `steps` are replaced by `local_epochs`.
    pub train: TrainConfig,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::validation("need at least one client"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::validation(format!(
                "clients per round must lie in [1, {}], got {}",
                self.num_clients, self.clients_per_round
            )));
        }
        if !(0.0..1.0).contains(&self.shared_fraction) {
            return Err(Error::validation(format!(
                "shared fraction must lie in [0, 1), got {}",
                self.shared_fraction
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::validation(format!("alpha must be positive, got {}", self.alpha)));
        }
        self.train.validate()
    }
}

/// Server to client: the current global model.
#[derive(Debug, Clone)]
pub struct Broadcast<T> {
    pub round: usize,
    pub model: Arc<ModelState<T>>,
}

/// Client to server: the locally trained model and its bookkeeping.
#[derive(Debug, Clone)]
pub struct ClientUpdate<T> {
    pub round: usize,
    pub client: usize,
    pub model: ModelState<T>,
    pub num_examples: usize,
    /// Loss of the client's last local step (`None` if no step ran).
    pub final_loss: Option<f64>,
    pub ledger: PrivacyLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<usize>,
    pub client_losses: Vec<Option<f64>>,
    pub accuracy: Option<f64>,
    /// Cumulative ε of each participating client, `None` when unbounded.
    pub client_epsilons: Vec<Option<f64>>,
}

/// Flat CSV form of a [`RoundRecord`]; list fields are `;`-separated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub clients: String,
    pub client_losses: String,
    pub accuracy: Option<f64>,
    pub client_epsilons: String,
}

fn join<I: IntoIterator<Item = String>>(items: I) -> String {
    items.into_iter().collect::<Vec<_>>().join(";")
}

fn opt(v: &Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RoundRecord {
    pub fn to_row(&self) -> RoundRow {
        RoundRow {
            round: self.round,
            clients: join(self.clients.iter().map(usize::to_string)),
            client_losses: join(self.client_losses.iter().map(opt)),
            accuracy: self.accuracy,
            client_epsilons: join(self.client_epsilons.iter().map(opt)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FederationOutcome<T> {
    pub model: ModelState<T>,
    pub rounds: Vec<RoundRecord>,
    pub ledgers: Vec<PrivacyLedger>,
    /// Final data (partition plus shared) size of each client.
    pub client_sizes: Vec<usize>,
}

/// Splits off a label-balanced uniform subset of `round(fraction * N)`
/// examples. Both parts keep the original example order.
pub fn make_shared_dataset<T: Scalar>(
    dataset: &Dataset<T>,
    shared_fraction: f64,
    rng: &mut RngState,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(0.0..1.0).contains(&shared_fraction) {
        return Err(Error::validation(format!(
            "shared fraction must lie in [0, 1), got {shared_fraction}"
        )));
    }
    let target = (shared_fraction * dataset.len() as f64).round() as usize;
    let mut by_class = dataset.class_indices();
    for members in &mut by_class {
        rng.shuffle(members);
    }
    // Round-robin over classes in random order keeps per-class counts within one.
    let mut class_order: Vec<usize> = (0..by_class.len()).collect();
    rng.shuffle(&mut class_order);
    let mut taken = vec![0usize; by_class.len()];
    let mut chosen = Vec::with_capacity(target);
    while chosen.len() < target {
        let mut progressed = false;
        for &c in &class_order {
            if chosen.len() == target {
                break;
            }
            if taken[c] < by_class[c].len() {
                chosen.push(by_class[c][taken[c]]);
                taken[c] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    chosen.sort_unstable();
    let mut is_shared = vec![false; dataset.len()];
    for &i in &chosen {
        is_shared[i] = true;
    }
    let rest: Vec<usize> = (0..dataset.len()).filter(|&i| !is_shared[i]).collect();
    Ok((dataset.subset(&chosen)?, dataset.subset(&rest)?))
}

/// RNG of client `client` in round `round`.
pub fn client_rng(root: &RngState, round: usize, client: usize) -> RngState {
    root.derive(&[STREAM_CLIENT, round as u64, client as u64])
}

/// Runs `local_epochs` epochs of the configured optimizer from the broadcast model.
pub fn client_training<T: Scalar>(
    client: usize,
    broadcast: &Broadcast<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    local_epochs: usize,
    rng: &RngState,
) -> Result<ClientUpdate<T>> {
    if data.is_empty() {
        return Err(Error::validation(format!("client {client} has no data")));
    }
    let mut local = cfg.clone();
    local.epochs = local_epochs;
    local.steps = None;
    local.lot_size = local.lot_size.min(data.len());
    let outcome = train_from(&local, (*broadcast.model).clone(), data, None, rng)?;
    Ok(ClientUpdate {
        round: broadcast.round,
        client,
        final_loss: outcome.records.last().map(|r| r.loss),
        model: outcome.model,
        num_examples: data.len(),
        ledger: outcome.ledger,
    })
}

/// Parameter-wise weighted mean. Weights are normalized to sum to one; a
/// single model is returned unchanged.
pub fn aggregate<T: Scalar>(models: &[ModelState<T>], weights: &[f64]) -> Result<ModelState<T>> {
    let first = models
        .first()
        .ok_or_else(|| Error::validation("nothing to aggregate"))?;
    if weights.len() != models.len() {
        return Err(Error::shape("one weight per model is required"));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::validation("aggregation weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::validation("aggregation weights sum to zero"));
    }
    for m in &models[1..] {
        if m.arch() != first.arch() {
            return Err(Error::shape("models to aggregate have different architectures"));
        }
    }
    if models.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc: Vec<Vec<f64>> = first.params().map(|p| vec![0.0; p.len()]).collect();
    for (m, &w) in models.iter().zip(weights) {
        let w = w / total;
        for (a, p) in acc.iter_mut().zip(m.params()) {
            for (x, &v) in a.iter_mut().zip(p.data()) {
                *x += w * v.as_f64();
            }
        }
    }
    let tensors = acc
        .into_iter()
        .zip(first.params())
        .map(|(a, p)| Tensor::new(p.shape().to_vec(), a.into_iter().map(T::of).collect()))
        .collect::<Result<Vec<_>>>()?;
    first.with_layers(tensors)
}

/// Client datasets: Dirichlet partition of the non-shared data, each joined with the shared set.
pub fn client_datasets<T: Scalar>(cfg: &FedConfig, dataset: &Dataset<T>, root: &RngState) -> Result<Vec<Dataset<T>>> {
    let (shared, rest) = make_shared_dataset(dataset, cfg.shared_fraction, &mut root.derive(&[STREAM_SHARED]))?;
    let partition = dirichlet_partition(&rest, cfg.num_clients, cfg.alpha, &mut root.derive(&[STREAM_PARTITION]))?;
    partition
        .client_indices
        .iter()
        .map(|idx| rest.subset(idx)?.concat(&shared))
        .collect()
}

/// Runs the whole federation from a freshly initialized global model.
pub fn run_federation<T: Scalar>(
    cfg: &FedConfig,
    dataset: &Dataset<T>,
    eval: Option<&Dataset<T>>,
    root: &RngState,
) -> Result<FederationOutcome<T>> {
    cfg.validate()?;
    let clients = client_datasets(cfg, dataset, root)?;
    let mut global = init_model::<T>(&cfg.train.arch, &mut root.derive(&[STREAM_INIT]))?;
    let mut ledgers: Vec<PrivacyLedger> = (0..cfg.num_clients)
        .map(|_| PrivacyLedger::new(cfg.train.delta, cfg.train.accounting))
        .collect::<Result<_>>()?;
    let mut rounds = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let mut select_rng = root.derive(&[STREAM_SELECT, round as u64]);
        let mut selected: Vec<usize> = select_rng.permutation(cfg.num_clients)[..cfg.clients_per_round].to_vec();
        selected.sort_unstable();

        let broadcast = Broadcast {
            round,
            model: Arc::new(global.clone()),
        };
        let updates: Vec<ClientUpdate<T>> = selected
            .par_iter()
            .map(|&k| {
                client_training(
                    k,
                    &broadcast,
                    &clients[k],
                    &cfg.train,
                    cfg.local_epochs,
                    &client_rng(root, round, k),
                )
            })
            .collect::<Result<_>>()?;

        let weights: Vec<f64> = updates.iter().map(|u| u.num_examples as f64).collect();
        let models: Vec<ModelState<T>> = updates.iter().map(|u| u.model.clone()).collect();
        global = aggregate(&models, &weights)?;

        for u in &updates {
            ledgers[u.client].steps.extend_from_slice(&u.ledger.steps);
        }
        let accuracy = eval.map(|e| evaluate(&global, e)).transpose()?;
        rounds.push(RoundRecord {
            round: round + 1,
            clients: selected.clone(),
            client_losses: updates.iter().map(|u| u.final_loss).collect(),
            accuracy,
            client_epsilons: selected.iter().map(|&k| ledgers[k].epsilon().ok()).collect(),
        });
    }

    Ok(FederationOutcome {
        model: global,
        rounds,
        ledgers,
        client_sizes: clients.iter().map(Dataset::len).collect(),
    })
}
