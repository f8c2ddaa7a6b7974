//! Cross-silo federated training: server and client state, FedAVG, the
//! pull → aggregate → push round, and centralized fine-tuning baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::dynpull::{
    bandwidth, cluster_persistence, select_dp, select_from_deltas, tensor_deltas, BandwidthRecord, Direction,
    PullMode, PullPolicy, Scope, SelectionResult,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::nn::{train_steps, ModelState, OptimizerState, TrainOutcome};
use crate::scalar::Scalar;
use crate::tensor::{Group, NamedTensor};

/// Stable seed derivation (splitmix64 over the parts).
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(base), |h, &p| splitmix(h ^ splitmix(p)))
}

#[derive(Debug, Clone)]
pub struct ServerState<T = f32> {
    central_model: ModelState<T>,
    round: usize,
    total_rounds: usize,
    client_weights: BTreeMap<String, u64>,
    total_n: u64,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(central_model: ModelState<T>, total_rounds: usize) -> Self {
        ServerState {
            central_model,
            round: 0,
            total_rounds,
            client_weights: BTreeMap::new(),
            total_n: 0,
        }
    }

    pub fn register(&mut self, client: &str, n_k: u64) -> Result<()> {
        if n_k == 0 {
            return Err(Error::EmptyCorpus.for_client(client));
        }
        if self.client_weights.insert(client.to_string(), n_k).is_some() {
            return Err(Error::DuplicateClient(client.to_string()));
        }
        self.total_n += n_k;
        Ok(())
    }

    pub fn model(&self) -> &ModelState<T> {
        &self.central_model
    }

    pub fn into_model(self) -> ModelState<T> {
        self.central_model
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn total_rounds(&self) -> usize {
        self.total_rounds
    }

    pub fn client_weights(&self) -> &BTreeMap<String, u64> {
        &self.client_weights
    }

    /// Σ n_k over registered clients.
    pub fn total_n(&self) -> u64 {
        self.total_n
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.round > self.total_rounds {
            return Err(Error::RoundLimit {
                round: self.round,
                total: self.total_rounds,
            });
        }
        let n: u64 = self.client_weights.values().sum();
        if n != self.total_n {
            return Err(Error::Config(format!("cached total {} != recomputed {n}", self.total_n)));
        }
        Ok(())
    }
}

/// Tensors a client sends to the server in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<T = f32> {
    pub client_id: String,
    pub tensors: Vec<NamedTensor<T>>,
    pub n_k: u64,
}

/// Per-tensor FedAVG weights over the clients that sent `tensor`, in
/// ascending client-id order.
pub fn aggregation_weights<T: Scalar>(updates: &[ClientUpdate<T>], tensor: &str) -> Vec<(String, f64)> {
    let mut senders: Vec<(&str, u64)> = updates
        .iter()
        .filter(|u| u.tensors.iter().any(|t| t.name() == tensor))
        .map(|u| (u.client_id.as_str(), u.n_k))
        .collect();
    senders.sort();
    let total: u64 = senders.iter().map(|(_, n)| n).sum();
    senders
        .into_iter()
        .map(|(c, n)| (c.to_string(), n as f64 / total as f64))
        .collect()
}

/// Data-size-weighted mean per tensor over the clients that sent it; tensors
/// nobody sent keep the server's value. Accumulates in f64.
pub fn fedavg_aggregate<T: Scalar>(server: &ServerState<T>, updates: &[ClientUpdate<T>]) -> Result<ServerState<T>> {
    let mut ordered: Vec<&ClientUpdate<T>> = updates.iter().collect();
    ordered.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    for w in ordered.windows(2) {
        if w[0].client_id == w[1].client_id {
            return Err(Error::DuplicateClient(w[0].client_id.clone()));
        }
    }
    let model = &server.central_model;
    let mut senders: BTreeMap<&str, Vec<(&NamedTensor<T>, u64)>> = BTreeMap::new();
    for u in &ordered {
        let fail = |tensor: &str, reason: String| Error::Aggregation {
            client: u.client_id.clone(),
            tensor: tensor.to_string(),
            reason,
        };
        if u.n_k == 0 {
            return Err(fail("*", "n_k is zero".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &u.tensors {
            let reference = model.get(t.name()).ok_or_else(|| fail(t.name(), "not in the central model".into()))?;
            if reference.shape() != t.shape() {
                return Err(fail(
                    t.name(),
                    format!("shape {:?}, server has {:?}", t.shape(), reference.shape()),
                ));
            }
            if !seen.insert(t.name()) {
                return Err(fail(t.name(), "sent twice".into()));
            }
            senders.entry(t.name()).or_default().push((t, u.n_k));
        }
    }
    let mut next = model.clone();
    for (name, from) in senders {
        let total: u64 = from.iter().map(|(_, n)| n).sum();
        let mut acc = vec![0.0f64; from[0].0.values().len()];
        for (t, n) in &from {
            let w = *n as f64 / total as f64;
            for (a, v) in acc.iter_mut().zip(t.values()) {
                *a += w * v.as_f64();
            }
        }
        let shape = model.get(name).expect("checked").shape().to_vec();
        next.replace(NamedTensor::new(name, shape, acc.into_iter().map(T::of).collect())?)?;
    }
    Ok(ServerState {
        central_model: next,
        round: server.round,
        total_rounds: server.total_rounds,
        client_weights: server.client_weights.clone(),
        total_n: server.total_n,
    })
}

/// One participating silo.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: String,
    pub corpus: Arc<Corpus>,
    pub model: ModelState,
    pub optimizer: OptimizerState,
    /// Post-training model of the previous round, as of pull time.
    pub snapshot: Option<ModelState>,
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl ClientState {
    /// A client starting from `model` with a fresh Adam optimizer.
    pub fn new(
        id: impl Into<String>,
        corpus: Arc<Corpus>,
        model: ModelState,
        steps_per_round: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let optimizer = OptimizerState::default_adam(&model)?;
        Ok(ClientState {
            id: id.into(),
            corpus,
            model,
            optimizer,
            snapshot: None,
            steps_per_round,
            batch_size,
            seed,
        })
    }

    pub fn n_k(&self) -> u64 {
        self.corpus.n_k() as u64
    }

    fn train(&mut self, steps: usize, seed: u64) -> Result<Vec<f64>> {
        let TrainOutcome {
            model,
            optimizer,
            losses,
        } = train_steps(
            self.model.clone(),
            self.optimizer.clone(),
            &self.corpus,
            steps,
            self.batch_size,
            seed,
        )?;
        self.model = model;
        self.optimizer = optimizer;
        Ok(losses)
    }
}

/// Further local training after federation, without server interaction.
pub fn local_finetune(mut client: ClientState, steps: usize) -> Result<ClientState> {
    let seed = mix_seed(client.seed, &[u64::MAX]);
    client.train(steps, seed).map_err(|e| e.for_client(&client.id))?;
    Ok(client)
}

/// What one client did in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundReport {
    pub client_id: String,
    pub n_k: u64,
    /// Mean minibatch loss over the round's local steps; absent when none ran.
    pub mean_loss: Option<f64>,
    pub selection: SelectionResult,
    pub pull: BandwidthRecord,
    pub push: BandwidthRecord,
    /// Tensors overwritten by the push when push filtering is active.
    pub push_kept: Option<Vec<String>>,
    /// The client's post-training model scored on every test domain.
    pub evals: Vec<EvalResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundReport>,
    /// The aggregated model scored on every test domain.
    pub server_evals: Vec<EvalResult>,
}

impl RoundReport {
    pub fn pulled_params(&self) -> u64 {
        self.clients.iter().map(|c| c.pull.params_sent).sum()
    }

    pub fn pushed_params(&self) -> u64 {
        self.clients.iter().map(|c| c.push.params_sent).sum()
    }
}

struct Pulled {
    update: ClientUpdate,
    selection: SelectionResult,
    pull: BandwidthRecord,
    mean_loss: Option<f64>,
}

fn pull_one(client: &mut ClientState, round: usize, index: usize, policy: &PullPolicy) -> Result<Pulled> {
    let losses = client.train(client.steps_per_round, mix_seed(client.seed, &[round as u64]))?;
    let mean_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
    let effective = if round == 0 {
        PullPolicy::full()
    } else {
        policy.clone().with_seed(mix_seed(policy.seed, &[round as u64, index as u64]))
    };
    let selection = select_dp(&client.model, client.snapshot.as_ref(), &effective)?;
    let pull = bandwidth(&selection.kept, &client.model, Direction::Pull)?;
    let tensors = selection
        .kept
        .iter()
        .map(|n| client.model.get(n).cloned().ok_or_else(|| Error::UnknownTensor(n.clone())))
        .collect::<Result<Vec<_>>>()?;
    client.snapshot = Some(client.model.clone());
    Ok(Pulled {
        update: ClientUpdate {
            client_id: client.id.clone(),
            tensors,
            n_k: client.n_k(),
        },
        selection,
        pull,
        mean_loss,
    })
}

fn push_one(
    client: &mut ClientState,
    server: &ModelState,
    round: usize,
    index: usize,
    policy: &PullPolicy,
) -> Result<(BandwidthRecord, Option<Vec<String>>)> {
    let filtered = policy.scope == Scope::PushAndPull && policy.mode != PullMode::Full && round > 0;
    if !filtered {
        client.model = server.clone();
        let all: Vec<String> = server.names().map(str::to_string).collect();
        return Ok((bandwidth(&all, server, Direction::Push)?, None));
    }
    let push_policy = policy.clone().with_seed(mix_seed(policy.seed, &[round as u64, index as u64, 1]));
    let selection = select_from_deltas(tensor_deltas(server, &client.model)?, &push_policy)?;
    for name in &selection.kept {
        client.model.replace(server.get(name).expect("same name set").clone())?;
    }
    let record = bandwidth(&selection.kept, server, Direction::Push)?;
    Ok((record, Some(selection.kept)))
}

/// One synchronous round: local training, pull per policy, FedAVG, push.
/// Clients train in parallel on the current rayon pool; aggregation and the
/// report are ordered by client id, so results do not depend on scheduling.
pub fn run_round(
    server: ServerState,
    clients: &mut [ClientState],
    policy: &PullPolicy,
) -> Result<(ServerState, RoundReport)> {
    if server.round >= server.total_rounds {
        return Err(Error::RoundLimit {
            round: server.round,
            total: server.total_rounds,
        });
    }
    policy.validate()?;
    let round = server.round;
    clients.sort_by(|a, b| a.id.cmp(&b.id));
    for c in clients.iter() {
        if server.client_weights.get(&c.id) != Some(&c.n_k()) {
            return Err(Error::Config(format!("client {} is not registered with n_k {}", c.id, c.n_k())));
        }
    }
    let pulled = clients
        .par_iter_mut()
        .enumerate()
        .map(|(i, c)| pull_one(c, round, i, policy).map_err(|e| e.for_client(&c.id)))
        .collect::<Result<Vec<_>>>()?;
    let updates: Vec<ClientUpdate> = pulled.iter().map(|p| p.update.clone()).collect();
    let mut next = fedavg_aggregate(&server, &updates)?;
    let mut reports = Vec::with_capacity(clients.len());
    for (i, (client, p)) in clients.iter_mut().zip(pulled).enumerate() {
        let (push, push_kept) =
            push_one(client, &next.central_model, round, i, policy).map_err(|e| e.for_client(&client.id))?;
        reports.push(ClientRoundReport {
            client_id: client.id.clone(),
            n_k: client.n_k(),
            mean_loss: p.mean_loss,
            selection: p.selection,
            pull: p.pull,
            push,
            push_kept,
            evals: Vec::new(),
        });
    }
    next.round += 1;
    Ok((
        next,
        RoundReport {
            round,
            clients: reports,
            server_evals: Vec::new(),
        },
    ))
}

/// A client's training split together with its held-out test split.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub train: Arc<Corpus>,
    pub test: Arc<Corpus>,
}

impl DomainData {
    pub fn name(&self) -> &str {
        self.train.domain()
    }
}

/// Scores `model` on every test split, in the given domain order.
pub fn evaluate_all<T: Scalar>(model: &ModelState<T>, domains: &[DomainData]) -> Result<Vec<EvalResult>> {
    domains.iter().map(|d| evaluate(model, &d.test)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlSettings {
    pub rounds: usize,
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub policy: PullPolicy,
    pub post_fl_finetune_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub client_id: String,
    pub steps: usize,
    pub before: Vec<EvalResult>,
    pub after: Vec<EvalResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPersistence {
    pub client_id: String,
    /// Jaccard overlap of consecutive kept sets, per group, from round 1 on.
    pub overlaps: Vec<BTreeMap<Group, f64>>,
}

#[derive(Debug, Clone)]
pub struct FlOutcome {
    pub rounds: Vec<RoundReport>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub final_evals: Vec<EvalResult>,
    pub post_finetune: Vec<FinetuneReport>,
    pub persistence: Vec<ClientPersistence>,
}

/// Federated training from a shared starting model: one client per domain,
/// `rounds` rounds with evaluation after each, then optional local fine-tuning.
pub fn run_fl(start: &ModelState, domains: &[DomainData], settings: &FlSettings) -> Result<FlOutcome> {
    settings.policy.validate()?;
    let mut server = ServerState::new(start.clone(), settings.rounds);
    let mut clients = Vec::with_capacity(domains.len());
    for d in domains {
        server.register(d.name(), d.train.n_k() as u64)?;
        let seed = mix_seed(settings.seed, &[clients.len() as u64]);
        clients.push(ClientState::new(
            d.name(),
            d.train.clone(),
            start.clone(),
            settings.steps_per_round,
            settings.batch_size,
            seed,
        )?);
    }
    let mut rounds = Vec::with_capacity(settings.rounds);
    for _ in 0..settings.rounds {
        let (next, mut report) = run_round(server, &mut clients, &settings.policy)?;
        server = next;
        report.server_evals = evaluate_all(server.model(), domains)?;
        for (entry, client) in report.clients.iter_mut().zip(&clients) {
            let trained = client.snapshot.as_ref().expect("set during the round");
            entry.evals = evaluate_all(trained, domains)?;
        }
        rounds.push(report);
    }
    let final_evals = evaluate_all(server.model(), domains)?;

    let mut post_finetune = Vec::new();
    if settings.post_fl_finetune_steps > 0 {
        for client in &clients {
            let before = evaluate_all(&client.model, domains)?;
            let tuned = local_finetune(client.clone(), settings.post_fl_finetune_steps)?;
            post_finetune.push(FinetuneReport {
                client_id: client.id.clone(),
                steps: settings.post_fl_finetune_steps,
                before,
                after: evaluate_all(&tuned.model, domains)?,
            });
        }
    }

    let persistence = persistence_of(&rounds);
    Ok(FlOutcome {
        rounds,
        server,
        clients,
        final_evals,
        post_finetune,
        persistence,
    })
}

/// Cluster persistence per client over rounds whose selection was norm-ranked.
pub fn persistence_of(rounds: &[RoundReport]) -> Vec<ClientPersistence> {
    let mut kept: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for r in rounds {
        for c in &r.clients {
            if matches!(c.selection.mode, PullMode::DpGreater | PullMode::DpLess) {
                kept.entry(&c.client_id).or_default().push(c.selection.kept.clone());
            }
        }
    }
    kept.into_iter()
        .filter_map(|(id, history)| {
            cluster_persistence(&history).ok().map(|overlaps| ClientPersistence {
                client_id: id.to_string(),
                overlaps,
            })
        })
        .collect()
}

/// Trains on the concatenation of `corpora`; large domains dominate the
/// minibatch stream in proportion to their size.
pub fn combined_finetune(
    model: ModelState,
    optimizer: OptimizerState,
    corpora: &[&Corpus],
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    if corpora.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let [single] = corpora {
        return train_steps(model, optimizer, single, steps, batch_size, seed);
    }
    let pool = Corpus::concat("combined", corpora.iter().copied())?;
    train_steps(model, optimizer, &pool, steps, batch_size, seed)
}

/// Trains on each corpus in turn, `steps_each` steps apiece, carrying the
/// optimizer state through the chain.
pub fn chained_finetune(
    model: ModelState,
    optimizer: OptimizerState,
    sequence: &[&Corpus],
    steps_each: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    let (first, rest) = sequence.split_first().ok_or(Error::EmptyCorpus)?;
    let mut out = train_steps(model, optimizer, first, steps_each, batch_size, seed)?;
    for (i, corpus) in rest.iter().enumerate() {
        let next = train_steps(
            out.model,
            out.optimizer,
            corpus,
            steps_each,
            batch_size,
            mix_seed(seed, &[i as u64 + 1]),
        )?;
        out.losses.extend(next.losses);
        out.model = next.model;
        out.optimizer = next.optimizer;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seeds_spread() {
        assert_ne!(mix_seed(1, &[0]), mix_seed(1, &[1]));
        assert_ne!(mix_seed(1, &[0, 1]), mix_seed(1, &[1, 0]));
        assert_eq!(mix_seed(7, &[3]), mix_seed(7, &[3]));
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(sizes in prop::collection::vec(1u64..10_000_000, 1..12)) {
            let t = NamedTensor::<f64>::zeros("out.b", vec![1]).unwrap();
            let ups: Vec<_> = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| ClientUpdate { client_id: format!("c{i}"), tensors: vec![t.clone()], n_k: n })
                .collect();
            let w = aggregation_weights(&ups, "out.b");
            prop_assert!((w.iter().map(|(_, x)| x).sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
