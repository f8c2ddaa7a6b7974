//! Config-driven experiment families: baselines, centralized fine-tuning,
//! federated runs, rounds ablation, pull-policy comparison and the
//! push-and-pull bandwidth-parity mode.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_domain, split, DomainKind, DomainSpec};
use crate::dynpull::{PullMode, PullPolicy, Scope};
use crate::error::{Error, Result};
use crate::fl::{chained_finetune, combined_finetune, evaluate_all, mix_seed, run_fl, DomainData, FlSettings};
use crate::nn::{init_model, train_steps, ModelConfig, ModelState, OptimizerState};
use crate::report::{report_write, timestamp_now, BandwidthTotals, ExperimentReport, ModelEvaluation, RunReport};

/// Environment variable capping how many clients train concurrently.
pub const THREADS_ENV: &str = "FEDPULL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    BaselineMatrix,
    CentralCombination,
    CentralChained,
    Fl,
    FlRoundsAblation,
    DpCompare,
    ControllersParity,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::BaselineMatrix => "baseline_matrix",
            ExperimentKind::CentralCombination => "central_combination",
            ExperimentKind::CentralChained => "central_chained",
            ExperimentKind::Fl => "fl",
            ExperimentKind::FlRoundsAblation => "fl_rounds_ablation",
            ExperimentKind::DpCompare => "dp_compare",
            ExperimentKind::ControllersParity => "controllers_parity",
        }
    }

    fn is_federated(self) -> bool {
        matches!(
            self,
            ExperimentKind::Fl
                | ExperimentKind::FlRoundsAblation
                | ExperimentKind::DpCompare
                | ExperimentKind::ControllersParity
        )
    }
}

fn default_domains() -> Vec<DomainSpec> {
    DomainSpec::default_profile(1)
}
fn default_pretrain_steps() -> usize {
    2000
}
fn default_steps_per_round() -> usize {
    200
}
fn default_rounds() -> usize {
    5
}
fn default_rounds_ablation() -> Vec<usize> {
    vec![5, 10, 50]
}
fn default_batch_size() -> usize {
    16
}
fn default_test_size() -> usize {
    100
}
fn default_dev_size() -> usize {
    50
}
fn default_bucket_width() -> f64 {
    5.0
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_domains")]
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: usize,
    /// Domain whose model initializes every client; defaults to the largest.
    #[serde(default)]
    pub pretrain_domain: Option<DomainKind>,
    #[serde(default = "default_steps_per_round")]
    pub steps_per_round: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Round counts compared by `fl_rounds_ablation` at a fixed step budget
    /// of `rounds × steps_per_round` per client.
    #[serde(default = "default_rounds_ablation")]
    pub rounds_ablation: Vec<usize>,
    #[serde(default)]
    pub policy: PullPolicy,
    #[serde(default)]
    pub post_fl_finetune_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Steps for centralized fine-tuning; defaults to `rounds × steps_per_round`.
    #[serde(default)]
    pub central_steps: Option<usize>,
    /// Chained fine-tuning order; defaults to descending corpus size.
    #[serde(default)]
    pub chain_order: Option<Vec<DomainKind>>,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_dev_size")]
    pub dev_size: usize,
    #[serde(default = "default_bucket_width")]
    pub histogram_bucket_width: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for everything except the experiment family.
    pub fn new(experiment: ExperimentKind) -> Self {
        serde_json::from_value(serde_json::json!({ "experiment": experiment })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn central_steps(&self) -> usize {
        self.central_steps.unwrap_or(self.rounds * self.steps_per_round)
    }

    fn pretrain_index(&self) -> usize {
        match self.pretrain_domain {
            Some(kind) => self.domains.iter().position(|d| d.kind == kind).expect("validated"),
            None => {
                let max = self.domains.iter().map(|d| d.size).max().unwrap_or(0);
                self.domains.iter().position(|d| d.size == max).unwrap_or(0)
            }
        }
    }

    fn split_sizes(&self, size: usize) -> (usize, usize) {
        (self.test_size.min(size / 5), self.dev_size.min(size / 10))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.policy.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.domains.is_empty() {
            return bad("domains must not be empty".into());
        }
        for (i, d) in self.domains.iter().enumerate() {
            d.validate().map_err(|e| Error::Config(e.to_string()))?;
            if self.domains[..i].iter().any(|o| o.kind == d.kind) {
                return bad(format!("domain {} listed twice", d.kind));
            }
            let (test_n, _) = self.split_sizes(d.size);
            if test_n == 0 {
                return bad(format!("domain {}: test_size must be positive", d.kind));
            }
        }
        if let Some(kind) = self.pretrain_domain {
            if !self.domains.iter().any(|d| d.kind == kind) {
                return bad(format!("pretrain_domain {kind} is not among the domains"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.histogram_bucket_width.is_nan() || self.histogram_bucket_width <= 0.0 {
            return bad("histogram_bucket_width must be positive".into());
        }
        if self.experiment.is_federated() && self.rounds == 0 {
            return bad(format!("{} requires rounds >= 1", self.experiment.as_str()));
        }
        if self.experiment.is_federated() && self.steps_per_round == 0 {
            return bad("steps_per_round must be positive".into());
        }
        if self.experiment == ExperimentKind::FlRoundsAblation {
            if self.rounds_ablation.is_empty() {
                return bad("rounds_ablation must not be empty".into());
            }
            let budget = self.rounds * self.steps_per_round;
            for &r in &self.rounds_ablation {
                if r == 0 || !budget.is_multiple_of(r) {
                    return bad(format!("rounds {r} does not divide the step budget {budget}"));
                }
            }
        }
        if let Some(order) = &self.chain_order {
            let mut a: Vec<_> = order.iter().map(|k| k.as_str()).collect();
            let mut b: Vec<_> = self.domains.iter().map(|d| d.kind.as_str()).collect();
            a.sort();
            b.sort();
            if a != b {
                return bad("chain_order must list every domain exactly once".into());
            }
        }
        Ok(())
    }
}

/// Client parallelism from `FEDPULL_THREADS`, defaulting to the core count.
pub fn client_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Corpora and checkpoints for one seed of an experiment.
struct SeedContext<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    model_config: ModelConfig,
    specs: Vec<DomainSpec>,
    domains: Vec<DomainData>,
    cache_dir: PathBuf,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn checkpoint_bytes(model: &ModelState) -> Vec<u8> {
    let mut buf = Vec::new();
    model.write_checkpoint(&mut buf).expect("writing to memory");
    buf
}

impl<'a> SeedContext<'a> {
    fn new(config: &'a ExperimentConfig, seed: u64) -> Result<Self> {
        let model_config = ModelConfig {
            seed: mix_seed(config.model.seed, &[seed]),
            ..config.model.clone()
        };
        let mut specs = Vec::with_capacity(config.domains.len());
        let mut domains = Vec::with_capacity(config.domains.len());
        for spec in &config.domains {
            let spec = DomainSpec {
                seed: mix_seed(spec.seed, &[seed]),
                ..spec.clone()
            };
            let corpus = generate_domain(&spec, model_config.max_len)?;
            let (test_n, dev_n) = config.split_sizes(spec.size);
            let (train, _dev, test) = split(&corpus, test_n, dev_n, mix_seed(spec.seed, &[1]))?;
            domains.push(DomainData {
                train: Arc::new(train),
                test: Arc::new(test),
            });
            specs.push(spec);
        }
        Ok(SeedContext {
            config,
            seed,
            model_config,
            specs,
            domains,
            cache_dir: config.output_dir.join(".cache"),
        })
    }

    /// A fresh model trained on one domain only, cached on disk by a hash of
    /// everything that determines it. Returns the model and its checksum.
    fn single_domain_model(&self, index: usize, steps: usize) -> Result<(ModelState, String)> {
        let (test_n, dev_n) = self.config.split_sizes(self.specs[index].size);
        let key = serde_json::json!({
            "format": 1,
            "model": self.model_config,
            "domain": self.specs[index],
            "split": [test_n, dev_n],
            "steps": steps,
            "batch_size": self.config.batch_size,
        });
        let digest = sha256_hex(key.to_string().as_bytes());
        let path = self.cache_dir.join(format!("{}-{}.ckpt", self.specs[index].kind, &digest[..16]));
        if let Ok(model) = ModelState::load(&path) {
            if model.config() == &self.model_config {
                let sum = sha256_hex(&checkpoint_bytes(&model));
                return Ok((model, sum));
            }
        }
        let init = init_model::<f32>(&self.model_config)?;
        let optimizer = OptimizerState::default_adam(&init)?;
        let model = train_steps(
            init,
            optimizer,
            &self.domains[index].train,
            steps,
            self.config.batch_size,
            self.model_config.seed,
        )?
        .model;
        let bytes = checkpoint_bytes(&model);
        fs::create_dir_all(&self.cache_dir).map_err(|e| Error::io(&self.cache_dir, e))?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok((model, sha256_hex(&bytes)))
    }

    fn pretrained(&self) -> Result<(ModelState, String)> {
        self.single_domain_model(self.config.pretrain_index(), self.config.pretrain_steps)
    }

    fn federated(&self, label: String, policy: PullPolicy, rounds: usize, steps_per_round: usize) -> Result<RunReport> {
        let (start, checksum) = self.pretrained()?;
        let policy = policy.normalized();
        let settings = FlSettings {
            rounds,
            steps_per_round,
            batch_size: self.config.batch_size,
            policy: PullPolicy {
                seed: mix_seed(policy.seed, &[self.seed]),
                ..policy.clone()
            },
            post_fl_finetune_steps: self.config.post_fl_finetune_steps,
            seed: mix_seed(self.seed, &[2]),
        };
        let out = run_fl(&start, &self.domains, &settings)?;
        Ok(RunReport {
            label,
            policy: Some(policy),
            start_checkpoint: Some(checksum),
            bandwidth: BandwidthTotals::of_rounds(&out.rounds),
            evaluations: vec![ModelEvaluation {
                model: "server".into(),
                stage: rounds,
                evals: out.final_evals,
            }],
            rounds: out.rounds,
            post_finetune: out.post_finetune,
            persistence: out.persistence,
        })
    }

    fn central_run(label: &str, checksum: String, evaluations: Vec<ModelEvaluation>) -> RunReport {
        RunReport {
            label: label.into(),
            policy: None,
            start_checkpoint: Some(checksum),
            rounds: Vec::new(),
            evaluations,
            post_finetune: Vec::new(),
            persistence: Vec::new(),
            bandwidth: BandwidthTotals::default(),
        }
    }

    fn runs(&self) -> Result<Vec<RunReport>> {
        let c = self.config;
        match c.experiment {
            ExperimentKind::Fl => Ok(vec![self.federated("fl".into(), c.policy.clone(), c.rounds, c.steps_per_round)?]),
            ExperimentKind::DpCompare => [PullMode::Full, PullMode::DpLess, PullMode::DpGreater, PullMode::Random]
                .into_iter()
                .map(|mode| {
                    let policy = PullPolicy {
                        mode,
                        scope: Scope::PullOnly,
                        ..c.policy.clone()
                    };
                    self.federated(mode.as_str().into(), policy, c.rounds, c.steps_per_round)
                })
                .collect(),
            ExperimentKind::ControllersParity => {
                let mode = match c.policy.mode {
                    PullMode::Full => PullMode::DpLess,
                    m => m,
                };
                Ok(vec![
                    self.federated("full".into(), PullPolicy::full(), c.rounds, c.steps_per_round)?,
                    self.federated(
                        "controllers".into(),
                        PullPolicy::controllers_parity(mode).with_seed(c.policy.seed),
                        c.rounds,
                        c.steps_per_round,
                    )?,
                ])
            }
            ExperimentKind::FlRoundsAblation => {
                let budget = c.rounds * c.steps_per_round;
                c.rounds_ablation
                    .iter()
                    .map(|&r| self.federated(format!("rounds_{r}"), c.policy.clone(), r, budget / r))
                    .collect()
            }
            ExperimentKind::BaselineMatrix => {
                let mut evaluations = Vec::new();
                for (i, d) in self.domains.iter().enumerate() {
                    let (model, _) = self.single_domain_model(i, c.pretrain_steps)?;
                    evaluations.push(ModelEvaluation {
                        model: d.name().to_string(),
                        stage: 0,
                        evals: evaluate_all(&model, &self.domains)?,
                    });
                }
                let (_, checksum) = self.pretrained()?;
                Ok(vec![Self::central_run("baseline", checksum, evaluations)])
            }
            ExperimentKind::CentralCombination => {
                let (start, checksum) = self.pretrained()?;
                let corpora: Vec<_> = self.domains.iter().map(|d| d.train.as_ref()).collect();
                let optimizer = OptimizerState::default_adam(&start)?;
                let tuned = combined_finetune(
                    start.clone(),
                    optimizer,
                    &corpora,
                    c.central_steps(),
                    c.batch_size,
                    mix_seed(self.seed, &[3]),
                )?;
                let evaluations = vec![
                    ModelEvaluation {
                        model: "pretrained".into(),
                        stage: 0,
                        evals: evaluate_all(&start, &self.domains)?,
                    },
                    ModelEvaluation {
                        model: "combined".into(),
                        stage: 1,
                        evals: evaluate_all(&tuned.model, &self.domains)?,
                    },
                ];
                Ok(vec![Self::central_run("combination", checksum, evaluations)])
            }
            ExperimentKind::CentralChained => {
                let (start, checksum) = self.pretrained()?;
                let order = self.chain_order();
                let steps_each = c.central_steps() / order.len();
                let mut evaluations = vec![ModelEvaluation {
                    model: "pretrained".into(),
                    stage: 0,
                    evals: evaluate_all(&start, &self.domains)?,
                }];
                let mut model = start.clone();
                let mut optimizer = OptimizerState::default_adam(&start)?;
                for (stage, &i) in order.iter().enumerate() {
                    let out = chained_finetune(
                        model,
                        optimizer,
                        &[self.domains[i].train.as_ref()],
                        steps_each,
                        c.batch_size,
                        mix_seed(self.seed, &[4, stage as u64]),
                    )?;
                    model = out.model;
                    optimizer = out.optimizer;
                    evaluations.push(ModelEvaluation {
                        model: self.domains[i].name().to_string(),
                        stage: stage + 1,
                        evals: evaluate_all(&model, &self.domains)?,
                    });
                }
                Ok(vec![Self::central_run("chained", checksum, evaluations)])
            }
        }
    }

    fn chain_order(&self) -> Vec<usize> {
        match &self.config.chain_order {
            Some(kinds) => kinds
                .iter()
                .map(|k| self.specs.iter().position(|s| s.kind == *k).expect("validated"))
                .collect(),
            None => {
                let mut idx: Vec<usize> = (0..self.specs.len()).collect();
                idx.sort_by(|&a, &b| self.specs[b].size.cmp(&self.specs[a].size));
                idx
            }
        }
    }
}

/// Runs every family member for one seed on a pool of `threads` workers.
pub fn run_seed(config: &ExperimentConfig, seed: u64, threads: usize) -> Result<ExperimentReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let ctx = SeedContext::new(config, seed)?;
        Ok(ExperimentReport {
            experiment: config.experiment.as_str().to_string(),
            seed,
            timestamp: timestamp_now(),
            config: serde_json::to_value(config)?,
            runs: ctx.runs()?,
        })
    })
}

/// Where the artifacts of one seed go.
pub fn seed_dir(config: &ExperimentConfig, seed: u64) -> PathBuf {
    config
        .output_dir
        .join(config.experiment.as_str())
        .join(seed.to_string())
}

/// Runs every seed, `seed_parallel` at a time, writing each seed's artifacts
/// under `output_dir/<experiment>/<seed>/`. Returns the written paths.
pub fn run_experiment(config: &ExperimentConfig, seed_parallel: usize) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let threads = client_threads()?;
    let workers = seed_parallel.max(1).min(config.seeds.len());
    let run_one = |seed: u64| -> Result<Vec<PathBuf>> {
        let report = run_seed(config, seed, threads)?;
        report_write(&report, &seed_dir(config, seed), config.histogram_bucket_width)
    };
    if workers <= 1 {
        let mut paths = Vec::new();
        for &seed in &config.seeds {
            paths.extend(run_one(seed)?);
        }
        return Ok(paths);
    }
    let results: Vec<Result<Vec<PathBuf>>> = std::thread::scope(|s| {
        let chunks: Vec<Vec<u64>> = (0..workers)
            .map(|w| config.seeds.iter().copied().skip(w).step_by(workers).collect())
            .collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|seeds| {
                let run_one = &run_one;
                s.spawn(move || {
                    seeds
                        .into_iter()
                        .map(run_one)
                        .collect::<Result<Vec<_>>>()
                        .map(|v| v.concat())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
    });
    let mut paths = Vec::new();
    for r in results {
        paths.extend(r?);
    }
    paths.sort();
    Ok(paths)
}
