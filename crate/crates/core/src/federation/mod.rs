//! Synchronous round-based federation of `m` clients and one server.
//!
//! Every client participates in every round. For CE-LoRA a round is: local
//! fine-tuning from the client's `C̄`, upload of `C`, server-side similarity
//! and personalized aggregation, download of the new `C̄`. The baselines swap
//! in FedAvg over `A`/`B` (or `B` only), or no communication at all.

pub mod checkpoint;
pub mod messages;
pub mod metrics;

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::adapter::{param_counts, Trainable};
use crate::aggregation::{build_plan_with, fedavg_aggregate, ffa_aggregate, personalized_aggregate, weighted_average, SimilarityMatrix};
use crate::config::{CoreAggregation, DatasetSpec, ExperimentConfig, Method, Sigma};
use crate::error::{Error, Result};
use crate::partition::{dirichlet_partition, heterogeneity, load_csv, synth_blobs, train_test_split, Dataset, PartitionSpec};
use crate::seed;
use crate::similarity_data::{data_similarity_matrix, fit_gmm_set, Bandwidth, DataSimilarity, EmOptions, GmmSet, TransportOptions};
use crate::similarity_model::{model_similarity_matrix, ProbeSet};
use crate::training::{evaluate, local_finetune, EvalMetrics, Featurizer, LayerFactors, LocalFitResult, LocalModel, TrainConfig};

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use messages::{Direction, Message};
pub use metrics::{final_accuracy_csv, read_jsonl, spread, ClientRecord, CommSummary, MetricsWriter, RoundRecord, SimilaritySnapshot, Summary};

/// One client's private data and adapter state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: LocalModel,
    /// Featurized training inputs.
    pub train_x: Array2<f64>,
    pub train_y: Vec<usize>,
    pub test_x: Array2<f64>,
    pub test_y: Vec<usize>,
    /// Core matrices received from the server, applied at the start of the next round.
    pub c_bar: Option<Vec<Array2<f64>>>,
}

impl ClientState {
    pub fn n_train(&self) -> usize {
        self.train_y.len()
    }

    /// Held-out metrics; falls back to the training shard when nothing was held out.
    pub fn evaluate(&self) -> Result<EvalMetrics> {
        if self.test_y.is_empty() {
            evaluate(&self.model, self.train_x.view(), &self.train_y)
        } else {
            evaluate(&self.model, self.test_x.view(), &self.test_y)
        }
    }

    pub fn factors(&self) -> Vec<LayerFactors> {
        self.model
            .layers
            .iter()
            .map(|l| LayerFactors { a: l.a.clone(), c: l.c.clone(), b: l.b.clone() })
            .collect()
    }
}

/// What the server retains between rounds.
#[derive(Debug, Clone, Default)]
pub struct ServerState {
    /// Fixed for the whole run: computed once from the uploaded mixtures.
    pub data_similarity: Option<DataSimilarity>,
    pub last_similarity: Option<SimilarityMatrix>,
    pub last_weights: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub record: RoundRecord,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone)]
pub struct Federation {
    pub config: ExperimentConfig,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub probe: ProbeSet,
    pub classes: usize,
    /// Rounds completed so far.
    pub round: usize,
    pub heterogeneity: f64,
    /// Messages exchanged before the first round.
    pub setup_messages: Vec<Message>,
}

/// Build the dataset described by the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSpec::Synthetic { classes, samples, raw_dim, separation, noise } => {
            synth_blobs(*classes, *samples, *raw_dim, *separation, *noise, seed::derive(cfg.seed, "dataset", &[]))
        }
        DatasetSpec::Csv { path, label_column, has_header } => load_csv(path, label_column, *has_header),
    }
}

fn partition_spec(cfg: &ExperimentConfig) -> PartitionSpec {
    PartitionSpec {
        clients: cfg.partition.clients,
        alpha: cfg.partition.alpha,
        seed: seed::derive(cfg.seed, "partition", &[]),
        min_samples_per_client: cfg.partition.min_samples_per_client,
    }
}

/// Client shards for the config, as index lists into [`load_dataset`]'s output.
pub fn partition_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    dirichlet_partition(&data.labels, &partition_spec(cfg))
}

fn trainable(method: Method) -> Trainable {
    match method {
        Method::CeLora | Method::LocalOnly => Trainable::ALL,
        Method::FedavgLora => Trainable::AB,
        Method::FfaLora => Trainable::B_ONLY,
    }
}

fn wrap(client: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Client { client, source: Box::new(e) }
}

impl Federation {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = load_dataset(config)?;
        let shards = partition_dataset(config, &data)?;
        let featurizer = Featurizer::new(data.dim(), config.model.feature_dim, seed::derive(config.seed, "featurizer", &[]));
        let template = LocalModel::new(
            featurizer.clone(),
            config.model.hidden_layers,
            data.class_count,
            config.model.rank,
            seed::derive(config.seed, "model", &[]),
        )?;
        let clients = shards
            .iter()
            .enumerate()
            .map(|(i, shard)| {
                let (train, test) = train_test_split(shard, config.partition.test_fraction, seed::derive(config.seed, "split", &[i as u64]));
                let featurize = |idx: &[usize]| -> Result<Array2<f64>> {
                    if idx.is_empty() {
                        return Ok(Array2::zeros((0, featurizer.feature_dim())));
                    }
                    featurizer.apply(data.features.select(Axis(0), idx).view())
                };
                Ok(ClientState {
                    id: i,
                    model: template.clone(),
                    train_x: featurize(&train)?,
                    train_y: train.iter().map(|&j| data.labels[j]).collect(),
                    test_x: featurize(&test)?,
                    test_y: test.iter().map(|&j| data.labels[j]).collect(),
                    c_bar: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let probe = ProbeSet::new(config.similarity.n_probe, config.model.rank, seed::derive(config.seed, "probe", &[]))?;
        let mut fed = Self {
            config: config.clone(),
            clients,
            server: ServerState::default(),
            probe,
            classes: data.class_count,
            round: 0,
            heterogeneity: heterogeneity(&data.labels, &shards),
            setup_messages: Vec::new(),
        };
        if config.method == Method::CeLora && config.similarity.use_data {
            fed.exchange_mixtures()?;
        }
        Ok(fed)
    }

    /// Clients fit per-category mixtures to their features and upload them;
    /// the server turns them into the (static) data-similarity matrix.
    pub fn exchange_mixtures(&mut self) -> Result<()> {
        let s = &self.config.similarity;
        let opts = EmOptions { max_iter: s.em_max_iter, tol: s.em_tol };
        // one EM seed for every client, so a summary depends only on the shard
        let em_seed = seed::derive(self.config.seed, "gmm", &[]);
        let sets = self
            .clients
            .par_iter()
            .map(|c| {
                fit_gmm_set(c.train_x.view(), &c.train_y, s.components, em_seed, opts)
                    .map_err(wrap(c.id))
            })
            .collect::<Result<Vec<GmmSet>>>()?;
        let bandwidth = match s.sigma {
            Sigma::Mode(_) => Bandwidth::Median,
            Sigma::Fixed(v) => Bandwidth::Fixed(v),
        };
        let sim = data_similarity_matrix(&sets, bandwidth, TransportOptions { eps_factor: s.sinkhorn_eps_factor })?;
        log::debug!("data similarity sigma = {}", sim.sigma);
        self.setup_messages = sets.into_iter().enumerate().map(|(client, set)| Message::GmmUpload { client, set }).collect();
        self.server.data_similarity = Some(sim);
        Ok(())
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    fn train_counts(&self) -> Vec<usize> {
        self.clients.iter().map(ClientState::n_train).collect()
    }

    /// Run one full round and return its record and message log.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let t = self.round + 1;
        let method = self.config.method;
        let mask = trainable(method);
        let master = self.config.seed;
        let tc = &self.config.train;
        let base = TrainConfig {
            epochs_per_round: tc.epochs_per_round,
            batch_size: tc.batch_size,
            learning_rate: tc.learning_rate,
            seed: 0,
        };
        let fits = self
            .clients
            .par_iter_mut()
            .map(|c| {
                let cfg = TrainConfig { seed: seed::derive(master, "train", &[c.id as u64, t as u64]), ..base };
                let c_init = if method == Method::CeLora { c.c_bar.take() } else { None };
                local_finetune(&mut c.model, c.train_x.view(), &c.train_y, c_init.as_deref(), &cfg, mask).map_err(wrap(c.id))
            })
            .collect::<Result<Vec<LocalFitResult>>>()?;

        let mut messages = Vec::new();
        let mut weights = None;
        let mut similarity = None;
        let mut fell_back = false;
        match method {
            Method::CeLora => {
                let cores: Vec<Vec<Array2<f64>>> = fits.iter().map(|f| f.factors.iter().map(|l| l.c.clone()).collect()).collect();
                for (client, cs) in cores.iter().enumerate() {
                    messages.push(Message::CUpload { client, round: t, cores: cs.clone() });
                }
                let (c_bars, sim, w, fb) = self.aggregate_cores(&cores)?;
                fell_back = fb;
                for (c, cs) in self.clients.iter_mut().zip(c_bars) {
                    messages.push(Message::CBarDownload { client: c.id, round: t, cores: cs.clone() });
                    c.c_bar = Some(cs);
                }
                similarity = sim;
                weights = w;
            }
            Method::FedavgLora | Method::FfaLora => {
                let counts = self.train_counts();
                let layers = self.clients[0].model.layers.len();
                let with_a = method == Method::FedavgLora;
                let mut a_bar = Vec::with_capacity(layers);
                let mut b_bar = Vec::with_capacity(layers);
                for l in 0..layers {
                    let bs: Vec<&Array2<f64>> = fits.iter().map(|f| &f.factors[l].b).collect();
                    if with_a {
                        let as_: Vec<&Array2<f64>> = fits.iter().map(|f| &f.factors[l].a).collect();
                        let (a, b) = fedavg_aggregate(&as_, &bs, &counts)?;
                        a_bar.push(a);
                        b_bar.push(b);
                    } else {
                        b_bar.push(ffa_aggregate(&bs, &counts)?);
                    }
                }
                let a_msg = with_a.then(|| a_bar.clone());
                for (client, f) in fits.iter().enumerate() {
                    messages.push(Message::FactorUpload {
                        client,
                        round: t,
                        a: with_a.then(|| f.factors.iter().map(|l| l.a.clone()).collect()),
                        b: f.factors.iter().map(|l| l.b.clone()).collect(),
                    });
                }
                for c in &mut self.clients {
                    for (l, layer) in c.model.layers.iter_mut().enumerate() {
                        if with_a {
                            layer.a.assign(&a_bar[l]);
                        }
                        layer.b.assign(&b_bar[l]);
                    }
                    messages.push(Message::FactorDownload { client: c.id, round: t, a: a_msg.clone(), b: b_bar.clone() });
                }
            }
            Method::LocalOnly => {}
        }

        let evals = self.clients.par_iter().map(|c| c.evaluate().map_err(wrap(c.id))).collect::<Result<Vec<_>>>()?;
        let mut uploaded = vec![0u64; self.clients.len()];
        for m in &messages {
            if m.direction() == Direction::Upload {
                uploaded[m.client()] += m.payload_params();
            }
        }
        let clients: Vec<ClientRecord> = fits
            .iter()
            .zip(&evals)
            .enumerate()
            .map(|(id, (f, e))| ClientRecord {
                id,
                train_loss: f.final_loss,
                eval_loss: e.loss,
                eval_accuracy: e.accuracy,
                uploaded_params: uploaded[id],
            })
            .collect();
        let (mean, worst, best) = spread(&clients.iter().map(|c| c.eval_accuracy).collect::<Vec<_>>());
        self.round = t;
        Ok(RoundOutcome {
            record: RoundRecord {
                round: t,
                method,
                clients,
                mean_accuracy: mean,
                worst_accuracy: worst,
                best_accuracy: best,
                weights,
                similarity,
                fell_back_to_local: fell_back,
            },
            messages,
        })
    }

    /// Server step for CE-LoRA. Returns each client's `C̄`, plus what to log.
    #[allow(clippy::type_complexity)]
    fn aggregate_cores(
        &mut self,
        cores: &[Vec<Array2<f64>>],
    ) -> Result<(Vec<Vec<Array2<f64>>>, Option<SimilaritySnapshot>, Option<Vec<Vec<f64>>>, bool)> {
        let m = cores.len();
        let s = &self.config.similarity;
        if self.config.aggregation.core_mode == CoreAggregation::Fedavg {
            let counts = self.train_counts();
            let layers = cores[0].len();
            let avg = (0..layers)
                .map(|l| weighted_average(&cores.iter().map(|c| &c[l]).collect::<Vec<_>>(), &counts))
                .collect::<Result<Vec<_>>>()?;
            return Ok((vec![avg; m], None, None, false));
        }
        let data = match (&self.server.data_similarity, s.use_data) {
            (Some(d), true) => d.similarity.clone(),
            _ => Array2::zeros((m, m)),
        };
        let model = if s.use_model { model_similarity_matrix(cores, &self.probe)? } else { Array2::zeros((m, m)) };
        // with both signals disabled every pair is equally similar
        let data = if !s.use_data && !s.use_model { Array2::ones((m, m)) } else { data };
        let sim = SimilarityMatrix::combine(data, model, s.model_weight)?;
        let snapshot = SimilaritySnapshot {
            data: metrics::rows(&sim.data),
            model: metrics::rows(&sim.model),
            total: metrics::rows(&sim.total),
            sigma: self.server.data_similarity.as_ref().map(|d| d.sigma),
        };
        let result = match build_plan_with(&sim.total, self.config.aggregation.include_self) {
            Ok(plan) => {
                let bars = personalized_aggregate(&plan, cores)?;
                let w = metrics::rows(&plan.weights);
                self.server.last_weights = Some(plan.weights);
                (bars, Some(snapshot), Some(w), false)
            }
            Err(Error::AllZeroRow { row }) => {
                log::warn!("client {row} has no positive affinity; clients keep their own cores this round");
                self.server.last_weights = None;
                (cores.to_vec(), Some(snapshot), None, true)
            }
            Err(e) => return Err(e),
        };
        self.server.last_similarity = Some(sim);
        Ok(result)
    }

    /// Summary over the records produced so far.
    pub fn summarize(&self, records: &[RoundRecord]) -> Result<Summary> {
        let last = records.last().ok_or(Error::Empty("round records"))?;
        let acc = last.accuracies();
        let (mean, worst, best) = spread(&acc);
        let counts = param_counts(&self.config.model_shape(self.classes));
        let per = match self.config.method {
            Method::CeLora => counts.ce_lora,
            Method::FedavgLora => counts.fedpetuning,
            Method::FfaLora => counts.ffa,
            Method::LocalOnly => 0,
        };
        let total_up: u64 = records.iter().flat_map(|r| r.clients.iter().map(|c| c.uploaded_params)).sum();
        let total_down = match self.config.method {
            Method::LocalOnly => 0,
            _ => total_up,
        };
        let gmm: u64 = self.setup_messages.iter().map(Message::payload_params).sum();
        Ok(Summary {
            method: self.config.method,
            seed: self.config.seed,
            rounds: records.len(),
            clients: self.clients.len(),
            mean_accuracy: mean,
            worst_accuracy: worst,
            best_accuracy: best,
            final_accuracy: acc,
            heterogeneity: self.heterogeneity,
            comm: CommSummary {
                upload_params_per_client_round: per,
                total_upload_params: total_up,
                total_upload_bytes: total_up * 8,
                total_download_params: total_down,
                gmm_params: gmm,
            },
        })
    }
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    pub federation: Federation,
}

/// Set up and run `train.rounds` rounds, handing each outcome to `observe`
/// (used for streaming logs and checkpoints).
pub fn run_experiment(
    config: &ExperimentConfig,
    mut observe: impl FnMut(&Federation, &RoundOutcome) -> Result<()>,
) -> Result<RunResult> {
    let mut fed = Federation::new(config)?;
    let mut records = Vec::with_capacity(config.train.rounds);
    for _ in 0..config.train.rounds {
        let outcome = fed.run_round()?;
        log::info!(
            "round {} ({}): mean acc {:.4}, worst {:.4}",
            outcome.record.round,
            config.method,
            outcome.record.mean_accuracy,
            outcome.record.worst_accuracy
        );
        observe(&fed, &outcome)?;
        records.push(outcome.record);
    }
    let summary = fed.summarize(&records)?;
    Ok(RunResult { records, summary, federation: fed })
}
