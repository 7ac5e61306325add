//! Staged training: role awareness (generation conditioned on encoded
//! personas), codebook initialization, and joint training of codebook,
//! classifier and generator. Also PEFT freezing, checkpoints and logs.

mod adam;
mod checkpoint;
mod config;
mod log;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Gradients, Graph, Matrix, Var};
use crate::codebook::{contrastive_graph, em_fit, nearest_code, vq_graph, EmOptions, InitStrategy, PersonaCodebook};
use crate::corpus::{DialogueSample, Vocab};
use crate::error::{MorpheusError, Result};
use crate::model::{EncodedSample, MorpheusModel};
use crate::neural::{DialogueDecoder, Dropout, PersonaEncoder, PrefixProjection};
use crate::predictor::{prediction_accuracy, Accuracy, CodeClassifier};

pub use adam::Adam;
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainingConfig;
pub use log::TrainingLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    RoleAware,
    PcInit,
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::RoleAware => "role_aware",
            Stage::PcInit => "pc_init",
            Stage::Joint => "joint",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = MorpheusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "role_aware" => Ok(Stage::RoleAware),
            "pc_init" => Ok(Stage::PcInit),
            "joint" => Ok(Stage::Joint),
            other => Err(MorpheusError::Format(format!("unknown stage tag `{other}`"))),
        }
    }
}

/// Batch-mean value of every loss term of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub generation: f64,
    pub vq: f64,
    pub prediction: f64,
    pub contrastive: f64,
    /// The weighted objective that was differentiated.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: usize,
    /// One entry per optimizer step.
    pub steps: Vec<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookReport {
    pub strategy: InitStrategy,
    /// Persona encodings the initializer saw.
    pub points: usize,
    pub em_iterations: Option<usize>,
    pub em_log_likelihood: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainableReport {
    pub total: usize,
    pub trainable: usize,
    pub codebook: usize,
    pub classifier: usize,
    pub projection: usize,
    pub fraction: f64,
}

/// Which terms a joint update optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    /// Generation with encoded-persona prefixes only.
    RoleAware,
    /// Every term.
    Joint,
    /// Generation, quantization and contrastive terms.
    Codebook,
    /// Code prediction only.
    Prediction,
}

pub struct Trainer {
    pub model: MorpheusModel,
    pub config: TrainingConfig,
    pub optimizer: Adam,
    rng: ChaCha8Rng,
    pub stage: Option<Stage>,
    /// Optimizer steps taken across all stages.
    pub step: u64,
    log: Option<TrainingLog>,
}

impl fmt::Debug for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trainer")
            .field("stage", &self.stage)
            .field("step", &self.step)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl Trainer {
    pub fn new(config: TrainingConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let model = MorpheusModel::new(
            config.model_config(vocab.len()),
            vocab,
            config.segments,
            config.seed,
        )?;
        Ok(Trainer {
            optimizer: Adam::new(config.learning_rate, config.warmup_steps),
            rng: training_rng(config.seed),
            model,
            config,
            stage: None,
            step: 0,
            log: None,
        })
    }

    /// Builds the vocabulary from `train` and a fresh model.
    pub fn from_corpus(config: TrainingConfig, train: &[DialogueSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(MorpheusError::EmptyCorpus);
        }
        let vocab = Vocab::build(train, config.vocab_min_count);
        Self::new(config, vocab)
    }

    pub fn set_log(&mut self, log: Option<TrainingLog>) {
        self.log = log;
    }

    /// Appends `entry` to the training log, if one is attached.
    pub fn log_event(&mut self, entry: serde_json::Value) -> Result<()> {
        self.record(entry)
    }

    fn record(&mut self, entry: serde_json::Value) -> Result<()> {
        match self.log.as_mut() {
            Some(log) => log.record(&entry),
            None => Ok(()),
        }
    }

    pub fn encode_corpus(&self, corpus: &[DialogueSample]) -> Result<Vec<EncodedSample>> {
        corpus.iter().map(|s| self.model.encode_sample(s)).collect()
    }

    /// Stage 1: generation conditioned on prefixes built from the encoded
    /// persona segments.
    pub fn stage1(&mut self, corpus: &[DialogueSample]) -> Result<StageReport> {
        if corpus.is_empty() {
            return Err(MorpheusError::EmptyCorpus);
        }
        if self.config.prefix {
            if let Some(i) = corpus
                .iter()
                .position(|s| s.persona_segments().is_empty())
            {
                return Err(MorpheusError::InvalidArgument(format!(
                    "sample {i} has an empty persona; stage 1 needs every persona"
                )));
            }
        }
        let data = self.encode_corpus(corpus)?;
        let epochs = self.config.stage1_epochs;
        let steps = self.run_epochs(&data, epochs, Stage::RoleAware)?;
        self.stage = Some(Stage::RoleAware);
        Ok(StageReport {
            stage: Stage::RoleAware,
            epochs,
            steps,
        })
    }

    /// Stage 2: encodes every training persona segment and initializes the
    /// codebook with the configured strategy.
    pub fn stage2(&mut self, corpus: &[DialogueSample]) -> Result<CodebookReport> {
        if self.stage.is_none() {
            return Err(MorpheusError::StageOrder(
                "codebook initialization needs a role-aware model (run stage 1 first)".into(),
            ));
        }
        if corpus.is_empty() {
            return Err(MorpheusError::EmptyCorpus);
        }
        let points = self.persona_points(corpus)?;
        let cfg = &self.config;
        let (n, d, seed) = (cfg.codebook_size, cfg.d_model, cfg.seed);
        let rows = || points.rows().into_iter().map(|r| r.to_owned());
        let codebook = match cfg.init_strategy {
            InitStrategy::Random => PersonaCodebook::init_random(n, d, seed)?,
            InitStrategy::Sequential => PersonaCodebook::init_sequential(rows(), n, d, seed)?,
            InitStrategy::Average => {
                let all: Vec<Array1<f64>> = rows().collect();
                let batches = all.chunks(cfg.batch_size).map(<[_]>::to_vec);
                PersonaCodebook::init_average(batches, n, d, seed)?
            }
            InitStrategy::Em => em_fit(
                &points,
                n,
                EmOptions {
                    max_iters: cfg.em_max_iters,
                    tol: cfg.em_tol,
                    seed,
                },
            )?,
        };
        let report = CodebookReport {
            strategy: cfg.init_strategy,
            points: points.nrows(),
            em_iterations: codebook.em_state.as_ref().map(|s| s.iterations),
            em_log_likelihood: codebook.em_state.as_ref().map(|s| s.log_likelihood.clone()),
        };
        self.model.install_codebook(codebook, seed.wrapping_add(1))?;
        self.stage = Some(Stage::PcInit);
        self.record(json!({
            "stage": Stage::PcInit.as_str(),
            "step": self.step,
            "strategy": report.strategy.as_str(),
            "points": report.points,
            "em_iterations": report.em_iterations,
            "em_log_likelihood": report.em_log_likelihood.as_ref().and_then(|t| t.last()),
        }))?;
        Ok(report)
    }

    /// Evaluation-mode encodings of every non-empty persona segment of
    /// `corpus`, in corpus order.
    pub fn persona_points(&self, corpus: &[DialogueSample]) -> Result<Matrix> {
        let mut cache: BTreeMap<Vec<usize>, Array1<f64>> = BTreeMap::new();
        let mut rows = Vec::new();
        for s in corpus {
            for seg in s.persona_segments() {
                let ids = PersonaEncoder::segment_ids(&self.model.vocab, &self.model.config, &seg)?;
                if ids.is_empty() {
                    continue;
                }
                let v = match cache.get(&ids) {
                    Some(v) => v.clone(),
                    None => {
                        let v = self.model.encode_segment_ids(std::slice::from_ref(&ids)).row(0).to_owned();
                        cache.insert(ids, v.clone());
                        v
                    }
                };
                rows.push(v);
            }
        }
        if rows.is_empty() {
            return Err(MorpheusError::EmptyCorpus);
        }
        let d = self.model.config.d_model;
        let mut m = Matrix::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        Ok(m)
    }

    /// Stage 3: joint training of generator, codebook and classifier.
    pub fn stage3(&mut self, corpus: &[DialogueSample]) -> Result<StageReport> {
        if self.stage.is_none() {
            return Err(MorpheusError::StageOrder(
                "joint training needs stages 1 and 2 first".into(),
            ));
        }
        if self.config.prefix && self.model.codebook().is_none() {
            return Err(MorpheusError::MissingComponent(
                "persona codebook (run codebook initialization first)".into(),
            ));
        }
        if corpus.is_empty() {
            return Err(MorpheusError::EmptyCorpus);
        }
        if self.config.peft {
            let report = self.freeze_for_peft();
            self.record(json!({
                "stage": Stage::Joint.as_str(),
                "step": self.step,
                "peft": report,
            }))?;
        }
        let data = self.encode_corpus(corpus)?;
        let epochs = self.config.stage3_epochs;
        let steps = self.run_epochs(&data, epochs, Stage::Joint)?;
        self.stage = Some(Stage::Joint);
        Ok(StageReport {
            stage: Stage::Joint,
            epochs,
            steps,
        })
    }

    /// Stages 1 to 3 in order; the baseline configuration skips the codebook.
    pub fn train_all(&mut self, corpus: &[DialogueSample]) -> Result<()> {
        self.stage1(corpus)?;
        if self.config.prefix {
            self.stage2(corpus)?;
        }
        self.stage3(corpus)?;
        Ok(())
    }

    fn run_epochs(&mut self, data: &[EncodedSample], epochs: usize, stage: Stage) -> Result<Vec<LossBreakdown>> {
        let mut out = Vec::new();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..epochs {
            if stage == Stage::Joint {
                if let Some(cb) = self.model.codebook_mut() {
                    cb.reset_usage();
                }
            }
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<EncodedSample> = chunk.iter().map(|&i| data[i].clone()).collect();
                let objective = match stage {
                    Stage::RoleAware => Objective::RoleAware,
                    _ if self.config.alternating && self.step % 2 == 1 => Objective::Prediction,
                    _ if self.config.alternating => Objective::Codebook,
                    _ => Objective::Joint,
                };
                let losses = self.update(&batch, objective)?;
                self.record(json!({
                    "stage": stage.as_str(),
                    "epoch": epoch,
                    "step": self.step,
                    "lr": self.optimizer.rate_at(self.optimizer.steps),
                    "generation": losses.generation,
                    "vq": losses.vq,
                    "prediction": losses.prediction,
                    "contrastive": losses.contrastive,
                    "total": losses.total,
                }))?;
                out.push(losses);
            }
        }
        Ok(out)
    }

    /// One joint update on `batch`.
    pub fn joint_step(&mut self, batch: &[EncodedSample]) -> Result<LossBreakdown> {
        if self.config.prefix && self.model.codebook().is_none() {
            return Err(MorpheusError::MissingComponent("persona codebook".into()));
        }
        let objective = match (self.config.alternating, self.step % 2) {
            (false, _) => Objective::Joint,
            (true, 0) => Objective::Codebook,
            (true, _) => Objective::Prediction,
        };
        self.update(batch, objective)
    }

    fn update(&mut self, batch: &[EncodedSample], objective: Objective) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(MorpheusError::InvalidArgument("empty batch".into()));
        }
        let mut grads = Gradients::new(self.model.store.len());
        let mut sum = LossBreakdown::default();
        let mut lookups = Vec::new();
        let rate = self.config.dropout;
        for s in batch {
            let mut g = Graph::new(&self.model.store);
            let mut dropout = (rate > 0.0).then_some(Dropout {
                rate,
                rng: &mut self.rng,
            });
            let (total, parts, codes) =
                sample_objective(&mut g, &self.model, &self.config, s, objective, &mut dropout)?;
            grads.merge(&g.backward(total));
            sum.generation += parts.generation;
            sum.vq += parts.vq;
            sum.prediction += parts.prediction;
            sum.contrastive += parts.contrastive;
            sum.total += parts.total;
            lookups.extend(codes);
        }
        let b = batch.len() as f64;
        let mean = LossBreakdown {
            generation: sum.generation / b,
            vq: sum.vq / b,
            prediction: sum.prediction / b,
            contrastive: sum.contrastive / b,
            total: sum.total / b,
        };
        grads.scale(1.0 / b);
        if !grads.all_finite() {
            return Err(MorpheusError::NonFinite(format!("gradients at step {}", self.step + 1)));
        }
        self.optimizer.step(&mut self.model.store, &grads);
        self.step += 1;
        if !self.model.store.all_finite() {
            return Err(MorpheusError::NonFinite(format!("parameters after step {}", self.step)));
        }
        self.model.sync_codebook();
        if let Some(cb) = self.model.codebook_mut() {
            for k in lookups {
                cb.record_lookup(k);
            }
        }
        Ok(mean)
    }

    /// Freezes encoder and decoder; codebook, classifier and prefix
    /// projections stay trainable.
    pub fn freeze_for_peft(&mut self) -> TrainableReport {
        let store = &mut self.model.store;
        store.set_trainable_prefix(PersonaEncoder::PREFIX, false);
        store.set_trainable_prefix(DialogueDecoder::PREFIX, false);
        self.trainable_report()
    }

    pub fn unfreeze(&mut self) -> TrainableReport {
        let ids: Vec<_> = self.model.store.ids().collect();
        for id in ids {
            self.model.store.set_trainable(id, true);
        }
        self.trainable_report()
    }

    pub fn trainable_report(&self) -> TrainableReport {
        let store = &self.model.store;
        let (total, trainable) = self.model.parameter_counts();
        TrainableReport {
            total,
            trainable,
            codebook: self.model.codebook_param().map_or(0, |id| store.numel(id)),
            classifier: store.numel_prefix(CodeClassifier::PREFIX),
            projection: store.numel_prefix(PrefixProjection::PREFIX),
            fraction: trainable as f64 / total as f64,
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(self, path.as_ref())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        checkpoint::load(path.as_ref())
    }
}

fn weighted(g: &mut Graph, terms: &[(Var, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let scaled = g.scale(v, w);
        acc = Some(match acc {
            Some(a) => g.add(a, scaled),
            None => scaled,
        });
    }
    acc.expect("at least one loss term")
}

fn check_finite(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(MorpheusError::NonFinite(format!("{term} loss")))
    }
}

/// Builds the objective of one sample. Returns the differentiable total,
/// the term values, and the codes its segments were assigned.
fn sample_objective(
    g: &mut Graph,
    model: &MorpheusModel,
    cfg: &TrainingConfig,
    s: &EncodedSample,
    objective: Objective,
    dropout: &mut Option<Dropout>,
) -> Result<(Var, LossBreakdown, Vec<usize>)> {
    let mc = &model.config;
    let mut parts = LossBreakdown::default();
    if !cfg.prefix {
        let nll = model.decoder.nll(g, mc, &s.context, &s.response, None, dropout)?;
        parts.generation = check_finite(g.scalar(nll), "generation")?;
        let total = g.scale(nll, cfg.lambda_g);
        parts.total = g.scalar(total);
        return Ok((total, parts, Vec::new()));
    }

    let encoded: Vec<Var> = s
        .segments
        .iter()
        .map(|ids| model.encoder.forward(g, mc, ids, dropout))
        .collect();
    let p = g.concat_rows(&encoded);

    if objective == Objective::RoleAware {
        let prefix = model.prefix.build(g, p);
        let nll = model.decoder.nll(g, mc, &s.context, &s.response, Some(&prefix), dropout)?;
        parts.generation = check_finite(g.scalar(nll), "generation")?;
        let total = g.scale(nll, cfg.lambda_g);
        parts.total = g.scalar(total);
        return Ok((total, parts, Vec::new()));
    }

    let cb_id = model
        .codebook_param()
        .ok_or_else(|| MorpheusError::MissingComponent("persona codebook".into()))?;
    let classifier = model
        .classifier()
        .ok_or_else(|| MorpheusError::MissingComponent("code classifier".into()))?;
    let codes_now = model.store.get(cb_id);
    let codes: Vec<usize> = {
        let pv = g.value(p);
        (0..pv.nrows())
            .map(|i| nearest_code(pv.row(i), codes_now.view()).map(|(k, _)| k))
            .collect::<Result<_>>()?
    };
    let m = codes.len() as f64;
    let codebook = g.param(cb_id);
    let e = g.gather(codebook, &codes);

    let mut terms = Vec::new();
    if matches!(objective, Objective::Joint | Objective::Codebook) {
        let prefix_input = if cfg.straight_through {
            let diff = g.sub(e, p);
            let diff = g.detach(diff);
            g.add(p, diff)
        } else {
            p
        };
        let prefix = model.prefix.build(g, prefix_input);
        let nll = model.decoder.nll(g, mc, &s.context, &s.response, Some(&prefix), dropout)?;
        parts.generation = check_finite(g.scalar(nll), "generation")?;
        terms.push((nll, cfg.lambda_g));

        let vq = vq_graph(g, p, e, cfg.beta);
        let vq = g.scale(vq, 1.0 / m);
        parts.vq = check_finite(g.scalar(vq), "quantization")?;
        terms.push((vq, cfg.lambda_v));

        let mut per_segment = Vec::with_capacity(codes.len());
        for (i, &k) in codes.iter().enumerate() {
            let pi = g.slice_rows(p, i, i + 1);
            per_segment.push(contrastive_graph(g, pi, codebook, k, cfg.tau)?);
        }
        let stacked = g.concat_cols(&per_segment);
        let summed = g.sum(stacked);
        let contrastive = g.scale(summed, 1.0 / m);
        parts.contrastive = check_finite(g.scalar(contrastive), "contrastive")?;
        terms.push((contrastive, cfg.lambda_c));
    }
    if matches!(objective, Objective::Joint | Objective::Prediction) {
        let c = model.decoder.last_state(g, mc, &s.context)?;
        let pred = classifier.loss(g, c, &codes)?;
        parts.prediction = check_finite(g.scalar(pred), "prediction")?;
        terms.push((pred, cfg.lambda_d));
    }
    let total = weighted(g, &terms);
    parts.total = check_finite(g.scalar(total), "total")?;
    Ok((total, parts, codes))
}

/// Nearest-code labels of a sample's segments under the current model.
pub fn code_labels(model: &MorpheusModel, sample: &EncodedSample) -> Result<Vec<usize>> {
    let cb = model
        .codebook()
        .ok_or_else(|| MorpheusError::MissingComponent("persona codebook".into()))?;
    let p = model.encode_segment_ids(&sample.segments);
    (0..p.nrows())
        .map(|i| nearest_code(p.row(i), cb.vectors().view()).map(|(k, _)| k))
        .collect()
}

/// Accuracy of history-based code prediction against the nearest-code
/// labels of each sample's persona segments.
pub fn evaluate_code_prediction(model: &MorpheusModel, samples: &[DialogueSample]) -> Result<Accuracy> {
    let mut predicted = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let enc = model.encode_sample(s)?;
        labels.push(code_labels(model, &enc)?);
        let c = model.encode_history_ids(&enc.context)?;
        predicted.push(model.predict_codes(&c)?.iter().map(|p| p.index).collect());
    }
    prediction_accuracy(&predicted, &labels)
}

/// Mean evaluation-mode generation loss over `samples`, conditioned on the
/// encoded personas when `with_persona` holds.
pub fn mean_generation_loss(model: &MorpheusModel, samples: &[DialogueSample], with_persona: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(MorpheusError::EmptyCorpus);
    }
    let mut total = 0.0;
    for s in samples {
        let enc = model.encode_sample(s)?;
        let prefix = if with_persona {
            let p = model.encode_segment_ids(&enc.segments);
            let vectors: Vec<Array1<f64>> = p.rows().into_iter().map(|r| r.to_owned()).collect();
            Some(model.build_prefix(&vectors)?)
        } else {
            None
        };
        total += model.decode_nll_ids(prefix.as_ref(), &enc.context, &enc.response)?;
    }
    Ok(total / samples.len() as f64)
}
