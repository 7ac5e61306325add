//! The assembled system: vocabulary, persona encoder, dialogue decoder,
//! prefix projection, and (after codebook initialization) the persona
//! codebook and the code classifier, all sharing one parameter store.

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Matrix, ParamId, ParamStore};
use crate::codebook::PersonaCodebook;
use crate::corpus::{fit_segments, DialogueSample, Turn, Vocab, SPEAKER_A_ID, SPEAKER_B_ID};
use crate::error::{MorpheusError, Result};
use crate::neural::{
    DialogueDecoder, EncodedPersona, HiddenState, ModelConfig, PersonaEncoder, PrefixProjection,
    PrefixState, PrefixVars,
};
use crate::predictor::{CodeClassifier, CodePrediction};

/// Name of the codebook tensor in the parameter store.
pub const CODEBOOK_PARAM: &str = "codebook";

/// A training sample turned into token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    /// Windowed history, each turn as a speaker marker followed by its tokens.
    pub context: Vec<usize>,
    pub response: Vec<usize>,
    /// Exactly `M` segments; padding segments are empty.
    pub segments: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorpheusModel {
    pub config: ModelConfig,
    /// Number of persona segments `M`.
    pub segments: usize,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: PersonaEncoder,
    pub decoder: DialogueDecoder,
    pub prefix: PrefixProjection,
    codebook: Option<(ParamId, PersonaCodebook)>,
    classifier: Option<CodeClassifier>,
}

impl MorpheusModel {
    /// Fresh model; `config.vocab_size` is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocab, segments: usize, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        if segments == 0 {
            return Err(MorpheusError::InvalidArgument("M must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = PersonaEncoder::new(&mut store, &config, &mut rng);
        let decoder = DialogueDecoder::new(&mut store, &config, &mut rng);
        let prefix = PrefixProjection::new(&mut store, &config, &mut rng);
        Ok(MorpheusModel {
            config,
            segments,
            vocab,
            store,
            encoder,
            decoder,
            prefix,
            codebook: None,
            classifier: None,
        })
    }

    /// Re-attaches codebook and classifier handles after the store has been
    /// filled from a checkpoint.
    pub(crate) fn attach_from_store(&mut self, codebook: Option<PersonaCodebook>) -> Result<()> {
        self.codebook = None;
        self.classifier = None;
        if let Some(mut cb) = codebook {
            let id = self
                .store
                .find(CODEBOOK_PARAM)
                .ok_or_else(|| MorpheusError::MissingComponent("codebook tensor".into()))?;
            cb.set_vectors(self.store.get(id).clone())?;
            self.codebook = Some((id, cb));
        }
        if self.store.find("classifier.hidden.w").is_some() {
            self.classifier = Some(CodeClassifier::from_store(&self.store)?);
        }
        Ok(())
    }

    /// Installs `codebook` as the trainable codebook tensor and creates the
    /// classifier if absent. Vectors are rounded to storage precision.
    pub fn install_codebook(&mut self, mut codebook: PersonaCodebook, seed: u64) -> Result<()> {
        if codebook.dim() != self.config.d_model {
            return Err(MorpheusError::DimensionMismatch {
                expected: self.config.d_model,
                got: codebook.dim(),
            });
        }
        let id = match self.store.find(CODEBOOK_PARAM) {
            Some(id) if self.store.get(id).dim() == codebook.vectors().dim() => {
                self.store.set(id, codebook.vectors().clone());
                id
            }
            Some(_) => {
                return Err(MorpheusError::InvalidArgument(
                    "codebook size differs from the installed one".into(),
                ))
            }
            None => self.store.add(CODEBOOK_PARAM, codebook.vectors().clone()),
        };
        codebook.set_vectors(self.store.get(id).clone())?;
        if let Some(state) = codebook.em_state.as_mut() {
            state.means = self.store.get(id).clone();
        }
        let n = codebook.size();
        self.codebook = Some((id, codebook));
        if self.classifier.as_ref().map(CodeClassifier::codes) != Some(n) {
            if self.classifier.is_some() {
                return Err(MorpheusError::InvalidArgument(
                    "classifier was built for a different codebook size".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            self.classifier = Some(CodeClassifier::new(
                &mut self.store,
                self.config.d_model,
                n,
                self.segments,
                None,
                &mut rng,
            )?);
        }
        Ok(())
    }

    pub fn codebook(&self) -> Option<&PersonaCodebook> {
        self.codebook.as_ref().map(|(_, cb)| cb)
    }

    pub fn codebook_mut(&mut self) -> Option<&mut PersonaCodebook> {
        self.codebook.as_mut().map(|(_, cb)| cb)
    }

    pub fn codebook_param(&self) -> Option<ParamId> {
        self.codebook.as_ref().map(|(id, _)| *id)
    }

    pub fn classifier(&self) -> Option<&CodeClassifier> {
        self.classifier.as_ref()
    }

    /// Copies the trained codebook tensor into the codebook record.
    pub fn sync_codebook(&mut self) {
        if let Some((id, cb)) = self.codebook.as_mut() {
            cb.set_vectors(self.store.get(*id).clone())
                .expect("codebook tensor keeps its shape");
        }
    }

    /// Token ids of the most recent whole turns that fit in `budget` tokens.
    /// When even the last turn is too long, its final tokens are kept.
    pub fn history_ids(&self, history: &[Turn], responder: &str, budget: usize) -> Result<Vec<usize>> {
        if history.is_empty() {
            return Err(MorpheusError::InvalidArgument("history is empty".into()));
        }
        if budget < 2 {
            return Err(MorpheusError::SequenceOverflow {
                len: 2,
                max: budget,
            });
        }
        let mut turns: Vec<Vec<usize>> = Vec::new();
        let mut used = 0;
        for turn in history.iter().rev() {
            let marker = if turn.speaker == responder {
                SPEAKER_B_ID
            } else {
                SPEAKER_A_ID
            };
            let mut ids = vec![marker];
            ids.extend(self.vocab.tokenize(&turn.utterance)?);
            if used + ids.len() > budget {
                if turns.is_empty() {
                    let tail = ids.split_off(ids.len() - (budget - 1));
                    turns.push([vec![marker], tail].concat());
                }
                break;
            }
            used += ids.len();
            turns.push(ids);
        }
        Ok(turns.into_iter().rev().flatten().collect())
    }

    pub fn encode_sample(&self, sample: &DialogueSample) -> Result<EncodedSample> {
        let response = self.vocab.tokenize(&sample.response)?;
        if response.is_empty() {
            return Err(MorpheusError::InvalidArgument("response has no tokens".into()));
        }
        // context, begin marker, response; the end marker is only a target.
        let budget = self
            .config
            .max_sequence_length
            .checked_sub(response.len() + 1)
            .filter(|&b| b >= 2)
            .ok_or(MorpheusError::SequenceOverflow {
                len: response.len() + 3,
                max: self.config.max_sequence_length,
            })?;
        let context = self.history_ids(&sample.history, &sample.responder_id, budget)?;
        let segments = fit_segments(&sample.persona_segments(), self.segments)?
            .iter()
            .map(|s| PersonaEncoder::segment_ids(&self.vocab, &self.config, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedSample {
            context,
            response,
            segments,
        })
    }

    pub fn encode_persona(&self, segment: &str) -> Result<EncodedPersona> {
        self.encoder.encode(&self.store, &self.config, &self.vocab, segment)
    }

    /// Evaluation-mode encodings of token-id segments, stacked `k×d`.
    pub fn encode_segment_ids(&self, segments: &[Vec<usize>]) -> Matrix {
        let mut out = Matrix::zeros((segments.len(), self.config.d_model));
        for (i, ids) in segments.iter().enumerate() {
            let mut g = Graph::new(&self.store);
            let v = self.encoder.forward(&mut g, &self.config, ids, &mut None);
            out.row_mut(i).assign(&g.value(v).row(0));
        }
        out
    }

    pub fn encode_history(&self, history: &[Turn], responder: &str) -> Result<HiddenState> {
        let ids = self.history_ids(history, responder, self.config.max_sequence_length)?;
        self.encode_history_ids(&ids)
    }

    pub fn encode_history_ids(&self, ids: &[usize]) -> Result<HiddenState> {
        let mut g = Graph::new(&self.store);
        let c = self.decoder.last_state(&mut g, &self.config, ids)?;
        Ok(HiddenState {
            vector: g.value(c).index_axis(Axis(0), 0).to_owned(),
        })
    }

    pub fn build_prefix(&self, vectors: &[Array1<f64>]) -> Result<PrefixState> {
        self.prefix
            .build_state(&self.store, &self.config, vectors, self.segments)
    }

    /// Mean teacher-forced negative log-likelihood of `response`.
    pub fn decode_nll(
        &self,
        prefix: Option<&PrefixState>,
        history: &[Turn],
        responder: &str,
        response: &str,
    ) -> Result<f64> {
        let response = self.vocab.tokenize(response)?;
        let budget = self
            .config
            .max_sequence_length
            .saturating_sub(response.len() + 1);
        let context = self.history_ids(history, responder, budget)?;
        self.decode_nll_ids(prefix, &context, &response)
    }

    pub fn decode_nll_ids(
        &self,
        prefix: Option<&PrefixState>,
        context: &[usize],
        response: &[usize],
    ) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let pv = prefix.map(|p| PrefixVars::from_state(&mut g, p));
        let loss = self
            .decoder
            .nll(&mut g, &self.config, context, response, pv.as_ref(), &mut None)?;
        Ok(g.scalar(loss))
    }

    pub fn logits_next(&self, prefix: Option<&PrefixState>, context: &[usize]) -> Result<Array1<f64>> {
        self.decoder
            .logits_next(&self.store, &self.config, prefix, context)
    }

    /// Predicted code per slot from a history state.
    pub fn predict_codes(&self, c: &HiddenState) -> Result<Vec<CodePrediction>> {
        self.classifier
            .as_ref()
            .ok_or_else(|| MorpheusError::MissingComponent("code classifier".into()))?
            .predict(&self.store, c)
    }

    /// Code vectors for the given indices.
    pub fn code_vectors(&self, indices: &[usize]) -> Result<Vec<Array1<f64>>> {
        let cb = self
            .codebook()
            .ok_or_else(|| MorpheusError::MissingComponent("persona codebook".into()))?;
        indices
            .iter()
            .map(|&k| {
                if k < cb.size() {
                    Ok(cb.code(k).to_owned())
                } else {
                    Err(MorpheusError::InvalidArgument(format!(
                        "code {k} out of range for N={}",
                        cb.size()
                    )))
                }
            })
            .collect()
    }

    /// Total and trainable parameter counts.
    pub fn parameter_counts(&self) -> (usize, usize) {
        (self.store.total_numel(), self.store.trainable_numel())
    }
}
