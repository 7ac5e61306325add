//! Persona-free generation: predict codes from the history, condition the
//! decoder on their code vectors, and sample with a nucleus sampler. Also
//! the interactive chat loop.

use std::io::{BufRead, Write};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{words, Turn, BOR_ID, EOR_ID, PAD_ID, SPEAKER_A_ID, SPEAKER_B_ID};
use crate::error::{MorpheusError, Result};
use crate::model::MorpheusModel;
use crate::predictor::CodePrediction;
use crate::trainer::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub nucleus_p: f64,
    pub temperature: f64,
    /// Cap on generated tokens, end marker excluded.
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            nucleus_p: 0.9,
            temperature: 1.0,
            max_tokens: 32,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn from_training(config: &TrainingConfig, seed: u64) -> Self {
        SamplingConfig {
            nucleus_p: config.nucleus_p,
            temperature: config.temperature,
            max_tokens: config.max_response_tokens,
            seed,
        }
    }
}

/// Tokens that never appear as generation targets.
const NEVER_SAMPLED: [usize; 4] = [PAD_ID, BOR_ID, SPEAKER_A_ID, SPEAKER_B_ID];

/// Smallest set of most probable tokens whose mass reaches `p`, with
/// renormalized probabilities, most probable first (ties by token id).
pub fn nucleus_support(logits: &Array1<f64>, p: f64, temperature: f64) -> Result<Vec<(usize, f64)>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(MorpheusError::InvalidArgument(format!("nucleus p must lie in (0, 1], got {p}")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(MorpheusError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(MorpheusError::InvalidArgument("empty logits".into()));
    }
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(MorpheusError::NonFinite("logits".into()));
    }
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if max == f64::NEG_INFINITY {
        return Err(MorpheusError::NonFinite("logits (every token masked)".into()));
    }
    let weights: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        let prob = weights[i] / z;
        if prob == 0.0 && !kept.is_empty() {
            break;
        }
        kept.push((i, prob));
        mass += prob;
        if mass >= p {
            break;
        }
    }
    Ok(kept.into_iter().map(|(i, q)| (i, q / mass)).collect())
}

pub fn nucleus_sample(logits: &Array1<f64>, p: f64, temperature: f64, rng: &mut impl Rng) -> Result<usize> {
    let support = nucleus_support(logits, p, temperature)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(token, prob) in &support {
        acc += prob;
        if u < acc {
            return Ok(token);
        }
    }
    Ok(support.last().expect("support is never empty").0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<usize>,
    /// Predicted code per persona slot; empty for a model without codebook.
    pub codes: Vec<CodePrediction>,
}

/// Predicts codes from `history` and samples a response for `responder`.
/// Only the history is consulted, never a persona.
pub fn generate(
    model: &MorpheusModel,
    history: &[Turn],
    responder: &str,
    config: &SamplingConfig,
) -> Result<Generation> {
    if history.is_empty() {
        return Err(MorpheusError::InvalidArgument("history is empty".into()));
    }
    let max_len = model.config.max_sequence_length;
    if max_len < 4 {
        return Err(MorpheusError::SequenceOverflow { len: 4, max: max_len });
    }
    let cap = config.max_tokens.min(max_len - 3);
    let context = model.history_ids(history, responder, max_len - 1 - cap)?;

    let (prefix, codes) = match (model.codebook(), model.classifier()) {
        (Some(_), Some(_)) => {
            let c = model.encode_history_ids(&context)?;
            let codes = model.predict_codes(&c)?;
            let indices: Vec<usize> = codes.iter().map(|c| c.index).collect();
            let prefix = model.build_prefix(&model.code_vectors(&indices)?)?;
            (Some(prefix), codes)
        }
        (None, None) => (None, Vec::new()),
        _ => {
            return Err(MorpheusError::MissingComponent(
                "codebook and classifier must both be present".into(),
            ))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ids = context;
    ids.push(BOR_ID);
    let mut tokens = Vec::new();
    while tokens.len() < cap {
        let mut logits = model.logits_next(prefix.as_ref(), &ids)?;
        for &t in &NEVER_SAMPLED {
            logits[t] = f64::NEG_INFINITY;
        }
        let t = nucleus_sample(&logits, config.nucleus_p, config.temperature, &mut rng)?;
        if t == EOR_ID {
            break;
        }
        tokens.push(t);
        ids.push(t);
    }
    Ok(Generation {
        text: model.vocab.detokenize(&tokens),
        tokens,
        codes,
    })
}

/// Speaker names the chat loop uses for its two sides.
pub const CHAT_USER: &str = "user";
pub const CHAT_BOT: &str = "bot";

/// Interactive loop: each input line is a user turn answered by the model.
/// `/codes` prints the codes predicted from the current history, `/reset`
/// clears it and `/quit` (or end of input) ends the session.
pub fn chat_repl(
    model: &MorpheusModel,
    config: &SamplingConfig,
    mut input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    let io = |e: std::io::Error| MorpheusError::io("<stdio>", e);
    let max_len = model.config.max_sequence_length;
    let cap = config.max_tokens.min(max_len.saturating_sub(3));
    // Room for a marker plus the user turn inside the context window.
    let input_budget = max_len.saturating_sub(cap + 2).max(1);
    let mut history: Vec<Turn> = Vec::new();
    let mut turn = 0u64;
    let mut line = String::new();
    loop {
        write!(output, "> ").and_then(|_| output.flush()).map_err(io)?;
        line.clear();
        if input.read_line(&mut line).map_err(io)? == 0 {
            writeln!(output).map_err(io)?;
            return Ok(());
        }
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => return Ok(()),
            "/reset" => {
                history.clear();
                writeln!(output, "history cleared").map_err(io)?;
                continue;
            }
            "/codes" => {
                if history.is_empty() {
                    writeln!(output, "codes: no history yet").map_err(io)?;
                } else if model.codebook().is_none() {
                    writeln!(output, "codes: model has no codebook").map_err(io)?;
                } else {
                    let ids = model.history_ids(&history, CHAT_BOT, max_len - 1 - cap)?;
                    let c = model.encode_history_ids(&ids)?;
                    let codes = model.predict_codes(&c)?;
                    let shown: Vec<String> = codes
                        .iter()
                        .map(|c| format!("{}({:.3})", c.index, c.probability))
                        .collect();
                    writeln!(output, "codes: {}", shown.join(" ")).map_err(io)?;
                }
                continue;
            }
            _ => {}
        }
        let mut toks = words(text);
        if toks.len() > input_budget {
            writeln!(
                output,
                "warning: input truncated to its last {input_budget} of {} words",
                toks.len()
            )
            .map_err(io)?;
            toks = toks.split_off(toks.len() - input_budget);
        }
        history.push(Turn::new(CHAT_USER, toks.join(" ")));
        let cfg = SamplingConfig {
            seed: config.seed.wrapping_add(turn),
            ..config.clone()
        };
        let reply = generate(model, &history, CHAT_BOT, &cfg)?;
        writeln!(output, "{}", reply.text).map_err(io)?;
        if !reply.text.trim().is_empty() {
            history.push(Turn::new(CHAT_BOT, reply.text));
        }
        turn += 1;
    }
}
