//! Word-overlap and diversity metrics over generated responses, and the
//! evaluation report that gathers them.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{words, TokenWeights};
use crate::error::{MorpheusError, Result};

/// Substituted for zero n-gram precisions of order two and above.
pub const SMOOTHING_EPSILON: f64 = 1e-9;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

fn check_order(n: usize) -> Result<()> {
    if !(1..=2).contains(&n) {
        return Err(MorpheusError::InvalidArgument(format!("BLEU order must be 1 or 2, got {n}")));
    }
    Ok(())
}

/// Sentence BLEU of order `n` against a single reference.
pub fn bleu_n<S: AsRef<str>>(hypothesis: &[S], reference: &[S], n: usize) -> Result<f64> {
    bleu_multi(hypothesis, std::slice::from_ref(&reference), n)
}

/// Sentence BLEU with multi-reference clipping and the closest reference
/// length for the brevity penalty (shorter wins ties).
pub fn bleu_multi<S: AsRef<str>, R: AsRef<[S]>>(hypothesis: &[S], references: &[R], n: usize) -> Result<f64> {
    check_order(n)?;
    if hypothesis.is_empty() || references.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let hyp = ngrams(hypothesis, k);
        let total: usize = hyp.values().sum();
        let mut max_ref: HashMap<&Vec<&str>, usize> = HashMap::new();
        let ref_counts: Vec<_> = references.iter().map(|r| ngrams(r.as_ref(), k)).collect();
        for gram in hyp.keys() {
            let best = ref_counts.iter().map(|rc| rc.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
            max_ref.insert(gram, best);
        }
        let matched: usize = hyp.iter().map(|(g, &c)| c.min(max_ref[g])).sum();
        let precision = if total == 0 { 0.0 } else { matched as f64 / total as f64 };
        let precision = if n >= 2 && precision == 0.0 {
            SMOOTHING_EPSILON
        } else {
            precision
        };
        if precision == 0.0 {
            return Ok(0.0);
        }
        log_sum += precision.ln();
    }
    let c = hypothesis.len();
    let r = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l<S: AsRef<str>>(hypothesis: &[S], reference: &[S]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hypothesis, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Unique n-grams over total n-grams across all responses.
pub fn distinct_n<S: AsRef<str>, R: AsRef<[S]>>(responses: &[R], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(MorpheusError::InvalidArgument("n-gram order must be positive".into()));
    }
    let mut unique: HashMap<Vec<&str>, usize> = HashMap::new();
    let mut total = 0usize;
    for r in responses {
        for (g, c) in ngrams(r.as_ref(), n) {
            *unique.entry(g).or_insert(0) += c;
            total += c;
        }
    }
    if total == 0 {
        return Err(MorpheusError::InvalidArgument(format!("no {n}-grams in the responses")));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Mean BLEU-2 of each response against all others. At most `sample_cap`
/// hypotheses are scored, chosen by `seed`.
pub fn self_bleu<S: AsRef<str>, R: AsRef<[S]>>(responses: &[R], sample_cap: usize, seed: u64) -> Result<f64> {
    if responses.len() < 2 {
        return Err(MorpheusError::InvalidArgument("self-BLEU needs at least two responses".into()));
    }
    if sample_cap == 0 {
        return Err(MorpheusError::InvalidArgument("self-BLEU sample cap must be positive".into()));
    }
    let picked: Vec<usize> = if responses.len() > sample_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, responses.len(), sample_cap).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..responses.len()).collect()
    };
    let mut sum = 0.0;
    for &i in &picked {
        let others: Vec<&[S]> = responses
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, r)| r.as_ref())
            .collect();
        sum += bleu_multi(responses[i].as_ref(), &others, 2)?;
    }
    Ok(sum / picked.len() as f64)
}

fn weighted_tf<'a, S: AsRef<str>>(tokens: &'a [S], weights: &impl TokenWeights) -> BTreeMap<&'a str, f64> {
    let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
    for t in tokens {
        *tf.entry(t.as_ref()).or_insert(0.0) += 1.0;
    }
    for (t, v) in tf.iter_mut() {
        *v *= weights.weight(t);
    }
    tf
}

/// Cosine similarity of IDF-weighted term-frequency vectors.
pub fn p_co<S: AsRef<str>>(response: &[S], persona: &[S], weights: &impl TokenWeights) -> f64 {
    if response.is_empty() || persona.is_empty() {
        return 0.0;
    }
    let a = weighted_tf(response, weights);
    let b = weighted_tf(persona, weights);
    let dot: f64 = a.iter().filter_map(|(t, x)| b.get(t).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Every token weighs one.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformWeights;

impl TokenWeights for UniformWeights {
    fn weight(&self, _token: &str) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub self_bleu_cap: usize,
    pub self_bleu_seed: u64,
    /// Text identifying the run (e.g. the training configuration); its
    /// CRC-32 is reported.
    pub config_text: String,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            self_bleu_cap: 500,
            self_bleu_seed: 0,
            config_text: String::new(),
        }
    }
}

/// Metric values in `[0, 1]`. BLEU, ROUGE-L and P-Co are sentence averages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub rouge_l: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub sbleu: f64,
    pub p_co: f64,
    pub samples: usize,
    pub config_hash: String,
}

pub const METRIC_NAMES: [&str; 7] = ["BLEU-1", "BLEU-2", "ROUGE-L", "Dist-1", "Dist-2", "sBLEU", "P-Co"];

impl EvalReport {
    pub fn values(&self) -> [f64; 7] {
        [
            self.bleu1,
            self.bleu2,
            self.rouge_l,
            self.dist1,
            self.dist2,
            self.sbleu,
            self.p_co,
        ]
    }

    /// One JSON object with percentages at two decimals.
    pub fn json_line(&self) -> String {
        let mut out = String::from("{");
        for (name, v) in METRIC_NAMES.iter().zip(self.values()) {
            let _ = write!(out, "\"{name}\":{:.2},", 100.0 * v);
        }
        let _ = write!(
            out,
            "\"samples\":{},\"config_hash\":\"{}\",\"averaging\":\"sentence\"}}",
            self.samples, self.config_hash
        );
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8}", "group/metric", "score");
        let groups = ["coherence", "coherence", "coherence", "diversity", "diversity", "diversity", "consistency"];
        for ((name, v), group) in METRIC_NAMES.iter().zip(self.values()).zip(groups) {
            let _ = writeln!(out, "{:<12} {:>8.2}", format!("{group}/{name}"), 100.0 * v);
        }
        let _ = writeln!(out, "samples      {:>8}", self.samples);
        let _ = writeln!(out, "config_hash  {:>8}", self.config_hash);
        out
    }

    /// Machine-readable line followed by the table.
    pub fn render(&self) -> String {
        format!("{}\n{}", self.json_line(), self.table())
    }
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// Scores aligned outputs, references and personas.
pub fn evaluate_suite(
    outputs: &[String],
    references: &[String],
    personas: &[String],
    weights: &impl TokenWeights,
    config: &SuiteConfig,
) -> Result<EvalReport> {
    if outputs.len() != references.len() {
        return Err(MorpheusError::DimensionMismatch {
            expected: references.len(),
            got: outputs.len(),
        });
    }
    if personas.len() != references.len() {
        return Err(MorpheusError::DimensionMismatch {
            expected: references.len(),
            got: personas.len(),
        });
    }
    if outputs.is_empty() {
        return Err(MorpheusError::EmptyCorpus);
    }
    let n = outputs.len();
    let hyp: Vec<Vec<String>> = outputs.iter().map(|s| words(s)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|s| words(s)).collect();
    let pers: Vec<Vec<String>> = personas.iter().map(|s| words(s)).collect();
    let bleu = |k| -> Result<f64> {
        let mut sum = 0.0;
        for (h, r) in hyp.iter().zip(&refs) {
            sum += bleu_n(h, r, k)?;
        }
        Ok(sum / n as f64)
    };
    Ok(EvalReport {
        bleu1: bleu(1)?,
        bleu2: bleu(2)?,
        rouge_l: mean(hyp.iter().zip(&refs).map(|(h, r)| rouge_l(h, r)), n),
        dist1: distinct_n(&hyp, 1).unwrap_or(0.0),
        dist2: distinct_n(&hyp, 2).unwrap_or(0.0),
        sbleu: if n >= 2 {
            self_bleu(&hyp, config.self_bleu_cap, config.self_bleu_seed)?
        } else {
            0.0
        },
        p_co: mean(hyp.iter().zip(&pers).map(|(h, p)| p_co(h, p, weights)), n),
        samples: n,
        config_hash: format!("{:08x}", crc32fast::hash(config.config_text.as_bytes())),
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| MorpheusError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// [`evaluate_suite`] over three line-aligned text files.
pub fn evaluate_files(
    outputs: impl AsRef<Path>,
    references: impl AsRef<Path>,
    personas: impl AsRef<Path>,
    weights: &impl TokenWeights,
    config: &SuiteConfig,
) -> Result<EvalReport> {
    evaluate_suite(
        &read_lines(outputs.as_ref())?,
        &read_lines(references.as_ref())?,
        &read_lines(personas.as_ref())?,
        weights,
        config,
    )
}
