//! Token-level arithmetic for the two training objectives, plus the input
//! masking and dataset mixing utilities of the self-refinement recipe.
//!
//! No model training happens here: the loss operates on externally supplied
//! token log-probabilities, which keeps the formulas testable to machine
//! precision. The conditioning difference between plain fine-tuning and
//! self-refinement lives entirely in how callers build the token sequence
//! (description-only context vs. the aggregated description + faulty code +
//! feedback context); the summation is identical, over solution-code tokens
//! only.
//!
//! Rounding note: counts derived from rates use `f64::round`, which rounds
//! half away from zero.

use crate::agents::{assemble_aggr_prompt, AgentContext, AggrContext};
use crate::text;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("mask selects no tokens")]
    MaskEmpty,
    #[error("length mismatch: {logprobs} logprobs vs {mask} mask entries")]
    LengthMismatch { logprobs: usize, mask: usize },
    #[error("positive logprob {value} at index {index}")]
    PositiveLogprob { index: usize, value: f64 },
    #[error("refined pool too small: need {needed}, have {available}")]
    InsufficientRefined { needed: usize, available: usize },
    #[error("sample {index} has no logprobs")]
    MissingLogprobs { index: usize },
    #[error("corrupt sample file at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Log-probabilities for a token sequence with a mask that is true exactly on
/// the solution-code tokens; context tokens are false.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLossInput {
    pub token_logprobs: Vec<f64>,
    pub target_mask: Vec<bool>,
}

/// Sum of negative log-probabilities over the masked (solution) positions.
/// Exact arithmetic, no normalization.
pub fn masked_nll(input: &TokenLossInput) -> Result<f64, LossError> {
    if input.token_logprobs.len() != input.target_mask.len() {
        return Err(LossError::LengthMismatch {
            logprobs: input.token_logprobs.len(),
            mask: input.target_mask.len(),
        });
    }
    if let Some((index, value)) =
        input.token_logprobs.iter().enumerate().find(|(_, lp)| **lp > 0.0)
    {
        return Err(LossError::PositiveLogprob { index, value: *value });
    }
    if !input.target_mask.iter().any(|m| *m) {
        return Err(LossError::MaskEmpty);
    }
    Ok(input
        .token_logprobs
        .iter()
        .zip(&input.target_mask)
        .filter(|(_, m)| **m)
        .map(|(lp, _)| -lp)
        .sum())
}

/// Pluggable tokenizer; the default splits on whitespace and punctuation.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;

    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text::tokens(text)
    }
}

/// One training sample: tokens, target mask, optional per-token logprobs.
/// Stored one JSON record per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<String>,
    pub mask: Vec<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
}

impl Sample {
    pub fn context_len(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    pub fn target_tokens(&self) -> Vec<String> {
        self.tokens
            .iter()
            .zip(&self.mask)
            .filter(|(_, m)| **m)
            .map(|(t, _)| t.clone())
            .collect()
    }
}

/// Fine-tuning sample: description tokens as context, solution tokens as the
/// target span.
pub fn build_finetune_sample(nl: &str, code: &str, tokenizer: &dyn Tokenizer) -> Sample {
    debug_assert!(!code.trim().is_empty());
    let context = tokenizer.tokenize(nl);
    let target = tokenizer.tokenize(code);
    let mask = std::iter::repeat(false)
        .take(context.len())
        .chain(std::iter::repeat(true).take(target.len()))
        .collect();
    let tokens = context.into_iter().chain(target).collect();
    Sample { tokens, mask, logprobs: None }
}

/// Self-refinement sample: the rendered aggregated context (description +
/// faulty code + feedback) as context, the corrected solution as the target
/// span.
pub fn build_refine_sample(
    aggr: &AggrContext,
    code: &str,
    tokenizer: &dyn Tokenizer,
    ctx: &AgentContext,
) -> Sample {
    build_finetune_sample(&assemble_aggr_prompt(aggr, ctx), code, tokenizer)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixSpec {
    /// Fraction of the mixed dataset made of self-refined samples.
    #[serde(default = "default_fraction")]
    pub refined_fraction: f64,
    /// Fraction of context tokens replaced by the mask sentinel.
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    pub seed: u64,
}

fn default_fraction() -> f64 {
    0.25
}
fn default_mask_rate() -> f64 {
    0.05
}

impl Default for MixSpec {
    fn default() -> Self {
        Self { refined_fraction: default_fraction(), mask_rate: default_mask_rate(), seed: 0 }
    }
}

pub const MASK_TOKEN: &str = "<mask>";

// Seeded partial Fisher-Yates: the first `m` entries of `items` end up being
// the selection.
fn select_prefix<T>(items: &mut [T], m: usize, rng: &mut ChaCha8Rng) {
    for i in 0..m.min(items.len()) {
        let j = rng.random_range(i..items.len());
        items.swap(i, j);
    }
}

/// Replaces `round(mask_rate x context_length)` context positions with the
/// mask sentinel, chosen by the seeded generator. Target positions are never
/// maskable. Any logprobs are dropped since the token sequence changed.
pub fn mask_input(sample: &Sample, spec: &MixSpec) -> Sample {
    let mut context_positions: Vec<usize> =
        sample.mask.iter().enumerate().filter(|(_, m)| !**m).map(|(i, _)| i).collect();
    let count = (spec.mask_rate * context_positions.len() as f64).round() as usize;
    let count = count.min(context_positions.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    select_prefix(&mut context_positions, count, &mut rng);
    let mut tokens = sample.tokens.clone();
    for &i in &context_positions[..count] {
        tokens[i] = MASK_TOKEN.to_string();
    }
    Sample { tokens, mask: sample.mask.clone(), logprobs: None }
}

/// Mixes self-refined samples into a base dataset at the requested fraction.
///
/// The output is anchored to the base: `output_size = round(|base|/(1-f))`
/// and `refined_count = round(f x output_size)`. Selection and the final
/// interleave are seeded-deterministic.
pub fn mix_dataset(
    base: &[Sample],
    refined: &[Sample],
    spec: &MixSpec,
) -> Result<Vec<Sample>, LossError> {
    let f = spec.refined_fraction;
    if f == 0.0 {
        return Ok(base.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let refined_count = if f >= 1.0 {
        refined.len()
    } else {
        let output_size = (base.len() as f64 / (1.0 - f)).round();
        (f * output_size).round() as usize
    };
    if refined.len() < refined_count {
        return Err(LossError::InsufficientRefined {
            needed: refined_count,
            available: refined.len(),
        });
    }
    let mut refined_pool: Vec<Sample> = refined.to_vec();
    select_prefix(&mut refined_pool, refined_count, &mut rng);
    let mut mixed: Vec<Sample> = if f >= 1.0 {
        refined_pool
    } else {
        base.iter().cloned().chain(refined_pool.into_iter().take(refined_count)).collect()
    };
    let n = mixed.len();
    select_prefix(&mut mixed, n, &mut rng);
    Ok(mixed)
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>, LossError> {
    let content = std::fs::read_to_string(path)?;
    content
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| LossError::Corrupt { line: i + 1, reason: e.to_string() })
        })
        .collect()
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<(), LossError> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serialization cannot fail"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-sample masked NLL plus the mean, for `losses eval`.
pub fn eval_samples(samples: &[Sample]) -> Result<(Vec<f64>, f64), LossError> {
    let mut losses = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let logprobs =
            s.logprobs.clone().ok_or(LossError::MissingLogprobs { index: index + 1 })?;
        let input = TokenLossInput { token_logprobs: logprobs, target_mask: s.mask.clone() };
        losses.push(masked_nll(&input)?);
    }
    let mean = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
    Ok((losses, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_nll_hand_example() {
        let input = TokenLossInput {
            token_logprobs: vec![-0.5, -1.5, -2.0],
            target_mask: vec![true, false, true],
        };
        assert_eq!(masked_nll(&input).unwrap(), 2.5);
    }

    #[test]
    fn masked_nll_probability_one_tokens() {
        let input =
            TokenLossInput { token_logprobs: vec![0.0, 0.0], target_mask: vec![true, true] };
        assert_eq!(masked_nll(&input).unwrap(), 0.0);
    }

    #[test]
    fn masked_nll_errors() {
        let empty =
            TokenLossInput { token_logprobs: vec![-1.0], target_mask: vec![false] };
        assert!(matches!(masked_nll(&empty), Err(LossError::MaskEmpty)));
        let mismatch =
            TokenLossInput { token_logprobs: vec![-1.0], target_mask: vec![true, false] };
        assert!(matches!(masked_nll(&mismatch), Err(LossError::LengthMismatch { .. })));
        let positive =
            TokenLossInput { token_logprobs: vec![-1.0, 0.5], target_mask: vec![true, true] };
        assert!(matches!(
            masked_nll(&positive),
            Err(LossError::PositiveLogprob { index: 1, .. })
        ));
    }

    #[test]
    fn finetune_sample_span_rule() {
        let tok = WordTokenizer;
        let sample = build_finetune_sample("a b c d", "x y z w u v", &tok);
        assert_eq!(sample.mask.iter().filter(|m| !**m).count(), 4);
        assert_eq!(sample.mask.iter().filter(|m| **m).count(), 6);
        assert_eq!(sample.mask[..4], [false; 4]);
        assert_eq!(tok.detokenize(&sample.target_tokens()), "x y z w u v");
    }

    #[test]
    fn finetune_sample_empty_context() {
        let sample = build_finetune_sample("", "x y", &WordTokenizer);
        assert!(sample.mask.iter().all(|m| *m));
    }

    #[test]
    fn refine_sample_masks_only_solution() {
        let aggr = AggrContext {
            nl: "add ints".into(),
            fg: "broken code here".into(),
            ef: crate::task::ExecutionFeedback {
                compiled: false,
                diagnostics: vec![],
                test_results: vec![],
                trace: String::new(),
                truncated: false,
            },
        };
        let tok = WordTokenizer;
        let ctx = AgentContext::default();
        let sample = build_refine_sample(&aggr, "fixed code", &tok, &ctx);
        let context_tokens = tok.tokenize(&assemble_aggr_prompt(&aggr, &ctx));
        assert_eq!(sample.tokens.len(), context_tokens.len() + 2);
        assert_eq!(sample.mask[..context_tokens.len()].iter().filter(|m| **m).count(), 0);
        assert_eq!(tok.detokenize(&sample.target_tokens()), "fixed code");
    }

    fn hundred_context_sample() -> Sample {
        let tokens: Vec<String> = (0..100).map(|i| format!("c{i}")).collect();
        let mask = vec![false; 100];
        let mut sample = Sample { tokens, mask, logprobs: None };
        sample.tokens.extend(["t0".to_string(), "t1".to_string()]);
        sample.mask.extend([true, true]);
        sample
    }

    #[test]
    fn mask_input_exact_count() {
        let sample = hundred_context_sample();
        let spec = MixSpec { mask_rate: 0.05, seed: 7, ..MixSpec::default() };
        let masked = mask_input(&sample, &spec);
        let replaced = masked.tokens.iter().filter(|t| *t == MASK_TOKEN).count();
        assert_eq!(replaced, 5);
        // never the target span
        assert_ne!(masked.tokens[100], MASK_TOKEN);
        assert_ne!(masked.tokens[101], MASK_TOKEN);
    }

    #[test]
    fn mask_input_rate_zero_is_identity() {
        let sample = hundred_context_sample();
        let spec = MixSpec { mask_rate: 0.0, seed: 7, ..MixSpec::default() };
        assert_eq!(mask_input(&sample, &spec).tokens, sample.tokens);
    }

    #[test]
    fn mask_input_seed_determinism() {
        let sample = hundred_context_sample();
        let spec = MixSpec { mask_rate: 0.05, seed: 11, ..MixSpec::default() };
        let a = mask_input(&sample, &spec);
        let b = mask_input(&sample, &spec);
        assert_eq!(a, b);
        let other = MixSpec { seed: 12, ..spec };
        assert_ne!(mask_input(&sample, &other).tokens, a.tokens);
    }

    fn trivial_samples(n: usize, tag: &str) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                tokens: vec![format!("{tag}{i}")],
                mask: vec![true],
                logprobs: None,
            })
            .collect()
    }

    #[test]
    fn mix_dataset_quarter_fraction() {
        let base = trivial_samples(75, "b");
        let refined = trivial_samples(30, "r");
        let spec = MixSpec { refined_fraction: 0.25, seed: 3, ..MixSpec::default() };
        let mixed = mix_dataset(&base, &refined, &spec).unwrap();
        assert_eq!(mixed.len(), 100);
        let refined_count = mixed.iter().filter(|s| s.tokens[0].starts_with('r')).count();
        assert_eq!(refined_count, 25);
    }

    #[test]
    fn mix_dataset_zero_fraction_is_base() {
        let base = trivial_samples(5, "b");
        let spec = MixSpec { refined_fraction: 0.0, seed: 3, ..MixSpec::default() };
        assert_eq!(mix_dataset(&base, &[], &spec).unwrap(), base);
    }

    #[test]
    fn mix_dataset_insufficient_refined() {
        let base = trivial_samples(75, "b");
        let refined = trivial_samples(10, "r");
        let spec = MixSpec { refined_fraction: 0.25, seed: 3, ..MixSpec::default() };
        assert!(matches!(
            mix_dataset(&base, &refined, &spec),
            Err(LossError::InsufficientRefined { needed: 25, available: 10 })
        ));
    }

    #[test]
    fn mix_dataset_fraction_close_to_request() {
        for (n_base, f) in [(10usize, 0.3f64), (7, 0.5), (9, 0.35), (2, 0.4)] {
            let base = trivial_samples(n_base, "b");
            let refined = trivial_samples(n_base * 2, "r");
            let spec = MixSpec { refined_fraction: f, seed: 1, ..MixSpec::default() };
            let mixed = mix_dataset(&base, &refined, &spec).unwrap();
            let got = mixed.iter().filter(|s| s.tokens[0].starts_with('r')).count() as f64
                / mixed.len() as f64;
            assert!(
                (got - f).abs() <= 1.0 / mixed.len() as f64 + 1e-9,
                "fraction {got} too far from {f} at size {}",
                mixed.len()
            );
        }
    }

    #[test]
    fn mix_dataset_deterministic() {
        let base = trivial_samples(75, "b");
        let refined = trivial_samples(30, "r");
        let spec = MixSpec { refined_fraction: 0.25, seed: 3, ..MixSpec::default() };
        let a = mix_dataset(&base, &refined, &spec).unwrap();
        let b = mix_dataset(&base, &refined, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        let samples = vec![Sample {
            tokens: vec!["a".into(), "b".into()],
            mask: vec![false, true],
            logprobs: Some(vec![-0.1, -0.2]),
        }];
        write_samples(&path, &samples).unwrap();
        assert_eq!(read_samples(&path).unwrap(), samples);
    }

    #[test]
    fn eval_samples_mean() {
        let samples = vec![
            Sample { tokens: vec!["a".into()], mask: vec![true], logprobs: Some(vec![-1.0]) },
            Sample { tokens: vec!["b".into()], mask: vec![true], logprobs: Some(vec![-3.0]) },
        ];
        let (losses, mean) = eval_samples(&samples).unwrap();
        assert_eq!(losses, vec![1.0, 3.0]);
        assert_eq!(mean, 2.0);
    }
}
