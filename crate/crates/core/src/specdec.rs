//! Greedy speculative decoding with strict top-1 verification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::tensor::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDecodeConfig {
    /// Draft tokens proposed per round.
    pub k: usize,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub eos_token: Option<usize>,
}

impl SpecDecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::usage("k must be at least 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::usage("max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

/// One draft-then-verify round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub drafted: usize,
    pub accepted: usize,
    /// Tokens committed this round: `accepted + 1`, less when an accepted EOS
    /// ends the session.
    pub emitted: usize,
}

impl RoundRecord {
    /// Contribution of this round to the mean accepted length.
    pub fn length(&self) -> usize {
        (self.accepted + 1).min(self.emitted)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpecStats {
    pub rounds: Vec<RoundRecord>,
}

impl SpecStats {
    pub fn total_drafted(&self) -> usize {
        self.rounds.iter().map(|r| r.drafted).sum()
    }

    pub fn total_accepted(&self) -> usize {
        self.rounds.iter().map(|r| r.accepted).sum()
    }

    pub fn total_emitted(&self) -> usize {
        self.rounds.iter().map(|r| r.emitted).sum()
    }

    /// Sum of per-round lengths, the numerator of the MAL.
    pub fn total_length(&self) -> usize {
        self.rounds.iter().map(RoundRecord::length).sum()
    }

    pub fn extend(&mut self, other: &SpecStats) {
        self.rounds.extend_from_slice(&other.rounds);
    }
}

/// Mean over rounds of accepted draft tokens plus the one target token.
pub fn mean_accepted_length(stats: &SpecStats) -> Result<f64> {
    if stats.rounds.is_empty() {
        return Err(Error::usage("mean accepted length of zero rounds"));
    }
    Ok(stats.total_length() as f64 / stats.rounds.len() as f64)
}

/// Modeled speedup over target-only decoding: `mal / (k·c + 1)`.
pub fn improvement_factor(mal: f64, k: usize, c: f64) -> Result<f64> {
    if !(mal >= 1.0) || !(c >= 0.0) {
        return Err(Error::usage(format!(
            "improvement factor needs mal >= 1 and c >= 0, got mal={mal}, c={c}"
        )));
    }
    Ok(mal / (k as f64 * c + 1.0))
}

/// Ratio of draft to target cost per forward, from latencies or MACs.
pub fn cost_factor(draft_cost: f64, target_cost: f64) -> Result<f64> {
    if !(target_cost > 0.0) || !(draft_cost >= 0.0) {
        return Err(Error::usage(format!(
            "cost factor needs target cost > 0 and draft cost >= 0, got {draft_cost}/{target_cost}"
        )));
    }
    Ok(draft_cost / target_cost)
}

fn check_budget<M: LanguageModel>(model: &M, prompt: &[usize], max_new: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::usage("empty prompt"));
    }
    // The last generated token is never fed back.
    let needed = prompt.len() + max_new.saturating_sub(1);
    if needed > model.max_seq() {
        return Err(Error::SequenceOverflow {
            needed,
            max_seq: model.max_seq(),
        });
    }
    Ok(())
}

/// Feeds `seq[cache_len..]` and returns the argmax of every fed position.
fn catch_up<M: LanguageModel>(model: &M, seq: &[usize], cache: &mut M::Cache) -> Result<Vec<usize>> {
    let start = M::cache_len(cache);
    let logits = model.forward_logits(&seq[start..], cache)?;
    Ok(logits.iter().map(|row| argmax(row)).collect())
}

/// Target-only greedy decoding: the reference output of
/// [`speculative_decode`]. Stops after `max_new_tokens` or an emitted EOS.
pub fn greedy_decode<M: LanguageModel>(
    model: &M,
    prompt: &[usize],
    max_new_tokens: usize,
    eos: Option<usize>,
) -> Result<Vec<usize>> {
    check_budget(model, prompt, max_new_tokens)?;
    let mut seq = prompt.to_vec();
    let mut cache = model.new_cache();
    for _ in 0..max_new_tokens {
        let next = *catch_up(model, &seq, &mut cache)?.last().expect("non-empty feed");
        seq.push(next);
        if Some(next) == eos {
            break;
        }
    }
    Ok(seq)
}

/// Speculative decoding of `target` with `draft` proposing up to `k` tokens
/// per round. The returned sequence equals
/// `greedy_decode(target, prompt, max_new_tokens, eos)` token for token.
pub fn speculative_decode<D: LanguageModel, M: LanguageModel>(
    draft: &D,
    target: &M,
    prompt: &[usize],
    cfg: &SpecDecodeConfig,
) -> Result<(Vec<usize>, SpecStats)> {
    cfg.validate()?;
    if draft.vocab_size() != target.vocab_size() {
        return Err(Error::VocabMismatch {
            draft: draft.vocab_size(),
            target: target.vocab_size(),
        });
    }
    check_budget(target, prompt, cfg.max_new_tokens)?;
    check_budget(draft, prompt, cfg.max_new_tokens)?;

    let mut seq = prompt.to_vec();
    let mut stats = SpecStats::default();
    let mut draft_cache = draft.new_cache();
    let mut target_cache = target.new_cache();
    let mut generated = 0;
    let is_eos = |t: usize| Some(t) == cfg.eos_token;

    while generated < cfg.max_new_tokens {
        let base = seq.len();
        // Leave room for the target's own token so a round never overshoots.
        let budget = cfg.k.min(cfg.max_new_tokens - generated - 1);
        let mut proposals = Vec::with_capacity(budget);
        while proposals.len() < budget {
            let next = *catch_up(draft, &seq, &mut draft_cache)?.last().expect("non-empty feed");
            seq.push(next);
            proposals.push(next);
            if is_eos(next) {
                break;
            }
        }

        // Row `i` of the verified block predicts the token after `base − 1 + i`.
        let target_start = M::cache_len(&target_cache);
        let predictions = catch_up(target, &seq, &mut target_cache)?;
        let verified = &predictions[base - 1 - target_start..];

        let accepted = proposals
            .iter()
            .zip(verified)
            .take_while(|(d, t)| d == t)
            .count();
        seq.truncate(base + accepted);
        let mut emitted = accepted;
        let stop = if accepted > 0 && is_eos(seq[base + accepted - 1]) {
            true
        } else {
            let fix = verified[accepted];
            seq.push(fix);
            emitted += 1;
            is_eos(fix)
        };
        D::truncate_cache(&mut draft_cache, base + accepted);
        M::truncate_cache(&mut target_cache, base + accepted);

        stats.rounds.push(RoundRecord {
            drafted: proposals.len(),
            accepted,
            emitted,
        });
        generated += emitted;
        if stop {
            break;
        }
    }
    Ok((seq, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Transformer, TransformerConfig};

    fn micro(seed: u64) -> Transformer<f32> {
        let mut c = TransformerConfig::micro();
        c.n_layers = 2;
        Transformer::random(c, seed).unwrap()
    }

    /// Proposes token 0 regardless of input.
    struct ZeroDraft {
        vocab: usize,
        max_seq: usize,
    }

    impl LanguageModel for ZeroDraft {
        type Cache = usize;
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn max_seq(&self) -> usize {
            self.max_seq
        }
        fn new_cache(&self) -> usize {
            0
        }
        fn cache_len(cache: &usize) -> usize {
            *cache
        }
        fn truncate_cache(cache: &mut usize, len: usize) {
            *cache = (*cache).min(len);
        }
        fn forward_logits(&self, tokens: &[usize], cache: &mut usize) -> Result<Vec<Vec<f32>>> {
            *cache += tokens.len();
            let mut row = vec![0.0; self.vocab];
            row[0] = 1.0;
            Ok(vec![row; tokens.len()])
        }
    }

    /// A transformer that can never pick token 0.
    struct NoZero(Transformer<f32>);

    impl LanguageModel for NoZero {
        type Cache = <Transformer<f32> as LanguageModel>::Cache;
        fn vocab_size(&self) -> usize {
            self.0.vocab_size()
        }
        fn max_seq(&self) -> usize {
            LanguageModel::max_seq(&self.0)
        }
        fn new_cache(&self) -> Self::Cache {
            LanguageModel::new_cache(&self.0)
        }
        fn cache_len(cache: &Self::Cache) -> usize {
            cache.len()
        }
        fn truncate_cache(cache: &mut Self::Cache, len: usize) {
            cache.truncate(len)
        }
        fn forward_logits(&self, tokens: &[usize], cache: &mut Self::Cache) -> Result<Vec<Vec<f32>>> {
            let mut rows = self.0.forward_logits(tokens, cache)?;
            for r in &mut rows {
                r[0] = -1e9;
            }
            Ok(rows)
        }
    }

    #[test]
    fn greedy_trivia() {
        let m = micro(1);
        assert_eq!(greedy_decode(&m, &[1, 2, 3], 0, None).unwrap(), vec![1, 2, 3]);
        let first = m.next_token(&[1, 2, 3]).unwrap();
        let out = greedy_decode(&m, &[1, 2, 3], 10, Some(first)).unwrap();
        assert_eq!(out, vec![1, 2, 3, first]);
        assert!(greedy_decode(&m, &[], 3, None).is_err());
    }

    #[test]
    fn greedy_matches_cacheless_loop() {
        let m = micro(2);
        let mut reference = vec![4, 8, 15];
        for _ in 0..20 {
            reference.push(m.next_token(&reference).unwrap());
        }
        assert_eq!(greedy_decode(&m, &[4, 8, 15], 20, None).unwrap(), reference);
    }

    #[test]
    fn greedy_overflow() {
        let m = micro(3);
        let max = m.config.max_seq;
        assert!(greedy_decode(&m, &[1, 2], max - 1, None).is_ok());
        assert!(matches!(
            greedy_decode(&m, &[1, 2], max, None),
            Err(Error::SequenceOverflow { .. })
        ));
    }

    #[test]
    fn self_drafting_accepts_everything() {
        let m = micro(4);
        for k in [1, 3, 5] {
            let cfg = SpecDecodeConfig { k, max_new_tokens: 4 * (k + 1), eos_token: None };
            let (out, stats) = speculative_decode(&m, &m, &[3, 1, 4], &cfg).unwrap();
            assert_eq!(out, greedy_decode(&m, &[3, 1, 4], cfg.max_new_tokens, None).unwrap());
            assert!(stats.rounds.iter().all(|r| r.accepted == k && r.emitted == k + 1));
            assert_eq!(mean_accepted_length(&stats).unwrap(), (k + 1) as f64);
        }
    }

    #[test]
    fn useless_draft_still_lossless() {
        let target = NoZero(micro(5));
        let draft = ZeroDraft { vocab: target.vocab_size(), max_seq: 96 };
        let cfg = SpecDecodeConfig { k: 4, max_new_tokens: 30, eos_token: None };
        let (out, stats) = speculative_decode(&draft, &target, &[7, 7], &cfg).unwrap();
        assert_eq!(out, greedy_decode(&target, &[7, 7], 30, None).unwrap());
        assert!(stats.rounds.iter().all(|r| r.accepted == 0));
        assert_eq!(mean_accepted_length(&stats).unwrap(), 1.0);
    }

    #[test]
    fn seeded_pair_is_lossless() {
        let target = micro(6);
        let draft = micro(7);
        let cfg = SpecDecodeConfig { k: 5, max_new_tokens: 64, eos_token: None };
        let (out, stats) = speculative_decode(&draft, &target, &[1, 20, 21], &cfg).unwrap();
        assert_eq!(out, greedy_decode(&target, &[1, 20, 21], 64, None).unwrap());
        let mal = mean_accepted_length(&stats).unwrap();
        assert!((1.0..=6.0).contains(&mal));
        assert_eq!(stats.total_emitted(), 64);
    }

    #[test]
    fn eos_ends_both_decoders_identically() {
        let target = micro(8);
        let greedy = greedy_decode(&target, &[2, 9], 40, None).unwrap();
        // Pick an EOS that shows up mid-generation.
        let eos = greedy[6];
        for draft in [micro(8), micro(9)] {
            let cfg = SpecDecodeConfig { k: 3, max_new_tokens: 40, eos_token: Some(eos) };
            let (out, stats) = speculative_decode(&draft, &target, &[2, 9], &cfg).unwrap();
            assert_eq!(out, greedy_decode(&target, &[2, 9], 40, Some(eos)).unwrap());
            assert_eq!(*out.last().unwrap(), eos);
            assert_eq!(stats.total_emitted(), out.len() - 2);
        }
    }

    #[test]
    fn vocab_mismatch() {
        let target = micro(1);
        let draft = ZeroDraft { vocab: 7, max_seq: 96 };
        let cfg = SpecDecodeConfig { k: 2, max_new_tokens: 4, eos_token: None };
        assert!(matches!(
            speculative_decode(&draft, &target, &[1], &cfg),
            Err(Error::VocabMismatch { .. })
        ));
    }

    fn rounds(accepted: &[usize]) -> SpecStats {
        SpecStats {
            rounds: accepted
                .iter()
                .map(|&a| RoundRecord { drafted: 5, accepted: a, emitted: a + 1 })
                .collect(),
        }
    }

    #[test]
    fn mal_examples() {
        assert_eq!(mean_accepted_length(&rounds(&[5, 5, 5])).unwrap(), 6.0);
        assert_eq!(mean_accepted_length(&rounds(&[0, 0])).unwrap(), 1.0);
        assert!((mean_accepted_length(&rounds(&[3, 0, 5])).unwrap() - 11.0 / 3.0).abs() < 1e-9);
        assert!(mean_accepted_length(&SpecStats::default()).is_err());
    }

    #[test]
    fn improvement_and_cost_examples() {
        assert_eq!(improvement_factor(6.0, 5, 0.0).unwrap(), 6.0);
        assert_eq!(improvement_factor(1.0, 4, 0.25).unwrap(), 0.5);
        assert!((improvement_factor(4.16, 5, 0.1).unwrap() - 4.16 / 1.5).abs() < 1e-12);
        assert!(improvement_factor(0.5, 4, 0.1).is_err());
        assert_eq!(cost_factor(3.0, 3.0).unwrap(), 1.0);
        assert_eq!(cost_factor(1.0, 10.0).unwrap(), 0.1);
        assert!(cost_factor(1.0, 0.0).is_err());
    }
}
