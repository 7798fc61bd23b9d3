//! Generation: greedy and beam search over the flat sequence, and the
//! element search used under the block mask.

use std::cmp::Ordering;

use worldkit_core::sos::{TokenId, BOS, EOS, SEP};

use crate::network::{IncrementalDecoder, KvCache};
use crate::tensor::log_softmax;

/// A generated sequence (without the leading `BOS`).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities.
    pub score: f64,
    /// The length cap was hit before `EOS`.
    pub truncated: bool,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `BOS` until `EOS` or `max_len` tokens.
pub fn greedy(dec: &IncrementalDecoder, max_len: usize) -> Hypothesis {
    let max_len = max_len.min(dec.max_positions());
    let mut cache = dec.empty_cache();
    let mut logits = dec.step(&mut cache, BOS, 0);
    let mut tokens = Vec::new();
    let mut score = 0.0;
    while tokens.len() < max_len {
        let lp = log_softmax(&logits);
        let t = argmax(&lp);
        score += lp[t];
        tokens.push(t);
        if t == EOS {
            return Hypothesis {
                tokens,
                score,
                truncated: false,
            };
        }
        if tokens.len() == max_len {
            break;
        }
        logits = dec.step(&mut cache, t, tokens.len());
    }
    Hypothesis {
        tokens,
        score,
        truncated: true,
    }
}

struct Live {
    tokens: Vec<TokenId>,
    score: f64,
    cache: KvCache,
    logits: Vec<f64>,
}

/// Higher score first, then lower token ids, then earlier parent.
fn rank(a: &(f64, usize, TokenId), b: &(f64, usize, TokenId)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.2.cmp(&b.2))
        .then(a.1.cmp(&b.1))
}

/// Beam search without length normalization. Returns up to `width`
/// hypotheses with non-increasing scores; hypotheses cut by the length cap
/// are flagged `truncated`. Width 1 is exactly [`greedy`].
pub fn beam_search(dec: &IncrementalDecoder, width: usize, max_len: usize) -> Vec<Hypothesis> {
    let width = width.max(1);
    let max_len = max_len.min(dec.max_positions());
    let mut cache = dec.empty_cache();
    let logits = dec.step(&mut cache, BOS, 0);
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        cache,
        logits,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (h, l) in live.iter().enumerate() {
            for (t, lp) in log_softmax(&l.logits).into_iter().enumerate() {
                cands.push((l.score + lp, h, t));
            }
        }
        cands.sort_by(rank);
        let mut next: Vec<(f64, usize, TokenId)> = Vec::new();
        for (r, c) in cands.into_iter().enumerate() {
            if c.2 == EOS {
                if r < width {
                    let mut tokens = live[c.1].tokens.clone();
                    tokens.push(EOS);
                    finished.push(Hypothesis {
                        tokens,
                        score: c.0,
                        truncated: false,
                    });
                }
            } else if next.len() < width {
                next.push(c);
            }
            if next.len() == width && r + 1 >= width {
                break;
            }
        }
        finished.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        finished.truncate(width);
        let best_live = next.first().map_or(f64::NEG_INFINITY, |c| c.0);
        // Scores only fall as sequences grow, so a full finished list whose
        // worst entry beats every live prefix is final.
        if finished.len() == width && finished.last().is_some_and(|w| w.score >= best_live) {
            break;
        }
        let at_cap = live[0].tokens.len() + 1 >= max_len;
        let mut grown = Vec::with_capacity(next.len());
        for (score, h, t) in next {
            let mut tokens = live[h].tokens.clone();
            tokens.push(t);
            if at_cap {
                finished.push(Hypothesis {
                    tokens,
                    score,
                    truncated: true,
                });
                continue;
            }
            let mut cache = live[h].cache.clone();
            let logits = dec.step(&mut cache, t, tokens.len());
            grown.push(Live {
                tokens,
                score,
                cache,
                logits,
            });
        }
        live = grown;
    }
    finished.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    finished.truncate(width);
    finished
}

/// Result of the element search.
#[derive(Debug, Clone, PartialEq)]
pub struct SetSearch {
    /// Completed elements (without the closing `SEP`) by descending
    /// log-probability.
    pub ranked: Vec<(Vec<TokenId>, f64)>,
    /// Every element at or above this log-probability is in `ranked`.
    pub threshold: f64,
    /// Set size implied by the start probability of `EOS`.
    pub count: usize,
    /// The `count` best elements of `ranked`.
    pub predicted: Vec<Vec<TokenId>>,
}

/// Live partial elements kept per depth beyond those above threshold.
pub const SET_SEARCH_CAP: usize = 256;

/// Element search under the block mask. Every element starts from `SEP` at
/// offset 0 with an empty context, so one start distribution covers all
/// elements and `EOS` alike. A set of k elements trains that distribution
/// towards mass 1/(k+1) on `EOS`, so the predicted size is
/// round(1/p(EOS) - 1) and the predicted set is that many best elements.
/// Partials at or above half the `EOS` probability are all expanded, plus
/// the `width` best others.
pub fn set_search(dec: &IncrementalDecoder, width: usize, max_element_len: usize) -> SetSearch {
    let width = width.max(1);
    let max_element_len = max_element_len.min(dec.max_positions().saturating_sub(1)).max(1);
    let mut cache = dec.empty_cache();
    let start = log_softmax(&dec.step(&mut cache, SEP, 0));
    let threshold = start[EOS] + 0.5f64.ln();
    let mut ranked: Vec<(Vec<TokenId>, f64)> = Vec::new();
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        cache,
        logits: Vec::new(),
    }];
    let mut first = true;
    while !live.is_empty() {
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (h, l) in live.iter().enumerate() {
            let lp = if first { start.clone() } else { log_softmax(&l.logits) };
            for (t, p) in lp.into_iter().enumerate() {
                // EOS only ever closes the set, never an element.
                if t == EOS || (t == SEP && l.tokens.is_empty()) {
                    continue;
                }
                cands.push((l.score + p, h, t));
            }
        }
        first = false;
        cands.sort_by(rank);
        let mut keep: Vec<(f64, usize, TokenId)> = Vec::new();
        let mut others = 0;
        for c in cands {
            if c.2 == SEP {
                ranked.push((live[c.1].tokens.clone(), c.0));
                continue;
            }
            if c.0 >= threshold && keep.len() < SET_SEARCH_CAP {
                keep.push(c);
            } else if others < width {
                keep.push(c);
                others += 1;
            }
        }
        let mut grown = Vec::with_capacity(keep.len());
        for (score, h, t) in keep {
            let mut tokens = live[h].tokens.clone();
            tokens.push(t);
            if tokens.len() > max_element_len {
                // Over-long elements never close with SEP and are dropped.
                continue;
            }
            let mut cache = live[h].cache.clone();
            let logits = dec.step(&mut cache, t, tokens.len());
            grown.push(Live {
                tokens,
                score,
                cache,
                logits,
            });
        }
        live = grown;
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let count = expected_size(start[EOS]);
    let predicted = ranked.iter().take(count).map(|(t, _)| t.clone()).collect();
    SetSearch {
        ranked,
        threshold,
        count,
        predicted,
    }
}

/// Set size whose uniform share of the start distribution matches `EOS`.
pub fn expected_size(eos_logprob: f64) -> usize {
    let k = (-eos_logprob).exp() - 1.0;
    if k.is_finite() {
        k.round().clamp(0.0, SET_SEARCH_CAP as f64) as usize
    } else {
        SET_SEARCH_CAP
    }
}

/// Flat `e1 SEP e2 … EOS` form of a list of elements, for [`decode_set`].
///
/// [`decode_set`]: worldkit_core::sos::decode_set
pub fn flatten_elements(elements: &[Vec<TokenId>]) -> Vec<TokenId> {
    let mut out = Vec::new();
    for (i, e) in elements.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend_from_slice(e);
    }
    out.push(EOS);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Task, DEFAULT_BEAM_WIDTH};
    use crate::network::tests::tiny_setup;
    use crate::network::WorldModel;
    use crate::tensor::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A tiny model whose output layer is scaled up so distributions are
    /// peaked enough for sequences to end.
    fn sharp_model(seed: u64, scale: f64) -> WorldModel {
        let (mut m, _) = tiny_setup(seed);
        for d in [m.layout.graph_decoder.out_w, m.layout.action_decoder.out_w] {
            m.params.get_mut(d).scale(scale);
        }
        m
    }

    fn random_memory(m: &WorldModel, rng: &mut ChaCha8Rng) -> Mat {
        let rows = rng.gen_range(2..9);
        let d = m.config.d_model;
        Mat::from_vec(rows, d, (0..rows * d).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    /// Teacher-forced log-probability of `tokens` after `start` at offset 0.
    fn sequence_logprob(dec: &IncrementalDecoder, start: TokenId, tokens: &[TokenId]) -> f64 {
        let mut cache = dec.empty_cache();
        let mut logits = dec.step(&mut cache, start, 0);
        let mut lp = 0.0;
        for (i, &t) in tokens.iter().enumerate() {
            lp += log_softmax(&logits)[t];
            if i + 1 < tokens.len() {
                logits = dec.step(&mut cache, t, i + 1);
            }
        }
        lp
    }

    #[test]
    fn default_width_is_fifteen() {
        assert_eq!(DEFAULT_BEAM_WIDTH, 15);
        assert_eq!(crate::config::ModelConfig::large().beam_width, 15);
    }

    #[test]
    fn width_one_is_greedy_on_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = sharp_model(41, 40.0);
        for i in 0..100 {
            let mem = random_memory(&m, &mut rng);
            let task = if i % 2 == 0 { Task::Graph } else { Task::Action };
            let dec = m.decoder(task, &mem);
            let g = greedy(&dec, 24);
            let b = beam_search(&dec, 1, 24);
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, g.tokens, "state {i}");
            assert_eq!(b[0].score.to_bits(), g.score.to_bits());
            assert_eq!(b[0].truncated, g.truncated);
        }
    }

    #[test]
    fn beam_scores_are_sorted_and_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = sharp_model(42, 40.0);
        for _ in 0..20 {
            let mem = random_memory(&m, &mut rng);
            let dec = m.decoder(Task::Graph, &mem);
            let hyps = beam_search(&dec, 5, 16);
            assert!(!hyps.is_empty() && hyps.len() <= 5);
            for w in hyps.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
            for h in &hyps {
                assert_eq!(h.truncated, h.tokens.last() != Some(&EOS));
                assert!(h.tokens.len() <= 16);
                assert!((sequence_logprob(&dec, BOS, &h.tokens) - h.score).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn length_cap_flags_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = sharp_model(43, 1.0);
        let mem = random_memory(&m, &mut rng);
        let dec = m.decoder(Task::Graph, &mem);
        let g = greedy(&dec, 2);
        assert!(g.tokens.len() <= 2);
        assert_eq!(g.truncated, g.tokens.last() != Some(&EOS));
        for h in beam_search(&dec, 3, 2) {
            assert!(h.tokens.len() <= 2);
            assert_eq!(h.truncated, h.tokens.last() != Some(&EOS));
        }
    }

    /// Every element whose probability clears the threshold, by exhaustive
    /// descent over prefixes that still clear it.
    fn above_threshold(dec: &IncrementalDecoder, max_len: usize, threshold: f64) -> Vec<(Vec<TokenId>, f64)> {
        fn walk(
            dec: &IncrementalDecoder,
            cache: &KvCache,
            logits: &[f64],
            prefix: &mut Vec<TokenId>,
            score: f64,
            max_len: usize,
            threshold: f64,
            out: &mut Vec<(Vec<TokenId>, f64)>,
        ) {
            for (t, lp) in log_softmax(logits).into_iter().enumerate() {
                let s = score + lp;
                if s < threshold || t == EOS || (t == SEP && prefix.is_empty()) {
                    continue;
                }
                if t == SEP {
                    out.push((prefix.clone(), s));
                } else if prefix.len() < max_len {
                    let mut c = cache.clone();
                    prefix.push(t);
                    let l = dec.step(&mut c, t, prefix.len());
                    walk(dec, &c, &l, prefix, s, max_len, threshold, out);
                    prefix.pop();
                }
            }
        }
        let mut cache = dec.empty_cache();
        let logits = dec.step(&mut cache, SEP, 0);
        let mut out = Vec::new();
        walk(dec, &cache, &logits, &mut Vec::new(), 0.0, max_len, threshold, &mut out);
        out
    }

    #[test]
    fn set_search_finds_every_element_above_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (i, scale) in [(0u64, 8.0), (1, 20.0), (2, 40.0)] {
            let m = sharp_model(44 + i, scale);
            for _ in 0..5 {
                let mem = random_memory(&m, &mut rng);
                let dec = m.decoder(Task::Graph, &mem);
                let s = set_search(&dec, 4, 3);
                let mut want = above_threshold(&dec, 3, s.threshold);
                want.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                let found: Vec<(Vec<TokenId>, f64)> = s.ranked.iter().take(want.len()).cloned().collect();
                assert_eq!(found.iter().map(|e| &e.0).collect::<Vec<_>>(), want.iter().map(|e| &e.0).collect::<Vec<_>>());
                assert!(s.ranked.get(want.len()).is_none_or(|e| e.1 < s.threshold));
                let top: Vec<Vec<TokenId>> = s.ranked.iter().take(s.count).map(|(t, _)| t.clone()).collect();
                assert_eq!(s.predicted, top);
                for w in s.ranked.windows(2) {
                    assert!(w[0].1 >= w[1].1);
                }
                for (e, lp) in &s.ranked {
                    assert!(!e.is_empty() && e.len() <= 3);
                    assert!(!e.contains(&EOS) && !e.contains(&SEP));
                    let mut with_sep = e.clone();
                    with_sep.push(SEP);
                    assert!((sequence_logprob(&dec, SEP, &with_sep) - lp).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn expected_size_inverts_the_uniform_share() {
        for k in 0..20usize {
            assert_eq!(expected_size(-((k + 1) as f64).ln()), k);
        }
        assert_eq!(expected_size(f64::NEG_INFINITY), SET_SEARCH_CAP);
        assert_eq!(expected_size(0.0), 0);
    }

    #[test]
    fn flatten_round_trips_through_decode() {
        assert_eq!(flatten_elements(&[]), vec![EOS]);
        assert_eq!(flatten_elements(&[vec![8, 9], vec![10]]), vec![8, 9, SEP, 10, EOS]);
    }
}
