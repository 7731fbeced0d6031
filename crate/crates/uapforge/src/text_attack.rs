//! Universal trigger-word discovery and application.
//!
//! Text is discrete, so the text-side attack is a search, not a gradient
//! descent: score every token of every caption by masking it and measuring
//! the embedding shift (intra-sentence importance), keep the top-k per
//! caption as candidates, then measure each candidate's effect when
//! substituted into sentences that do not already contain it
//! (inter-sentence influence). The highest-ranked token becomes the
//! universal trigger; captions are attacked by substituting it at random
//! or at their most important positions, under a fixed substitution
//! budget. No external word lists are involved; everything comes from the
//! training corpus.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::EncoderBundle;
use crate::dataset::{expand_by_captions, Caption, ExpandedPair, ImageSample, PairedDataset};
use crate::error::{Result, UapError};
use crate::objective::{divergence, DivergenceConfig};
use crate::rng::stream;

/// Reserved out-of-vocabulary token used for masking; adapters map it to a
/// neutral embedding.
pub const MASK_TOKEN: &str = "<mask>";

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Caption {
    text.split_whitespace()
        .filter_map(|w| {
            let cleaned: String = w
                .chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .to_lowercase();
            if cleaned.is_empty() {
                None
            } else {
                Some(cleaned)
            }
        })
        .collect()
}

/// Trigger-mining knobs.
#[derive(Debug, Clone)]
pub struct TextMiningConfig {
    /// Candidates kept per caption from the intra-sentence ranking.
    pub top_k: usize,
    /// Host sentences sampled per candidate per pass.
    pub sample_count: usize,
    /// Scoring passes M_T; substitution positions are redrawn each pass
    /// and scores averaged.
    pub passes: usize,
    pub seed: u64,
    pub divergence: DivergenceConfig,
}

impl Default for TextMiningConfig {
    fn default() -> Self {
        TextMiningConfig {
            top_k: 3,
            sample_count: 32,
            passes: 15,
            seed: 0,
            divergence: DivergenceConfig::default(),
        }
    }
}

/// Per-position mask scores and per-token aggregate influence.
#[derive(Debug, Clone, Default)]
pub struct WordScoreTable {
    /// (sample key, token position) → S(w). The sample key is
    /// `"<image id>#<caption index>"`.
    pub per_sample: BTreeMap<(String, usize), f64>,
    /// token → aggregated influence used for the final ranking.
    pub aggregate: BTreeMap<String, f64>,
}

/// Ranked candidate tokens, best first; ties broken lexicographically.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TriggerLexicon {
    pub entries: Vec<LexiconEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LexiconEntry {
    pub token: String,
    pub score: f64,
}

impl TriggerLexicon {
    pub fn top(&self) -> Option<&LexiconEntry> {
        self.entries.first()
    }
}

/// How the trigger is placed into a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerPolicy {
    Random,
    Importance,
}

/// The chosen universal text perturbation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TextTrigger {
    pub token: String,
    /// Substitution budget ε_T (token replacements per caption).
    pub budget: usize,
    pub policy: TriggerPolicy,
}

/// Mask each position in turn and score the embedding shift:
/// S_j = ℓ(f_T(ŷ_j), f_T(y)) + ℓ(f_T(ŷ_j), f_I(x)).
pub fn word_importance(
    image: &ImageSample,
    caption: &Caption,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
) -> Result<Vec<f64>> {
    if caption.is_empty() {
        return Err(UapError::Contract(
            "word importance of an empty caption".into(),
        ));
    }
    let y_emb = bundle.encode_text(std::slice::from_ref(caption))?;
    let x_emb = bundle.encode_image(&[image.pixels_f64()])?;
    let masked: Vec<Caption> = (0..caption.len())
        .map(|j| {
            let mut m = caption.clone();
            m[j] = MASK_TOKEN.to_string();
            m
        })
        .collect();
    let m_emb = bundle.encode_text(&masked)?;
    let mut scores = Vec::with_capacity(caption.len());
    for j in 0..caption.len() {
        let s = divergence(m_emb.row(j), y_emb.row(0), cfg)?
            + divergence(m_emb.row(j), x_emb.row(0), cfg)?;
        scores.push(s);
    }
    Ok(scores)
}

/// The k highest-scoring tokens of one caption; earlier positions win
/// ties, and fewer than k tokens means the whole caption comes back.
pub fn intra_topk(scores: &[f64], caption: &Caption, k: usize) -> Result<Vec<String>> {
    if k < 1 {
        return Err(UapError::Param("top-k needs k >= 1".into()));
    }
    if scores.len() != caption.len() {
        return Err(UapError::Contract(format!(
            "{} scores for {} tokens",
            scores.len(),
            caption.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| caption[i].clone())
        .collect())
}

/// Score one substitution: replace `caption[pos]` with `candidate` and
/// measure the shift against the original pair.
pub fn substitution_score(
    image: &ImageSample,
    caption: &Caption,
    pos: usize,
    candidate: &str,
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
) -> Result<f64> {
    if pos >= caption.len() {
        return Err(UapError::Contract(format!(
            "substitution position {pos} outside caption of length {}",
            caption.len()
        )));
    }
    let mut sub = caption.clone();
    sub[pos] = candidate.to_string();
    let subs = bundle.encode_text(std::slice::from_ref(&sub))?;
    let y_emb = bundle.encode_text(std::slice::from_ref(caption))?;
    let x_emb = bundle.encode_image(&[image.pixels_f64()])?;
    Ok(divergence(subs.row(0), y_emb.row(0), cfg)? + divergence(subs.row(0), x_emb.row(0), cfg)?)
}

/// Mean substitution score of `candidate` over `sample_count` host pairs
/// drawn (with replacement) from sentences that do not contain it, each at
/// a uniformly chosen position.
pub fn inter_influence(
    candidate: &str,
    corpus: &[ExpandedPair],
    bundle: &dyn EncoderBundle,
    cfg: &DivergenceConfig,
    rng: &mut ChaCha8Rng,
    sample_count: usize,
) -> Result<f64> {
    if sample_count < 1 {
        return Err(UapError::Param("sample_count must be >= 1".into()));
    }
    let eligible: Vec<usize> = corpus
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.caption.iter().any(|t| t == candidate))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(UapError::NoEligibleSentences(candidate.to_string()));
    }
    let mut total = 0.0;
    for _ in 0..sample_count {
        let host = &corpus[eligible[rng.random_range(0..eligible.len())]];
        let pos = rng.random_range(0..host.caption.len());
        total += substitution_score(&host.image, &host.caption, pos, candidate, bundle, cfg)?;
    }
    Ok(total / sample_count as f64)
}

/// Full mining pipeline: intra-sentence candidate selection, then
/// inter-sentence scoring averaged over `passes`, then ranking.
///
/// A candidate that appears in every sentence has no host to be
/// substituted into; it keeps its best intra-sentence score instead of
/// aborting the mine (this only matters for tiny corpora).
pub fn mine_triggers(
    dataset: &PairedDataset,
    bundle: &dyn EncoderBundle,
    cfg: &TextMiningConfig,
) -> Result<(TriggerLexicon, WordScoreTable)> {
    if dataset.n() == 0 {
        return Err(UapError::EmptyDataset);
    }
    if cfg.passes < 1 {
        return Err(UapError::Param("passes must be >= 1".into()));
    }
    let mut table = WordScoreTable::default();
    let mut candidates: BTreeSet<String> = BTreeSet::new();
    let mut intra_best: BTreeMap<String, f64> = BTreeMap::new();

    for item in &dataset.items {
        for (ci, caption) in item.captions.iter().enumerate() {
            let scores = word_importance(&item.image, caption, bundle, &cfg.divergence)?;
            let key = format!("{}#{}", item.image.id, ci);
            for (pos, &s) in scores.iter().enumerate() {
                table.per_sample.insert((key.clone(), pos), s);
                let best = intra_best.entry(caption[pos].clone()).or_insert(0.0);
                if s > *best {
                    *best = s;
                }
            }
            for token in intra_topk(&scores, caption, cfg.top_k)? {
                candidates.insert(token);
            }
        }
    }

    let corpus = expand_by_captions(dataset);
    for (ci, candidate) in candidates.iter().enumerate() {
        let mut acc = 0.0;
        let mut scored_passes = 0usize;
        for pass in 0..cfg.passes as u64 {
            let mut rng = stream(cfg.seed, "inter", &[pass, ci as u64]);
            match inter_influence(
                candidate,
                &corpus,
                bundle,
                &cfg.divergence,
                &mut rng,
                cfg.sample_count,
            ) {
                Ok(s) => {
                    acc += s;
                    scored_passes += 1;
                }
                Err(UapError::NoEligibleSentences(_)) => break,
                Err(e) => return Err(e),
            }
        }
        let score = if scored_passes > 0 {
            acc / scored_passes as f64
        } else {
            intra_best.get(candidate).copied().unwrap_or(0.0)
        };
        table.aggregate.insert(candidate.clone(), score);
    }

    let mut entries: Vec<LexiconEntry> = table
        .aggregate
        .iter()
        .map(|(token, &score)| LexiconEntry {
            token: token.clone(),
            score,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.token.cmp(&b.token))
    });
    Ok((TriggerLexicon { entries }, table))
}

/// Everything the importance policy needs to rank positions.
pub struct ImportanceContext<'a> {
    pub image: &'a ImageSample,
    pub bundle: &'a dyn EncoderBundle,
    pub divergence: &'a DivergenceConfig,
}

/// Substitute the trigger into exactly `budget` positions. Positions
/// already holding the trigger token are not eligible, so the output
/// always differs from the input in exactly `budget` places.
pub fn apply_trigger(
    caption: &Caption,
    trigger: &TextTrigger,
    context: Option<&ImportanceContext<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<Caption> {
    if caption.is_empty() {
        return Err(UapError::Contract("cannot attack an empty caption".into()));
    }
    if trigger.budget < 1 {
        return Err(UapError::Param("substitution budget must be >= 1".into()));
    }
    if trigger.budget > caption.len() {
        return Err(UapError::Contract(format!(
            "budget {} exceeds caption length {}",
            trigger.budget,
            caption.len()
        )));
    }
    let mut eligible: Vec<usize> = (0..caption.len())
        .filter(|&j| caption[j] != trigger.token)
        .collect();
    if eligible.len() < trigger.budget {
        return Err(UapError::Contract(format!(
            "only {} replaceable positions for budget {}",
            eligible.len(),
            trigger.budget
        )));
    }

    let chosen: Vec<usize> = match trigger.policy {
        TriggerPolicy::Random => {
            for i in 0..trigger.budget {
                let j = rng.random_range(i..eligible.len());
                eligible.swap(i, j);
            }
            eligible[..trigger.budget].to_vec()
        }
        TriggerPolicy::Importance => {
            let ctx = context.ok_or_else(|| {
                UapError::Contract(
                    "importance policy needs the paired image and an encoder bundle".into(),
                )
            })?;
            let scores = word_importance(ctx.image, caption, ctx.bundle, ctx.divergence)?;
            eligible.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            eligible[..trigger.budget].to_vec()
        }
    };

    let mut out = caption.clone();
    for j in chosen {
        out[j] = trigger.token.clone();
    }
    Ok(out)
}
