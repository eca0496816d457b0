//! Preference dataset construction: segment sampling, Boltzmann scoring,
//! pair/ranking labeling, and JSON-Lines serialization.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Segment, TabularMDP, Trajectory};
use crate::numerics::logistic;
use crate::oracle::{segment_advantage_exact, segment_advantage_telescoped, SoftSolution};
use crate::rng::seeded;

/// Default cap on dense-dataset segment count (dense pairs grow as n^2).
pub const DENSE_SEGMENT_CAP: usize = 2000;

/// Which score drives the Boltzmann preference model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModel {
    /// Discounted sum of optimal advantages (negated regret).
    Regret,
    /// Discounted sum of raw rewards.
    PartialReturn,
}

/// How regret scores are computed from the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegretEstimator {
    #[default]
    Exact,
    Telescoped,
}

/// How comparison labels are produced from oracle probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Orientation drawn from Bernoulli(p): the paper-style noisy labeler.
    Sampled,
    /// Higher-probability side wins; ties break lexicographically on the
    /// segments' (state, action) sequences.
    Argmax,
    /// Orientation fixed (first segment as plus) with the exact probability
    /// stored, enabling expected-loss training.
    Soft,
}

/// Pairing scheme used to build a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    /// All C(n,2) pairs.
    Dense,
    /// A random perfect matching: n/2 pairs.
    Sparse,
    /// A fixed number of sampled comparisons per segment.
    PerSegment,
}

/// One labeled comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub seg_plus: Segment,
    pub seg_minus: Segment,
    /// Oracle probability that `seg_plus` beats `seg_minus` as stored.
    pub label_prob: f64,
    pub label_mode: LabelMode,
}

/// An ordered group of segments, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingGroup {
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub preference_model: ScoreModel,
    /// Oracle temperature behind regret scores; absent for partial return.
    pub score_alpha: Option<f64>,
    pub score_gamma: f64,
    pub segment_length: usize,
    pub density: Density,
    pub label_mode: LabelMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetItems {
    Pairs(Vec<PreferencePair>),
    Rankings(Vec<RankingGroup>),
}

/// A labeled preference dataset plus the metadata that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub items: DatasetItems,
    pub metadata: DatasetMetadata,
}

impl PreferenceDataset {
    pub fn pairs(&self) -> Result<&[PreferencePair]> {
        match &self.items {
            DatasetItems::Pairs(p) => Ok(p),
            DatasetItems::Rankings(_) => {
                Err(Error::Contract("expected a pair dataset, found rankings".into()))
            }
        }
    }

    pub fn rankings(&self) -> Result<&[RankingGroup]> {
        match &self.items {
            DatasetItems::Rankings(r) => Ok(r),
            DatasetItems::Pairs(_) => {
                Err(Error::Contract("expected a ranking dataset, found pairs".into()))
            }
        }
    }

    pub fn len(&self) -> usize {
        match &self.items {
            DatasetItems::Pairs(p) => p.len(),
            DatasetItems::Rankings(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All (state, action) steps across all segments, in dataset order.
    /// This is the behavior-cloning view of the dataset.
    pub fn all_steps(&self) -> Vec<(usize, usize)> {
        let mut steps = Vec::new();
        match &self.items {
            DatasetItems::Pairs(pairs) => {
                for p in pairs {
                    steps.extend_from_slice(&p.seg_plus.pairs);
                    steps.extend_from_slice(&p.seg_minus.pairs);
                }
            }
            DatasetItems::Rankings(groups) => {
                for g in groups {
                    for s in &g.segments {
                        steps.extend_from_slice(&s.pairs);
                    }
                }
            }
        }
        steps
    }

    /// Writes the JSON-Lines form: a metadata header line, then one object
    /// per pair or ranking. Byte-identical output for identical inputs.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", serde_json::to_string(&self.metadata)?)?;
        match &self.items {
            DatasetItems::Pairs(pairs) => {
                for p in pairs {
                    let line = PairLine {
                        plus: p.seg_plus.pairs.clone(),
                        minus: p.seg_minus.pairs.clone(),
                        label_prob: p.label_prob,
                    };
                    writeln!(w, "{}", serde_json::to_string(&line)?)?;
                }
            }
            DatasetItems::Rankings(groups) => {
                for g in groups {
                    let line = RankLine {
                        ranked: g.segments.iter().map(|s| s.pairs.clone()).collect(),
                    };
                    writeln!(w, "{}", serde_json::to_string(&line)?)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
    }

    /// Reads the JSON-Lines form. Segment source offsets and successors are
    /// not part of the wire format and come back empty.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parameter("empty dataset file".into()))??;
        let metadata: DatasetMetadata = serde_json::from_str(&header)?;
        let mut pairs = Vec::new();
        let mut rankings = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line>(&line)? {
                Line::Pair(p) => pairs.push(PreferencePair {
                    seg_plus: Segment::new(p.plus),
                    seg_minus: Segment::new(p.minus),
                    label_prob: p.label_prob,
                    label_mode: metadata.label_mode,
                }),
                Line::Rank(r) => rankings.push(RankingGroup {
                    segments: r.ranked.into_iter().map(Segment::new).collect(),
                }),
            }
        }
        let items = match (pairs.is_empty(), rankings.is_empty()) {
            (false, true) => DatasetItems::Pairs(pairs),
            (true, false) => DatasetItems::Rankings(rankings),
            (true, true) => DatasetItems::Pairs(pairs),
            (false, false) => {
                return Err(Error::Parameter("dataset mixes pair and ranking lines".into()))
            }
        };
        Ok(PreferenceDataset { items, metadata })
    }

    pub fn from_jsonl_str(s: &str) -> Result<Self> {
        Self::read_jsonl(s.as_bytes())
    }
}

#[derive(Serialize, Deserialize)]
struct PairLine {
    plus: Vec<(usize, usize)>,
    minus: Vec<(usize, usize)>,
    label_prob: f64,
}

#[derive(Serialize, Deserialize)]
struct RankLine {
    ranked: Vec<Vec<(usize, usize)>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Pair(PairLine),
    Rank(RankLine),
}

/// Scoring configuration shared by the dataset builders.
pub struct SegmentScorer<'a> {
    pub model: ScoreModel,
    pub estimator: RegretEstimator,
    pub oracle: Option<&'a SoftSolution>,
    pub mdp: &'a TabularMDP,
    pub gamma: f64,
}

impl<'a> SegmentScorer<'a> {
    pub fn regret(oracle: &'a SoftSolution, mdp: &'a TabularMDP, gamma: f64) -> Self {
        SegmentScorer {
            model: ScoreModel::Regret,
            estimator: RegretEstimator::Exact,
            oracle: Some(oracle),
            mdp,
            gamma,
        }
    }

    pub fn partial_return(mdp: &'a TabularMDP, gamma: f64) -> Self {
        SegmentScorer {
            model: ScoreModel::PartialReturn,
            estimator: RegretEstimator::Exact,
            oracle: None,
            mdp,
            gamma,
        }
    }

    pub fn score(&self, seg: &Segment) -> Result<f64> {
        score_segment(self.model, self.estimator, seg, self.oracle, self.mdp, self.gamma)
    }

    fn metadata(&self, segment_length: usize, density: Density, mode: LabelMode, seed: u64) -> DatasetMetadata {
        DatasetMetadata {
            preference_model: self.model,
            score_alpha: self.oracle.map(|o| o.alpha),
            score_gamma: self.gamma,
            segment_length,
            density,
            label_mode: mode,
            seed,
        }
    }
}

/// Scores one segment under the chosen preference model.
pub fn score_segment(
    model: ScoreModel,
    estimator: RegretEstimator,
    seg: &Segment,
    oracle: Option<&SoftSolution>,
    mdp: &TabularMDP,
    gamma: f64,
) -> Result<f64> {
    match model {
        ScoreModel::PartialReturn => Ok(crate::mdp::partial_return(seg, mdp, gamma)),
        ScoreModel::Regret => {
            let oracle = oracle.ok_or_else(|| {
                Error::Parameter("regret scoring requires an oracle solution".into())
            })?;
            match estimator {
                RegretEstimator::Exact => Ok(segment_advantage_exact(oracle, seg, gamma)),
                RegretEstimator::Telescoped => {
                    segment_advantage_telescoped(oracle, mdp, seg, gamma)
                }
            }
        }
    }
}

/// Samples `count` contiguous windows of length `k`, uniformly over all
/// (trajectory, offset) positions. Reproducible by seed.
pub fn sample_segments(
    rollouts: &[Trajectory],
    k: usize,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<Segment>> {
    if k == 0 {
        return Err(Error::Parameter("segment length must be at least 1".into()));
    }
    if rollouts.is_empty() {
        return Err(Error::Parameter("need at least one rollout".into()));
    }
    if let Some(short) = rollouts.iter().find(|t| t.horizon() < k) {
        return Err(Error::Parameter(format!(
            "segment length {k} exceeds a trajectory of length {}",
            short.horizon()
        )));
    }
    // Cumulative position counts let one uniform draw pick (trajectory, offset).
    let counts: Vec<usize> = rollouts.iter().map(|t| t.horizon() - k + 1).collect();
    let total: usize = counts.iter().sum();
    let mut rng = seeded(rng_seed);
    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.gen_range(0..total);
        let mut traj_idx = 0;
        while pick >= counts[traj_idx] {
            pick -= counts[traj_idx];
            traj_idx += 1;
        }
        let t = &rollouts[traj_idx];
        let pairs: Vec<(usize, usize)> =
            (pick..pick + k).map(|i| (t.states[i], t.actions[i])).collect();
        segments.push(Segment {
            pairs,
            source_offset: pick,
            successor: Some(t.states[pick + k]),
        });
    }
    Ok(segments)
}

/// Boltzmann probability that the first score's segment is preferred,
/// computed as `logistic(s_plus - s_minus)` for stability.
pub fn preference_probability(score_plus: f64, score_minus: f64) -> f64 {
    logistic(score_plus - score_minus)
}

/// Orients one comparison according to the labeling mode.
///
/// `prob_a_over_b` must lie in `[0, 1]`.
pub fn label_pair(
    seg_a: &Segment,
    seg_b: &Segment,
    prob_a_over_b: f64,
    mode: LabelMode,
    rng: &mut ChaCha8Rng,
) -> PreferencePair {
    assert!(
        (0.0..=1.0).contains(&prob_a_over_b),
        "label probability {prob_a_over_b} outside [0, 1]"
    );
    let a_wins = match mode {
        LabelMode::Sampled => rng.gen::<f64>() < prob_a_over_b,
        LabelMode::Argmax => {
            if prob_a_over_b != 0.5 {
                prob_a_over_b > 0.5
            } else {
                // Deterministic tie rule: lexicographically smaller
                // (state, action) sequence is preferred.
                seg_a.pairs <= seg_b.pairs
            }
        }
        LabelMode::Soft => true,
    };
    if a_wins {
        PreferencePair {
            seg_plus: seg_a.clone(),
            seg_minus: seg_b.clone(),
            label_prob: prob_a_over_b,
            label_mode: mode,
        }
    } else {
        PreferencePair {
            seg_plus: seg_b.clone(),
            seg_minus: seg_a.clone(),
            label_prob: 1.0 - prob_a_over_b,
            label_mode: mode,
        }
    }
}

fn homogeneous_length(segments: &[Segment]) -> Result<usize> {
    let k = segments
        .first()
        .ok_or_else(|| Error::Parameter("no segments supplied".into()))?
        .len();
    if segments.iter().any(|s| s.len() != k) {
        return Err(Error::Parameter("segments must share one length".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("segments must be nonempty".into()));
    }
    Ok(k)
}

/// Labels every unordered pair among the segments.
pub fn build_dense_dataset(
    segments: &[Segment],
    scorer: &SegmentScorer,
    mode: LabelMode,
    cap: usize,
    seed: u64,
) -> Result<PreferenceDataset> {
    let k = homogeneous_length(segments)?;
    if segments.len() < 2 {
        return Err(Error::Parameter("dense labeling needs at least 2 segments".into()));
    }
    if segments.len() > cap {
        return Err(Error::Size(format!(
            "{} segments exceed the dense cap of {cap}",
            segments.len()
        )));
    }
    let scores: Vec<f64> = segments.iter().map(|s| scorer.score(s)).collect::<Result<_>>()?;
    let mut rng = seeded(seed);
    let mut pairs = Vec::with_capacity(segments.len() * (segments.len() - 1) / 2);
    for i in 0..segments.len() {
        for j in i + 1..segments.len() {
            let p = preference_probability(scores[i], scores[j]);
            pairs.push(label_pair(&segments[i], &segments[j], p, mode, &mut rng));
        }
    }
    Ok(PreferenceDataset {
        items: DatasetItems::Pairs(pairs),
        metadata: scorer.metadata(k, Density::Dense, mode, seed),
    })
}

/// Random perfect matching: one labeled pair per matched couple.
pub fn build_sparse_dataset(
    segments: &[Segment],
    scorer: &SegmentScorer,
    mode: LabelMode,
    seed: u64,
) -> Result<PreferenceDataset> {
    let k = homogeneous_length(segments)?;
    if segments.len() % 2 != 0 {
        return Err(Error::Parameter("sparse labeling needs an even segment count".into()));
    }
    let scores: Vec<f64> = segments.iter().map(|s| scorer.score(s)).collect::<Result<_>>()?;
    let mut rng = seeded(seed);
    // Fisher-Yates on indices, then pair consecutive entries.
    let mut order: Vec<usize> = (0..segments.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut pairs = Vec::with_capacity(segments.len() / 2);
    for couple in order.chunks_exact(2) {
        let (i, j) = (couple[0], couple[1]);
        let p = preference_probability(scores[i], scores[j]);
        pairs.push(label_pair(&segments[i], &segments[j], p, mode, &mut rng));
    }
    Ok(PreferenceDataset {
        items: DatasetItems::Pairs(pairs),
        metadata: scorer.metadata(k, Density::Sparse, mode, seed),
    })
}

/// Labels `comparisons_per_segment` sampled partners for every segment;
/// exactly `n * comparisons_per_segment` pairs.
pub fn build_per_segment_dataset(
    segments: &[Segment],
    scorer: &SegmentScorer,
    comparisons_per_segment: usize,
    mode: LabelMode,
    seed: u64,
) -> Result<PreferenceDataset> {
    let k = homogeneous_length(segments)?;
    if segments.len() < 2 {
        return Err(Error::Parameter("need at least 2 segments to compare".into()));
    }
    if comparisons_per_segment == 0 {
        return Err(Error::Parameter("comparisons_per_segment must be at least 1".into()));
    }
    let scores: Vec<f64> = segments.iter().map(|s| scorer.score(s)).collect::<Result<_>>()?;
    let mut rng = seeded(seed);
    let mut pairs = Vec::with_capacity(segments.len() * comparisons_per_segment);
    for i in 0..segments.len() {
        for _ in 0..comparisons_per_segment {
            let mut j = rng.gen_range(0..segments.len() - 1);
            if j >= i {
                j += 1;
            }
            let p = preference_probability(scores[i], scores[j]);
            pairs.push(label_pair(&segments[i], &segments[j], p, mode, &mut rng));
        }
    }
    Ok(PreferenceDataset {
        items: DatasetItems::Pairs(pairs),
        metadata: scorer.metadata(k, Density::PerSegment, mode, seed),
    })
}

/// Groups segments into consecutive blocks of `k_rank` and orders each
/// block: sampled mode draws a Plackett-Luce permutation over `exp(score)`,
/// argmax mode sorts by score (ties keep input order).
pub fn build_rankings(
    segments: &[Segment],
    scorer: &SegmentScorer,
    k_rank: usize,
    mode: LabelMode,
    seed: u64,
) -> Result<PreferenceDataset> {
    let seg_len = homogeneous_length(segments)?;
    if k_rank < 2 {
        return Err(Error::Parameter("ranking groups need K >= 2".into()));
    }
    if segments.len() % k_rank != 0 {
        return Err(Error::Parameter(format!(
            "{} segments not divisible into groups of {k_rank}",
            segments.len()
        )));
    }
    if mode == LabelMode::Soft {
        return Err(Error::Parameter("rankings support sampled or argmax labeling only".into()));
    }
    let scores: Vec<f64> = segments.iter().map(|s| scorer.score(s)).collect::<Result<_>>()?;
    let mut rng = seeded(seed);
    let mut groups = Vec::with_capacity(segments.len() / k_rank);
    for block in (0..segments.len()).collect::<Vec<_>>().chunks_exact(k_rank) {
        let order = match mode {
            LabelMode::Sampled => plackett_luce_permutation(block, &scores, &mut rng),
            LabelMode::Argmax => {
                let mut idx = block.to_vec();
                idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
                idx
            }
            LabelMode::Soft => unreachable!(),
        };
        groups.push(RankingGroup {
            segments: order.into_iter().map(|i| segments[i].clone()).collect(),
        });
    }
    Ok(PreferenceDataset {
        items: DatasetItems::Rankings(groups),
        metadata: scorer.metadata(seg_len, Density::Dense, mode, seed),
    })
}

/// Sequential sampling without replacement with weights `exp(score)`,
/// max-shifted for stability. Returns indices best-first.
fn plackett_luce_permutation(block: &[usize], scores: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let max = block.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut remaining: Vec<usize> = block.to_vec();
    let mut weights: Vec<f64> = block.iter().map(|&i| (scores[i] - max).exp()).collect();
    let mut order = Vec::with_capacity(block.len());
    while !remaining.is_empty() {
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (idx, &w) in weights.iter().enumerate() {
            if u < w {
                pick = idx;
                break;
            }
            u -= w;
        }
        order.push(remaining.remove(pick));
        weights.remove(pick);
    }
    order
}
