//! Desk-scale laboratory for learning tabular policies directly from
//! preference data.
//!
//! The crate is organized around a small pipeline:
//!
//! 1. [`mdp`] defines finite MDPs (gridworlds, bandits, random instances)
//!    and rollout generation under arbitrary stochastic policies.
//! 2. [`oracle`] solves a maximum-entropy control problem exactly, yielding
//!    the optimal soft values, advantages, and policy used to label data.
//! 3. [`prefs`] samples behavior segments and labels pairs or rankings with
//!    a Boltzmann model over regret or partial-return scores.
//! 4. [`objectives`] computes the contrastive loss family (vanilla, biased,
//!    BC-regularized, KL-referenced, ranking, dense-batch) with exact
//!    analytic gradients, plus the sparse comparison-matrix view used for
//!    convexity and null-space analysis.
//! 5. [`trainer`] optimizes tabular softmax policies against any of those
//!    objectives; [`baselines`] provides SFT, %BC, and an unconstrained
//!    advantage-MLE reference method; [`eval`] scores the result against
//!    the oracle.
//!
//! All randomness is driven by explicit seeds (ChaCha8 streams; see [`rng`]),
//! and every artifact serializes deterministically.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod mdp;
pub mod numerics;
pub mod objectives;
pub mod oracle;
pub mod prefs;
pub mod rng;
pub mod table;
pub mod trainer;

pub use error::{Error, Result};
pub use mdp::{Segment, TabularMDP, Trajectory};
pub use objectives::{
    ComparisonMatrix, LossConfig, LossOutput, LossVariant, ScoredSegment, TrainLabelMode,
};
pub use oracle::{ConsistencyReport, SoftSolution};
pub use prefs::{
    DatasetItems, DatasetMetadata, Density, LabelMode, PreferenceDataset, PreferencePair,
    RankingGroup, RegretEstimator, ScoreModel, SegmentScorer,
};
pub use table::Table;
pub use trainer::{EvalHook, OptMethod, OptimizerConfig, PolicyLogits, TrainData, TrainTrace};
