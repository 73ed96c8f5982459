//! Soft Actor-Critic written against the CLF-QP safety filter: the agent
//! proposes actions, the filter corrects them, and learning uses the inputs
//! actually applied to the plant.

pub mod agent;
pub mod checkpoint;
pub mod mlp;
pub mod policy;
pub mod replay;
pub mod train;

pub use agent::{SacAgent, SacError, SacParams, UpdateStats};
pub use checkpoint::PolicyCheckpoint;
pub use mlp::{Adam, Mlp, MlpError, MlpGrads};
pub use policy::{ActionMode, GaussianPolicy};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use train::{
    evaluate, train, ActionSource, EpisodeRecord, Evaluation, KEtaMemory, LoopSpec, TrainError, TrainOptions,
    TrainOutcome,
};
