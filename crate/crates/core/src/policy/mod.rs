//! Conditional diffusion policy over action primitives.

mod action;
mod net;
mod train;

pub use action::{ActionKind, ActionPrimitive, PointSet, ACTION_DIM, OBS_POINTS};
pub use net::{
    broadcast_rows, timestep_features, ConditionedPolicy, EncodeTrace, HeadGrads, PolicyArch, PolicyGrads,
    PolicyNet, TIME_FEATURES,
};
pub use train::{supervised_loss, train_supervised, SlSample, SupervisedConfig};
