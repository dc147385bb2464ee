//! Network numerics: tensors, observation encoding, the model with its
//! backward pass, the training loss, the optimizer and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod dist;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod obs;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use dist::GroupedSoftmax;
pub use loss::{loss, loss_and_grads, Fragment, LossBreakdown, LossTerm, LossWeights, TrainBatch, TrainStep};
pub use model::{HeadGrads, NetConfig, NetOutput, Network, RawOutput, StepMasks};
pub use obs::{encode_observation, ObsSpec, ObsTensor};
pub use tensor::{ParamStore, Tensor};
