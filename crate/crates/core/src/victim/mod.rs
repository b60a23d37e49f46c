//! The model under attack.

mod checkpoint;
mod input;
mod model;
pub mod remote;
mod train;
pub mod vocab;

pub use checkpoint::{CheckpointError, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use input::{
    col_gather_order, mix_soft_backward, serialized_positions, CellGridInput, InputError,
    PermutedInput, PosMode,
};
pub use model::{Params, Tape, Target, ToyVictim, VictimConfig, VictimGradients};
pub use remote::{remote_generate, table_prompt, ChatReply, RemoteClient, RemoteError};
pub use train::{corpus_vocab, mean_loss, train_toy_victim, TrainConfig, TrainError, TrainReport};
pub use vocab::{tokenize, Vocab};
