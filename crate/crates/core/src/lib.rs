//! Document-level translation with a recurrent contextual memory.
//!
//! A compact encoder-decoder transformer whose layers can carry a fixed-size
//! memory matrix across the sentences of a document: the memory is updated
//! once per sentence from the sentence states and read back into the next
//! sentence's representation. The crate covers the full loop: tensor autodiff,
//! the model, synthetic document corpora, two-stage training, beam decoding,
//! BLEU scoring and a diagnostic battery (attention maps, information gain,
//! gradient attribution, decoding-complexity measurement).

pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod decoding;
pub mod evaluation;
pub mod memory;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use corpus::{Document, GenConfig, Vocab};
pub use memory::{MemoryBank, MemoryParams, MemoryState, Side, Truncation};
pub use tensor::{backward, Param, Tape, Tensor, TensorError};
pub use training::{Checkpoint, TrainConfig};
pub use transformer::{MemSide, Model, ModelConfig, SentenceStates};
