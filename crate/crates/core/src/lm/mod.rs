//! A desk-scale masked language model: synthetic and byte-level corpora,
//! token and span masking, an encoder stack with any attention variant, and
//! an Adam training loop on the autograd tape.

mod checkpoint;
mod corpus;
mod masking;
mod model;
mod train;

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint};
pub use corpus::{
    generate_batch, Batch, Corpus, CorpusKind, CorpusSpec, BOS, FIRST_CONTENT, MASK, PAD,
};
pub use masking::{mask_tokens, span_lengths, MaskPolicy, Masked, Target};
pub use model::{
    evaluate, masked_accuracy, masked_cross_entropy, AttentionConfig, Model, ModelConfig,
    LAYER_NORM_EPS,
};
pub use train::{
    eval_log_perplexity, train, AdamConfig, ExperimentConfig, TrainConfig, TrainLog, TrainStep,
};
