//! Masked cross-reconstruction pretraining of the content encoder.
//!
//! Half of the patches of each distorted view are hidden; the encoder sees
//! the rest and the decoder reconstructs the matching reference view.

pub mod decoder;
pub mod encoder;
pub mod patch;
pub mod pretrain;

pub use decoder::{rec_loss, rec_loss_graph, ReconstructionDecoder};
pub use encoder::{Encoded, EncoderConfig, PatchEncoder};
pub use patch::{patchify, patchify_values, sample_mask, unpatchify, MaskSet, PatchGrid};
pub use pretrain::{pretrain, CloudPair, PretrainConfig, PretrainOutcome};
