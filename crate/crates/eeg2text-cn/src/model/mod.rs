//! Differentiable sequence model: per-character 1-D convolution over
//! PCA-compressed EEG, transformer encoder across character positions,
//! causal transformer decoder with cross-attention, an encoder-only
//! per-position classifier, and a contrastive projection head.
//!
//! All forward and backward passes are hand-written and generic over the
//! scalar type, so gradient checks run in `f64` while training and
//! checkpoints stay in `f32`.

pub mod math;
pub mod net;
pub mod params;
pub mod scalar;

pub use net::{
    ablation_backward, ablation_forward, contrastive_loss, contrastive_loss_grad,
    contrastive_project, decoder_forward, encode_eeg, encoder_only_forward, masked_mean_pool,
    seq2seq_backward, seq2seq_forward, AblationTrace, Dropout, EncodedSequence, Seq2SeqTrace,
};
pub use params::{init_params, ModelConfig, ModelParams};
pub use scalar::Scalar;

/// Small-but-structured configuration used across the test suite: two heads,
/// one encoder and one decoder layer, 64-bit-friendly sizes.
#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        conv_out_channels: 6,
        conv_kernel: 3,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        dropout: 0.0,
        vocab_size: 12,
        max_len_eeg: 4,
        max_len_text: 5,
        segment_time: 12,
        segment_components: 3,
        temperature: 0.07,
        seed: 7,
    }
}
