//! Encoder-decoder parameters, forward computation and checkpoints.

mod checkpoint;
mod inference;
mod network;
mod params;

pub use checkpoint::{decode_params, encode_params, load_model, save_model, MAGIC};
pub use inference::{DecodeContext, OutputLayer, StepValues};
pub use network::{
    attend, attention, attention_keys, decoder_step, encode, gru_step, output_distribution,
    output_logits, readout, AttentionResult, AttentionVars, DecoderVars, EncoderOutput,
    EncoderVars, GruTrace, GruVars, ModelVars, WpdVars, WpeVars, MASK_LOGIT,
};
pub use params::{
    is_head_param, layout, orthogonal, Heads, Init, InitKind, Model, ModelDims, ParamStore,
    DEFAULT_EMB, DEFAULT_HID, DEFAULT_INIT_STD,
};
