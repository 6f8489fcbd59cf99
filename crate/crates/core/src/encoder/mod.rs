//! Vision transformer whose attention obeys a token flow policy: in the
//! unidirectional mode, class and raw tokens never see query tokens and
//! query tokens never see each other.

mod attention_map;
mod vit;

pub use attention_map::{attention_map, attention_row, AttentionMap, TokenSelector};
pub use vit::{
    BlockParams, EncodeOptions, Encoder, EncoderConfig, EncoderOutput, FlowMode, FlowPolicy, RetainedAttention,
    Tokens,
};
