//! Multimodal transformer classifier and recurrent baselines.

pub mod artifact;
pub mod encoder;
pub mod layers;
pub mod params;
pub mod pt;
pub mod recurrent;

pub use artifact::{fingerprint, ModelArtifact};
pub use encoder::{attention_pool, positional_encoding, EncoderLayer, TransformerEncoder};
pub use layers::{ForwardCtx, LayerNorm, Linear, LAYER_NORM_EPS};
pub use params::{glorot, Bound, ParamId, ParamStore};
pub use pt::{EncoderKind, ModalityDims, PtConfig, PtModel};
pub use recurrent::{RecurrentEncoder, RecurrentKind, RecurrentLayer};
