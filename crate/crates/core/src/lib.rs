//! Tensor product attention in double precision.
//!
//! Queries, keys and values are built per token as scaled sums of outer
//! products of a head factor and a feature factor. The crate provides the
//! factorization, RoPE on the feature factors, a factorized KV cache, blocked
//! online-softmax decoding that never materializes the heads, a materialized
//! reference implementation, analytic cost counts, and a T6 transformer block.

pub mod attention;
pub mod block;
pub mod cost;
pub mod counters;
pub mod dense;
pub mod error;
pub mod factor;
pub mod flash;
pub mod io;
pub mod kv_cache;
pub mod linalg;
pub mod rope;
pub mod sample;

pub use attention::{
    attention_reference, attention_reference_masked, causal_mask, gqa_as_tpa,
    grouped_attention_native, materialize_sequence, materialized_forward, mha_as_tpa, mqa_as_tpa,
    GroupedWeights, HeadTensor,
};
pub use block::{
    block_forward, block_forward_at, block_forward_with, default_d_ff, rms_norm, swiglu_ffn,
    tpa_sublayer, BlockWeights,
};
pub use cost::{
    attention_params, decode_flops, kv_numbers_per_token, specialized_speedup_holds,
    speed_inequality, DecodeFlops, Mechanism, MechanismSpec, SpeedCheck,
};
pub use counters::{MacCounts, MacSink, NoCount};
pub use dense::{dense_decode, DenseKvCache};
pub use error::{Result, TpaError};
pub use factor::{
    compute_factors, materialize, materialize_third_order, xavier_bound, xavier_init, FactorBlock,
    FactorMap, FactorMaps, FactorWeights, Order, Query, QueryMap, TokenFactors, TpaConfig, Variant,
};
pub use flash::{
    decode_loop, flash_decode, flash_decode_parallel, flash_decode_with, prepare_sequence,
    prepare_token, rope_for, specialized_full_attention, DecodeRun, DecodeState, FlashDecoder,
};
pub use kv_cache::{bytes_per_token, compression_ratio, FactorizedKvCache};
pub use linalg::{Matrix, MASK_NEG};
pub use rope::{
    apply_rope_rows, higher_order_transform, pre_rotate_key, rotate_query, PreRotatedKey, RopeTable,
};
