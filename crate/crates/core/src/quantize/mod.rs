//! Weight quantization: affine grids, absmax int8 with outliers, nf4 with
//! double quantization, and calibrated GPTQ.

mod absmax;
mod affine;
mod gptq;
mod model;
mod nf4;
mod pack;
mod tensor;

pub use absmax::{absmax_int8, outlier_columns, Absmax8, OUTLIER_THRESHOLD};
pub use affine::{
    affine_params, code_range, dequantize_affine, dynamic_quantize, quantize_affine, round_half_away,
    AffineParams,
};
pub use gptq::{gptq_layer, output_error, rtn_layer, GridCodes, GroupGrid, DEFAULT_DAMPING, DEFAULT_GROUP};
pub use model::{is_quantized_role, quantize_model, AnyModel, QuantSpec, QuantizedModel, Stored};
pub use nf4::{codebook, nf4_quantize, Nf4, NF4_BLOCK, NF4_SCALE_BLOCK, ZERO_LEVEL};
pub use pack::{pack_codes, row_bytes, unpack_codes, unpack_rows};
pub use tensor::{QuantData, QuantizedTensor, Scheme};
