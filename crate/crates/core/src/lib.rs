//! Weight re-modeling toolkit.
//!
//! Transforms dense neural-network weight tensors into a compact factored
//! form: a small dense basis matrix `B` times a large, sparse coefficient
//! matrix `C_e` whose non-zero entries are signed powers of two. The crate
//! covers the full desk-scale pipeline around that form:
//!
//! * [`tensor_io`] — binary tensor container ("SDTC") and model ("SDM1") formats.
//! * [`reshape`] — FC/CONV tensor to 2-D matrix mapping and its exact inverse.
//! * [`quant`] — the power-of-2 value set, nearest projection, column
//!   normalization and 8-bit fixed-point basis quantization.
//! * [`decompose`] — the alternating quantize / least-squares / sparsify
//!   decomposition loop and whole-model orchestration.
//! * [`codec`] — bit-exact coefficient/basis encoding (sparsity bitmap +
//!   canonical Huffman) and compression-rate accounting.
//! * [`rebuild`] — exact shift-and-add weight reconstruction, toy forward
//!   passes and equivalent-FLOPs counting.
//! * [`train`] — sparsity-mask-preserving training with bucket-switch
//!   updates for coefficients and SGD/SWA for the basis.
//! * [`cost`] — first-order storage/energy estimates from unit-energy
//!   constants, quantifying the memory-for-compute trade.

pub mod codec;
pub mod cost;
pub mod decompose;
pub mod mat;
pub mod quant;
pub mod rebuild;
pub mod reshape;
pub mod tensor_io;
pub mod train;

pub use mat::Mat;
pub use quant::{ExponentSet, FixedPointMatrix, Pow2Matrix, Pow2Value};
