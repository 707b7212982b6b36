//! Token datasets: codebooks, quantization, the built-in patch tokenizer,
//! bit-packed storage, manifests and the DCT alternative input.

mod codebook;
pub mod dct;
mod grid;
pub mod kmeans;
mod manifest;
pub mod pack;
mod tokenizer;

pub use codebook::{bits_for, Codebook, CODEBOOK_MAGIC, CODEBOOK_VERSION};
pub use dct::{dct_decode, dct_tokenize, DctGrid};
pub use grid::{EmbeddingGrid, TokenGrid};
pub use manifest::{checksum, dataset_stats, DatasetManifest, StorageReport};
pub use pack::{pack_labels, pack_tokens, unpack_labels, unpack_tokens, PackHeader};
pub use tokenizer::{
    decode_tokens, extract_patches, fit_toy_codebook, tokenize_batch, tokenize_image, PatchTokenizer,
    Tokenizer,
};

pub fn lookup(grid: &TokenGrid, codebook: &Codebook) -> crate::Result<EmbeddingGrid> {
    codebook.lookup(grid)
}

pub fn quantize(z: &EmbeddingGrid, codebook: &Codebook) -> crate::Result<TokenGrid> {
    codebook.quantize(z)
}
