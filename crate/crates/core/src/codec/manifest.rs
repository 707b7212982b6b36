use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::codebook::bits_for;
use super::pack::{body_bytes, HEADER_BYTES};
use crate::error::{invalid, Result};

/// Dataset-level metadata binding a packed token file to its codebook,
/// labels and storage accounting. Serialized as TOML with a fixed key set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_images: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub bits_per_token: u32,
    pub codebook_id: String,
    /// Size of the packed token file, header included.
    pub payload_bytes: u64,
    /// Bytes of the source images as 8-bit raw pixels.
    pub raw_pixel_bytes: u64,
    /// SHA-256 of the packed token file.
    pub checksum: String,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn describe(
        payload: &[u8],
        num_images: u64,
        grid: (usize, usize),
        k: usize,
        codebook_id: &str,
        raw_pixel_bytes: u64,
        class_names: Vec<String>,
    ) -> Self {
        Self {
            num_images,
            grid_h: grid.0,
            grid_w: grid.1,
            k,
            bits_per_token: bits_for(k),
            codebook_id: codebook_id.to_string(),
            payload_bytes: payload.len() as u64,
            raw_pixel_bytes,
            checksum: checksum(payload),
            class_names,
        }
    }

    pub fn expected_payload_bytes(&self) -> u64 {
        HEADER_BYTES as u64 + body_bytes(self.num_images, self.grid_h, self.grid_w, self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(invalid("manifest K must be >= 2"));
        }
        if self.bits_per_token != bits_for(self.k) {
            return Err(invalid(format!(
                "bits_per_token {} inconsistent with K={}",
                self.bits_per_token, self.k
            )));
        }
        if self.payload_bytes != self.expected_payload_bytes() {
            return Err(invalid(format!(
                "payload_bytes {} differs from the packed size {}",
                self.payload_bytes,
                self.expected_payload_bytes()
            )));
        }
        Ok(())
    }

    pub fn verify_payload(&self, payload: &[u8]) -> Result<()> {
        if payload.len() as u64 != self.payload_bytes || checksum(payload) != self.checksum {
            return Err(invalid("token payload does not match the manifest checksum"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest is always serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(format!("manifest: {e}")))
    }
}

pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageReport {
    pub num_images: u64,
    pub grid: (usize, usize),
    pub k: usize,
    pub bits_per_token: u32,
    pub header_bytes: u64,
    pub body_bytes: u64,
    pub payload_bytes: u64,
    pub raw_pixel_bytes: u64,
    /// `payload_bytes / raw_pixel_bytes`.
    pub compression_ratio: f64,
    /// `body_bytes / raw_pixel_bytes`.
    pub body_ratio: f64,
}

/// Storage accounting computed from the manifest fields alone.
pub fn dataset_stats(m: &DatasetManifest) -> StorageReport {
    let body = m.payload_bytes.saturating_sub(HEADER_BYTES as u64);
    let raw = m.raw_pixel_bytes.max(1) as f64;
    StorageReport {
        num_images: m.num_images,
        grid: (m.grid_h, m.grid_w),
        k: m.k,
        bits_per_token: m.bits_per_token,
        header_bytes: HEADER_BYTES as u64,
        body_bytes: body,
        payload_bytes: m.payload_bytes,
        raw_pixel_bytes: m.raw_pixel_bytes,
        compression_ratio: m.payload_bytes as f64 / raw,
        body_ratio: body as f64 / raw,
    }
}

impl fmt::Display for StorageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images            {}", self.num_images)?;
        writeln!(f, "token grid        {}x{}", self.grid.0, self.grid.1)?;
        writeln!(f, "codebook size K   {}", self.k)?;
        writeln!(f, "bits per token    {}", self.bits_per_token)?;
        writeln!(f, "raw pixel bytes   {}", self.raw_pixel_bytes)?;
        writeln!(f, "token body bytes  {}", self.body_bytes)?;
        writeln!(f, "header bytes      {}", self.header_bytes)?;
        writeln!(f, "payload bytes     {}", self.payload_bytes)?;
        writeln!(f, "body ratio        {:.4}%", self.body_ratio * 100.0)?;
        write!(f, "compression ratio {:.4}%", self.compression_ratio * 100.0)
    }
}
