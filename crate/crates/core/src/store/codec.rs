//! Slate compression. Every stored record carries the codec byte it was
//! written with.

use std::io::{Read, Write};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;

use crate::error::StoreError;

pub const CODEC_RAW: u8 = 0;
pub const CODEC_ZLIB: u8 = 1;

/// Compresses with zlib at the default level. Output is deterministic for a
/// given input.
pub fn compress(body: &[u8]) -> Vec<u8> {
    let mut enc = ZlibEncoder::new(Vec::with_capacity(body.len() / 2 + 16), Compression::default());
    enc.write_all(body).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

pub fn decompress(data: &[u8]) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::new();
    ZlibDecoder::new(data)
        .read_to_end(&mut out)
        .map_err(|e| StoreError::Corrupt(e.to_string()))?;
    Ok(out)
}

pub fn decode(codec: u8, data: &[u8]) -> Result<Vec<u8>, StoreError> {
    match codec {
        CODEC_RAW => Ok(data.to_vec()),
        CODEC_ZLIB => decompress(data),
        other => Err(StoreError::Corrupt(format!("unknown codec byte {other}"))),
    }
}
