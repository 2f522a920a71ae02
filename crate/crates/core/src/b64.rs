//! Base64 helpers for the binary payloads embedded in the JSON documents:
//! raw frame bytes in datasets and little-endian `f64` arrays in checkpoints.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

pub fn encode_bytes(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn decode_bytes(text: &str) -> Result<Vec<u8>, String> {
    STANDARD
        .decode(text)
        .map_err(|e| format!("invalid base64 payload: {e}"))
}

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>, String> {
    let bytes = decode_bytes(text)?;
    if bytes.len() % 8 != 0 {
        return Err(format!("f64 payload length {} is not a multiple of 8", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_payload_is_bit_exact() {
        let values = vec![0.1, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0, 1e300];
        let decoded = decode_f64s(&encode_f64s(&values)).unwrap();
        let bits: Vec<u64> = decoded.iter().map(|v| v.to_bits()).collect();
        let expect: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, expect);
    }

    #[test]
    fn truncated_f64_payload_is_rejected() {
        let text = encode_bytes(&[1, 2, 3]);
        assert!(decode_f64s(&text).is_err());
    }
}
