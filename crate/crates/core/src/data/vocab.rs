//! Byte-level vocabulary: ids 0..=255 are raw bytes, followed by specials.

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
/// Marks the start of an input (or instruction) in few-shot formatting.
pub const X: usize = 259;
/// Marks the start of a target in few-shot formatting.
pub const Y: usize = 260;
/// Sentinel preceding context segment A.
pub const S0: usize = 261;
/// Sentinel preceding context segment D.
pub const S1: usize = 262;
pub const VOCAB_SIZE: usize = 263;

pub fn is_special(id: usize) -> bool {
    id >= 256
}

pub fn tokenize(text: &str) -> Vec<usize> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Byte ids back to bytes; special ids are skipped.
pub fn detokenize_bytes(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&t| !is_special(t)).map(|&t| t as u8).collect()
}

pub fn detokenize(ids: &[usize]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}
