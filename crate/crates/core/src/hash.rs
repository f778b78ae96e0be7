//! Content hashing helpers for reproducibility checks.

use sha2::{Digest, Sha256};

/// SHA-256 of a byte slice as lowercase hex.
pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

/// Incremental SHA-256 hasher for streaming structured content.
pub struct ContentHash(Sha256);

impl ContentHash {
    pub fn new() -> Self {
        ContentHash(Sha256::new())
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn update_f64s(&mut self, values: &[f64]) {
        for v in values {
            self.0.update(v.to_le_bytes());
        }
    }

    pub fn update_usizes(&mut self, values: &[usize]) {
        for v in values {
            self.0.update((*v as u64).to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        hex(&self.0.finalize())
    }
}

impl Default for ContentHash {
    fn default() -> Self {
        Self::new()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_known_sha256() {
        // SHA-256 of the empty string.
        assert_eq!(
            hash_bytes(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn streaming_equals_one_shot() {
        let mut h = ContentHash::new();
        h.update(b"ab");
        h.update(b"c");
        assert_eq!(h.finish(), hash_bytes(b"abc"));
    }
}
