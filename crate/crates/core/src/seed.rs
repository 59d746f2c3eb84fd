//! Stage seeds derived from one master seed by hashing.

use sha2::{Digest, Sha256};

/// First 8 bytes of `SHA-256(master || label)`.
pub fn derive(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_label_sensitive() {
        assert_eq!(derive(7, "pretrain"), derive(7, "pretrain"));
        assert_ne!(derive(7, "pretrain"), derive(7, "meta"));
        assert_ne!(derive(7, "pretrain"), derive(8, "pretrain"));
    }
}
