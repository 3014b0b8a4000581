use sha2::{Digest, Sha256};

/// Seed for the job at `path` under `master`.
///
/// The digest input is the master seed as 8 little-endian bytes followed,
/// for each label in order, by the label's byte length as a little-endian
/// `u64` and its UTF-8 bytes. The seed is the first 8 bytes of the SHA-256
/// digest read as a little-endian `u64`.
pub fn seed_stream<S: AsRef<str>>(master: u64, path: &[S]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for label in path {
        let bytes = label.as_ref().as_bytes();
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
