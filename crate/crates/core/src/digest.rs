//! Content digests recorded in run manifests.

use std::hash::Hasher;
use std::io::{self, Read};
use std::path::Path;

use fnv::FnvHasher;

/// FNV-1a 64-bit digest, rendered as 16 lowercase hex digits.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut h = FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

pub fn digest_file(path: &Path) -> io::Result<String> {
    let mut f = io::BufReader::new(std::fs::File::open(path)?);
    let mut h = FnvHasher::default();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.write(&buf[..n]);
    }
    Ok(format!("{:016x}", h.finish()))
}
