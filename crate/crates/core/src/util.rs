//! Small shared helpers: stable hashing, seed derivation, JSON-lines IO and
//! order-independent reductions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// 64-bit hash that is stable across platforms and toolchain releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Derives a child seed from a parent seed and a list of labelled parts.
pub fn derive_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mean that does not depend on the order of `values`: deviations from the
/// minimum are summed in sorted order, so equal inputs return exactly their
/// common value.
pub fn order_free_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let lo = v[0];
    lo + v.iter().map(|x| x - lo).sum::<f64>() / v.len() as f64
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_is_permutation_invariant() {
        let a = [0.1, 0.7, 1e-17, 0.3333333333333333, 0.2];
        let mut b = a;
        b.reverse();
        assert_eq!(order_free_mean(&a).to_bits(), order_free_mean(&b).to_bits());
    }

    #[test]
    fn derived_seeds_differ_by_part() {
        assert_ne!(derive_seed(1, &[b"a"]), derive_seed(1, &[b"b"]));
        assert_ne!(derive_seed(1, &[b"ab"]), derive_seed(1, &[b"a", b"b"]));
        assert_eq!(derive_seed(7, &[b"x"]), derive_seed(7, &[b"x"]));
    }
}
