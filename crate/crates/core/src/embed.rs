//! Deterministic local text embedder.
//!
//! Hashes lowercase alphanumeric tokens into a fixed number of signed
//! buckets and L2-normalizes the result. Not a semantic model; it is a
//! stand-in embedder for tests, fixtures and the browser demo, where the
//! only requirements are determinism, uniform dimensionality and
//! non-zero vectors.

/// FNV-1a, pinned here so hashes never depend on std internals.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect::<Vec<_>>()
        .into_iter()
}

/// Embeds `text` into `dim` dimensions. Identical inputs produce
/// identical vectors; the result always has unit L2 norm.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim > 0, "embedding dimension must be positive");
    let mut v = vec![0.0f64; dim];
    for token in tokens(text) {
        let h = fnv1a(token.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign;
    }
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Empty or fully cancelled text: fall back to a fixed unit vector.
        v[0] = 1.0;
        return v;
    }
    for x in &mut v {
        *x /= norm;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(
            hash_embedding("hello world", 16),
            hash_embedding("hello world", 16)
        );
    }

    #[test]
    fn unit_norm_and_non_zero() {
        for text in ["", "a", "some longer text with words", "!!!"] {
            let v = hash_embedding(text, 8);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "norm for {text:?} was {norm}");
        }
    }

    #[test]
    fn distinct_texts_generally_differ() {
        assert_ne!(hash_embedding("alpha", 32), hash_embedding("omega", 32));
    }
}
