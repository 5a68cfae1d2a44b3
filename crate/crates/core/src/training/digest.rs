use super::{ModelWeights, TrainingError};
use crate::hash::Hash32;

/// Canonical encoding of an executor's output state.
///
/// Layout, all integers `u64` little-endian and all reals IEEE-754 `f64`
/// little-endian: shape length, shape dims, activation code, weight count,
/// weights, `p` length, `p`, `N` length, `N`.
pub fn canonical_state_bytes(
    w: &ModelWeights,
    p: &[f64],
    counts: &[u64],
) -> Result<Vec<u8>, TrainingError> {
    if w.values.iter().chain(p).any(|v| !v.is_finite()) {
        return Err(TrainingError::NonFiniteState);
    }
    let mut out =
        Vec::with_capacity(8 * (4 + w.shape.len() + w.values.len() + p.len() + counts.len()));
    let mut put = |v: u64| out.extend_from_slice(&v.to_le_bytes());
    put(w.shape.len() as u64);
    for &d in &w.shape {
        put(d as u64);
    }
    put(w.activation.code());
    put(w.values.len() as u64);
    for v in &w.values {
        put(v.to_bits());
    }
    put(p.len() as u64);
    for v in p {
        put(v.to_bits());
    }
    put(counts.len() as u64);
    for &c in counts {
        put(c);
    }
    Ok(out)
}

/// SHA-256 of [`canonical_state_bytes`].
pub fn state_digest(w: &ModelWeights, p: &[f64], counts: &[u64]) -> Result<Hash32, TrainingError> {
    Ok(Hash32::of(&canonical_state_bytes(w, p, counts)?))
}
