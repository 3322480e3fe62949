//! Attention admissibility.

use crate::error::{Error, Result};

/// Dense `seq_len × seq_len` admissibility matrix, row = query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub seq_len: usize,
    pub bits: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.seq_len + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.seq_len..(q + 1) * self.seq_len]
    }

    /// Rows as strings of `0`/`1`, for inspection.
    pub fn render(&self) -> Vec<String> {
        (0..self.seq_len)
            .map(|q| self.row(q).iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }
}

/// Fills `out[k]` for keys `0..out.len()` seen by query `q`.
///
/// Prefix queries see exactly the prefix. Later queries see causally
/// earlier tokens plus every prefix token not hidden for their step. Padding
/// is never visible.
pub fn mask_row(q: usize, prefix_len: usize, pad: &[bool], hidden: Option<&[bool]>, out: &mut [bool]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o = !pad[k]
            && if q < prefix_len {
                k < prefix_len
            } else if k < prefix_len {
                hidden.is_none_or(|h| !h[k])
            } else {
                k <= q
            };
    }
}

/// Builds the full mask. `per_query_hidden[q]`, when present, flags prefix
/// positions hidden from query `q`.
pub fn attention_mask(
    prefix_len: usize,
    seq_len: usize,
    pad_mask: &[bool],
    per_query_hidden: &[Option<&[bool]>],
) -> Result<AttentionMask> {
    if prefix_len > seq_len || pad_mask.len() != seq_len || per_query_hidden.len() != seq_len {
        return Err(Error::Shape(format!(
            "prefix {prefix_len}, sequence {seq_len}, pad {}, hidden rows {}",
            pad_mask.len(),
            per_query_hidden.len()
        )));
    }
    if let Some(h) = per_query_hidden.iter().flatten().find(|h| h.len() != prefix_len) {
        return Err(Error::Shape(format!("hidden row of {} for prefix {prefix_len}", h.len())));
    }
    let mut bits = vec![false; seq_len * seq_len];
    for q in 0..seq_len {
        mask_row(q, prefix_len, pad_mask, per_query_hidden[q], &mut bits[q * seq_len..(q + 1) * seq_len]);
    }
    Ok(AttentionMask { seq_len, bits })
}
