//! Boolean attention-permission matrices.
//!
//! `allow[q][k] == true` means query position `q` may attend key position `k`.
//! Three layouts are provided: full attention over non-PAD keys, the
//! hierarchical document layout (tokens see their own document, start-of-document
//! tokens additionally see each other), and causal attention for the decoder.
//!
//! Padding convention throughout the crate: `pad_mask[p] == true` marks a PAD
//! position. PAD keys are denied for every query. A PAD query row is given the
//! full non-PAD key set so that softmax never sees an empty row; its output is
//! never read downstream.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMaskMatrix {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMaskMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for k in 0..cols {
                allow.push(f(q, k));
            }
        }
        AttentionMaskMatrix { rows, cols, allow }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.cols..(q + 1) * self.cols]
    }

    /// Number of allowed keys for query `q`.
    pub fn row_count(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&a| a).count()
    }

    /// Cell-wise conjunction of two masks of equal size.
    pub fn and(&self, other: &AttentionMaskMatrix) -> Result<AttentionMaskMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape {
                op: "mask_and",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        Ok(AttentionMaskMatrix {
            rows: self.rows,
            cols: self.cols,
            allow: self
                .allow
                .iter()
                .zip(&other.allow)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }
}

/// Every query attends every non-PAD key.
pub fn full_mask(pad_mask: &[bool]) -> AttentionMaskMatrix {
    let n = pad_mask.len();
    AttentionMaskMatrix::from_fn(n, n, |_, k| !pad_mask[k])
}

/// Intra-document attention plus start-of-document exchange.
///
/// A non-SOD query sees the non-PAD keys of its own document (including that
/// document's SOD). A SOD query sees its own document and every other SOD.
pub fn hierarchical_mask(
    doc_index: &[usize],
    sod_mask: &[bool],
    pad_mask: &[bool],
) -> Result<AttentionMaskMatrix> {
    let n = doc_index.len();
    if sod_mask.len() != n || pad_mask.len() != n {
        return Err(Error::Shape {
            op: "hierarchical_mask",
            lhs: vec![n],
            rhs: vec![sod_mask.len(), pad_mask.len()],
        });
    }
    for p in 0..n {
        if !sod_mask[p] {
            continue;
        }
        if pad_mask[p] {
            return Err(Error::Validation(format!(
                "position {p} is flagged both SOD and PAD"
            )));
        }
        if p > 0 && !pad_mask[p - 1] && doc_index[p - 1] == doc_index[p] {
            return Err(Error::Validation(format!(
                "SOD flag at position {p} is not the first position of document {}",
                doc_index[p]
            )));
        }
    }
    Ok(AttentionMaskMatrix::from_fn(n, n, |q, k| {
        if pad_mask[k] {
            return false;
        }
        if pad_mask[q] {
            return true;
        }
        doc_index[k] == doc_index[q] || (sod_mask[q] && sod_mask[k])
    }))
}

/// Lower-triangular mask: query `q` sees keys `0..=q`.
pub fn causal_mask(t: usize) -> AttentionMaskMatrix {
    AttentionMaskMatrix::from_fn(t, t, |q, k| k <= q)
}

/// Causal mask that additionally denies PAD keys. Position 0 must be non-PAD.
pub fn causal_padded_mask(pad_mask: &[bool]) -> AttentionMaskMatrix {
    let t = pad_mask.len();
    AttentionMaskMatrix::from_fn(t, t, |q, k| k <= q && !pad_mask[k])
}
