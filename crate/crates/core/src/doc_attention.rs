//! Document-scaled cross-attention weights.
//!
//! For one decoder query and one head, raw scores over the source are split
//! into documents. Each document gets its own softmax, the documents are then
//! weighted by a softmax over the scores of their start-of-document positions,
//! and the final weight of a source token is `s[n] * p[n][k]`.

use std::ops::Range;

use crate::error::{Error, Result};

/// Contiguous non-PAD source spans, one per document, for a single example.
/// The first position of every span is the document's SOD position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocLayout {
    len: usize,
    segments: Vec<Range<usize>>,
}

impl DocLayout {
    pub fn new(len: usize, segments: Vec<Range<usize>>) -> Result<Self> {
        let mut prev_end = 0;
        for seg in &segments {
            if seg.start < prev_end || seg.end <= seg.start || seg.end > len {
                return Err(Error::Validation(format!(
                    "document span {seg:?} invalid for length {len}"
                )));
            }
            prev_end = seg.end;
        }
        Ok(DocLayout { len, segments })
    }

    /// Groups consecutive non-PAD positions that share a document ordinal.
    pub fn from_doc_index(doc_index: &[usize], pad_mask: &[bool]) -> Self {
        let mut segments: Vec<Range<usize>> = Vec::new();
        let mut current: Option<(usize, usize)> = None;
        for (p, (&doc, &pad)) in doc_index.iter().zip(pad_mask).enumerate() {
            if pad {
                if let Some((start, _)) = current.take() {
                    segments.push(start..p);
                }
                continue;
            }
            match current {
                Some((_, d)) if d == doc => {}
                Some((start, _)) => {
                    segments.push(start..p);
                    current = Some((p, doc));
                }
                None => current = Some((p, doc)),
            }
        }
        if let Some((start, _)) = current {
            segments.push(start..doc_index.len());
        }
        DocLayout {
            len: doc_index.len(),
            segments,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_docs(&self) -> usize {
        self.segments.len()
    }

    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }
}

/// Per-document softmax, document scaling and normalized weights for one row.
///
/// `per_doc` receives the within-document softmax (zero outside every span),
/// `scaling` one weight per document, and `weights` the products.
pub(crate) fn doc_scaled_row(
    raw: &[f64],
    layout: &DocLayout,
    per_doc: &mut [f64],
    scaling: &mut [f64],
    weights: &mut [f64],
) -> Result<()> {
    per_doc.iter_mut().for_each(|v| *v = 0.0);
    weights.iter_mut().for_each(|v| *v = 0.0);
    if layout.segments.is_empty() {
        return Err(Error::DegenerateRow { row: 0 });
    }
    for seg in &layout.segments {
        softmax_into(&raw[seg.clone()], &mut per_doc[seg.clone()]);
    }
    let heads: Vec<f64> = layout.segments.iter().map(|s| raw[s.start]).collect();
    softmax_into(&heads, scaling);
    for (seg, &s) in layout.segments.iter().zip(scaling.iter()) {
        for k in seg.clone() {
            weights[k] = s * per_doc[k];
        }
    }
    Ok(())
}

/// Max-shifted softmax of a non-empty slice.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Full record of the document-scaled weights for one query and head.
#[derive(Clone, Debug, PartialEq)]
pub struct DocScaledCrossAttention {
    /// Scaled dot-product scores grouped by document.
    pub raw_scores: Vec<Vec<f64>>,
    /// Softmax within each document.
    pub per_doc_weights: Vec<Vec<f64>>,
    /// Softmax over the SOD scores, one per document.
    pub doc_scaling: Vec<f64>,
    /// `doc_scaling[n] * per_doc_weights[n][k]`.
    pub normalized_weights: Vec<Vec<f64>>,
}

impl DocScaledCrossAttention {
    pub fn compute(raw: &[f64], layout: &DocLayout) -> Result<Self> {
        if raw.len() != layout.len {
            return Err(Error::Shape {
                op: "doc_scaled_attention",
                lhs: vec![raw.len()],
                rhs: vec![layout.len],
            });
        }
        let mut per_doc = vec![0.0; raw.len()];
        let mut weights = vec![0.0; raw.len()];
        let mut scaling = vec![0.0; layout.n_docs()];
        doc_scaled_row(raw, layout, &mut per_doc, &mut scaling, &mut weights)?;
        let split = |v: &[f64]| -> Vec<Vec<f64>> {
            layout
                .segments
                .iter()
                .map(|s| v[s.clone()].to_vec())
                .collect()
        };
        Ok(DocScaledCrossAttention {
            raw_scores: split(raw),
            per_doc_weights: split(&per_doc),
            doc_scaling: scaling,
            normalized_weights: split(&weights),
        })
    }

    /// Largest deviation from the four normalization identities.
    pub fn normalization_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for p in &self.per_doc_weights {
            worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        }
        worst = worst.max((self.doc_scaling.iter().sum::<f64>() - 1.0).abs());
        let total: f64 = self.normalized_weights.iter().flatten().sum();
        worst = worst.max((total - 1.0).abs());
        for (w, s) in self.normalized_weights.iter().zip(&self.doc_scaling) {
            worst = worst.max((w.iter().sum::<f64>() - s).abs());
        }
        worst
    }

    /// Total normalized mass per document.
    pub fn doc_mass(&self) -> Vec<f64> {
        self.normalized_weights
            .iter()
            .map(|w| w.iter().sum())
            .collect()
    }
}
