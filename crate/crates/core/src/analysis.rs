//! Attention traces, the encoder self-document mass statistic and the
//! cross-document standard deviation (CDS) of decoder cross-attention.

use std::path::Path;

use serde::Serialize;

use crate::container::Container;
use crate::data::PAD_DOC;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

pub const ROW_SUM_TOL: f64 = 1e-6;

/// Attention weights recorded while generating one example.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub n_heads: usize,
    /// Per encoder layer, `[H, K, K]`.
    pub encoder_self: Vec<Tensor>,
    /// Per generated token, `[L_dec, H, K]`.
    pub decoder_cross: Vec<Tensor>,
    pub doc_index: Vec<usize>,
    pub sod_mask: Vec<bool>,
    pub pad_mask: Vec<bool>,
    /// Generated token ids, one per `decoder_cross` entry.
    pub tokens: Vec<usize>,
}

fn join<T>(xs: &[T], f: impl Fn(&T) -> String) -> String {
    xs.iter().map(f).collect::<Vec<_>>().join(",")
}

fn split<T>(kv: &KvMap, key: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    let text = kv
        .get_str(key)
        .ok_or_else(|| Error::Checkpoint(format!("trace header lacks `{key}`")))?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| f(s).ok_or_else(|| Error::Checkpoint(format!("bad `{key}` entry `{s}`"))))
        .collect()
}

fn flag(b: &bool) -> String {
    if *b { "1" } else { "0" }.to_string()
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "1" => Some(true),
        "0" => Some(false),
        _ => None,
    }
}

impl AttentionTrace {
    pub fn src_len(&self) -> usize {
        self.doc_index.len()
    }

    /// Distinct documents among non-PAD positions.
    pub fn n_docs(&self) -> usize {
        self.doc_index
            .iter()
            .zip(&self.pad_mask)
            .filter(|(_, &p)| !p)
            .map(|(&d, _)| d + 1)
            .max()
            .unwrap_or(0)
    }

    /// Every stored weight row must sum to 1 over its allowed positions.
    pub fn validate(&self) -> Result<()> {
        let k = self.src_len();
        if self.sod_mask.len() != k || self.pad_mask.len() != k {
            return Err(Error::Validation("trace metadata lengths disagree".into()));
        }
        if self.tokens.len() != self.decoder_cross.len() {
            return Err(Error::Validation("trace has one token per decoder step".into()));
        }
        let check = |t: &Tensor, what: &str| -> Result<()> {
            if t.last_dim() != k {
                return Err(Error::Validation(format!("{what}: rows are not of length {k}")));
            }
            for (r, row) in t.data().chunks(k).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Validation(format!("{what}: row {r} sums to {s}")));
                }
            }
            Ok(())
        };
        for (l, t) in self.encoder_self.iter().enumerate() {
            check(t, &format!("encoder layer {l}"))?;
        }
        for (i, t) in self.decoder_cross.iter().enumerate() {
            check(t, &format!("decoder step {i}"))?;
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut kv = KvMap::new();
        kv.set("kind", "attention_trace");
        kv.set("n_heads", self.n_heads);
        kv.set("n_enc_layers", self.encoder_self.len());
        kv.set("n_steps", self.decoder_cross.len());
        kv.set(
            "doc_index",
            join(&self.doc_index, |&d| {
                if d == PAD_DOC {
                    "-".to_string()
                } else {
                    d.to_string()
                }
            }),
        );
        kv.set("sod_mask", join(&self.sod_mask, flag));
        kv.set("pad_mask", join(&self.pad_mask, flag));
        kv.set("tokens", join(&self.tokens, usize::to_string));
        let mut c = Container::new(kv);
        for (l, t) in self.encoder_self.iter().enumerate() {
            c.push(format!("encoder_self/{l}"), t.clone());
        }
        for (i, t) in self.decoder_cross.iter().enumerate() {
            c.push(format!("decoder_cross/{i}"), t.clone());
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let kv = c.header.clone();
        if kv.get_str("kind") != Some("attention_trace") {
            return Err(Error::Checkpoint("container is not an attention trace".into()));
        }
        let n_heads = kv.get_or("n_heads", 0usize)?;
        let n_layers = kv.get_or("n_enc_layers", 0usize)?;
        let n_steps = kv.get_or("n_steps", 0usize)?;
        let trace = AttentionTrace {
            n_heads,
            encoder_self: (0..n_layers)
                .map(|l| c.take(&format!("encoder_self/{l}")))
                .collect::<Result<_>>()?,
            decoder_cross: (0..n_steps)
                .map(|i| c.take(&format!("decoder_cross/{i}")))
                .collect::<Result<_>>()?,
            doc_index: split(&kv, "doc_index", |s| {
                if s == "-" {
                    Some(PAD_DOC)
                } else {
                    s.parse().ok()
                }
            })?,
            sod_mask: split(&kv, "sod_mask", parse_flag)?,
            pad_mask: split(&kv, "pad_mask", parse_flag)?,
            tokens: split(&kv, "tokens", |s| s.parse().ok())?,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    /// Loads and checks the row-sum invariant.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Mean over layers and heads of each query's attention mass on its own
/// document, averaged over non-SOD, non-PAD queries.
pub fn self_doc_mass(trace: &AttentionTrace) -> Result<f64> {
    if trace.encoder_self.is_empty() {
        return Err(Error::Validation("trace has no encoder attention".into()));
    }
    let k = trace.src_len();
    let mut total = 0.0;
    let mut count = 0usize;
    for q in 0..k {
        if trace.sod_mask[q] || trace.pad_mask[q] {
            continue;
        }
        let mut mass = 0.0;
        let mut maps = 0usize;
        for layer in &trace.encoder_self {
            for head in layer.data().chunks(k * k) {
                let row = &head[q * k..(q + 1) * k];
                let own: f64 = (0..k)
                    .filter(|&j| trace.doc_index[j] == trace.doc_index[q])
                    .map(|j| row[j])
                    .sum();
                // relative to the row total, which stored f32 rows only approximate
                mass += own / row.iter().sum::<f64>();
                maps += 1;
            }
        }
        total += mass / maps as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Validation("trace has no ordinary source tokens".into()));
    }
    Ok(total / count as f64)
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// CDS of one token from its per-document aggregated attention.
pub fn cds_from_aggregates(aggregates: &[f64]) -> Result<f64> {
    if aggregates.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "CDS needs at least two documents, got {}",
            aggregates.len()
        )));
    }
    Ok(population_std(&softmax(aggregates)))
}

/// Per generated token: average cross-attention over layers and heads, sum
/// it per document (SOD included), softmax over documents, population std.
pub fn cds(trace: &AttentionTrace) -> Result<Vec<f64>> {
    let n = trace.n_docs();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!(
            "CDS needs at least two documents, got {n}"
        )));
    }
    if trace.decoder_cross.is_empty() {
        return Err(Error::Validation("trace has no decoder cross-attention".into()));
    }
    let k = trace.src_len();
    trace
        .decoder_cross
        .iter()
        .map(|step| {
            let rows = step.numel() / k;
            let mut avg = vec![0.0; k];
            for row in step.data().chunks(k) {
                for (a, w) in avg.iter_mut().zip(row) {
                    *a += w / rows as f64;
                }
            }
            let mut agg = vec![0.0; n];
            for (j, a) in avg.iter().enumerate() {
                if !trace.pad_mask[j] {
                    agg[trace.doc_index[j]] += a;
                }
            }
            cds_from_aggregates(&agg)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfDocReport {
    pub per_example: Vec<f64>,
    pub corpus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CdsReport {
    /// Empty for examples where CDS is undefined.
    pub per_token: Vec<Vec<f64>>,
    /// `None` marks an undefined (single-document) example.
    pub per_example: Vec<Option<f64>>,
    /// Mean over defined examples.
    pub corpus_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub self_doc: SelfDocReport,
    pub cds: CdsReport,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn self_doc_report(traces: &[AttentionTrace]) -> Result<SelfDocReport> {
    let per_example = traces.iter().map(self_doc_mass).collect::<Result<Vec<_>>>()?;
    let corpus = mean(per_example.iter().copied())
        .ok_or_else(|| Error::Validation("no traces".into()))?;
    Ok(SelfDocReport {
        per_example,
        corpus,
    })
}

pub fn cds_report(traces: &[AttentionTrace]) -> Result<CdsReport> {
    let mut per_token = Vec::new();
    let mut per_example = Vec::new();
    for t in traces {
        match cds(t) {
            Ok(v) => {
                per_example.push(mean(v.iter().copied()));
                per_token.push(v);
            }
            Err(Error::UndefinedMetric(_)) => {
                per_example.push(None);
                per_token.push(Vec::new());
            }
            Err(e) => return Err(e),
        }
    }
    let corpus_mean = mean(per_example.iter().flatten().copied());
    Ok(CdsReport {
        per_token,
        per_example,
        corpus_mean,
    })
}

pub fn analyze(traces: &[AttentionTrace]) -> Result<AnalysisReport> {
    Ok(AnalysisReport {
        self_doc: self_doc_report(traces)?,
        cds: cds_report(traces)?,
    })
}

/// Ratios of `a` over a reference report `b`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioReport {
    pub self_doc: f64,
    pub cds: Option<f64>,
}

pub fn compare(a: &AnalysisReport, b: &AnalysisReport) -> RatioReport {
    RatioReport {
        self_doc: a.self_doc.corpus / b.self_doc.corpus,
        cds: match (a.cds.corpus_mean, b.cds.corpus_mean) {
            (Some(x), Some(y)) => Some(x / y),
            _ => None,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_trace(docs: &[usize]) -> AttentionTrace {
        let k = docs.len();
        let mut sod = vec![false; k];
        for (i, d) in docs.iter().enumerate() {
            if i == 0 || docs[i - 1] != *d {
                sod[i] = true;
            }
        }
        let w = Tensor::full(vec![1, k, k], 1.0 / k as f64);
        AttentionTrace {
            n_heads: 1,
            encoder_self: vec![w],
            decoder_cross: vec![Tensor::full(vec![1, 1, k], 1.0 / k as f64)],
            doc_index: docs.to_vec(),
            sod_mask: sod,
            pad_mask: vec![false; k],
            tokens: vec![5],
        }
    }

    #[test]
    fn uniform_weights_give_document_share() {
        // documents of 2 and 4 positions, one ordinary token and three
        let t = uniform_trace(&[0, 0, 1, 1, 1, 1]);
        let expect = (1.0 * 2.0 / 6.0 + 3.0 * 4.0 / 6.0) / 4.0;
        assert!((self_doc_mass(&t).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn hand_cds() {
        let v = cds_from_aggregates(&[0.7, 0.3]).unwrap();
        assert!((v - 0.0987).abs() < 1e-4, "{v}");
        assert_eq!(cds_from_aggregates(&[0.2, 0.2, 0.2]).unwrap(), 0.0);
        assert!(matches!(cds_from_aggregates(&[1.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn single_document_cds_is_flagged() {
        let t = uniform_trace(&[0, 0, 0]);
        assert!(matches!(cds(&t), Err(Error::UndefinedMetric(_))));
        let r = cds_report(std::slice::from_ref(&t)).unwrap();
        assert_eq!(r.per_example, vec![None]);
        assert_eq!(r.corpus_mean, None);
        assert_eq!(self_doc_mass(&t).unwrap(), 1.0);
    }

    #[test]
    fn trace_round_trip() {
        let mut t = uniform_trace(&[0, 0, 1, 1]);
        t.doc_index.push(PAD_DOC);
        t.sod_mask.push(false);
        t.pad_mask.push(true);
        t.encoder_self = vec![Tensor::full(vec![1, 5, 5], 0.2)];
        t.decoder_cross = vec![Tensor::full(vec![1, 1, 5], 0.2)];
        let c = t.to_container();
        let bytes = c.to_bytes();
        let back = AttentionTrace::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.doc_index, t.doc_index);
        assert_eq!(back.pad_mask, t.pad_mask);
        assert_eq!(back.tokens, t.tokens);
        assert!((back.encoder_self[0].data()[3] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn self_ratio_is_one() {
        let r = analyze(&[uniform_trace(&[0, 0, 1, 1, 1])]).unwrap();
        let q = compare(&r, &r);
        assert_eq!(q.self_doc, 1.0);
    }
}
