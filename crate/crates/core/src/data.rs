//! Multi-document examples: JSONL ingestion, the synthetic fact-merging task,
//! and batching with document boundaries, SOD flags and position ids.

use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, EOS, PAD, SOD};

/// Sentinel document ordinal carried by PAD positions.
pub const PAD_DOC: usize = usize::MAX;

/// One dataset line: source documents and a reference summary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub documents: Vec<String>,
    pub summary: String,
}

impl RawExample {
    fn from_json_line(line: &str, line_no: usize) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        let field = |name: &str| {
            obj.get(name).ok_or_else(|| {
                Error::Validation(format!("line {line_no}: missing field `{name}`"))
            })
        };
        let documents = field("documents")?
            .as_array()
            .ok_or_else(|| {
                Error::Validation(format!("line {line_no}: field `documents` must be an array"))
            })?
            .iter()
            .map(|d| {
                d.as_str().map(str::to_string).ok_or_else(|| {
                    Error::Validation(format!(
                        "line {line_no}: field `documents` must hold strings"
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if documents.is_empty() {
            return Err(Error::Validation(format!(
                "line {line_no}: field `documents` is empty"
            )));
        }
        let summary = field("summary")?
            .as_str()
            .ok_or_else(|| {
                Error::Validation(format!("line {line_no}: field `summary` must be a string"))
            })?
            .to_string();
        Ok(RawExample { documents, summary })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain strings serialize")
    }
}

/// Streaming JSONL reader; yields examples in file order and skips blank lines.
pub struct JsonlReader {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
}

impl Iterator for JsonlReader {
    type Item = Result<RawExample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(RawExample::from_json_line(&line, self.line_no));
        }
    }
}

pub fn read_jsonl(path: &Path) -> Result<JsonlReader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(JsonlReader {
        path: path.to_path_buf(),
        lines: BufReader::new(file).lines(),
        line_no: 0,
    })
}

pub fn load_jsonl(path: &Path) -> Result<Vec<RawExample>> {
    read_jsonl(path)?.collect()
}

/// Parameters of the synthetic fact-merging task.
///
/// Each document lists facts `k<i> = v<j>`; keys are disjoint across the
/// documents of an example. The summary walks every key of the example in
/// ascending key order as `k<i> v<j>` pairs, so producing it requires reading
/// all documents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub count: usize,
    pub n_docs: (usize, usize),
    pub facts_per_doc: (usize, usize),
    pub n_keys: usize,
    pub n_values: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            count: 1000,
            n_docs: (2, 3),
            facts_per_doc: (1, 2),
            n_keys: 10,
            n_values: 40,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (dl, dh) = self.n_docs;
        let (fl, fh) = self.facts_per_doc;
        if dl == 0 || dl > dh {
            return Err(Error::Config(format!("bad document range [{dl},{dh}]")));
        }
        if fl == 0 || fl > fh {
            return Err(Error::Config(format!("bad facts-per-document range [{fl},{fh}]")));
        }
        if self.n_keys < dh * fh {
            return Err(Error::Config(format!(
                "{} keys cannot cover {dh} documents of {fh} facts",
                self.n_keys
            )));
        }
        if self.n_values == 0 {
            return Err(Error::Config("need at least one value token".into()));
        }
        Ok(())
    }
}

/// Deterministic stream of synthetic examples.
pub struct SyntheticStream {
    spec: SyntheticSpec,
    rng: ChaCha8Rng,
    produced: usize,
}

pub fn gen_synthetic(spec: SyntheticSpec) -> Result<SyntheticStream> {
    spec.validate()?;
    Ok(SyntheticStream {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        spec,
        produced: 0,
    })
}

impl Iterator for SyntheticStream {
    type Item = RawExample;

    fn next(&mut self) -> Option<RawExample> {
        if self.produced >= self.spec.count {
            return None;
        }
        self.produced += 1;
        let spec = &self.spec;
        let rng = &mut self.rng;
        let n_docs = rng.gen_range(spec.n_docs.0..=spec.n_docs.1);
        let counts: Vec<usize> = (0..n_docs)
            .map(|_| rng.gen_range(spec.facts_per_doc.0..=spec.facts_per_doc.1))
            .collect();
        let mut keys: Vec<usize> = (0..spec.n_keys).collect();
        keys.shuffle(rng);
        let mut facts: Vec<(usize, usize)> = Vec::new();
        let mut documents = Vec::with_capacity(n_docs);
        let mut next = 0;
        for &c in &counts {
            let mut lines = Vec::with_capacity(c);
            for &key in &keys[next..next + c] {
                let value = rng.gen_range(0..spec.n_values);
                facts.push((key, value));
                lines.push(format!("k{key} = v{value}"));
            }
            next += c;
            documents.push(lines.join("\n"));
        }
        facts.sort_unstable();
        let summary = facts
            .iter()
            .map(|(k, v)| format!("k{k} v{v}"))
            .collect::<Vec<_>>()
            .join(" ");
        Some(RawExample { documents, summary })
    }
}

/// Token-id form of a [`RawExample`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiDocExample {
    pub documents: Vec<Vec<usize>>,
    pub summary: Vec<usize>,
}

impl MultiDocExample {
    pub fn encode(raw: &RawExample, vocab: &Vocabulary) -> Self {
        MultiDocExample {
            documents: raw.documents.iter().map(|d| vocab.encode(d)).collect(),
            summary: vocab.encode(&raw.summary),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchConfig {
    pub use_sod: bool,
    pub pos_restart: bool,
    pub src_trunc: usize,
    pub tgt_trunc: usize,
}

/// Encoder-side tensors of a batch, flattened row-major as `[B, K]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceBatch {
    pub batch_size: usize,
    pub src_len: usize,
    pub input_ids: Vec<usize>,
    pub doc_index: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub sod_mask: Vec<bool>,
    /// `true` marks a PAD position.
    pub pad_mask: Vec<bool>,
}

impl SourceBatch {
    pub fn row<'a, T>(&self, field: &'a [T], b: usize) -> &'a [T] {
        &field[b * self.src_len..(b + 1) * self.src_len]
    }

    /// Number of documents present in row `b`.
    pub fn n_docs(&self, b: usize) -> usize {
        let docs = self.row(&self.doc_index, b);
        let pads = self.row(&self.pad_mask, b);
        let mut n = 0;
        let mut last = None;
        for (&d, &p) in docs.iter().zip(pads) {
            if !p && last != Some(d) {
                n += 1;
                last = Some(d);
            }
        }
        n
    }

    /// Restricts the batch to a single row.
    pub fn select(&self, b: usize) -> SourceBatch {
        SourceBatch {
            batch_size: 1,
            src_len: self.src_len,
            input_ids: self.row(&self.input_ids, b).to_vec(),
            doc_index: self.row(&self.doc_index, b).to_vec(),
            position_ids: self.row(&self.position_ids, b).to_vec(),
            sod_mask: self.row(&self.sod_mask, b).to_vec(),
            pad_mask: self.row(&self.pad_mask, b).to_vec(),
        }
    }
}

/// Source tensors plus teacher-forcing decoder inputs and labels (`[B, T]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiDocBatch {
    pub source: SourceBatch,
    pub tgt_len: usize,
    pub decoder_input_ids: Vec<usize>,
    pub labels: Vec<usize>,
}

struct SourceRow {
    ids: Vec<usize>,
    doc: Vec<usize>,
    pos: Vec<usize>,
    sod: Vec<bool>,
}

/// Truncates documents proportionally, then lays them out one after another.
fn source_row(docs: &[Vec<usize>], cfg: &BatchConfig) -> Result<SourceRow> {
    let sod = usize::from(cfg.use_sod);
    let docs: Vec<&Vec<usize>> = docs.iter().filter(|d| !d.is_empty()).collect();
    if docs.is_empty() || cfg.src_trunc < sod + 1 {
        return Err(Error::Validation(
            "every document of the example truncates to empty".into(),
        ));
    }
    let lens: Vec<usize> = docs.iter().map(|d| d.len() + sod).collect();
    let total: usize = lens.iter().sum();
    let floor = sod + 1;
    let keep: Vec<usize> = if total <= cfg.src_trunc {
        docs.iter().map(|d| d.len()).collect()
    } else if docs.len() * floor <= cfg.src_trunc {
        // every document keeps one token; the rest is shared by length
        let spare = cfg.src_trunc - docs.len() * floor;
        let extra = total - docs.len() * floor;
        lens.iter().map(|&len| 1 + spare * (len - floor) / extra).collect()
    } else {
        lens.iter()
            .zip(&docs)
            .map(|(&len, d)| {
                let budget = (cfg.src_trunc * len / total).max(sod + 1);
                (budget - sod).min(d.len())
            })
            .collect()
    };
    let mut row = SourceRow {
        ids: Vec::new(),
        doc: Vec::new(),
        pos: Vec::new(),
        sod: Vec::new(),
    };
    for (n, (d, &k)) in docs.iter().zip(&keep).enumerate() {
        let start = row.ids.len();
        if cfg.use_sod {
            row.ids.push(SOD);
            row.sod.push(true);
            row.doc.push(n);
        }
        for &tok in &d[..k] {
            row.ids.push(tok);
            row.sod.push(false);
            row.doc.push(n);
        }
        for p in start..row.ids.len() {
            row.pos.push(if cfg.pos_restart { p - start } else { p });
        }
    }
    if row.ids.len() > cfg.src_trunc {
        row.ids.truncate(cfg.src_trunc);
        row.doc.truncate(cfg.src_trunc);
        row.pos.truncate(cfg.src_trunc);
        row.sod.truncate(cfg.src_trunc);
        // a trailing document cut down to its SOD alone is dropped
        if row.sod.last() == Some(&true) {
            row.ids.pop();
            row.doc.pop();
            row.pos.pop();
            row.sod.pop();
        }
    }
    Ok(row)
}

/// Builds the source side only (for generation).
pub fn make_source_batch(docs: &[&[Vec<usize>]], cfg: &BatchConfig) -> Result<SourceBatch> {
    if docs.is_empty() {
        return Err(Error::Validation("batch is empty".into()));
    }
    let rows = docs
        .iter()
        .map(|d| source_row(d, cfg))
        .collect::<Result<Vec<_>>>()?;
    let k = rows.iter().map(|r| r.ids.len()).max().unwrap_or(0);
    let b = rows.len();
    let mut out = SourceBatch {
        batch_size: b,
        src_len: k,
        input_ids: vec![PAD; b * k],
        doc_index: vec![PAD_DOC; b * k],
        position_ids: vec![0; b * k],
        sod_mask: vec![false; b * k],
        pad_mask: vec![true; b * k],
    };
    for (i, r) in rows.iter().enumerate() {
        let base = i * k;
        for p in 0..r.ids.len() {
            out.input_ids[base + p] = r.ids[p];
            out.doc_index[base + p] = r.doc[p];
            out.position_ids[base + p] = r.pos[p];
            out.sod_mask[base + p] = r.sod[p];
            out.pad_mask[base + p] = false;
        }
    }
    Ok(out)
}

/// Source layout plus `decoder_input_ids = SOD + summary` and
/// `labels = summary + EOS`, padded to a common length.
pub fn make_batch(examples: &[MultiDocExample], cfg: &BatchConfig) -> Result<MultiDocBatch> {
    if cfg.tgt_trunc == 0 {
        return Err(Error::Config("target truncation must be positive".into()));
    }
    let docs: Vec<&[Vec<usize>]> = examples.iter().map(|e| e.documents.as_slice()).collect();
    let source = make_source_batch(&docs, cfg)?;
    let summaries: Vec<&[usize]> = examples
        .iter()
        .map(|e| &e.summary[..e.summary.len().min(cfg.tgt_trunc - 1)])
        .collect();
    let t = summaries.iter().map(|s| s.len() + 1).max().unwrap_or(1);
    let b = examples.len();
    let mut decoder_input_ids = vec![PAD; b * t];
    let mut labels = vec![PAD; b * t];
    for (i, s) in summaries.iter().enumerate() {
        decoder_input_ids[i * t] = SOD;
        decoder_input_ids[i * t + 1..i * t + 1 + s.len()].copy_from_slice(s);
        labels[i * t..i * t + s.len()].copy_from_slice(s);
        labels[i * t + s.len()] = EOS;
    }
    Ok(MultiDocBatch {
        source,
        tgt_len: t,
        decoder_input_ids,
        labels,
    })
}
