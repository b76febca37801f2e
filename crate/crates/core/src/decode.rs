//! Greedy autoregressive generation.

use crate::analysis::AttentionTrace;
use crate::data::SourceBatch;
use crate::error::{Error, Result};
use crate::model::{EncoderOutput, Seq2Seq};
use crate::tensor::Tensor;
use crate::vocab::{EOS, PAD, SOD};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerationConfig {
    pub max_length: usize,
    pub min_length: usize,
    pub stop_token: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_length: 32,
            min_length: 1,
            stop_token: EOS,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, tgt_trunc: usize) -> Result<()> {
        if self.min_length == 0 || self.min_length > self.max_length {
            return Err(Error::Config(format!(
                "need 1 <= min_length ({}) <= max_length ({})",
                self.min_length, self.max_length
            )));
        }
        if self.max_length > tgt_trunc {
            return Err(Error::Config(format!(
                "max_length {} exceeds tgt_trunc {tgt_trunc}",
                self.max_length
            )));
        }
        Ok(())
    }
}

/// Picks the next token: PAD is never chosen, the stop token only once
/// `position + 1 >= min_length`; ties go to the lowest id.
pub fn pick_token(logits: &[f64], position: usize, cfg: &GenerationConfig) -> usize {
    let mut best: Option<usize> = None;
    for (id, &v) in logits.iter().enumerate() {
        if id == PAD || (id == cfg.stop_token && position + 1 < cfg.min_length) {
            continue;
        }
        if best.is_none_or(|b| v > logits[b]) {
            best = Some(id);
        }
    }
    best.expect("vocabulary has a selectable token")
}

/// Greedy loop over an arbitrary step function. `step` receives the current
/// decoder prefixes (SOD first, finished rows padded with PAD) and returns
/// `[B][V]` logits. The output of each row ends with the stop token unless
/// `max_length` was reached first.
pub fn greedy_search<F>(batch_size: usize, cfg: &GenerationConfig, mut step: F) -> Result<Vec<Vec<usize>>>
where
    F: FnMut(&[Vec<usize>], &[bool]) -> Result<Vec<Vec<f64>>>,
{
    let mut prefixes = vec![vec![SOD]; batch_size];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); batch_size];
    let mut done = vec![false; batch_size];
    for position in 0..cfg.max_length {
        if done.iter().all(|&d| d) {
            break;
        }
        let logits = step(&prefixes, &done)?;
        for b in 0..batch_size {
            if done[b] {
                prefixes[b].push(PAD);
                continue;
            }
            let tok = pick_token(&logits[b], position, cfg);
            out[b].push(tok);
            prefixes[b].push(tok);
            if tok == cfg.stop_token {
                done[b] = true;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub sequences: Vec<Vec<usize>>,
    /// One trace per batch row when requested.
    pub traces: Option<Vec<AttentionTrace>>,
}

/// Greedy decoding for every row of `src`.
pub fn greedy_generate(
    model: &Seq2Seq,
    src: &SourceBatch,
    cfg: &GenerationConfig,
    trace: bool,
) -> Result<Generation> {
    cfg.validate(model.config().tgt_trunc)?;
    let enc: EncoderOutput = model.encode_states(src)?;
    let b = src.batch_size;
    let k = src.src_len;
    let h = model.config().n_heads;
    let l = model.config().n_dec_layers;
    let mut steps: Vec<Vec<Tensor>> = vec![Vec::new(); b];
    let sequences = greedy_search(b, cfg, |prefixes, done| {
        let out = model.decode_step(&enc, src, prefixes)?;
        if trace {
            for (i, rows) in out.cross_weights.iter().enumerate() {
                if done[i] {
                    continue;
                }
                let data: Vec<f64> = rows.iter().flatten().flatten().copied().collect();
                steps[i].push(Tensor::new(vec![l, h, k], data)?);
            }
        }
        Ok(out.logits)
    })?;
    let traces = trace.then(|| {
        steps
            .into_iter()
            .enumerate()
            .map(|(i, decoder_cross)| {
                let encoder_self = enc
                    .self_attention
                    .iter()
                    .map(|w| {
                        let per_row = h * k * k;
                        Tensor::new(vec![h, k, k], w.data()[i * per_row..(i + 1) * per_row].to_vec())
                            .expect("slice matches shape")
                    })
                    .collect();
                AttentionTrace {
                    n_heads: h,
                    encoder_self,
                    decoder_cross,
                    doc_index: src.row(&src.doc_index, i).to_vec(),
                    sod_mask: src.row(&src.sod_mask, i).to_vec(),
                    pad_mask: src.row(&src.pad_mask, i).to_vec(),
                    tokens: sequences[i].clone(),
                }
            })
            .collect()
    });
    Ok(Generation { sequences, traces })
}

/// Drops a trailing stop token.
pub fn strip_stop(seq: &[usize], cfg: &GenerationConfig) -> Vec<usize> {
    match seq.split_last() {
        Some((&last, rest)) if last == cfg.stop_token => rest.to_vec(),
        _ => seq.to_vec(),
    }
}
