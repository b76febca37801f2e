//! Post-norm encoder–decoder transformer with switchable hierarchical
//! encoder masking and document-scaled decoder cross-attention.

use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, LN_EPS};
use crate::data::{MultiDocBatch, SourceBatch};
use crate::doc_attention::{DocLayout, DocScaledCrossAttention};
use crate::error::{Error, Result};
use crate::mask::{causal_padded_mask, full_mask, hierarchical_mask, AttentionMaskMatrix};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::PAD;

struct AttnVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

struct LnVars {
    gain: Var,
    bias: Var,
}

struct FfVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct EncLayer {
    attn: AttnVars,
    attn_ln: LnVars,
    ff: FfVars,
    ff_ln: LnVars,
}

struct DecLayer {
    self_attn: AttnVars,
    self_ln: LnVars,
    cross: AttnVars,
    cross_ln: LnVars,
    ff: FfVars,
    ff_ln: LnVars,
}

/// Parameters bound to a tape, in [`ParamStore`] order.
pub struct ModelVars {
    pub all: Vec<Var>,
    tok_emb: Var,
    enc_pos: Var,
    enc_emb_ln: LnVars,
    enc: Vec<EncLayer>,
    dec_pos: Var,
    dec_emb_ln: LnVars,
    dec: Vec<DecLayer>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        self.at += 1;
        self.vars[self.at - 1]
    }

    fn attn(&mut self) -> AttnVars {
        AttnVars {
            wq: self.next(),
            bq: self.next(),
            wk: self.next(),
            bk: self.next(),
            wv: self.next(),
            bv: self.next(),
            wo: self.next(),
            bo: self.next(),
        }
    }

    fn ln(&mut self) -> LnVars {
        LnVars {
            gain: self.next(),
            bias: self.next(),
        }
    }

    fn ff(&mut self) -> FfVars {
        FfVars {
            w1: self.next(),
            b1: self.next(),
            w2: self.next(),
            b2: self.next(),
        }
    }
}

/// Attention weights (and raw scores) recorded during a forward pass.
#[derive(Debug, Default)]
pub struct AttentionCapture {
    /// Per encoder layer, `[B, H, K, K]`.
    pub encoder_self: Vec<Var>,
    /// Per decoder layer, `[B, H, T, K]` normalized cross-attention weights.
    pub decoder_cross: Vec<Var>,
    /// Per decoder layer, `[B, H, T, K]` scaled cross-attention scores.
    pub cross_scores: Vec<Var>,
}

/// Inverted dropout driven by an optional training RNG.
pub struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn new(p: f64, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Dropout { p, rng }
    }

    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => tape.dropout(x, self.p, rng),
            _ => x,
        }
    }
}

enum Scoring<'a> {
    Masked(&'a [AttentionMaskMatrix]),
    DocScaled(&'a [DocLayout]),
}

struct AttnOut {
    out: Var,
    weights: Var,
    scores: Var,
}

/// Encoder states and attention maps for inference.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[B, K, d_model]`
    pub states: Tensor,
    /// Per layer, `[B, H, K, K]`.
    pub self_attention: Vec<Tensor>,
}

/// Result of one decoding step for every batch row.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `[B][V]` logits of the next token.
    pub logits: Vec<Vec<f64>>,
    /// `[B][layer][head][K]` cross-attention weights of the newest query.
    pub cross_weights: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[B][layer][head]` document-scaled records; empty unless `hier_dec`.
    pub doc_attention: Vec<Vec<Vec<DocScaledCrossAttention>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    config: ModelConfig,
    params: ParamStore,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Seq2Seq { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Same weights under different switches; the parameter layout does not
    /// depend on them.
    pub fn with_flags(&self, use_sod: bool, hier_enc: bool, hier_dec: bool, pos_restart: bool) -> Result<Self> {
        Self::new(
            self.config.with_flags(use_sod, hier_enc, hier_dec, pos_restart),
            self.params.clone(),
        )
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ModelVars {
        let all: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        let mut c = Cursor { vars: &all, at: 0 };
        let tok_emb = c.next();
        let enc_pos = c.next();
        let enc_emb_ln = c.ln();
        let enc = (0..self.config.n_enc_layers)
            .map(|_| EncLayer {
                attn: c.attn(),
                attn_ln: c.ln(),
                ff: c.ff(),
                ff_ln: c.ln(),
            })
            .collect();
        let dec_pos = c.next();
        let dec_emb_ln = c.ln();
        let dec = (0..self.config.n_dec_layers)
            .map(|_| DecLayer {
                self_attn: c.attn(),
                self_ln: c.ln(),
                cross: c.attn(),
                cross_ln: c.ln(),
                ff: c.ff(),
                ff_ln: c.ln(),
            })
            .collect();
        ModelVars {
            all,
            tok_emb,
            enc_pos,
            enc_emb_ln,
            enc,
            dec_pos,
            dec_emb_ln,
            dec,
        }
    }

    fn position_rows(&self, positions: &[usize]) -> Result<Vec<usize>> {
        let limit = self.config.effective_positions();
        positions
            .iter()
            .map(|&p| {
                if p >= limit {
                    Err(Error::Validation(format!(
                        "position {p} exceeds the {limit} available position slots"
                    )))
                } else {
                    Ok(p % self.config.max_positions)
                }
            })
            .collect()
    }

    fn check_source(&self, src: &SourceBatch) -> Result<()> {
        if src.src_len > self.config.effective_positions() {
            return Err(Error::Validation(format!(
                "source length {} exceeds the {} available position slots",
                src.src_len,
                self.config.effective_positions()
            )));
        }
        for b in 0..src.batch_size {
            let has_sod = src.row(&src.sod_mask, b).iter().any(|&s| s);
            if has_sod != self.config.use_sod {
                return Err(Error::Validation(format!(
                    "batch row {b}: SOD tokens present = {has_sod} but use_sod = {}",
                    self.config.use_sod
                )));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn embed(
        &self,
        tape: &mut Tape,
        table: Var,
        pos_table: Var,
        ln: &LnVars,
        ids: &[usize],
        positions: &[usize],
        shape: [usize; 3],
    ) -> Result<Var> {
        let tok = tape.embedding(table, ids)?;
        let rows = self.position_rows(positions)?;
        let pos = tape.embedding(pos_table, &rows)?;
        let sum = tape.add(tok, pos)?;
        let normed = tape.layer_norm(sum, ln.gain, ln.bias, LN_EPS)?;
        tape.reshape(normed, shape.to_vec())
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &AttnVars,
        query_in: Var,
        kv_in: Var,
        scoring: Scoring<'_>,
    ) -> Result<AttnOut> {
        let heads = self.config.n_heads;
        let project = |tape: &mut Tape, x: Var, w: Var, b: Var| -> Result<Var> {
            let y = tape.matmul(x, w)?;
            let y = tape.add(y, b)?;
            tape.split_heads(y, heads)
        };
        let q = project(tape, query_in, p.wq, p.bq)?;
        let k = project(tape, kv_in, p.wk, p.bk)?;
        let v = project(tape, kv_in, p.wv, p.bv)?;
        let raw = tape.matmul_nt(q, k)?;
        let scores = tape.scale(raw, 1.0 / (self.config.head_dim() as f64).sqrt());
        let weights = match scoring {
            Scoring::Masked(masks) => tape.masked_softmax(scores, Some(masks))?,
            Scoring::DocScaled(layouts) => tape.doc_softmax(scores, layouts)?,
        };
        let ctx = tape.matmul(weights, v)?;
        let merged = tape.merge_heads(ctx)?;
        let out = tape.matmul(merged, p.wo)?;
        let out = tape.add(out, p.bo)?;
        Ok(AttnOut {
            out,
            weights,
            scores,
        })
    }

    fn residual_norm(
        &self,
        tape: &mut Tape,
        x: Var,
        sub: Var,
        ln: &LnVars,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let sub = dropout.apply(tape, sub);
        let sum = tape.add(x, sub)?;
        tape.layer_norm(sum, ln.gain, ln.bias, LN_EPS)
    }

    fn feed_forward(&self, tape: &mut Tape, p: &FfVars, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.w1)?;
        let h = tape.add(h, p.b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, p.w2)?;
        tape.add(o, p.b2)
    }

    /// Self-attention masks of the encoder, one per batch row.
    pub fn encoder_masks(&self, src: &SourceBatch) -> Result<Vec<AttentionMaskMatrix>> {
        (0..src.batch_size)
            .map(|b| {
                let pad = src.row(&src.pad_mask, b);
                if self.config.hier_enc {
                    hierarchical_mask(src.row(&src.doc_index, b), src.row(&src.sod_mask, b), pad)
                } else {
                    Ok(full_mask(pad))
                }
            })
            .collect()
    }

    /// Encoder hidden states `[B, K, d_model]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        src: &SourceBatch,
        dropout: &mut Dropout<'_>,
        mut capture: Option<&mut AttentionCapture>,
    ) -> Result<Var> {
        self.check_source(src)?;
        let (b, k, d) = (src.batch_size, src.src_len, self.config.d_model);
        let masks = self.encoder_masks(src)?;
        let mut x = self.embed(
            tape,
            vars.tok_emb,
            vars.enc_pos,
            &vars.enc_emb_ln,
            &src.input_ids,
            &src.position_ids,
            [b, k, d],
        )?;
        x = dropout.apply(tape, x);
        for layer in &vars.enc {
            let a = self.attention(tape, &layer.attn, x, x, Scoring::Masked(&masks))?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.encoder_self.push(a.weights);
            }
            x = self.residual_norm(tape, x, a.out, &layer.attn_ln, dropout)?;
            let f = self.feed_forward(tape, &layer.ff, x)?;
            x = self.residual_norm(tape, x, f, &layer.ff_ln, dropout)?;
        }
        Ok(x)
    }

    /// Teacher-forced decoder logits `[B, T, V]` for `dec_ids` (`[B, T]`).
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        enc: Var,
        src: &SourceBatch,
        dec_ids: &[usize],
        tgt_len: usize,
        dropout: &mut Dropout<'_>,
        mut capture: Option<&mut AttentionCapture>,
    ) -> Result<Var> {
        let (b, k, d) = (src.batch_size, src.src_len, self.config.d_model);
        if dec_ids.len() != b * tgt_len || tgt_len == 0 {
            return Err(Error::Shape {
                op: "decode",
                lhs: vec![b, tgt_len],
                rhs: vec![dec_ids.len()],
            });
        }
        let dec_pad: Vec<bool> = dec_ids.iter().map(|&t| t == PAD).collect();
        let self_masks: Vec<AttentionMaskMatrix> = dec_pad
            .chunks(tgt_len)
            .map(causal_padded_mask)
            .collect();
        let cross_masks: Vec<AttentionMaskMatrix>;
        let layouts: Vec<DocLayout>;
        let cross = if self.config.hier_dec {
            layouts = (0..b)
                .map(|i| DocLayout::from_doc_index(src.row(&src.doc_index, i), src.row(&src.pad_mask, i)))
                .collect();
            Scoring::DocScaled(&layouts)
        } else {
            cross_masks = (0..b)
                .map(|i| {
                    let pad = src.row(&src.pad_mask, i);
                    AttentionMaskMatrix::from_fn(tgt_len, k, |_, key| !pad[key])
                })
                .collect();
            Scoring::Masked(&cross_masks)
        };
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..tgt_len).collect();
        let mut y = self.embed(
            tape,
            vars.tok_emb,
            vars.dec_pos,
            &vars.dec_emb_ln,
            dec_ids,
            &positions,
            [b, tgt_len, d],
        )?;
        y = dropout.apply(tape, y);
        for layer in &vars.dec {
            let s = self.attention(tape, &layer.self_attn, y, y, Scoring::Masked(&self_masks))?;
            y = self.residual_norm(tape, y, s.out, &layer.self_ln, dropout)?;
            let scoring = match &cross {
                Scoring::Masked(m) => Scoring::Masked(m),
                Scoring::DocScaled(l) => Scoring::DocScaled(l),
            };
            let c = self.attention(tape, &layer.cross, y, enc, scoring)?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.decoder_cross.push(c.weights);
                cap.cross_scores.push(c.scores);
            }
            y = self.residual_norm(tape, y, c.out, &layer.cross_ln, dropout)?;
            let f = self.feed_forward(tape, &layer.ff, y)?;
            y = self.residual_norm(tape, y, f, &layer.ff_ln, dropout)?;
        }
        // output projection tied to the token embedding
        tape.matmul_nt(y, vars.tok_emb)
    }

    /// Mean teacher-forced cross-entropy over non-PAD labels.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &MultiDocBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let logits = self.logits(tape, vars, batch, dropout)?;
        let v = self.config.vocab_size;
        let flat = tape.reshape(logits, vec![batch.labels.len(), v])?;
        tape.cross_entropy(flat, &batch.labels, PAD)
    }

    /// Teacher-forced logits `[B, T, V]`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &MultiDocBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let enc = self.encode(tape, vars, &batch.source, dropout, None)?;
        self.decode(
            tape,
            vars,
            enc,
            &batch.source,
            &batch.decoder_input_ids,
            batch.tgt_len,
            dropout,
            None,
        )
    }

    /// Loss value and one gradient tensor per parameter (in store order).
    pub fn loss_and_grads(
        &self,
        batch: &MultiDocBatch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let mut dropout = Dropout::new(self.config.dropout, dropout_rng);
        let loss = self.forward_train(&mut tape, &vars, batch, &mut dropout)?;
        tape.backward(loss)?;
        let value = tape.value(loss).item();
        let grads = vars
            .all
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        Ok((value, grads))
    }

    /// Loss without building gradients.
    pub fn loss(&self, batch: &MultiDocBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let loss = self.forward_train(&mut tape, &vars, batch, &mut Dropout::off())?;
        Ok(tape.value(loss).item())
    }

    /// Teacher-forced token accuracy counts `(correct, total)` over non-PAD labels.
    pub fn token_accuracy(&self, batch: &MultiDocBatch) -> Result<(usize, usize)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let logits = self.logits(&mut tape, &vars, batch, &mut Dropout::off())?;
        let v = self.config.vocab_size;
        let data = tape.value(logits).data();
        let mut correct = 0;
        let mut total = 0;
        for (r, &label) in batch.labels.iter().enumerate() {
            if label == PAD {
                continue;
            }
            total += 1;
            if argmax(&data[r * v..(r + 1) * v]) == label {
                correct += 1;
            }
        }
        Ok((correct, total))
    }

    /// Encoder pass without gradients.
    pub fn encode_states(&self, src: &SourceBatch) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut cap = AttentionCapture::default();
        let enc = self.encode(&mut tape, &vars, src, &mut Dropout::off(), Some(&mut cap))?;
        Ok(EncoderOutput {
            states: tape.value(enc).clone(),
            self_attention: cap
                .encoder_self
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
        })
    }

    /// Runs the decoder over each row's prefix (all prefixes equally long,
    /// starting with SOD) and returns next-token logits plus the
    /// cross-attention of the newest position.
    pub fn decode_step(
        &self,
        enc: &EncoderOutput,
        src: &SourceBatch,
        prev_tokens: &[Vec<usize>],
    ) -> Result<StepOutput> {
        let b = src.batch_size;
        let t = prev_tokens.first().map_or(0, Vec::len);
        if prev_tokens.len() != b || t == 0 || prev_tokens.iter().any(|p| p.len() != t) {
            return Err(Error::Validation(
                "decode_step needs one non-empty prefix of equal length per batch row".into(),
            ));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let enc_var = tape.constant(enc.states.clone());
        let ids: Vec<usize> = prev_tokens.iter().flatten().copied().collect();
        let mut cap = AttentionCapture::default();
        let logits = self.decode(
            &mut tape,
            &vars,
            enc_var,
            src,
            &ids,
            t,
            &mut Dropout::off(),
            Some(&mut cap),
        )?;
        let v = self.config.vocab_size;
        let k = src.src_len;
        let h = self.config.n_heads;
        let ld = tape.value(logits).data();
        let logits = (0..b)
            .map(|i| ld[(i * t + t - 1) * v..(i * t + t) * v].to_vec())
            .collect();
        // weights are [B, H, T, K]; pick the last query of every head
        let last_rows = |var: Var| -> Vec<Vec<Vec<f64>>> {
            let data = tape.value(var).data();
            (0..b)
                .map(|i| {
                    (0..h)
                        .map(|hh| {
                            let row = ((i * h + hh) * t + t - 1) * k;
                            data[row..row + k].to_vec()
                        })
                        .collect()
                })
                .collect()
        };
        let per_layer_w: Vec<_> = cap.decoder_cross.iter().map(|&w| last_rows(w)).collect();
        let per_layer_s: Vec<_> = cap.cross_scores.iter().map(|&s| last_rows(s)).collect();
        let cross_weights = (0..b)
            .map(|i| per_layer_w.iter().map(|l| l[i].clone()).collect())
            .collect();
        let doc_attention = if self.config.hier_dec {
            (0..b)
                .map(|i| {
                    let layout = DocLayout::from_doc_index(
                        src.row(&src.doc_index, i),
                        src.row(&src.pad_mask, i),
                    );
                    per_layer_s
                        .iter()
                        .map(|l| {
                            l[i].iter()
                                .map(|raw| DocScaledCrossAttention::compute(raw, &layout))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(StepOutput {
            logits,
            cross_weights,
            doc_attention,
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
