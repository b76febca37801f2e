//! Model configuration and the ablation switches.

use crate::data::BatchConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    /// Rows of each learned position table; longer inputs index the table
    /// repeatedly copied end to end.
    pub max_positions: usize,
    pub src_trunc: usize,
    pub tgt_trunc: usize,
    /// Prepend a start-of-document token to every document.
    pub use_sod: bool,
    /// Hierarchical self-attention mask in the encoder.
    pub hier_enc: bool,
    /// Document-scaled cross-attention in the decoder.
    pub hier_dec: bool,
    /// Restart position ids at every document.
    pub pos_restart: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            vocab_size: 64,
            max_positions: 64,
            src_trunc: 64,
            tgt_trunc: 32,
            use_sod: true,
            hier_enc: true,
            hier_dec: true,
            pos_restart: true,
            dropout: 0.0,
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("src_trunc", self.src_trunc),
            ("tgt_trunc", self.tgt_trunc),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.hier_enc || self.hier_dec) && !self.use_sod {
            return Err(Error::Config(
                "hier_enc and hier_dec require use_sod".into(),
            ));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must cover the reserved tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Largest position id (exclusive) the copied position tables can serve.
    pub fn effective_positions(&self) -> usize {
        let longest = self.src_trunc.max(self.tgt_trunc);
        longest.div_ceil(self.max_positions) * self.max_positions
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            use_sod: self.use_sod,
            pos_restart: self.pos_restart,
            src_trunc: self.src_trunc,
            tgt_trunc: self.tgt_trunc,
        }
    }

    /// Closed-form parameter count.
    ///
    /// With `d = d_model`, `f = d_ff`, `V = vocab_size`, `P = max_positions`:
    /// an attention block has `4(d² + d)`, a layer norm `2d`, a feed-forward
    /// block `2df + f + d`. The output projection is tied to the token
    /// embedding, so the total is
    ///
    /// ```text
    /// Vd + 2(Pd + 2d) + L_enc(4d² + 4d + 2df + f + d + 4d)
    ///                 + L_dec(8d² + 8d + 2df + f + d + 6d)
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let attn = 4 * (d * d + d);
        let ln = 2 * d;
        let ff = 2 * d * f + f + d;
        self.vocab_size * d
            + 2 * (self.max_positions * d + ln)
            + self.n_enc_layers * (attn + ff + 2 * ln)
            + self.n_dec_layers * (2 * attn + ff + 3 * ln)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("d_model", self.d_model);
        kv.set("n_heads", self.n_heads);
        kv.set("d_ff", self.d_ff);
        kv.set("n_enc_layers", self.n_enc_layers);
        kv.set("n_dec_layers", self.n_dec_layers);
        kv.set("vocab_size", self.vocab_size);
        kv.set("max_positions", self.max_positions);
        kv.set("src_trunc", self.src_trunc);
        kv.set("tgt_trunc", self.tgt_trunc);
        kv.set("use_sod", self.use_sod);
        kv.set("hier_enc", self.hier_enc);
        kv.set("hier_dec", self.hier_dec);
        kv.set("pos_restart", self.pos_restart);
        kv.set("dropout", self.dropout);
        kv
    }

    /// Reads known keys over `base`; unknown keys are ignored.
    pub fn from_kv(kv: &KvMap, base: &ModelConfig) -> Result<Self> {
        Ok(ModelConfig {
            d_model: kv.get_or("d_model", base.d_model)?,
            n_heads: kv.get_or("n_heads", base.n_heads)?,
            d_ff: kv.get_or("d_ff", base.d_ff)?,
            n_enc_layers: kv.get_or("n_enc_layers", base.n_enc_layers)?,
            n_dec_layers: kv.get_or("n_dec_layers", base.n_dec_layers)?,
            vocab_size: kv.get_or("vocab_size", base.vocab_size)?,
            max_positions: kv.get_or("max_positions", base.max_positions)?,
            src_trunc: kv.get_or("src_trunc", base.src_trunc)?,
            tgt_trunc: kv.get_or("tgt_trunc", base.tgt_trunc)?,
            use_sod: kv.get_or("use_sod", base.use_sod)?,
            hier_enc: kv.get_or("hier_enc", base.hier_enc)?,
            hier_dec: kv.get_or("hier_dec", base.hier_dec)?,
            pos_restart: kv.get_or("pos_restart", base.pos_restart)?,
            dropout: kv.get_or("dropout", base.dropout)?,
        })
    }

    /// Same config with the four ablation switches replaced.
    pub fn with_flags(&self, use_sod: bool, hier_enc: bool, hier_dec: bool, pos_restart: bool) -> Self {
        ModelConfig {
            use_sod,
            hier_enc,
            hier_dec,
            pos_restart,
            ..self.clone()
        }
    }
}
