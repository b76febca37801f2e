//! Experiment files and the component ablation grid.
//!
//! An experiment file is flat `key=value` text. Recognized keys:
//!
//! * model: every [`ModelConfig`] field (`vocab_size` is taken from the
//!   vocabulary and may be omitted)
//! * training: every [`TrainConfig`] field
//! * generation: `gen_max_length`, `gen_min_length`
//! * data: either `train_data` and `eval_data` (JSONL paths) or the
//!   generator keys `data_seed`, `eval_seed`, `train_count`, `eval_count`,
//!   `n_docs_min`, `n_docs_max`, `facts_min`, `facts_max`, `n_keys`,
//!   `n_values`; plus `vocab_min_freq`
//! * `out_dir`

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::{gen_synthetic, load_jsonl, MultiDocExample, RawExample, SyntheticSpec};
use crate::decode::GenerationConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::train::{train_loop, EvalRecord, TrainConfig, Trainer};
use crate::vocab::{Vocabulary, EOS};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Synthetic {
        train: SyntheticSpec,
        eval: SyntheticSpec,
    },
    Files {
        train: PathBuf,
        eval: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub data: DataSpec,
    pub vocab_min_freq: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenerationConfig,
    pub out_dir: PathBuf,
}

const DATA_KEYS: [&str; 14] = [
    "train_data",
    "eval_data",
    "data_seed",
    "eval_seed",
    "train_count",
    "eval_count",
    "n_docs_min",
    "n_docs_max",
    "facts_min",
    "facts_max",
    "n_keys",
    "n_values",
    "vocab_min_freq",
    "out_dir",
];

const GEN_KEYS: [&str; 2] = ["gen_max_length", "gen_min_length"];

impl ExperimentSpec {
    /// Builds a spec over defaults. Unknown keys and invalid combinations are
    /// configuration errors.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let model_keys = ModelConfig::default().to_kv();
        let mut train_keys = TrainConfig::default().to_kv();
        train_keys.set("checkpoint_path", "");
        for key in kv.keys() {
            let known = model_keys.contains(key)
                || train_keys.contains(key)
                || DATA_KEYS.contains(&key)
                || GEN_KEYS.contains(&key);
            if !known {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        let model = ModelConfig::from_kv(kv, &ModelConfig::default())?;
        model.validate()?;
        let train = TrainConfig::from_kv(kv, &TrainConfig::default())?;
        train.validate()?;
        let gen = GenerationConfig {
            max_length: kv.get_or("gen_max_length", model.tgt_trunc)?,
            min_length: kv.get_or("gen_min_length", 1)?,
            stop_token: EOS,
        };
        gen.validate(model.tgt_trunc)?;
        let data = match (kv.get::<PathBuf>("train_data")?, kv.get::<PathBuf>("eval_data")?) {
            (Some(train), Some(eval)) => DataSpec::Files { train, eval },
            (None, None) => {
                let base = SyntheticSpec::default();
                let train = SyntheticSpec {
                    seed: kv.get_or("data_seed", base.seed)?,
                    count: kv.get_or("train_count", base.count)?,
                    n_docs: (
                        kv.get_or("n_docs_min", base.n_docs.0)?,
                        kv.get_or("n_docs_max", base.n_docs.1)?,
                    ),
                    facts_per_doc: (
                        kv.get_or("facts_min", base.facts_per_doc.0)?,
                        kv.get_or("facts_max", base.facts_per_doc.1)?,
                    ),
                    n_keys: kv.get_or("n_keys", base.n_keys)?,
                    n_values: kv.get_or("n_values", base.n_values)?,
                };
                train.validate()?;
                let eval = SyntheticSpec {
                    seed: kv.get_or("eval_seed", train.seed.wrapping_add(1))?,
                    count: kv.get_or("eval_count", 100)?,
                    ..train.clone()
                };
                if eval.seed == train.seed {
                    return Err(Error::Config("eval_seed must differ from data_seed".into()));
                }
                DataSpec::Synthetic { train, eval }
            }
            _ => {
                return Err(Error::Config(
                    "train_data and eval_data must be given together".into(),
                ))
            }
        };
        Ok(ExperimentSpec {
            data,
            vocab_min_freq: kv.get_or("vocab_min_freq", 1)?,
            model,
            train,
            gen,
            out_dir: kv.get_or("out_dir", PathBuf::from("runs"))?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&KvMap::parse(&text)?)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.model.to_kv();
        kv.merge(&self.train.to_kv());
        kv.set("gen_max_length", self.gen.max_length);
        kv.set("gen_min_length", self.gen.min_length);
        kv.set("vocab_min_freq", self.vocab_min_freq);
        kv.set("out_dir", self.out_dir.display());
        match &self.data {
            DataSpec::Files { train, eval } => {
                kv.set("train_data", train.display());
                kv.set("eval_data", eval.display());
            }
            DataSpec::Synthetic { train, eval } => {
                kv.set("data_seed", train.seed);
                kv.set("eval_seed", eval.seed);
                kv.set("train_count", train.count);
                kv.set("eval_count", eval.count);
                kv.set("n_docs_min", train.n_docs.0);
                kv.set("n_docs_max", train.n_docs.1);
                kv.set("facts_min", train.facts_per_doc.0);
                kv.set("facts_max", train.facts_per_doc.1);
                kv.set("n_keys", train.n_keys);
                kv.set("n_values", train.n_values);
            }
        }
        kv
    }

    /// Reads or generates the raw splits.
    pub fn raw_data(&self) -> Result<(Vec<RawExample>, Vec<RawExample>)> {
        match &self.data {
            DataSpec::Synthetic { train, eval } => Ok((
                gen_synthetic(train.clone())?.collect(),
                gen_synthetic(eval.clone())?.collect(),
            )),
            DataSpec::Files { train, eval } => Ok((load_jsonl(train)?, load_jsonl(eval)?)),
        }
    }

    /// Vocabulary from the training split, encoded splits, and the model
    /// config with `vocab_size` set from the vocabulary.
    pub fn prepare(&self) -> Result<Prepared> {
        let (train_raw, eval_raw) = self.raw_data()?;
        if train_raw.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        let vocab = Vocabulary::build(&train_raw, self.vocab_min_freq)?;
        let encode = |xs: &[RawExample]| {
            xs.iter()
                .map(|r| MultiDocExample::encode(r, &vocab))
                .collect::<Vec<_>>()
        };
        let model = ModelConfig {
            vocab_size: vocab.len(),
            ..self.model.clone()
        };
        model.validate()?;
        Ok(Prepared {
            train: encode(&train_raw),
            eval: encode(&eval_raw),
            vocab,
            model,
        })
    }
}

pub struct Prepared {
    pub vocab: Vocabulary,
    pub train: Vec<MultiDocExample>,
    pub eval: Vec<MultiDocExample>,
    pub model: ModelConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AblationRow {
    pub row: usize,
    pub name: &'static str,
    pub use_sod: bool,
    pub hier_enc: bool,
    pub hier_dec: bool,
    pub pos_restart: bool,
}

const fn row(
    row: usize,
    name: &'static str,
    use_sod: bool,
    hier_enc: bool,
    hier_dec: bool,
    pos_restart: bool,
) -> AblationRow {
    AblationRow {
        row,
        name,
        use_sod,
        hier_enc,
        hier_dec,
        pos_restart,
    }
}

/// The six component subsets, full model first.
pub const ABLATION_GRID: [AblationRow; 6] = [
    row(0, "full", true, true, true, true),
    row(1, "-posres", true, true, true, false),
    row(2, "-HierDec", true, true, false, true),
    row(3, "-HierDec -posres", true, true, false, false),
    row(4, "<s> only", true, false, false, false),
    row(5, "baseline", false, false, false, false),
];

impl AblationRow {
    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let cfg = base.with_flags(self.use_sod, self.hier_enc, self.hier_dec, self.pos_restart);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub first_loss: f64,
    pub final_loss: f64,
    pub eval: EvalRecord,
}

/// Trains one grid row from scratch with the spec's seed and data.
pub fn run_row(
    spec: &ExperimentSpec,
    data: &Prepared,
    row: &AblationRow,
    log: Option<&mut dyn Write>,
) -> Result<(Trainer, AblationResult)> {
    let cfg = row.apply(&data.model)?;
    let (trainer, report) = train_loop(cfg, &data.train, &data.eval, spec.train.clone(), &spec.gen, log)?;
    let eval = report
        .evals
        .last()
        .cloned()
        .ok_or_else(|| Error::Validation("evaluation split is empty".into()))?;
    let first_loss = report.steps.first().map_or(f64::NAN, |s| s.loss);
    let final_loss = report.steps.last().map_or(f64::NAN, |s| s.loss);
    Ok((
        trainer,
        AblationResult {
            row: *row,
            first_loss,
            final_loss,
            eval,
        },
    ))
}

/// Tab-separated table of every row's metrics and its difference to row 0.
pub fn delta_table(results: &[AblationResult]) -> Result<String> {
    let base = results
        .iter()
        .find(|r| r.row.row == 0)
        .ok_or_else(|| Error::Validation("delta table needs the full-model row".into()))?;
    let mark = |b: bool| if b { "x" } else { "-" };
    let mut out = String::from(
        "row\tname\tsod\thier_enc\thier_dec\tpos_restart\teval_loss\ttoken_accuracy\texact_match\trouge1\trouge2\trougeL\td_eval_loss\td_token_accuracy\td_exact_match\td_rouge1\td_rouge2\td_rougeL\n",
    );
    for r in results {
        let e = &r.eval;
        let b = &base.eval;
        let vals = [
            e.eval_loss,
            e.token_accuracy,
            e.exact_match,
            e.rouge.rouge1.f1,
            e.rouge.rouge2.f1,
            e.rouge.rouge_l.f1,
        ];
        let refs = [
            b.eval_loss,
            b.token_accuracy,
            b.exact_match,
            b.rouge.rouge1.f1,
            b.rouge.rouge2.f1,
            b.rouge.rouge_l.f1,
        ];
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.row.row,
            r.row.name,
            mark(r.row.use_sod),
            mark(r.row.hier_enc),
            mark(r.row.hier_dec),
            mark(r.row.pos_restart)
        ));
        for v in vals {
            out.push_str(&format!("\t{v:.4}"));
        }
        for (v, b) in vals.iter().zip(refs) {
            out.push_str(&format!("\t{:+.4}", v - b));
        }
        out.push('\n');
    }
    Ok(out)
}
