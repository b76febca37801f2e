//! Whitespace-token vocabulary with four reserved ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::RawExample;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOD: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const SOD_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

const RESERVED: [&str; 4] = [PAD_TOKEN, SOD_TOKEN, EOS_TOKEN, UNK_TOKEN];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts whitespace tokens over every document and summary, keeps those
    /// seen at least `min_freq` times, and orders them by descending frequency
    /// with lexicographic tie-break after the reserved ids.
    pub fn build<'a, I>(corpus: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a RawExample>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen_any = false;
        for ex in corpus {
            seen_any = true;
            for text in ex.documents.iter().chain(std::iter::once(&ex.summary)) {
                for tok in text.split_whitespace() {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if !seen_any {
            return Err(Error::Validation("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_freq.max(1) && !RESERVED.contains(tok))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
                .collect(),
        )
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Validation(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Renders every id, specials included, joined by single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Renders generated ids as text: stops at EOS and drops PAD and SOD.
    pub fn decode_summary(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != SOD)
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One `token<TAB>id` line per entry, sorted by id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected `token<TAB>id`".into(),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Parse {
                line: n + 1,
                message: format!("bad id `{id}`"),
            })?;
            if id != tokens.len() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("ids must be dense and sorted, found {id}"),
                });
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
