use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
/// Stands in for a space in character mode.
pub const SPACE_MARK: &str = "\u{2581}";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    Whitespace,
    Char,
}

impl TokenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenMode::Whitespace => "whitespace",
            TokenMode::Char => "char",
        }
    }

    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            TokenMode::Whitespace => text.split_whitespace().map(str::to_string).collect(),
            TokenMode::Char => {
                let words: Vec<&str> = text.split_whitespace().collect();
                let mut out = Vec::new();
                for (i, w) in words.iter().enumerate() {
                    if i > 0 {
                        out.push(SPACE_MARK.to_string());
                    }
                    out.extend(w.chars().map(|c| c.to_string()));
                }
                out
            }
        }
    }
}

impl FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" | "word" => Ok(TokenMode::Whitespace),
            "char" => Ok(TokenMode::Char),
            other => Err(Error::Config(vec![format!("unknown token mode {other:?}")])),
        }
    }
}

pub fn lang_tag(code: &str) -> String {
    format!("<2{code}>")
}

/// Token ↔ id map. Ids: pad, bos, eos, unk, one tag per language, then
/// corpus tokens by descending frequency (ties lexicographic).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    tags: BTreeMap<String, usize>,
    mode: TokenMode,
}

impl Vocab {
    pub fn build<S: AsRef<str>>(texts: &[S], mode: TokenMode, langs: &[String]) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in mode.tokenize(t.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(langs.iter().map(|c| lang_tag(c)));
        for (t, _) in ranked {
            if !RESERVED.contains(&t.as_str()) && !t.starts_with("<2") {
                tokens.push(t);
            }
        }
        Self::from_tokens(tokens, mode)
    }

    pub fn from_tokens(tokens: Vec<String>, mode: TokenMode) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected reserved token {r}"),
                });
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut tags = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate token {t:?}"),
                });
            }
            if let Some(code) = t.strip_prefix("<2").and_then(|r| r.strip_suffix('>')) {
                tags.insert(code.to_string(), i);
            }
        }
        Ok(Vocab {
            tokens,
            index,
            tags,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tag_id(&self, code: &str) -> Result<usize> {
        self.tags
            .get(code)
            .copied()
            .ok_or_else(|| Error::Coverage(format!("vocabulary has no tag for language {code}")))
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < RESERVED.len() || self.tags.values().any(|&t| t == id)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.mode.tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Inverse of `encode` up to unknown tokens; specials other than unk are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks = ids
            .iter()
            .filter(|&&i| i == UNK || !self.is_special(i))
            .map(|&i| self.token(i).unwrap_or("<unk>"));
        match self.mode {
            TokenMode::Whitespace => toks.collect::<Vec<_>>().join(" "),
            TokenMode::Char => toks
                .map(|t| if t == SPACE_MARK { " " } else { t })
                .collect(),
        }
    }

    /// One token per line in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str, mode: TokenMode) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect(), mode)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, mode: TokenMode) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, mode)
    }
}
