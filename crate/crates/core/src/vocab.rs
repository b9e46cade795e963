//! Token layout of the synthetic lookup language: reserved control tokens,
//! then key, value and filler ranges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Control tokens. Ids are fixed and precede every content range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedTokens {
    pub eos: usize,
    pub answer: usize,
    pub repeat: usize,
    pub fim_pre: usize,
    pub fim_suf: usize,
    pub fim_mid: usize,
    pub unanswerable: usize,
}

impl ReservedTokens {
    pub const COUNT: usize = 7;

    pub const fn standard() -> Self {
        Self {
            eos: 0,
            answer: 1,
            repeat: 2,
            fim_pre: 3,
            fim_suf: 4,
            fim_mid: 5,
            unanswerable: 6,
        }
    }

    /// Answer sequence used for questions the context cannot answer.
    pub fn unanswerable_answer(&self) -> Vec<usize> {
        vec![self.unanswerable]
    }

    fn names(&self) -> [(usize, &'static str); Self::COUNT] {
        [
            (self.eos, "<eos>"),
            (self.answer, "<answer>"),
            (self.repeat, "<repeat>"),
            (self.fim_pre, "<fim_pre>"),
            (self.fim_suf, "<fim_suf>"),
            (self.fim_mid, "<fim_mid>"),
            (self.unanswerable, "UNANSWERABLE"),
        ]
    }
}

impl Default for ReservedTokens {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_keys: usize,
    pub n_values: usize,
    pub n_filler: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Reserved,
    Key,
    Value,
    Filler,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            n_keys: 32,
            n_values: 32,
            n_filler: 64,
        }
    }
}

impl Vocab {
    pub fn reserved(&self) -> ReservedTokens {
        ReservedTokens::standard()
    }

    pub fn size(&self) -> usize {
        ReservedTokens::COUNT + self.n_keys + self.n_values + self.n_filler
    }

    pub fn key(&self, i: usize) -> usize {
        debug_assert!(i < self.n_keys);
        ReservedTokens::COUNT + i
    }

    pub fn value(&self, i: usize) -> usize {
        debug_assert!(i < self.n_values);
        ReservedTokens::COUNT + self.n_keys + i
    }

    pub fn filler(&self, i: usize) -> usize {
        debug_assert!(i < self.n_filler);
        ReservedTokens::COUNT + self.n_keys + self.n_values + i
    }

    /// First id of the content (non-reserved) range.
    pub fn content_start(&self) -> usize {
        ReservedTokens::COUNT
    }

    pub fn class(&self, id: usize) -> Option<TokenClass> {
        let r = ReservedTokens::COUNT;
        let k = r + self.n_keys;
        let v = k + self.n_values;
        let f = v + self.n_filler;
        match id {
            _ if id < r => Some(TokenClass::Reserved),
            _ if id < k => Some(TokenClass::Key),
            _ if id < v => Some(TokenClass::Value),
            _ if id < f => Some(TokenClass::Filler),
            _ => None,
        }
    }

    pub fn token_str(&self, id: usize) -> Result<String> {
        let r = ReservedTokens::COUNT;
        match self.class(id) {
            Some(TokenClass::Reserved) => Ok(self
                .reserved()
                .names()
                .iter()
                .find(|(i, _)| *i == id)
                .map(|(_, n)| n.to_string())
                .expect("reserved ids are contiguous")),
            Some(TokenClass::Key) => Ok(format!("k{}", id - r)),
            Some(TokenClass::Value) => Ok(format!("v{}", id - r - self.n_keys)),
            Some(TokenClass::Filler) => Ok(format!("w{}", id - r - self.n_keys - self.n_values)),
            None => Err(Error::Range(format!("token id {id} outside vocabulary of {}", self.size()))),
        }
    }

    pub fn parse_token(&self, s: &str) -> Result<usize> {
        if let Some((id, _)) = self.reserved().names().iter().find(|(_, n)| *n == s) {
            return Ok(*id);
        }
        let bad = || Error::Range(format!("unknown token {s:?}"));
        let (prefix, rest) = s.split_at(s.char_indices().nth(1).map_or(s.len(), |(i, _)| i));
        let idx: usize = rest.parse().map_err(|_| bad())?;
        if rest.starts_with('+') || (rest.len() > 1 && rest.starts_with('0')) {
            return Err(bad());
        }
        match prefix {
            "k" if idx < self.n_keys => Ok(self.key(idx)),
            "v" if idx < self.n_values => Ok(self.value(idx)),
            "w" if idx < self.n_filler => Ok(self.filler(idx)),
            _ => Err(bad()),
        }
    }

    pub fn render(&self, ids: &[usize]) -> Result<String> {
        let parts = ids.iter().map(|i| self.token_str(*i)).collect::<Result<Vec<_>>>()?;
        Ok(parts.join(" "))
    }

    pub fn parse(&self, s: &str) -> Result<Vec<usize>> {
        s.split_whitespace().map(|t| self.parse_token(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let v = Vocab::default();
        let ids: Vec<usize> = (0..v.size()).collect();
        let s = v.render(&ids).unwrap();
        assert_eq!(v.parse(&s).unwrap(), ids);
    }

    #[test]
    fn rejects_unknown_tokens() {
        let v = Vocab::default();
        for bad in ["k32", "x1", "v", "k01", "k+1", "", "<bos>"] {
            assert!(v.parse_token(bad).is_err(), "{bad}");
        }
        assert!(v.token_str(v.size()).is_err());
    }

    #[test]
    fn reserved_disjoint_from_content() {
        let v = Vocab::default();
        let r = v.reserved();
        for id in [r.eos, r.answer, r.repeat, r.fim_pre, r.fim_suf, r.fim_mid, r.unanswerable] {
            assert_eq!(v.class(id), Some(TokenClass::Reserved));
        }
        assert_eq!(v.class(v.key(0)), Some(TokenClass::Key));
        assert_eq!(v.class(v.filler(v.n_filler - 1)), Some(TokenClass::Filler));
    }
}
