//! Whitespace-token vocabulary with fixed special ids.

use std::collections::BTreeMap;

use crate::model::{BOS, EOS, PAD, UNK};

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Bidirectional token map. Ids 0-3 are always PAD, BOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }
}

/// Collect tokens with frequency >= `min_freq`, ordered by descending
/// frequency then ascending token, after the four specials.
pub fn build_vocab<'a>(lines: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Vocab {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for line in lines {
        for token in line.split_whitespace() {
            *freq.entry(token).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> =
        freq.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut id_to_token: Vec<String> =
        [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN].iter().map(|s| s.to_string()).collect();
    id_to_token.extend(entries.iter().map(|(t, _)| t.to_string()));
    let token_to_id =
        id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    Vocab { token_to_id, id_to_token }
}

/// Whitespace-tokenize and map to ids; unknown tokens become UNK.
pub fn encode_line(text: &str, vocab: &Vocab) -> Vec<usize> {
    text.split_whitespace().map(|t| vocab.id(t)).collect()
}

/// Render ids back to text. PAD/BOS/EOS are dropped; UNK renders as its
/// token string.
pub fn decode_ids(ids: &[usize], vocab: &Vocab) -> String {
    let tokens: Vec<&str> = ids
        .iter()
        .filter(|&&id| id != PAD && id != BOS && id != EOS)
        .map(|&id| vocab.token(id))
        .collect();
    tokens.join(" ")
}
