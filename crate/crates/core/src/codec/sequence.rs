use super::template::FixedPatternTemplate;
use super::vocab::{TokenId, Vocabulary};

/// A length-`L` response: token ids where masked positions hold the mask id.
///
/// The mask flags are derived from the ids, so `masked(i) ⟺ ids[i] == mask`
/// holds by construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    mask_id: TokenId,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<TokenId>, mask_id: TokenId) -> Self {
        Self { ids, mask_id }
    }

    /// Frozen positions carry template tokens, every free position is masked.
    pub fn fresh_masked(tpl: &FixedPatternTemplate, vocab: &Vocabulary) -> Self {
        let mask = vocab.mask_id();
        let mut ids = vec![mask; tpl.len()];
        for &(pos, id) in tpl.frozen_positions() {
            ids[pos] = id;
        }
        Self { ids, mask_id: mask }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.ids[pos] == self.mask_id
    }

    pub fn masked_flags(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id == self.mask_id).collect()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids
            .iter()
            .enumerate()
            .filter(move |(_, &id)| id == self.mask_id)
            .map(|(i, _)| i)
    }

    pub fn masked_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id == self.mask_id).count()
    }

    pub fn is_fully_unmasked(&self) -> bool {
        self.ids.iter().all(|&id| id != self.mask_id)
    }

    pub fn set(&mut self, pos: usize, id: TokenId) {
        self.ids[pos] = id;
    }

    pub fn mask(&mut self, pos: usize) {
        self.ids[pos] = self.mask_id;
    }

    /// True when every frozen position holds its template token.
    pub fn conforms_to(&self, tpl: &FixedPatternTemplate) -> bool {
        self.len() == tpl.len()
            && tpl
                .frozen_positions()
                .iter()
                .all(|&(pos, id)| self.ids[pos] == id)
    }

    /// The literal fixed-pattern string; masked positions print as `_`.
    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.ids
            .iter()
            .map(|&id| {
                if id == self.mask_id {
                    "_"
                } else {
                    vocab.symbol(id).unwrap_or("?")
                }
            })
            .collect()
    }
}
