use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Accessory, Build, IdentityParams, Pattern, TextSample};

/// Bumped whenever the word list changes; stored with every corpus.
pub const VOCAB_VERSION: u32 = 1;

pub const PAD_ID: u32 = 0;

/// Longest description the template can produce, in words.
pub const MAX_WORDS: usize = 10;

/// Colour names for twelve equal hue bins starting at red.
pub const COLOR_WORDS: [&str; 12] = [
    "red", "orange", "yellow", "lime", "green", "mint", "cyan", "azure", "blue", "violet", "magenta", "rose",
];

const FIXED_WORDS: [&str; 15] = [
    "<pad>",
    "a",
    "person",
    "in",
    "clothing",
    "with",
    "no",
    "accessories",
    "backpack",
    "hat",
    "slim",
    "medium",
    "broad",
    "plain",
    "striped",
];

pub fn vocabulary() -> Vec<String> {
    FIXED_WORDS.iter().chain(COLOR_WORDS.iter()).map(|w| String::from(*w)).collect()
}

pub fn color_word(hue: f64) -> &'static str {
    let bin = (crate::math::frac(hue) * 12.0) as usize;
    COLOR_WORDS[bin.min(11)]
}

/// Attribute-template description of an identity.
pub fn describe(p: &IdentityParams) -> String {
    let build = match p.build {
        Build::Slim => "slim",
        Build::Medium => "medium",
        Build::Broad => "broad",
    };
    let pattern = match p.pattern {
        Pattern::Plain => "plain",
        Pattern::Striped => "striped",
    };
    let accessory = match p.accessory {
        Accessory::None => "no accessories",
        Accessory::Backpack => "a backpack",
        Accessory::Hat => "a hat",
    };
    format!("a {build} person in {} {pattern} clothing with {accessory}", color_word(p.hue))
}

/// Whitespace tokenization against `vocab`, right-padded to `len`.
/// Unknown words and overflow are dropped, never mapped to padding.
pub fn encode_text(raw: &str, vocab: &[String], len: usize) -> TextSample {
    let mut ids: Vec<u32> = raw
        .split_whitespace()
        .filter_map(|w| vocab.iter().position(|v| v == w).map(|i| i as u32))
        .filter(|&i| i != PAD_ID)
        .take(len)
        .collect();
    ids.resize(len, PAD_ID);
    TextSample { token_ids: ids, raw_text: String::from(raw) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_small_and_unique() {
        let v = vocabulary();
        assert!(v.len() <= 64);
        for (i, w) in v.iter().enumerate() {
            assert_eq!(v.iter().position(|x| x == w), Some(i));
        }
        assert_eq!(v[PAD_ID as usize], "<pad>");
    }

    #[test]
    fn longest_description_fits() {
        let p = IdentityParams {
            hue: 0.3,
            build: Build::Medium,
            accessory: Accessory::None,
            pattern: Pattern::Striped,
            texture_seed: 0,
        };
        let s = describe(&p);
        assert_eq!(s.split_whitespace().count(), MAX_WORDS);
        let t = encode_text(&s, &vocabulary(), 16);
        assert_eq!(t.valid_len(), MAX_WORDS);
        assert_eq!(t.token_ids.len(), 16);
    }
}
