//! Rule-based English singularization used to normalize proposed features.
//!
//! Each whitespace token is lowercased and rewritten by the first matching
//! rule (words of three letters or fewer are left alone):
//!
//! | rule | example |
//! |------|---------|
//! | irregular table | `men -> man`, `feet -> foot`, `geese -> goose`, `teeth -> tooth`, `mice -> mouse`, `children -> child` |
//! | `-ves` table | `leaves -> leaf`, `knives -> knife`, ... |
//! | `-ies` (len > 4) | `berries -> berry` |
//! | `-sses`, `-zzes`, `-xes`, `-ches`, `-shes` | drop `es`: `glasses -> glass`, `benches -> bench` |
//! | words ending `ss`, `us`, `is` | unchanged: `grass`, `cactus` |
//! | any other trailing `s` | drop `s`: `logs -> log`, `horses -> horse` |
//!
//! The rules are idempotent: a singularized token is a fixed point.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

const IRREGULAR: [(&str, &str); 6] = [
    ("men", "man"),
    ("feet", "foot"),
    ("geese", "goose"),
    ("teeth", "tooth"),
    ("mice", "mouse"),
    ("children", "child"),
];

const VES: [(&str, &str); 14] = [
    ("leaves", "leaf"),
    ("wolves", "wolf"),
    ("knives", "knife"),
    ("wives", "wife"),
    ("lives", "life"),
    ("shelves", "shelf"),
    ("halves", "half"),
    ("loaves", "loaf"),
    ("calves", "calf"),
    ("scarves", "scarf"),
    ("thieves", "thief"),
    ("hooves", "hoof"),
    ("elves", "elf"),
    ("selves", "self"),
];

/// Singularize one lowercase token.
pub fn singularize(word: &str) -> String {
    if let Some((_, s)) = IRREGULAR.iter().find(|(p, _)| *p == word) {
        return s.to_string();
    }
    if word.chars().count() <= 3 {
        return word.to_string();
    }
    if let Some((_, s)) = VES.iter().find(|(p, _)| *p == word) {
        return s.to_string();
    }
    if word.len() > 4 && word.ends_with("ies") {
        let mut s = word[..word.len() - 3].to_string();
        s.push('y');
        return s;
    }
    for suffix in ["sses", "zzes", "xes", "ches", "shes"] {
        if word.ends_with(suffix) {
            return word[..word.len() - 2].to_string();
        }
    }
    if word.ends_with("ss") || word.ends_with("us") || word.ends_with("is") {
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix('s') {
        return stem.to_string();
    }
    word.to_string()
}

fn trim_token(t: &str) -> &str {
    t.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Singularize and trim until nothing changes; stripping an `s` can expose
/// punctuation that trimming then removes.
fn lemma_token(token: &str) -> String {
    let mut cur = trim_token(token).to_string();
    loop {
        let next = trim_token(&singularize(&cur)).to_string();
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Lowercase, trim punctuation around each token, and singularize every token.
pub fn lemmatize(phrase: &str) -> String {
    let lower = phrase.to_lowercase();
    let tokens: Vec<String> =
        lower.split_whitespace().map(lemma_token).filter(|t| !t.is_empty()).collect();
    tokens.join(" ")
}

/// Lemmatized tokens of a phrase.
pub fn lemma_tokens(phrase: &str) -> Vec<String> {
    lemmatize(phrase).split_whitespace().map(ToString::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_examples() {
        assert_eq!(lemmatize("fallen logs"), "fallen log");
        assert_eq!(lemmatize("Trees"), "tree");
        assert_eq!(lemmatize("berries"), "berry");
        assert_eq!(lemmatize("leaves"), "leaf");
        assert_eq!(lemmatize("glasses"), "glass");
        assert_eq!(lemmatize("benches"), "bench");
        assert_eq!(lemmatize("boxes"), "box");
        assert_eq!(lemmatize("dishes"), "dish");
        assert_eq!(lemmatize("horses"), "horse");
        assert_eq!(lemmatize("grass"), "grass");
        assert_eq!(lemmatize("cactus"), "cactus");
        assert_eq!(lemmatize("children"), "child");
        assert_eq!(lemmatize("bus"), "bus");
        assert_eq!(lemmatize("  Pine   Trees. "), "pine tree");
    }

    proptest! {
        #[test]
        fn singularize_is_idempotent(w in "[a-z]{0,12}") {
            let once = singularize(&w);
            prop_assert_eq!(singularize(&once), once);
        }

        #[test]
        fn lemmatize_is_idempotent(p in "[A-Za-z .,]{0,30}") {
            let once = lemmatize(&p);
            prop_assert_eq!(lemmatize(&once), once);
        }
    }
}
