//! Text normalization shared by corpus validation and tokenization.
//!
//! Normalized text is lowercase, Unicode NFC, with every run of whitespace
//! collapsed to one ASCII space and no leading or trailing whitespace.
//! Diacritics are preserved: `ñ` and `á` carry meaning in Spanish lyrics.

use unicode_normalization::UnicodeNormalization;

/// Lowercase, NFC-compose and collapse whitespace.
pub fn normalize(text: &str) -> String {
    let composed: String = text.nfc().collect();
    let lowered = composed.to_lowercase();
    // Lowercasing can decompose (e.g. `İ`), so compose again.
    let lowered: String = lowered.nfc().collect();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// True when `phrase` occurs in `lyrics` after both are normalized.
pub fn contains_normalized(lyrics: &str, phrase: &str) -> bool {
    let phrase = normalize(phrase);
    !phrase.is_empty() && normalize(lyrics).contains(&phrase)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapses_and_lowercases() {
        assert_eq!(normalize("  Te  VO'A\n\tdar "), "te vo'a dar");
    }

    #[test]
    fn composes_decomposed_accents() {
        // "n" + combining tilde
        let decomposed = "Man\u{0303}ana";
        assert_eq!(normalize(decomposed), "mañana");
        assert_eq!(normalize("MAÑANA"), "mañana");
    }

    #[test]
    fn containment_ignores_spacing_and_case() {
        assert!(contains_normalized("Dame  BELLAQUEO\nya", "dame bellaqueo"));
        assert!(!contains_normalized("dame perreo", "bellaqueo"));
        assert!(!contains_normalized("anything", "   "));
    }
}
