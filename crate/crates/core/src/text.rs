//! Text normalization shared by validation and answer extraction.

/// Lowercases, trims and collapses internal whitespace runs to one space.
pub fn normalize_choice(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// [`normalize_choice`] followed by stripping trailing punctuation.
pub fn normalize_answer(s: &str) -> String {
    let mut n = normalize_choice(s);
    while n.ends_with(['.', ',', ';', ':', '!', '?']) {
        n.pop();
    }
    n.truncate(n.trim_end().len());
    n
}

/// Choice label for a 0-based index: 0 → 'A'. `None` past 'Z'.
pub fn choice_label(index: usize) -> Option<char> {
    (index < 26).then(|| (b'A' + index as u8) as char)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapses_and_lowercases() {
        assert_eq!(normalize_choice("  Buffet \t Breakfast\n"), "buffet breakfast");
    }

    #[test]
    fn strips_terminal_punctuation() {
        assert_eq!(normalize_answer("Buffet breakfast.!"), "buffet breakfast");
        assert_eq!(normalize_answer("a dog ."), "a dog");
        assert_eq!(normalize_answer("..."), "");
    }

    #[test]
    fn labels() {
        assert_eq!(choice_label(0), Some('A'));
        assert_eq!(choice_label(25), Some('Z'));
        assert_eq!(choice_label(26), None);
    }
}
