//! Whitespace + punctuation tokenizer for observation text.

/// Lowercases and splits on whitespace; every ASCII punctuation character
/// becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() && ch != '\'' && ch != '-' && ch != '$' {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Splits an action string on whitespace (the action tokenizer).
pub fn action_tokens(action: &str) -> Vec<String> {
    action.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Canonical form of an action: lowercase, single spaces.
pub fn normalize_action(action: &str) -> String {
    action_tokens(action).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(
            tokenize("You put on the razor-like gloves."),
            vec!["you", "put", "on", "the", "razor-like", "gloves", "."]
        );
        assert_eq!(tokenize("Taken.  Dropped!"), vec!["taken", ".", "dropped", "!"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn action_normalization() {
        assert_eq!(normalize_action("  Take   Wire "), "take wire");
        assert_eq!(action_tokens("put multi in glasses").len(), 4);
    }
}
