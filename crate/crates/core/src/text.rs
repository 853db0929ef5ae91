//! Small text utilities shared across pipeline stages.

/// Returns the last `n` lines of `text`, preserving original line breaks.
pub fn tail_lines(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let start = lines.len().saturating_sub(n);
    lines[start..].join("\n")
}

/// Truncates `text` to at most `head_bytes` leading and `tail_bytes`
/// trailing bytes, splicing in an omission marker. Cuts land on char
/// boundaries, so the result is always valid UTF-8. Text within budget is
/// returned unchanged.
pub fn truncate_middle(text: &str, head_bytes: usize, tail_bytes: usize) -> String {
    if text.len() <= head_bytes + tail_bytes {
        return text.to_string();
    }
    let mut head_end = head_bytes.min(text.len());
    while !text.is_char_boundary(head_end) {
        head_end -= 1;
    }
    let mut tail_start = text.len() - tail_bytes.min(text.len());
    while !text.is_char_boundary(tail_start) {
        tail_start += 1;
    }
    let omitted = tail_start - head_end;
    format!(
        "{}\n... [{} bytes omitted] ...\n{}",
        &text[..head_end],
        omitted,
        &text[tail_start..]
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_lines_returns_suffix() {
        let text = "a\nb\nc\nd";
        assert_eq!(tail_lines(text, 2), "c\nd");
        assert_eq!(tail_lines(text, 10), "a\nb\nc\nd");
        assert_eq!(tail_lines("", 5), "");
    }

    #[test]
    fn truncate_within_budget_is_identity() {
        assert_eq!(truncate_middle("short", 10, 10), "short");
    }

    #[test]
    fn truncate_keeps_head_and_tail() {
        let text = "H".repeat(100) + &"T".repeat(100);
        let out = truncate_middle(&text, 10, 10);
        assert!(out.starts_with("HHHHHHHHHH\n"));
        assert!(out.ends_with("\nTTTTTTTTTT"));
        assert!(out.contains("[180 bytes omitted]"));
    }

    #[test]
    fn truncate_respects_char_boundaries() {
        let text = "é".repeat(200);
        let out = truncate_middle(&text, 15, 15);
        assert!(out.contains("bytes omitted"));
        // Would panic on a bad boundary; also ensure the pieces are intact.
        assert!(out.starts_with('é'));
        assert!(out.ends_with('é'));
    }
}
