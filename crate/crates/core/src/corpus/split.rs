/// Default cap on sub-captions per sample.
pub const DEFAULT_MAX_SUBCAPTIONS: usize = 8;

/// Splits a caption into sentences at `.`, `!` or `?` followed by whitespace
/// or end of text. Segments beyond `n_max` are merged into the last one, and a
/// caption with no surviving segment comes back whole.
pub fn split_subcaptions(raw: &str, n_max: usize) -> Vec<String> {
    let n_max = n_max.max(1);
    let mut segments: Vec<String> = Vec::new();
    let mut start = 0;
    let mut chars = raw.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars.peek().is_none_or(|(_, next)| next.is_whitespace());
            if at_boundary {
                let end = i + c.len_utf8();
                push_trimmed(&mut segments, &raw[start..end]);
                start = end;
            }
        }
    }
    push_trimmed(&mut segments, &raw[start..]);

    if segments.is_empty() {
        return vec![raw.to_owned()];
    }
    if segments.len() > n_max {
        let tail = segments.split_off(n_max - 1).join(" ");
        segments.push(tail);
    }
    segments
}

fn push_trimmed(segments: &mut Vec<String>, s: &str) {
    let t = s.trim();
    if !t.is_empty() {
        segments.push(t.to_owned());
    }
}
