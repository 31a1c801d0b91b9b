//! Token estimation and context budgeting.

/// Heuristic token count: `ceil(bytes / 4) + ceil(words / 2)`, where words are
/// maximal runs of non-whitespace. Monotone non-decreasing under appending.
pub fn estimate_tokens(text: &str) -> usize {
    let bytes = text.len();
    let words = text.split_whitespace().count();
    bytes.div_ceil(4) + words.div_ceil(2)
}

/// Longest prefix of `text`, cut on a char boundary, whose estimate stays
/// within `max_tokens`.
pub fn truncate_to_tokens(text: &str, max_tokens: usize) -> &str {
    if estimate_tokens(text) <= max_tokens {
        return text;
    }
    let cut = longest_prefix_within(text, |prefix| estimate_tokens(prefix) <= max_tokens);
    &text[..cut]
}

/// Binary search over char boundaries for the largest `n` with
/// `fits(&text[..n])`, assuming `fits` is monotone (true then false).
pub(crate) fn longest_prefix_within(text: &str, mut fits: impl FnMut(&str) -> bool) -> usize {
    let boundaries: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect();
    // boundaries[0] == 0; find last index whose prefix fits.
    let (mut lo, mut hi) = (0usize, boundaries.len() - 1);
    if !fits(&text[..boundaries[lo]]) {
        return 0;
    }
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(&text[..boundaries[mid]]) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    boundaries[lo]
}
