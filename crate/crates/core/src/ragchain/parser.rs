//! Output parser applied to raw model text.

/// Trims, removes any echoed primer prefix (repeatedly), and collapses runs
/// of more than two blank lines down to two. Idempotent.
pub fn sanitize(raw: &str, primer: Option<&str>) -> String {
    let mut text = raw.trim();
    if let Some(primer) = primer.map(str::trim).filter(|p| !p.is_empty()) {
        while let Some(rest) = text.strip_prefix(primer) {
            text = rest.trim_start();
        }
    }
    collapse_blank_lines(text).trim().to_string()
}

fn collapse_blank_lines(text: &str) -> String {
    let mut out: Vec<&str> = Vec::new();
    let mut blank_run = 0usize;
    for line in text.split('\n') {
        if line.trim().is_empty() {
            blank_run += 1;
            if blank_run <= 2 {
                out.push("");
            }
        } else {
            blank_run = 0;
            out.push(line);
        }
    }
    out.join("\n")
}

/// [`sanitize`], rejecting an empty result.
pub fn parse_output(raw: &str, primer: Option<&str>) -> Option<String> {
    let parsed = sanitize(raw, primer);
    (!parsed.is_empty()).then_some(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stepwise_example() {
        // trim -> "Answer." ; nothing left to collapse.
        assert_eq!(sanitize("  \n\nAnswer.\n\n\n\n", None), "Answer.");
    }

    #[test]
    fn strips_echoed_primer() {
        let primer = "Summary of the sources:";
        assert_eq!(
            sanitize("Summary of the sources: Cars are safe [1].", Some(primer)),
            "Cars are safe [1]."
        );
        assert_eq!(
            sanitize("Summary of the sources:\nSummary of the sources: x", Some(primer)),
            "x"
        );
        assert_eq!(sanitize("No echo here.", Some(primer)), "No echo here.");
    }

    #[test]
    fn collapses_long_blank_runs() {
        assert_eq!(sanitize("a\n\n\n\n\nb", None), "a\n\n\nb");
        assert_eq!(sanitize("a\n\nb", None), "a\n\nb");
        assert_eq!(sanitize("a\n \n\t\n  \n \nb", None), "a\n\n\nb");
    }

    #[test]
    fn empty_rejected() {
        assert_eq!(parse_output("  \n ", None), None);
        assert_eq!(parse_output("Primer:", Some("Primer:")), None);
    }

    proptest! {
        #[test]
        fn idempotent(raw in "[ \\nab:P]{0,40}", use_primer in any::<bool>()) {
            let primer = use_primer.then_some("P:");
            let once = sanitize(&raw, primer);
            prop_assert_eq!(sanitize(&once, primer), once);
        }
    }
}
