/// Approximate token count: the number of maximal non-whitespace runs.
///
/// Only used when a backend omits usage; callers mark the result approximate.
pub fn count_tokens_fallback(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basics() {
        assert_eq!(count_tokens_fallback(""), 0);
        assert_eq!(count_tokens_fallback("a b c"), 3);
        assert_eq!(count_tokens_fallback("  a\t\nb  "), 2);
    }

    proptest! {
        #[test]
        fn counts_nonspace_runs(s in "\\PC*") {
            let mut runs = 0u64;
            let mut in_run = false;
            for ch in s.chars() {
                if ch.is_whitespace() {
                    in_run = false;
                } else if !in_run {
                    in_run = true;
                    runs += 1;
                }
            }
            prop_assert_eq!(count_tokens_fallback(&s), runs);
        }
    }
}
