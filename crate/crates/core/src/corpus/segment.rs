use crate::error::{MorpheusError, Result};

/// Splits persona text into segments at every `.`; segments are trimmed and
/// empty ones dropped.
pub fn split_persona(persona_text: &str) -> Vec<String> {
    persona_text
        .split('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Truncates or pads `segments` to exactly `m` entries. Padding uses the
/// empty segment, which the persona encoder maps to its null vector.
pub fn fit_segments(segments: &[String], m: usize) -> Result<Vec<String>> {
    if m == 0 {
        return Err(MorpheusError::InvalidArgument(
            "segment count M must be at least 1".into(),
        ));
    }
    let mut out: Vec<String> = segments.iter().take(m).cloned().collect();
    out.resize(m, String::new());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn splits_on_periods() {
        assert_eq!(
            split_persona("I enjoy hiking. I'm a bank teller."),
            strs(&["I enjoy hiking", "I'm a bank teller"])
        );
        assert!(split_persona("").is_empty());
        assert_eq!(split_persona("a.b..c."), strs(&["a", "b", "c"]));
    }

    #[test]
    fn fit_truncates_pads_and_keeps() {
        assert_eq!(fit_segments(&strs(&["a", "b", "c"]), 2).unwrap(), strs(&["a", "b"]));
        assert_eq!(fit_segments(&strs(&["a"]), 3).unwrap(), strs(&["a", "", ""]));
        assert_eq!(fit_segments(&strs(&["a", "b"]), 2).unwrap(), strs(&["a", "b"]));
        assert!(fit_segments(&strs(&["a"]), 0).is_err());
    }

    proptest! {
        #[test]
        fn no_segment_contains_a_period(text in "[a-z .]{0,40}") {
            for seg in split_persona(&text) {
                prop_assert!(!seg.contains('.'));
                prop_assert!(!seg.is_empty());
            }
        }

        #[test]
        fn fitted_length_is_exact(n in 0usize..10, m in 1usize..8) {
            let segs: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let fitted = fit_segments(&segs, m).unwrap();
            prop_assert_eq!(fitted.len(), m);
            for (a, b) in fitted.iter().zip(segs.iter()) {
                prop_assert_eq!(a, b);
            }
        }
    }
}
