mod common;

use proptest::prelude::*;

use common::corpus::{corpus, malformations, BASES};
use stl_core::rationale::{
    extract_answer, parse_caption_free, parse_negative, parse_positive, AnswerMatch,
    NegativeRationale, ParseMode, PositiveRationale,
};

/// Section text that cannot be mistaken for a marker: no `#`, no `:`.
fn body() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ,.()'\n-]{1,80}"
        .prop_map(|s| s.trim().to_string())
        .prop_filter("non-empty", |s| !s.is_empty())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn positive_round_trip(caption in body(), reasoning in body(), conclusion in body()) {
        let r = PositiveRationale {
            caption: Some(caption),
            reasoning,
            conclusion_raw: conclusion,
            prediction: None,
        };
        for mode in [ParseMode::Strict, ParseMode::Lenient] {
            prop_assert_eq!(&parse_positive(&r.to_response(), mode).unwrap(), &r);
        }
    }

    #[test]
    fn caption_free_round_trip(reasoning in body(), conclusion in body()) {
        let r = PositiveRationale { caption: None, reasoning, conclusion_raw: conclusion, prediction: None };
        for mode in [ParseMode::Strict, ParseMode::Lenient] {
            prop_assert_eq!(&parse_caption_free(&r.to_response(), mode).unwrap(), &r);
        }
    }

    #[test]
    fn negative_round_trip(caption in body(), explanation in body()) {
        let r = NegativeRationale { caption, explanation };
        for mode in [ParseMode::Strict, ParseMode::Lenient] {
            prop_assert_eq!(&parse_negative(&r.to_response(), mode).unwrap(), &r);
        }
    }

    #[test]
    fn letter_answers_resolve(n in 2usize..8, pick in 0usize..8) {
        let pick = pick % n;
        let choices: Vec<String> = (0..n).map(|i| format!("option number {i}")).collect();
        let letter = (b'A' + pick as u8) as char;
        prop_assert_eq!(extract_answer(&format!("({letter})"), &choices), AnswerMatch::Index(pick));
        prop_assert_eq!(
            extract_answer(&format!("The correct choice is ({letter}) option number {pick}."), &choices),
            AnswerMatch::Index(pick)
        );
    }
}

#[test]
fn lenient_accepts_everything_strict_accepts() {
    let corpus = corpus();
    assert_eq!(corpus.len(), 50);
    let mut strict_ok = 0;
    let mut lenient_ok = 0;
    for text in &corpus {
        let strict = parse_positive(text, ParseMode::Strict);
        let lenient = parse_positive(text, ParseMode::Lenient);
        if let Ok(s) = &strict {
            strict_ok += 1;
            assert_eq!(lenient.as_ref().ok(), Some(s), "{text}");
        }
        lenient_ok += lenient.is_ok() as usize;
    }
    // Strict takes the exact-marker shapes (prose prefix, loose whitespace).
    assert_eq!(strict_ok, 10);
    // Lenient also takes case, bold, `##`, bare labels, reordering and
    // duplicates. Missing and empty sections stay rejected.
    assert_eq!(lenient_ok, 40);
}

#[test]
fn lenient_recovers_the_same_fields() {
    for (c, r, k) in BASES {
        for text in &malformations(c, r, k)[..5] {
            let p = parse_positive(text, ParseMode::Lenient).unwrap();
            assert_eq!(p.caption.as_deref(), Some(c), "{text}");
            assert_eq!(p.reasoning, r, "{text}");
            assert_eq!(p.conclusion_raw, k, "{text}");
        }
    }
}
