//! Token ids shared by every synthetic task.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const COPY: usize = 4;
pub const ADD: usize = 5;
pub const MAP: usize = 6;
pub const SUM: usize = 7;
pub const PLUS: usize = 8;
pub const EQ: usize = 9;
pub const DIGIT0: usize = 10;
const LETTER0: usize = 20;
pub const N_LETTERS: usize = 26;
/// Smallest vocabulary that holds every id above.
pub const VOCAB_LEN: usize = LETTER0 + N_LETTERS;

pub fn digit(d: usize) -> usize {
    assert!(d < 10, "digit {d}");
    DIGIT0 + d
}

pub fn digit_value(token: usize) -> Option<usize> {
    (DIGIT0..DIGIT0 + 10).contains(&token).then(|| token - DIGIT0)
}

pub fn letter(i: usize) -> usize {
    assert!(i < N_LETTERS, "letter {i}");
    LETTER0 + i
}

pub fn letter_index(token: usize) -> Option<usize> {
    (LETTER0..VOCAB_LEN).contains(&token).then(|| token - LETTER0)
}

/// Human-readable rendering, for reports and debugging.
pub fn describe(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| match t {
            PAD => "<pad>".to_string(),
            BOS => "<s>".to_string(),
            EOS => "</s>".to_string(),
            SEP => "|".to_string(),
            COPY => "copy:".to_string(),
            ADD => "add:".to_string(),
            MAP => "map:".to_string(),
            SUM => "sum:".to_string(),
            PLUS => "+".to_string(),
            EQ => "=".to_string(),
            _ => match (digit_value(t), letter_index(t)) {
                (Some(d), _) => d.to_string(),
                (_, Some(l)) => char::from(b'a' + l as u8).to_string(),
                _ => format!("<{t}>"),
            },
        })
        .collect::<Vec<_>>()
        .join(" ")
}
