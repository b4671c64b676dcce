//! Ten hand-built samples and their per-field tallies.

use cofact::data::RawSample;
use cofact::features::FEATURE_DIM;

pub const CORPUS: [[&str; 4]; 10] = [
    ["Go @a http://b.c now!", "", "", ""],
    ["the of and", "", "", ""],
    ["", "", "", ""],
    ["Breaking: 3 dead in www.news.com report", "The mayor said it was 100% false.", "SALE 50% OFF", ""],
    ["@john_doe @ not a mention, is it?", "See https://t.co/xyz and http://a.b/c?d=1", "", "2024-01-05"],
    ["Café prices rose 12.5% in 2023 😂", "They're not the same!!!", "", ""],
    ["", "", "WARNING!!! Do NOT share", "Official statement: the video is fake."],
    ["a b c d e f g", "I am what I am", "", "  spaced   out  text  "],
    ["Is this real? #fake @user1 @user2", "No. It is staged; see @factcheck's thread.", "RT @bot: lol", "www.example.org"],
    ["Tab\tseparated\nlines here", "Numbers 1 2 3 4 5", "123abc", "..."],
];

/// Tallied per field in the order claim text, doc text, claim OCR, doc OCR:
/// words, chars, stopwords, mentions, URLs, total token chars, digits,
/// punctuation.
pub const TALLY: [[[u32; 8]; 4]; 10] = [
    [[4, 21, 1, 1, 1, 18, 0, 1], [0; 8], [0; 8], [0; 8]],
    [[3, 10, 3, 0, 0, 8, 0, 0], [0; 8], [0; 8], [0; 8]],
    [[0; 8], [0; 8], [0; 8], [0; 8]],
    [[6, 39, 1, 0, 1, 34, 1, 1], [7, 33, 3, 0, 0, 27, 3, 2], [3, 12, 1, 0, 0, 10, 2, 1], [0; 8]],
    [[7, 33, 4, 1, 0, 27, 0, 3], [4, 41, 1, 0, 2, 38, 0, 0], [0; 8], [1, 10, 0, 0, 0, 10, 8, 2]],
    [[7, 32, 1, 0, 0, 26, 7, 2], [4, 23, 3, 0, 0, 20, 0, 4], [0; 8], [0; 8]],
    [[0; 8], [0; 8], [4, 23, 2, 0, 0, 20, 0, 3], [6, 38, 2, 0, 0, 33, 0, 2]],
    [[7, 13, 2, 0, 0, 7, 0, 0], [5, 14, 5, 0, 0, 10, 0, 0], [0; 8], [3, 22, 1, 0, 0, 13, 0, 0]],
    [[6, 33, 2, 2, 0, 28, 0, 2], [7, 42, 3, 1, 0, 36, 0, 3], [3, 12, 0, 1, 0, 10, 0, 0], [1, 15, 0, 0, 1, 15, 0, 0]],
    [[4, 24, 1, 0, 0, 21, 0, 0], [6, 17, 0, 0, 0, 12, 5, 0], [1, 6, 0, 0, 0, 6, 3, 0], [1, 3, 0, 0, 0, 3, 0, 3]],
];

pub fn sample(id: usize, f: [&str; 4]) -> RawSample {
    RawSample {
        claim_text: f[0].into(),
        doc_text: f[1].into(),
        claim_ocr: f[2].into(),
        doc_ocr: f[3].into(),
        ..RawSample::empty(format!("s{id}"))
    }
}

pub fn corpus() -> Vec<RawSample> {
    CORPUS.iter().enumerate().map(|(i, f)| sample(i, *f)).collect()
}

pub fn expected_raw(tally: &[[u32; 8]; 4]) -> [f64; FEATURE_DIM] {
    let mut out = [0.0; FEATURE_DIM];
    for (f, t) in tally.iter().enumerate() {
        let row = &mut out[f * 8..(f + 1) * 8];
        for k in [0, 1, 2, 3, 4, 6, 7] {
            row[k] = t[k] as f64;
        }
        row[5] = if t[0] == 0 { 0.0 } else { t[5] as f64 / t[0] as f64 };
    }
    out
}
