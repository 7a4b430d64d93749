//! Brute-force token-set similarity, written against the documented rules
//! rather than the library code: scan characters left to right, at each
//! position try `$$`, `\[`, `\(`, `$` in that order, and take the first
//! opener whose first matching closer is not immediately adjacent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DELIMS: [(&str, &str); 4] = [("$$", "$$"), ("\\[", "\\]"), ("\\(", "\\)"), ("$", "$")];

fn starts_with_at(chars: &[char], at: usize, pat: &str) -> bool {
    let pat: Vec<char> = pat.chars().collect();
    at + pat.len() <= chars.len() && chars[at..at + pat.len()] == pat[..]
}

fn collapse(chars: &[char]) -> String {
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    for &c in chars {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words.join(" ")
}

pub fn tokens(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out: Vec<String> = Vec::new();
    let mut plain: Vec<char> = Vec::new();
    let mut i = 0;
    'scan: while i < chars.len() {
        for (open, close) in DELIMS {
            if !starts_with_at(&chars, i, open) {
                continue;
            }
            let body = i + open.chars().count();
            let closer = (body..chars.len()).find(|&j| starts_with_at(&chars, j, close));
            if let Some(j) = closer {
                if j > body {
                    let end = j + close.chars().count();
                    out.push(collapse(&chars[i..end]));
                    plain.push(' ');
                    i = end;
                    continue 'scan;
                }
            }
        }
        plain.push(chars[i]);
        i += 1;
    }

    let mut word = String::new();
    for c in plain.into_iter().chain(std::iter::once(' ')) {
        if c.is_alphanumeric() {
            word.push(c);
        } else if !word.is_empty() {
            out.push(word.to_lowercase());
            word.clear();
        }
    }

    let mut unique: Vec<String> = Vec::new();
    for t in out {
        if !unique.contains(&t) {
            unique.push(t);
        }
    }
    unique
}

pub fn similarity(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokens(a), tokens(b));
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let mut shared = 0;
    for x in &ta {
        for y in &tb {
            if x == y {
                shared += 1;
            }
        }
    }
    shared as f64 / (ta.len() + tb.len() - shared) as f64
}

const ALPHABET: &[&str] = &[
    "a", "b", "B", "z", "0", "7", " ", "  ", "\t", "\n", "$", "$$", "\\", "(", ")", "[", "]", "-", ",",
    ".", "é", "É", "Σ", "ß", "_", "^", "{", "}", "x", "soul", "Soul", "M", "\\(", "\\)", "\\[", "\\]",
];

pub fn random_text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(0..30);
    (0..len)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())])
        .collect()
}

/// Seeded pairs; about half share a prefix so overlaps are non-trivial.
pub fn random_pairs(seed: u64, n: usize) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a = random_text(&mut rng);
            let b = if rng.random_bool(0.5) {
                let cut = a.char_indices().map(|(i, _)| i).nth(a.chars().count() / 2).unwrap_or(0);
                format!("{}{}", &a[..cut], random_text(&mut rng))
            } else {
                random_text(&mut rng)
            };
            (a, b)
        })
        .collect()
}
