//! Edit distance over prompt strings.

/// Unit-cost Levenshtein distance (insert/delete/substitute) over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }

    // single rolling row over the shorter string
    let (long, short) = if a.len() >= b.len() { (&a, &b) } else { (&b, &a) };
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, &cl) in long.iter().enumerate() {
        let mut prev_diag = row[0];
        row[0] = i + 1;
        for (j, &cs) in short.iter().enumerate() {
            let sub = prev_diag + usize::from(cl != cs);
            prev_diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(prev_diag + 1);
        }
    }
    row[short.len()]
}

/// Levenshtein distance divided by max(len(a), len(b), 1); always in [0, 1].
pub fn normalized_levenshtein(a: &str, b: &str) -> f64 {
    let denom = a.chars().count().max(b.chars().count()).max(1);
    levenshtein(a, b) as f64 / denom as f64
}
