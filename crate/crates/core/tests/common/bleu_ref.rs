//! Naive corpus BLEU used as an independent reference.

/// Counts by linear scan over space-joined n-grams.
fn count(sentence: &[String], gram: &str, n: usize) -> usize {
    if sentence.len() < n {
        return 0;
    }
    (0..=sentence.len() - n)
        .filter(|&i| sentence[i..i + n].join(" ") == gram)
        .count()
}

pub fn reference_bleu(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let low = |s: &Vec<String>| s.iter().map(|t| t.to_lowercase()).collect::<Vec<_>>();
    let mut clipped = [0f64; 4];
    let mut totals = [0f64; 4];
    let (mut hyp_len, mut ref_len) = (0f64, 0f64);
    for (h, rs) in hyps.iter().zip(refs) {
        let h = low(h);
        let rs: Vec<Vec<String>> = rs.iter().map(low).collect();
        hyp_len += h.len() as f64;
        let mut best = rs[0].len();
        for r in &rs {
            let d = (r.len() as i64 - h.len() as i64).abs();
            let bd = (best as i64 - h.len() as i64).abs();
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        ref_len += best as f64;
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let mut seen = Vec::new();
            for i in 0..=h.len() - n {
                let g = h[i..i + n].join(" ");
                if seen.contains(&g) {
                    continue;
                }
                let mx = rs.iter().map(|r| count(r, &g, n)).max().unwrap();
                clipped[n - 1] += count(&h, &g, n).min(mx) as f64;
                seen.push(g);
            }
            totals[n - 1] += (h.len() - n + 1) as f64;
        }
    }
    if clipped.iter().any(|&c| c == 0.0) {
        return 0.0;
    }
    let mut log = 0.0;
    for n in 0..4 {
        log += (clipped[n] / totals[n]).ln() / 4.0;
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len / hyp_len).exp() };
    100.0 * bp * log.exp()
}

