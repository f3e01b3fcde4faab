//! Small numeric helpers shared across modules.

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max subtraction, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax returning a fresh vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// log softmax(logits)[index], computed without forming the full softmax.
pub fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln() + mx;
    logits[index] - lse
}

/// Entropy of a probability vector in nats; 0·ln 0 taken as 0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Exact ceiling of m·n where m ∈ [0,1] is first rounded to 12 decimal
/// places. Rounding plus integer arithmetic keeps the result stable against
/// platform floating-point differences (cos(π/2) is 6e-17, not 0).
pub fn ceil_ratio_count(m: f64, n: usize) -> usize {
    const SCALE: i128 = 1_000_000_000_000;
    let scaled = (m * SCALE as f64).round() as i128;
    let scaled = scaled.clamp(0, SCALE);
    let num = scaled * n as i128;
    ((num + SCALE - 1) / SCALE) as usize
}

/// Standard Gumbel draw: −ln(−ln u), u ∈ (0,1).
pub fn gumbel<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}
