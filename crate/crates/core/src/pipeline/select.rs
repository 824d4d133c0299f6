use crate::error::{Error, Result};
use crate::geometry::farthest_point_sample;

/// Distinct Fibonacci numbers up to 987: `1, 2, 3, 5, …, 987`.
pub fn fibonacci_counts() -> Vec<usize> {
    let (mut a, mut b) = (1usize, 1usize);
    let mut out = Vec::new();
    while a <= 987 {
        if out.last() != Some(&a) {
            out.push(a);
        }
        (a, b) = (b, a + b);
    }
    out
}

/// Index of the expression with the smallest norm (ties to the lowest index).
pub fn neutral_index(expressions: &[Vec<f64>]) -> Option<usize> {
    let norm = |g: &Vec<f64>| g.iter().map(|x| x * x).sum::<f64>();
    (0..expressions.len()).min_by(|&a, &b| norm(&expressions[a]).total_cmp(&norm(&expressions[b])))
}

/// Frame subsets for each count, clipped to the number of frames. Subsets are
/// prefixes of one farthest-point ordering seeded at the most neutral
/// expression, so smaller selections are contained in larger ones.
pub fn select_frames(expressions: &[Vec<f64>], counts: &[usize]) -> Result<Vec<Vec<usize>>> {
    let seed = neutral_index(expressions).ok_or_else(|| Error::invalid("no frames to select from"))?;
    let n = expressions.len();
    let max = counts.iter().map(|&c| c.min(n)).max().unwrap_or(0);
    let order = farthest_point_sample(expressions, max, seed)?;
    Ok(counts.iter().map(|&c| order[..c.min(n)].to_vec()).collect())
}
