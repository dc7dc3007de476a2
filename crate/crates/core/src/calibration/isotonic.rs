//! Pool-adjacent-violators for a non-decreasing least-squares fit.

/// Non-decreasing least-squares fit to `y` (equal weights, already ordered by
/// abscissa).
pub fn isotonic_non_decreasing(y: &[f64]) -> Vec<f64> {
    // (block mean, block size)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        let mut mean = v;
        let mut size = 1usize;
        while let Some(&(prev_mean, prev_size)) = blocks.last() {
            if prev_mean <= mean {
                break;
            }
            blocks.pop();
            let total = prev_size + size;
            mean = (prev_mean * prev_size as f64 + mean * size as f64) / total as f64;
            size = total;
        }
        blocks.push((mean, size));
    }
    blocks
        .into_iter()
        .flat_map(|(mean, size)| std::iter::repeat_n(mean, size))
        .collect()
}
