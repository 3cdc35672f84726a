use d3r_core::density::Point;
use ndarray::Array2;

/// Repeated exhaustive argmax over the remaining candidates: every cell is
/// checked against all 8 neighbours, and every pick scans the whole map.
pub fn seed_reference(map: &Array2<f64>, k: usize, d_min: f64) -> Vec<Point> {
    let (rows, cols) = map.dim();
    let rank = |a: (usize, usize), b: (usize, usize)| map[a] > map[b] || (map[a] == map[b] && a < b);
    let mut candidates = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            if map[[i, j]] <= 0.0 {
                continue;
            }
            let mut ok = true;
            for ni in i.saturating_sub(1)..=(i + 1).min(rows - 1) {
                for nj in j.saturating_sub(1)..=(j + 1).min(cols - 1) {
                    if (ni, nj) != (i, j) && !rank((i, j), (ni, nj)) {
                        ok = false;
                    }
                }
            }
            if ok {
                candidates.push((i, j));
            }
        }
    }
    let mut taken: Vec<(usize, usize)> = Vec::new();
    while taken.len() < k && !candidates.is_empty() {
        let mut best = 0;
        for c in 1..candidates.len() {
            if rank(candidates[c], candidates[best]) {
                best = c;
            }
        }
        let c = candidates.remove(best);
        let d = |a: (usize, usize)| ((a.0 as f64 - c.0 as f64).powi(2) + (a.1 as f64 - c.1 as f64).powi(2)).sqrt();
        if taken.iter().all(|&a| d(a) >= d_min) {
            taken.push(c);
        }
    }
    taken.iter().map(|&(i, j)| Point { x: 2.0 * j as f64 + 1.0, y: 2.0 * i as f64 + 1.0 }).collect()
}
