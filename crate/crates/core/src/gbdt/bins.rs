/// Candidate split thresholds for one feature.
///
/// Thresholds are midpoints between adjacent distinct values. When there
/// are more gaps than `bins - 1`, the gaps nearest to evenly spaced
/// quantile ranks are kept. Output is strictly increasing.
pub fn quantile_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < 2 {
        return Vec::new();
    }
    let midpoint = |p: usize| distinct[p - 1] + (distinct[p] - distinct[p - 1]) / 2.0;
    let max_edges = bins - 1;
    if distinct.len() - 1 <= max_edges {
        return (1..distinct.len()).map(midpoint).collect();
    }
    let n = sorted.len();
    let mut edges: Vec<f64> = Vec::with_capacity(max_edges);
    for j in 1..bins {
        let v = sorted[j * n / bins];
        // first distinct value >= v; split just below it
        let p = distinct.partition_point(|d| *d < v);
        if p == 0 {
            continue;
        }
        let e = midpoint(p);
        if edges.last().is_none_or(|&last| e > last) {
            edges.push(e);
        }
    }
    edges
}

/// Number of edges strictly below `x`; `x > edges[t]` iff the result is `> t`.
#[inline]
pub fn bin_index(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|e| *e < x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn few_distinct_values_use_all_midpoints() {
        assert_eq!(quantile_edges(&[3.0, 1.0, 2.0, 2.0], 255), vec![1.5, 2.5]);
        assert!(quantile_edges(&[4.0, 4.0], 255).is_empty());
    }

    #[test]
    fn many_values_are_capped() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let e = quantile_edges(&v, 16);
        assert!(e.len() <= 15 && e.len() >= 14);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bin_index_matches_threshold_rule() {
        let edges = [1.5, 2.5];
        for x in [0.0, 1.5, 1.6, 2.5, 3.0] {
            let b = bin_index(&edges, x);
            for (t, e) in edges.iter().enumerate() {
                assert_eq!(b > t, x > *e);
            }
        }
    }
}
