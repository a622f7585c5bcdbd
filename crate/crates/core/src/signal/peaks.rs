//! Local-extremum detection with prominence and distance constraints.

/// Prominence of the peak at `i`: height above the higher of the two minima
/// separating it from the nearest higher sample on either side (or the
/// signal edge).
fn prominence(x: &[f64], i: usize) -> f64 {
    let h = x[i];
    let mut left_min = h;
    for j in (0..i).rev() {
        if x[j] > h {
            break;
        }
        left_min = left_min.min(x[j]);
    }
    let mut right_min = h;
    for &v in &x[i + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Indices of local maxima at least `min_distance` samples apart with
/// prominence `>= min_prominence`. Plateaus report their first sample.
/// Where two candidates are too close, the taller one wins (earlier on ties).
pub fn find_peaks(x: &[f64], min_distance: usize, min_prominence: f64) -> Vec<usize> {
    let n = x.len();
    if n < 3 {
        return Vec::new();
    }
    let mut cand = Vec::new();
    let mut i = 1;
    while i < n - 1 {
        if x[i] > x[i - 1] {
            let mut j = i;
            while j + 1 < n && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < n && x[j + 1] < x[i] {
                cand.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    cand.retain(|&p| prominence(x, p) >= min_prominence);
    if min_distance <= 1 {
        return cand;
    }
    let mut order: Vec<usize> = (0..cand.len()).collect();
    order.sort_by(|&a, &b| x[cand[b]].total_cmp(&x[cand[a]]).then(a.cmp(&b)));
    let mut keep = vec![true; cand.len()];
    for &k in &order {
        if !keep[k] {
            continue;
        }
        let p = cand[k];
        for (m, &q) in cand.iter().enumerate() {
            if m != k && keep[m] && q.abs_diff(p) < min_distance {
                keep[m] = false;
            }
        }
    }
    cand.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect()
}

/// Local minima, found as peaks of the negated signal.
pub fn find_valleys(x: &[f64], min_distance: usize, min_prominence: f64) -> Vec<usize> {
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    find_peaks(&neg, min_distance, min_prominence)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prominence_filters_ripples() {
        let x = [0.0, 5.0, 4.8, 4.9, 0.0, 3.0, 0.0];
        assert_eq!(find_peaks(&x, 1, 0.0), vec![1, 3, 5]);
        assert_eq!(find_peaks(&x, 1, 1.0), vec![1, 5]);
    }

    #[test]
    fn distance_keeps_tallest() {
        let x = [0.0, 2.0, 0.0, 3.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(find_peaks(&x, 3, 0.0), vec![3, 7]);
    }

    #[test]
    fn plateau_and_edges() {
        let x = [1.0, 2.0, 2.0, 2.0, 1.0, 3.0];
        assert_eq!(find_peaks(&x, 1, 0.0), vec![1]);
        assert_eq!(find_valleys(&[3.0, 1.0, 3.0, 0.0, 2.0], 1, 0.0), vec![1, 3]);
    }
}
