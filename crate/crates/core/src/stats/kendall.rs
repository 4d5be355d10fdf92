use crate::error::{Error, Result};

/// Kendall's tau-b, `(n_c − n_d) / √((n₀ − n₁)(n₀ − n₂))`.
///
/// Computed in `O(n log n)` by sorting on `x` and counting the inversions of a
/// merge sort on `y`. Returns `None` when either series is constant, since
/// tau-b is undefined there.
///
/// ```
/// use sparseflow::stats::kendall_tau_b;
/// assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
/// assert_eq!(kendall_tau_b(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), None);
/// ```
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "kendall_tau_b",
            format!("series of length {} and {}", x.len(), y.len()),
        ));
    }
    if x.len() < 2 {
        return Err(Error::invalid("kendall_tau_b needs at least two points"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::invalid("kendall_tau_b got NaN"));
    }
    let n = x.len() as u64;
    let n0 = n * (n - 1) / 2;

    let mut pts: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut n1 = 0u64; // pairs tied in x
    let mut n3 = 0u64; // pairs tied in both
    let mut i = 0;
    while i < pts.len() {
        let mut j = i + 1;
        while j < pts.len() && pts[j].0 == pts[i].0 {
            j += 1;
        }
        n1 += pairs((j - i) as u64);
        let mut k = i;
        while k < j {
            let mut m = k + 1;
            while m < j && pts[m].1 == pts[k].1 {
                m += 1;
            }
            n3 += pairs((m - k) as u64);
            k = m;
        }
        i = j;
    }

    let mut ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = merge_count(&mut ys, &mut buf);

    let mut n2 = 0u64; // pairs tied in y
    let mut i = 0;
    while i < ys.len() {
        let mut j = i + 1;
        while j < ys.len() && ys[j] == ys[i] {
            j += 1;
        }
        n2 += pairs((j - i) as u64);
        i = j;
    }

    Ok(tau_from_counts(n0, n1, n2, n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64))
}

/// Final tau-b ratio from pair counts; shared with the pair-counting oracle in
/// tests so both routes round identically.
pub(crate) fn tau_from_counts(n0: u64, n1: u64, n2: u64, numerator: i64) -> Option<f64> {
    let denom = ((n0 - n1) as f64) * ((n0 - n2) as f64);
    if denom == 0.0 {
        return None;
    }
    Some((numerator as f64 / denom.sqrt()).clamp(-1.0, 1.0))
}

fn pairs(t: u64) -> u64 {
    t * t.saturating_sub(1) / 2
}

/// Stable merge sort of `v` ascending, returning the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Mean of `|tau_b|` over the configurations whose tau is defined, with the
/// number of configurations that contributed. `None` if none did.
///
/// ```
/// use sparseflow::stats::avg_abs_correlation;
/// let a = [1.0, 2.0, 3.0];
/// let (mean, used) = avg_abs_correlation(&[(&a[..], &a[..])]).unwrap().unwrap();
/// assert_eq!((mean, used), (1.0, 1));
/// ```
pub fn avg_abs_correlation(series: &[(&[f64], &[f64])]) -> Result<Option<(f64, usize)>> {
    let mut total = 0.0;
    let mut used = 0;
    for (measure, target) in series {
        if let Some(t) = kendall_tau_b(measure, target)? {
            total += t.abs();
            used += 1;
        }
    }
    Ok((used > 0).then(|| (total / used as f64, used)))
}
