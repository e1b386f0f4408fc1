//! Paired significance test for per-seed comparisons.

use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub t: f64,
    pub df: f64,
    /// P(T >= t) under the null, i.e. evidence that `a` exceeds `b`.
    pub p_greater: f64,
    pub p_two_sided: f64,
}

/// Paired t-test on `a[i] - b[i]`. Needs at least two pairs.
///
/// Zero variance gives `t = ±inf` (p 0 or 1) for a nonzero mean difference
/// and `p = 1` when every difference is zero.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Option<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        let (t, p_greater, p_two) = match mean.partial_cmp(&0.0)? {
            std::cmp::Ordering::Greater => (f64::INFINITY, 0.0, 0.0),
            std::cmp::Ordering::Less => (f64::NEG_INFINITY, 1.0, 0.0),
            std::cmp::Ordering::Equal => (0.0, 1.0, 1.0),
        };
        return Some(PairedTest {
            mean_diff: mean,
            t,
            df,
            p_greater,
            p_two_sided: p_two,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some(PairedTest {
        mean_diff: mean,
        t,
        df,
        p_greater: dist.sf(t),
        p_two_sided: 2.0 * dist.sf(t.abs()),
    })
}
