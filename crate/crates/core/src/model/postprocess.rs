use crate::error::{Error, Result};

pub const DEFAULT_MEDIAN_WINDOW: usize = 5;

/// Sliding median over a per-frame sequence, applied to each component
/// independently, with edge replication so the output keeps the input length.
pub fn median_filter(sequence: &[Vec<f64>], window: usize) -> Result<Vec<Vec<f64>>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "median window must be odd and positive, got {window}"
        )));
    }
    let n = sequence.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let dims = sequence[0].len();
    if sequence.iter().any(|r| r.len() != dims) {
        return Err(Error::Shape("median filter rows differ in length".into()));
    }
    let half = (window / 2) as isize;
    let mut buf = Vec::with_capacity(window);
    let mut out = vec![vec![0.0; dims]; n];
    for (t, row) in out.iter_mut().enumerate() {
        for (d, v) in row.iter_mut().enumerate() {
            buf.clear();
            for off in -half..=half {
                let idx = (t as isize + off).clamp(0, n as isize - 1) as usize;
                buf.push(sequence[idx][d]);
            }
            buf.sort_by(f64::total_cmp);
            *v = buf[buf.len() / 2];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| vec![*x]).collect()
    }

    #[test]
    fn spike_is_removed() {
        assert_eq!(median_filter(&col(&[1.0, 5.0, 1.0]), 3).unwrap(), col(&[1.0, 1.0, 1.0]));
    }

    #[test]
    fn window_one_is_identity_and_constant_unchanged() {
        let seq = vec![vec![0.3, -0.1], vec![0.9, 0.2], vec![-0.5, 0.0]];
        assert_eq!(median_filter(&seq, 1).unwrap(), seq);
        let flat = col(&[0.4; 9]);
        assert_eq!(median_filter(&flat, 5).unwrap(), flat);
    }

    #[test]
    fn edges_replicate() {
        // window 5 at t=0 sees [3, 3, 3, 1, 2]; at t=3 it sees [1, 2, 8, 8, 8]
        let out = median_filter(&col(&[3.0, 1.0, 2.0, 8.0]), 5).unwrap();
        assert_eq!(out, col(&[3.0, 3.0, 3.0, 8.0]));
        let out = median_filter(&col(&[3.0, 1.0, 2.0, 8.0]), 3).unwrap();
        assert_eq!(out, col(&[3.0, 2.0, 2.0, 8.0]));
    }

    #[test]
    fn even_window_rejected() {
        assert!(median_filter(&col(&[1.0]), 4).is_err());
        assert!(median_filter(&col(&[1.0]), 0).is_err());
    }
}
