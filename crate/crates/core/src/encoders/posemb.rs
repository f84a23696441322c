use ndarray::{s, Array2};

use crate::error::{Error, Result};

/// Rows kept verbatim when stretching a positional table.
pub const KEEP_ROWS: usize = 20;
/// Interpolation factor for rows past [`KEEP_ROWS`].
pub const STRETCH: usize = 4;

/// Extends a positional-embedding table to `target_len` rows. The first
/// [`KEEP_ROWS`] rows are copied; row `r` beyond them is the linear
/// interpolation at source position `KEEP_ROWS + (r − KEEP_ROWS) / 4`,
/// extrapolated from the last two rows past the end. A 77-row table becomes
/// 248 rows at the natural length `20 + 4·57`.
pub fn extend_positional_embeddings(table: &Array2<f64>, target_len: usize) -> Result<Array2<f64>> {
    let src = table.nrows();
    if target_len < src {
        return Err(Error::invalid(format!(
            "target length {target_len} shorter than source {src}"
        )));
    }
    if src <= KEEP_ROWS + 1 {
        return Err(Error::invalid(format!(
            "source table needs more than {} rows",
            KEEP_ROWS + 1
        )));
    }
    let mut out = Array2::zeros((target_len, table.ncols()));
    out.slice_mut(s![..KEEP_ROWS, ..]).assign(&table.slice(s![..KEEP_ROWS, ..]));
    for r in KEEP_ROWS..target_len {
        let offset = r - KEEP_ROWS;
        let base = KEEP_ROWS + offset / STRETCH;
        let frac = (offset % STRETCH) as f64 / STRETCH as f64;
        let (lo, hi, t) = if base + 1 < src {
            (base, base + 1, frac)
        } else {
            // past the last row: extrapolate along the final segment
            (src - 2, src - 1, 1.0 + (base - (src - 1)) as f64 + frac)
        };
        let row = &table.row(lo) * (1.0 - t) + &table.row(hi) * t;
        out.row_mut(r).assign(&row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_head_rows_and_reaches_248() {
        let table = Array2::from_shape_fn((77, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 0.3 * j as f64);
        let out = extend_positional_embeddings(&table, 248).unwrap();
        assert_eq!(out.nrows(), 248);
        assert_eq!(out.slice(s![..20, ..]), table.slice(s![..20, ..]));
        // every 4th row past the head lands on a source row
        for i in 20..77 {
            assert_eq!(out.row(20 + 4 * (i - 20)), table.row(i));
        }
    }

    #[test]
    fn linear_ramp_stays_linear() {
        let table = Array2::from_shape_fn((77, 3), |(i, j)| 0.5 * i as f64 + j as f64);
        let out = extend_positional_embeddings(&table, 248).unwrap();
        for r in 21..248 {
            let step = &out.row(r) - &out.row(r - 1);
            for v in step.iter() {
                assert!((v - 0.125).abs() < 1e-12, "row {r}: step {v}");
            }
        }
    }

    #[test]
    fn shorter_target_rejected() {
        let table = Array2::zeros((77, 2));
        assert!(extend_positional_embeddings(&table, 50).is_err());
    }
}
