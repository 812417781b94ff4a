//! Delay-coordinate check that each observed stream determines the hidden
//! state: a nearest-neighbour regressor from delay vectors to the hidden
//! state should explain almost all of its variance.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Rows `l >= (dim - 1) * lag` of `[L, d]` become
/// `[x[l], x[l - lag], ..., x[l - (dim - 1) lag]]`, giving `[L', dim * d]`.
pub fn delay_embedding(series: ArrayView2<'_, f64>, dim: usize, lag: usize) -> Result<Array2<f64>> {
    let (len, d) = series.dim();
    let span = (dim.saturating_sub(1)) * lag;
    if dim == 0 || lag == 0 || span >= len {
        return Err(Error::Config(format!(
            "delay embedding dim {dim} lag {lag} does not fit a length-{len} series"
        )));
    }
    let rows = len - span;
    let mut out = Array2::zeros((rows, dim * d));
    for r in 0..rows {
        let l = r + span;
        for j in 0..dim {
            out.slice_mut(s![r, j * d..(j + 1) * d])
                .assign(&series.row(l - j * lag));
        }
    }
    Ok(out)
}

/// Brute-force k-nearest-neighbour mean regression.
pub fn knn_predict(train_x: &Array2<f64>, train_y: &Array2<f64>, query: &Array2<f64>, k: usize) -> Array2<f64> {
    let k = k.min(train_x.nrows()).max(1);
    let mut out = Array2::zeros((query.nrows(), train_y.ncols()));
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train_x.nrows());
    for (qi, q) in query.outer_iter().enumerate() {
        dist.clear();
        for (ti, t) in train_x.outer_iter().enumerate() {
            let d2: f64 = q.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.push((d2, ti));
        }
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
        let mut row = out.row_mut(qi);
        for &(_, ti) in &dist[..k] {
            row += &train_y.row(ti);
        }
        row /= k as f64;
    }
    out
}

/// Coefficient of determination pooled over all target columns, each
/// measured against its own mean.
pub fn r_squared(truth: &Array2<f64>, pred: &Array2<f64>) -> f64 {
    let mean = truth.mean_axis(Axis(0)).unwrap();
    let sse: f64 = (truth - pred).iter().map(|v| v * v).sum();
    let sst: f64 = (truth - &mean).iter().map(|v| v * v).sum();
    1.0 - sse / sst
}

/// Held-out R² of predicting the hidden state from delay vectors of one
/// observed stream. Sequences with index `i % 5 == 4` form the test set.
pub fn delay_embedding_r2(
    observed: &[Array2<f64>],
    hidden: &[Array2<f64>],
    dim: usize,
    lag: usize,
    k: usize,
) -> Result<f64> {
    if observed.len() != hidden.len() || observed.len() < 5 {
        return Err(Error::Data(format!(
            "need >= 5 matched sequences, got {} observed / {} hidden",
            observed.len(),
            hidden.len()
        )));
    }
    let span = (dim - 1) * lag;
    let mut parts: [(Vec<Array2<f64>>, Vec<Array2<f64>>); 2] = Default::default();
    for (i, (o, h)) in observed.iter().zip(hidden).enumerate() {
        let emb = delay_embedding(o.view(), dim, lag)?;
        let target = h.slice(s![span.., ..]).to_owned();
        let side = usize::from(i % 5 == 4);
        parts[side].0.push(emb);
        parts[side].1.push(target);
    }
    let cat = |v: &[Array2<f64>]| {
        let views: Vec<_> = v.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Data(e.to_string()))
    };
    let (train_x, train_y) = (cat(&parts[0].0)?, cat(&parts[0].1)?);
    let (test_x, test_y) = (cat(&parts[1].0)?, cat(&parts[1].1)?);
    let pred = knn_predict(&train_x, &train_y, &test_x, k);
    Ok(r_squared(&test_y, &pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn embedding_layout() {
        let x = array![[0.0, 10.0], [1.0, 11.0], [2.0, 12.0], [3.0, 13.0], [4.0, 14.0]];
        let e = delay_embedding(x.view(), 3, 2).unwrap();
        assert_eq!(e, array![[4.0, 14.0, 2.0, 12.0, 0.0, 10.0]]);
        assert!(delay_embedding(x.view(), 4, 2).is_err());
    }

    #[test]
    fn knn_recovers_exact_copies() {
        let x = array![[0.0], [1.0], [2.0]];
        let y = array![[5.0], [6.0], [7.0]];
        assert_eq!(knn_predict(&x, &y, &array![[1.1]], 1), array![[6.0]]);
        assert_eq!(r_squared(&y, &y), 1.0);
    }
}
