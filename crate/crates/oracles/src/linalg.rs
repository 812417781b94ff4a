//! Dense linear algebra on nested vectors.

pub type Mat = Vec<Vec<f64>>;

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for k in 0..b.len() {
            for j in 0..m {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Gauss-Jordan with partial pivoting.
pub fn mat_inv(a: &Mat) -> Mat {
    let n = a.len();
    let mut aug: Mat = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| f64::from(i == j)));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r][col];
                for c in 0..2 * n {
                    aug[r][c] -= f * aug[col][c];
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Denman-Beavers iteration for the principal square root of a matrix with
/// positive real spectrum (here the non-symmetric product of two covariances).
pub fn sqrtm(a: &Mat) -> Mat {
    let n = a.len();
    let mut y = a.clone();
    let mut z: Mat = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for _ in 0..100 {
        let yi = mat_inv(&y);
        let zi = mat_inv(&z);
        let ny: Mat = (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect())
            .collect();
        let nz: Mat = (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect())
            .collect();
        let delta: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (ny[i][j] - y[i][j]).abs())
            .sum();
        y = ny;
        z = nz;
        if delta < 1e-14 {
            break;
        }
    }
    y
}

pub fn moments(x: &Mat) -> (Vec<f64>, Mat) {
    let n = x.len() as f64;
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in x {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    (mean, cov)
}

pub fn fid(a: &Mat, b: &Mat) -> f64 {
    let (m1, s1) = moments(a);
    let (m2, s2) = moments(b);
    let root = sqrtm(&mat_mul(&s1, &s2));
    let d = m1.len();
    let shift: f64 = (0..d).map(|i| (m1[i] - m2[i]).powi(2)).sum();
    let tr: f64 = (0..d).map(|i| s1[i][i] + s2[i][i] - 2.0 * root[i][i]).sum();
    shift + tr
}
