//! Loop-based reference implementations, written without the tape so that
//! they share no code path with the library.

/// Latent batch as nested vectors: `z[b][l][k]`.
pub type Seq = Vec<Vec<Vec<f64>>>;

pub fn pool_windows(z: &Seq, c: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for seq in z {
        let m = seq.len() / c;
        for i in 0..m {
            let d = seq[0].len();
            let mut acc = vec![0.0; d];
            for l in i * c..(i + 1) * c {
                for k in 0..d {
                    acc[k] += seq[l][k];
                }
            }
            for v in acc.iter_mut() {
                *v /= c as f64;
            }
            out.push(acc);
        }
    }
    out
}

fn unit(v: &[f64]) -> Vec<f64> {
    let mut n = 0.0;
    for x in v {
        n += x * x;
    }
    let n = n.sqrt() + 1e-8;
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn contrastive(zx: &Seq, zy: &Seq, c: usize, tau: f64) -> f64 {
    let ux: Vec<_> = pool_windows(zx, c).iter().map(|v| unit(v)).collect();
    let uy: Vec<_> = pool_windows(zy, c).iter().map(|v| unit(v)).collect();
    let n = ux.len();
    let mut table = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            table[i][j] = (dot(&ux[i], &uy[j]) / tau).exp();
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += table[i][j];
        }
        total -= (table[i][i] / denom).ln();
    }
    total / n as f64
}

pub fn covariance(zx: &Seq, zy: &Seq, c: usize) -> f64 {
    let window_cov = |seq: &Vec<Vec<f64>>, i: usize| {
        let d = seq[0].len();
        let mut mean = vec![0.0; d];
        for l in i * c..(i + 1) * c {
            for k in 0..d {
                mean[k] += seq[l][k] / c as f64;
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for p in 0..d {
            for q in 0..d {
                let mut s = 0.0;
                for l in i * c..(i + 1) * c {
                    s += (seq[l][p] - mean[p]) * (seq[l][q] - mean[q]);
                }
                cov[p][q] = s / (c - 1) as f64;
            }
        }
        cov
    };
    let mut total = 0.0;
    let mut count = 0;
    for b in 0..zx.len() {
        let m = zx[b].len() / c;
        for i in 0..m {
            let cx = window_cov(&zx[b], i);
            let cy = window_cov(&zy[b], i);
            let d = cx.len();
            let mut s = 0.0;
            for p in 0..d {
                for q in 0..d {
                    s += (cx[p][q] - cy[p][q]).powi(2);
                }
            }
            total += s / (d * d) as f64;
            count += 1;
        }
    }
    total / count as f64
}

pub fn nt_xent(zx: &[Vec<f64>], zy: &[Vec<f64>], tau: f64) -> f64 {
    let n = zx.len();
    let mut all: Vec<Vec<f64>> = zx.iter().map(|v| unit(v)).collect();
    all.extend(zy.iter().map(|v| unit(v)));
    let mut total = 0.0;
    for i in 0..2 * n {
        let pos = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for k in 0..2 * n {
            if k != i {
                denom += (dot(&all[i], &all[k]) / tau).exp();
            }
        }
        total -= ((dot(&all[i], &all[pos]) / tau).exp() / denom).ln();
    }
    total / (2 * n) as f64
}

fn column_stats(z: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = z.len() as f64;
    let d = z[0].len();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for k in 0..d {
        for row in z {
            mean[k] += row[k];
        }
        mean[k] /= n;
        for row in z {
            var[k] += (row[k] - mean[k]).powi(2);
        }
        var[k] /= n;
    }
    (mean, var)
}

pub fn barlow(zx: &[Vec<f64>], zy: &[Vec<f64>], lam: f64) -> f64 {
    let n = zx.len();
    let d = zx[0].len();
    let (mx, vx) = column_stats(zx);
    let (my, vy) = column_stats(zy);
    let mut loss = 0.0;
    for i in 0..d {
        for j in 0..d {
            let mut c = 0.0;
            for r in 0..n {
                let a = (zx[r][i] - mx[i]) / (vx[i] + 1e-8).sqrt();
                let b = (zy[r][j] - my[j]) / (vy[j] + 1e-8).sqrt();
                c += a * b;
            }
            c /= n as f64;
            if i == j {
                loss += (1.0 - c).powi(2);
            } else {
                loss += lam * c * c;
            }
        }
    }
    loss
}

pub fn vicreg(zx: &[Vec<f64>], zy: &[Vec<f64>], w: [f64; 3], gamma: f64) -> f64 {
    let n = zx.len();
    let d = zx[0].len();
    let mut inv = 0.0;
    for r in 0..n {
        for k in 0..d {
            inv += (zx[r][k] - zy[r][k]).powi(2);
        }
    }
    inv /= (n * d) as f64;
    let single = |z: &[Vec<f64>]| {
        let (mean, var) = column_stats(z);
        let mut v = 0.0;
        for k in 0..d {
            let std = (var[k] + 1e-8).sqrt();
            let h = gamma - std;
            if h > 0.0 {
                v += h * h;
            }
        }
        let mut c = 0.0;
        for p in 0..d {
            for q in 0..d {
                if p == q {
                    continue;
                }
                let mut s = 0.0;
                for row in z {
                    s += (row[p] - mean[p]) * (row[q] - mean[q]);
                }
                s /= n as f64;
                c += s * s;
            }
        }
        (v, c)
    };
    let (vx, cx) = single(zx);
    let (vy, cy) = single(zy);
    w[0] * inv + w[1] * (vx + vy) / 2.0 + w[2] * (cx + cy) / 2.0
}

pub fn latent_mse(zx: &Seq, zy: &Seq) -> f64 {
    let mut s = 0.0;
    let mut count = 0;
    for b in 0..zx.len() {
        for l in 0..zx[b].len() {
            for k in 0..zx[b][l].len() {
                s += (zx[b][l][k] - zy[b][l][k]).powi(2);
                count += 1;
            }
        }
    }
    s / count as f64
}

/// `0.5 (x[l+1] - x[l])^2` for every sequence, step and channel.
pub fn energy(x: &Seq) -> Vec<f64> {
    let mut out = Vec::new();
    for seq in x {
        for l in 0..seq.len() - 1 {
            for k in 0..seq[l].len() {
                out.push(0.5 * (seq[l + 1][k] - seq[l][k]).powi(2));
            }
        }
    }
    out
}

pub fn energy_loss(x0: &Seq, x0_hat: &Seq) -> f64 {
    let a = energy(x0);
    let b = energy(x0_hat);
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s / a.len() as f64
}

pub fn mse(a: &Seq, b: &Seq) -> f64 {
    latent_mse(a, b)
}
