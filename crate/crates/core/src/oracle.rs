//! Direct-loop reference implementations.
//!
//! Each function is a literal transcription of its definition with no
//! reuse of the optimized kernels, so the self-test and the test suites can
//! compare the two routes. Inputs are single maps `[h, w, c]`.

use crate::autodiff::Collapse;
use crate::tensor::Tensor;

fn at3(t: &Tensor, i: usize, j: usize, k: usize) -> f64 {
    let s = t.shape();
    t.data()[(i * s[1] + j) * s[2] + k]
}

/// Valid convolution: `out[y][x][o] = sum_{i,j,c} in[y*s+i][x*s+j][c] * k[i][j][c][o]`,
/// summed in `(i, j, c)` order.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Tensor {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let kd = kernel.data();
    let mut out = Vec::with_capacity(oh * ow * cout);
    for y in 0..oh {
        for x in 0..ow {
            for o in 0..cout {
                let mut acc = 0.0;
                for i in 0..kh {
                    for j in 0..kw {
                        for c in 0..cin {
                            let k = kd[((i * kw + j) * cin + c) * cout + o];
                            acc += at3(input, y * stride + i, x * stride + j, c) * k;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out).expect("oracle conv output")
}

/// 2x2 max pooling; the first maximal cell in row-major window order wins.
/// Returns the pooled map and, per output cell, the flat input index of the
/// winner.
pub fn maxpool2x2(input: &Tensor) -> (Tensor, Vec<usize>) {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut out = Vec::new();
    let mut arg = Vec::new();
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for i in 0..2 {
                    for j in 0..2 {
                        let (r, q) = (2 * y + i, 2 * x + j);
                        let v = at3(input, r, q, ch);
                        if v > best {
                            best = v;
                            best_at = (r * w + q) * c + ch;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at);
            }
        }
    }
    (
        Tensor::new(vec![h / 2, w / 2, c], out).expect("oracle pool output"),
        arg,
    )
}

/// Per-cell channel max or mean, `[h, w, c] -> [h, w]`.
pub fn collapse(map: &Tensor, method: Collapse) -> Tensor {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let v = match method {
                Collapse::Max => {
                    let mut m = at3(map, i, j, 0);
                    for k in 1..c {
                        m = m.max(at3(map, i, j, k));
                    }
                    m
                }
                Collapse::Mean => {
                    let mut s = 0.0;
                    for k in 0..c {
                        s += at3(map, i, j, k);
                    }
                    s / c as f64
                }
            };
            out.push(v);
        }
    }
    Tensor::new(vec![h, w], out).expect("oracle collapse output")
}

/// Patch index of coordinate `r` along an axis of `len` cells split into
/// `parts` patches of `len / parts` cells, the last patch taking the rest.
pub fn patch_of(r: usize, len: usize, parts: usize) -> usize {
    (r / (len / parts)).min(parts - 1)
}

/// Global-context vector by exhaustive search: for every patch of every
/// selected map, scan all cells of the map and keep the largest collapsed
/// value among those that fall in the patch. `maps` are shallowest first;
/// the deepest `layers` are used.
pub fn extract_gc(maps: &[Tensor], rows: usize, cols: usize, layers: usize, method: Collapse) -> Vec<f64> {
    let mut out = Vec::new();
    for map in &maps[maps.len() - layers..] {
        let flat = collapse(map, method);
        let (h, w) = (flat.shape()[0], flat.shape()[1]);
        for pr in 0..rows {
            for pc in 0..cols {
                let mut best = f64::NEG_INFINITY;
                for i in 0..h {
                    for j in 0..w {
                        if patch_of(i, h, rows) == pr && patch_of(j, w, cols) == pc {
                            best = best.max(flat.data()[i * w + j]);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Frobenius norm in two passes: find the largest magnitude, then sum the
/// squares of the rescaled entries.
pub fn frobenius_two_pass(values: &[f64]) -> f64 {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let s: f64 = values.iter().map(|v| (v / scale) * (v / scale)).sum();
    scale * s.sqrt()
}

/// Per-class mean of rows by explicit summation.
pub fn class_means(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let d = rows[0].len();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in rows.iter().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    sums
}

/// Squared Euclidean distance through the norm identity
/// `||p||^2 + ||q||^2 - 2 p.q`.
pub fn squared_distance_by_norms(p: &[f64], q: &[f64]) -> f64 {
    let pp: f64 = p.iter().map(|v| v * v).sum();
    let qq: f64 = q.iter().map(|v| v * v).sum();
    let pq: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    pp + qq - 2.0 * pq
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_by_hand() {
        let input = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kernel = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        assert_eq!(conv2d(&input, &kernel, 1).data(), &[-3.0]);
    }

    #[test]
    fn patch_assignment_on_five() {
        let sizes: Vec<usize> = (0..2)
            .map(|p| (0..5).filter(|&r| patch_of(r, 5, 2) == p).count())
            .collect();
        assert_eq!(sizes, vec![2, 3]);
    }

    #[test]
    fn two_pass_norm() {
        assert_eq!(frobenius_two_pass(&[3.0, 4.0]), 5.0);
        assert_eq!(frobenius_two_pass(&[0.0; 3]), 0.0);
    }

    #[test]
    fn pool_first_tie_wins() {
        let input = Tensor::new(vec![2, 2, 1], vec![5.0, 5.0, 1.0, 5.0]).unwrap();
        let (out, arg) = maxpool2x2(&input);
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(arg, vec![0]);
    }
}
