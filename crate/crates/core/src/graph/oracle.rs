use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// `(E ⊙ S)^k X` by `k` explicit rounds in which every node sums its
/// neighbours' current features weighted by its attention row.
pub fn message_passing_oracle(x: &Matrix, s: &Matrix, e: &Matrix, k: usize) -> Result<Matrix> {
    let n = x.rows();
    if s.shape() != (n, n) || e.shape() != (n, n) {
        return Err(Error::shape("message passing", x.shape(), s.shape()));
    }
    let mut current = x.clone();
    for _ in 0..k {
        let mut next = Matrix::zeros(n, x.cols());
        for i in 0..n {
            for j in 0..n {
                if s.get(i, j) == 0.0 {
                    continue;
                }
                let w = e.get(i, j) * s.get(i, j);
                for c in 0..x.cols() {
                    let v = next.get(i, c) + w * current.get(j, c);
                    next.set(i, c, v);
                }
            }
        }
        current = next;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rounds_is_identity() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let s = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(message_passing_oracle(&x, &s, &s, 0).unwrap(), x);
    }

    #[test]
    fn one_round_on_a_path_swaps_rows() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let s = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let out = message_passing_oracle(&x, &s, &s, 1).unwrap();
        assert_eq!(out, Matrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 2.0]]));
    }

    #[test]
    fn matches_repeated_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 6;
            let mut s = Matrix::zeros(n, n);
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < 0.5 {
                        s.set(i, j, 1.0);
                        s.set(j, i, 1.0);
                    }
                }
            }
            let e = Matrix::random_normal(n, n, 1.0, &mut rng);
            let x = Matrix::random_normal(n, 3, 1.0, &mut rng);
            let es = e.hadamard(&s).unwrap();
            let mut reference = x.clone();
            for k in 0..=4 {
                let got = message_passing_oracle(&x, &s, &e, k).unwrap();
                assert!(got.max_abs_diff(&reference) < 1e-10, "k={k}");
                reference = es.matmul(&reference).unwrap();
            }
        }
    }
}
