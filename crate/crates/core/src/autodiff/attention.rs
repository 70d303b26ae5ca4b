use crate::error::{Error, Result};
use crate::tensor::Real;

/// Packing of several equal-length sequences into one row-major batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub seq_len: usize,
    /// Number of leading positions each sequence may attend to.
    pub valid: Vec<usize>,
}

impl SeqLayout {
    /// All positions valid.
    pub fn dense(n_seq: usize, seq_len: usize) -> Self {
        SeqLayout {
            seq_len,
            valid: vec![seq_len; n_seq],
        }
    }

    pub fn n_seq(&self) -> usize {
        self.valid.len()
    }

    pub fn rows(&self) -> usize {
        self.n_seq() * self.seq_len
    }
}

pub(super) fn forward<T: Real>(
    qkv: &[T],
    rows: usize,
    width: usize,
    layout: &SeqLayout,
    heads: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    if !width.is_multiple_of(3) || heads == 0 || !(width / 3).is_multiple_of(heads) {
        return Err(Error::Parameter(format!(
            "attention: width {width} is not 3·heads·head_dim for {heads} heads"
        )));
    }
    if rows != layout.rows() {
        return Err(Error::dim("attention", &[rows, width], &[layout.n_seq(), layout.seq_len]));
    }
    if let Some(&v) = layout.valid.iter().find(|&&v| v == 0 || v > layout.seq_len) {
        return Err(Error::Parameter(format!(
            "attention: valid length {v} outside 1..={}",
            layout.seq_len
        )));
    }
    let d = width / 3;
    let dh = d / heads;
    let t = layout.seq_len;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let w = width as isize;
    let mut out = vec![T::ZERO; rows * d];
    let mut probs = vec![T::ZERO; layout.n_seq() * heads * t * t];
    for (s, &valid) in layout.valid.iter().enumerate() {
        let base = s * t * width;
        for h in 0..heads {
            let (qo, ko, vo) = (base + h * dh, base + d + h * dh, base + 2 * d + h * dh);
            let p = &mut probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
            // S = scale · Q Kᵀ, rows of length t, first `valid` columns used.
            T::gemm_strided(t, dh, valid, scale, &qkv[qo..], w, 1, &qkv[ko..], 1, w, T::ZERO, p, t);
            for row in p.chunks_mut(t) {
                let row = &mut row[..valid];
                let max = row.iter().copied().fold(row[0], |m, v| if v > m { v } else { m });
                let mut z = T::ZERO;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            let o = &mut out[s * t * d + h * dh..];
            T::gemm_strided(t, valid, dh, T::ONE, p, t as isize, 1, &qkv[vo..], w, 1, T::ZERO, o, d);
        }
    }
    Ok((out, probs))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Real>(
    qkv: &[T],
    width: usize,
    layout: &SeqLayout,
    heads: usize,
    probs: &[T],
    g: &[T],
    gqkv: &mut [T],
) {
    let d = width / 3;
    let dh = d / heads;
    let t = layout.seq_len;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let w = width as isize;
    let mut ds = vec![T::ZERO; t * t];
    for (s, &valid) in layout.valid.iter().enumerate() {
        let base = s * t * width;
        for h in 0..heads {
            let (qo, ko, vo) = (base + h * dh, base + d + h * dh, base + 2 * d + h * dh);
            let p = &probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
            let go = &g[s * t * d + h * dh..];
            // dP = dO Vᵀ
            T::gemm_strided(t, dh, valid, T::ONE, go, d as isize, 1, &qkv[vo..], 1, w, T::ZERO, &mut ds, valid);
            // dV += Pᵀ dO
            T::gemm_strided(valid, t, dh, T::ONE, p, 1, t as isize, go, d as isize, 1, T::ONE, &mut gqkv[vo..], width);
            // dS = P ⊙ (dP − Σ P dP) · scale
            for i in 0..t {
                let prow = &p[i * t..i * t + valid];
                let drow = &mut ds[i * valid..(i + 1) * valid];
                let dot = prow.iter().zip(drow.iter()).fold(T::ZERO, |acc, (&a, &b)| acc + a * b);
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            // dQ += dS K ; dK += dSᵀ Q
            T::gemm_strided(t, valid, dh, T::ONE, &ds, valid as isize, 1, &qkv[ko..], w, 1, T::ONE, &mut gqkv[qo..], width);
            T::gemm_strided(valid, t, dh, T::ONE, &ds, 1, valid as isize, &qkv[qo..], w, 1, T::ONE, &mut gqkv[ko..], width);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn single_position_returns_its_value() {
        let mut tape = Tape::<f64>::new();
        // d = 2, one head, one sequence of length 1.
        let qkv = tape
            .leaf(vec![1, 6], vec![0.3, -0.2, 1.0, 2.0, 5.0, -7.0], false)
            .unwrap();
        let out = tape.attention(qkv, &SeqLayout::dense(1, 1), 1).unwrap();
        assert_eq!(tape.value(out), &[5.0, -7.0]);
    }

    #[test]
    fn masked_keys_are_ignored() {
        let mut tape = Tape::<f64>::new();
        let mut vals = vec![0.0; 2 * 6];
        // position 0 value (1, 1); position 1 value (100, 100) but masked.
        vals[4] = 1.0;
        vals[5] = 1.0;
        vals[10] = 100.0;
        vals[11] = 100.0;
        let qkv = tape.leaf(vec![2, 6], vals, false).unwrap();
        let layout = SeqLayout {
            seq_len: 2,
            valid: vec![1],
        };
        let out = tape.attention(qkv, &layout, 1).unwrap();
        assert_eq!(&tape.value(out)[..2], &[1.0, 1.0]);
        assert_eq!(&tape.value(out)[2..], &[1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_layout() {
        let mut tape = Tape::<f64>::new();
        let qkv = tape.leaf(vec![2, 6], vec![0.0; 12], false).unwrap();
        assert!(tape.attention(qkv, &SeqLayout::dense(1, 3), 1).is_err());
        assert!(tape.attention(qkv, &SeqLayout::dense(1, 2), 4).is_err());
    }
}
