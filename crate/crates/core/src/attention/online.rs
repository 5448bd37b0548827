//! Online softmax recurrence.
//!
//! Processing a KV block only gives intermediate results; the running state
//! is rescaled as each new block arrives so that after the last block the
//! output equals a monolithic softmax over the concatenation. The output
//! accumulator is kept in already-normalized form, so finalization is a
//! no-op read.
//!
//! Per query row the state is the running max `m`, the running denominator
//! `l`, and the normalized partial output `o`. A new block of scores `S`
//! and values `V` updates row `r` as
//!
//! ```text
//! m' = max(m, max_j S[r][j])
//! a  = exp(m - m')
//! p_j = exp(S[r][j] - m')
//! l' = l·a + Σ_j p_j
//! o' = (o·l·a + Σ_j p_j·V[j]) / l'
//! ```

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Running state for one (batch, head) query chunk: `rows` query rows of
/// dimension `d`.
#[derive(Debug, Clone)]
pub struct OnlineState {
    pub m: Vec<f64>,
    pub l: Vec<f64>,
    pub o: Matrix,
}

impl OnlineState {
    /// Empty state: no blocks processed yet.
    pub fn new(rows: usize, d: usize) -> Self {
        OnlineState {
            m: vec![f64::NEG_INFINITY; rows],
            l: vec![0.0; rows],
            o: Matrix::zeros(rows, d),
        }
    }

    /// Fold one KV block into the state. `scores` is the pre-scaled,
    /// pre-masked `(rows, kv)` logit block; masked entries are `-inf`.
    /// `v_block` is `(kv, d)`.
    pub fn update(&mut self, scores: &Matrix, v_block: &Matrix) -> Result<()> {
        if scores.rows != self.o.rows || scores.cols != v_block.rows || v_block.cols != self.o.cols
        {
            return Err(Error::DimMismatch(format!(
                "online update: scores {}x{}, v {}x{}, state {}x{}",
                scores.rows, scores.cols, v_block.rows, v_block.cols, self.o.rows, self.o.cols
            )));
        }
        // -inf is the mask sentinel; NaN and +inf are data errors.
        if scores.data.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::NonFinite("online attention scores"));
        }
        let d = self.o.cols;
        for r in 0..scores.rows {
            let row = &scores.data[r * scores.cols..(r + 1) * scores.cols];
            let block_max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let m_new = self.m[r].max(block_max);
            if m_new == f64::NEG_INFINITY {
                // Entire row masked so far; nothing to accumulate.
                continue;
            }
            let alpha = if self.m[r] == f64::NEG_INFINITY {
                0.0
            } else {
                (self.m[r] - m_new).exp()
            };
            let mut p_sum = 0.0;
            let mut acc = vec![0.0; d];
            for (j, &s) in row.iter().enumerate() {
                let p = (s - m_new).exp();
                p_sum += p;
                if p != 0.0 {
                    for c in 0..d {
                        acc[c] += p * v_block.at(j, c);
                    }
                }
            }
            let l_new = self.l[r] * alpha + p_sum;
            let carry = self.l[r] * alpha;
            for c in 0..d {
                let prev = self.o.at(r, c) * carry;
                *self.o.at_mut(r, c) = (prev + acc[c]) / l_new;
            }
            self.m[r] = m_new;
            self.l[r] = l_new;
        }
        Ok(())
    }

    /// The accumulated output. Already normalized, so this is just a read.
    pub fn finalize(&self) -> &Matrix {
        &self.o
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{matmul, row_softmax_stable};

    #[test]
    fn single_block_equals_softmax_times_v() {
        let mut rng = Rng::new(31);
        let scores = Matrix::random(4, 6, &mut rng);
        let v = Matrix::random(6, 3, &mut rng);
        let mut state = OnlineState::new(4, 3);
        state.update(&scores, &v).unwrap();
        let want = matmul(&row_softmax_stable(&scores), &v).unwrap();
        assert!(state.finalize().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn two_zero_score_blocks_weight_half_each() {
        let v0 = Matrix::from_rows(&[vec![2.0]]);
        let v1 = Matrix::from_rows(&[vec![6.0]]);
        let zero = Matrix::from_rows(&[vec![0.0]]);
        let mut state = OnlineState::new(1, 1);
        state.update(&zero, &v0).unwrap();
        state.update(&zero, &v1).unwrap();
        // Equal logits across the two blocks: final weights are [0.5, 0.5].
        assert!((state.finalize().at(0, 0) - 4.0).abs() < 1e-15);
        assert!((state.l[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn three_block_stream_matches_monolithic() {
        let mut rng = Rng::new(32);
        let rows = 5;
        let d = 4;
        let blocks: Vec<(Matrix, Matrix)> = (0..3)
            .map(|_| (Matrix::random(rows, 7, &mut rng), Matrix::random(7, d, &mut rng)))
            .collect();
        let mut state = OnlineState::new(rows, d);
        for (s, v) in &blocks {
            state.update(s, v).unwrap();
        }
        // Monolithic oracle on the concatenated KV.
        let mut cat_s = Matrix::zeros(rows, 21);
        for r in 0..rows {
            for (bi, (s, _)) in blocks.iter().enumerate() {
                for c in 0..7 {
                    *cat_s.at_mut(r, bi * 7 + c) = s.at(r, c);
                }
            }
        }
        let mut cat_v = Matrix::zeros(21, d);
        for (bi, (_, v)) in blocks.iter().enumerate() {
            for j in 0..7 {
                for c in 0..d {
                    *cat_v.at_mut(bi * 7 + j, c) = v.at(j, c);
                }
            }
        }
        let want = matmul(&row_softmax_stable(&cat_s), &cat_v).unwrap();
        assert!(state.finalize().max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn masked_block_entries_contribute_nothing() {
        let mut rng = Rng::new(33);
        let v = Matrix::random(2, 3, &mut rng);
        let mut masked = Matrix::random(1, 2, &mut rng);
        *masked.at_mut(0, 1) = f64::NEG_INFINITY;
        let mut state = OnlineState::new(1, 3);
        state.update(&masked, &v).unwrap();
        // Only key 0 visible: output is exactly v[0].
        for c in 0..3 {
            assert_eq!(state.finalize().at(0, c), v.at(0, c));
        }
    }

    #[test]
    fn nan_scores_rejected() {
        let v = Matrix::zeros(1, 1);
        let mut s = Matrix::zeros(1, 1);
        *s.at_mut(0, 0) = f64::NAN;
        let mut state = OnlineState::new(1, 1);
        assert!(state.update(&s, &v).is_err());
    }

    #[test]
    fn denominator_positive_after_first_block() {
        let mut rng = Rng::new(34);
        let s = Matrix::random(3, 4, &mut rng);
        let v = Matrix::random(4, 2, &mut rng);
        let mut state = OnlineState::new(3, 2);
        state.update(&s, &v).unwrap();
        assert!(state.l.iter().all(|&l| l > 0.0));
    }
}
