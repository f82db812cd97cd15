//! Level adjustment, similarity-matrix context matching, and the
//! five-block multimodal joint embedding.

use crate::error::{EngineError, Result};
use crate::tape::{Tape, Var};

/// Affine map plus leaky ReLU that calibrates one feature source onto the
/// shared information level. Each source (RGB stream, flow stream, query
/// text) owns an independent `w`/`b`.
pub fn level_adjust(tape: &mut Tape, x: Var, w: Var, b: Var, alpha: f64) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(w);
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(EngineError::Dimension {
            op: "level_adjust",
            msg: format!("input {xs:?} does not match weight {ws:?}"),
        });
    }
    let y = tape.matmul(x, w)?;
    let y = tape.add(y, b)?;
    Ok(tape.leaky_relu(y, alpha))
}

/// Context matching: similarity `S = softmax_q(V' H'^T)` followed by the
/// context-aware query summary `G = S H'`.
///
/// Every row of `S` is a distribution over query words, so each row of
/// `G` is a convex combination of the rows of `H'`.
pub fn context_match(tape: &mut Tape, v: Var, h: Var) -> Result<Var> {
    let vs = tape.shape(v);
    let hs = tape.shape(h);
    if vs.len() != 2 || hs.len() != 2 || vs[1] != hs[1] {
        return Err(EngineError::ShapeMismatch {
            op: "context_match",
            lhs: vs.to_vec(),
            rhs: hs.to_vec(),
        });
    }
    let ht = tape.transpose2(h)?;
    let sim = tape.matmul(v, ht)?;
    let s = tape.softmax(sim, 1)?;
    tape.matmul(s, h)
}

/// Five-block joint embedding `[V'; G_q; G_a; V' (.) G_q; V' (.) G_a]`,
/// widening `D` columns to `5 D`.
pub fn fuse(tape: &mut Tape, v: Var, gq: Var, ga: Var) -> Result<Var> {
    let vs = tape.shape(v).to_vec();
    for (name, other) in [("G_q", gq), ("G_a", ga)] {
        if tape.shape(other) != vs.as_slice() {
            return Err(EngineError::ShapeMismatch {
                op: "fuse",
                lhs: vs.clone(),
                rhs: tape.shape(other).to_vec(),
            });
        }
        let _ = name;
    }
    let vq = tape.mul(v, gq)?;
    let va = tape.mul(v, ga)?;
    tape.concat(&[v, gq, ga, vq, va], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FdConfig};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn level_adjust_identity_on_nonnegative() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 0.5, 0.0])
            .unwrap();
        let eye = tape
            .constant(
                vec![3, 3],
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap();
        let b = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let y = level_adjust(&mut tape, x, eye, b, 0.01).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn level_adjust_bias_only_on_zero_input() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let w = tape.constant(vec![2, 2], vec![5.0; 4]).unwrap();
        let b = tape.constant(vec![2], vec![1.5, -2.0]).unwrap();
        let y = level_adjust(&mut tape, x, w, b, 0.01).unwrap();
        assert_eq!(tape.value(y), &[1.5, -0.02, 1.5, -0.02]);
    }

    #[test]
    fn level_adjust_gradient_check() {
        // Biases push every pre-activation well away from the leaky kink
        // (|z| >= 1.5), otherwise central differences straddling it would
        // dominate the error; both branches are still exercised. A linear
        // readout keeps the tiny alpha-branch gradients above the
        // double-precision cancellation floor at this tight tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = Tensor::uniform_range(vec![3, 4], -0.5, 0.5, &mut rng).with_grad();
        let w = Tensor::uniform_range(vec![4, 5], -0.5, 0.5, &mut rng).with_grad();
        let b = Tensor::from_vec(vec![5], vec![2.5, -2.5, 2.5, -2.5, 2.5])
            .unwrap()
            .with_grad();
        let report = finite_diff_check(
            &[x, w, b],
            FdConfig {
                eps: 1e-5,
                tolerance: 1e-6,
            },
            |tape, vars| {
                let y = level_adjust(tape, vars[0], vars[1], vars[2], 0.01)?;
                Ok(tape.sum_all(y))
            },
        )
        .unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn context_match_single_query_word_repeats_row() {
        let mut tape = Tape::new();
        let v = tape
            .constant(vec![3, 2], vec![0.1, 0.9, -2.0, 0.3, 4.0, 4.0])
            .unwrap();
        let h = tape.constant(vec![1, 2], vec![7.0, -3.0]).unwrap();
        let g = context_match(&mut tape, v, h).unwrap();
        assert_eq!(tape.value(g), &[7.0, -3.0, 7.0, -3.0, 7.0, -3.0]);
    }

    #[test]
    fn context_match_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let vt = Tensor::uniform_range(vec![4, 3], -2.0, 2.0, &mut rng);
        let ht = Tensor::uniform_range(vec![5, 3], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(&vt);
        let h = tape.leaf(&ht);
        let g = context_match(&mut tape, v, h).unwrap();
        for col in 0..3 {
            let column: Vec<f64> = (0..5).map(|r| ht.data()[r * 3 + col]).collect();
            let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for row in 0..4 {
                let val = tape.value(g)[row * 3 + col];
                assert!(
                    val >= lo - 1e-12 && val <= hi + 1e-12,
                    "{val} outside [{lo}, {hi}]"
                );
            }
        }
    }

    #[test]
    fn context_match_aligned_row_selects_query_row() {
        // V' row 1 has a huge dot product with H' row 2 and ~zero with the
        // others, so G row 1 lands on H' row 2.
        let mut tape = Tape::new();
        let mut vdata = vec![0.0; 2 * 3];
        vdata[3] = 50.0;
        let v = tape.constant(vec![2, 3], vdata).unwrap();
        let h = tape
            .constant(
                vec![3, 3],
                vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.5, -0.5],
            )
            .unwrap();
        let g = context_match(&mut tape, v, h).unwrap();
        let row1 = &tape.value(g)[3..6];
        for (a, b) in row1.iter().zip([1.0, 0.5, -0.5]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn permuting_query_rows_leaves_g_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let vt = Tensor::uniform_range(vec![3, 4], -1.0, 1.0, &mut rng);
        let ht = Tensor::uniform_range(vec![5, 4], -1.0, 1.0, &mut rng);
        let mut perm_data = vec![0.0; 20];
        let order = [3, 0, 4, 1, 2];
        for (dst, &src) in order.iter().enumerate() {
            perm_data[dst * 4..(dst + 1) * 4].copy_from_slice(&ht.data()[src * 4..(src + 1) * 4]);
        }
        let run = |hdata: Vec<f64>| {
            let mut tape = Tape::new();
            let v = tape.leaf(&vt);
            let h = tape.constant(vec![5, 4], hdata).unwrap();
            let g = context_match(&mut tape, v, h).unwrap();
            tape.value(g).to_vec()
        };
        let a = run(ht.data().to_vec());
        let b = run(perm_data);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_width_and_block_layout() {
        let mut tape = Tape::new();
        let v = tape
            .constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let gq = tape.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let ga = tape.constant(vec![2, 3], vec![2.0; 6]).unwrap();
        let m = fuse(&mut tape, v, gq, ga).unwrap();
        assert_eq!(tape.shape(m), &[2, 15]);
        let row0 = &tape.value(m)[..15];
        assert_eq!(&row0[..3], &[1.0, 2.0, 3.0]);
        assert_eq!(&row0[3..6], &[1.0; 3]);
        assert_eq!(&row0[6..9], &[2.0; 3]);
        assert_eq!(&row0[9..12], &[1.0, 2.0, 3.0]);
        assert_eq!(&row0[12..15], &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fuse_zero_context_zeroes_product_blocks() {
        let mut tape = Tape::new();
        let v = tape.constant(vec![1, 2], vec![0.0; 2]).unwrap();
        let gq = tape.constant(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let ga = tape.constant(vec![1, 2], vec![5.0, 6.0]).unwrap();
        let m = fuse(&mut tape, v, gq, ga).unwrap();
        assert_eq!(
            tape.value(m),
            &[0.0, 0.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn fuse_substituting_v_for_both_matches() {
        let mut tape = Tape::new();
        let v = tape.constant(vec![1, 2], vec![2.0, -3.0]).unwrap();
        let m = fuse(&mut tape, v, v, v).unwrap();
        assert_eq!(
            tape.value(m),
            &[2.0, -3.0, 2.0, -3.0, 2.0, -3.0, 4.0, 9.0, 4.0, 9.0]
        );
    }

    #[test]
    fn context_match_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let v = Tensor::uniform_range(vec![3, 4], -1.0, 1.0, &mut rng).with_grad();
        let h = Tensor::uniform_range(vec![2, 4], -1.0, 1.0, &mut rng).with_grad();
        let report = finite_diff_check(&[v, h], FdConfig::default(), |tape, vars| {
            let g = context_match(tape, vars[0], vars[1])?;
            let sq = tape.mul(g, g)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }
}
