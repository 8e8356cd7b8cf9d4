//! Early fusion: cross-attention between objects and caption sentences,
//! property fusion of the visual rows, question-guided attention pooling and
//! the gated answer classifier.
//!
//! Shapes follow the row convention of [`crate::tensor`]: `V` is `O × d`,
//! `P` is `K × d`, the question `q` is `1 × d_q`, and weights are stored
//! `out × in`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// `W_sa` (`h_a × width`), `W_qa` (`h_a × d_q`) and `w_a` (`1 × h_a`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_sa: Var,
    pub w_qa: Var,
    pub w_a: Var,
}

/// `W_p` (`h_g × width`), `W_q` (`h_g × d_q`) and the affine classifier
/// (`|answers| × h_g` weight, `1 × |answers|` bias).
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w_p: Var,
    pub w_q: Var,
    pub cls_weight: Var,
    pub cls_bias: Var,
}

/// Trilinear similarity `S[i][j] = w_sᵀ [vᵢ; pⱼ; vᵢ∘pⱼ]`, an `O × K` matrix.
/// `w_s` is `1 × 3d`.
pub fn similarity(tape: &mut Tape<'_>, v: Var, p: Var, w_s: Var) -> Result<Var> {
    let d = tape.value(v).cols();
    if tape.value(p).cols() != d || tape.value(v).rows() == 0 {
        return Err(Error::dim("similarity", tape.shape(v), tape.shape(p)));
    }
    if tape.value(w_s).len() != 3 * d || tape.value(w_s).rows() != 1 {
        return Err(Error::dim("similarity", tape.shape(w_s), &[1, 3 * d]));
    }
    let w_obj = tape.slice_cols(w_s, 0, d)?;
    let w_sent = tape.slice_cols(w_s, d, 2 * d)?;
    let w_cross = tape.slice_cols(w_s, 2 * d, 3 * d)?;

    let obj_term = tape.matmul_nt(v, w_obj)?;
    let sent_term = tape.matmul_nt(p, w_sent)?;
    let weighted = tape.mul_row_broadcast(v, w_cross)?;
    let cross = tape.matmul_nt(weighted, p)?;
    let base = tape.outer_add(obj_term, sent_term)?;
    tape.add(cross, base)
}

/// `V^p = softmax(Sᵀ) V`: each sentence attends over the objects, giving a
/// `K × d` matrix whose rows are convex combinations of object features.
pub fn attend_paragraph_over_objects(tape: &mut Tape<'_>, s: Var, v: Var) -> Result<Var> {
    if tape.value(s).rows() != tape.value(v).rows() {
        return Err(Error::dim(
            "attend_paragraph_over_objects",
            tape.shape(s),
            tape.shape(v),
        ));
    }
    let st = tape.transpose(s)?;
    let weights = tape.softmax_rows(st)?;
    tape.matmul(weights, v)
}

/// `[X; X∘Y]`, doubling the width.
pub fn fuse(tape: &mut Tape<'_>, x: Var, y: Var) -> Result<Var> {
    let prod = tape.mul(x, y)?;
    tape.concat_cols(x, prod)
}

/// `P^f = [P; P∘V^p]`.
pub fn fuse_paragraph(tape: &mut Tape<'_>, p: Var, vp: Var) -> Result<Var> {
    fuse(tape, p, vp)
}

/// `V^f = [V; V∘C]` with property row `i` aligned to object `i`.
pub fn fuse_visual(tape: &mut Tape<'_>, v: Var, c: Var) -> Result<Var> {
    fuse(tape, v, c)
}

/// Attention over the rows of a fused representation:
/// `aᵢ = w_aᵀ (ReLU(W_sa sᵢ) ∘ ReLU(W_qa q))`, `α = softmax(a)`.
/// Returns `α` as a `1 × m` row.
pub fn question_attention(
    tape: &mut Tape<'_>,
    rows: Var,
    q: Var,
    att: &AttentionVars,
) -> Result<Var> {
    let projected = tape.matmul_nt(rows, att.w_sa)?;
    let row_h = tape.relu(projected);
    let q_proj = tape.matmul_nt(q, att.w_qa)?;
    let q_h = tape.relu(q_proj);
    let joint = tape.mul_row_broadcast(row_h, q_h)?;
    let scores = tape.matmul_nt(joint, att.w_a)?;
    let scores = tape.transpose(scores)?;
    tape.softmax_rows(scores)
}

/// `p = Σ αᵢ sᵢ`, `p^q = ReLU(W_p p) ∘ ReLU(W_q q)`, logits = `W p^q + b`.
pub fn pool_and_gate(
    tape: &mut Tape<'_>,
    rows: Var,
    alpha: Var,
    q: Var,
    gate: &GateVars,
) -> Result<Var> {
    let m = tape.value(rows).rows();
    if tape.shape(alpha) != [1, m] {
        return Err(Error::dim("pool_and_gate", tape.shape(alpha), &[1, m]));
    }
    let pooled = tape.matmul(alpha, rows)?;
    let p_proj = tape.matmul_nt(pooled, gate.w_p)?;
    let p_h = tape.relu(p_proj);
    let q_proj = tape.matmul_nt(q, gate.w_q)?;
    let q_h = tape.relu(q_proj);
    let joint = tape.mul(p_h, q_h)?;
    let scores = tape.matmul_nt(joint, gate.cls_weight)?;
    tape.add_row_broadcast(scores, gate.cls_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .unwrap()
    }

    fn rows(data: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&data.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(rows(&[&[1.0, 2.0]]));
        let p = tape.constant(rows(&[&[3.0, 4.0]]));
        let w = tape.constant(Tensor::row(vec![1.0; 6]));
        let s = similarity(&mut tape, v, p, w).unwrap();
        assert_eq!(tape.value(s).data(), &[21.0]);

        let zero = tape.constant(Tensor::zeros(&[1, 6]));
        let s = similarity(&mut tape, v, p, zero).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0]);

        let wide = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(similarity(&mut tape, v, wide, w).is_err());
    }

    #[test]
    fn similarity_permutes_with_paragraph_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (vt, pt, wt) = (
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[2, 4]),
            random(&mut rng, &[1, 12]),
        );
        let swapped = Tensor::from_rows(&[pt.row_slice(1).to_vec(), pt.row_slice(0).to_vec()])
            .unwrap();
        let mut tape = Tape::new();
        let (v, w) = (tape.constant_ref(&vt), tape.constant_ref(&wt));
        let p = tape.constant_ref(&pt);
        let ps = tape.constant_ref(&swapped);
        let s1 = similarity(&mut tape, v, p, w).unwrap();
        let s2 = similarity(&mut tape, v, ps, w).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(s1).at(i, 0), tape.value(s2).at(i, 1));
            assert_eq!(tape.value(s1).at(i, 1), tape.value(s2).at(i, 0));
        }
    }

    #[test]
    fn attend_examples() {
        let mut tape = Tape::new();
        let v1 = tape.constant(rows(&[&[1.0, -2.0, 3.0]]));
        let s1 = tape.constant(rows(&[&[0.4, -7.0, 2.0]]));
        let vp = attend_paragraph_over_objects(&mut tape, s1, v1).unwrap();
        assert_eq!(tape.shape(vp), &[3, 3]);
        for k in 0..3 {
            assert_eq!(tape.value(vp).row_slice(k), &[1.0, -2.0, 3.0]);
        }

        let v2 = tape.constant(rows(&[&[1.0, 4.0], &[3.0, 0.0]]));
        let s0 = tape.constant(Tensor::zeros(&[2, 3]));
        let vp = attend_paragraph_over_objects(&mut tape, s0, v2).unwrap();
        for k in 0..3 {
            assert_eq!(tape.value(vp).row_slice(k), &[2.0, 2.0]);
        }
    }

    #[test]
    fn fusion_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(rows(&[&[1.0, 2.0]]));
        let vp = tape.constant(rows(&[&[3.0, 4.0]]));
        let pf = fuse_paragraph(&mut tape, p, vp).unwrap();
        assert_eq!(tape.value(pf).data(), &[1.0, 2.0, 3.0, 8.0]);

        let zero = tape.constant(Tensor::zeros(&[1, 2]));
        let pf = fuse_paragraph(&mut tape, p, zero).unwrap();
        assert_eq!(tape.value(pf).data(), &[1.0, 2.0, 0.0, 0.0]);

        let v = tape.constant(rows(&[&[1.0, -1.0], &[0.5, 2.0]]));
        let ones = tape.constant(Tensor::full(&[2, 2], 1.0));
        let vf = fuse_visual(&mut tape, v, ones).unwrap();
        assert_eq!(tape.value(vf).data(), &[1.0, -1.0, 1.0, -1.0, 0.5, 2.0, 0.5, 2.0]);

        let short = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(fuse_visual(&mut tape, v, short).is_err());
    }

    fn attention_params(rng: &mut ChaCha8Rng, width: usize, d_q: usize, h: usize) -> Vec<Tensor> {
        vec![random(rng, &[h, width]), random(rng, &[h, d_q]), random(rng, &[1, h])]
    }

    fn gate_params(
        rng: &mut ChaCha8Rng,
        width: usize,
        d_q: usize,
        h: usize,
        n: usize,
    ) -> Vec<Tensor> {
        vec![
            random(rng, &[h, width]),
            random(rng, &[h, d_q]),
            random(rng, &[n, h]),
            random(rng, &[1, n]),
        ]
    }

    fn att_vars(v: &[Var]) -> AttentionVars {
        AttentionVars {
            w_sa: v[0],
            w_qa: v[1],
            w_a: v[2],
        }
    }

    fn gate_vars(v: &[Var]) -> GateVars {
        GateVars {
            w_p: v[0],
            w_q: v[1],
            cls_weight: v[2],
            cls_bias: v[3],
        }
    }

    #[test]
    fn question_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let att = attention_params(&mut rng, 4, 3, 5);
        let q = random(&mut rng, &[1, 3]);
        let mut tape = Tape::new();
        let av: Vec<Var> = att.iter().map(|t| tape.constant_ref(t)).collect();
        let qv = tape.constant_ref(&q);
        let same = tape.constant(Tensor::from_rows(&vec![vec![0.2, -0.1, 0.7, 0.3]; 4]).unwrap());
        let alpha = question_attention(&mut tape, same, qv, &att_vars(&av)).unwrap();
        for &a in tape.value(alpha).data() {
            assert!((a - 0.25).abs() < 1e-15);
        }
        let one = tape.constant(Tensor::row(vec![0.5, 0.1, -0.3, 0.9]));
        let alpha = question_attention(&mut tape, one, qv, &att_vars(&av)).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0]);
    }

    #[test]
    fn question_attention_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, width, d_q, h) = (4, 6, 3, 5);
        let att = attention_params(&mut rng, width, d_q, h);
        let s = random(&mut rng, &[m, width]);
        let q = random(&mut rng, &[1, d_q]);
        let mut tape = Tape::new();
        let av: Vec<Var> = att.iter().map(|t| tape.constant_ref(t)).collect();
        let (sv, qv) = (tape.constant_ref(&s), tape.constant_ref(&q));
        let alpha = question_attention(&mut tape, sv, qv, &att_vars(&av)).unwrap();

        let relu = |x: f64| x.max(0.0);
        let qh: Vec<f64> = (0..h)
            .map(|r| relu((0..d_q).map(|c| att[1].at(r, c) * q.data()[c]).sum()))
            .collect();
        let scores: Vec<f64> = (0..m)
            .map(|i| {
                (0..h)
                    .map(|r| {
                        let sh = relu((0..width).map(|c| att[0].at(r, c) * s.at(i, c)).sum());
                        att[2].data()[r] * sh * qh[r]
                    })
                    .sum()
            })
            .collect();
        let z: f64 = scores.iter().map(|a| a.exp()).sum();
        for (i, a) in scores.iter().enumerate() {
            assert!((tape.value(alpha).data()[i] - a.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_and_gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (width, d_q, h, n) = (4, 3, 5, 7);
        let mut gate = gate_params(&mut rng, width, d_q, h, n);
        let s = random(&mut rng, &[3, width]);
        let q = random(&mut rng, &[1, d_q]);
        {
            let mut tape = Tape::new();
            let gv: Vec<Var> = gate.iter().map(|t| tape.constant_ref(t)).collect();
            let (sv, qv) = (tape.constant_ref(&s), tape.constant_ref(&q));
            let one_hot = tape.constant(Tensor::row(vec![0.0, 1.0, 0.0]));
            let pooled = tape.matmul(one_hot, sv).unwrap();
            assert_eq!(tape.value(pooled).data(), s.row_slice(1));
            let logits = pool_and_gate(&mut tape, sv, one_hot, qv, &gate_vars(&gv)).unwrap();
            assert_eq!(tape.shape(logits), &[1, n]);
            let bad = tape.constant(Tensor::row(vec![0.5, 0.5]));
            assert!(pool_and_gate(&mut tape, sv, bad, qv, &gate_vars(&gv)).is_err());
        }
        gate[0] = Tensor::zeros(&[h, width]);
        let mut tape = Tape::new();
        let gv: Vec<Var> = gate.iter().map(|t| tape.constant_ref(t)).collect();
        let (sv, qv) = (tape.constant_ref(&s), tape.constant_ref(&q));
        let alpha = tape.constant(Tensor::row(vec![0.2, 0.3, 0.5]));
        let logits = pool_and_gate(&mut tape, sv, alpha, qv, &gate_vars(&gv)).unwrap();
        assert_eq!(tape.value(logits), &gate[3]);
    }

    #[test]
    fn duplicate_rows_get_equal_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let att = attention_params(&mut rng, 4, 3, 5);
        let q = random(&mut rng, &[1, 3]);
        let base = random(&mut rng, &[2, 4]);
        let dup = Tensor::from_rows(&[
            base.row_slice(0).to_vec(),
            base.row_slice(1).to_vec(),
            base.row_slice(1).to_vec(),
        ])
        .unwrap();
        let mut tape = Tape::new();
        let av: Vec<Var> = att.iter().map(|t| tape.constant_ref(t)).collect();
        let (dv, qv) = (tape.constant_ref(&dup), tape.constant_ref(&q));
        let alpha = question_attention(&mut tape, dv, qv, &att_vars(&av)).unwrap();
        let a = tape.value(alpha).data();
        assert_eq!(a[1], a[2]);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // similarity → V^p → P^f → attention → gate → cross-entropy on a
        // 2-object / 2-sentence instance.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (d, d_q, h, n) = (3, 2, 4, 5);
        let mut inputs = vec![
            random(&mut rng, &[2, d]),
            random(&mut rng, &[2, d]),
            random(&mut rng, &[1, d_q]),
            random(&mut rng, &[1, 3 * d]),
        ];
        inputs.extend(attention_params(&mut rng, 2 * d, d_q, h));
        inputs.extend(gate_params(&mut rng, 2 * d, d_q, h, n));
        let reports = grad_check_many(
            |tape, v| {
                let s = similarity(tape, v[0], v[1], v[3])?;
                let vp = attend_paragraph_over_objects(tape, s, v[0])?;
                let pf = fuse_paragraph(tape, v[1], vp)?;
                let alpha = question_attention(tape, pf, v[2], &att_vars(&v[4..7]))?;
                let logits = pool_and_gate(tape, pf, alpha, v[2], &gate_vars(&v[7..11]))?;
                tape.cross_entropy(logits, 2)
            },
            &inputs,
            1e-5,
            |_, n| (0..n).collect(),
        )
        .unwrap();
        for r in reports {
            assert!(r.max_relative_error < 1e-4, "{r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn attended_rows_stay_in_the_convex_hull(
            seed in any::<u64>(), o in 1usize..5, k in 1usize..5, d in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vt = random(&mut rng, &[o, d]);
            let st = random(&mut rng, &[o, k]).scale(4.0);
            let mut tape = Tape::new();
            let (v, s) = (tape.constant_ref(&vt), tape.constant_ref(&st));
            let vp = attend_paragraph_over_objects(&mut tape, s, v).unwrap();
            for row in 0..k {
                for c in 0..d {
                    let col: Vec<f64> = (0..o).map(|i| vt.at(i, c)).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let x = tape.value(vp).at(row, c);
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn sentence_permutation_permutes_attention_and_keeps_pooled(
            seed in any::<u64>(), m in 2usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (width, d_q, h) = (4, 3, 5);
            let att = attention_params(&mut rng, width, d_q, h);
            let q = random(&mut rng, &[1, d_q]);
            let s = random(&mut rng, &[m, width]);
            let perm: Vec<usize> = (0..m).rev().collect();
            let permuted =
                Tensor::from_rows(&perm.iter().map(|&i| s.row_slice(i).to_vec()).collect::<Vec<_>>())
                    .unwrap();
            let mut tape = Tape::new();
            let av: Vec<Var> = att.iter().map(|t| tape.constant_ref(t)).collect();
            let qv = tape.constant_ref(&q);
            let (sv, pv) = (tape.constant_ref(&s), tape.constant_ref(&permuted));
            let a1 = question_attention(&mut tape, sv, qv, &att_vars(&av)).unwrap();
            let a2 = question_attention(&mut tape, pv, qv, &att_vars(&av)).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((tape.value(a1).data()[i] - tape.value(a2).data()[j]).abs() < 1e-15);
            }
            let p1 = tape.matmul(a1, sv).unwrap();
            let p2 = tape.matmul(a2, pv).unwrap();
            for (x, y) in tape.value(p1).data().iter().zip(tape.value(p2).data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let total: f64 = tape.value(a1).data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
