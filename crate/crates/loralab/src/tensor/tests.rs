//! Forward oracles frozen by hand plus backward checks against closed-form
//! adjoints. Finite-difference verification of the same ops lives in the
//! `verify` module and the gradcheck integration tests.

use super::*;
use crate::error::Error;

type G = Graph<f64>;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn p(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    t(shape, data).trained()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "{what}: element {i} differs, got {g}, want {w}"
        );
    }
}

#[test]
fn matmul_matches_hand_arithmetic() {
    let g = G::new();
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    let c = g.matmul(&a, &b).unwrap();
    assert_close(&c.to_vec(), &[19.0, 22.0, 43.0, 50.0], 0.0, "matmul");
}

#[test]
fn matmul_rejects_inner_dim_mismatch() {
    let g = G::new();
    let a = t(&[2, 3], &[0.0; 6]);
    let b = t(&[2, 2], &[0.0; 4]);
    match g.matmul(&a, &b) {
        Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_backward_matches_transpose_products() {
    // For c = a·b and upstream adjoint dc, da = dc·bᵀ and db = aᵀ·dc.
    let g = G::new();
    let a = p(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.0, -0.5]);
    let b = p(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 3.0, -2.0]);
    let c = g.matmul(&a, &b).unwrap();
    let loss = g.sum_all(&c).unwrap();
    g.backward(&loss).unwrap();
    // dc is all ones, so da[i][k] = sum_j b[k][j], db[k][j] = sum_i a[i][k].
    let da = a.grad().unwrap();
    let db = b.grad().unwrap();
    assert_close(&da, &[3.0, -0.5, 1.0, 3.0, -0.5, 1.0], 1e-12, "da");
    assert_close(&db, &[2.0, 2.0, -1.0, -1.0, 1.5, 1.5], 1e-12, "db");
}

#[test]
fn elementwise_mul_matches_hand_example() {
    let g = G::new();
    let a = t(&[2], &[1.0, 2.0]);
    let b = t(&[2], &[3.0, 4.0]);
    let c = g.mul(&a, &b).unwrap();
    assert_close(&c.to_vec(), &[3.0, 8.0], 0.0, "mul");
}

#[test]
fn grad_of_sum_of_squares_is_twice_the_input() {
    let g = G::new();
    let w = p(&[2], &[1.0, 2.0]);
    let sq = g.mul(&w, &w).unwrap();
    let loss = g.sum_all(&sq).unwrap();
    g.backward(&loss).unwrap();
    assert_close(&w.grad().unwrap(), &[2.0, 4.0], 1e-12, "d(sum w*w)/dw");
}

#[test]
fn broadcast_add_reduces_adjoint_over_rows() {
    let g = G::new();
    let a = p(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let bias = p(&[3], &[10.0, 20.0, 30.0]);
    let c = g.add(&a, &bias).unwrap();
    assert_close(
        &c.to_vec(),
        &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0],
        0.0,
        "broadcast add",
    );
    let loss = g.sum_all(&c).unwrap();
    g.backward(&loss).unwrap();
    assert_close(&bias.grad().unwrap(), &[2.0, 2.0, 2.0], 1e-12, "dbias");
    assert_close(&a.grad().unwrap(), &[1.0; 6], 1e-12, "da");
}

#[test]
fn broadcast_requires_matching_trailing_dim() {
    let g = G::new();
    let a = t(&[2, 3], &[0.0; 6]);
    let b = t(&[2], &[0.0; 2]);
    assert!(matches!(g.add(&a, &b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn clamp01_forward_matches_hand_examples() {
    let g = G::new();
    let x = t(&[5], &[-0.5, 0.0, 0.3, 1.0, 1.7]);
    let y = g.clamp01(&x).unwrap();
    assert_close(&y.to_vec(), &[0.0, 0.0, 0.3, 1.0, 1.0], 0.0, "clamp01");
}

#[test]
fn clamp01_gradient_is_zero_outside_open_interval() {
    let g = G::new();
    let x = p(&[5], &[-0.5, 0.0, 0.3, 1.0, 1.7]);
    let y = g.clamp01(&x).unwrap();
    let loss = g.sum_all(&y).unwrap();
    g.backward(&loss).unwrap();
    assert_close(
        &x.grad().unwrap(),
        &[0.0, 0.0, 1.0, 0.0, 0.0],
        0.0,
        "clamp01 passes gradient only strictly inside (0, 1)",
    );
}

#[test]
fn cosine_of_known_pair_matches_hand_value() {
    // u = (1, 0), v = (1, 1): cos = 1/sqrt(2).
    let g = G::new();
    let u = t(&[2], &[1.0, 0.0]);
    let v = t(&[2], &[1.0, 1.0]);
    let c = g.cosine_sim(&u, &v).unwrap();
    let want = 1.0 / 2.0f64.sqrt();
    assert!((c.item() - want).abs() < 1e-7, "got {}, want {want}", c.item());
}

#[test]
fn cosine_is_plus_minus_one_for_aligned_vectors() {
    let g = G::new();
    let u = t(&[3], &[0.2, -0.4, 0.8]);
    let same = g.cosine_sim(&u, &u).unwrap();
    assert!((same.item() - 1.0).abs() < 1e-7);
    let neg = t(&[3], &[-0.2, 0.4, -0.8]);
    let opposite = g.cosine_sim(&u, &neg).unwrap();
    assert!((opposite.item() + 1.0).abs() < 1e-7);
}

#[test]
fn cosine_rows_matches_scalar_variant() {
    let g = G::new();
    let h = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
    let v = t(&[3], &[0.3, -0.7, 1.1]);
    let rows = g.cosine_sim_rows(&h, &v).unwrap().to_vec();
    for i in 0..2 {
        let u = g.slice_rows(&h, i, 1).unwrap().to_vec();
        let u = t(&[3], &u);
        let single = g.cosine_sim(&u, &v).unwrap().item();
        assert!((rows[i] - single).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_order_is_preserved() {
    let g = G::new();
    let x = t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
    let y = g.softmax_rows(&x).unwrap().to_vec();
    for i in 0..2 {
        let row = &y[i * 3..(i + 1) * 3];
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
        assert!(row[0] < row[1] && row[1] < row[2]);
    }
}

#[test]
fn softmax_is_stable_under_large_inputs() {
    let g = G::new();
    let x = t(&[1, 3], &[1000.0, 1001.0, 1002.0]);
    let y = g.softmax_rows(&x).unwrap().to_vec();
    assert!(y.iter().all(|p| p.is_finite()));
    let sum: f64 = y.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_output_has_zero_mean_unit_variance() {
    let g = G::new();
    let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -2.0, 0.5, 7.0, 1.5]);
    let gain = t(&[4], &[1.0; 4]);
    let bias = t(&[4], &[0.0; 4]);
    let y = g.layer_norm(&x, &gain, &bias).unwrap().to_vec();
    for i in 0..2 {
        let row = &y[i * 4..(i + 1) * 4];
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12, "row {i} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "row {i} variance {var}");
    }
}

#[test]
fn gelu_fixes_zero_and_is_asymptotically_identity() {
    let g = G::new();
    let x = t(&[3], &[0.0, 10.0, -10.0]);
    let y = g.gelu(&x).unwrap().to_vec();
    assert_eq!(y[0], 0.0);
    assert!((y[1] - 10.0).abs() < 1e-6);
    assert!(y[2].abs() < 1e-6);
}

#[test]
fn embedding_gathers_rows_and_scatters_gradient() {
    let g = G::new();
    let table = p(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let out = g.embedding(&table, &[2, 0, 2]).unwrap();
    assert_close(&out.to_vec(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0], 0.0, "gather");
    let loss = g.sum_all(&out).unwrap();
    g.backward(&loss).unwrap();
    // Row 2 was used twice, row 0 once, row 1 never.
    assert_close(
        &table.grad().unwrap(),
        &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0],
        1e-12,
        "scatter-add",
    );
}

#[test]
fn embedding_rejects_out_of_range_ids() {
    let g = G::new();
    let table = t(&[3, 2], &[0.0; 6]);
    assert!(matches!(g.embedding(&table, &[3]), Err(Error::InvalidInput(_))));
}

#[test]
fn slice_and_concat_round_trip() {
    let g = G::new();
    let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let top = g.slice_rows(&x, 0, 1).unwrap();
    let rest = g.slice_rows(&x, 1, 2).unwrap();
    let back = g.concat_rows(&[top, rest]).unwrap();
    assert_close(&back.to_vec(), &x.to_vec(), 0.0, "rows round trip");

    let left = g.slice_cols(&x, 0, 1).unwrap();
    let right = g.slice_cols(&x, 1, 1).unwrap();
    let back = g.concat_cols(&[left, right]).unwrap();
    assert_close(&back.to_vec(), &x.to_vec(), 0.0, "cols round trip");
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_c() {
    let g = G::new();
    let logits = t(&[2, 4], &[0.0; 8]);
    let loss = g.cross_entropy(&logits, &[1, 3]).unwrap();
    assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient_is_probs_minus_onehot_over_batch() {
    let g = G::new();
    let logits = p(&[1, 2], &[0.0, 0.0]);
    let loss = g.cross_entropy(&logits, &[0]).unwrap();
    g.backward(&loss).unwrap();
    assert_close(&logits.grad().unwrap(), &[-0.5, 0.5], 1e-12, "dlogits");
}

#[test]
fn frozen_tensors_accumulate_no_gradient() {
    let g = G::new();
    let frozen = t(&[2], &[1.0, 2.0]);
    let trained = p(&[2], &[3.0, 4.0]);
    let prod = g.mul(&frozen, &trained).unwrap();
    let loss = g.sum_all(&prod).unwrap();
    g.backward(&loss).unwrap();
    assert!(frozen.grad().is_none(), "frozen leaf must stay gradient-free");
    assert_close(&trained.grad().unwrap(), &[1.0, 2.0], 1e-12, "dtrained");
}

#[test]
fn backward_requires_scalar_loss() {
    let g = G::new();
    let x = p(&[2], &[1.0, 2.0]);
    let y = g.mul(&x, &x).unwrap();
    assert!(matches!(g.backward(&y), Err(Error::NonScalarLoss { .. })));
}

#[test]
fn backward_on_empty_graph_is_rejected() {
    let g = G::new();
    let x = Tensor::scalar(1.0f64);
    assert!(matches!(g.backward(&x), Err(Error::EmptyGraph)));
}

#[test]
fn second_backward_without_reset_is_rejected() {
    let g = G::new();
    let x = p(&[2], &[1.0, 2.0]);
    let y = g.mul(&x, &x).unwrap();
    let loss = g.sum_all(&y).unwrap();
    g.backward(&loss).unwrap();
    assert!(matches!(g.backward(&loss), Err(Error::BackwardConsumed)));
}

#[test]
fn reset_allows_a_fresh_pass_and_gradients_accumulate_until_cleared() {
    let x = p(&[2], &[1.0, 2.0]);
    for pass in 1..=2 {
        let g = G::new();
        let y = g.mul(&x, &x).unwrap();
        let loss = g.sum_all(&y).unwrap();
        g.backward(&loss).unwrap();
        let scale = pass as f64;
        assert_close(
            &x.grad().unwrap(),
            &[2.0 * scale, 4.0 * scale],
            1e-12,
            "grads accumulate across passes until cleared",
        );
        g.reset();
    }
    x.clear_grad();
    assert!(x.grad().is_none());
}

#[test]
fn mean_rows_averages_columns() {
    let g = G::new();
    let x = p(&[2, 3], &[1.0, 2.0, 3.0, 3.0, 4.0, 5.0]);
    let m = g.mean_rows(&x).unwrap();
    assert_eq!(m.shape(), &[1, 3]);
    assert_close(&m.to_vec(), &[2.0, 3.0, 4.0], 1e-12, "mean_rows");
    let loss = g.sum_all(&m).unwrap();
    g.backward(&loss).unwrap();
    assert_close(&x.grad().unwrap(), &[0.5; 6], 1e-12, "each row gets 1/m");
}

#[test]
fn scale_rows_weights_each_row() {
    let g = G::new();
    let h = p(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let w = p(&[2], &[0.5, 2.0]);
    let y = g.scale_rows(&h, &w).unwrap();
    assert_close(&y.to_vec(), &[0.5, 1.0, 6.0, 8.0], 0.0, "scale_rows");
    let loss = g.sum_all(&y).unwrap();
    g.backward(&loss).unwrap();
    assert_close(&h.grad().unwrap(), &[0.5, 0.5, 2.0, 2.0], 1e-12, "dh");
    assert_close(&w.grad().unwrap(), &[3.0, 7.0], 1e-12, "dw");
}

#[test]
fn f32_and_f64_graphs_agree_on_small_programs() {
    let xs = [0.25f64, -0.5, 1.5, 0.75];
    let g64 = Graph::<f64>::new();
    let x64 = Tensor::from_vec(&[2, 2], xs.to_vec()).unwrap().trained();
    let y64 = g64.gelu(&x64).unwrap();
    let l64 = g64.sum_all(&y64).unwrap();

    let g32 = Graph::<f32>::new();
    let x32 =
        Tensor::from_vec(&[2, 2], xs.iter().map(|v| *v as f32).collect()).unwrap().trained();
    let y32 = g32.gelu(&x32).unwrap();
    let l32 = g32.sum_all(&y32).unwrap();

    assert!((l64.item() - l32.item() as f64).abs() < 1e-6);
}
