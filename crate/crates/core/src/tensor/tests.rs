use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::relative_error;
use super::*;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * p + j];
            }
            out[i * p + j] = acc;
        }
    }
    out
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_identity_and_dot() {
    let tape = Tape::<f64>::new();
    let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = tape.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(eye.matmul(&b).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    let row = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let col = tape.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
    let c = row.matmul(&col).unwrap();
    assert_eq!(c.shape(), vec![1, 1]);
    assert_eq!(c.to_vec(), vec![11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = (random(&mut rng, 12), random(&mut rng, 8));
    let tape = Tape::<f64>::new();
    let ta = tape.constant(&[3, 4], a.clone()).unwrap();
    let tb = tape.constant(&[4, 2], b.clone()).unwrap();
    let got = ta.matmul(&tb).unwrap().to_vec();
    let want = naive_matmul(&a, &b, 3, 4, 2);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-6);
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::<f32>::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    match a.matmul(&b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn batched_matmul_broadcasts_leading_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (random(&mut rng, 2 * 3 * 4), random(&mut rng, 4 * 5));
    let tape = Tape::<f64>::new();
    let ta = tape.constant(&[2, 3, 4], a.clone()).unwrap();
    let tb = tape.constant(&[1, 4, 5], b.clone()).unwrap();
    let out = ta.matmul(&tb).unwrap();
    assert_eq!(out.shape(), vec![2, 3, 5]);
    let got = out.to_vec();
    for batch in 0..2 {
        let want = naive_matmul(&a[batch * 12..(batch + 1) * 12], &b, 3, 4, 5);
        for (g, w) in got[batch * 15..(batch + 1) * 15].iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f64>::new();
    let u = tape.constant(&[3], vec![0.0; 3]).unwrap().softmax(0).unwrap().to_vec();
    for v in u {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let big = tape
        .constant(&[2], vec![1000.0, 1000.0])
        .unwrap()
        .softmax(0)
        .unwrap()
        .to_vec();
    assert_eq!(big, vec![0.5, 0.5]);
    let r = tape
        .constant(&[2], vec![0.0, 2f64.ln()])
        .unwrap()
        .softmax(0)
        .unwrap()
        .to_vec();
    assert!((r[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((r[1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_along_inner_axis() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(&[2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
    let s = x.softmax(0).unwrap().to_vec();
    for v in s {
        assert!((v - 0.5).abs() < 1e-12);
    }
    assert!(x.softmax(2).is_err());
}

#[test]
fn elementwise_examples() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
    let b = tape.constant(&[2], vec![3.0, 4.0]).unwrap();
    assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
    assert_eq!(tape.constant(&[1], vec![0.0]).unwrap().gelu().to_vec(), vec![0.0]);
    let mismatched = tape.constant(&[3], vec![0.0; 3]).unwrap();
    assert!(matches!(a.add(&mismatched), Err(Error::Dimension { .. })));
}

#[test]
fn embedding_accumulates_duplicate_ids() {
    let tape = Tape::<f64>::new();
    let table = tape.var("table", &[3, 2], vec![0.0; 6]).unwrap();
    let rows = table.embedding(&[0, 0]).unwrap();
    let grads = rows.sum().backward().unwrap();
    assert_eq!(grads.get(&table).unwrap(), &[2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(matches!(table.embedding(&[3]), Err(Error::Index { .. })));
}

#[test]
fn backward_simple_cases() {
    let tape = Tape::<f64>::new();
    let x = tape.var("x", &[3], vec![1.0, 2.0, 3.0]).unwrap();
    let g = x.sum().backward().unwrap();
    assert_eq!(g.get(&x).unwrap(), &[1.0, 1.0, 1.0]);

    let y = tape.var("y", &[2], vec![1.0, 2.0]).unwrap();
    let g = y.mul(&y).unwrap().sum().backward().unwrap();
    assert_eq!(g.get(&y).unwrap(), &[2.0, 4.0]);

    assert!(matches!(x.backward(), Err(Error::Contract(_))));
}

#[test]
fn backward_twice_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tape = Tape::<f32>::new();
    let a = tape
        .var(
            "a",
            &[4, 5],
            random(&mut rng, 20).into_iter().map(|v| v as f32).collect(),
        )
        .unwrap();
    let b = tape
        .var(
            "b",
            &[5, 3],
            random(&mut rng, 15).into_iter().map(|v| v as f32).collect(),
        )
        .unwrap();
    let loss = a.matmul(&b).unwrap().gelu().softmax(1).unwrap().mean();
    let first = loss.backward().unwrap().into_grad_map();
    let second = loss.backward().unwrap().into_grad_map();
    assert_eq!(first, second);
}

#[test]
fn finite_diff_trivial_cases() {
    let mut store = ParamStore::<f64>::new();
    store.insert("p", &[1], vec![3.0], true).unwrap();
    let report = finite_diff_check(|b| Ok(b.get("p")?.mul(&b.get("p")?)?.sum()), &store, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
    assert!((report.numeric - 6.0).abs() < 1e-8);

    // Constant objective: zero analytic and numeric gradient.
    let report = finite_diff_check(|b| Ok(b.get("p")?.scale(0.0).sum()), &store, 1e-5).unwrap();
    assert_eq!(report.max_rel_error, 0.0);
    assert_eq!(relative_error(0.0, 0.0), 0.0);

    assert!(finite_diff_check(|b| Ok(b.get("p")?.sum()), &store, 0.0).is_err());
    let nan = finite_diff_check(|b| Ok(b.get("p")?.scale(f64::NAN).sum()), &store, 1e-5);
    assert!(matches!(nan, Err(Error::Numeric(_))));
}

fn store_with(entries: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in entries {
        let n = numel(shape);
        store.insert(*name, shape, random(&mut rng, n), true).unwrap();
    }
    store
}

fn assert_gradcheck<F>(store: &ParamStore<f64>, f: F)
where
    F: for<'t, 's> Fn(&ParamBinding<'t, 's, f64>) -> crate::Result<Tensor<'t, f64>>,
{
    let report = finite_diff_check(f, store, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

// A fixed weighting keeps every output element contributing distinctly.
fn weighted_sum<'t>(x: Tensor<'t, f64>) -> crate::Result<Tensor<'t, f64>> {
    let n = x.numel();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect();
    let w = x.tape().constant(&x.shape(), w)?;
    Ok(x.mul(&w)?.sum())
}

#[test]
fn gradcheck_each_op() {
    let s = store_with(&[("a", &[2, 3, 4]), ("b", &[4, 3]), ("c", &[3]), ("d", &[2, 3, 4])], 5);
    assert_gradcheck(&s, |p| weighted_sum(p.get("a")?.matmul(&p.get("b")?)?));
    assert_gradcheck(&s, |p| weighted_sum(p.get("a")?.add(&p.get("d")?)?));
    assert_gradcheck(&s, |p| weighted_sum(p.get("b")?.add(&p.get("c")?)?));
    assert_gradcheck(&s, |p| weighted_sum(p.get("a")?.mul(&p.get("d")?)?));
    assert_gradcheck(&s, |p| weighted_sum(p.get("b")?.mul(&p.get("c")?)?));
    assert_gradcheck(&s, |p| weighted_sum(p.get("a")?.scale(-1.7)));
    assert_gradcheck(&s, |p| weighted_sum(p.get("a")?.scale(3.0).gelu()));
    assert_gradcheck(&s, |p| weighted_sum(p.get("a")?.reshape(&[6, 4])?));
    assert_gradcheck(&s, |p| weighted_sum(p.get("a")?.transpose(0, 2)?));
    assert_gradcheck(&s, |p| weighted_sum(Tensor::concat(&[p.get("a")?, p.get("d")?], 1)?));
    assert_gradcheck(&s, |p| weighted_sum(p.get("a")?.slice(2, 1, 3)?));
    assert_gradcheck(&s, |p| Ok(p.get("a")?.mean()));
    assert_gradcheck(&s, |p| weighted_sum(p.get("a")?.softmax(1)?));
    assert_gradcheck(&s, |p| weighted_sum(p.get("a")?.softmax(2)?));
    assert_gradcheck(&s, |p| weighted_sum(p.get("b")?.embedding(&[2, 0, 2])?));
    assert_gradcheck(&s, |p| {
        let x = p.get("a")?.reshape(&[6, 4])?;
        weighted_sum(x.layer_norm(
            &p.get("b")?.slice(1, 0, 1)?.reshape(&[4])?,
            &p.get("b")?.slice(1, 1, 2)?.reshape(&[4])?,
            1e-5,
        )?)
    });
    assert_gradcheck(&s, |p| {
        p.get("a")?.reshape(&[6, 4])?.cross_entropy(&[0, 3, 9, 1, 2, 9], 9)
    });
}

#[test]
fn corrupted_rules_fail_gradcheck() {
    let s = store_with(&[("a", &[3, 4]), ("g", &[4]), ("b", &[4])], 2);
    let gelu = finite_diff_check(
        |p| {
            p.tape().inject_fault(Some(BackwardFault::Gelu));
            weighted_sum(p.get("a")?.gelu())
        },
        &s,
        1e-5,
    )
    .unwrap();
    assert!(gelu.max_rel_error > 1e-3);
    let ln = finite_diff_check(
        |p| {
            p.tape().inject_fault(Some(BackwardFault::LayerNorm));
            weighted_sum(p.get("a")?.layer_norm(&p.get("g")?, &p.get("b")?, 1e-5)?)
        },
        &s,
        1e-5,
    )
    .unwrap();
    assert!(ln.max_rel_error > 1e-3);
}

#[test]
fn cross_entropy_all_pad_is_rejected() {
    let tape = Tape::<f64>::new();
    let z = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(z.cross_entropy(&[0, 0], 0), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn matmul_agrees_with_naive(m in 1usize..=8, k in 1usize..=8, p in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&mut rng, m * k), random(&mut rng, k * p));
        let tape = Tape::<f64>::new();
        let got = tape.constant(&[m, k], a.clone()).unwrap()
            .matmul(&tape.constant(&[k, p], b.clone()).unwrap()).unwrap().to_vec();
        let want = naive_matmul(&a, &b, m, k, p);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let tape = Tape::<f32>::new();
        let s = tape.constant(&[rows, cols], data).unwrap().softmax(1).unwrap().to_vec();
        for row in s.chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
