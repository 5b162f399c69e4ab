use mmtrack::numerics::{
    cosine_similarity, finite_difference_gradient, gradient_check, layer_norm, masked_softmax, AdditiveMask, Tensor,
};
use mmtrack::Error;
use proptest::prelude::*;

fn t(v: &[f64]) -> Tensor<f64> {
    Tensor::row_vector(v.to_vec())
}

#[test]
fn softmax_examples() {
    let out = masked_softmax(&t(&[0.0, 2f64.ln()]), &AdditiveMask::open(1, 2)).unwrap();
    assert!((out.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((out.data()[1] - 2.0 / 3.0).abs() < 1e-15);

    let m = AdditiveMask::row_from_open(&[true, false]);
    assert_eq!(masked_softmax(&t(&[5.0, 7.0]), &m).unwrap().data(), &[1.0, 0.0]);

    let m = AdditiveMask::blocked(1, 2);
    assert_eq!(masked_softmax(&t(&[3.0, 3.0]), &m).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn softmax_shape_error() {
    assert!(masked_softmax(&t(&[1.0, 2.0]), &AdditiveMask::open(1, 3)).is_err());
}

#[test]
fn mask_values_are_two_valued() {
    let vals = Tensor::from_rows(1, 2, vec![0.0, f64::NEG_INFINITY]);
    let m = AdditiveMask::from_values(&vals).unwrap();
    assert_eq!(m.to_values::<f64>(), vals);
    assert!(AdditiveMask::from_values(&t(&[0.0, -1.0])).is_err());
}

#[test]
fn layer_norm_examples() {
    let one = |n| Tensor::filled(&[n], 1.0);
    let zero = |n| Tensor::zeros(&[n]);
    let out = layer_norm(&t(&[1.0, 1.0, 1.0, 1.0]), &one(4), &zero(4), 1e-5).unwrap();
    assert_eq!(out.data(), &[0.0; 4]);
    let out = layer_norm(&t(&[1.0, -1.0]), &one(2), &zero(2), 1e-15).unwrap();
    assert!((out.data()[0] - 1.0).abs() < 1e-12 && (out.data()[1] + 1.0).abs() < 1e-12);
    let g = Tensor::filled(&[2], 2.0);
    let b = Tensor::filled(&[2], 1.0);
    let out = layer_norm(&t(&[2.0, 0.0]), &g, &b, 1e-15).unwrap();
    assert!((out.data()[0] - 3.0).abs() < 1e-12 && (out.data()[1] + 1.0).abs() < 1e-12);
    assert!(layer_norm(&t(&[1.0, 2.0]), &one(3), &zero(3), 1e-5).is_err());
}

#[test]
fn cosine_examples() {
    assert!((cosine_similarity::<f64>(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    let v = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
    assert!((v - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    assert!(matches!(
        cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
        Err(Error::Degenerate { .. })
    ));
}

#[test]
fn finite_difference_examples() {
    let g = finite_difference_gradient(|x| x.data()[0] * x.data()[0], &t(&[3.0]), 1e-6).unwrap();
    assert!((g.data()[0] - 6.0).abs() < 1e-6);
    let g = finite_difference_gradient(|_| 4.0, &t(&[1.0, 2.0]), 1e-6).unwrap();
    assert_eq!(g.data(), &[0.0, 0.0]);
    let g = finite_difference_gradient(|x| x.sum(), &t(&[1.0, -2.0, 5.0]), 1e-6).unwrap();
    for v in g.data() {
        assert!((v - 1.0).abs() < 1e-8);
    }
    let err = finite_difference_gradient(|x| x.data()[0].ln(), &t(&[0.0]), 1e-6);
    assert!(matches!(err, Err(Error::NonFinite { .. })));
}

#[test]
fn gradient_check_examples() {
    let r = gradient_check(&t(&[1.0, 2.0]), &t(&[1.0, 2.0]), 1e-5, 0.0).unwrap();
    assert!(r.pass && r.max_rel_error == 0.0 && r.checked_count == 2);
    assert!(gradient_check(&t(&[1.0]), &t(&[1.0001]), 1e-3, 0.0).unwrap().pass);
    let r = gradient_check(&t(&[1.0]), &t(&[2.0]), 1e-3, 1e-6).unwrap();
    assert!(!r.pass);
    assert!(gradient_check(&t(&[1.0]), &t(&[1.0, 2.0]), 1e-3, 1e-6).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_zero_or_one(vals in prop::collection::vec(-30.0f64..30.0, 12),
                                       open in prop::collection::vec(any::<bool>(), 12)) {
        let logits = Tensor::from_rows(3, 4, vals);
        let mask = AdditiveMask::from_blocked(3, 4, open.iter().map(|o| !o).collect()).unwrap();
        let out = masked_softmax(&logits, &mask).unwrap();
        for r in 0..3 {
            let s: f64 = out.row(r).iter().sum();
            if mask.row_blocked(r) {
                prop_assert_eq!(s, 0.0);
            } else {
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            for c in 0..4 {
                if mask.is_blocked(r, c) {
                    prop_assert_eq!(out.at(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn softmax_shift_invariant(vals in prop::collection::vec(-10.0f64..10.0, 8),
                               open in prop::collection::vec(any::<bool>(), 8),
                               shift in -50.0f64..50.0) {
        let logits = Tensor::from_rows(2, 4, vals);
        let mask = AdditiveMask::from_blocked(2, 4, open.iter().map(|o| !o).collect()).unwrap();
        let a = masked_softmax(&logits, &mask).unwrap();
        let b = masked_softmax(&logits.map(|v| v + shift), &mask).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn cosine_scale_invariant(a in prop::collection::vec(-5.0f64..5.0, 6),
                              b in prop::collection::vec(-5.0f64..5.0, 6),
                              s in 0.01f64..100.0, u in 0.01f64..100.0) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let base = cosine_similarity(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
        let ub: Vec<f64> = b.iter().map(|v| v * u).collect();
        let scaled = cosine_similarity(&sa, &ub).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }
}
