use mutatt_core::gradcheck::{finite_difference_check, DEFAULT_STEP};
use mutatt_core::graph::softmax_values;
use mutatt_core::{Graph, ParamSet, Tensor, Var};
use proptest::prelude::*;

fn values_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..16).prop_flat_map(|n| {
        (
            prop::collection::vec(-800.0f64..800.0, n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
        )
            .prop_map(|(x, mut m, keep)| {
                m[keep] = true;
                (x, m)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_sums_to_one_and_zeroes_masked((x, mask) in values_and_mask()) {
        let p = softmax_values(&x, Some(&mask)).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "sum {total}");
        for (pi, &m) in p.iter().zip(&mask) {
            prop_assert!(pi.is_finite() && *pi >= 0.0);
            if !m {
                prop_assert_eq!(*pi, 0.0);
            }
        }
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(x.clone()));
        let s = g.softmax(v, Some(&mask)).unwrap();
        prop_assert_eq!(g.value(s).data(), p.as_slice());
    }

    #[test]
    fn cosine_is_bounded(
        a in prop::collection::vec(-1e3f64..1e3, 1..12),
        scale in prop_oneof![Just(1e-9), Just(1.0), Just(1e6)],
        noise in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| scale * x + n).collect();
        let mut g = Graph::new();
        let va = g.constant(Tensor::vector(a.clone()));
        let vb = g.constant(Tensor::vector(b));
        let c = g.cosine(va, vb).unwrap();
        let c = g.scalar(c);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c), "cos {c}");
        let self_cos = g.cosine(va, va).unwrap();
        let self_cos = g.scalar(self_cos);
        prop_assert!(self_cos == 0.0 || (self_cos - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn softmax_with_every_position_masked_is_an_error() {
    assert!(softmax_values(&[1.0, 2.0], Some(&[false, false])).is_err());
}

#[test]
fn constants_beside_variables_receive_no_gradient() {
    // Each op once, on a mix of variables and constants.
    let mut g = Graph::new();
    let w = g.variable(Tensor::matrix(2, 3, vec![0.1, -0.4, 0.3, 0.7, 0.2, -0.5]));
    let c = g.constant(Tensor::matrix(3, 2, vec![1.0, 0.5, -0.3, 0.2, 0.9, -1.1]));
    let row = g.constant(Tensor::vector(vec![0.3, -0.2]));
    let y = g.matmul(w, c).unwrap();
    let y = g.add_row(y, row).unwrap();
    let y = g.tanh(y);
    let y = g.relu(y);
    let flat = g.reshape(y, &[4]).unwrap();
    let p = g.softmax(flat, None).unwrap();
    let q = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
    let cos = g.cosine(p, q).unwrap();
    let dot = g.dot(p, q).unwrap();
    let loss = g.add(cos, dot).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(w).data().iter().any(|v| *v != 0.0));
    for v in [c, row, q] {
        assert!(g.grad(v).data().iter().all(|x| *x == 0.0));
    }
}

#[test]
fn gradients_of_a_composite_match_finite_differences() {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 1.37).sin()).collect()));
    p.insert("b", Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.71 + 0.3).cos()).collect()));
    let build = |g: &mut Graph, v: &[Var]| {
        let y = g.matmul(v[0], v[1])?;
        Ok(g.sum(y))
    };
    let report = finite_difference_check(build, &p, DEFAULT_STEP).unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}
