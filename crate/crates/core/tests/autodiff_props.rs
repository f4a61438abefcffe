use bvqa_core::autodiff::concat;
use bvqa_core::{Error, Tape, Tensor, Var};
use proptest::prelude::*;

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, len)
}

fn loss_a<'t>(w: Var<'t>, y: &[f64]) -> bvqa_core::Result<Var<'t>> {
    let y = w.tape().constant(Tensor::vector(y.to_vec()))?;
    w.mul(y)?.sigmoid()?.sum()
}

fn loss_b(w: Var<'_>) -> bvqa_core::Result<Var<'_>> {
    w.tanh()?.square()?.mean()
}

proptest! {
    #[test]
    fn gradient_of_sum_equals_sum_of_gradients(x in vec_strategy(5), y in vec_strategy(5)) {
        let separate = {
            let ta = Tape::new();
            let wa = ta.param(Tensor::vector(x.clone())).unwrap();
            let ga = ta.backward(loss_a(wa, &y).unwrap()).unwrap().wrt(wa);
            let tb = Tape::new();
            let wb = tb.param(Tensor::vector(x.clone())).unwrap();
            let gb = tb.backward(loss_b(wb).unwrap()).unwrap().wrt(wb);
            ga.zip_map(&gb, |a, b| a + b).unwrap()
        };
        let tape = Tape::new();
        let w = tape.param(Tensor::vector(x.clone())).unwrap();
        let total = loss_a(w, &y).unwrap().add(loss_b(w).unwrap()).unwrap();
        let joint = tape.backward(total).unwrap().wrt(w);
        for (a, b) in joint.data().iter().zip(separate.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn repeated_computation_is_bit_identical(x in vec_strategy(6), m in vec_strategy(6)) {
        let run = || {
            let tape = Tape::new();
            let a = tape.param(Tensor::matrix(2, 3, x.clone()).unwrap()).unwrap();
            let b = tape.param(Tensor::matrix(3, 2, m.clone()).unwrap()).unwrap();
            let loss = a.matmul(b).unwrap().softplus().unwrap().std().unwrap();
            let value = loss.item().unwrap();
            let g = tape.backward(loss).unwrap();
            (value.to_bits(), g.wrt(a), g.wrt(b))
        };
        let (v1, a1, b1) = run();
        let (v2, a2, b2) = run();
        prop_assert_eq!(v1, v2);
        prop_assert_eq!(a1, a2);
        prop_assert_eq!(b1, b2);
    }
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let zero = tape.scalar(0.0).unwrap();
    assert_eq!(zero.sigmoid().unwrap().item().unwrap(), 0.5);
    assert_eq!(zero.exp().unwrap().item().unwrap(), 1.0);
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = tape.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
    assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
}

#[test]
fn domain_errors_instead_of_nan() {
    let tape = Tape::new();
    let neg = tape.constant(Tensor::vector(vec![-1.0])).unwrap();
    assert!(matches!(neg.log(), Err(Error::Domain { .. })));
    assert!(matches!(neg.sqrt(), Err(Error::Domain { .. })));
    let zero = tape.constant(Tensor::vector(vec![0.0])).unwrap();
    assert!(matches!(neg.div(zero), Err(Error::Domain { .. })));
    let big = tape.constant(Tensor::vector(vec![1e308])).unwrap();
    assert!(matches!(big.mul_scalar(10.0), Err(Error::NonFinite { .. })));
}

#[test]
fn restricted_broadcasting() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let s = tape.scalar(2.0).unwrap();
    assert_eq!(v.mul(s).unwrap().value().data(), &[2.0, 4.0, 6.0]);
    let w = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(v.add(w), Err(Error::ShapeMismatch { .. })));
    let row = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    assert!(v.add(row).is_err());
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let w = tape.param(Tensor::vector(vec![0.3, -2.0, 5.0])).unwrap();
    let g = tape.backward(w.sum().unwrap()).unwrap();
    assert_eq!(g.wrt(w).data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let w = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let g = tape.backward(w.square().unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.wrt(w).data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_consumes_tape() {
    let tape = Tape::new();
    let w = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    let loss = w.sum().unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(w.exp(), Err(Error::TapeConsumed)));
    assert!(tape.backward(loss).is_err());
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let tape = Tape::new();
    let a = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
    let b = tape.param(Tensor::from_rows(&[vec![5.0, 6.0, 7.0], vec![8.0, 9.0, 10.0]]).unwrap()).unwrap();
    let g = tape.backward(a.matmul(b).unwrap().sum().unwrap()).unwrap();
    // ones[2×3] · Bᵀ: every row is the row sums of B
    assert_eq!(g.wrt(a).data(), &[18.0, 27.0, 18.0, 27.0]);
    // Aᵀ · ones[2×3]: every column is the column sums of A
    assert_eq!(g.wrt(b).data(), &[4.0, 4.0, 4.0, 6.0, 6.0, 6.0]);
}

#[test]
fn min_routes_gradient_to_first_minimum() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![3.0, 1.0, 2.0, 1.0])).unwrap();
    let (m, idx) = x.min_with_index().unwrap();
    assert_eq!((m.item().unwrap(), idx), (1.0, 1));
    let g = tape.backward(m).unwrap();
    assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn reductions_on_constants() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![2.0; 3])).unwrap();
    assert_eq!(x.mean().unwrap().item().unwrap(), 2.0);
    let sd = x.std().unwrap();
    assert_eq!(sd.item().unwrap(), 0.0);
    assert!(tape.backward(sd).unwrap().wrt(x).is_finite());
}

#[test]
fn concat_stacks_scalars_and_vectors() {
    let tape = Tape::new();
    let a = tape.scalar(1.0).unwrap();
    let b = tape.constant(Tensor::vector(vec![2.0, 3.0])).unwrap();
    assert_eq!(concat(&[a, b]).unwrap().value().data(), &[1.0, 2.0, 3.0]);
}
