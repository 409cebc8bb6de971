use granlab_core::moe::{make_config, sample_inputs, top_k_indices, Activation, Gating, InputDistribution};
use granlab_core::spectral::{svd, sym_eig};
use granlab_core::trainer::{init_student, loss_and_grads};
use granlab_core::{Matrix, SeedStream};
use proptest::prelude::*;

fn activation(i: u8) -> Activation {
    [Activation::Constant, Activation::Linear, Activation::Relu][i as usize % 3]
}

fn gating(i: u8) -> Gating {
    [Gating::EqualHard, Gating::SoftmaxTopK][i as usize % 2]
}

#[test]
fn ties_go_to_the_lower_index() {
    let mut order = Vec::new();
    top_k_indices(&[1.0, 3.0, 3.0, 1.0, 3.0], 2, &mut order);
    assert_eq!(order, vec![1, 2]);
    top_k_indices(&[0.0; 4], 3, &mut order);
    assert_eq!(order, vec![0, 1, 2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batch_forward_matches_rows(m in 2usize..7, w in 1usize..4, d in 1usize..7, act in 0u8..3, gate in 0u8..2, seed in any::<u64>()) {
        let k = 1 + (seed as usize) % (m - 1);
        let cfg = make_config(m, k, w, d, activation(act), gating(gate), seed % 2 == 0).unwrap();
        let layer = init_student(cfg, Some(0.7), seed).unwrap();
        let xs = sample_inputs(&InputDistribution::gaussian(d), 9, SeedStream::new(seed ^ 1));
        let ys = layer.forward_batch(&xs).unwrap();
        for i in 0..xs.rows() {
            let y = layer.forward(xs.row(i)).unwrap();
            prop_assert_eq!(ys.row(i), y.as_slice());
        }
    }

    #[test]
    fn student_equal_to_teacher_has_zero_loss_and_gradient(m in 2usize..6, d in 1usize..6, act in 0u8..3, gate in 0u8..2, seed in any::<u64>()) {
        let cfg = make_config(m, 1 + (seed as usize) % (m - 1), 2, d, activation(act), gating(gate), seed % 3 == 0).unwrap();
        let layer = init_student(cfg, Some(1.0), seed).unwrap();
        let xs = sample_inputs(&InputDistribution::ball(d), 7, SeedStream::new(seed));
        let ys = layer.forward_batch(&xs).unwrap();
        let (loss, grads) = loss_and_grads(&layer, &xs, &ys).unwrap();
        prop_assert_eq!(loss, 0.0);
        prop_assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn svd_tail_matches_gram_eigen_tail(rows in 1usize..9, cols in 1usize..9, kappa in 0usize..9, seed in any::<u64>()) {
        let a: Matrix = sample_inputs(&InputDistribution::gaussian(cols), rows, SeedStream::new(seed));
        let from_svd = svd(&a).unwrap().tail_sq(kappa);
        let from_eig = sym_eig(&a.gram()).unwrap().tail_sum(kappa.min(cols));
        prop_assert!((from_svd - from_eig).abs() <= 1e-10 * a.frobenius_sq().max(1e-300));
    }
}
