//! Dense tensors, compute kernels, and tape-based reverse-mode autodiff.

mod graph;
pub mod kernels;
mod optim;
mod tensor;

use std::collections::BTreeSet;

pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Keeps freed tape buffers in the process heap instead of returning them to
/// the OS. Training rebuilds a graph of the same shape every step, and on glibc
/// the default thresholds make each step page-fault its buffers back in.
/// Process-wide and idempotent; a no-op on other platforms.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

/// Copy of `x` with the given last-axis columns set to exactly zero.
pub fn mask_columns(x: &Tensor, dims: &BTreeSet<usize>) -> Result<Tensor> {
    let c = x.last_dim();
    if let Some(&d) = dims.iter().find(|&&d| d >= c) {
        return Err(Error::DimensionOutOfRange { dim: d, extent: c });
    }
    let mut out = x.data().to_vec();
    if !dims.is_empty() {
        for row in out.chunks_exact_mut(c) {
            for &d in dims {
                row[d] = 0.0;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_known_product() {
        let a = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let id = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&id).unwrap(), a);
        let b = mat(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let expected = naive_matmul(&a, &b);
        assert_eq!(expected, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &expected[..]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn matmul_matches_naive_on_rectangular_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[7, 5], &mut rng);
        let b = Tensor::randn(&[5, 9], &mut rng);
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let c = Tensor::full(&[4], 5.0);
        assert_eq!(c.layer_norm(1e-6).unwrap(), Tensor::zeros(&[4]));
        let two = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        assert_eq!(two.layer_norm(0.0).unwrap().data(), &[-1.0, 1.0]);
        assert!(matches!(
            Tensor::zeros(&[3, 1]).layer_norm(1e-6),
            Err(Error::DegenerateAxis { .. })
        ));
    }

    #[test]
    fn layer_norm_moments_on_random_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[16], &mut rng).scale(3.0).unwrap();
        let y = x.layer_norm(0.0).unwrap();
        let mean = y.mean();
        let var = y
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(x.softmax_rows().unwrap().data(), &[0.5, 0.5]);
        let y = Tensor::new(vec![2], vec![0.0, 3f64.ln()])
            .unwrap()
            .softmax_rows()
            .unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn silu_examples() {
        let x = Tensor::new(vec![3], vec![0.0, 50.0, 1.0]).unwrap();
        let y = x.silu().unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 50.0).abs() < 1e-9);
        let expected = 1.0 / (1.0 + (-1f64).exp());
        assert!((y.data()[2] - expected).abs() < 1e-15);
        assert!((y.data()[2] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn mask_columns_semantics() {
        let x = Tensor::full(&[4, 4], 1.0);
        let y = mask_columns(&x, &BTreeSet::from([2])).unwrap();
        assert_eq!(y.data().iter().filter(|&&v| v == 1.0).count(), 12);
        assert!((0..4).all(|r| y.row(r)[2] == 0.0));
        assert!(mask_columns(&x, &BTreeSet::from([4])).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_for_large_inputs(
            v in proptest::collection::vec(-1e4f64..1e4, 1..32)
        ) {
            let x = Tensor::new(vec![v.len()], v).unwrap();
            let y = x.softmax_rows().unwrap();
            prop_assert!((y.sum() - 1.0).abs() < 1e-12);
            prop_assert!(y.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn softmax_is_shift_invariant(v in proptest::collection::vec(-20f64..20.0, 1..16)) {
            let x = Tensor::new(vec![v.len()], v).unwrap();
            let shifted = x.map("shift", |a| a + 7.0).unwrap();
            let (a, b) = (x.softmax_rows().unwrap(), shifted.softmax_rows().unwrap());
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn matmul_identity_and_distributivity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[8, 8], &mut rng);
            let b = Tensor::randn(&[8, 8], &mut rng);
            let c = Tensor::randn(&[8, 8], &mut rng);
            let id = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 }).unwrap();
            prop_assert!(a.matmul(&id).unwrap().max_abs_diff(&a) < 1e-10);
            prop_assert!(id.matmul(&a).unwrap().max_abs_diff(&a) < 1e-10);
            let lhs = a.matmul(&b.add(&c).unwrap()).unwrap();
            let rhs = a.matmul(&b).unwrap().add(&a.matmul(&c).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }

        #[test]
        fn masking_is_idempotent_and_composes(
            seed in any::<u64>(),
            d in proptest::collection::btree_set(0usize..8, 0..8),
            e in proptest::collection::btree_set(0usize..8, 0..8),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[5, 8], &mut rng);
            let once = mask_columns(&x, &d).unwrap();
            prop_assert!(mask_columns(&once, &d).unwrap().bit_eq(&once));
            let de = mask_columns(&once, &e).unwrap();
            let ed = mask_columns(&mask_columns(&x, &e).unwrap(), &d).unwrap();
            let union: BTreeSet<usize> = d.union(&e).copied().collect();
            prop_assert!(de.bit_eq(&mask_columns(&x, &union).unwrap()));
            prop_assert!(de.bit_eq(&ed));
        }
    }
}
