mod common;

use common::*;
use proptest::prelude::*;
use superlora::factorization::{
    group_adjoint, init_factors, materialize_group, materialize_split, split_adjoint, CoreKind,
    CoreSpec, FactorizedGroup, InitScheme, SplitFactors, SplitSpec,
};
use superlora::{DenseTensor, Shape};

fn split(kind: CoreKind, ranks: Vec<usize>, dims: Vec<usize>, seed: u64) -> SplitFactors {
    let spec = SplitSpec::new(
        CoreSpec::new(kind, ranks).unwrap(),
        Shape::new(dims).unwrap(),
    )
    .unwrap();
    init_factors(&spec, seed, InitScheme::Gaussian)
}

fn dot(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn identity_core_is_a_times_b_transpose() {
    for seed in 0..20 {
        let (p, q, r) = (
            1 + seed as usize % 8,
            8 - seed as usize % 5,
            1 + seed as usize % 3,
        );
        let s = split(CoreKind::Identity, vec![r, r], vec![p, q], seed);
        let [a, b] = [&s.planes()[0], &s.planes()[1]];
        let oracle = brute_matmul(a, &b.transpose().unwrap());
        assert!(max_abs_diff(&materialize_split(&s).unwrap(), &oracle) < 1e-12);
    }
}

#[test]
fn full_core_matches_six_loops() {
    for seed in 0..10 {
        let s = split(CoreKind::Full, vec![2, 3, 2], vec![4, 5, 3], seed);
        let p = s.planes();
        let core = s.dense_core();
        let oracle = brute_tucker3(&core, &p[0], &p[1], &p[2]);
        assert!(max_abs_diff(&materialize_split(&s).unwrap(), &oracle) < 1e-12);
    }
}

#[test]
fn two_splits_match_direct_kronecker() {
    for seed in 0..10 {
        let a = split(CoreKind::Full, vec![2, 2], vec![2, 3], seed);
        let b = split(CoreKind::Identity, vec![2, 2], vec![4, 2], seed + 9);
        let oracle = brute_kron(
            &materialize_split(&a).unwrap(),
            &materialize_split(&b).unwrap(),
        );
        let g = FactorizedGroup::new(vec![a, b]).unwrap();
        assert!(max_abs_diff(&materialize_group(&g).unwrap(), &oracle) < 1e-12);
    }
}

#[test]
fn unit_diagonal_core_equals_identity_core() {
    for seed in 0..10 {
        let id = split(CoreKind::Identity, vec![3; 3], vec![4, 2, 5], seed);
        let diag_spec = SplitSpec::new(
            CoreSpec::new(CoreKind::Diagonal, vec![3; 3]).unwrap(),
            Shape::new(vec![4, 2, 5]).unwrap(),
        )
        .unwrap();
        let diag = SplitFactors::new(diag_spec, vec![1.0; 3], id.planes().to_vec()).unwrap();
        let diff = max_abs_diff(
            &materialize_split(&id).unwrap(),
            &materialize_split(&diag).unwrap(),
        );
        assert!(diff < 1e-12);
    }
}

fn kinds() -> impl Strategy<Value = CoreKind> {
    prop_oneof![
        Just(CoreKind::Identity),
        Just(CoreKind::Diagonal),
        Just(CoreKind::Full)
    ]
}

proptest! {
    #[test]
    fn scaling_one_plane_scales_output(kind in kinds(), seed in any::<u64>(), mode in 0usize..3, c in -3.0f64..3.0) {
        let s = split(kind, vec![2; 3], vec![3, 4, 2], seed);
        let base = materialize_split(&s).unwrap();
        let mut planes = s.planes().to_vec();
        planes[mode] = planes[mode].scale(c);
        let scaled = SplitFactors::new(s.spec().clone(), s.core_values().to_vec(), planes).unwrap();
        prop_assert!(max_abs_diff(&materialize_split(&scaled).unwrap(), &base.scale(c)) < 1e-12);
    }

    #[test]
    fn additive_in_each_plane(kind in kinds(), seed in any::<u64>(), mode in 0usize..2) {
        let s = split(kind, vec![2, 2], vec![3, 5], seed);
        let t = split(kind, vec![2, 2], vec![3, 5], seed ^ 0xff);
        let mut sum_planes = s.planes().to_vec();
        let summed: Vec<f64> = s.planes()[mode].data().iter().zip(t.planes()[mode].data()).map(|(a, b)| a + b).collect();
        sum_planes[mode] = DenseTensor::new(s.planes()[mode].shape().clone(), summed).unwrap();
        let mut t_planes = s.planes().to_vec();
        t_planes[mode] = t.planes()[mode].clone();
        let core = s.core_values().to_vec();
        let f = |planes: Vec<DenseTensor>| materialize_split(&SplitFactors::new(s.spec().clone(), core.clone(), planes).unwrap()).unwrap();
        let lhs = f(sum_planes);
        let a = f(s.planes().to_vec());
        let b = f(t_planes);
        let rhs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        prop_assert!(max_abs_diff(&lhs, &DenseTensor::new(lhs.shape().clone(), rhs).unwrap()) < 1e-12);
    }

    /// Output is linear in each factor separately, so <f(x), G> = <x, f*(G)>.
    #[test]
    fn split_adjoint_identity(kind in kinds(), seed in any::<u64>(), order in 2usize..4) {
        let dims: Vec<usize> = [3, 4, 2][..order].to_vec();
        let s = split(kind, vec![2; order], dims.clone(), seed);
        let g = random_tensor(&dims, seed ^ 7);
        let grads = split_adjoint(&s, &g).unwrap();
        let inner = dot(&materialize_split(&s).unwrap(), &g);
        for (m, p) in s.planes().iter().enumerate() {
            prop_assert!((dot(p, &grads.planes[m]) - inner).abs() < 1e-10 * inner.abs().max(1.0));
        }
        if kind != CoreKind::Identity {
            let c: f64 = s.core_values().iter().zip(&grads.core).map(|(a, b)| a * b).sum();
            prop_assert!((c - inner).abs() < 1e-10 * inner.abs().max(1.0));
        } else {
            prop_assert!(grads.core.is_empty());
        }
    }

    #[test]
    fn group_adjoint_identity(kind in kinds(), seed in any::<u64>(), k in 1usize..4) {
        let splits: Vec<SplitFactors> = (0..k).map(|i| split(kind, vec![2, 2], vec![2 + i, 3 - i % 2], seed + i as u64)).collect();
        let g = FactorizedGroup::new(splits).unwrap();
        let out = materialize_group(&g).unwrap();
        let upstream = random_tensor(out.dims(), seed ^ 3);
        let inner = dot(&out, &upstream);
        for (s, grads) in g.splits().iter().zip(group_adjoint(&g, &upstream).unwrap()) {
            let pairing: f64 = s.planes()[0].data().iter().zip(grads.planes[0].data()).map(|(a, b)| a * b).sum();
            prop_assert!((pairing - inner).abs() < 1e-10 * inner.abs().max(1.0));
        }
    }
}
