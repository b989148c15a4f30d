//! Property tests over the core invariants.

use lmd::potentials::{
    backward_map, bregman, checkpoint_from_string, checkpoint_to_string, BackwardMap,
    IcnnPotential, MirrorPair, MirrorPotential, ScalarMlp,
};
use lmd::solvers::StepSchedule;
use lmd::tape::TapeGraph;
use lmd::tensor::Tensor;
use proptest::prelude::*;

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

fn simplex_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tape_primals_match_tensor_ops_bitwise(a in finite_vec(6), b in finite_vec(6)) {
        let ta = Tensor::vector(a);
        let tb = Tensor::vector(b);
        let mut tape = TapeGraph::new();
        let na = tape.leaf(ta.clone());
        let nb = tape.leaf(tb.clone());
        let sum = tape.add(na, nb).unwrap();
        let prod = tape.mul(sum, na).unwrap();
        let root = tape.sum_reduce(prod).unwrap();
        let free = ta.add(&tb).unwrap().mul(&ta).unwrap().sum();
        prop_assert_eq!(tape.primal(root).scalar_value().to_bits(), free.to_bits());
    }

    #[test]
    fn bregman_nonnegative_euclidean_quadratic(x in finite_vec(4), y in finite_vec(4)) {
        let p = MirrorPotential::Euclidean { dim: 4 };
        let tx = Tensor::vector(x);
        let ty = Tensor::vector(y);
        prop_assert!(bregman(&p, &tx, &ty).unwrap() >= -1e-9);
        let a = Tensor::matrix(4, 4, vec![
            3.0, 0.5, 0.0, 0.2,
            0.5, 2.0, 0.3, 0.0,
            0.0, 0.3, 2.5, 0.1,
            0.2, 0.0, 0.1, 1.5,
        ]).unwrap();
        let q = MirrorPotential::Quadratic { a };
        prop_assert!(bregman(&q, &tx, &ty).unwrap() >= -1e-9);
    }

    #[test]
    fn entropic_inverse_pair_and_simplex_range(x in simplex_vec(5), y in finite_vec(5)) {
        let p = MirrorPotential::Entropic { dim: 5 };
        let tx = Tensor::vector(x);
        let dual = lmd::potentials::forward_map(&p, &tx).unwrap();
        let back = backward_map(&BackwardMap::ExactConjugate, &p, &dual).unwrap();
        prop_assert!(back.sub(&tx).unwrap().norm_linf() < 1e-12);
        // arbitrary dual points still land on the simplex
        let z = backward_map(&BackwardMap::ExactConjugate, &p, &Tensor::vector(y)).unwrap();
        prop_assert!((z.sum() - 1.0).abs() < 1e-12);
        prop_assert!(z.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn learned_schedule_stays_in_clip_interval(
        values in prop::collection::vec(1e-5f64..10.0, 1..12),
        k in 1usize..40,
    ) {
        let sched = StepSchedule::learned(values, (1e-3, 1e-1));
        let t = sched.step(k);
        prop_assert!((1e-3..=1e-1).contains(&t));
    }

    #[test]
    fn checkpoint_round_trip_is_exact(seed in 0u64..1000) {
        let mut r = lmd::rng::seeded(seed);
        let net = IcnnPotential::init(3, 4, 0.05, &mut r);
        let mlp = ScalarMlp::init(3, 4, 0.05, &mut r);
        let pair = MirrorPair::new(
            MirrorPotential::Icnn(net),
            BackwardMap::GradientOfNetwork(mlp),
            (1e-3, 1e-1),
        )
        .unwrap();
        let sched: Vec<f64> = lmd::rng::uniform_vec(&mut r, 5, 1e-3, 1e-1);
        let text = checkpoint_to_string(&pair, Some(&sched));
        let (pair2, sched2) = checkpoint_from_string(&text).unwrap();
        prop_assert_eq!(pair, pair2);
        prop_assert_eq!(sched, sched2.unwrap());
    }
}
