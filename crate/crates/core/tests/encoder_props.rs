use cirsnn::encoders::{delta_encode, delta_encode_sample};
use cirsnn::pipeline::{Method, Model, ModelSpec};
use cirsnn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn signal() -> impl Strategy<Value = (Vec<f64>, usize, usize)> {
    (2usize..12, 1usize..6).prop_flat_map(|(t, b)| (prop::collection::vec(-5.0..5.0f64, t * b), Just(t), Just(b)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_is_odd_and_ternary((x, t, b) in signal()) {
        let d = delta_encode(&x, t, b).unwrap();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let dn = delta_encode(&neg, t, b).unwrap();
        prop_assert!(d.iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
        prop_assert!(d[..b].iter().all(|&v| v == 0.0));
        for (p, q) in d.iter().zip(&dn) {
            prop_assert_eq!(*p, -*q);
        }
    }

    #[test]
    fn delta_sample_keeps_shape(n in 1usize..4, r in 1usize..4, w in 2usize..7, seed in any::<u64>()) {
        let x = Tensor::uniform(&[2, n, r, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let d = delta_encode_sample(&x).unwrap();
        prop_assert_eq!(d.shape(), x.shape());
    }
}

#[test]
fn encoders_stay_in_their_alphabets() {
    let shape = [2, 4, 4, 8];
    let batch = Tensor::uniform(&[4, 2, 4, 4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3)).map(f64::abs);
    for (method, alphabet) in [(Method::Scae, &[0.0, 1.0][..]), (Method::Cae, &[-1.0, 0.0, 1.0]), (Method::Delta, &[-1.0, 0.0, 1.0])] {
        for seed in 0..4 {
            let model = Model::new(ModelSpec::new(method, shape, seed)).unwrap();
            let e = model.encode(&batch).unwrap().unwrap();
            assert_eq!(e.shape(), batch.shape(), "{method}");
            assert!(e.data().iter().all(|v| alphabet.contains(v)), "{method} left its alphabet");
        }
    }
}
