use cirsnn::autodiff::Tape;
use cirsnn::encoders::{EncoderConfig, ScaeModel};
use cirsnn::kernels::Conv3dGeom;
use cirsnn::layers::{Forward, Mode};
use cirsnn::params::ParamStore;
use cirsnn::pipeline::{Method, Model, ModelSpec};
use cirsnn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Output extent `o` and stride `s` pick an input extent that the transposed
/// convolution maps back to exactly.
fn axis() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..4, 1usize..3, 0usize..2, 1usize..5).prop_filter_map("kernel must fit", |(k, s, p, o)| {
        let p = p.min(k - 1);
        let i = (o - 1) * s + k;
        (i >= 2 * p + 1).then(|| (k, s, p, i - 2 * p))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_and_transposed_conv_are_adjoint(
        a0 in axis(), a1 in axis(), a2 in axis(),
        b in 1usize..3, cin in 1usize..4, cout in 1usize..4, seed in any::<u64>(),
    ) {
        let kd = [a0.0, a1.0, a2.0];
        let geom = Conv3dGeom::new([a0.1, a1.1, a2.1], [a0.2, a1.2, a2.2]);
        let in_d = [a0.3, a1.3, a2.3];
        let out_d = geom.out_dims(in_d, kd).unwrap();
        let x = rand_tensor(&[b, cin, in_d[0], in_d[1], in_d[2]], seed);
        let y = rand_tensor(&[b, cout, out_d[0], out_d[1], out_d[2]], seed ^ 1);
        let k = rand_tensor(&[cout, cin, kd[0], kd[1], kd[2]], seed ^ 2);

        let mut tape = Tape::new();
        let (xv, yv, kv) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(k));
        let cx = tape.conv3d(xv, kv, None, geom).unwrap();
        let ty = tape.conv_transpose3d(yv, kv, None, geom).unwrap();
        prop_assert_eq!(tape.shape(ty), x.shape());
        let lhs = dot(tape.value(cx), &y);
        let rhs = dot(&x, tape.value(ty));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn encoder_preserves_window_geometry(n in 1usize..4, r in 1usize..5, w in 3usize..9, seed in any::<u64>()) {
        let cfg = EncoderConfig { hidden_channels: 4, timesteps: 1, ..EncoderConfig::default() };
        let mut store = ParamStore::new();
        let scae = ScaeModel::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut fwd = Forward::new(&mut tape, &bound, Mode::Eval);
        let x = fwd.tape.constant(rand_tensor(&[2, 2, n, r, w], seed).map(f64::abs));
        let e = scae.encode(&mut fwd, &store, x).unwrap();
        prop_assert_eq!(fwd.tape.shape(e), &[2, 2, n, r, w]);
        let d = scae.decode(&mut fwd, &store, e).unwrap();
        prop_assert_eq!(fwd.tape.shape(d), &[2, 2, n, r, w]);
    }
}

#[test]
fn identical_seeds_give_bit_identical_outputs() {
    let shape = [2, 4, 4, 8];
    for method in Method::ALL {
        let a = Model::new(ModelSpec::new(method, shape, 9)).unwrap();
        let b = Model::new(ModelSpec::new(method, shape, 9)).unwrap();
        let batch = rand_tensor(&[3, 2, 4, 4, 8], 4).map(f64::abs);
        let (pa, pb) = (a.predict(&batch, 5).unwrap(), b.predict(&batch, 5).unwrap());
        assert_eq!(pa.counts, pb.counts, "{method}");
        assert_eq!(pa.encoding, pb.encoding, "{method}");
    }
}
