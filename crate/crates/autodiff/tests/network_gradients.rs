use finn_autodiff::{Matrix, Mlp, MlpConfig, OutputTransform, ParamStore, Tape};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(store: &ParamStore, mlp: &Mlp, x: &Matrix) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = mlp.forward(&mut tape, &b, xv).unwrap();
    let y2 = tape.powi(y, 2).unwrap();
    let l = tape.sum(y2).unwrap();
    let g = store.gradients(&b, &tape.backward_scalar(l).unwrap());
    (tape.value(l).data()[0], store.flat_gradients(&g))
}

#[test]
fn network_weight_gradients_match_central_differences() {
    for out in [OutputTransform::Identity, OutputTransform::Softplus, OutputTransform::SigmoidPositive { scale: 2.0 }] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::register(&mut store, "net", MlpConfig::new(&[2, 5, 3, 2]).with_output(out), &mut rng).unwrap();
        let x = Matrix::new(3, 2, vec![0.3, -0.8, 1.2, 0.1, -0.5, 0.9]);
        let (_, ad) = loss(&store, &mlp, &x);
        let theta = store.flat_trainable();
        let h = 1e-6;
        let mut fd = Vec::new();
        for k in 0..theta.len() {
            let mut p = theta.clone();
            p[k] += h;
            store.set_flat_trainable(&p).unwrap();
            let lp = loss(&store, &mlp, &x).0;
            p[k] -= 2.0 * h;
            store.set_flat_trainable(&p).unwrap();
            let lm = loss(&store, &mlp, &x).0;
            fd.push((lp - lm) / (2.0 * h));
        }
        store.set_flat_trainable(&theta).unwrap();
        let num: f64 = ad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num / den < 1e-5, "relative error {}", num / den);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The gradient of a linear combination is the same combination of
    /// gradients.
    #[test]
    fn backward_is_linear_in_the_seed(a in -3.0f64..3.0, b in -3.0f64..3.0, x in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let mut tape = Tape::new();
        let xv = tape.leaf(Matrix::column(x));
        let f = tape.tanh(xv).unwrap();
        let g = tape.powi(xv, 3).unwrap();
        let comb = tape.lin_comb(&[(f, a), (g, b)]).unwrap();
        let s = tape.sum(comb).unwrap();
        let sf = tape.sum(f).unwrap();
        let sg = tape.sum(g).unwrap();
        let gs = tape.backward_scalar(s).unwrap().wrt(xv).unwrap().clone();
        let gf = tape.backward_scalar(sf).unwrap().wrt(xv).unwrap().clone();
        let gg = tape.backward_scalar(sg).unwrap().wrt(xv).unwrap().clone();
        for i in 0..4 {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((gs.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    /// Replaying a recorded network evaluation reproduces every value exactly.
    #[test]
    fn replay_reproduces_network_values(seed in 0u64..1000) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::register(&mut store, "n", MlpConfig::new(&[1, 10, 20, 10, 1]), &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.leaf(Matrix::column(vec![-1.0, 0.25, 0.5]));
        let y = mlp.forward(&mut tape, &b, x).unwrap();
        let replayed = tape.replay().unwrap();
        prop_assert_eq!(&replayed[y.index()], tape.value(y));
    }
}
