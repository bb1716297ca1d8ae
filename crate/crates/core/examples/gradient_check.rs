//! Finite-difference check of a small conv → batch norm → relu graph.

use autoprompt::gradcheck::{check, DEFAULT_EPS, DEFAULT_TOL};
use autoprompt::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> autoprompt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rand = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", rand(&[2, 3, 6, 6]), true);
    let w = store.add("w", rand(&[4, 3, 3, 3]), true);
    let gamma = store.add("gamma", rand(&[4]), true);
    let beta = store.add("beta", rand(&[4]), true);
    let mean = store.add_buffer("mean", Tensor::zeros(&[4]));
    let var = store.add_buffer("var", Tensor::full(&[4], 1.0));
    let weights = rand(&[2, 4, 6, 6]);

    let report = check(&mut store, true, DEFAULT_EPS, 20, &mut ChaCha8Rng::seed_from_u64(2), |tape, store| {
        let (xv, wv) = (tape.param(store, x), tape.param(store, w));
        let y = tape.conv2d(xv, wv, None, 1, 1)?;
        let (g, b) = (tape.param(store, gamma), tape.param(store, beta));
        let y = tape.batchnorm2d(store, y, g, b, mean, var)?;
        let y = tape.relu(y);
        tape.dot(y, weights.clone())
    })?;
    println!("{report:?}");
    println!("passed at {DEFAULT_TOL:e}: {}", report.passed(DEFAULT_TOL));
    Ok(())
}
