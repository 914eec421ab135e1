//! Analytic backpropagation against central finite differences.

use hirl_core::nn::{stack_rows, Mlp, OutputActivation};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;
const H: f64 = 1e-6;

fn loss(net: &Mlp, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (&net.predict(x).unwrap() * w).sum()
}

fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= REL * a.abs().max(n.abs()) + ABS_FLOOR
}

#[test]
fn twenty_random_nets_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=6)];
        for _ in 0..depth {
            sizes.push(rng.random_range(2..=8));
        }
        sizes.push(rng.random_range(1..=3));
        let act = if case % 2 == 0 { OutputActivation::Identity } else { OutputActivation::Tanh };
        let mut net = Mlp::new(&sizes, act, &mut rng);
        let batch = rng.random_range(1..=4);
        let rows: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let x = stack_rows(rows.iter().map(|r| r.as_slice()), sizes[0]);
        let out_len = *sizes.last().unwrap();
        let w = Array2::from_shape_fn((batch, out_len), |_| rng.random_range(-1.0..1.0));

        let cache = net.forward_cached(&x).unwrap();
        let (grads, dx) = net.backward(&cache, &w).unwrap();
        let analytic = grads.flat();
        let params = net.params_flat();
        assert_eq!(analytic.len(), params.len());
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] = params[i] + H;
            net.set_params_flat(&p).unwrap();
            let up = loss(&net, &x, &w);
            p[i] = params[i] - H;
            net.set_params_flat(&p).unwrap();
            let down = loss(&net, &x, &w);
            let numeric = (up - down) / (2.0 * H);
            assert!(close(analytic[i], numeric), "case {case} param {i}: {} vs {numeric}", analytic[i]);
        }
        net.set_params_flat(&params).unwrap();

        for r in 0..batch {
            for c in 0..sizes[0] {
                let mut xp = x.clone();
                xp[[r, c]] += H;
                let mut xm = x.clone();
                xm[[r, c]] -= H;
                let numeric = (loss(&net, &xp, &w) - loss(&net, &xm, &w)) / (2.0 * H);
                assert!(close(dx[[r, c]], numeric), "case {case} input ({r},{c})");
            }
        }
    }
}
