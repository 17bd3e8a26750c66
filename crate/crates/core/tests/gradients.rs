#[path = "support/fd_oracle.rs"]
mod fd_oracle;

use fd_oracle::{Dims, Oracle};
use mid_core::nncore::{loss_and_grad, ModelParams, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> ModelSpec {
    ModelSpec { input_side: 16, conv_channels: [2, 3], kernel_size: 3, conv_strides: [1, 1], fc_widths: [8, 6, 4], n_classes: 3, ..ModelSpec::default() }
}

fn dims(spec: &ModelSpec) -> Dims {
    assert_eq!(spec.conv_strides, [1, 1]);
    Dims {
        side: spec.input_side,
        k: spec.kernel_size,
        c1: spec.conv_channels[0],
        c2: spec.conv_channels[1],
        f1: spec.fc_widths[0],
        f2: spec.fc_widths[1],
        f3: spec.fc_widths[2],
        nc: spec.n_classes,
    }
}

fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * spec.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n).map(|i| i % spec.n_classes).collect();
    (x, y)
}

/// Largest relative error between backprop and central differences over
/// every parameter, with the oracle's loss checked against the model's.
fn worst_error(spec: &ModelSpec, n: usize, seed: u64, h: f64, err: impl Fn(f64, f64) -> f64) -> (f64, (usize, usize)) {
    let params = ModelParams::<f64>::init(spec, seed).unwrap();
    let (x, y) = random_batch(spec, n, seed + 100);
    let (loss, grads) = loss_and_grad(&params, &x, &y).unwrap();
    let xs = x.chunks(spec.input_len()).map(<[f64]>::to_vec).collect();
    let oracle = Oracle::new(dims(spec), &params.tensors, xs, y);
    assert!((oracle.loss() - loss).abs() < 1e-10, "oracle loss {} vs model {loss}", oracle.loss());
    let mut worst = (0.0, (0, 0));
    for (t, g) in grads.tensors.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let e = err(a, oracle.central_difference(t, i, h));
            if e > worst.0 {
                worst = (e, (t, i));
            }
        }
    }
    worst
}

#[test]
fn f32_and_f64_gradients_agree() {
    let spec = tiny_spec();
    let p64 = ModelParams::<f64>::init(&spec, 2).unwrap();
    let (x, y) = random_batch(&spec, 3, 9);
    let (l64, g64) = loss_and_grad(&p64, &x, &y).unwrap();
    let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let (l32, g32) = loss_and_grad(&p64.cast::<f32>(), &x32, &y).unwrap();
    assert!((l64 - l32 as f64).abs() < 1e-5);
    for (a, b) in g64.tensors.iter().flatten().zip(g32.tensors.iter().flatten()) {
        assert!((a - *b as f64).abs() < 1e-4 + 1e-3 * a.abs());
    }
}

/// Steps small enough to stay inside one linear piece of the network. Round-off
/// of the difference quotient is about 1e-10, hence the absolute floor.
#[test]
fn small_step_differences_match_backprop() {
    for (spec, n, seed) in [(tiny_spec(), 4, 7), (ModelSpec::reduced_input(), 2, 3)] {
        let (e, at) = worst_error(&spec, n, seed, 1e-6, |a, n| (a - n).abs() / (a.abs().max(n.abs()) + 1e-6));
        eprintln!("input {}: max relative error {e:.3e} at {at:?} with step 1e-6", spec.input_side);
        assert!(e <= 1e-3, "max relative error {e} at {at:?}");
    }
}
