//! Central finite-difference checks of hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerSpec, Network, Tensor};
use crate::error::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Uniform in (-1, 1); with `margin > 0`, values are pushed at least `margin`
/// away from zero so that ReLU kinks are not straddled.
pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() < margin {
                v.signum() * margin + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Error relative to the larger magnitude, floored at 1e-3.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / scale
}

/// Worst relative error over every input and parameter coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_error: f64,
    pub worst: String,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= TOLERANCE
    }

    fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.coordinates += 1;
        if err > self.max_error || self.coordinates == 1 {
            self.max_error = err;
            self.worst = what();
        }
    }
}

/// `L = sum(output * weights)` in training mode.
fn probe(net: &mut Network, x: &Tensor, cond: Option<&Tensor>, weights: &Tensor) -> Result<f64> {
    let y = net.forward(x, cond)?;
    Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

/// Checks a layer stack on a random batch of `input_shape` (batch first).
/// Parameters are perturbed away from their initial values first so that
/// batch norm affine terms are non-trivial.
pub fn check_network(
    input_shape: &[usize],
    specs: &[LayerSpec],
    cond_width: Option<usize>,
    seed: u64,
    margin: f64,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(input_shape[1..].to_vec(), specs, seed)?;
    for p in net.params_mut() {
        for v in &mut p.value {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let mut x = random_tensor(input_shape, &mut rng, margin);
    let cond = cond_width.map(|w| random_tensor(&[input_shape[0], w], &mut rng, 0.0));
    let out_shape: Vec<usize> = std::iter::once(input_shape[0]).chain(net.output_shape().iter().copied()).collect();
    let weights = random_tensor(&out_shape, &mut rng, 0.0);

    net.zero_grad();
    net.forward(&x, cond.as_ref())?;
    let dx = net.backward(&weights)?;
    let grads: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
    let mut report = GradCheck { max_error: 0.0, worst: String::new(), coordinates: 0 };

    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + STEP;
        let up = probe(&mut net, &x, cond.as_ref(), &weights)?;
        x.data_mut()[i] = orig - STEP;
        let down = probe(&mut net, &x, cond.as_ref(), &weights)?;
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = dx.data()[i];
        report.record(relative_error(a, numeric), || format!("input {i}: {a} vs {numeric}"));
    }

    for (pi, g) in grads.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let orig = net.params()[pi].value[j];
            net.params_mut()[pi].value[j] = orig + STEP;
            let up = probe(&mut net, &x, cond.as_ref(), &weights)?;
            net.params_mut()[pi].value[j] = orig - STEP;
            let down = probe(&mut net, &x, cond.as_ref(), &weights)?;
            net.params_mut()[pi].value[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            report.record(relative_error(a, numeric), || format!("param {pi}[{j}]: {a} vs {numeric}"));
        }
    }
    Ok(report)
}

/// Checks a loss `f(prediction) -> (value, gradient)` at `at`.
pub fn check_loss(f: impl Fn(&Tensor) -> Result<(f64, Tensor)>, at: &Tensor) -> Result<GradCheck> {
    let (_, grad) = f(at)?;
    let mut x = at.clone();
    let mut report = GradCheck { max_error: 0.0, worst: String::new(), coordinates: 0 };
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + STEP;
        let up = f(&x)?.0;
        x.data_mut()[i] = orig - STEP;
        let down = f(&x)?.0;
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = grad.data()[i];
        report.record(relative_error(a, numeric), || format!("coordinate {i}: {a} vs {numeric}"));
    }
    Ok(report)
}

/// A small network to check, with a batch-first input shape.
#[derive(Debug, Clone)]
pub struct LayerCase {
    pub name: &'static str,
    pub input_shape: Vec<usize>,
    pub specs: Vec<LayerSpec>,
    pub conditioning: Option<usize>,
    /// Distance kept between inputs and zero.
    pub margin: f64,
}

impl LayerCase {
    pub fn check(&self, seed: u64) -> Result<GradCheck> {
        check_network(&self.input_shape, &self.specs, self.conditioning, seed, self.margin)
    }
}

/// One randomized case per layer kind: shapes, strides and kernels drawn from
/// `seed`.
pub fn layer_cases(seed: u64) -> Vec<LayerCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut r = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let mut cases = Vec::new();
    let mut add = |name, input_shape, specs, conditioning, margin| {
        cases.push(LayerCase { name, input_shape, specs, conditioning, margin })
    };

    let (b, ci, co, k, s) = (r(1, 2), r(1, 2), r(1, 3), [1, 3][r(0, 1)], r(1, 3));
    let (h, w) = (r(3, 7), r(3, 7));
    add(
        "conv2d",
        vec![b, ci, h, w],
        vec![LayerSpec::Conv2d { in_channels: ci, out_channels: co, kernel: k, stride: s }],
        None,
        0.0,
    );

    let (b, ci, co, k, s) = (r(1, 2), r(1, 2), r(1, 3), [1, 3][r(0, 1)], r(1, 3));
    let (oh, ow) = (r(3, 8), r(3, 8));
    add(
        "conv2d_transpose",
        vec![b, ci, oh.div_ceil(s), ow.div_ceil(s)],
        vec![LayerSpec::Conv2dTranspose {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            stride: s,
            output_hw: [oh, ow],
        }],
        None,
        0.0,
    );

    let (b, i, o) = (r(1, 4), r(1, 6), r(1, 6));
    add("dense", vec![b, i], vec![LayerSpec::Dense { inputs: i, outputs: o }], None, 0.0);

    let (b, c, h, w) = (r(2, 4), r(1, 3), r(1, 3), r(2, 3));
    add(
        "batch_norm_spatial",
        vec![b, c, h, w],
        vec![LayerSpec::BatchNorm { channels: c, momentum: 0.9, epsilon: 1e-3 }],
        None,
        0.0,
    );
    let (b, c) = (r(3, 5), r(1, 4));
    add(
        "batch_norm_flat",
        vec![b, c],
        vec![LayerSpec::BatchNorm { channels: c, momentum: 0.9, epsilon: 1e-3 }],
        None,
        0.0,
    );

    let (b, c, width) = (r(1, 4), r(1, 5), r(1, 6));
    add("film", vec![b, width], vec![LayerSpec::Film { conditioning: c, width }], Some(c), 0.0);

    let (b, n) = (r(1, 3), r(2, 6));
    add("softmax", vec![b, n], vec![LayerSpec::Softmax], None, 0.0);
    add("relu", vec![b, n], vec![LayerSpec::Relu], None, 0.05);

    let (b, c, h, w) = (r(1, 2), r(1, 3), r(1, 3), r(1, 3));
    add("global_avg_pool", vec![b, c, h, w], vec![LayerSpec::GlobalAvgPool], None, 0.0);
    add(
        "flatten_reshape",
        vec![b, c, h, w],
        vec![LayerSpec::Flatten, LayerSpec::Reshape { channels: c, height: h, width: w }, LayerSpec::GlobalAvgPool],
        None,
        0.0,
    );
    cases
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{mae, mse, softmax, softmax_cross_entropy};

    const H: f64 = STEP;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, margin: f64) -> Tensor {
        random_tensor(shape, rng, margin)
    }

    fn close(analytic: f64, numeric: f64) -> bool {
        relative_error(analytic, numeric) <= TOLERANCE
    }

    fn check(input_shape: &[usize], specs: &[LayerSpec], cond_width: Option<usize>, seed: u64, margin: f64) {
        let r = check_network(input_shape, specs, cond_width, seed, margin).unwrap();
        assert!(r.passed(), "{specs:?}: {} at {}", r.max_error, r.worst);
        assert!(r.coordinates > 0);
    }

    #[test]
    fn randomized_cases_pass() {
        for seed in 0..10 {
            for case in layer_cases(seed) {
                let r = case.check(seed).unwrap();
                assert!(r.passed(), "{} seed {seed}: {} at {}", case.name, r.max_error, r.worst);
            }
        }
    }

    #[test]
    fn broken_gradient_is_detected() {
        let at = Tensor::new(vec![1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let wrong = |x: &Tensor| -> Result<(f64, Tensor)> { Ok((x.data().iter().map(|v| v * v).sum(), x.clone())) };
        assert!(!check_loss(wrong, &at).unwrap().passed());
    }

    #[test]
    fn conv2d_stride_one() {
        check(
            &[2, 2, 5, 4],
            &[LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1 }],
            None,
            1,
            0.0,
        );
    }

    #[test]
    fn conv2d_stride_two_odd_input() {
        check(
            &[2, 1, 7, 5],
            &[LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 2 }],
            None,
            2,
            0.0,
        );
    }

    #[test]
    fn conv2d_stride_three_kernel_three() {
        check(
            &[1, 2, 8, 10],
            &[LayerSpec::Conv2d { in_channels: 2, out_channels: 2, kernel: 3, stride: 3 }],
            None,
            3,
            0.0,
        );
    }

    #[test]
    fn conv2d_transpose() {
        check(
            &[2, 2, 3, 2],
            &[LayerSpec::Conv2dTranspose { in_channels: 2, out_channels: 3, kernel: 3, stride: 3, output_hw: [8, 5] }],
            None,
            4,
            0.0,
        );
        check(
            &[1, 1, 4, 3],
            &[LayerSpec::Conv2dTranspose { in_channels: 1, out_channels: 2, kernel: 3, stride: 2, output_hw: [7, 6] }],
            None,
            5,
            0.0,
        );
    }

    #[test]
    fn dense() {
        check(&[3, 4], &[LayerSpec::Dense { inputs: 4, outputs: 3 }], None, 6, 0.0);
    }

    #[test]
    fn batch_norm_spatial_and_flat() {
        check(&[3, 2, 2, 3], &[LayerSpec::BatchNorm { channels: 2, momentum: 0.9, epsilon: 1e-3 }], None, 7, 0.0);
        check(&[4, 3], &[LayerSpec::BatchNorm { channels: 3, momentum: 0.9, epsilon: 1e-3 }], None, 8, 0.0);
    }

    #[test]
    fn relu() {
        check(&[2, 6], &[LayerSpec::Relu], None, 9, 0.05);
    }

    #[test]
    fn softmax_layer() {
        check(&[3, 4], &[LayerSpec::Softmax], None, 10, 0.0);
    }

    #[test]
    fn global_average_pool() {
        check(&[2, 3, 2, 3], &[LayerSpec::GlobalAvgPool], None, 11, 0.0);
    }

    #[test]
    fn flatten_and_reshape() {
        check(
            &[2, 2, 2, 3],
            &[
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 12, outputs: 12 },
                LayerSpec::Reshape { channels: 3, height: 2, width: 2 },
            ],
            None,
            12,
            0.0,
        );
    }

    #[test]
    fn film_including_conditioning_weights() {
        check(&[3, 5], &[LayerSpec::Film { conditioning: 4, width: 5 }], Some(4), 13, 0.0);
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = [
            LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 2 },
            LayerSpec::Relu,
            LayerSpec::BatchNorm { channels: 2, momentum: 0.9, epsilon: 1e-3 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 8, outputs: 2 },
        ];
        let mut net = Network::new(vec![1, 4, 4], &specs, 0).unwrap();
        let x = random(&[2, 1, 4, 4], &mut rng, 0.0);
        net.forward(&x, None).unwrap();
        net.backward(&Tensor::zeros(vec![2, 2])).unwrap();
        assert!(net.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut logits = random(&[3, 4], &mut rng, 0.0);
        let targets = [0, 3, 1];
        let (_, grad) = softmax_cross_entropy(&logits, &targets).unwrap();
        for i in 0..logits.len() {
            let orig = logits.data()[i];
            logits.data_mut()[i] = orig + H;
            let up = softmax_cross_entropy(&logits, &targets).unwrap().0;
            logits.data_mut()[i] = orig - H;
            let down = softmax_cross_entropy(&logits, &targets).unwrap().0;
            logits.data_mut()[i] = orig;
            assert!(close(grad.data()[i], (up - down) / (2.0 * H)));
        }
    }

    #[test]
    fn regression_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut pred = random(&[2, 5], &mut rng, 0.0);
        let target = random(&[2, 5], &mut rng, 0.0);
        for loss in [mse, mae] {
            let (_, grad) = loss(&pred, &target).unwrap();
            for i in 0..pred.len() {
                let orig = pred.data()[i];
                pred.data_mut()[i] = orig + H;
                let up = loss(&pred, &target).unwrap().0;
                pred.data_mut()[i] = orig - H;
                let down = loss(&pred, &target).unwrap().0;
                pred.data_mut()[i] = orig;
                assert!(close(grad.data()[i], (up - down) / (2.0 * H)));
            }
        }
    }

    #[test]
    fn transpose_conv_is_the_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let (ci, co, k, s, hw) = (2, 3, 3, 3, [8, 5]);
        let mut conv = Network::new(
            vec![ci, hw[0], hw[1]],
            &[LayerSpec::Conv2d { in_channels: ci, out_channels: co, kernel: k, stride: s }],
            1,
        )
        .unwrap();
        let out = conv.output_shape().to_vec();
        let mut convt = Network::new(
            out.clone(),
            &[LayerSpec::Conv2dTranspose { in_channels: co, out_channels: ci, kernel: k, stride: s, output_hw: hw }],
            2,
        )
        .unwrap();
        let w = conv.params()[0].value.clone();
        convt.params_mut()[0].value = w;
        conv.params_mut()[1].value.fill(0.0);
        let x = random(&[1, ci, hw[0], hw[1]], &mut rng, 0.0);
        let y = random(&[1, out[0], out[1], out[2]], &mut rng, 0.0);
        let cx = conv.infer(&x, None).unwrap();
        let ty = convt.infer(&y, None).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = ty.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn batch_norm_statistics_and_inference_affinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let spec = [LayerSpec::BatchNorm { channels: 2, momentum: 0.0, epsilon: 1e-3 }];
        let mut net = Network::new(vec![2, 2, 2], &spec, 0).unwrap();
        let x = random(&[3, 2, 2, 2], &mut rng, 0.0);
        let y = net.forward(&x, None).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| x.example(b)[c * 4..c * 4 + 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            let outs: Vec<f64> = (0..3).flat_map(|b| y.example(b)[c * 4..c * 4 + 4].to_vec()).collect();
            for (v, o) in vals.iter().zip(&outs) {
                assert!((o - (v - mean) / (var + 1e-3).sqrt()).abs() < 1e-6);
            }
        }
        // with momentum 0 the running statistics are the last batch's
        let a = random(&[1, 2, 2, 2], &mut rng, 0.0);
        let b = random(&[1, 2, 2, 2], &mut rng, 0.0);
        let sum = Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect()).unwrap();
        let fa = net.infer(&a, None).unwrap();
        let fb = net.infer(&b, None).unwrap();
        let fs = net.infer(&sum, None).unwrap();
        let f0 = net.infer(&Tensor::zeros(vec![1, 2, 2, 2]), None).unwrap();
        for i in 0..fs.len() {
            assert!((fs.data()[i] - (fa.data()[i] + fb.data()[i] - f0.data()[i])).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
