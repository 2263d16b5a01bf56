#![allow(dead_code)]

use std::path::Path;

use exitprune::exitnet::{joint_loss_value, NetworkConfig};
use exitprune::runner::{DataSource, ExperimentConfig};
use exitprune::tensorcore::{forward, LayerKind, LayerSpec, ParamRef, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; exact zeros on both
/// sides count as a perfect match.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_difference(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values at least `gap` away from zero, so ReLU kinks stay outside the
/// finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Pairwise distinct values spaced ≥ 1e-3 apart, so max-pool winners do not
/// change under the stencil.
fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v.iter().map(|x| x + rng.gen_range(0.0..0.004)).collect()
}

/// One random gradient-check instance of a layer kind: the layer is followed
/// by flatten, a fixed random projection to 3 classes and softmax
/// cross-entropy, giving a smooth scalar loss. Returns the worst relative
/// error over the input, weight and bias gradients.
pub fn gradcheck_layer(kind: &LayerKind, input_shape: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = input_shape[0];
    let numel: usize = input_shape.iter().product();
    let x_data = match kind {
        LayerKind::Relu => away_from_zero(&mut rng, numel, 1e-3),
        LayerKind::MaxPool2 => distinct(&mut rng, numel),
        _ => uniform(&mut rng, numel),
    };
    let layer = LayerSpec::new("probe", *kind);
    let params: Option<(Tensor, Tensor)> = kind.param_shapes().map(|(ws, bs)| {
        let wn: usize = ws.iter().product();
        let bn: usize = bs.iter().product();
        (
            Tensor::new(ws.clone(), uniform(&mut rng, wn)).unwrap(),
            Tensor::new(bs.clone(), uniform(&mut rng, bn)).unwrap(),
        )
    });
    let x = Tensor::new(input_shape.to_vec(), x_data).unwrap();
    let out_shape = forward(&layer, params.as_ref().map(|(w, b)| (w, b)), &x)
        .unwrap()
        .shape()
        .to_vec();
    let features: usize = out_shape[1..].iter().product();
    let classes = 3;
    let proj = LayerSpec::new(
        "proj",
        LayerKind::Dense {
            in_features: features,
            out_features: classes,
        },
    );
    let pw = Tensor::new(vec![classes, features], uniform(&mut rng, classes * features)).unwrap();
    let pb = Tensor::new(vec![classes], uniform(&mut rng, classes)).unwrap();
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let flatten = LayerSpec::new("flat", LayerKind::Flatten);

    let loss_of = |x: &Tensor, p: Option<(&Tensor, &Tensor)>| -> f64 {
        let y = forward(&layer, p, x).unwrap();
        let y = forward(&flatten, None, &y).unwrap();
        let logits = forward(&proj, Some((&pw, &pb)), &y).unwrap();
        joint_loss_value(&[logits], &labels, &[1.0]).unwrap()
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = params
        .as_ref()
        .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())));
    let y = tape.layer(&layer, pv, xv).unwrap();
    let y = tape.layer(&flatten, None, y).unwrap();
    let pwv = tape.constant(pw.clone());
    let pbv = tape.constant(pb.clone());
    let logits = tape.layer(&proj, Some((pwv, pbv)), y).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    let p_ref = params.as_ref().map(|(w, b)| (w, b));
    let num_x = central_difference(x.data(), |d| {
        loss_of(&Tensor::new(x.shape().to_vec(), d.to_vec()).unwrap(), p_ref)
    });
    worst = worst.max(relative_error(grads.wrt(xv).unwrap(), &num_x));
    if let (Some((w, b)), Some((wv, bv))) = (params.as_ref(), pv) {
        let num_w = central_difference(w.data(), |d| {
            let w2 = Tensor::new(w.shape().to_vec(), d.to_vec()).unwrap();
            loss_of(&x, Some((&w2, b)))
        });
        worst = worst.max(relative_error(grads.wrt(wv).unwrap(), &num_w));
        let num_b = central_difference(b.data(), |d| {
            let b2 = Tensor::new(b.shape().to_vec(), d.to_vec()).unwrap();
            loss_of(&x, Some((w, &b2)))
        });
        worst = worst.max(relative_error(grads.wrt(bv).unwrap(), &num_b));
    }
    worst
}

/// The layer cases exercised by the gradient checks: `(label, kind, input)`.
pub fn layer_cases() -> Vec<(&'static str, LayerKind, Vec<usize>)> {
    let conv = |c_in, c_out, kernel, stride, pad| LayerKind::Conv2d {
        in_channels: c_in,
        out_channels: c_out,
        kernel,
        stride,
        pad,
    };
    vec![
        (
            "dense",
            LayerKind::Dense {
                in_features: 7,
                out_features: 5,
            },
            vec![3, 7],
        ),
        ("conv3x3 s1 p1", conv(2, 3, 3, 1, 1), vec![2, 2, 5, 5]),
        ("conv3x3 s2 p1", conv(2, 2, 3, 2, 1), vec![2, 2, 6, 6]),
        ("conv1x1 s1 p0", conv(3, 2, 1, 1, 0), vec![2, 3, 4, 4]),
        ("conv5x5 s1 p2", conv(1, 2, 5, 1, 2), vec![1, 1, 5, 5]),
        ("relu", LayerKind::Relu, vec![2, 2, 3, 3]),
        ("maxpool2", LayerKind::MaxPool2, vec![2, 2, 4, 4]),
        ("gap", LayerKind::GlobalAvgPool, vec![2, 3, 3, 3]),
        ("flatten", LayerKind::Flatten, vec![2, 2, 2, 3]),
    ]
}

/// A tiny multi-exit network for whole-model gradient checks.
pub fn tiny_network_config() -> NetworkConfig {
    NetworkConfig {
        backbone: vec![
            LayerSpec::new("conv1", LayerKind::conv3x3(1, 2)),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("pool1", LayerKind::MaxPool2),
            LayerSpec::new("conv2", LayerKind::conv3x3(2, 3)),
            LayerSpec::new("relu2", LayerKind::Relu),
        ],
        exit_after: vec![2],
        num_classes: 4,
        input_shape: [1, 6, 6],
    }
}

/// Relative error of the joint (all-exit, weighted) loss gradient with
/// respect to every parameter of a freshly initialized tiny network.
pub fn gradcheck_joint(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut net = exitprune::exitnet::build_network(tiny_network_config(), seed).unwrap();
    let batch = 3;
    let images = Tensor::new(vec![batch, 1, 6, 6], uniform(&mut rng, batch * 36)).unwrap();
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..4)).collect();
    let weights = [0.3 + rng.gen_range(0.0..1.0), 0.3 + rng.gen_range(0.0..1.0)];
    net.compute_gradients(images.clone(), &labels, &weights, None)
        .unwrap();
    let refs: Vec<ParamRef> = net.params().refs().cloned().collect();
    let mut worst = 0.0f64;
    for r in refs {
        let analytic = net.params().get(&r).unwrap().grad().unwrap().to_vec();
        let base = net.params().get(&r).unwrap().data().to_vec();
        let mut probe = net.clone();
        let numeric = central_difference(&base, |d| {
            probe
                .params_mut()
                .get_mut(&r)
                .unwrap()
                .data_mut()
                .copy_from_slice(d);
            let logits = probe.forward_all_exits(&images).unwrap();
            joint_loss_value(&logits, &labels, &weights).unwrap()
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Same seed, same sizes: a small synthetic experiment suitable for
/// end-to-end tests.
pub fn synthetic_config(out: &Path, approach: u8) -> ExperimentConfig {
    let text = format!(
        "approach = {approach}\n\
         seed = 11\n\
         data = synthetic\n\
         synthetic_classes = 4\n\
         synthetic_per_class = 24\n\
         synthetic_side = 8\n\
         input_shape = 1,8,8\n\
         num_classes = 4\n\
         backbone = conv1:conv2d(1,4,3,1,1); relu1:relu; pool1:maxpool2; conv2:conv2d(4,8,3,1,1); relu2:relu\n\
         exit_after = 2\n\
         pretrain_epochs = 4\n\
         finetune_epochs = 1\n\
         rounds = 3\n\
         rounds_phase_b = 2\n\
         batch_size = 16\n\
         output_dir = {}\n",
        out.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

pub fn synthetic_source(config: &ExperimentConfig) -> (usize, usize, usize) {
    match config.data {
        DataSource::Synthetic {
            classes,
            per_class,
            side,
        } => (classes, per_class, side),
        _ => panic!("not synthetic"),
    }
}
