//! Layer-level gradient checks against central finite differences.
//!
//! Every backward pass is validated in `f64`: perturb one element, recompute
//! a scalar loss (a fixed random projection of the output, so every output
//! element matters), and compare with the analytic gradient.

use super::*;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_EPS: f64 = 1e-5;

fn assert_close(fd: f64, an: f64, what: &str) {
    let tol = 1e-7 + 1e-5 * fd.abs().max(an.abs());
    assert!(
        (fd - an).abs() <= tol,
        "{what}: finite-difference {fd} vs analytic {an}"
    );
}

fn rand_array3(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
}

fn rand_array1(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0))
}

fn project3(y: &Array3<f64>, w: &Array3<f64>) -> f64 {
    y.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
}

fn project1(y: &Array1<f64>, w: &Array1<f64>) -> f64 {
    y.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
}

fn test_conv(
    rng: &mut ChaCha8Rng,
    path: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    s: usize,
    p: usize,
    bias: bool,
) -> Conv2d<f64> {
    let fan_in = c_in * k * k;
    let weight = he_init::<f64>(rng, &[c_out, fan_in], fan_in)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    Conv2d {
        path: path.to_string(),
        weight,
        bias: bias.then(|| rand_array1(rng, c_out) * 0.1),
        c_in,
        c_out,
        kernel: k,
        stride: s,
        pad: p,
    }
}

fn test_linear(rng: &mut ChaCha8Rng, path: &str, d_in: usize, d_out: usize, bias: bool) -> Linear<f64> {
    let weight = he_init::<f64>(rng, &[d_out, d_in], d_in)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    Linear {
        path: path.to_string(),
        weight,
        bias: bias.then(|| rand_array1(rng, d_out) * 0.1),
    }
}

fn randomize_norms_conv(stack: &mut ConvStack<f64>, rng: &mut ChaCha8Rng) {
    for layer in &mut stack.0 {
        match layer {
            ConvLayer::Norm(n) => {
                n.gamma = rand_array1(rng, n.gamma.len()) + 1.0;
                n.beta = rand_array1(rng, n.beta.len()) * 0.2;
            }
            ConvLayer::FrozenBn(bn) => {
                bn.gamma = rand_array1(rng, bn.gamma.len()) + 1.0;
                bn.beta = rand_array1(rng, bn.beta.len()) * 0.2;
                bn.running_mean = rand_array1(rng, bn.running_mean.len()) * 0.3;
                bn.running_var = rand_array1(rng, bn.running_var.len()).mapv(|v| 0.5 + v.abs());
            }
            ConvLayer::Residual(res) => {
                randomize_norms_conv(&mut res.main, rng);
                randomize_norms_conv(&mut res.shortcut, rng);
            }
            _ => {}
        }
    }
}

fn perturb_stack_param(stack: &mut ConvStack<f64>, index: usize, elem: usize, delta: f64) {
    let mut params = Vec::new();
    stack.visit_params_mut(&mut params);
    let slice = params[index].data.as_slice_mut().expect("contiguous param");
    slice[elem] += delta;
}

/// FD-checks input and parameter gradients for a conv stack.
fn check_stack(stack: &mut ConvStack<f64>, input_dim: (usize, usize, usize), seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_array3(&mut rng, input_dim);
    let out_dim = stack.forward(x.clone()).dim();
    let w = rand_array3(&mut rng, out_dim);

    let mut caches = Vec::new();
    let y = stack.forward_rec(x.clone(), &mut caches);
    let mut grads = Gradients::new();
    let dx = stack
        .backward(&caches, w.clone(), &mut grads, true)
        .expect("input grad requested");
    let base = project3(&y, &w);
    assert!(base.is_finite());

    // Input gradient.
    let n = x.len();
    for flat in (0..n).step_by((n / 17).max(1)) {
        let idx = (
            flat / (input_dim.1 * input_dim.2),
            (flat / input_dim.2) % input_dim.1,
            flat % input_dim.2,
        );
        let mut xp = x.clone();
        xp[idx] += FD_EPS;
        let mut xm = x.clone();
        xm[idx] -= FD_EPS;
        let fd = (project3(&stack.forward(xp), &w) - project3(&stack.forward(xm), &w))
            / (2.0 * FD_EPS);
        assert_close(fd, dx[idx], &format!("input[{idx:?}]"));
    }

    // Parameter gradients.
    let metas: Vec<(String, usize, ParamKind)> = {
        let mut refs = Vec::new();
        stack.visit_params(&mut refs);
        refs.iter()
            .map(|r| (r.path.clone(), r.data.len(), r.kind))
            .collect()
    };
    for (pi, (path, len, kind)) in metas.iter().enumerate() {
        if *kind == ParamKind::Buffer {
            assert!(grads.get(path).is_none(), "buffers must not get gradients");
            continue;
        }
        let g = grads.get(path).unwrap_or_else(|| panic!("missing grad {path}"));
        let gslice: Vec<f64> = g.as_standard_layout().iter().copied().collect();
        for e in (0..*len).step_by((len / 7).max(1)) {
            perturb_stack_param(stack, pi, e, FD_EPS);
            let fp = project3(&stack.forward(x.clone()), &w);
            perturb_stack_param(stack, pi, e, -2.0 * FD_EPS);
            let fm = project3(&stack.forward(x.clone()), &w);
            perturb_stack_param(stack, pi, e, FD_EPS);
            let fd = (fp - fm) / (2.0 * FD_EPS);
            assert_close(fd, gslice[e], &format!("{path}[{e}]"));
        }
    }
}

#[test]
fn conv_matches_naive_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conv = test_conv(&mut rng, "c", 2, 3, 3, 2, 1, true);
    let x = rand_array3(&mut rng, (2, 7, 6));
    let stack = ConvStack(vec![ConvLayer::Conv(conv.clone())]);
    let y = stack.forward(x.clone());

    let (out_h, out_w) = conv.output_dim(7, 6);
    assert_eq!(y.dim(), (3, out_h, out_w));
    for co in 0..3 {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = conv.bias.as_ref().unwrap()[co];
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                continue;
                            }
                            let wv = conv.weight[[co, (ci * 3 + ky) * 3 + kx]];
                            acc += wv * x[(ci, iy as usize, ix as usize)];
                        }
                    }
                }
                let got = y[(co, oy, ox)];
                assert!(
                    (acc - got).abs() < 1e-12,
                    "naive {acc} vs im2col {got} at ({co},{oy},{ox})"
                );
            }
        }
    }
}

#[test]
fn im2col_col2im_are_adjoint() {
    // <im2col(x), G> == <x, col2im(G)> for random x, G.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &(k, s, p) in &[(3usize, 1usize, 1usize), (3, 2, 0), (2, 2, 1), (5, 3, 2)] {
        let x = rand_array3(&mut rng, (2, 9, 8));
        let col = im2col(&x.view(), k, s, p);
        let g = Array2::from_shape_simple_fn(col.dim(), || rng.random_range(-1.0..1.0));
        let lhs: f64 = col.iter().zip(g.iter()).map(|(a, b)| a * b).sum();

        // col2im is private; recover it through a conv backward pass with
        // identity-free weights: dX = col2im(W^T dY) with W = I requires
        // square shapes, so instead check via a 1-output-channel conv whose
        // weight row is one-hot. Simpler: use the public backward of a conv
        // layer against FD, which the stack tests already do. Here, verify
        // the adjoint identity through gradients of sum(W . col(x)).
        let c_out = 4;
        let fan = 2 * k * k;
        let conv = Conv2d {
            path: "a".into(),
            weight: Array2::from_shape_simple_fn((c_out, fan), || rng.random_range(-1.0..1.0)),
            bias: None,
            c_in: 2,
            c_out,
            kernel: k,
            stride: s,
            pad: p,
        };
        let stack = ConvStack(vec![ConvLayer::Conv(conv.clone())]);
        let mut caches = Vec::new();
        let y = stack.forward_rec(x.clone(), &mut caches);
        let wproj = rand_array3(&mut rng, y.dim());
        let mut grads = Gradients::new();
        let dx = stack
            .backward(&caches, wproj.clone(), &mut grads, true)
            .unwrap();
        // <dX, v> must equal <W^T dY, im2col(v)> for any v.
        let v = rand_array3(&mut rng, x.dim());
        let lhs2: f64 = dx.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        let gy = wproj
            .view()
            .into_shape_with_order((c_out, y.dim().1 * y.dim().2))
            .unwrap();
        let dcol = conv.weight.t().dot(&gy);
        let colv = im2col(&v.view(), k, s, p);
        let rhs2: f64 = dcol.iter().zip(colv.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs2 - rhs2).abs() < 1e-9, "adjoint: {lhs2} vs {rhs2}");
        let _ = lhs;
    }
}

#[test]
fn maxpool_known_case() {
    let pool = MaxPool2d {
        kernel: 2,
        stride: 2,
        pad: 0,
    };
    let x = Array3::from_shape_vec(
        (1, 2, 4),
        vec![1.0, 2.0, 5.0, 3.0, 4.0, 0.0, -1.0, 6.0],
    )
    .unwrap();
    let stack = ConvStack::<f64>(vec![ConvLayer::MaxPool(pool)]);
    let y = stack.forward(x);
    assert_eq!(y.dim(), (1, 1, 2));
    assert_eq!(y[(0, 0, 0)], 4.0);
    assert_eq!(y[(0, 0, 1)], 6.0);
}

#[test]
fn gradcheck_plain_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut stack = ConvStack(vec![
        ConvLayer::Conv(test_conv(&mut rng, "l0.conv", 3, 4, 3, 2, 1, true)),
        ConvLayer::Norm(ChannelNorm::new("l0.norm".into(), 4)),
        ConvLayer::Relu,
        ConvLayer::Conv(test_conv(&mut rng, "l1.conv", 4, 5, 3, 1, 1, false)),
        ConvLayer::FrozenBn(FrozenBatchNorm2d::new("l1.bn".into(), 5)),
        ConvLayer::Relu,
        ConvLayer::MaxPool(MaxPool2d {
            kernel: 2,
            stride: 2,
            pad: 0,
        }),
    ]);
    randomize_norms_conv(&mut stack, &mut rng);
    check_stack(&mut stack, (3, 9, 8), 21);
}

#[test]
fn gradcheck_residual_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let main = ConvStack(vec![
        ConvLayer::Conv(test_conv(&mut rng, "r0.conv1", 4, 3, 1, 1, 0, false)),
        ConvLayer::FrozenBn(FrozenBatchNorm2d::new("r0.bn1".into(), 3)),
        ConvLayer::Relu,
        ConvLayer::Conv(test_conv(&mut rng, "r0.conv2", 3, 6, 3, 2, 1, false)),
        ConvLayer::FrozenBn(FrozenBatchNorm2d::new("r0.bn2".into(), 6)),
    ]);
    let shortcut = ConvStack(vec![
        ConvLayer::Conv(test_conv(&mut rng, "r0.down.conv", 4, 6, 1, 2, 0, false)),
        ConvLayer::FrozenBn(FrozenBatchNorm2d::new("r0.down.bn".into(), 6)),
    ]);
    let ident_main = ConvStack(vec![
        ConvLayer::Conv(test_conv(&mut rng, "r1.conv1", 6, 6, 3, 1, 1, false)),
        ConvLayer::Norm(ChannelNorm::new("r1.norm".into(), 6)),
    ]);
    let mut stack = ConvStack(vec![
        ConvLayer::Residual(ResidualBlock { main, shortcut }),
        ConvLayer::Relu,
        ConvLayer::Residual(ResidualBlock {
            main: ident_main,
            shortcut: ConvStack(Vec::new()),
        }),
        ConvLayer::Relu,
    ]);
    randomize_norms_conv(&mut stack, &mut rng);
    check_stack(&mut stack, (4, 8, 8), 23);
}

fn perturb_mlp_param(mlp: &mut Mlp<f64>, index: usize, elem: usize, delta: f64) {
    let mut params = Vec::new();
    mlp.visit_params_mut(&mut params);
    let slice = params[index].data.as_slice_mut().expect("contiguous param");
    slice[elem] += delta;
}

#[test]
fn gradcheck_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut bn = FrozenBatchNorm1d::new("m.bn".into(), 5);
    bn.running_mean = rand_array1(&mut rng, 5) * 0.3;
    bn.running_var = rand_array1(&mut rng, 5).mapv(|v| 0.5 + v.abs());
    bn.gamma = rand_array1(&mut rng, 5) + 1.0;
    bn.beta = rand_array1(&mut rng, 5) * 0.2;
    let mut norm = FeatureNorm::new("m.norm".into(), 7);
    norm.gamma = rand_array1(&mut rng, 7) + 1.0;
    norm.beta = rand_array1(&mut rng, 7) * 0.2;
    let mlp = Mlp {
        layers: vec![
            DenseLayer::Linear(test_linear(&mut rng, "m.l0", 6, 7, true)),
            DenseLayer::Norm(norm),
            DenseLayer::Relu,
            DenseLayer::Linear(test_linear(&mut rng, "m.l1", 7, 5, false)),
            DenseLayer::FrozenBn(bn),
            DenseLayer::Relu,
            DenseLayer::Linear(test_linear(&mut rng, "m.l2", 5, 4, true)),
        ],
    };
    let mut mlp = mlp;
    let x = rand_array1(&mut rng, 6);
    let w = rand_array1(&mut rng, 4);

    let mut caches = Vec::new();
    let y = mlp.forward_rec(x.clone(), &mut caches);
    let mut grads = Gradients::new();
    let dx = mlp.backward(&caches, w.clone(), &mut grads, true).unwrap();
    assert_eq!(y.len(), 4);

    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += FD_EPS;
        let mut xm = x.clone();
        xm[i] -= FD_EPS;
        let fd =
            (project1(&mlp.forward(xp), &w) - project1(&mlp.forward(xm), &w)) / (2.0 * FD_EPS);
        assert_close(fd, dx[i], &format!("mlp input[{i}]"));
    }

    let metas: Vec<(String, usize, ParamKind)> = {
        let mut refs = Vec::new();
        mlp.visit_params(&mut refs);
        refs.iter()
            .map(|r| (r.path.clone(), r.data.len(), r.kind))
            .collect()
    };
    for (pi, (path, len, kind)) in metas.iter().enumerate() {
        if *kind == ParamKind::Buffer {
            assert!(grads.get(path).is_none());
            continue;
        }
        let g = grads
            .get(path)
            .unwrap_or_else(|| panic!("no grad for {path}"))
            .as_standard_layout()
            .iter()
            .copied()
            .collect::<Vec<f64>>();
        for e in (0..*len).step_by((len / 5).max(1)) {
            perturb_mlp_param(&mut mlp, pi, e, FD_EPS);
            let fp = project1(&mlp.forward(x.clone()), &w);
            perturb_mlp_param(&mut mlp, pi, e, -2.0 * FD_EPS);
            let fm = project1(&mlp.forward(x.clone()), &w);
            perturb_mlp_param(&mut mlp, pi, e, FD_EPS);
            let fd = (fp - fm) / (2.0 * FD_EPS);
            assert_close(fd, g[e], &format!("{path}[{e}]"));
        }
    }
}

#[test]
fn backward_without_input_grad_skips_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let stack = ConvStack(vec![ConvLayer::Conv(test_conv(
        &mut rng, "c", 2, 3, 3, 1, 1, true,
    ))]);
    let x = rand_array3(&mut rng, (2, 5, 5));
    let mut caches = Vec::new();
    let y = stack.forward_rec(x, &mut caches);
    let mut grads = Gradients::new();
    let dx = stack.backward(&caches, Array3::ones(y.dim()), &mut grads, false);
    assert!(dx.is_none());
    assert!(grads.get("c.weight").is_some());
    assert!(grads.get("c.bias").is_some());
}

#[test]
fn gradients_merge_and_scale() {
    let mut a = Gradients::<f64>::new();
    a.add("p", ndarray::arr1(&[1.0, 2.0]).into_dyn());
    let mut b = Gradients::new();
    b.add("p", ndarray::arr1(&[0.5, 0.5]).into_dyn());
    b.add("q", ndarray::arr1(&[3.0]).into_dyn());
    a.merge(&b);
    a.scale(2.0);
    assert_eq!(a.get("p").unwrap().as_slice().unwrap(), &[3.0, 5.0]);
    assert_eq!(a.get("q").unwrap().as_slice().unwrap(), &[6.0]);
}
