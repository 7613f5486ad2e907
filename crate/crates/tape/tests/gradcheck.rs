use kiop_tape::check::{max_rel_diff, numeric_grad};
use kiop_tape::{CropBox, Graph, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Checks d(sum(f(x) * r))/dx against central differences.
fn check_unary(shape: &[usize], tol: f32, f: impl for<'g> Fn(Var<'g>) -> Var<'g>) {
    let x0 = rand_tensor(shape, 1);
    let eval = |x: &Tensor| -> (f32, Option<Tensor>) {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let y = f(xv);
        let r = g.constant(rand_tensor(&y.shape(), 2));
        let loss = y.mul(r).unwrap().sum_all();
        let val = loss.item();
        let grads = g.backward(loss).unwrap();
        (val, Some(grads.get_or_zeros(xv)))
    };
    let (_, analytic) = eval(&x0);
    let numeric = numeric_grad(&x0, 1e-2, |x| eval(x).0);
    let diff = max_rel_diff(&analytic.unwrap(), &numeric);
    assert!(diff < tol, "max relative gradient error {diff}");
}

#[test]
fn pointwise_ops() {
    check_unary(&[3, 4], 1e-2, |x| x.tanh());
    check_unary(&[3, 4], 1e-2, |x| x.exp());
    check_unary(&[3, 4], 1e-2, |x| x.square());
    check_unary(&[3, 4], 1e-2, |x| x.leaky_relu(0.2));
    check_unary(&[3, 4], 1e-2, |x| x.square().add_scalar(1.0).sqrt().ln());
    check_unary(&[3, 4], 1e-2, |x| x.scale(-3.0).add_scalar(0.5));
}

#[test]
fn broadcasting_binary_ops() {
    check_unary(&[2, 3, 4], 1e-2, |x| {
        let b = x.graph().constant(rand_tensor(&[3, 1], 9));
        x.mul(b).unwrap().add(b).unwrap()
    });
    check_unary(&[2, 3], 1e-2, |x| {
        let row = x.sum_axis(1, true).unwrap().square().add_scalar(1.0);
        x.div(row).unwrap()
    });
    check_unary(&[4], 1e-2, |x| {
        let m = x.graph().constant(rand_tensor(&[2, 4], 3));
        m.sub(x).unwrap()
    });
}

#[test]
fn reductions_and_shapes() {
    check_unary(&[2, 3, 4], 1e-2, |x| x.sum_axis(1, false).unwrap());
    check_unary(&[2, 3, 4], 1e-2, |x| x.mean_axis(2, true).unwrap());
    check_unary(&[3, 4], 1e-2, |x| x.t().unwrap());
    check_unary(&[3, 4], 1e-2, |x| x.select_cols(&[3, 1, 1]).unwrap());
    check_unary(&[3, 4], 1e-2, |x| x.pick(&[0, 3, 2]).unwrap());
    check_unary(&[4, 2], 1e-2, |x| {
        let a = x.narrow0(1, 2).unwrap();
        Var::cat0(&[a, x]).unwrap()
    });
    check_unary(&[2, 1, 4, 4], 1e-2, |x| x.pad_center(8).unwrap().square());
    check_unary(&[2, 1, 6, 6], 1e-2, |x| x.crop_center(2).unwrap());
    check_unary(&[2, 6], 1e-2, |x| x.reshape(vec![3, 4]).unwrap().log_softmax().unwrap());
}

#[test]
fn conv_pool_and_dense() {
    for &(k, stride, pad) in &[(3, 1, 1), (5, 2, 2), (4, 4, 0), (1, 1, 0)] {
        check_unary(&[2, 3, 8, 8], 2e-2, |x| {
            let g = x.graph();
            let w = g.constant(rand_tensor(&[4, 3, k, k], 4));
            let b = g.constant(rand_tensor(&[4], 5));
            x.conv2d(w, Some(b), stride, pad).unwrap()
        });
        // gradient w.r.t. the kernel
        check_unary(&[4, 3, k, k], 2e-2, |w| {
            let x = w.graph().constant(rand_tensor(&[2, 3, 8, 8], 6));
            x.conv2d(w, None, stride, pad).unwrap()
        });
    }
    check_unary(&[2, 2, 6, 6], 1e-2, |x| x.max_pool2d(3, 2, 1).unwrap());
    check_unary(&[2, 2, 3, 3], 1e-2, |x| x.upsample_nearest(2).unwrap());
    check_unary(&[2, 2, 3, 3], 1e-2, |x| x.global_avg_pool().unwrap());
    check_unary(&[2, 2, 3, 3], 1e-2, |x| x.global_max_pool().unwrap());
    check_unary(&[3, 5], 1e-2, |x| {
        let g = x.graph();
        x.linear(g.constant(rand_tensor(&[2, 5], 7)), g.constant(rand_tensor(&[2], 8))).unwrap()
    });
    check_unary(&[2, 5], 1e-2, |w| {
        let g = w.graph();
        g.constant(rand_tensor(&[3, 5], 7)).linear(w, g.constant(rand_tensor(&[2], 8))).unwrap()
    });
    check_unary(&[3, 4], 1e-2, |a| {
        let b = a.graph().constant(rand_tensor(&[4, 2], 10));
        a.matmul(b).unwrap()
    });
    check_unary(&[4, 2], 1e-2, |b| {
        let a = b.graph().constant(rand_tensor(&[3, 4], 10));
        a.matmul(b).unwrap()
    });
}

#[test]
fn normalization_kernels() {
    check_unary(&[4, 3, 2, 2], 2e-2, |x| x.channel_mean().unwrap());
    check_unary(&[4, 3, 2, 2], 2e-2, |x| x.channel_var().unwrap());
    check_unary(&[4, 3, 2, 2], 3e-2, |x| {
        let g = x.graph();
        let gamma = g.constant(rand_tensor(&[3], 11));
        let beta = g.constant(rand_tensor(&[3], 12));
        x.batch_norm_train(gamma, beta, 1e-5).unwrap()
    });
    check_unary(&[3], 2e-2, |gamma| {
        let g = gamma.graph();
        let x = g.constant(rand_tensor(&[4, 3, 2, 2], 13));
        let beta = g.constant(rand_tensor(&[3], 12));
        x.batch_norm_train(gamma, beta, 1e-5).unwrap()
    });
    check_unary(&[4, 3, 2, 2], 1e-2, |x| {
        let g = x.graph();
        let s = g.constant(rand_tensor(&[3], 14));
        let o = g.constant(rand_tensor(&[3], 15));
        x.channel_affine(s, o).unwrap()
    });
}

#[test]
fn crop_resize_gradient() {
    let boxes = [
        CropBox { x0: 1.3, y0: 0.4, width: 5.1, height: 6.2, flip: true },
        CropBox { x0: 0.0, y0: 0.0, width: 8.0, height: 8.0, flip: false },
    ];
    check_unary(&[2, 2, 8, 8], 2e-2, |x| x.crop_resize(&boxes, 8).unwrap());
}

#[test]
fn full_box_without_flip_is_identity() {
    let x = rand_tensor(&[1, 2, 6, 6], 3);
    let y = kiop_tape::crop_resize_tensor(&x, &[CropBox::full(6)], 6).unwrap();
    assert!(max_rel_diff(&x, &y) < 1e-6);
}

#[test]
fn constants_get_no_gradient() {
    let g = Graph::new();
    let w = g.constant(rand_tensor(&[2, 3], 1));
    let x = g.param(rand_tensor(&[4, 3], 2));
    let b = g.constant(Tensor::zeros([2]));
    let loss = x.linear(w, b).unwrap().sum_all();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(w).is_none());
    assert!(grads.get(x).is_some());
}
