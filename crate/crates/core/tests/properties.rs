use approx::assert_relative_eq;
use proptest::prelude::*;

use klens::image_io::{preprocess, to_image, ImageBuffer};
use klens::interpret::{preservation_loss, regularization_loss, suppression_loss};
use klens::metrics::{aggregate_report, mse_others, mse_selected, ssim, Grouping, KernelEval};
use klens::model_io::{decode_model, encode_model};
use klens::net::{build_toy_deep_net, KernelRef};
use klens::tensor::{
    conv2d_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward, ReluRule, Tensor,
};

fn tensor(shape: &[usize]) -> impl Strategy<Value = Tensor<f64>> {
    let shape = shape.to_vec();
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn nonneg(shape: &[usize]) -> impl Strategy<Value = Tensor<f64>> {
    tensor(shape).prop_map(|t| t.map(f64::abs))
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_without_bias(
        x in tensor(&[2, 6, 5]),
        y in tensor(&[2, 6, 5]),
        w in tensor(&[3, 2, 3, 3]),
        a in -3.0f64..3.0,
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        let b = Tensor::zeros(&[3]);
        let lhs = conv2d_forward(&x.scale(a).add(&y).unwrap(), &w, &b, stride, pad).unwrap();
        let rhs = conv2d_forward(&x, &w, &b, stride, pad).unwrap().scale(a)
            .add(&conv2d_forward(&y, &w, &b, stride, pad).unwrap()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-10));
    }

    #[test]
    fn relu_rules_relate(g in tensor(&[2, 4, 4]), x in tensor(&[2, 4, 4])) {
        let plain = relu_backward(&g, &x, ReluRule::Plain).unwrap();
        let guided = relu_backward(&g, &x, ReluRule::Guided).unwrap();
        let deconv = relu_backward(&g, &x, ReluRule::Deconv).unwrap();
        for i in 0..g.len() {
            let (p, q, d) = (plain.data()[i], guided.data()[i], deconv.data()[i]);
            prop_assert!(q.abs() <= p.abs());
            if p == 0.0 || g.data()[i] < 0.0 {
                prop_assert_eq!(q, 0.0);
            }
            prop_assert!(d >= 0.0);
        }
        prop_assert!(guided.count_nonzero() <= plain.count_nonzero());
        prop_assert!(relu_forward(&x).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn maxpool_backward_keeps_mass(x in tensor(&[3, 8, 6]), up in tensor(&[3, 4, 3])) {
        let (out, sw) = maxpool_forward(&x, 2, 2).unwrap();
        prop_assert_eq!(out.shape(), up.shape());
        let back = maxpool_backward(&up, &sw, x.shape()).unwrap();
        assert_relative_eq!(back.sum(), up.sum(), epsilon = 1e-12, max_relative = 1e-12);
        prop_assert!(back.count_nonzero() <= up.count_nonzero());
    }

    #[test]
    fn losses_are_nonnegative(
        f_hat in nonneg(&[5, 5]),
        f in nonneg(&[5, 5]).prop_filter("live map", |t| t.sum() > 0.0),
        o_hat in nonneg(&[3, 5, 5]),
        o in nonneg(&[3, 5, 5]).prop_filter("live maps", |t| t.sum() > 0.0),
        x in tensor(&[3, 6, 6]),
        c in -4.0f64..4.0,
    ) {
        prop_assert!(preservation_loss(&f_hat, &f).unwrap() >= 0.0);
        prop_assert!(suppression_loss(&o_hat, &o).unwrap() >= 0.0);
        let lr = regularization_loss(&x).unwrap();
        prop_assert!(lr >= 0.0);
        assert_relative_eq!(regularization_loss(&x.scale(c)).unwrap(), c.abs() * lr, max_relative = 1e-12, epsilon = 1e-15);
    }

    #[test]
    fn ssim_and_mse_bounds(a in nonneg(&[6, 6]), b in nonneg(&[6, 6]), others in tensor(&[2, 6, 6])) {
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!(mse_selected(&a, &b).unwrap() >= 0.0);
        prop_assert!(mse_others(&others) >= 0.0);
    }

    #[test]
    fn aggregate_mean_is_bracketed(vals in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20)) {
        let evals: Vec<KernelEval> = vals.iter().enumerate().map(|(i, &(s, m))| KernelEval {
            method: "ours".into(),
            image_id: format!("img{i}"),
            layer: "conv1_2".into(),
            kernel: 0,
            seed: 0,
            ssim_selected: s,
            mse_selected: m,
            mse_others: m,
        }).collect();
        let rep = aggregate_report(&evals, Grouping::LayerAndMethod).unwrap();
        let row = rep.row("conv1_2", "ours").unwrap();
        let lo = vals.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
        let hi = vals.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(row.ssim_selected.mean >= lo - 1e-12 && row.ssim_selected.mean <= hi + 1e-12);
        prop_assert_eq!(rep.total_count(), vals.len());
    }

    #[test]
    fn preprocess_then_render_round_trips(pixels in prop::collection::vec(any::<[u8; 3]>(), 64)) {
        let img = ImageBuffer::new(8, 8, pixels).unwrap();
        let net = build_toy_deep_net(0).with_input_shape([3, 8, 8]).unwrap();
        let x: Tensor<f32> = preprocess(&img, &net).unwrap();
        let back = to_image(&x, net.normalization(), false).unwrap();
        for (p, q) in img.pixels().iter().zip(back.pixels()) {
            for ch in 0..3 {
                prop_assert!((p[ch] as i32 - q[ch] as i32).abs() <= 1);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn model_round_trips(seed in any::<u64>()) {
        let net = build_toy_deep_net(seed);
        let (manifest, blob) = encode_model(&net).unwrap();
        let back = decode_model(&manifest, &blob, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert!(back.kernel_site(&KernelRef::new("conv3_2", 15)).is_ok());
    }
}
