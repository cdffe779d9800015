use nar_core::neural::gradcheck;
use nar_core::neural::layers;
use nar_core::neural::loss::{mse_loss, tv_loss};
use nar_core::neural::{AdamConfig, AdamState, Loss, LossConfig, ParamSet, PerceptualNet, TvMode, UNet, UNetConfig};
use nar_core::{Error, Tensor};

fn small_config(in_channels: usize) -> UNetConfig {
    UNetConfig { base_channels: 4, seed: 7, ..UNetConfig::new(in_channels) }
}

#[test]
fn gated_conv_gradients_match_finite_differences() {
    let r = gradcheck::gated_conv(1, 3, 4, 6, 5).unwrap();
    assert!(r.checked > 200);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn head_gradients_match_finite_differences() {
    let r = gradcheck::conv1x1(2, 5, 5, 16, 16).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn unet_gradients_match_finite_differences_sampled() {
    let r = gradcheck::unet(3, small_config(4), 16, Some(6)).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn loss_term_gradients_match_finite_differences() {
    for (name, r) in ["perceptual", "reco", "tv"].iter().zip(gradcheck::loss_terms(4, 16, 16).unwrap()) {
        assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
    }
}

fn no_perceptual(alpha: f64, beta: f64) -> LossConfig {
    LossConfig { alpha, beta, perceptual: false, ..LossConfig::default() }
}

#[test]
fn two_pixel_loss_by_hand() {
    let pred = Tensor::from_vec(&[1, 1, 2], vec![0.0f64, 1.0]).unwrap();
    let target = Tensor::from_vec(&[1, 1, 2], vec![0.0f64, 0.0]).unwrap();
    for mode in [TvMode::Output, TvMode::Residual] {
        let loss = Loss::new(LossConfig { tv_mode: mode, ..no_perceptual(1e-3, 1e4) }, 1);
        let (t, _) = loss.evaluate(&pred, &target).unwrap();
        assert!((t.reco - 0.5).abs() < 1e-12);
        assert!((t.tv - 1.0).abs() < 1e-12);
        assert!((t.total - (1e-3 * 0.5 + 1e4 * 1.0)).abs() < 1e-12);
    }
}

#[test]
fn identical_images_have_zero_loss() {
    let img = Tensor::from_vec(&[3, 8, 8], (0..192).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect()).unwrap();
    let loss = Loss::new(LossConfig::default(), 3);
    let (t, g) = loss.evaluate(&img, &img).unwrap();
    assert_eq!(t.total, 0.0);
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn output_mode_tv_penalises_texture_even_when_matching() {
    let img = Tensor::from_vec(&[1, 1, 2], vec![0.0f64, 1.0]).unwrap();
    let loss = Loss::new(LossConfig { tv_mode: TvMode::Output, ..no_perceptual(1e-3, 1e4) }, 1);
    assert_eq!(loss.evaluate(&img, &img).unwrap().0.tv, 1.0);
}

#[test]
fn zero_weights_leave_only_perceptual() {
    let a = Tensor::from_vec(&[3, 8, 8], (0..192).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
    let b = Tensor::from_vec(&[3, 8, 8], (0..192).map(|i| (i % 5) as f64 / 5.0).collect()).unwrap();
    let cfg = LossConfig { alpha: 0.0, beta: 0.0, ..LossConfig::default() };
    let (t, _) = Loss::new(cfg.clone(), 3).evaluate(&a, &b).unwrap();
    let (p, _) = PerceptualNet::<f64>::new(3, cfg.perceptual_seed).loss(&a, &b).unwrap();
    assert!(p > 0.0);
    assert_eq!(t.perceptual, p);
    assert_eq!(t.total, cfg.perceptual_weight * p);
}

#[test]
fn mse_and_tv_of_constant_images() {
    let a = Tensor::filled(&[2, 3, 4], 0.25f64);
    let b = Tensor::filled(&[2, 3, 4], 0.75f64);
    assert!((mse_loss(&a, &b).unwrap().0 - 0.25).abs() < 1e-15);
    assert_eq!(tv_loss(&a).0, 0.0);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let params =
        ParamSet { names: vec!["p".into()], tensors: vec![Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap()] };
    let grads =
        ParamSet { names: vec!["p".into()], tensors: vec![Tensor::from_vec(&[3], vec![0.5, -2.0, 1e-3]).unwrap()] };
    let cfg = AdamConfig::default();
    let mut p = params.clone();
    let mut st = AdamState::new(&p);
    st.step(&cfg, &mut p, &grads).unwrap();
    assert_eq!(st.step, 1);
    for ((new, old), g) in p.tensors[0].data().iter().zip(params.tensors[0].data()).zip(grads.tensors[0].data()) {
        let expected = -cfg.lr * g / (g.abs() + cfg.eps);
        assert!((new - old - expected).abs() < 1e-12);
        assert!((new - old + cfg.lr * g.signum()).abs() < 1e-7);
    }
}

#[test]
fn adam_rejects_nan_gradients_untouched() {
    let mut p = ParamSet { names: vec!["p".into()], tensors: vec![Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap()] };
    let g = ParamSet { names: vec!["p".into()], tensors: vec![Tensor::from_vec(&[2], vec![f32::NAN, 0.0]).unwrap()] };
    let mut st = AdamState::new(&p);
    let before = (p.clone(), st.clone());
    assert!(matches!(st.step(&AdamConfig::default(), &mut p, &g), Err(Error::NonFinite(_))));
    assert_eq!((p, st), before);
}

#[test]
fn init_is_seeded_and_head_is_identity() {
    let net = UNet::new(small_config(5)).unwrap();
    let a: ParamSet<f32> = net.init_params();
    let b: ParamSet<f32> = net.init_params();
    assert_eq!(a, b);
    let other = UNet::new(UNetConfig { seed: 8, ..small_config(5) }).unwrap().init_params::<f32>();
    assert_ne!(a, other);
    let x = Tensor::from_vec(&[5, 4, 4], (0..80).map(|i| i as f32 * 0.01).collect()).unwrap();
    assert_eq!(net.head(&a, &x).unwrap(), x);
    assert!(a.get("enc0.0.g.b").unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn forward_shapes_and_range() {
    let net = UNet::new(small_config(4)).unwrap();
    let p: ParamSet<f32> = net.init_params();
    let x = Tensor::from_vec(&[4, 32, 48], (0..4 * 32 * 48).map(|i| ((i * 31) % 97) as f32 / 97.0).collect()).unwrap();
    let y = net.forward(&p, &x).unwrap();
    assert_eq!(y.shape(), &[3, 32, 48]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let tape = net.forward_train(&p, &x).unwrap();
    for (a, b) in tape.output().data().iter().zip(y.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn forward_rejects_bad_inputs() {
    let net = UNet::new(small_config(4)).unwrap();
    let p: ParamSet<f32> = net.init_params();
    assert!(net.forward(&p, &Tensor::zeros(&[3, 16, 16])).is_err());
    assert!(matches!(net.forward(&p, &Tensor::zeros(&[4, 24, 16])), Err(Error::Shape(_))));
    let wrong: ParamSet<f32> = UNet::new(small_config(5)).unwrap().init_params();
    assert!(net.forward(&wrong, &Tensor::zeros(&[4, 16, 16])).is_err());
}

#[test]
fn no_descriptor_variant_has_no_head() {
    let net = UNet::new(UNetConfig { descriptor_head: false, ..small_config(4) }).unwrap();
    assert!(net.param_shapes().iter().all(|(n, _)| !n.starts_with("head")));
    let p: ParamSet<f32> = net.init_params();
    assert_eq!(net.forward(&p, &Tensor::zeros(&[4, 16, 16])).unwrap().shape(), &[3, 16, 16]);
}

#[test]
fn channel_widths_cap_at_max() {
    let cfg = UNetConfig::new(7);
    let widths: Vec<usize> = (0..5).map(|k| cfg.level_channels(k)).collect();
    assert_eq!(widths, [16, 32, 64, 128, 128]);
}

#[test]
fn banded_gated_conv_matches_full() {
    let x = Tensor::from_vec(&[3, 40, 24], (0..3 * 40 * 24).map(|i| ((i * 13) % 29) as f64 / 29.0 - 0.5).collect())
        .unwrap();
    let fw = Tensor::from_vec(&[5, 3, 3, 3], (0..135).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect()).unwrap();
    let gw = Tensor::from_vec(&[5, 3, 3, 3], (0..135).map(|i| ((i * 5) % 13) as f64 / 13.0 - 0.5).collect()).unwrap();
    let b = Tensor::from_vec(&[5], vec![0.1, -0.2, 0.0, 0.3, 1.0]).unwrap();
    let p = layers::GatedParams { feature_w: &fw, feature_b: &b, gate_w: &gw, gate_b: &b };
    let full = layers::gated_conv(&x, p).unwrap().0;
    let banded = layers::gated_conv_banded(&x, p).unwrap();
    for (a, c) in full.data().iter().zip(banded.data()) {
        assert!((a - c).abs() < 1e-12);
    }
}

#[test]
fn saturated_gates_store_exact_zeros() {
    let x = Tensor::from_vec(&[2, 12, 12], (0..288).map(|i| ((i * 7) % 17) as f32 / 17.0).collect()).unwrap();
    let fw = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|i| ((i * 5) % 9) as f32 / 9.0).collect()).unwrap();
    let gw = Tensor::zeros(&[3, 2, 3, 3]);
    let fb = Tensor::from_vec(&[3], vec![0.5f32, 1.0, 2.0]).unwrap();
    // sigmoid(-80) ~ 1.8e-35: a normal f32, but its products with weights are not.
    let shut = Tensor::from_vec(&[3], vec![-80.0f32; 3]).unwrap();
    let p = layers::GatedParams { feature_w: &fw, feature_b: &fb, gate_w: &gw, gate_b: &shut };
    assert!(layers::gated_conv(&x, p).unwrap().0.data().iter().all(|&v| v == 0.0));
    assert!(layers::gated_conv_banded(&x, p).unwrap().data().iter().all(|&v| v == 0.0));
    let ajar = Tensor::from_vec(&[3], vec![-60.0f32; 3]).unwrap();
    let p = layers::GatedParams { gate_b: &ajar, ..p };
    let y = layers::gated_conv_banded(&x, p).unwrap();
    assert!(y.data().iter().all(|&v| v > 0.0 && v.is_normal()));
    assert_eq!(y, layers::gated_conv(&x, p).unwrap().0);
}

#[test]
fn zero_weights_give_half_everywhere() {
    let net = UNet::new(small_config(3)).unwrap();
    let mut p: ParamSet<f64> = net.init_params();
    p.tensors.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let x = Tensor::from_vec(&[3, 16, 16], (0..768).map(|i| (i % 10) as f64 / 10.0).collect()).unwrap();
    assert!(net.forward(&p, &x).unwrap().data().iter().all(|&v| v == 0.5));
}

#[test]
fn conv1x1_matches_per_pixel_matmul() {
    let (c, co, h, w) = (5, 3, 4, 6);
    let x =
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|i| ((i * 17) % 23) as f32 / 23.0 - 0.5).collect()).unwrap();
    let wt = Tensor::from_vec(&[co, c], (0..co * c).map(|i| ((i * 7) % 5) as f32 - 2.0).collect()).unwrap();
    let b = Tensor::from_vec(&[co], vec![0.5, -1.0, 2.0]).unwrap();
    let y = layers::conv1x1(&x, &wt, &b).unwrap();
    for o in 0..co {
        for p in 0..h * w {
            let mut acc = b.data()[o];
            for i in 0..c {
                acc += wt.data()[o * c + i] * x.data()[i * h * w + p];
            }
            assert!((y.data()[o * h * w + p] - acc).abs() < 1e-6);
        }
    }
}

#[test]
fn conv1x1_constant_in_constant_out() {
    let x = Tensor::filled(&[2, 5, 5], 0.75f64);
    let wt = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
    let b = Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap();
    let y = layers::conv1x1(&x, &wt, &b).unwrap();
    assert!(y.plane(0).iter().all(|&v| (v - 2.35).abs() < 1e-12));
    assert!(y.plane(1).iter().all(|&v| (v - (-0.175)).abs() < 1e-12));
}

fn reference_adam(theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32) {
    let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / (1.0 - b1.powi(t));
        let vh = v[i] / (1.0 - b2.powi(t));
        theta[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

#[test]
fn adam_trace_on_quadratic_matches_reference() {
    // f(θ) = Σ a_i (θ_i − c_i)², gradient 2 a_i (θ_i − c_i).
    let a = [1.0, 10.0, 0.1, 3.0];
    let c = [0.5, -1.0, 2.0, 0.0];
    let grad = |th: &[f64]| -> Vec<f64> { th.iter().zip(a).zip(c).map(|((t, a), c)| 2.0 * a * (t - c)).collect() };
    let init = vec![0.0, 0.0, 0.0, 1.0];
    let mut p = ParamSet { names: vec!["t".into()], tensors: vec![Tensor::from_vec(&[4], init.clone()).unwrap()] };
    let mut st = AdamState::new(&p);
    let (mut th, mut m, mut v) = (init, vec![0.0; 4], vec![0.0; 4]);
    for t in 1..=10 {
        let g = grad(p.tensors[0].data());
        let gs = ParamSet { names: vec!["t".into()], tensors: vec![Tensor::from_vec(&[4], g).unwrap()] };
        st.step(&AdamConfig::default(), &mut p, &gs).unwrap();
        let g = grad(&th);
        reference_adam(&mut th, &mut m, &mut v, &g, t);
    }
    for (x, y) in p.tensors[0].data().iter().zip(&th) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn adam_zero_gradient_keeps_parameters_and_decays_moments() {
    let mut p =
        ParamSet { names: vec!["p".into()], tensors: vec![Tensor::from_vec(&[2], vec![1.0f64, -1.0]).unwrap()] };
    let mut st = AdamState::new(&p);
    st.m.tensors[0].data_mut().copy_from_slice(&[0.0, 0.0]);
    let zero = ParamSet::<f64>::zeros_like(&p);
    st.step(&AdamConfig::default(), &mut p, &zero).unwrap();
    assert_eq!(p.tensors[0].data(), &[1.0, -1.0]);
    st.m.tensors[0].data_mut().copy_from_slice(&[1.0, 1.0]);
    st.v.tensors[0].data_mut().copy_from_slice(&[1.0, 1.0]);
    let before = p.clone();
    st.step(&AdamConfig::default(), &mut p, &zero).unwrap();
    assert!((st.m.tensors[0].data()[0] - 0.9).abs() < 1e-15);
    assert!((st.v.tensors[0].data()[0] - 0.999).abs() < 1e-15);
    assert_ne!(p, before, "decayed non-zero moments still move the parameters");
}
