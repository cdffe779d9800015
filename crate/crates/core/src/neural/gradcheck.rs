//! Central finite-difference checks of the analytic gradients, in `f64`.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, GatedGrads, GatedParams};
use super::loss::{mse_loss, tv_loss, PerceptualNet};
use super::unet::{ParamSet, UNet, UNetConfig};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step used for every check.
pub const STEP: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely rather than
/// relative to the gradient.
pub const REL_FLOOR: f64 = 1e-6;

/// Worst disagreement seen over `checked` gradient entries.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        if !(e <= self.max_rel_error) {
            self.max_rel_error = e;
        }
        self.checked += 1;
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck { max_rel_error: self.max_rel_error.max(other.max_rel_error), checked: self.checked + other.checked }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()).expect("shape")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Indices to probe in a tensor of `len` entries: all of them, or a seeded
/// sample of `limit`.
fn probe_indices(rng: &mut ChaCha8Rng, len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|_| rng.random_range(0..len)).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares `analytic` with central differences of `f` at the probed
/// entries of `t`.
fn check_tensor(
    t: &mut Tensor<f64>,
    analytic: &Tensor<f64>,
    indices: &[usize],
    f: &mut dyn FnMut(&Tensor<f64>) -> f64,
    out: &mut GradCheck,
) {
    for &i in indices {
        let orig = t.data()[i];
        t.data_mut()[i] = orig + STEP;
        let fp = f(t);
        t.data_mut()[i] = orig - STEP;
        let fm = f(t);
        t.data_mut()[i] = orig;
        out.record(analytic.data()[i], (fp - fm) / (2.0 * STEP));
    }
}

/// Gated convolution: every weight, bias and input entry.
pub fn gated_conv(seed: u64, c_in: usize, c_out: usize, h: usize, w: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, &[c_in, h, w], -1.0, 1.0);
    let mut ps = [
        random_tensor(&mut rng, &[c_out, c_in, 3, 3], -0.5, 0.5),
        random_tensor(&mut rng, &[c_out], -0.5, 0.5),
        random_tensor(&mut rng, &[c_out, c_in, 3, 3], -0.5, 0.5),
        random_tensor(&mut rng, &[c_out], -0.5, 0.5),
    ];
    let r = random_tensor(&mut rng, &[c_out, h, w], -1.0, 1.0);
    let eval = |x: &Tensor<f64>, ps: &[Tensor<f64>; 4]| -> f64 {
        let p = GatedParams { feature_w: &ps[0], feature_b: &ps[1], gate_w: &ps[2], gate_b: &ps[3] };
        dot(&layers::gated_conv(x, p).expect("shapes").0, &r)
    };
    let p = GatedParams { feature_w: &ps[0], feature_b: &ps[1], gate_w: &ps[2], gate_b: &ps[3] };
    let (_, cache) = layers::gated_conv(&x, p)?;
    let mut grads: [Tensor<f64>; 4] = core::array::from_fn(|i| Tensor::zeros(ps[i].shape()));
    let dx = {
        let [a, b, c, d] = &mut grads;
        layers::gated_conv_backward(&cache, p, &r, GatedGrads { feature_w: a, feature_b: b, gate_w: c, gate_b: d })
    };
    let mut out = GradCheck::default();
    let mut xm = x.clone();
    let all: Vec<usize> = (0..xm.len()).collect();
    check_tensor(&mut xm, &dx, &all, &mut |xv| eval(xv, &ps), &mut out);
    for k in 0..4 {
        let all: Vec<usize> = (0..ps[k].len()).collect();
        let mut t = ps[k].clone();
        let analytic = grads[k].clone();
        check_tensor(
            &mut t,
            &analytic,
            &all,
            &mut |tv| {
                let mut q = ps.clone();
                q[k] = tv.clone();
                eval(&x, &q)
            },
            &mut out,
        );
        ps[k] = t;
    }
    Ok(out)
}

/// 1×1 descriptor head: every weight, bias and input entry.
pub fn conv1x1(seed: u64, c_in: usize, c_out: usize, h: usize, w: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, &[c_in, h, w], -1.0, 1.0);
    let wt = random_tensor(&mut rng, &[c_out, c_in], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[c_out], -1.0, 1.0);
    let r = random_tensor(&mut rng, &[c_out, h, w], -1.0, 1.0);
    let mut dw = Tensor::zeros(wt.shape());
    let mut db = Tensor::zeros(b.shape());
    let dx = layers::conv1x1_backward(&x, &wt, &r, &mut dw, &mut db);
    let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&layers::conv1x1(x, w, b).expect("shapes"), &r);
    let mut out = GradCheck::default();
    let idx = |t: &Tensor<f64>| (0..t.len()).collect::<Vec<_>>();
    check_tensor(&mut x.clone(), &dx, &idx(&x), &mut |v| f(v, &wt, &b), &mut out);
    check_tensor(&mut wt.clone(), &dw, &idx(&wt), &mut |v| f(&x, v, &b), &mut out);
    check_tensor(&mut b.clone(), &db, &idx(&b), &mut |v| f(&x, &wt, v), &mut out);
    Ok(out)
}

/// Whole network including the head: probes up to `per_tensor` entries of
/// every parameter tensor (all of them when `None`) and of the input.
pub fn unet(seed: u64, config: UNetConfig, size: usize, per_tensor: Option<usize>) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let net = UNet::new(config.clone())?;
    let mut params: ParamSet<f64> = net.init_params();
    // Move away from the identity head and the symmetric bias init so every
    // path carries gradient.
    for t in &mut params.tensors {
        for v in t.data_mut() {
            *v += 0.1 * (rng.random::<f64>() - 0.5);
        }
    }
    let x = random_tensor(&mut rng, &[config.in_channels, size, size], 0.0, 1.0);
    let r = random_tensor(&mut rng, &[config.out_channels, size, size], -1.0, 1.0);
    let tape = net.forward_train(&params, &x)?;
    let (grads, dx) = net.backward(&params, &tape, &r);
    let mut out = GradCheck::default();
    let idx = probe_indices(&mut rng, x.len(), per_tensor);
    check_tensor(&mut x.clone(), &dx, &idx, &mut |v| dot(&net.forward(&params, v).expect("forward"), &r), &mut out);
    for k in 0..params.tensors.len() {
        let idx = probe_indices(&mut rng, params.tensors[k].len(), per_tensor);
        let mut t = params.tensors[k].clone();
        let mut probe = params.clone();
        check_tensor(
            &mut t,
            &grads.tensors[k],
            &idx,
            &mut |v| {
                probe.tensors[k] = v.clone();
                dot(&net.forward(&probe, &x).expect("forward"), &r)
            },
            &mut out,
        );
    }
    Ok(out)
}

/// Each loss term separately: `[perceptual, reconstruction, total variation]`.
pub fn loss_terms(seed: u64, h: usize, w: usize) -> Result<[GradCheck; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = random_tensor(&mut rng, &[3, h, w], 0.0, 1.0);
    let target = random_tensor(&mut rng, &[3, h, w], 0.0, 1.0);
    let all: Vec<usize> = (0..pred.len()).collect();

    let net = PerceptualNet::<f64>::new(3, seed);
    let (_, g) = net.loss(&pred, &target)?;
    let mut perc = GradCheck::default();
    check_tensor(&mut pred.clone(), &g, &all, &mut |v| net.loss(v, &target).expect("loss").0, &mut perc);

    let (_, g) = mse_loss(&pred, &target)?;
    let mut reco = GradCheck::default();
    check_tensor(&mut pred.clone(), &g, &all, &mut |v| mse_loss(v, &target).expect("loss").0, &mut reco);

    // The TV input keeps every adjacent difference well away from the kink
    // at 0, where the central difference straddles two slopes.
    let mut x = pred.clone();
    while !tv_differences_clear(&x, 10.0 * STEP) {
        x = random_tensor(&mut rng, &[3, h, w], 0.0, 1.0);
    }
    let (_, g) = tv_loss(&x);
    let mut tv = GradCheck::default();
    check_tensor(&mut x, &g, &all, &mut |v| tv_loss(v).0, &mut tv);
    Ok([perc, reco, tv])
}

fn tv_differences_clear(x: &Tensor<f64>, margin: f64) -> bool {
    let (c, h, w) = x.chw();
    (0..c).all(|ci| {
        let p = x.plane(ci);
        (0..h).all(|y| {
            (0..w).all(|xx| {
                let i = y * w + xx;
                (xx + 1 == w || (p[i + 1] - p[i]).abs() > margin) && (y + 1 == h || (p[i + w] - p[i]).abs() > margin)
            })
        })
    })
}
