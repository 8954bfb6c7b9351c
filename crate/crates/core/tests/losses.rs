use dislab_core::gradcore::{
    collect_grads, grad_check, Architecture, GradCheckOptions, Graph, ModelKind, ModelParams, Network, Tensor,
};
use dislab_core::losses::{
    self, classification_loss, disentanglement_loss, focal_loss, psnr, realism_loss, ssim, total_loss, DisentForm,
    LatentTarget, LossComponents, LossWeights, PerturbationSpec, LOG_FLOOR,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C1: f64 = 1e-4;
const C2: f64 = 9e-4;

fn image(c: usize, h: usize, w: usize, f: impl FnMut(usize) -> f64) -> Tensor<f64> {
    Tensor::new(vec![c, h, w], (0..c * h * w).map(f).collect())
}

fn random_image(c: usize, s: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image(c, s, s, |_| rng.random::<f64>())
}

fn specs(sigma: f64) -> Vec<PerturbationSpec> {
    vec![
        PerturbationSpec::new(sigma, LatentTarget::Med).unwrap(),
        PerturbationSpec::new(sigma, LatentTarget::Sensit).unwrap(),
    ]
}

// --- focal / classification ------------------------------------------------

#[test]
fn focal_hand_values() {
    let half = vec![vec![0.5, 0.5]];
    let v = focal_loss(&half, &[1], &[1.0, 1.0], 2.0).unwrap();
    assert!((v - 0.25 * 2f64.ln()).abs() < 1e-15);
    assert!((v - 0.17329).abs() < 1e-5);
    let sure = vec![vec![0.0, 1.0]];
    assert_eq!(focal_loss(&sure, &[1], &[1.0, 3.0], 2.0).unwrap(), 0.0);
    assert!(focal_loss(&half, &[1, 0], &[1.0, 1.0], 2.0).is_err());
    assert!(focal_loss(&half, &[1], &[1.0], 2.0).is_err());
}

#[test]
fn focal_log_is_floored() {
    let wrong = vec![vec![1.0, 0.0]];
    let v = focal_loss(&wrong, &[1], &[1.0, 1.0], 0.0).unwrap();
    assert!((v + LOG_FLOOR.ln()).abs() < 1e-9);
}

#[test]
fn classification_hand_values() {
    let w = LossWeights::default();
    let u = vec![vec![0.5, 0.5]; 3];
    let v = classification_loss(&u, &[0, 1, 1], &u, &[1, 0, 0], &w).unwrap();
    assert!((v - 2.0 * 2f64.ln()).abs() < 1e-15);
    assert!((v - 1.38629).abs() < 1e-5);

    let exact = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert_eq!(classification_loss(&exact, &[0, 1], &exact, &[0, 1], &w).unwrap(), 0.0);

    let no_sa = LossWeights {
        lambda_sensit: 0.0,
        ..LossWeights::default()
    };
    let pm = vec![vec![0.7, 0.3], vec![0.2, 0.8]];
    let ps = vec![vec![0.9, 0.1], vec![0.6, 0.4]];
    let v = classification_loss(&pm, &[0, 1], &ps, &[1, 0], &no_sa).unwrap();
    let ce = -(0.7f64.ln() + 0.8f64.ln()) / 2.0;
    assert!((v - ce).abs() < 1e-15);

    let three = vec![vec![0.2, 0.3, 0.5]; 2];
    assert!(classification_loss(&pm, &[0, 1], &three, &[3, 0], &w).is_err());
}

// --- ssim / psnr / realism -------------------------------------------------

/// Direct sliding-window SSIM: every valid window position, population statistics.
fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>, win: usize) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let at = |t: &Tensor<f64>, ch, y, x| t.data()[ch * h * w + y * w + x];
    let mut total = 0.0;
    let mut count = 0.0;
    for ch in 0..c {
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        xs.push(at(a, ch, y, x));
                        ys.push(at(b, ch, y, x));
                    }
                }
                let n = xs.len() as f64;
                let ma = xs.iter().sum::<f64>() / n;
                let mb = ys.iter().sum::<f64>() / n;
                let va = xs.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / n;
                let vb = ys.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n;
                let cov = xs.iter().zip(&ys).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / n;
                total += (2.0 * ma * mb + C1) * (2.0 * cov + C2) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1.0;
            }
        }
    }
    total / count
}

#[test]
fn ssim_constant_images_closed_form() {
    let a = image(3, 8, 8, |_| 0.2);
    let b = image(3, 8, 8, |_| 0.8);
    let expect = (2.0 * 0.2 * 0.8 + C1) * C2 / ((0.04 + 0.64 + C1) * C2);
    let got = ssim(&a, &b, 7, C1, C2).unwrap();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn ssim_matches_direct_windows_and_is_symmetric() {
    let a = random_image(3, 12, 1);
    let b = random_image(3, 12, 2);
    let got = ssim(&a, &b, 7, C1, C2).unwrap();
    assert!((got - ssim_oracle(&a, &b, 7)).abs() < 1e-12);
    assert_eq!(got, ssim(&b, &a, 7, C1, C2).unwrap());
    assert!((ssim(&a, &a, 7, C1, C2).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_window_larger_than_image_is_an_error() {
    let a = random_image(1, 6, 1);
    assert!(matches!(
        ssim(&a, &a, 7, C1, C2),
        Err(losses::LossError::WindowTooLarge { .. })
    ));
}

#[test]
fn psnr_reference_values() {
    let a = image(3, 8, 8, |i| 0.3 + 0.001 * (i % 50) as f64);
    assert_eq!(psnr(&a, &a, 1.0, 48.0).unwrap(), 48.0);
    let b = image(3, 8, 8, |i| a.data()[i] + 0.1);
    assert!((psnr(&a, &b, 1.0, 48.0).unwrap() - 20.0).abs() < 1e-9);
    let zeros = image(1, 4, 4, |_| 0.0);
    let ones = image(1, 4, 4, |_| 1.0);
    assert!(psnr(&zeros, &ones, 1.0, 48.0).unwrap().abs() < 1e-12);
}

#[test]
fn realism_perfect_reconstruction_is_exactly_zero() {
    let a = random_image(3, 16, 3);
    assert_eq!(realism_loss(&a, &a, &LossWeights::default()).unwrap(), 0.0);
}

#[test]
fn realism_is_composed_of_ssim_and_psnr() {
    let w = LossWeights::default();
    let a = random_image(3, 16, 4);
    let b = random_image(3, 16, 5);
    let s = ssim(&a, &b, 7, C1, C2).unwrap();
    let p = psnr(&a, &b, 1.0, 48.0).unwrap();
    let got = realism_loss(&a, &b, &w).unwrap();
    assert!((got - ((1.0 - s) + (1.0 - p / 48.0))).abs() < 1e-12);
}

// --- total -----------------------------------------------------------------

#[test]
fn total_loss_arithmetic() {
    let c = LossComponents {
        classifier: 1.0,
        realism: 0.5,
        disent: 0.2,
    };
    assert!((total_loss(c, &LossWeights::default()) - 2.5).abs() < 1e-15);
    let off = LossWeights {
        lambda_r: 0.0,
        lambda_d: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(total_loss(c, &off), 1.0);
}

// --- disentanglement -------------------------------------------------------

#[path = "common/oracle.rs"]
mod oracle;
use oracle::scripted_disent;

fn full_arch(kind: ModelKind) -> Architecture {
    Architecture::new(kind, 32, 3, 32)
}

fn batch(n: usize, a: &Architecture, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * a.channels * a.image_size * a.image_size;
    Tensor::new(
        vec![n, a.channels, a.image_size, a.image_size],
        (0..len).map(|_| rng.random::<f64>()).collect(),
    )
}

#[test]
fn disentanglement_matches_scripted_recomputation() {
    let a = full_arch(ModelKind::Disentangled);
    let p = ModelParams::<f64>::init(a.clone(), 31).unwrap();
    let x = batch(2, &a, 8);
    for form in [DisentForm::Literal, DisentForm::CrossOnly] {
        let got = disentanglement_loss(&p, &x, &specs(0.4), 77, form).unwrap();
        let want = scripted_disent(&p, &x, 0.4, 77, form);
        assert!(got > 0.0);
        assert!((got - want).abs() < 1e-6, "{form:?}: {got} vs {want}");
    }
}

#[test]
fn disentanglement_vanishes_for_an_idempotent_autoencoder_without_noise() {
    // With all weights zero, decode(z) is the constant 0.5 image and encode
    // maps every image to zero, so re-encoding reproduces the latents.
    let a = full_arch(ModelKind::Disentangled);
    let p = ModelParams::<f64>::zeros(a.clone()).unwrap();
    let x = batch(2, &a, 9);
    let v = disentanglement_loss(&p, &x, &specs(1e-300), 1, DisentForm::Literal).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn disentanglement_requires_both_targets() {
    let a = full_arch(ModelKind::Disentangled);
    let p = ModelParams::<f64>::init(a.clone(), 1).unwrap();
    let x = batch(1, &a, 1);
    let one = vec![PerturbationSpec::new(0.1, LatentTarget::Med).unwrap(); 2];
    assert!(disentanglement_loss(&p, &x, &one, 1, DisentForm::Literal).is_err());
    assert!(PerturbationSpec::new(0.0, LatentTarget::Med).is_err());
    assert!(PerturbationSpec::new(f64::NAN, LatentTarget::Med).is_err());
}

// --- gradient checks through the full network ------------------------------

fn grad_err<F>(params: &ModelParams<f64>, images: &Tensor<f64>, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &Network<'_>, dislab_core::gradcore::Var) -> dislab_core::gradcore::Var,
{
    let f = |p: &ModelParams<f64>| {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let net = Network::new(&p.arch, &bound);
        let x = g.leaf(images.clone());
        let l = build(&mut g, &net, x);
        (g.scalar(l), collect_grads(&g, &bound, l))
    };
    grad_check(f, params, GradCheckOptions::default()).max_relative_error
}

const Y_DR: [usize; 4] = [0, 1, 1, 0];
const Y_SA: [usize; 4] = [1, 1, 0, 0];

#[test]
fn every_loss_passes_gradient_check_through_the_network() {
    let w = LossWeights {
        class_weights: vec![0.6, 2.8],
        ..LossWeights::default()
    };
    let base = full_arch(ModelKind::Baseline);
    let bp = ModelParams::<f64>::init(base.clone(), 41).unwrap();
    let x = batch(4, &base, 10);
    let focal = grad_err(&bp, &x, |g, net, x| {
        let lat = net.encode(g, x).unwrap();
        let p = net.classify_joint(g, &lat).unwrap();
        losses::focal_term(g, p, &Y_DR, &w.class_weights, w.focal_gamma).unwrap()
    });
    assert!(focal < 1e-3, "focal {focal}");

    let dis = full_arch(ModelKind::Disentangled);
    let dp = ModelParams::<f64>::init(dis.clone(), 42).unwrap();
    let sp = specs(0.3);
    let noise = losses::sample_noise::<f64>(&sp, 4, 32, 5);
    let cls = grad_err(&dp, &x, |g, net, x| {
        let lat = net.encode(g, x).unwrap();
        let pm = net.classify_med(g, lat.med).unwrap();
        let ps = net.classify_sensit(g, lat.sensit).unwrap();
        losses::classification_term(g, pm, &Y_DR, ps, &Y_SA, &w).unwrap()
    });
    assert!(cls < 1e-3, "classification {cls}");
    let real = grad_err(&dp, &x, |g, net, x| {
        let lat = net.encode(g, x).unwrap();
        let r = net.decode(g, lat.med, lat.sensit).unwrap();
        losses::realism_term(g, x, r, &w).unwrap()
    });
    assert!(real < 1e-3, "realism {real}");
    let dis_err = grad_err(&dp, &x, |g, net, x| {
        let lat = net.encode(g, x).unwrap();
        losses::disentanglement_term(g, net, &lat, &sp, &noise, DisentForm::Literal).unwrap()
    });
    assert!(dis_err < 1e-3, "disentanglement {dis_err}");
    let total = grad_err(&dp, &x, |g, net, x| {
        let lat = net.encode(g, x).unwrap();
        let pm = net.classify_med(g, lat.med).unwrap();
        let ps = net.classify_sensit(g, lat.sensit).unwrap();
        let c = losses::classification_term(g, pm, &Y_DR, ps, &Y_SA, &w).unwrap();
        let r = net.decode(g, lat.med, lat.sensit).unwrap();
        let r = losses::realism_term(g, x, r, &w).unwrap();
        let d = losses::disentanglement_term(g, net, &lat, &sp, &noise, DisentForm::Literal).unwrap();
        losses::total_term(g, c, r, d, &w)
    });
    assert!(total < 1e-3, "total {total}");
}

// --- properties ------------------------------------------------------------

fn prob_rows(raw: &[f64]) -> Vec<Vec<f64>> {
    raw.iter().map(|&p| vec![1.0 - p, p]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn focal_with_zero_gamma_is_weighted_cross_entropy(
        raw in prop::collection::vec(0.001f64..0.999, 1..40),
        labels in prop::collection::vec(0usize..2, 40),
        w0 in 0.1f64..5.0,
        w1 in 0.1f64..5.0,
    ) {
        let probs = prob_rows(&raw);
        let y = &labels[..raw.len()];
        let got = focal_loss(&probs, y, &[w0, w1], 0.0).unwrap();
        let ce = probs.iter().zip(y).map(|(p, &t)| -[w0, w1][t] * p[t].ln()).sum::<f64>() / raw.len() as f64;
        prop_assert!((got - ce).abs() < 1e-12);
        prop_assert!(focal_loss(&probs, y, &[w0, w1], 2.0).unwrap() >= 0.0);
    }

    #[test]
    fn ssim_bounds_and_symmetry(seed_a in any::<u64>(), seed_b in any::<u64>()) {
        let a = random_image(2, 8, seed_a);
        let b = random_image(2, 8, seed_b);
        let ab = ssim(&a, &b, 7, C1, C2).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, ssim(&b, &a, 7, C1, C2).unwrap());
        prop_assert!((ssim(&a, &a, 7, C1, C2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_does_not_increase_when_error_grows(seed in any::<u64>(), k in 1.0f64..10.0) {
        let a = random_image(1, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let e: Vec<f64> = (0..64).map(|_| rng.random_range(-0.05..0.05)).collect();
        let b1 = image(1, 8, 8, |i| a.data()[i] + e[i]);
        let bk = image(1, 8, 8, |i| a.data()[i] + k * e[i]);
        prop_assert!(psnr(&a, &bk, 1.0, 48.0).unwrap() <= psnr(&a, &b1, 1.0, 48.0).unwrap());
    }

    #[test]
    fn realism_is_non_negative(seed_a in any::<u64>(), seed_b in any::<u64>()) {
        let a = random_image(3, 8, seed_a);
        let b = random_image(3, 8, seed_b);
        prop_assert!(realism_loss(&a, &b, &LossWeights::default()).unwrap() >= 0.0);
    }

    // Dyadic values keep every product and sum exact in f64.
    #[test]
    fn total_is_affine_in_each_lambda(
        c in -64i32..64, r in 0i32..64, d in 0i32..64, lr in 0i32..16, ld in 0i32..16, step in 1i32..16,
    ) {
        let comps = LossComponents {
            classifier: c as f64 / 8.0,
            realism: r as f64 / 16.0,
            disent: d as f64 / 32.0,
        };
        let w = |lr: i32, ld: i32| LossWeights {
            lambda_r: lr as f64 / 4.0,
            lambda_d: ld as f64 / 4.0,
            ..LossWeights::default()
        };
        let base = total_loss(comps, &w(lr, ld));
        let h = step as f64 / 4.0;
        prop_assert_eq!(total_loss(comps, &w(lr + step, ld)) - base, h * comps.realism);
        prop_assert_eq!(total_loss(comps, &w(lr, ld + step)) - base, h * comps.disent);
        prop_assert_eq!(total_loss(comps, &w(lr, 2 * ld)) - base, (ld as f64 / 4.0) * comps.disent);
    }
}

#[test]
fn disentanglement_is_non_negative_on_random_models() {
    let a = Architecture::new(ModelKind::Disentangled, 16, 3, 8);
    for seed in 0..5 {
        let p = ModelParams::<f64>::init(a.clone(), seed).unwrap();
        let x = batch(2, &a, seed + 100);
        assert!(disentanglement_loss(&p, &x, &specs(0.5), seed, DisentForm::Literal).unwrap() >= 0.0);
    }
}
