use proptest::prelude::*;
use rand_distr::{Distribution, Normal, StandardNormal};
use tap_core::gradcheck::{audit_inputs, gradcheck_tap};
use tap_core::model::{attention_pool, residual_mlp, tap_backward, tap_forward, Parameters};
use tap_core::rng;
use tap_core::{Classifier, Error, Label, LinearProbe, Matrix, TapConfig, TapParams, TokenFeatureRecord};

const EPS: f64 = 1e-5;

fn cfg(dim: usize, heads: usize, hidden: usize, proj: usize, seed: u64) -> TapConfig {
    TapConfig {
        dim,
        heads,
        mlp_hidden: hidden,
        proj_dim: proj,
        seed,
    }
}

fn random_tokens(n: usize, d: usize, seed: u64) -> Matrix {
    let mut r = rng::seeded(seed);
    Matrix::from_vec(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
}

fn jittered(config: TapConfig, seed: u64) -> TapParams {
    let mut p = TapParams::init(config).unwrap();
    let mut r = rng::seeded(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    for (_, t) in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v += noise.sample(&mut r));
    }
    p
}

// ---- straight-line reference implementation ----

fn ref_ln(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= d;
    let mut var = 0.0;
    for v in x {
        var += (v - mean) * (v - mean);
    }
    var /= d;
    let s = (var + EPS).sqrt();
    (0..x.len()).map(|i| gamma[i] * (x[i] - mean) / s + beta[i]).collect()
}

#[allow(clippy::needless_range_loop)]
fn ref_affine(x: &[f64], w: &Matrix, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; w.cols()];
    for j in 0..w.cols() {
        let mut acc = b[j];
        for i in 0..w.rows() {
            acc += x[i] * w.get(i, j);
        }
        y[j] = acc;
    }
    y
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

fn ref_attention(p: &TapParams, tokens: &Matrix) -> Vec<f64> {
    let d = p.config.dim;
    let h = p.config.heads;
    let dh = d / h;
    let n = tokens.rows();
    let normed: Vec<Vec<f64>> = (0..n)
        .map(|i| ref_ln(tokens.row(i), &p.ln_pool.gamma, &p.ln_pool.beta))
        .collect();
    let q = ref_affine(&p.probe, &p.attn_q.weight, &p.attn_q.bias);
    let k: Vec<Vec<f64>> = normed
        .iter()
        .map(|x| ref_affine(x, &p.attn_k.weight, &p.attn_k.bias))
        .collect();
    let v: Vec<Vec<f64>> = normed
        .iter()
        .map(|x| ref_affine(x, &p.attn_v.weight, &p.attn_v.bias))
        .collect();
    let mut concat = vec![0.0; d];
    for head in 0..h {
        let lo = head * dh;
        let mut scores = vec![0.0; n];
        for i in 0..n {
            let mut s = 0.0;
            for c in lo..lo + dh {
                s += q[c] * k[i][c];
            }
            scores[i] = s / (dh as f64).sqrt();
        }
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..n {
            for c in lo..lo + dh {
                concat[c] += e[i] / z * v[i][c];
            }
        }
    }
    ref_affine(&concat, &p.attn_out.weight, &p.attn_out.bias)
}

fn ref_mlp(p: &TapParams, z: &[f64]) -> Vec<f64> {
    let n = ref_ln(z, &p.ln_mlp.gamma, &p.ln_mlp.beta);
    let h: Vec<f64> = ref_affine(&n, &p.fc1.weight, &p.fc1.bias)
        .into_iter()
        .map(ref_gelu)
        .collect();
    let m = ref_affine(&h, &p.fc2.weight, &p.fc2.bias);
    z.iter().zip(m).map(|(a, b)| a + b).collect()
}

fn ref_logit(p: &TapParams, tokens: &Matrix) -> f64 {
    let z = ref_attention(p, tokens);
    let zp = ref_mlp(p, &z);
    let gpl = ref_affine(&zp, &p.proj.weight, &p.proj.bias);
    let mut feats = tokens.row(0).to_vec();
    feats.extend(gpl);
    ref_affine(&feats, &p.classifier.weight, &p.classifier.bias)[0]
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- init ----

#[test]
fn init_is_deterministic_and_follows_rules() {
    let c = cfg(16, 4, 32, 8, 99);
    let a = TapParams::init(c).unwrap();
    let b = TapParams::init(c).unwrap();
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        assert_eq!(
            x.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    for t in a.tensors() {
        if t.name.ends_with(".bias") || t.name.ends_with(".beta") {
            assert!(t.data.iter().all(|&v| v == 0.0), "{}", t.name);
        }
        if t.name.ends_with(".gamma") {
            assert!(t.data.iter().all(|&v| v == 1.0), "{}", t.name);
        }
        if t.name.ends_with(".weight") {
            let (r, c) = (t.shape[0], t.shape[1]);
            let bound = (6.0 / (r + c) as f64).sqrt();
            assert!(t.data.iter().all(|v| v.abs() <= bound), "{}", t.name);
        }
    }
    assert_ne!(TapParams::init(cfg(16, 4, 32, 8, 100)).unwrap(), a);
}

#[test]
fn probe_init_std() {
    let p = TapParams::init(cfg(4096, 8, 1, 1, 5)).unwrap();
    let n = p.probe.len() as f64;
    let mean = p.probe.iter().sum::<f64>() / n;
    let std = (p.probe.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.02).abs() < 0.2 * 0.02, "std {std}");
}

#[test]
fn invalid_config_rejected() {
    assert!(matches!(
        TapParams::init(cfg(10, 3, 4, 4, 0)),
        Err(Error::InvalidConfig(_))
    ));
    assert!(TapParams::init(cfg(8, 2, 0, 4, 0)).is_err());
    assert!(TapParams::init(cfg(0, 1, 4, 4, 0)).is_err());
    let d = TapConfig::new(64, 1);
    assert_eq!((d.heads, d.mlp_hidden, d.proj_dim), (8, 256, 64));
}

// ---- attention pool ----

#[test]
fn single_token_attention_returns_projected_value() {
    let p = jittered(cfg(8, 2, 16, 8, 1), 2);
    let x = random_tokens(1, 8, 3);
    let (z, cache) = attention_pool(&p, &x).unwrap();
    assert!(cache.weights().data().iter().all(|&w| w == 1.0));
    let v = ref_affine(
        &ref_ln(x.row(0), &p.ln_pool.gamma, &p.ln_pool.beta),
        &p.attn_v.weight,
        &p.attn_v.bias,
    );
    let expect = ref_affine(&v, &p.attn_out.weight, &p.attn_out.bias);
    assert!(max_abs_diff(&z, &expect) < 1e-12);
}

#[test]
fn identical_rows_match_single_token() {
    let p = jittered(cfg(8, 2, 16, 8, 4), 5);
    let one = random_tokens(1, 8, 6);
    let rows: Vec<Vec<f64>> = (0..6).map(|_| one.row(0).to_vec()).collect();
    let many = Matrix::from_rows(&rows).unwrap();
    let (z1, _) = attention_pool(&p, &one).unwrap();
    let (zn, _) = attention_pool(&p, &many).unwrap();
    assert!(max_abs_diff(&z1, &zn) < 1e-12);
}

#[test]
fn attention_matches_reference() {
    for seed in 0..5 {
        let p = jittered(cfg(8, 2, 16, 8, seed), seed + 100);
        let x = random_tokens(7, 8, seed + 200);
        let (z, _) = attention_pool(&p, &x).unwrap();
        assert!(max_abs_diff(&z, &ref_attention(&p, &x)) < 1e-12);
    }
}

#[test]
fn attention_dim_mismatch() {
    let p = TapParams::init(cfg(8, 2, 16, 8, 0)).unwrap();
    assert!(matches!(
        attention_pool(&p, &random_tokens(3, 6, 0)),
        Err(Error::DimMismatch { .. })
    ));
}

// ---- residual MLP ----

#[test]
fn zero_mlp_is_identity() {
    let mut p = jittered(cfg(8, 2, 16, 8, 7), 8);
    p.fc1.weight.data_mut().fill(0.0);
    p.fc1.bias.fill(0.0);
    p.fc2.weight.data_mut().fill(0.0);
    p.fc2.bias.fill(0.0);
    let z: Vec<f64> = random_tokens(1, 8, 9).into_vec();
    let (zp, _) = residual_mlp(&p, &z).unwrap();
    assert_eq!(zp, z);
}

#[test]
fn zero_input_yields_output_bias() {
    // LN of the zero vector is beta (= 0), fc1 output is b1 = 0, gelu(0) = 0.
    let mut p = TapParams::init(cfg(8, 2, 16, 8, 10)).unwrap();
    p.fc2.bias = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
    let (zp, _) = residual_mlp(&p, &[0.0; 8]).unwrap();
    assert_eq!(zp, p.fc2.bias);
}

#[test]
fn mlp_matches_reference() {
    let p = jittered(cfg(8, 2, 16, 8, 11), 12);
    let z: Vec<f64> = random_tokens(1, 8, 13).into_vec();
    let (zp, _) = residual_mlp(&p, &z).unwrap();
    assert!(max_abs_diff(&zp, &ref_mlp(&p, &z)) < 1e-12);
    assert!(residual_mlp(&p, &z[..7]).is_err());
}

// ---- full forward ----

#[test]
fn constant_head_from_bias() {
    let mut p = TapParams::zeros(cfg(8, 2, 16, 8, 0)).unwrap();
    p.classifier.bias[0] = 0.7;
    for seed in 0..3 {
        assert_eq!(p.logit(&random_tokens(5, 8, seed)).unwrap(), 0.7);
    }
}

#[test]
fn masked_gpl_is_cls_linear_probe() {
    let mut p = jittered(cfg(8, 2, 16, 8, 14), 15);
    p.mask_gpl();
    let probe = LinearProbe::from_parts(
        (0..8).map(|r| p.classifier.weight.get(r, 0)).collect(),
        p.classifier.bias[0],
    );
    assert_eq!(p.cls_probe(), probe);
    for seed in 0..10 {
        let x = random_tokens(1 + seed as usize, 8, seed);
        assert!((p.logit(&x).unwrap() - probe.logit(&x).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn forward_matches_composed_reference() {
    for seed in 0..5 {
        let p = jittered(cfg(8, 2, 16, 4, seed), seed + 7);
        let x = random_tokens(9, 8, seed + 70);
        assert!((p.logit(&x).unwrap() - ref_logit(&p, &x)).abs() < 1e-12);
    }
}

#[test]
fn record_forward_checks_width() {
    let p = TapParams::init(cfg(8, 2, 16, 8, 0)).unwrap();
    let rec = TokenFeatureRecord::new(Label::Real, "x", 2, vec![0.5; 12]);
    assert!(matches!(tap_forward(&p, &rec), Err(Error::DimMismatch { .. })));
    let rec = TokenFeatureRecord::new(Label::Real, "x", 2, vec![0.5; 16]);
    let (logit, _) = tap_forward(&p, &rec).unwrap();
    assert_eq!(logit, p.logit(&rec.to_matrix()).unwrap());
}

#[test]
fn overflowing_params_name_stage() {
    let mut p = TapParams::init(cfg(8, 2, 16, 8, 0)).unwrap();
    p.proj.bias.fill(1e308);
    p.classifier.weight.data_mut().fill(1e308);
    let err = p.logit(&random_tokens(3, 8, 0)).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteIntermediate { stage: "classifier" }),
        "{err}"
    );
}

// ---- backward ----

#[test]
fn zero_cotangent_gives_zero_grads() {
    let p = jittered(cfg(8, 2, 16, 8, 1), 1);
    let (_, cache) = p.forward(&random_tokens(4, 8, 1)).unwrap();
    let g = tap_backward(&p, &cache, 0.0).unwrap();
    assert!(g.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
}

#[test]
fn classifier_bias_grad_is_dlogit() {
    let p = jittered(cfg(8, 2, 16, 8, 2), 2);
    let (_, cache) = p.forward(&random_tokens(4, 8, 2)).unwrap();
    let g = tap_backward(&p, &cache, -1.375).unwrap();
    assert_eq!(g.classifier.bias[0], -1.375);
}

#[test]
fn shared_key_bias_has_no_gradient() {
    let p = jittered(cfg(8, 2, 16, 8, 6), 6);
    let (_, cache) = p.forward(&random_tokens(9, 8, 6)).unwrap();
    let g = tap_backward(&p, &cache, 1.0).unwrap();
    assert!(g.attn_k.bias.iter().all(|v| v.abs() < 1e-12));
    assert!(g.attn_k.weight.data().iter().any(|v| v.abs() > 1e-3));
}

#[test]
fn stale_cache_rejected() {
    let p = jittered(cfg(8, 2, 16, 8, 3), 3);
    let (_, cache) = p.forward(&random_tokens(4, 8, 3)).unwrap();
    let other = TapParams::init(cfg(8, 4, 16, 8, 3)).unwrap();
    assert!(matches!(tap_backward(&other, &cache, 1.0), Err(Error::StaleCache(_))));
}

#[test]
fn full_model_gradcheck() {
    for seed in 0..3 {
        let report = gradcheck_tap(cfg(8, 2, 16, 8, seed), 9, 1e-5).unwrap();
        assert_eq!(report.tensors.len(), 21);
        for t in &report.tensors {
            assert!(t.rel_err < 1e-6, "{} rel err {}", t.name, t.rel_err);
        }
        assert!(report.input.rel_err < 1e-6, "input rel err {}", report.input.rel_err);
    }
}

#[test]
fn audit_inputs_are_seeded() {
    let (a, x) = audit_inputs(cfg(8, 2, 16, 8, 4), 9, 0.3).unwrap();
    let (b, y) = audit_inputs(cfg(8, 2, 16, 8, 4), 9, 0.3).unwrap();
    assert_eq!(a, b);
    assert_eq!(x, y);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn patch_permutation_invariance(seed: u64, n in 2usize..20, perm_seed: u64) {
        let p = jittered(cfg(8, 2, 16, 8, seed), seed ^ 0xabc);
        let x = random_tokens(n, 8, seed ^ 0x123);
        let mut order: Vec<usize> = (1..n).collect();
        rng::shuffle(&mut order, &mut rng::seeded(perm_seed));
        let mut rows = vec![x.row(0).to_vec()];
        rows.extend(order.iter().map(|&i| x.row(i).to_vec()));
        let permuted = Matrix::from_rows(&rows).unwrap();
        let a = p.logit(&x).unwrap();
        let b = p.logit(&permuted).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn attention_rows_are_distributions(seed: u64, n in 1usize..40, heads in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let p = jittered(cfg(16, heads, 8, 8, seed), seed);
        let (_, cache) = attention_pool(&p, &random_tokens(n, 16, seed ^ 9)).unwrap();
        let w = cache.weights();
        prop_assert_eq!(w.rows(), heads);
        for h in 0..heads {
            prop_assert!((w.row(h).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
