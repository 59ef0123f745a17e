mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use mstraj_core::dataset::{Domain, NormStats};
use mstraj_core::labeling::MacroIntentSequence;
use mstraj_core::models::vrae::gumbel_noise;
use mstraj_core::models::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LATENT_VARIANTS: [Variant; 4] = [Variant::VrnnSingle, Variant::VrnnMixed, Variant::VrnnIndep, Variant::Hierarchical];

fn groups(v: Variant) -> (usize, usize) {
    match v {
        Variant::RnnGauss | Variant::VrnnSingle => (1, 1),
        Variant::VrnnMixed => (1, K),
        _ => (K, K),
    }
}

fn random_state(model: &Model, rng: &mut ChaCha8Rng, batch: usize) -> AgentState {
    let agent = model.agent().unwrap();
    let zero = agent.zero_state(batch).unwrap();
    AgentState { h: zero.h.iter().map(|h| uniform_tensor(rng, h.dims(), 0.9)).collect() }
}

/// Last-layer summary for head `g`, sequence `b`.
fn summary(model: &Model, st: &AgentState, g: usize, b: usize) -> Vec<f64> {
    let (rec, _) = groups(model.config.variant);
    let h = st.h.last().unwrap();
    let (_, batch, w) = h.dims3().unwrap();
    let v = flat(h);
    let gg = if rec == 1 { 0 } else { g };
    v[(gg * batch + b) * w..(gg * batch + b + 1) * w].to_vec()
}

fn head_x(model: &Model, x: &[f64], g: usize) -> Vec<f64> {
    let (_, heads) = groups(model.config.variant);
    if heads == 1 {
        x.to_vec()
    } else {
        x[g * D..(g + 1) * D].to_vec()
    }
}

fn gaussian_rows(p: &GaussianParams) -> (Vec<f64>, Vec<f64>) {
    (flat(&p.mean), flat(&p.log_var))
}

#[test]
fn prior_matches_scalar_forward_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in LATENT_VARIANTS {
        let model = tiny_model(v, 11);
        let agent = model.agent().unwrap();
        let oracle = Oracle { model: &model };
        let batch = 3;
        let st = random_state(&model, &mut rng, batch);
        let p = agent.prior(&st).unwrap().unwrap();
        let (mean, lv) = gaussian_rows(&p);
        let (_, heads) = groups(v);
        let l = agent.latent_dim();
        for g in 0..heads {
            for b in 0..batch {
                let (m, s) = split_head(&oracle.mlp("agent.prior", g, &summary(&model, &st, g, b)));
                let at = (g * batch + b) * l;
                assert_close(&mean[at..at + l], &m, 1e-12);
                assert_close(&lv[at..at + l], &s, 1e-12);
            }
        }
        let again = gaussian_rows(&agent.prior(&st).unwrap().unwrap());
        assert_eq!(again, (mean, lv), "{v}: prior not deterministic");
        let zero = gaussian_rows(&agent.prior(&agent.zero_state(2).unwrap()).unwrap().unwrap());
        assert!(zero.0.iter().chain(&zero.1).all(|x| x.is_finite()));
    }
}

#[test]
fn encoder_matches_scalar_forward_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for v in LATENT_VARIANTS {
        let model = tiny_model(v, 12);
        let agent = model.agent().unwrap();
        let oracle = Oracle { model: &model };
        let batch = 2;
        let st = random_state(&model, &mut rng, batch);
        let x = uniform_tensor(&mut rng, &[batch, K * D], 2.0);
        let xs = flat(&x);
        let (mean, lv) = gaussian_rows(&agent.encode(&x, &st).unwrap().unwrap());
        let (_, heads) = groups(v);
        let l = agent.latent_dim();
        for g in 0..heads {
            for b in 0..batch {
                let mut input = head_x(&model, &xs[b * K * D..(b + 1) * K * D], g);
                input.extend(summary(&model, &st, g, b));
                let (m, s) = split_head(&oracle.mlp("agent.enc", g, &input));
                let at = (g * batch + b) * l;
                assert_close(&mean[at..at + l], &m, 1e-12);
                assert_close(&lv[at..at + l], &s, 1e-12);
            }
        }
    }
}

#[test]
fn hierarchical_decoder_matches_oracle_and_depends_on_macro_intents() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = tiny_model(Variant::Hierarchical, 13);
    let agent = model.agent().unwrap();
    let oracle = Oracle { model: &model };
    let batch = 2;
    let st = random_state(&model, &mut rng, batch);
    let z = uniform_tensor(&mut rng, &agent.latent_shape(batch), 1.0);
    let zs = flat(&z);
    let l = agent.latent_dim();
    let labels_a: Vec<u16> = vec![0, 1, 2, 3, 3, 0];
    let labels_b: Vec<u16> = vec![1, 1, 2, 0, 3, 2];
    let g_a = Tensor::from_vec(one_hot_rows(&labels_a, C), (batch, K * C), &Device::Cpu).unwrap();
    let g_b = Tensor::from_vec(one_hot_rows(&labels_b, C), (batch, K * C), &Device::Cpu).unwrap();
    let out_a = gaussian_rows(&agent.decode(Some(&z), &st, Some(&g_a)).unwrap());
    let out_b = gaussian_rows(&agent.decode(Some(&z), &st, Some(&g_b)).unwrap());
    let ga = flat(&g_a);
    for g in 0..K {
        for b in 0..batch {
            let mut input = zs[(g * batch + b) * l..(g * batch + b + 1) * l].to_vec();
            input.extend(summary(&model, &st, g, b));
            input.extend_from_slice(&ga[b * K * C..(b + 1) * K * C]);
            let (m, s) = split_head(&oracle.mlp("agent.dec", g, &input));
            let at = (g * batch + b) * D;
            assert_close(&out_a.0[at..at + D], &m, 1e-12);
            assert_close(&out_a.1[at..at + D], &s, 1e-12);
            // every agent reacts to the shared macro-intents
            assert_ne!(out_a.0[at..at + D], out_b.0[at..at + D], "agent {g} ignores g");
        }
    }
    assert!(matches!(agent.decode(Some(&z), &st, None), Err(ModelError::MissingMacroIntents)));
    assert!(matches!(agent.decode(None, &st, Some(&g_a)), Err(ModelError::Input(_))));
    let wrong = Tensor::zeros((batch, K * C + 1), DType::F64, &Device::Cpu).unwrap();
    assert!(matches!(agent.decode(Some(&z), &st, Some(&wrong)), Err(ModelError::Input(_))));
}

#[test]
fn non_hierarchical_decoder_rejects_macro_intents() {
    let model = tiny_model(Variant::VrnnIndep, 14);
    let agent = model.agent().unwrap();
    let st = agent.zero_state(1).unwrap();
    let z = Tensor::zeros(&agent.latent_shape(1), DType::F64, &Device::Cpu).unwrap();
    let g = Tensor::zeros((1, K * C), DType::F64, &Device::Cpu).unwrap();
    assert!(matches!(agent.decode(Some(&z), &st, Some(&g)), Err(ModelError::Input(_))));
    let out = agent.decode(Some(&z), &st, None).unwrap();
    assert!(flat(&out.mean).iter().chain(&flat(&out.log_var)).all(|v| v.is_finite()));
}

#[test]
fn recurrence_matches_scalar_gru() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for v in [Variant::RnnGauss, Variant::VrnnSingle, Variant::VrnnMixed, Variant::VrnnIndep, Variant::Hierarchical] {
        let model = tiny_model(v, 15);
        let agent = model.agent().unwrap();
        let oracle = Oracle { model: &model };
        let batch = 2;
        let st = random_state(&model, &mut rng, batch);
        let x = uniform_tensor(&mut rng, &[batch, K * D], 1.5);
        let z = agent.has_latents().then(|| uniform_tensor(&mut rng, &agent.latent_shape(batch), 1.0));
        let next = agent.recurrence(&x, z.as_ref(), &st).unwrap();
        let (rec, heads) = groups(v);
        let l = agent.latent_dim();
        let xs = flat(&x);
        let zs = z.as_ref().map(flat).unwrap_or_default();
        for g in 0..rec {
            for b in 0..batch {
                let mut input = xs[b * K * D..(b + 1) * K * D].to_vec();
                if agent.has_latents() {
                    let own: Vec<usize> = if rec == heads { vec![g] } else { (0..heads).collect() };
                    for hg in own {
                        input.extend_from_slice(&zs[(hg * batch + b) * l..(hg * batch + b + 1) * l]);
                    }
                }
                let mut h: Vec<Vec<f64>> = st
                    .h
                    .iter()
                    .map(|t| {
                        let w = t.dim(2).unwrap();
                        flat(t)[(g * batch + b) * w..(g * batch + b + 1) * w].to_vec()
                    })
                    .collect();
                oracle.gru("agent.rnn", g, &input, &mut h);
                for (layer, want) in h.iter().enumerate() {
                    let w = want.len();
                    let got = flat(&next.h[layer]);
                    assert_close(&got[(g * batch + b) * w..(g * batch + b + 1) * w], want, 1e-12);
                }
            }
        }
    }
}

fn macro_batch(rng: &mut ChaCha8Rng, t_len: usize, batch: usize) -> (Tensor, Vec<MacroIntentSequence>, Tensor, Tensor) {
    let x = uniform_tensor(rng, &[t_len, batch, K * D], 1.0);
    let labels = random_labels(rng, t_len, batch, K, C);
    let refs: Vec<&MacroIntentSequence> = labels.iter().collect();
    let (g, idx) = labels_tensor(&refs, DType::F64).unwrap();
    (x, labels, g, idx)
}

#[test]
fn macro_probabilities_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = tiny_model(Variant::Hierarchical, 16);
    let m = model.macro_model().unwrap();
    for _ in 0..20 {
        let st = MacroState {
            h: m.zero_state(4).unwrap().h.iter().map(|h| uniform_tensor(&mut rng, h.dims(), 1.0)).collect(),
            x_prev: uniform_tensor(&mut rng, &[4, K * D], 5.0),
        };
        let p = m.probs(&st).unwrap().to_vec3::<f64>().unwrap();
        for row in p.iter().flatten() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&q| q >= 0.0));
        }
        let greedy = |st: &MacroState| -> Vec<usize> {
            m.probs(st).unwrap().argmax(2).unwrap().flatten_all().unwrap().to_vec1::<u32>().unwrap().into_iter().map(|v| v as usize).collect()
        };
        assert_eq!(greedy(&st), greedy(&st));
    }
}

#[test]
fn uniform_macro_head_gives_t_k_ln_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = tiny_model(Variant::Hierarchical, 17);
    fill_param(&model, "macro.head.2.weight", 0.0);
    fill_param(&model, "macro.head.2.bias", 0.0);
    let m = model.macro_model().unwrap();
    let p = m.probs(&m.zero_state(1).unwrap()).unwrap();
    assert!(flat(&p).iter().all(|&q| (q - 0.25).abs() < 1e-15));
    let t_len = 7;
    let (x, _, g, idx) = macro_batch(&mut rng, t_len, 3);
    let want = (t_len * K) as f64 * (C as f64).ln();
    for nll in flat(&m.macro_nll(&x, &g, &idx).unwrap()) {
        assert!((nll - want).abs() < 1e-10, "{nll} vs {want}");
    }
}

#[test]
fn point_mass_macro_model_has_zero_nll() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = tiny_model(Variant::Hierarchical, 18);
    fill_param(&model, "macro.head.2.weight", 0.0);
    // category 2 for every agent
    let bias: Vec<f64> = (0..K * C).map(|i| if i % C == 2 { 60.0 } else { 0.0 }).collect();
    set_param(&model, "macro.head.2.bias", bias);
    let m = model.macro_model().unwrap();
    let t_len = 5;
    let x = uniform_tensor(&mut rng, &[t_len, 2, K * D], 1.0);
    let labels: Vec<MacroIntentSequence> = (0..2).map(|_| MacroIntentSequence::new(t_len, K, C, vec![2; t_len * K]).unwrap()).collect();
    let (g, idx) = labels_tensor(&labels.iter().collect::<Vec<_>>(), DType::F64).unwrap();
    for nll in flat(&m.macro_nll(&x, &g, &idx).unwrap()) {
        assert!((0.0..1e-20).contains(&nll), "{nll}");
    }
}

#[test]
fn macro_nll_matches_scalar_replay() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = tiny_model(Variant::Hierarchical, 19);
    let oracle = Oracle { model: &model };
    let m = model.macro_model().unwrap();
    let (t_len, batch) = (6, 3);
    let (x, labels, g, idx) = macro_batch(&mut rng, t_len, batch);
    let got = flat(&m.macro_nll(&x, &g, &idx).unwrap());
    let xs = flat(&x);
    let w = model.config.macro_width;
    for b in 0..batch {
        let mut h = vec![vec![0.0; w]; model.config.rnn_layers];
        let mut x_prev = vec![0.0; K * D];
        let mut nll = 0.0;
        for t in 0..t_len {
            let mut input = h.last().unwrap().clone();
            input.extend_from_slice(&x_prev);
            let logits = oracle.mlp("macro.head", 0, &input);
            let row: Vec<u16> = (0..K).map(|k| labels[b].get(t, k)).collect();
            for k in 0..K {
                let lg = &logits[k * C..(k + 1) * C];
                let lse = lg.iter().map(|v| v.exp()).sum::<f64>().ln();
                nll -= lg[row[k] as usize] - lse;
            }
            let mut rin = one_hot_rows(&row, C);
            rin.extend_from_slice(&x_prev);
            oracle.gru("macro.rnn", 0, &rin, &mut h);
            x_prev = xs[(t * batch + b) * K * D..(t * batch + b + 1) * K * D].to_vec();
        }
        assert!((got[b] - nll).abs() < 1e-10, "sequence {b}: {} vs {nll}", got[b]);
    }
}

#[test]
fn macro_nll_rejects_out_of_range_labels() {
    let model = tiny_model(Variant::Hierarchical, 20);
    let m = model.macro_model().unwrap();
    let x = Tensor::zeros((2, 1, K * D), DType::F64, &Device::Cpu).unwrap();
    let g = Tensor::zeros((2, 1, K * C), DType::F64, &Device::Cpu).unwrap();
    let idx = Tensor::from_vec(vec![0u32, 1, 2, 3, 4, 0], (2, 1, K), &Device::Cpu).unwrap();
    assert!(matches!(m.macro_nll(&x, &g, &idx), Err(ModelError::Input(_))));
}

/// Copies the prior network into the encoder with zero weights on the
/// state input, so `q(z | x, h) = p(z | h)`.
fn encoder_as_prior(model: &Model) {
    let head_x = if groups(model.config.variant).1 == 1 { K * D } else { D };
    let (shape, prior0) = param(model, "agent.prior.0.weight");
    let (g, w, hidden) = (shape[0], shape[1], shape[2]);
    let mut enc0 = vec![0.0; g * (head_x + w) * hidden];
    for gi in 0..g {
        for i in 0..w {
            for o in 0..hidden {
                enc0[(gi * (head_x + w) + head_x + i) * hidden + o] = prior0[(gi * w + i) * hidden + o];
            }
        }
    }
    set_param(model, "agent.enc.0.weight", enc0);
    for name in ["0.bias", "1.weight", "1.bias", "2.weight", "2.bias"] {
        set_param(model, &format!("agent.enc.{name}"), param(model, &format!("agent.prior.{name}")).1);
    }
}

#[test]
fn kl_vanishes_when_encoder_equals_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for v in [Variant::VrnnSingle, Variant::VrnnIndep, Variant::VrnnMixed] {
        let model = tiny_model(v, 21);
        encoder_as_prior(&model);
        let x = uniform_tensor(&mut rng, &[6, 4, K * D], 1.0);
        let terms = model.agent().unwrap().sequence_elbo(&x, None, &mut rng, 2).unwrap();
        let (elbo, recon, kl) = (flat(&terms.elbo), flat(&terms.reconstruction), flat(&terms.kl));
        for i in 0..4 {
            assert!(kl[i].abs() < 1e-12, "{v}: KL {}", kl[i]);
            assert!((elbo[i] - recon[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn kl_term_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for v in LATENT_VARIANTS {
        let model = tiny_model(v, 22);
        let x = uniform_tensor(&mut rng, &[5, 8, K * D], 3.0);
        let labels = random_labels(&mut rng, 5, 8, K, C);
        let g = (v == Variant::Hierarchical).then(|| labels_tensor(&labels.iter().collect::<Vec<_>>(), DType::F64).unwrap().0);
        let terms = model.agent().unwrap().sequence_elbo(&x, g.as_ref(), &mut rng, 1).unwrap();
        assert!(flat(&terms.kl).iter().all(|&k| k >= 0.0));
    }
}

#[test]
fn elbo_lies_below_importance_weighted_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = tiny_model(Variant::VrnnIndep, 23);
    let agent = model.agent().unwrap();
    let n = 120;
    let x = uniform_tensor(&mut rng, &[4, n, K * D], 1.0);
    let m = 64;
    let log_w = agent.log_weights(&x, None, &mut rng, m).unwrap().to_vec2::<f64>().unwrap();
    let elbo = flat(&agent.sequence_elbo(&x, None, &mut rng, 1).unwrap().elbo);
    let gaps: Vec<f64> = log_w
        .iter()
        .zip(&elbo)
        .map(|(w, e)| {
            let top = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let iwae = top + (w.iter().map(|v| (v - top).exp()).sum::<f64>() / m as f64).ln();
            iwae - e
        })
        .collect();
    let mean = gaps.iter().sum::<f64>() / n as f64;
    let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let lower = mean - 1.645 * sd / (n as f64).sqrt();
    assert!(lower >= 0.0, "mean gap {mean}, one-sided 95% lower bound {lower}");
}

#[test]
fn exact_likelihood_is_per_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = tiny_model(Variant::RnnGauss, 24);
    let agent = model.agent().unwrap();
    let x = uniform_tensor(&mut rng, &[5, 4, K * D], 1.0);
    let full = flat(&agent.sequence_elbo(&x, None, &mut rng, 1).unwrap().elbo);
    let order = [2u32, 0, 3, 1];
    let perm = x.index_select(&Tensor::new(&order, &Device::Cpu).unwrap(), 1).unwrap();
    let permuted = flat(&agent.sequence_elbo(&perm, None, &mut rng, 1).unwrap().elbo);
    for (i, &o) in order.iter().enumerate() {
        assert!((permuted[i] - full[o as usize]).abs() < 1e-12);
    }
    let single = flat(&agent.sequence_elbo(&x.narrow(1, 3, 1).unwrap(), None, &mut rng, 1).unwrap().elbo);
    assert!((single[0] - full[3]).abs() < 1e-12);
}

#[test]
fn non_finite_states_report_their_timestep() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = tiny_model(Variant::VrnnSingle, 25);
    let mut v = flat(&uniform_tensor(&mut rng, &[5, 2, K * D], 1.0));
    v[2 * 2 * K * D + 1] = f64::NAN;
    let x = Tensor::from_vec(v, (5, 2, K * D), &Device::Cpu).unwrap();
    match model.agent().unwrap().sequence_elbo(&x, None, &mut rng, 1) {
        Err(ModelError::NonFinite { step, .. }) => assert_eq!(step, 2),
        other => panic!("expected a non-finite error, got {:?}", other.map(|t| flat(&t.elbo))),
    }
}

#[test]
fn hierarchical_elbo_requires_macro_intents() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = tiny_model(Variant::Hierarchical, 26);
    let x = uniform_tensor(&mut rng, &[3, 2, K * D], 1.0);
    assert!(matches!(model.agent().unwrap().sequence_elbo(&x, None, &mut rng, 1), Err(ModelError::MissingMacroIntents)));
}

fn tiny_vrae(latent: VraeLatent, zdim: usize) -> Model {
    let mut cfg = tiny_config(Variant::VraeMi);
    cfg.vrae_latent = latent;
    cfg.latent_dim = zdim;
    Model::build(&cfg, NormStats::identity(D), 31, DType::F64).unwrap()
}

#[test]
fn categorical_prior_entropy_is_ln_categories() {
    let m = tiny_vrae(VraeLatent::Categorical, 8);
    assert_eq!(m.vrae().unwrap().prior_entropy(), 8f64.ln());
    let g = tiny_vrae(VraeLatent::Gaussian, 3);
    assert!((g.vrae().unwrap().prior_entropy() - 1.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs() < 1e-12);
}

#[test]
fn mi_bound_equals_prior_entropy_for_point_mass_posteriors() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let model = tiny_vrae(VraeLatent::Categorical, 8);
    for net in ["enc", "disc"] {
        fill_param(&model, &format!("vrae.{net}.head.2.weight"), 0.0);
        set_param(&model, &format!("vrae.{net}.head.2.bias"), (0..8).map(|i| if i == 5 { 80.0 } else { 0.0 }).collect());
    }
    let x = uniform_tensor(&mut rng, &[5, 3, K * D], 1.0);
    let terms = model.vrae().unwrap().objective(&x, &mut rng).unwrap();
    for (mi, kl) in flat(&terms.mi_bound).into_iter().zip(flat(&terms.kl)) {
        assert!((mi - 8f64.ln()).abs() < 1e-12, "{mi}");
        // a point-mass posterior sits ln 8 away from the uniform prior
        assert!((kl - 8f64.ln()).abs() < 1e-12, "{kl}");
    }
}

#[test]
fn vrae_objective_is_finite_for_both_latents() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for latent in [VraeLatent::Categorical, VraeLatent::Gaussian] {
        let model = tiny_vrae(latent, 3);
        let x = uniform_tensor(&mut rng, &[4, 2, K * D], 1.0);
        let t = model.vrae().unwrap().objective(&x, &mut rng).unwrap();
        for v in [t.elbo, t.mi_bound, t.reconstruction, t.kl] {
            assert!(flat(&v).iter().all(|x| x.is_finite()));
        }
        // L2 is bounded above by H(z) for the categorical latent
        if latent == VraeLatent::Categorical {
            let h = model.vrae().unwrap().prior_entropy();
            let t = model.vrae().unwrap().objective(&x, &mut rng).unwrap();
            assert!(flat(&t.mi_bound).iter().all(|&mi| mi <= h + 1e-12));
        }
    }
}

#[test]
fn gumbel_softmax_keeps_the_argmax_for_every_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let c = rng.gen_range(2..9);
        let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let noise = gumbel_noise(&mut rng, &[c], DType::F64).unwrap();
        let lt = Tensor::new(logits.as_slice(), &Device::Cpu).unwrap();
        let want = flat(&(&lt + &noise).unwrap()).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        for tau in [0.05, 0.5, 1.0, 4.0, 50.0] {
            let y = flat(&gumbel_softmax(&lt, tau, &noise).unwrap());
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let got = y.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(got, want, "tau {tau}");
        }
    }
}

#[test]
fn reparameterized_sample_mean_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (mean, log_var) = (0.7, (2.5f64).ln());
    let n = 100_000;
    let p = GaussianParams::new(
        Tensor::from_vec(vec![mean; n], n, &Device::Cpu).unwrap(),
        Tensor::from_vec(vec![log_var; n], n, &Device::Cpu).unwrap(),
    )
    .unwrap();
    let z = flat(&reparam_sample(&p, &normal_noise(&mut rng, &[n], DType::F64).unwrap()).unwrap());
    let avg = z.iter().sum::<f64>() / n as f64;
    assert!((avg - mean).abs() < 4.0 * 2.5f64.sqrt() / (n as f64).sqrt());
}

fn shape(model: &Model, name: &str) -> Vec<usize> {
    model.params().get(name).unwrap_or_else(|| panic!("no parameter {name}")).dims().to_vec()
}

#[test]
fn default_configs_have_documented_widths() {
    let single = Model::build(&ModelConfig::new(Variant::VrnnSingle, Domain::Basketball), NormStats::identity(2), 0, DType::F32).unwrap();
    assert_eq!(shape(&single, "agent.rnn.l0.w_hh"), vec![1, 900, 2700]);
    assert_eq!(shape(&single, "agent.rnn.l1.w_hh"), vec![1, 900, 2700]);
    assert_eq!(shape(&single, "agent.prior.2.weight"), vec![1, 200, 160]);
    assert_eq!(single.agent().unwrap().latent_dim(), 80);

    let indep = Model::build(&ModelConfig::new(Variant::VrnnIndep, Domain::Basketball), NormStats::identity(2), 0, DType::F32).unwrap();
    assert_eq!(shape(&indep, "agent.rnn.l0.w_hh"), vec![5, 250, 750]);
    assert_eq!(shape(&indep, "agent.prior.2.weight"), vec![5, 200, 32]);
    assert_eq!(shape(&indep, "agent.dec.2.weight"), vec![5, 200, 4]);

    let hier = Model::build(&ModelConfig::new(Variant::Hierarchical, Domain::Basketball), NormStats::identity(2), 0, DType::F32).unwrap();
    assert_eq!(shape(&hier, "agent.rnn.l0.w_hh")[0], 5);
    // decoder input: latent 16 + recurrence + 5 agents x 90 cells
    let w = hier.config.rnn_width;
    assert_eq!(shape(&hier, "agent.dec.0.weight"), vec![5, 16 + w + 450, 200]);
    assert_eq!(shape(&hier, "macro.head.2.weight"), vec![1, 200, 450]);
    assert_eq!(shape(&hier, "macro.rnn.l0.w_hh"), vec![1, 200, 600]);

    let mixed = Model::build(&ModelConfig::new(Variant::VrnnMixed, Domain::Basketball), NormStats::identity(2), 0, DType::F32).unwrap();
    assert_eq!(shape(&mixed, "agent.rnn.l0.w_hh"), vec![1, 600, 1800]);
    assert_eq!(shape(&mixed, "agent.prior.0.weight"), vec![5, 600, 200]);
    // recurrence reads the joint state and all five latents
    assert_eq!(shape(&mixed, "agent.rnn.l0.w_ih"), vec![1, 10 + 5 * 16, 1800]);
}

#[test]
fn all_variants_build_deterministically() {
    for domain in [Domain::Basketball, Domain::Boids] {
        for v in Variant::ALL {
            let mut cfg = ModelConfig::new(v, domain);
            cfg.rnn_width = 8;
            cfg.mlp_width = 8;
            cfg.macro_width = 8;
            let norm = NormStats::identity(cfg.dim);
            let a = build_model(&cfg, norm.clone(), 5).unwrap();
            let b = build_model(&cfg, norm.clone(), 5).unwrap();
            let c = build_model(&cfg, norm, 6).unwrap();
            assert_eq!(a.params, b.params, "{v}");
            assert_ne!(a.params, c.params, "{v}");
            let names = |ck: &ModelCheckpoint| ck.params.iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect::<Vec<_>>();
            assert_eq!(names(&a), names(&c), "{v}: parameter layout depends on the seed");
            let prefix = match v {
                Variant::VraeMi => "vrae.",
                _ => "agent.",
            };
            assert!(a.params.iter().all(|(n, _)| n.starts_with(prefix) || n.starts_with("macro.")));
            assert_eq!(a.params.iter().any(|(n, _)| n.starts_with("macro.")), v == Variant::Hierarchical);
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let norm = NormStats::identity(2);
    let mut c = tiny_config(Variant::VrnnSingle);
    c.latent_dim = 0;
    assert!(matches!(build_model(&c, norm.clone(), 0), Err(ModelError::Config(_))));
    let mut c = tiny_config(Variant::VrnnIndep);
    c.macro_categories = 3;
    assert!(build_model(&c, norm.clone(), 0).is_err());
    let mut c = tiny_config(Variant::Hierarchical);
    c.macro_categories = 1;
    assert!(build_model(&c, norm.clone(), 0).is_err());
    let mut c = tiny_config(Variant::VraeMi);
    c.latent_dim = 1;
    assert!(build_model(&c, norm.clone(), 0).is_err());
    let mut c = tiny_config(Variant::VraeMi);
    c.gumbel_tau = 0.0;
    assert!(build_model(&c, norm.clone(), 0).is_err());
    let mut c = tiny_config(Variant::RnnGauss);
    c.rnn_width = 0;
    assert!(build_model(&c, norm, 0).is_err());
    // normalization statistics must match the state dimension
    assert!(build_model(&tiny_config(Variant::RnnGauss), NormStats::identity(3), 0).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Variant::Hierarchical);
    cfg.rnn_width = 6;
    let norm = NormStats { mean: vec![0.25, -3.0], scale: vec![1.5, 0.125] };
    let model = Model::build(&cfg, norm, 9, DType::F32).unwrap();
    let ck = model.checkpoint().unwrap();
    ck.save(dir.path()).unwrap();
    let back = ModelCheckpoint::load(dir.path()).unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!(back.norm, ck.norm);
    assert_eq!(back.params.len(), ck.params.len());
    for ((na, ta), (nb, tb)) in ck.params.iter().zip(&back.params) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape, tb.shape);
        let bits = |t: &mstraj_core::nn::TensorData| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb), "{na}");
    }
    let reloaded = Model::from_checkpoint(&back, DType::F32).unwrap();
    assert_eq!(reloaded.params().checksum("").unwrap(), model.params().checksum("").unwrap());

    let manifest = read_manifest(dir.path()).unwrap();
    let mut offset = 0u64;
    for e in &manifest.tensors {
        assert_eq!(e.offset, offset, "{}", e.name);
        offset += 4 * e.shape.iter().product::<usize>() as u64;
    }
    let blob = std::fs::read(dir.path().join(&manifest.blob)).unwrap();
    assert_eq!(blob.len() as u64, offset);
    assert_eq!(manifest.parameter_count(), model.params().element_count());
    let first = &ck.params[0].1.data[0];
    assert_eq!(&blob[..4], &first.to_le_bytes());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(&tiny_config(Variant::VrnnIndep), NormStats::identity(2), 3, DType::F32).unwrap();
    model.checkpoint().unwrap().save(dir.path()).unwrap();
    let blob_path = dir.path().join("params.bin");
    let mut blob = std::fs::read(&blob_path).unwrap();
    blob[10] ^= 0x40;
    std::fs::write(&blob_path, &blob).unwrap();
    assert!(matches!(ModelCheckpoint::load(dir.path()), Err(ModelError::Checkpoint(_))));

    let manifest_path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    std::fs::write(&manifest_path, text.replace("\"version\": 1", "\"version\": 99")).unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(ModelError::Checkpoint(_))));
    std::fs::write(&manifest_path, "{ not json").unwrap();
    assert!(read_manifest(dir.path()).is_err());

    // a checkpoint whose tensors do not fit the configuration
    let mut ck = model.checkpoint().unwrap();
    ck.params.pop();
    assert!(Model::from_checkpoint(&ck, DType::F32).is_err());
    let mut ck = model.checkpoint().unwrap();
    ck.params[0].1.shape[1] += 1;
    assert!(Model::from_checkpoint(&ck, DType::F32).is_err());
}
