use super::*;
use crate::data::corpus::open_domain;
use crate::data::encode::{encode_ids, SegmentScheme, Slot};
use crate::data::mlm::mlm_mask;
use crate::data::vocab::Vocab;
use crate::data::EncodedInput;
use crate::model::gradcheck::check_params;
use crate::model::{names, Forward, ModelConfig, Parameters, Role};
use crate::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 4,
        d_ff: 6,
        max_positions: 16,
        vocab_size: vocab,
        n_segments: 5,
        n_latent: 3,
        dropout: 0.0,
    }
}

fn params(role: Role, vocab: usize, seed: u64) -> Parameters {
    Parameters::init(tiny(vocab), role, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn enc(ctx: &[usize], resp: &[usize], slot: Slot) -> EncodedInput {
    encode_ids(&[], &[ctx.to_vec()], resp, &SegmentScheme::default(), 16, slot).unwrap()
}

#[test]
fn uniform_model_nll_is_ln_v() {
    let mut p = params(Role::Coarse, 64, 0);
    p.zero(names::LM_W).unwrap();
    p.zero(names::LM_B).unwrap();
    let batch = [enc(&[12, 13], &[14, 15], Slot::None), enc(&[20], &[30], Slot::None)];
    let mut f = Forward::new(&p, false);
    let l = loss_stage1(&mut f, &batch).unwrap();
    assert!((f.graph.value(l).item() - 64f64.ln()).abs() < 1e-12);
}

#[test]
fn stage1_loss_is_cross_entropy_on_shifted_targets() {
    let p = params(Role::Coarse, 30, 1);
    let batch = [enc(&[12, 13], &[14, 15], Slot::None)];
    let mut f = Forward::new(&p, false);
    let l = loss_stage1(&mut f, &batch).unwrap();
    let ll = crate::model::response_log_likelihood(&p, &batch).unwrap()[0];
    assert!((f.graph.value(l).item() + ll.0 / ll.1 as f64).abs() < 1e-12);
}

#[test]
fn stage1_rejects_empty_response() {
    let p = params(Role::Coarse, 30, 1);
    let mut f = Forward::new(&p, false);
    assert!(matches!(
        loss_stage1(&mut f, &[enc(&[12], &[], Slot::None)]),
        Err(Error::Data(_))
    ));
}

fn gen_batch() -> Vec<EncodedInput> {
    vec![
        enc(&[12, 13], &[14, 15, 16], Slot::Latent),
        enc(&[17], &[18, 19], Slot::Latent),
    ]
}

#[test]
fn generation_total_is_sum_of_parts() {
    let p = params(Role::Generation, 30, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut f = Forward::new(&p, false);
    let g = loss_generation(&mut f, &gen_batch(), 0.7, &mut rng).unwrap();
    let (t, n, b) = (
        f.graph.value(g.total).item(),
        f.graph.value(g.nll).item(),
        f.graph.value(g.bow).item(),
    );
    assert_eq!(t, n + b);
    assert!(matches!(
        loss_generation(&mut f, &gen_batch(), 0.0, &mut rng),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn bow_part_ignores_response_order() {
    let p = params(Role::Generation, 30, 3);
    // Large noise pins z, since the posterior itself reads the response.
    let noise = vec![9.0, -9.0, -9.0];
    let bow = |batch: &[EncodedInput]| {
        let mut f = Forward::new(&p, false);
        let g = loss_generation_with_noise(&mut f, batch, 0.5, &noise).unwrap();
        f.graph.value(g.bow).item()
    };
    let a = bow(&[enc(&[12], &[14, 15, 16], Slot::Latent)]);
    // Same multiset; h_z only sees the prefix, so the logits are unchanged.
    let b = bow(&[enc(&[12], &[16, 14, 15], Slot::Latent)]);
    let c = bow(&[enc(&[12], &[15, 16, 14], Slot::Latent)]);
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(a.to_bits(), c.to_bits());
}

#[test]
fn only_the_sampled_latent_row_gets_gradient() {
    let p = params(Role::Generation, 30, 4);
    // Noise pushes sample 0 to z = 2 and sample 1 to z = 0.
    let noise = vec![-9.0, -9.0, 9.0, 9.0, -9.0, -9.0];
    let mut f = Forward::new(&p, true);
    let g = loss_generation_with_noise(&mut f, &gen_batch(), 0.5, &noise).unwrap();
    assert_eq!(g.z, vec![2, 0]);
    f.graph.backward(g.total).unwrap();
    let (_, v) = f
        .bound_weights()
        .into_iter()
        .find(|(n, _)| n == names::LATENT)
        .unwrap();
    let grad = f.graph.grad(v).unwrap();
    let row_norm = |r: usize| grad.row(r).iter().map(|x| x * x).sum::<f64>();
    assert!(row_norm(0) > 0.0 && row_norm(2) > 0.0);
    assert_eq!(row_norm(1), 0.0);
}

#[test]
fn zero_classifier_gives_half_and_two_ln_two() {
    let mut p = params(Role::Evaluation, 30, 5);
    p.zero(names::COHERENCE_W).unwrap();
    p.zero(names::COHERENCE_B).unwrap();
    let probs = crate::model::coherence_probs(&p, &[enc(&[12], &[13], Slot::Cls)]).unwrap();
    assert_eq!(probs, vec![0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pos: Vec<_> = [enc(&[12], &[13], Slot::Cls), enc(&[14], &[15, 16], Slot::Cls)]
        .iter()
        .map(|i| mlm_mask(i, 0.5, 30, &mut rng))
        .collect();
    let neg: Vec<_> = [enc(&[12], &[17], Slot::Cls), enc(&[14], &[18], Slot::Cls)]
        .iter()
        .map(|i| mlm_mask(i, 0.5, 30, &mut rng))
        .collect();
    let mut f = Forward::new(&p, false);
    let e = loss_evaluation(&mut f, &pos, &neg).unwrap();
    let (t, r, m) = (
        f.graph.value(e.total).item(),
        f.graph.value(e.rce).item(),
        f.graph.value(e.mlm).item(),
    );
    assert!((r - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert_eq!(t, r + m);
}

#[test]
fn mlm_requires_a_masked_position_and_uniform_head_gives_ln_v() {
    let mut p = params(Role::Evaluation, 40, 6);
    let inp = enc(&[12, 13], &[14], Slot::Cls);
    let none = mlm_mask(&inp, 0.0, 40, &mut ChaCha8Rng::seed_from_u64(0));
    let mut f = Forward::new(&p, false);
    assert!(forward_mlm(&mut f, &[none]).is_err());
    p.zero(names::LM_W).unwrap();
    p.zero(names::LM_B).unwrap();
    let m = mlm_mask(&inp, 0.9, 40, &mut ChaCha8Rng::seed_from_u64(1));
    let mut f = Forward::new(&p, false);
    let logits = forward_mlm(&mut f, &[m.clone()]).unwrap();
    let l = f.graph.cross_entropy(logits, &m.targets).unwrap();
    assert!((f.graph.value(l).item() - 40f64.ln()).abs() < 1e-12);
}

#[test]
fn composite_heads_match_finite_differences() {
    let p = params(Role::Generation, 20, 7);
    let batch = gen_batch();
    let (r, _) = check_params(&p, 1e-5, |f| {
        let packed = f.encode(&batch, crate::model::MaskKind::Bidirectional, None)?;
        let logits = f.posterior_logits(&packed)?;
        f.graph.cross_entropy(logits, &[1, 2])
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "posterior {}", r.max_rel_err);
    let fixed: Vec<_> = batch.iter().map(|b| b.clone().with_latent(1)).collect();
    let (r, _) = check_params(&p, 1e-5, |f| {
        let gen = f.encode(&fixed, crate::model::MaskKind::Hybrid, None)?;
        let rows = gen.response_rows(&fixed);
        let lm = f.lm_logits(&gen, &rows)?;
        let targets: Vec<usize> = fixed.iter().flat_map(|i| i.lm_targets()).collect();
        let nll = f.graph.cross_entropy(lm, &targets)?;
        let bow = f.bow_logits(&gen)?;
        let bow = f.graph.bag_of_words(bow, &[vec![14, 15, 16], vec![18, 19]])?;
        f.graph.add(nll, bow)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "generation {}", r.max_rel_err);
}

#[test]
fn temperature_decays_and_stays_positive() {
    let cfg = TrainConfig::default();
    assert_eq!(tau_at(&cfg, 0, 500), 1.0);
    let mut prev = f64::INFINITY;
    for step in 0..500 {
        let tau = tau_at(&cfg, step, 500);
        assert!(tau > 0.0 && tau <= prev);
        prev = tau;
    }
    assert!((prev - 0.1).abs() < 1e-12);
}

fn od_setup() -> (Vec<crate::data::DialogueSample>, Vocab, ModelConfig) {
    let samples = open_domain::gen_open_domain_corpus(1, 24);
    let texts = open_domain::all_texts();
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    let mut cfg = tiny(vocab.len());
    cfg.max_positions = 32;
    (samples, vocab, cfg)
}

fn small_train() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        stage1_epochs: 2,
        generation_epochs: 2,
        evaluation_epochs: 2,
        warmup_steps: 2,
        seed: 11,
        max_len: 32,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_loss_logs() {
    let (samples, vocab, cfg) = od_setup();
    let run = || {
        let mut buf = Vec::new();
        {
            let mut sink = jsonl_sink(&mut buf);
            run_curriculum(&samples, &vocab, &cfg, &small_train(), &mut sink).unwrap();
        }
        buf
    };
    let a = run();
    assert_eq!(a, run());
    let text = String::from_utf8(a).unwrap();
    for stage in ["stage1", "stage2-gen", "stage2-eval"] {
        assert!(text.contains(stage));
    }
}

#[test]
fn resume_reproduces_the_trajectory() {
    let (samples, vocab, cfg) = od_setup();
    for stage in [Stage::Coarse, Stage::Generation, Stage::Evaluation] {
        let data = StageData::new(stage, &samples, &vocab, SegmentScheme::default(), 32).unwrap();
        let p = Parameters::init(cfg.clone(), stage.role(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut straight = Trainer::new(stage, p.clone(), small_train(), data.len()).unwrap();
        let mut full = Vec::new();
        straight.run(&data, &mut |r| Ok(full.push(r.clone()))).unwrap();

        let mut first = Trainer::new(stage, p, small_train(), data.len()).unwrap();
        let mut resumed_log = Vec::new();
        for _ in 0..3 {
            resumed_log.push(first.step(&data).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        first.state().save(dir.path()).unwrap();
        let mut second = Trainer::resume(StageCheckpoint::load(dir.path()).unwrap());
        assert_eq!(second.state(), first.state());
        second.run(&data, &mut |r| Ok(resumed_log.push(r.clone()))).unwrap();
        assert_eq!(resumed_log, full, "{}", stage.tag());
        assert_eq!(second.params(), straight.params());
    }
}

#[test]
fn stage2_starts_from_stage1_weights() {
    let p = params(Role::Coarse, 30, 9);
    let cfg = TrainConfig::default();
    let g = stage2_init(&p, Stage::Generation, &cfg).unwrap();
    let e = stage2_init(&p, Stage::Evaluation, &cfg).unwrap();
    for (name, t) in p.iter() {
        assert_eq!(g.get(name).unwrap().as_ref(), t);
        assert_eq!(e.get(name).unwrap().as_ref(), t);
    }
    let cold = stage2_init(&p, Stage::Generation, &TrainConfig {
        init_from_stage1: false,
        ..cfg
    })
    .unwrap();
    assert_ne!(cold.get(names::TOKEN).unwrap(), p.get(names::TOKEN).unwrap());
}
