use ape_core::corpus::{Sentence, TokenId, BOS, PAD};
use ape_core::models::{gm_loss, joint_qe_aom_loss};
use ape_core::nn::{grad_check, AdamConfig, Ctx, Group, NetConfig, Network, OptimizerState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 20;

fn net(seed: u64) -> Network {
    Network::new(
        NetConfig {
            max_len: 40,
            ..NetConfig::tiny(VOCAB)
        },
        seed,
    )
}

fn sentence(rng: &mut ChaCha8Rng, len: usize) -> Sentence {
    Sentence((0..len).map(|_| rng.gen_range(5..VOCAB as TokenId)).collect())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn single_token_shapes() {
    let n = net(1);
    let src = n.encode(&[Sentence(vec![])]).unwrap();
    assert_eq!(src.states.shape(), &[1, 1, 16]);
    let joint = n.memory_encode(&[Sentence(vec![])], &src).unwrap();
    assert_eq!(joint.states.shape(), &[1, 1, 16]);
    let logits = n.decode_step(&[vec![BOS]], &joint, &src, true).unwrap();
    assert_eq!(logits.shape(), &[1, 1, VOCAB]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shapes_hold_for_batches_and_lengths(
        lens in prop::collection::vec(0usize..32, 1..=8),
        seed in 0u64..1000,
    ) {
        let n = net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<Sentence> = lens.iter().map(|&l| sentence(&mut rng, l)).collect();
        let mt: Vec<Sentence> = lens.iter().rev().map(|&l| sentence(&mut rng, l)).collect();
        let b = lens.len();
        let s_len = lens.iter().max().unwrap() + 1;
        let enc = n.encode(&src).unwrap();
        prop_assert_eq!(enc.states.shape(), &[b, s_len, 16]);
        let joint = n.memory_encode(&mt, &enc).unwrap();
        prop_assert_eq!(joint.states.shape(), &[b, s_len, 16]);
        let prefixes: Vec<Vec<TokenId>> = mt.iter().map(|m| std::iter::once(BOS).chain(m.iter().copied()).collect()).collect();
        let logits = n.decode_step(&prefixes, &joint, &enc, true).unwrap();
        prop_assert_eq!(logits.shape(), &[b, s_len, VOCAB]);
        prop_assert!(logits.is_finite());
    }
}

#[test]
fn over_length_input_is_rejected() {
    let n = net(1);
    let long = Sentence(vec![5; 40]);
    assert!(n.encode(&[long]).is_err());
}

#[test]
fn permuting_the_batch_permutes_the_outputs() {
    let n = net(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src: Vec<Sentence> = [4, 7, 2, 7].iter().map(|&l| sentence(&mut rng, l)).collect();
    let perm = [2, 0, 3, 1];
    let shuffled: Vec<Sentence> = perm.iter().map(|&i| src[i].clone()).collect();
    let a = n.encode(&src).unwrap();
    let b = n.encode(&shuffled).unwrap();
    for (row, &i) in perm.iter().enumerate() {
        assert_eq!(b.row(row).states, a.row(i).states);
    }
}

#[test]
fn zero_parameters_except_final_gain_erase_token_identity() {
    let mut n = net(4);
    for p in n.params.iter_mut() {
        if p.name != "encoder.final_norm.gain" {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let a = n.encode(&[Sentence(vec![5, 6, 7])]).unwrap();
    let b = n.encode(&[Sentence(vec![9, 12, 17])]).unwrap();
    assert_eq!(a.states.data(), b.states.data());
    assert!(a.states.is_finite());
}

#[test]
fn memory_encoder_sees_later_tokens() {
    let n = net(5);
    let src = n.encode(&[Sentence(vec![5, 6, 7])]).unwrap();
    let a = n.memory_encode(&[Sentence(vec![5, 6, 7, 8, 9, 10])], &src).unwrap();
    let b = n.memory_encode(&[Sentence(vec![5, 6, 7, 8, 9, 15])], &src).unwrap();
    let d = 16;
    let first_a = &a.states.data()[d..2 * d];
    let first_b = &b.states.data()[d..2 * d];
    let diff: f64 = first_a.iter().zip(first_b).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6, "position 1 ignored position 6: {diff}");
}

#[test]
fn padded_source_positions_have_no_influence() {
    let mut n = net(6);
    let src = vec![Sentence(vec![5, 6]), Sentence(vec![7, 8, 9, 10, 11])];
    let mt = vec![Sentence(vec![12, 13, 14]), Sentence(vec![15])];
    let before_src = n.encode(&src).unwrap();
    let before = n.memory_encode(&mt, &before_src).unwrap();
    let emb = n.token_embedding();
    let d = n.d_model();
    n.params.param_mut(emb).value[PAD as usize * d..(PAD as usize + 1) * d]
        .iter_mut()
        .for_each(|v| *v += 3.7);
    let after_src = n.encode(&src).unwrap();
    let after = n.memory_encode(&mt, &after_src).unwrap();
    let valid_src = 3 * d;
    assert!(close(&before_src.row(0).states[..valid_src], &after_src.row(0).states[..valid_src], 1e-12));
    assert!(close(&before.row(0).states[..4 * d], &after.row(0).states[..4 * d], 1e-12));
    assert_eq!(before.row(1).states[..2 * d], after.row(1).states[..2 * d]);
}

#[test]
fn decoder_is_causal() {
    let n = net(7);
    let src = n.encode(&[Sentence(vec![5, 6, 7])]).unwrap();
    let joint = n.memory_encode(&[Sentence(vec![8, 9])], &src).unwrap();
    let a = n.decode_step(&[vec![BOS, 5, 6, 7, 8]], &joint, &src, true).unwrap();
    for i in 0..4 {
        let mut changed = vec![BOS, 5, 6, 7, 8];
        changed[i + 1] = 19;
        let b = n.decode_step(&[changed], &joint, &src, true).unwrap();
        for pos in 0..=i {
            assert_eq!(a.slice(&[0, pos]), b.slice(&[0, pos]), "position {pos} saw token {}", i + 1);
        }
        assert_ne!(a.slice(&[0, i + 1]), b.slice(&[0, i + 1]));
    }
}

#[test]
fn identical_rows_give_identical_logits() {
    let n = net(8);
    let s = Sentence(vec![5, 9, 11]);
    let m = Sentence(vec![6, 7]);
    let src = n.encode(&[s.clone(), s]).unwrap();
    let joint = n.memory_encode(&[m.clone(), m], &src).unwrap();
    let p = vec![BOS, 6, 7];
    let logits = n.decode_step(&[p.clone(), p], &joint, &src, true).unwrap();
    assert_eq!(logits.slice(&[0]), logits.slice(&[1]));
}

#[test]
fn attention_rows_are_distributions() {
    let n = net(9);
    let ids: Vec<TokenId> = vec![5, 6, 7, 8, PAD, PAD];
    let valid = vec![true, true, true, true, false, false];
    let (_, cache) = n.encoder_forward(&ids, &valid, &mut Ctx::eval()).unwrap();
    let src = n.encoder_forward(&ids, &valid, &mut Ctx::eval()).unwrap().0;
    let memory = ape_core::nn::MemoryRef {
        states: &src,
        valid: &valid,
    };
    let mem_ids: Vec<TokenId> = vec![BOS, 9, 10];
    let (_, mem_cache) = n
        .memory_forward(&mem_ids, &[true, true, true], memory, &mut Ctx::eval())
        .unwrap();
    let mut checked = 0;
    for map in cache.attention_maps().into_iter().chain(mem_cache.attention_maps()) {
        let (rows, cols) = map.dims();
        for row in map.probs().chunks_exact(cols) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row sums to {sum}");
            if cols == valid.len() {
                assert_eq!(&row[4..], &[0.0, 0.0]);
            }
            checked += 1;
        }
        assert_eq!(map.probs().len() % (rows * cols), 0);
    }
    assert!(checked > 0);
}

fn train_steps(seed: u64, steps: usize) -> Vec<f64> {
    let mut n = net(seed);
    let mut opt = OptimizerState::new(AdamConfig::default(), &n.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<(Sentence, Sentence, Sentence)> = (0..8)
        .map(|_| {
            let s = sentence(&mut rng, 5);
            let m = sentence(&mut rng, 4);
            let e = sentence(&mut rng, 5);
            (s, m, e)
        })
        .collect();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (s, m, e) = &data[step % data.len()];
        let mut grads = n.params.zero_grads();
        let mut ctx = Ctx::train(0.1, step as u64);
        let l = gm_loss(&n, Some(&mut grads), s, m, e, 1.0, &mut ctx).unwrap();
        opt.step(&mut n.params, &grads, |_| true).unwrap();
        losses.push(l);
    }
    losses
}

#[test]
fn training_is_bit_reproducible_for_a_hundred_steps() {
    let a = train_steps(10, 120);
    let b = train_steps(10, 120);
    assert_eq!(a, b);
    assert!(a.iter().all(|l| l.is_finite()));
    assert_ne!(train_steps(11, 5), a[..5]);
}

fn check_net() -> Network {
    Network::new(
        NetConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            ffn: 32,
            ..NetConfig::tiny(32)
        },
        12,
    )
}

#[test]
fn joint_and_generative_gradients_match_differences() {
    let s = Sentence(vec![5, 9, 11, 30]);
    let m = Sentence(vec![6, 7, 8, 12]);
    let e = Sentence(vec![6, 20, 8, 12, 13]);
    let mut n = check_net();
    let joint = grad_check(&mut n, 1e-4, |net, g| {
        let l = joint_qe_aom_loss(net, g, &s, &m, &e, 1.0, &mut Ctx::eval())?;
        Ok(l.total())
    })
    .unwrap();
    assert!(joint.passed, "{:?}", joint.worst());
    let gm = grad_check(&mut n, 1e-4, |net, g| gm_loss(net, g, &s, &m, &e, 1.0, &mut Ctx::eval())).unwrap();
    assert!(gm.passed, "{:?}", gm.worst());
}

#[test]
fn corrupted_backward_pass_is_caught_and_named() {
    let s = Sentence(vec![5, 9]);
    let m = Sentence(vec![6, 7]);
    let e = Sentence(vec![6, 8]);
    let mut n = check_net();
    let target = n.params.find("decoder.0.ffn.outer.weight").unwrap();
    let report = grad_check(&mut n, 1e-4, |net, g| {
        let loss = gm_loss(net, g.map(|g| {
            g.get_mut(target)[0] += 0.5;
            g
        }), &s, &m, &e, 1.0, &mut Ctx::eval())?;
        Ok(loss)
    })
    .unwrap();
    assert!(!report.passed);
    let name = &n.params.param(target).name;
    assert_eq!(report.failing(), vec![name.as_str()]);
}

#[test]
fn zero_tolerance_always_fails() {
    let s = Sentence(vec![5, 9]);
    let m = Sentence(vec![6, 7]);
    let e = Sentence(vec![6, 8]);
    let mut n = check_net();
    let report = grad_check(&mut n, 0.0, |net, g| gm_loss(net, g, &s, &m, &e, 1.0, &mut Ctx::eval())).unwrap();
    assert!(!report.passed);
}

#[test]
fn source_shortcut_matters_after_training() {
    let mut n = net(13);
    let mut opt = OptimizerState::new(
        AdamConfig {
            lr_base: 0.2,
            warmup: 20,
            ..AdamConfig::default()
        },
        &n.params,
    );
    let s = Sentence(vec![5, 9, 11]);
    let m = Sentence(vec![6, 7]);
    let e = Sentence(vec![11, 9, 5]);
    for _ in 0..30 {
        let mut grads = n.params.zero_grads();
        gm_loss(&n, Some(&mut grads), &s, &m, &e, 1.0, &mut Ctx::eval()).unwrap();
        opt.step(&mut n.params, &grads, |g| g == Group::Decoder || g == Group::Shared).unwrap();
    }
    let src = n.encode(&[s]).unwrap();
    let joint = n.memory_encode(&[m], &src).unwrap();
    let prefix = vec![vec![BOS, 11, 9]];
    let with = n.decode_step(&prefix, &joint, &src, true).unwrap();
    let without = n.decode_step(&prefix, &joint, &src, false).unwrap();
    let diff: f64 = with.data().iter().zip(without.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-3, "ablation left logits unchanged: {diff}");
}
