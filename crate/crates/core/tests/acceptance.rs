use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ape_core::corpus::{Sentence, TokenId, PLH};
use ape_core::editalign::{apply_edit_script, hter, plh_insert, qe_tags};
use ape_core::metrics::corpus_ter;
use ape_core::models::{aom_accuracy, gm_accuracy, gm_loss, joint_qe_aom_loss, k_max, qe_accuracy, Accuracy};
use ape_core::nn::{grad_check, Ctx, NetConfig, Network};
use ape_core::pipeline::{
    both_routes, evaluate, pretraining_pairs, routes_to_gm, select_route, summarize, sweep_tau, synthetic_splits, Config,
    Evaluation, Outputs, RunLog, Session, Splits,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Keeps timed criteria from sharing the core with each other.
static CORE: Mutex<()> = Mutex::new(());

fn exclusive() -> std::sync::MutexGuard<'static, ()> {
    CORE.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to the raw handle so the line survives the harness's output capture.
fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id} {name}: {verdict} ({detail})").unwrap();
    out.flush().unwrap();
}

/// Two-row Levenshtein distance, written independently of the crate.
fn lev(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Every string over `alphabet` symbols of exactly `len` tokens.
fn all_strings(len: usize, alphabet: TokenId) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..alphabet).map(move |a| {
                    let mut q = p.clone();
                    q.push(10 + a);
                    q
                })
            })
            .collect();
    }
    out
}

fn edit_algebra_holds(mt: &[TokenId], pe: &[TokenId]) -> bool {
    let q = qe_tags(mt, pe);
    if q.body.len() != mt.len() || hter(&q).edits as usize != lev(mt, pe) {
        return false;
    }
    let Ok(m_tilde) = plh_insert(mt, &q) else {
        return false;
    };
    if m_tilde.len() != pe.len() {
        return false;
    }
    let fill: Vec<TokenId> = m_tilde
        .iter()
        .zip(pe)
        .filter(|(t, _)| **t == PLH)
        .map(|(_, p)| *p)
        .collect();
    matches!(apply_edit_script(mt, &q, &fill), Ok(r) if r.ids() == pe)
}

#[test]
fn criterion_1_edit_algebra_oracle() {
    let _core = exclusive();
    let start = Instant::now();
    let by_len: Vec<Vec<Vec<TokenId>>> = (0..=8).map(|n| all_strings(n, 4)).collect();
    let mut checked = 0usize;
    let mut failures = 0usize;
    for a in 0..=8 {
        for b in 0..=8 {
            if a.max(b) > 5 && a + b > 8 {
                continue;
            }
            for mt in &by_len[a] {
                for pe in &by_len[b] {
                    checked += 1;
                    failures += usize::from(!edit_algebra_holds(mt, pe));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<TokenId> {
            let n = rng.gen_range(0..=40);
            (0..n).map(|_| rng.gen_range(10..16)).collect()
        };
        let mt = draw(&mut rng);
        let pe = draw(&mut rng);
        checked += 1;
        failures += usize::from(!edit_algebra_holds(&mt, &pe));
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(60);
    report(
        1,
        "edit-algebra oracle",
        pass,
        &format!("{checked} pairs, {failures} failures, {:.1}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_2_hter_ter_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let mt: Vec<TokenId> = (0..rng.gen_range(0..30)).map(|_| rng.gen_range(5..12)).collect();
        let pe: Vec<TokenId> = (0..rng.gen_range(1..30)).map(|_| rng.gen_range(5..12)).collect();
        let h = hter(&qe_tags(&mt, &pe)).value;
        let ter = corpus_ter(&[mt], &[pe]).unwrap();
        worst = worst.max((h * 100.0 - ter).abs());
    }
    let pass = worst < 1e-9;
    report(2, "HTER-TER identity", pass, &format!("max gap {worst:.2e} over 1000 pairs"));
    assert!(pass);
}

#[test]
fn criterion_3_gradient_verification() {
    let _core = exclusive();
    let start = Instant::now();
    let mut net = Network::new(
        NetConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            ffn: 32,
            ..NetConfig::tiny(32)
        },
        3,
    );
    let s = Sentence(vec![5, 17, 9, 31, 12]);
    let m = Sentence(vec![8, 6, 21, 14]);
    let e = Sentence(vec![8, 19, 21, 14, 7]);
    let joint = grad_check(&mut net, 1e-4, |net, g| {
        Ok(joint_qe_aom_loss(net, g, &s, &m, &e, 1.0, &mut Ctx::eval())?.total())
    })
    .unwrap();
    let gm = grad_check(&mut net, 1e-4, |net, g| gm_loss(net, g, &s, &m, &e, 1.0, &mut Ctx::eval())).unwrap();
    let elapsed = start.elapsed();
    let worst = |r: &ape_core::nn::GradCheckReport| r.worst().map_or(0.0, |w| w.max_rel_error);
    let pass = joint.passed && gm.passed && elapsed < Duration::from_secs(300);
    report(
        3,
        "gradient verification",
        pass,
        &format!(
            "joint {:.2e}, generative {:.2e}, {:.1}s",
            worst(&joint),
            worst(&gm),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_overfit() {
    let _core = exclusive();
    let start = Instant::now();
    let mut cfg = Config::default();
    cfg.apply_overrides(&[
        "vocab_size=24",
        "train_size=32",
        "min_tokens=4",
        "max_tokens=8",
        "d_model=32",
        "layers=1",
        "heads=4",
        "ffn=64",
        "model.max_len=24",
        "train.steps=5000",
        "train.batch_tokens=1000",
        "augment=false",
        "eval_every=0",
        "lr_base=0.5",
        "warmup=100",
    ])
    .unwrap();
    let data = synthetic_splits(&cfg).unwrap().train;
    let mut sess = Session::new(cfg.clone(), cfg.data.vocab_size).unwrap();
    let mut log = RunLog::in_memory();
    let rates = |net: &Network| {
        let (mut q, mut a, mut g) = (Accuracy::default(), Accuracy::default(), Accuracy::default());
        for t in &data {
            q.add(qe_accuracy(net, &t.src, &t.mt, &t.pe).unwrap());
            a.add(aom_accuracy(net, &t.src, &t.mt, &t.pe).unwrap());
            g.add(gm_accuracy(net, &t.src, &t.mt, &t.pe).unwrap());
        }
        (q.rate(), a.rate(), g.rate())
    };
    let mut steps = 0;
    let mut acc = (0.0, 0.0, 0.0);
    while steps < 5000 {
        steps += 250;
        sess.cfg.train.steps = steps;
        sess.train(&data, &[], &mut log, &Outputs::default()).unwrap();
        acc = rates(&sess.net);
        if acc.0 >= 0.99 && acc.1 >= 0.99 && acc.2 >= 0.99 {
            break;
        }
    }
    let elapsed = start.elapsed();
    let pass = acc.0 >= 0.99 && acc.1 >= 0.99 && acc.2 >= 0.99 && elapsed < Duration::from_secs(900);
    report(
        4,
        "overfit 32 triplets",
        pass,
        &format!(
            "qe {:.3}, aom {:.3}, gm {:.3} after {steps} steps, {:.0}s",
            acc.0,
            acc.1,
            acc.2,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// The desk-scale configuration shared by the end-to-end criteria.
fn experiment_config(augment: bool) -> Config {
    let mut cfg = Config::default();
    cfg.apply_overrides(&[
        "train_size=5000",
        "test_size=500",
        "dev_size=200",
        "vocab_size=24",
        "d_model=32",
        "layers=2",
        "heads=4",
        "ffn=64",
        "model.max_len=32",
        "pretrain.steps=0",
        "train.steps=20000",
        "train.batch_tokens=100",
        "eval_every=0",
        "lr_base=0.1",
        "warmup=400",
    ])
    .unwrap();
    cfg.train.augment = augment;
    cfg
}

fn train(cfg: &Config, splits: &Splits) -> Network {
    let mut sess = Session::new(cfg.clone(), cfg.data.vocab_size).unwrap();
    let mut log = RunLog::in_memory();
    sess.pretrain(&pretraining_pairs(&splits.train), &mut log).unwrap();
    sess.train(&splits.train, &splits.dev, &mut log, &Outputs::default()).unwrap();
    sess.net
}

struct Experiment {
    cfg: Config,
    splits: Splits,
    net: Network,
    elapsed: Duration,
    tau: f64,
    hm: Evaluation,
    gm: Evaluation,
    aom: Evaluation,
    default_tau: Evaluation,
}

fn run_experiment() -> Experiment {
    let start = Instant::now();
    let cfg = experiment_config(true);
    let splits = synthetic_splits(&cfg).unwrap();
    let net = train(&cfg, &splits);
    let k = k_max(&net);
    let s = cfg.infer.iterations;
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let tau = sweep_tau(&net, &splits.dev, &grid, s, k).unwrap().best_tau;
    let pairs = both_routes(&net, &splits.test, s).unwrap();
    let at = |tau: f64| summarize(&splits.test, &select_route(&pairs, tau), k).unwrap();
    let (hm, gm, aom) = (at(tau), at(0.0), at(1.0));
    let default_tau = evaluate(&net, &splits.test, cfg.infer.tau, s, k).unwrap();
    Experiment {
        elapsed: start.elapsed(),
        cfg,
        splits,
        net,
        tau,
        hm,
        gm,
        aom,
        default_tau,
    }
}

#[test]
fn criteria_5_to_9_synthetic_experiment() {
    let _core = exclusive();
    let x = run_experiment();
    let base = x.hm.baseline_ter;
    let mut all = true;

    let relative = (base - x.hm.report.ter) / base;
    let best_single = x.gm.report.ter.min(x.aom.report.ter);
    let pass = (20.0..=30.0).contains(&base)
        && x.splits.train.len() == 5000
        && x.splits.test.len() == 500
        && relative >= 0.30
        && x.hm.report.ter <= best_single + 0.5
        && x.elapsed < Duration::from_secs(7200);
    all &= pass;
    report(
        5,
        "end-to-end ordering",
        pass,
        &format!(
            "baseline {base:.2}, hierarchical {:.2} at tau {:.1} ({:.0}% below), generative only {:.2}, atomic only {:.2}, {:.0}s",
            x.hm.report.ter,
            x.tau,
            100.0 * relative,
            x.gm.report.ter,
            x.aom.report.ter,
            x.elapsed.as_secs_f64()
        ),
    );

    let plain_cfg = experiment_config(false);
    let plain = train(&plain_cfg, &x.splits);
    let k = k_max(&plain);
    let plain_aom = evaluate(&plain, &x.splits.test, 1.0, plain_cfg.infer.iterations, k).unwrap();
    let gain = plain_aom.report.ter - x.aom.report.ter;
    let pass = gain >= 1.0;
    all &= pass;
    report(
        6,
        "pseudo-data ablation",
        pass,
        &format!(
            "atomic only with pseudo data {:.2}, without {:.2}, gain {gain:.2}",
            x.aom.report.ter, plain_aom.report.ter
        ),
    );

    let converged = |e: &Evaluation| e.mean_iterations <= 5.0 && e.fixpoint_rate >= 0.95;
    let pass = converged(&x.aom) && converged(&x.hm) && converged(&x.default_tau);
    all &= pass;
    report(
        7,
        "refinement convergence",
        pass,
        &format!(
            "atomic only: mean {:.2} rounds, {:.1}% fixpoint; tau 0.3: mean {:.2}, {:.1}% of {} routed; tau {:.1}: {} routed",
            x.aom.mean_iterations,
            100.0 * x.aom.fixpoint_rate,
            x.default_tau.mean_iterations,
            100.0 * x.default_tau.fixpoint_rate,
            x.default_tau.routing.aom,
            x.tau,
            x.hm.routing.aom
        ),
    );

    let k = k_max(&x.net);
    let s = x.cfg.infer.iterations;
    let zero = evaluate(&x.net, &x.splits.test, 0.0, s, k).unwrap();
    let one = evaluate(&x.net, &x.splits.test, 1.0, s, k).unwrap();
    let expected_gm = x
        .default_tau
        .predicted_hter
        .iter()
        .filter(|&&h| routes_to_gm(h, 0.3))
        .count();
    let pass = zero.routing.gm_fraction == 1.0
        && one.routing.gm == 0
        && Config::default().infer.tau == 0.3
        && x.cfg.infer.tau == 0.3
        && x.default_tau.routing.gm == expected_gm;
    all &= pass;
    report(
        8,
        "routing extremes",
        pass,
        &format!(
            "tau 0 sends {:.0}% to the generative model, tau 1 sends {}, default tau 0.3 sends {} of {}",
            100.0 * zero.routing.gm_fraction,
            one.routing.gm,
            x.default_tau.routing.gm,
            x.splits.test.len()
        ),
    );

    let pass = !x.hm.pearson_degenerate && x.hm.report.pearson >= 0.5;
    all &= pass;
    report(9, "QE correlation", pass, &format!("pearson {:.3}", x.hm.report.pearson));

    assert!(all, "at least one end-to-end criterion failed");
}
