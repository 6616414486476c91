//! Acceptance suite: runs every criterion at its stated tolerance and
//! prints one PASS/FAIL line per criterion. Exits non-zero if any fails.
//!
//! `NEAT_ACCEPTANCE_ONLY=1,3,9` restricts the run to the listed criteria.

use std::time::{Duration, Instant};

use neat_core::eval::spearman;
use neat_core::lm::{
    cond_log_prob_norm, finite_difference, grad, perplexity, response_token_log_probs, sample_response,
    ModelConfig, ModelParams,
};
use neat_core::loss::{
    pairwise_hinge, penalty_loss, ranking_loss, select_extremes_by_reward, sft_loss, total_loss, LossWeights,
    PoolObjective, TermWeights,
};
use neat_core::reference::{run_seed, ReferenceConfig, SeedResult};
use neat_core::reward::{exact_expectation, exact_expected_reward, score, Origin, ScoredResponse};
use neat_core::synth::{ReferenceTask, TaskConfig};
use neat_core::tokens::{query_context, TokenId, TokenSeq, EOS};
use neat_core::trainer::{Mode, TrainConfig, TrainOutputs, Trainer};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn resp(body: &[TokenId]) -> TokenSeq {
    let mut t = body.to_vec();
    t.push(EOS);
    TokenSeq::new(t)
}

fn scored(body: &[TokenId], reward: f64) -> ScoredResponse {
    ScoredResponse {
        response: resp(body),
        reward,
        origin: Origin::Dataset,
    }
}

fn close(a: f64, f: f64) -> bool {
    let err = (a - f).abs();
    err < 1e-6 || err / a.abs().max(f.abs()) < 1e-4
}

/// Three (record, weights) fixtures; rewards only need to be ordered.
fn gradient_fixtures() -> Vec<(TokenSeq, Vec<ScoredResponse>, LossWeights)> {
    vec![
        (
            TokenSeq::new(vec![11, 12, 19]),
            vec![scored(&[3, 14], 1.0), scored(&[14, 15], 0.0), scored(&[14, 28], -2.0), scored(&[28, 29], -4.0)],
            LossWeights::default(),
        ),
        (
            TokenSeq::new(vec![13, 14, 20]),
            vec![
                scored(&[5], 1.0),
                scored(&[5, 6, 7], 0.5),
                scored(&[], 0.0),
                scored(&[16, 30], -1.5),
                scored(&[30, 31, 29], -5.0),
                scored(&[17], -0.5),
            ],
            LossWeights {
                alpha: 0.5,
                beta: 1.0,
                tau: 4.0,
            },
        ),
        (
            TokenSeq::new(vec![15, 16, 21]),
            vec![scored(&[8, 9], 2.0), scored(&[31], -2.0)],
            LossWeights {
                alpha: 2.0,
                beta: 0.3,
                tau: 3.3,
            },
        ),
    ]
}

/// Which hinge pairs are active and which worst-response tokens are
/// clipped; a central difference is only meaningful when both sides agree.
fn kink_signature(params: &ModelParams, query: &TokenSeq, responses: &[ScoredResponse], tau: f64) -> Vec<bool> {
    let lps: Vec<Vec<f64>> = responses
        .iter()
        .map(|r| response_token_log_probs(params, query, &r.response).unwrap())
        .collect();
    let norm: Vec<f64> = lps.iter().map(|l| l.iter().sum::<f64>() / l.len() as f64).collect();
    let mut sig = Vec::new();
    for i in 0..norm.len() {
        for j in 0..norm.len() {
            if responses[i].reward < responses[j].reward {
                sig.push(norm[i] > norm[j]);
            }
        }
    }
    let rewards: Vec<f64> = responses.iter().map(|r| r.reward).collect();
    let (_, worst) = select_extremes_by_reward(&rewards).unwrap();
    sig.extend(lps[worst].iter().map(|&lp| -lp >= tau));
    sig
}

struct GradStats {
    checked: usize,
    skipped: usize,
    worst_abs: f64,
    /// Over components larger than 1e-3.
    worst_rel: f64,
}

fn check_gradients(params: &ModelParams, coords: &[usize], stats: &mut GradStats) -> Result<(), String> {
    let h = 1e-4;
    for (query, responses, w) in gradient_fixtures() {
        let mut smooth = Vec::with_capacity(coords.len());
        let mut work = params.clone();
        for &i in coords {
            let x = params.as_slice()[i];
            work.as_mut_slice()[i] = x + h;
            let up = kink_signature(&work, &query, &responses, w.tau);
            work.as_mut_slice()[i] = x - h;
            let down = kink_signature(&work, &query, &responses, w.tau);
            work.as_mut_slice()[i] = x;
            smooth.push(up == down);
        }
        for (name, weights, has_kinks) in [
            ("sft", TermWeights::sft_only(), false),
            ("ranking", TermWeights::ranking_only(), true),
            ("penalty", TermWeights::penalty_only(w.tau), true),
            ("total", TermWeights::total(&w), true),
        ] {
            let obj = PoolObjective {
                query: query.clone(),
                responses: responses.clone(),
                weights,
            };
            let g = grad(params, &obj).map_err(|e| e.to_string())?;
            let fd = finite_difference(params, &obj, coords, h).map_err(|e| e.to_string())?;
            for ((&i, f), &ok) in coords.iter().zip(&fd).zip(&smooth) {
                if has_kinks && !ok {
                    stats.skipped += 1;
                    continue;
                }
                let a = g.as_slice()[i];
                stats.worst_abs = stats.worst_abs.max((a - f).abs());
                if a.abs().max(f.abs()) > 1e-3 {
                    stats.worst_rel = stats.worst_rel.max((a - f).abs() / a.abs().max(f.abs()));
                }
                if !close(a, *f) {
                    return Err(format!("{name} loss, coordinate {i}: analytic {a} vs numeric {f}"));
                }
                stats.checked += 1;
            }
        }
    }
    Ok(())
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut stats = GradStats {
        checked: 0,
        skipped: 0,
        worst_abs: 0.0,
        worst_rel: 0.0,
    };
    for seed in [11u64, 22, 33] {
        let params = ModelParams::random_dense(ModelConfig::default(), seed, 0.1);
        let layout = params.config().layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coords = Vec::new();
        for (_, range) in layout.named_tensors() {
            let all: Vec<usize> = range.collect();
            coords.extend(all.choose_multiple(&mut rng, 3.min(all.len())).cloned());
        }
        if let Err(e) = check_gradients(&params, &coords, &mut stats) {
            return verdict(false, format!("seed {seed}: {e}"));
        }
    }
    // Every coordinate of a reduced-width model.
    let small = ModelConfig {
        vocab: 32,
        d_model: 8,
        max_len: 12,
        n_blocks: 2,
        n_heads: 2,
    };
    let params = ModelParams::random_dense(small, 44, 0.1);
    let all: Vec<usize> = (0..params.len()).collect();
    if let Err(e) = check_gradients(&params, &all, &mut stats) {
        return verdict(false, format!("full check: {e}"));
    }
    let secs = start.elapsed();
    let skipped_frac = stats.skipped as f64 / (stats.checked + stats.skipped) as f64;
    verdict(
        secs < Duration::from_secs(120) && skipped_frac < 0.02,
        format!(
            "{} coordinate checks, max abs error {:.1e}, max rel error {:.1e} (components > 1e-3), {} skipped at hinge or clip kinks, {:.1}s",
            stats.checked,
            stats.worst_abs,
            stats.worst_rel,
            stats.skipped,
            secs.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let p = ModelParams::zeros(ModelConfig::default());
    let v = 32.0f64;
    let q = TokenSeq::new(vec![11, 12, 19]);
    let record = vec![scored(&[3, 14], 1.0), scored(&[14, 15], 0.0), scored(&[14, 28], -2.0), scored(&[28, 29], -4.0)];
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-9 {
            failures.push(format!("{name}: {got} != {want}"));
        }
    };
    let corpus = vec![(q.clone(), resp(&[3, 4])), (q.clone(), resp(&[5])), (q.clone(), resp(&[]))];
    check("perplexity", perplexity(&p, &corpus).unwrap(), v);
    for body in [&[][..], &[7][..], &[3, 4, 5][..]] {
        check("cond_log_prob_norm", cond_log_prob_norm(&p, &q, &resp(body)).unwrap(), -v.ln());
    }
    check("sft_loss", sft_loss(&p, &q, &record).unwrap(), 3.0 * v.ln());
    check("ranking fixture", pairwise_hinge(&[-1.0, -2.0], &[0.5, 1.0]), 1.0);
    check("ranking ordered", pairwise_hinge(&[-2.0, -1.0, -0.5], &[0.0, 1.0, 2.0]), 0.0);
    check("ranking equal rewards", pairwise_hinge(&[-0.1, -3.0], &[1.0, 1.0]), 0.0);
    check("ranking three pairs", pairwise_hinge(&[-0.5, -1.0, -2.0], &[0.0, 1.0, 2.0]), 3.0);
    check("uniform ranking_loss", ranking_loss(&p, &q, &record).unwrap(), 0.0);
    let (pen, clipped) = penalty_loss(&p, &q, &record, 8.0).unwrap();
    check("penalty below clip", pen, 3.0 * v.ln());
    let (pen1, clipped1) = penalty_loss(&p, &q, &record, 1.0).unwrap();
    check("penalty clipped at 1", pen1, 3.0);
    let w = LossWeights {
        alpha: 1.0,
        beta: 0.1,
        tau: 5.0,
    };
    check("composite total", total_loss(&p, &q, &record, &w).unwrap().total, 3.0 * v.ln() - 0.1 * 3.0 * v.ln());
    if clipped || !clipped1 {
        failures.push(format!("clip flags {clipped} / {clipped1}"));
    }
    let secs = start.elapsed();
    if secs > Duration::from_secs(10) {
        failures.push(format!("took {:.1}s", secs.as_secs_f64()));
    }
    verdict(failures.is_empty(), if failures.is_empty() { format!("all closed forms within 1e-9, {:.2}s", secs.as_secs_f64()) } else { failures.join("; ") })
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let task = ReferenceTask::generate(TaskConfig {
        corpus_size: 0,
        ..TaskConfig::default()
    })
    .unwrap();
    let q = task.train.records()[0].query.clone();
    let mut worst_mass = 0.0f64;
    for (seed, std) in [(1u64, 0.02), (2, 0.3), (3, 1.0), (4, 2.0)] {
        let p = ModelParams::init_with_std(ModelConfig::default(), seed, std);
        let e = exact_expectation(&p, &q, 3, |_| Ok(1.0)).unwrap();
        worst_mass = worst_mass.max((e.total_prob - 1.0).abs());
    }
    let p = ModelParams::init_with_std(ModelConfig::default(), 5, 0.6);
    let exact = exact_expected_reward(&p, &task.spec, &q, 3).unwrap();
    let ctx = TokenSeq::new(query_context(&q));
    let n = 100_000u64;
    let (mut sum, mut sq) = (0.0, 0.0);
    for seed in 0..n {
        let r = score(&task.spec, &q, &sample_response(&p, &ctx, 1.0, 3, seed).unwrap()).unwrap();
        sum += r;
        sq += r * r;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    let z = (mean - exact).abs() / se;
    let secs = start.elapsed();
    verdict(
        worst_mass < 1e-6 && z < 3.0 && secs < Duration::from_secs(60),
        format!(
            "max |mass - 1| {worst_mass:.1e}; exact {exact:.5} vs Monte Carlo {mean:.5} (z = {z:.2}); {:.1}s",
            secs.as_secs_f64()
        ),
    )
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let params: Vec<ModelParams> = (0..4)
        .map(|s| ModelParams::init_with_std(ModelConfig::default(), 100 + s, 0.5))
        .collect();
    let strategy = (
        0usize..4,
        prop::collection::vec(3u32..32, 3),
        (2usize..=6).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(3u32..32, 0..4), k)),
        any::<bool>(),
        any::<u64>(),
    );
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let ordered_cases = std::cell::Cell::new(0usize);
    let result = runner.run(&strategy, |(pi, query, bodies, consistent, seed)| {
        let p = &params[pi];
        let q = TokenSeq::new(query);
        let norm: Vec<f64> = bodies.iter().map(|b| cond_log_prob_norm(p, &q, &resp(b)).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Consistent cases reward the normalized log-prob rank, with random
        // ties; the others draw rewards independently.
        let rewards: Vec<f64> = if consistent {
            let mut idx: Vec<usize> = (0..norm.len()).collect();
            idx.sort_by(|&a, &b| norm[a].total_cmp(&norm[b]));
            let mut r = vec![0.0; norm.len()];
            let mut level = 0.0;
            for &i in &idx {
                if rng.gen_bool(0.6) {
                    level += 1.0;
                }
                r[i] = level;
            }
            r
        } else {
            (0..norm.len()).map(|_| rng.gen_range(-3..=2) as f64).collect()
        };
        let responses: Vec<ScoredResponse> =
            bodies.iter().zip(&rewards).map(|(b, &r)| scored(b, r)).collect();
        let loss = ranking_loss(p, &q, &responses).unwrap();
        let ordered = (0..norm.len())
            .all(|i| (0..norm.len()).all(|j| !(rewards[i] < rewards[j]) || norm[i] <= norm[j]));
        if ordered {
            ordered_cases.set(ordered_cases.get() + 1);
        }
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, ordered, "loss {} rewards {:?} norm {:?}", loss, rewards, norm);
        Ok(())
    });
    let secs = start.elapsed();
    match result {
        Ok(()) => verdict(
            secs < Duration::from_secs(30),
            format!("1000 cases ({} reward-consistent), {:.1}s", ordered_cases.get(), secs.as_secs_f64()),
        ),
        Err(e) => verdict(false, e.to_string()),
    }
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let task = ReferenceTask::generate(TaskConfig {
        corpus_size: 0,
        ..TaskConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        iterations: 50,
        batch_size: 4,
        dedup: false,
        curve_every: 0,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&task.spec, &task.prompts, cfg).unwrap();
    let mut state = trainer
        .init_state(ModelParams::init(ModelConfig::default(), 0), task.train.clone())
        .unwrap();
    let before = state.dataset.total_responses();
    let mut reported = 0;
    for _ in 0..50 {
        let batch = state.order.next_batch(4);
        reported += trainer.train_step(&mut state, &batch).unwrap().added;
    }
    let grown = state.dataset.total_responses() - before;
    let secs = start.elapsed();
    verdict(
        grown == 400 && reported == 400 && secs < Duration::from_secs(60),
        format!("{grown} responses added (expected 400), {:.1}s", secs.as_secs_f64()),
    )
}

struct Reference {
    results: Vec<SeedResult>,
    elapsed: Duration,
}

fn reference_runs() -> Result<Reference, String> {
    let start = Instant::now();
    let cfg = ReferenceConfig::default();
    let mut results = Vec::new();
    for seed in SEEDS {
        let r = run_seed(&cfg, seed).map_err(|e| format!("seed {seed}: {e}"))?;
        println!(
            "  seed {seed}: exact reward base {:+.4} neat {:+.4} rrhf_like {:+.4} sft_only {:+.4}; bad mass neat {:.5} rrhf_like {:.5} sft_only {:.5}; neat vs sft_only {:?}",
            r.base.exact_reward,
            r.neat.exact_reward,
            r.rrhf_like.exact_reward,
            r.sft_only.exact_reward,
            r.neat.bad_mass,
            r.rrhf_like.bad_mass,
            r.sft_only.bad_mass,
            r.neat_vs_sft
        );
        results.push(r);
    }
    Ok(Reference {
        results,
        elapsed: start.elapsed(),
    })
}

fn criterion_6(r: &Reference) -> Verdict {
    let rs = &r.results;
    let over_sft = rs.iter().filter(|s| s.neat.exact_reward > s.sft_only.exact_reward).count();
    let over_rrhf = rs.iter().filter(|s| s.neat.exact_reward >= s.rrhf_like.exact_reward).count();
    let displaced = rs.iter().filter(|s| s.neat.bad_mass <= 0.5 * s.sft_only.bad_mass).count();
    let fast = r.elapsed < Duration::from_secs(30 * 60);
    verdict(
        over_sft == rs.len() && over_rrhf >= 4 && displaced >= 4 && fast,
        format!(
            "neat > sft_only on {over_sft}/5 (need 5), neat >= rrhf_like on {over_rrhf}/5 (need 4), bad mass <= 0.5x sft_only on {displaced}/5 (need 4); {:.0}s",
            r.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7(r: &Reference) -> Verdict {
    let rhos: Vec<f64> = r
        .results
        .iter()
        .map(|s| {
            let steps: Vec<f64> = s.neat.curve.iter().map(|p| p.step as f64).collect();
            let rewards: Vec<f64> = s.neat.curve.iter().map(|p| p.mean_batch_reward).collect();
            spearman(&steps, &rewards).unwrap_or(f64::NAN)
        })
        .collect();
    let rising = r.results.iter().all(|s| {
        let exact: Vec<f64> = s.neat.curve.iter().filter_map(|p| p.exact_expected_reward).collect();
        exact.len() >= 2 && exact.last() > exact.first()
    });
    let shown: Vec<String> = rhos.iter().map(|x| format!("{x:.3}")).collect();
    verdict(
        rhos.iter().all(|&x| x > 0.5) && rising,
        format!("spearman per seed [{}] (need > 0.5 each); exact reward rises on every seed: {rising}", shown.join(", ")),
    )
}

fn criterion_8(r: &Reference) -> Verdict {
    let counts: Vec<String> = r
        .results
        .iter()
        .map(|s| format!("{}/{}/{}", s.neat_vs_sft.win, s.neat_vs_sft.lose, s.neat_vs_sft.tie))
        .collect();
    let pass = r.results.iter().all(|s| s.neat_vs_sft.win > s.neat_vs_sft.lose && s.neat_vs_sft.total() == 64);
    verdict(pass, format!("win/lose/tie per seed [{}]", counts.join(", ")))
}

fn criterion_9() -> Verdict {
    let task = ReferenceTask::generate(TaskConfig {
        corpus_size: 0,
        ..TaskConfig::default()
    })
    .unwrap();
    // Adversarial start: the bad tokens sit far below every other token, so
    // the worst responses are already nearly impossible.
    let mut params = ModelParams::init(ModelConfig::default(), 9);
    let b_out = params.config().layout().b_out;
    for &t in &task.spec.bad {
        params.as_mut_slice()[b_out.start + t as usize] = -40.0;
    }
    let cfg = TrainConfig {
        beta: 1.0,
        iterations: 1000,
        curve_every: 0,
        mode: Mode::Neat,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&task.spec, &task.prompts, cfg).unwrap();
    match trainer.train(params, task.train.clone()) {
        Ok(out) => {
            let finite = out.curve.iter().all(|p| p.total.is_finite());
            let clipped_steps = out.curve.iter().filter(|p| p.clipped_frac > 0.0).count();
            let min_total = out.curve.iter().map(|p| p.total).fold(f64::INFINITY, f64::min);
            verdict(
                finite && clipped_steps > 0 && out.curve.len() == 1000 && out.params.check_finite().is_ok(),
                format!("1000 steps, all totals finite (min {min_total:.3}), clipping engaged on {clipped_steps} steps"),
            )
        }
        Err(e) => verdict(false, format!("training aborted: {e}")),
    }
}

fn criterion_10() -> Verdict {
    let task = ReferenceTask::generate(TaskConfig {
        corpus_size: 0,
        ..TaskConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        iterations: 200,
        checkpoint_every: 50,
        curve_every: 50,
        curve_queries: 4,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = |dir: &std::path::Path| {
        let trainer = Trainer::new(&task.spec, &task.prompts, cfg.clone()).unwrap();
        let out = trainer
            .train_with_outputs(
                ModelParams::init(ModelConfig::default(), 3),
                task.train.clone(),
                &TrainOutputs {
                    log: Some(dir.join("log.csv")),
                    checkpoint_dir: Some(dir.join("ckpt")),
                },
            )
            .unwrap();
        out.params.save(&dir.join("final.ckpt")).unwrap();
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path());
    run(b.path());
    let mut files = vec!["log.csv".to_string(), "final.ckpt".to_string()];
    let mut names: Vec<String> = std::fs::read_dir(a.path().join("ckpt"))
        .unwrap()
        .map(|e| format!("ckpt/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    names.sort();
    files.extend(names);
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    verdict(
        differing.is_empty() && files.len() == 2 + 8,
        format!("{} files compared, differing: {differing:?}", files.len()),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("NEAT_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let names = [
        "gradient correctness",
        "closed-form suite",
        "exact-objective verification",
        "loss-ordering property",
        "dataset-expansion cardinality",
        "directional alignment result",
        "curve trend",
        "oracle-judged comparison",
        "stability under penalty",
        "determinism",
    ];
    let mut verdicts: Vec<(u32, Verdict)> = Vec::new();
    let mut report = |n: u32, v: Verdict| {
        println!(
            "criterion {n:>2} {} {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            names[n as usize - 1],
            v.detail
        );
        verdicts.push((n, v));
    };
    let simple: [(u32, fn() -> Verdict); 5] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5)];
    for (n, f) in simple {
        if wanted(n) {
            report(n, f());
        }
    }
    if wanted(6) || wanted(7) || wanted(8) {
        match reference_runs() {
            Ok(r) => {
                let shared: [(u32, fn(&Reference) -> Verdict); 3] =
                    [(6, criterion_6), (7, criterion_7), (8, criterion_8)];
                for (n, f) in shared {
                    if wanted(n) {
                        report(n, f(&r));
                    }
                }
            }
            Err(e) => {
                for n in 6..=8 {
                    if wanted(n) {
                        report(n, verdict(false, format!("reference runs failed: {e}")));
                    }
                }
            }
        }
    }
    if wanted(9) {
        report(9, criterion_9());
    }
    if wanted(10) {
        report(10, criterion_10());
    }
    let failed: Vec<u32> = verdicts.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        verdicts.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
