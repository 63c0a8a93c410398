//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cpcl_core::alignment::{mmd, rot_solve, total_mmd_loss, MmdConfig, RotConfig};
use cpcl_core::classifier::{focal_loss, total_loss, BranchMasks, FocalConfig};
use cpcl_core::comments::{
    build_vocab, clean_comments, encode_comment_batch, segment, textcnn_score, CharSegmenter, TextCnnParams,
};
use cpcl_core::evaluation::{compute_metrics, paired_t_test, run_ablation, MetricsReport};
use cpcl_core::gradcheck::{grad_check_all, GradCheckConfig, REGISTERED_OPS};
use cpcl_core::ingest::{CommentRecord, FeatureSequence, Modality};
use cpcl_core::sentiment::{HashingEmbedder, SkgStore};
use cpcl_core::training::{adamw_update, cosine_lr, log_to_jsonl, split_indices, train_seed, Dataset, TrainConfig};
use cpcl_core::{Matrix, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    ensure(cfg.instances >= 5 && cfg.perturbation == 1e-5, "harness settings")?;
    let reports = grad_check_all(&cfg).map_err(|e| e.to_string())?;
    ensure(reports.len() == REGISTERED_OPS.len(), "not every op ran")?;
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    for r in &reports {
        ensure(r.passed, format!("{} max rel err {:.3e}", r.op, r.max_rel_err))?;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(60), format!("took {t:?}"))?;
    Ok(format!("{} ops x {} instances, worst rel err {worst:.2e}, {t:.2?}", reports.len(), cfg.instances))
}

fn transport_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = RotConfig::balanced(0.1, 500, 1e-9);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let cost = Matrix::from_vec(10, 10, (0..100).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let plan = rot_solve(&cost, &cfg).map_err(|e| e.to_string())?;
        ensure(plan.iterations_run <= 500, "iteration cap exceeded")?;
        let tail = &plan.residuals[plan.residuals.len().saturating_sub(10)..];
        ensure(tail.windows(2).all(|w| w[1] <= w[0]), "violation not monotone over final iterations")?;
        worst = worst.max(plan.marginal_violation());
    }
    ensure(worst < 1e-6, format!("marginal violation {worst:.2e}"))?;

    // 2x2 with uniform marginals: the exact LP optimum is one of the two
    // half-weighted permutations, whichever has the lower total cost.
    let lp = RotConfig::balanced(0.01, 5000, 1e-12);
    let mut worst_off: f64 = 0.0;
    let mut cases = 0;
    while cases < 100 {
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let diag = c[0] + c[3];
        let anti = c[1] + c[2];
        if (diag - anti).abs() < 0.2 {
            continue;
        }
        cases += 1;
        let plan = rot_solve(&Matrix::from_vec(2, 2, c).unwrap(), &lp).map_err(|e| e.to_string())?;
        let off = if diag < anti {
            plan.matrix.get(0, 1) + plan.matrix.get(1, 0)
        } else {
            plan.matrix.get(0, 0) + plan.matrix.get(1, 1)
        };
        worst_off = worst_off.max(off);
    }
    ensure(worst_off < 1e-3, format!("off-support mass {worst_off:.2e}"))?;
    Ok(format!("10x10 violation {worst:.1e}; 2x2 off-support {worst_off:.1e}"))
}

fn mmd_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = MmdConfig::default();
    for _ in 0..100 {
        let x = random_matrix(rng.random_range(1..8), 5, &mut rng);
        let y = random_matrix(rng.random_range(1..8), 5, &mut rng);
        let self_mmd = mmd(&x, &x, &cfg).map_err(|e| e.to_string())?;
        ensure(self_mmd <= 1e-12, format!("MMD(X,X) = {self_mmd:e}"))?;
        let xy = mmd(&x, &y, &cfg).map_err(|e| e.to_string())?;
        ensure(xy == mmd(&y, &x, &cfg).map_err(|e| e.to_string())?, "asymmetric")?;
    }
    let x = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
    let y = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    let hand = mmd(&x, &y, &MmdConfig::fixed(vec![1.0])).map_err(|e| e.to_string())?;
    let expect = 2.0 - 2.0 * (-0.5f64).exp();
    ensure((hand - expect).abs() <= 1e-9, format!("scalar value {hand}"))?;
    for _ in 0..50 {
        let seq = |m, rng: &mut ChaCha8Rng| FeatureSequence::new(m, random_matrix(rng.random_range(2..6), 4, rng)).unwrap();
        let (a, v, f, t) = (seq(Modality::Audio, &mut rng), seq(Modality::Video, &mut rng), seq(Modality::Face, &mut rng), seq(Modality::Text, &mut rng));
        let total = total_mmd_loss(&a, &v, &f, &t, &cfg).map_err(|e| e.to_string())?;
        let parts: f64 = [&a, &v, &f].iter().map(|s| mmd(&s.tokens, &t.tokens, &cfg).unwrap()).sum();
        ensure((total - parts).abs() <= 1e-12, "additivity")?;
    }
    Ok(format!("scalar MMD {hand:.9}"))
}

fn loss_schedule_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ce = FocalConfig { gamma: 0.0, alpha: [1.0, 1.0] };
    for _ in 0..1000 {
        let p1: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        let probs = [1.0 - p1, p1];
        let y = rng.random_range(0..2u8);
        let f = focal_loss(&probs, y, &ce).map_err(|e| e.to_string())?;
        ensure((f + probs[y as usize].ln()).abs() <= 1e-12, "focal(gamma=0) != cross-entropy")?;
    }
    let cfg = TrainConfig::default();
    ensure(cosine_lr(0, &cfg) == cfg.eta_max, "cosine_lr(0)")?;
    ensure(cosine_lr(75, &cfg) == 1e-6, "cosine_lr(75)")?;
    let mid = cfg.eta_min + 0.75 * (cfg.eta_max - cfg.eta_min);
    ensure((cosine_lr(25, &cfg) - mid).abs() <= 1e-15, "cosine_lr(25)")?;

    let (mut th, mut m, mut v) = ([1.0], [0.0], [0.0]);
    adamw_update(&mut th, &[1.0], &mut m, &mut v, 1, 1e-3, &cfg);
    let first = th[0];
    ensure((first - 0.998999).abs() <= 1e-9, format!("first AdamW step {first}"))?;

    // Scalar AdamW written out directly, two steps with the same gradient.
    let (lr, g, wd) = (1e-3, 0.7, cfg.weight_decay);
    let (mut t_ref, mut m_ref, mut v_ref) = (0.4f64, 0.0f64, 0.0f64);
    for k in 1..=2 {
        m_ref = 0.9 * m_ref + 0.1 * g;
        v_ref = 0.999 * v_ref + 0.001 * g * g;
        let mh = m_ref / (1.0 - 0.9f64.powi(k));
        let vh = v_ref / (1.0 - 0.999f64.powi(k));
        t_ref = t_ref - lr * mh / (vh.sqrt() + 1e-8) - lr * wd * t_ref;
    }
    let (mut th, mut m, mut v) = ([0.4], [0.0], [0.0]);
    for k in 1..=2 {
        adamw_update(&mut th, &[g], &mut m, &mut v, k, lr, &cfg);
    }
    ensure((th[0] - t_ref).abs() <= 1e-12, "two-step trajectory")?;
    ensure(total_loss(0.5, 0.2, 0.3) == 0.56, "total_loss(0.5, 0.2, 0.3)")?;
    Ok(format!("cosine_lr(25) = {:.6e}, first AdamW step {first:.9}", cosine_lr(25, &cfg)))
}

fn oracle_metrics(preds: &[u8], labels: &[u8]) -> [f64; 4] {
    let mut table = [[0usize; 2]; 2];
    for (&p, &y) in preds.iter().zip(labels) {
        table[p as usize][y as usize] += 1;
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class = |c: usize| {
        let tp = table[c][c];
        let predicted = table[c][0] + table[c][1];
        let actual = table[0][c] + table[1][c];
        let (p, r) = (div(tp, predicted), div(tp, actual));
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f1)
    };
    let (p1, r1, f1) = per_class(1);
    let (_, _, f0) = per_class(0);
    let acc = div(table[0][0] + table[1][1], preds.len());
    [acc, (f0 + f1) / 2.0, r1, p1]
}

fn metrics_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let bias = rng.random_range(0.0..1.0);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(bias))).collect();
        let preds: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let m = compute_metrics(&preds, &labels).map_err(|e| e.to_string())?;
        let got = [m.accuracy, m.macro_f1, m.recall, m.precision];
        ensure(got == oracle_metrics(&preds, &labels), format!("metrics mismatch {got:?}"))?;
        ensure(m == MetricsReport::from_counts(m.tp, m.fp, m.tn, m.fn_), "counts inconsistent")?;
        ensure(m.total() == n, "count total")?;
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..30);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let shift = rng.random_range(-0.3..0.3);
        let b: Vec<f64> = a.iter().map(|x| x + shift + rng.random_range(-0.2..0.2)).collect();
        let r = paired_t_test(&a, &b).map_err(|e| e.to_string())?;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap();
        let p_ref = 2.0 * dist.cdf(-r.t.abs());
        worst = worst.max((r.p - p_ref).abs());
    }
    ensure(worst <= 1e-6, format!("t-test p error {worst:e}"))?;
    Ok(format!("1000 confusion cases exact; t-test max |dp| {worst:.1e}"))
}

fn synthetic_data(cfg: &RunConfig) -> (Vec<cpcl_core::VideoSample>, SkgStore, HashingEmbedder) {
    let (samples, triples) = cfg.load_data().unwrap();
    let emb = HashingEmbedder { dim: cfg.model.sentiment_dim };
    let store = SkgStore::from_triples(triples, &emb);
    (samples, store, emb)
}

fn end_to_end() -> Outcome {
    let cfg = RunConfig::synthetic_preset();
    let synth = cfg.synthetic.clone().unwrap();
    ensure(synth.n_samples == 200 && cfg.train.seeds.len() == 5 && cfg.train.epochs <= 150, "experiment settings")?;
    let start = Instant::now();
    let (samples, store, emb) = synthetic_data(&cfg);
    let pos = samples.iter().filter(|s| s.label == 1).count();
    ensure(pos * 10 == samples.len() * 4, "label balance is not 60/40")?;
    let data = Dataset { samples: &samples, store: &store, embedder: &emb };
    let table = run_ablation(&data, &cfg.model, &cfg.train).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let full = table.rows[0].mean.accuracy;
    let ordered = table.ordered_seed_count();
    let both_largest = (0..cfg.train.seeds.len())
        .filter(|&s| {
            let acc = |r: usize| table.rows[r].per_seed_accuracy[s];
            acc(3) <= acc(1) && acc(3) <= acc(2)
        })
        .count();
    print!("{}", table.to_text());
    ensure(full >= 0.95, format!("mean held-out accuracy {full:.4}"))?;
    ensure(t < Duration::from_secs(600), format!("took {t:?}"))?;
    ensure(ordered >= 4, format!("ablation order holds in {ordered}/5 seeds"))?;
    ensure(both_largest >= 4, format!("both-removed drop largest in {both_largest}/5 seeds"))?;
    Ok(format!("mean held-out accuracy {full:.4}, order holds in {ordered}/5 seeds, {t:.1?} for all four variants"))
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::synthetic_preset();
    cfg.train.epochs = 4;
    let (samples, store, emb) = synthetic_data(&cfg);
    let data = Dataset { samples: &samples, store: &store, embedder: &emb };
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let (tr, ev) = split_indices(&labels, 0.2, 3);
    let run = || {
        let r = train_seed(&data, &tr, &ev, &cfg.model, &cfg.train, BranchMasks::default(), 3).unwrap();
        (log_to_jsonl(&r.log).unwrap(), r.params.to_json().unwrap())
    };
    let a = run();
    let b = run();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
    ensure(a == b, "repeated runs differ")?;
    ensure(a == single, "single-threaded run differs")?;
    Ok(format!("{} log bytes and {} snapshot bytes identical across 3 runs", a.0.len(), a.1.len()))
}

fn fuzz_comment(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 16] = [
        "可怜", "加油", "孩子", "真棒", "😂", "👍🏻", "🇨🇳", "!!", "？", " ", "\t", "ＡＢＣ", "abc123", "…", "ﾊﾊ", "\u{200d}",
    ];
    (0..rng.random_range(0..6)).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect()
}

fn comment_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let corpus: Vec<CommentRecord> = (0..1000)
        .map(|_| CommentRecord { text: fuzz_comment(&mut rng), level: rng.random_range(1..3) })
        .collect();
    let once = clean_comments(&corpus);
    ensure(clean_comments(&once) == once, "cleaning not idempotent")?;
    let tokens: Vec<Vec<String>> = once.iter().filter_map(|c| segment(&c.text).ok()).collect();
    let vocab = build_vocab(&tokens, 1, 1000).map_err(|e| e.to_string())?;
    let mut params = TextCnnParams::zeros(vocab.len(), 8, &[2, 3, 4], 4);
    params.for_each_random(&mut rng);
    let len = 32;
    for chunk in corpus.chunks(7) {
        let cleaned = clean_comments(chunk);
        let idx = encode_comment_batch(&cleaned, &vocab, &CharSegmenter, len, 64);
        ensure(idx.len() == len, "encoded length")?;
        ensure(idx.iter().all(|&i| i < vocab.len()), "index out of vocabulary")?;
        let p = textcnn_score(&idx, &params).map_err(|e| e.to_string())?;
        ensure(p.iter().all(|v| (0.0..=1.0).contains(v)) && (p[0] + p[1] - 1.0).abs() <= 1e-12, "invalid distribution")?;
    }
    Ok(format!("{} of 1000 fuzz comments kept, idempotent", once.len()))
}

trait RandomInit {
    fn for_each_random(&mut self, rng: &mut ChaCha8Rng);
}

impl RandomInit for TextCnnParams {
    fn for_each_random(&mut self, rng: &mut ChaCha8Rng) {
        for r in 1..self.embedding.rows {
            self.embedding.row_mut(r).iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        for c in &mut self.convs {
            c.weight.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            c.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        self.head_w.data.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("transport suite", transport_suite),
        ("MMD suite", mmd_suite),
        ("loss/schedule suite", loss_schedule_suite),
        ("metrics suite", metrics_suite),
        ("end-to-end synthetic experiment", end_to_end),
        ("determinism", determinism),
        ("comment pipeline", comment_pipeline),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
