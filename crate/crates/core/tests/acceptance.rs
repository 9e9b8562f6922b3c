//! Acceptance criteria, one line per criterion:
//!
//! ```text
//! cargo test --test acceptance
//! ```
//!
//! The training criteria (6 to 8) dominate the runtime: thirteen 30-epoch
//! runs on one core.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agmt::config::RunConfig;
use agmt::data::Dataset;
use agmt::eval::{chance_recall_at_1, recall_at_k};
use agmt::grouping::{fold_mode3, unfold_mode3, AttentionMaps};
use agmt::interpret::{bilinear_upsample, export_exemplars, select_top_exemplars, ExemplarStat};
use agmt::pipeline::{embed_dataset, evaluate, load_splits, mean_abs_group_cosine, train_run};
use agmt::selfcheck::{self, CheckResult};
use agmt::trainer::{Trainer, CHECKPOINT_FILE};
use agmt::Tensor;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Keys shared by every training run of criteria 6 to 8, on top of the
/// defaults (20/20 class split, 64 images per class, 30 epochs, margin loss,
/// P = 4, D_V = 32, N-grouping at D = 128).
const TRAINING: &[&str] = &["model.widths=8,8,8,16"];
const SEEDS: [u64; 3] = [0, 1, 2];
const TRAINING_BUDGET: Duration = Duration::from_secs(15 * 60);
/// Smallest admissible A-grouping Recall@1 gain over chance.
const MIN_GAIN_OVER_CHANCE: f64 = 0.20;
/// Mean test Recall@1 from the recorded oracle run, for the report line.
const RECORDED_A: f64 = 0.9531;
const RECORDED_N: f64 = 0.9164;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }

    fn from_checks(checks: &[CheckResult]) -> Self {
        match checks.iter().find(|c| !c.passed) {
            Some(f) => Outcome::new(false, format!("{} {} failed: {}", f.suite, f.name, f.detail)),
            None if checks.len() == 1 => Outcome::new(true, checks[0].detail.clone()),
            None => Outcome::new(true, format!("{} checks", checks.len())),
        }
    }

    fn within(mut self, elapsed: Duration, budget: Duration) -> Self {
        if elapsed > budget {
            self.passed = false;
            write!(self.detail, "; took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64())
                .expect("string write");
        }
        self
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn line(n: usize, title: &str, outcome: &Outcome, elapsed: Duration) {
    let status = if outcome.passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n} {status} [{title}] {} ({:.1}s)", outcome.detail, elapsed.as_secs_f64())
        .expect("stdout");
}

fn or_fail(r: agmt::Result<Outcome>) -> Outcome {
    r.unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")))
}

fn permutation() -> Outcome {
    or_fail(selfcheck::permutation_invariance(0, 100).map(|c| Outcome::from_checks(&[c])))
}

fn translation() -> Outcome {
    or_fail(selfcheck::translation_invariance(0, 50).map(|c| Outcome::from_checks(&[c])))
}

fn gradients() -> Outcome {
    or_fail((|| {
        let mut checks = selfcheck::op_gradients(0, 20)?;
        checks.extend(selfcheck::composed_gradients(0, 20)?);
        Ok(Outcome::from_checks(&checks))
    })())
}

fn loss_oracles() -> Outcome {
    Outcome::from_checks(&selfcheck::loss_oracles())
}

fn metric_oracles() -> Outcome {
    or_fail(selfcheck::metric_oracles(0, 200).map(|c| Outcome::from_checks(&c)))
}

/// Everything criteria 6 to 8 need from one training run.
struct Run {
    recall_at_1: f64,
    cos_init: f64,
    cos_final: f64,
    checkpoint: Vec<u8>,
    report: String,
}

fn train_one(kind: &str, seed: u64, extra: &[&str], train: &Dataset, test: &Dataset, dir: &Path) -> agmt::Result<Run> {
    let mut overrides: Vec<String> = TRAINING.iter().chain(extra).map(|s| s.to_string()).collect();
    overrides.push(format!("model.grouping={kind}"));
    overrides.push(format!("train.seed={seed}"));
    let cfg = RunConfig::parse("", &overrides)?;
    let init = Trainer::init(&cfg.model, cfg.loss.clone(), cfg.train.clone())?;
    let cos_init = mean_abs_group_cosine(&embed_dataset(&init.model, test, 1)?.groups);
    let trainer = train_run(&cfg, train, dir, false, |_| {})?;
    let e = embed_dataset(&trainer.model, test, 1)?;
    let report = evaluate(&trainer.model, test, &cfg, 1)?;
    let checkpoint = fs::read(dir.join(CHECKPOINT_FILE)).map_err(|e| agmt::Error::io(dir, e))?;
    Ok(Run {
        recall_at_1: recall_at_k(&e.set, 1)?,
        cos_init,
        cos_final: mean_abs_group_cosine(&e.groups),
        checkpoint,
        report: report.to_text() + &report.to_json_line(),
    })
}

struct Grouping {
    runs: Vec<(String, u64, Run)>,
    elapsed: Duration,
}

fn grouping_runs(train: &Dataset, test: &Dataset, root: &Path) -> agmt::Result<Grouping> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for kind in ["A", "N"] {
        for seed in SEEDS {
            let dir = root.join(format!("{kind}{seed}"));
            runs.push((kind.to_string(), seed, train_one(kind, seed, &[], train, test, &dir)?));
        }
    }
    Ok(Grouping {
        runs,
        elapsed: start.elapsed(),
    })
}

fn mean_recall(g: &Grouping, kind: &str) -> f64 {
    let r: Vec<f64> = g.runs.iter().filter(|(k, ..)| k == kind).map(|(.., r)| r.recall_at_1).collect();
    r.iter().sum::<f64>() / r.len() as f64
}

fn grouping_benefit(g: &Grouping, chance: f64) -> Outcome {
    let (a, n) = (mean_recall(g, "A"), mean_recall(g, "N"));
    let per_seed: Vec<String> = g
        .runs
        .iter()
        .map(|(k, s, r)| format!("{k}{s}={:.4}", r.recall_at_1))
        .collect();
    let passed = a - n > 0.0 && a - chance >= MIN_GAIN_OVER_CHANCE;
    Outcome::new(
        passed,
        format!(
            "mean R@1 A {a:.4} vs N {n:.4} (margin {:+.4}; recorded {RECORDED_A:.4} vs {RECORDED_N:.4}), chance {chance:.4}, gain {:+.4} [{}]",
            a - n,
            a - chance,
            per_seed.join(" ")
        ),
    )
    .within(g.elapsed, TRAINING_BUDGET)
}

fn diversity_effect(g: &Grouping, train: &Dataset, test: &Dataset, root: &Path) -> Outcome {
    let Some((_, seed, run)) = g.runs.iter().find(|(k, ..)| k == "A") else {
        return Outcome::new(false, "no A-grouping run");
    };
    let ablation = match train_one("A", *seed, &["loss.lambda_div=0"], train, test, &root.join("ablation")) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("ablation run failed: {e}")),
    };
    let passed = run.cos_final < run.cos_init && run.cos_final < ablation.cos_final;
    Outcome::new(
        passed,
        format!(
            "seed {seed}: mean |cos| init {:.6}, trained {:.6}, without diversity loss {:.6}",
            run.cos_init, run.cos_final, ablation.cos_final
        ),
    )
}

fn reproducibility(first: &Grouping, second: &Grouping) -> Outcome {
    let mut differing = Vec::new();
    for ((k, s, a), (_, _, b)) in first.runs.iter().zip(&second.runs) {
        if a.checkpoint != b.checkpoint {
            differing.push(format!("{k}{s} checkpoint"));
        }
        if a.report != b.report {
            differing.push(format!("{k}{s} report"));
        }
    }
    if differing.is_empty() {
        Outcome::new(true, format!("{} runs: checkpoints and reports bitwise identical", first.runs.len()))
    } else {
        Outcome::new(false, format!("differs: {}", differing.join(", ")))
    }
}

fn interpretability(root: &Path) -> agmt::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = Vec::new();

    for _ in 0..50 {
        let (h, w, c) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..6));
        let t = Tensor::new(&[h, w, c], (0..h * w * c).map(|_| rng.random_range(-3.0..3.0)).collect())?;
        let m = unfold_mode3(&t)?;
        if fold_mode3(&m, h, w)? != t || unfold_mode3(&fold_mode3(&m, h, w)?)? != m {
            failures.push("fold/unfold round trip");
        }
    }

    for v in [0.0, 1.0, 0.3, -2.5, 1.0 / 3.0, 1e-7] {
        for (h, w, oh, ow) in [(7, 7, 32, 32), (4, 6, 9, 13), (1, 1, 5, 3)] {
            let up = bilinear_upsample(&Tensor::full(&[h, w], v), oh, ow)?;
            if up.shape() != [oh, ow] || up.data().iter().any(|&x| x != v) {
                failures.push("bilinear constant map");
            }
        }
    }

    let (groups, h, w) = (3, 5, 5);
    let maps: Vec<AttentionMaps> = (0..40)
        .map(|i| {
            let mut scores: Vec<f64> = (0..groups * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
            if i % 7 == 0 {
                // Exact ties with an earlier image exercise the index tie-break.
                scores.iter_mut().for_each(|s| *s = 0.5);
            }
            Ok(AttentionMaps {
                scores: Tensor::new(&[groups, h * w], scores)?,
                height: h,
                width: w,
            })
        })
        .collect::<agmt::Result<_>>()?;
    for stat in [ExemplarStat::Max, ExemplarStat::Mean] {
        for g in 0..groups {
            let got = select_top_exemplars(&maps, g, 12, stat)?;
            if got.ranked.iter().map(|r| r.0).collect::<Vec<_>>() != sort_oracle(&maps, g, 12, stat) {
                failures.push("top-12 selection");
            }
        }
    }

    let images: Vec<Tensor> = (0..maps.len())
        .map(|_| Tensor::new(&[20, 20, 1], (0..400).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect::<agmt::Result<_>>()?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let labels: Vec<usize> = (0..maps.len()).map(|i| i % 4).collect();
    let exemplars = select_top_exemplars(&maps, 1, 12, ExemplarStat::Max)?;
    let dirs = [root.join("overlays_a"), root.join("overlays_b")];
    for d in &dirs {
        export_exemplars(d, "test", 1, &exemplars, &refs, &labels, &maps, ExemplarStat::Max)?;
    }
    let mut files: Vec<_> = fs::read_dir(&dirs[0])
        .map_err(|e| agmt::Error::io(&dirs[0], e))?
        .map(|e| e.expect("dir entry").file_name())
        .collect();
    files.sort();
    if files.len() != 13 {
        failures.push("overlay count");
    }
    for f in &files {
        let read = |d: &Path| fs::read(d.join(f)).map_err(|e| agmt::Error::io(d, e));
        if read(&dirs[0])? != read(&dirs[1])? {
            failures.push("overlay bytes");
        }
    }

    failures.dedup();
    Ok(if failures.is_empty() {
        Outcome::new(true, format!("round trips, constant upsampling, selection oracle, {} exported files identical", files.len()))
    } else {
        Outcome::new(false, failures.join(", "))
    })
}

/// Selection by repeated scans for the best remaining image.
fn sort_oracle(maps: &[AttentionMaps], group: usize, count: usize, stat: ExemplarStat) -> Vec<usize> {
    let hw = maps[0].height * maps[0].width;
    let value = |m: &AttentionMaps| {
        let row = &m.scores.data()[group * hw..(group + 1) * hw];
        match stat {
            ExemplarStat::Max => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ExemplarStat::Mean => row.iter().sum::<f64>() / hw as f64,
        }
    };
    let mut left: Vec<usize> = (0..maps.len()).collect();
    let mut picked = Vec::new();
    while picked.len() < count && !left.is_empty() {
        let mut best = 0;
        for (pos, &i) in left.iter().enumerate() {
            if value(&maps[i]) > value(&maps[left[best]]) {
                best = pos;
            }
        }
        picked.push(left.remove(best));
    }
    picked
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("temp dir");
    let mut passed = Vec::new();
    let mut record = |n: usize, title: &str, outcome: Outcome, elapsed: Duration| {
        line(n, title, &outcome, elapsed);
        passed.push(outcome.passed);
    };

    let (o, t) = timed(permutation);
    record(1, "permutation invariance", o.within(t, Duration::from_secs(5)), t);
    let (o, t) = timed(translation);
    record(2, "translation invariance", o.within(t, Duration::from_secs(30)), t);
    let (o, t) = timed(gradients);
    record(3, "gradient integrity", o.within(t, Duration::from_secs(120)), t);
    let (o, t) = timed(loss_oracles);
    record(4, "loss-formula oracles", o, t);
    let (o, t) = timed(metric_oracles);
    record(5, "metric oracles", o, t);

    let base = RunConfig::parse("", &TRAINING.iter().map(|s| s.to_string()).collect::<Vec<_>>()).expect("config");
    let (train, test) = load_splits(&base).expect("default synthetic data");
    let chance = chance_recall_at_1(&test.labels);
    match grouping_runs(&train, &test, &root.path().join("first")) {
        Ok(first) => {
            record(6, "grouping benefit", grouping_benefit(&first, chance), first.elapsed);
            let (o, t) = timed(|| diversity_effect(&first, &train, &test, root.path()));
            record(7, "diversity effect", o, t);
            let (second, t) = timed(|| grouping_runs(&train, &test, &root.path().join("second")));
            let o = match second {
                Ok(second) => reproducibility(&first, &second),
                Err(e) => Outcome::new(false, format!("second run failed: {e}")),
            };
            record(8, "reproducibility", o, t);
        }
        Err(e) => {
            for (n, title) in [(6, "grouping benefit"), (7, "diversity effect"), (8, "reproducibility")] {
                record(n, title, Outcome::new(false, format!("training failed: {e}")), Duration::ZERO);
            }
        }
    }

    let (o, t) = timed(|| or_fail(interpretability(root.path())));
    record(9, "interpretability pipeline", o, t);

    let failed = passed.iter().filter(|p| !**p).count();
    println!("{}/{} acceptance criteria passed", passed.len() - failed, passed.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
