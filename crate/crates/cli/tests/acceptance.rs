//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! quantity, the threshold and the wall time against its budget.
//!
//! Runs as part of `cargo test`; `cargo test -p irisnet-cli --test acceptance`
//! runs it alone. Expect several minutes: the desk-scale experiment trains
//! three models.

#[path = "../../core/tests/common/conv_oracle.rs"]
mod conv_oracle;
#[path = "../../core/tests/common/grad_cases.rs"]
mod grad_cases;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use irisnet::data::{
    make_split, synth_corpus_with_geometry, AugmentPolicy, DatasetSplit, LabeledImage,
    RingGeometry, SynthParams,
};
use irisnet::saliency::{self, OcclusionConfig};
use irisnet::store::{self, FreezeMode};
use irisnet::training::{cross_entropy, final_loss, train, train_with_progress, TrainConfig};
use irisnet::{data, Graph, Mode, Model, ModelSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

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

struct Suite {
    passed: usize,
    failed: Vec<&'static str>,
}

impl Suite {
    /// Runs one criterion. `extra` is time spent elsewhere that counts
    /// against this criterion's budget (shared training runs).
    fn run(
        &mut self,
        name: &'static str,
        budget: Option<Duration>,
        extra: Duration,
        f: impl FnOnce() -> Verdict,
    ) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f));
        let elapsed = start.elapsed() + extra;
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let timing = match budget {
            Some(b) => format!("{:.1} s of {} s", elapsed.as_secs_f64(), b.as_secs()),
            None => format!("{:.1} s", elapsed.as_secs_f64()),
        };
        let ok = pass && in_time;
        let over = if in_time { "" } else { ", over budget" };
        println!(
            "{} {name}: {detail} [{timing}{over}]",
            if ok { "PASS" } else { "FAIL" }
        );
        if ok {
            self.passed += 1;
        } else {
            self.failed.push(name);
        }
    }
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn gradient_correctness() -> Verdict {
    let ops = grad_cases::all_ops();
    let mut worst_rel = 0f64;
    let mut worst_scaled = 0f64;
    let mut worst_op = String::new();
    for &op in &ops {
        let (rel, scaled) = grad_cases::worst_op_errors(op);
        if rel > worst_rel {
            worst_op = format!("{op:?}");
        }
        worst_rel = worst_rel.max(rel);
        worst_scaled = worst_scaled.max(scaled);
    }
    let op_cases = ops.len() * grad_cases::SEEDS as usize;
    let (model_rel, model_scaled, skipped) = grad_cases::micro_model_errors(0..4, 25);
    let pass = worst_rel < grad_cases::OP_TOL
        && worst_scaled < grad_cases::OP_TOL
        && model_rel < grad_cases::MODEL_TOL
        && model_scaled < grad_cases::MODEL_TOL
        && skipped <= 5;
    verdict(
        pass,
        format!(
            "{} ops × {} cases: max rel {worst_rel:.2e} ({worst_op}), f32 scale-rel {worst_scaled:.2e} (< 1e-4); \
             resnet_micro objective, 100 coordinates: max rel {model_rel:.2e}, f32 scale-rel {model_scaled:.2e} \
             (< 1e-3), {skipped} at kinks",
            ops.len(),
            op_cases / ops.len()
        ),
    )
}

fn conv_equivalence() -> Verdict {
    let (cases, worst) = conv_oracle::exhaustive_grid();
    verdict(
        cases == 512 && worst <= 1e-5,
        format!("{cases} cases (256 geometries × bias on/off), max |engine − oracle| {worst:.2e} (≤ 1e-5)"),
    )
}

fn penalty_objective() -> Verdict {
    // λ₁ = 0 against plain cross-entropy: loss and every gradient, bit for bit.
    let model = Model::build(ModelSpec::resnet_micro(5), 4).unwrap();
    let corpus = data::synth_corpus(5, 2, 32, 32, 4);
    let images: Vec<&Tensor> = corpus.iter().map(|i| &i.pixels).collect();
    let batch = Tensor::stack(&images).unwrap();
    let labels: Vec<usize> = corpus.iter().map(|i| i.class_id).collect();
    let run = |penalized: bool| {
        let mut g = Graph::<f32>::new();
        let vars = model.param_vars(&mut g, true);
        let rec = model.record(&mut g, &batch, Mode::Train, &vars).unwrap();
        let loss = if penalized {
            final_loss(&mut g, rec.logits, &labels, vars["head.weight"], 0.0).unwrap()
        } else {
            cross_entropy(&mut g, rec.logits, &labels).unwrap()
        };
        g.backward(loss).unwrap();
        let grads: Vec<Vec<u32>> = vars
            .values()
            .map(|&v| g.grad(v).unwrap().iter().map(|x| x.to_bits()).collect())
            .collect();
        (g.value(loss).data()[0].to_bits(), grads)
    };
    let bit_exact = run(true) == run(false);

    // λ₁ = 0.1 against λ₁ = 0 on the same seed and data.
    let split = make_split(&data::synth_corpus(5, 8, 32, 32, 6), 2, 0.2, 6).unwrap();
    let norm_after = |lambda1: f64| {
        let mut model = Model::build(ModelSpec::resnet_micro(5), 6).unwrap();
        let config = TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.001,
            lambda1,
            seed: 6,
            ..TrainConfig::default()
        };
        train_with_progress(&mut model, &split, &config, |_| {}).unwrap();
        model
            .head_weight()
            .data()
            .iter()
            .map(|&w| (w as f64).powi(2))
            .sum::<f64>()
    };
    let plain = norm_after(0.0);
    let penalized = norm_after(0.1);
    verdict(
        bit_exact && penalized < plain,
        format!(
            "λ₁=0 equals cross-entropy bitwise: {bit_exact}; trained ‖W_fc‖² {penalized:.4} (λ₁=0.1) vs {plain:.4} (λ₁=0)"
        ),
    )
}

struct DeskRun {
    seed: u64,
    model: Model,
    split: DatasetSplit,
    geometry: Vec<(String, RingGeometry)>,
    test_accuracy: f64,
}

fn desk_scale_run(seed: u64) -> DeskRun {
    let generated = synth_corpus_with_geometry(&SynthParams::new(20, 10, 32, seed));
    let images: Vec<LabeledImage> = generated.iter().map(|(img, _)| img.clone()).collect();
    let geometry = generated
        .iter()
        .map(|(img, g)| (img.source_path.clone(), *g))
        .collect();
    let split = make_split(&images, 4, 0.2, seed).unwrap();
    let config = TrainConfig {
        epochs: 60,
        batch_size: 8,
        learning_rate: 0.0002,
        augment: AugmentPolicy::parse("crop").unwrap(),
        seed,
        ..TrainConfig::default()
    };
    let (model, report) = train(
        Model::build(ModelSpec::resnet_micro(20), seed).unwrap(),
        &split,
        &config,
    )
    .unwrap();
    DeskRun {
        seed,
        model,
        split,
        geometry,
        test_accuracy: report.test_accuracy,
    }
}

fn desk_scale(runs: &mut Vec<DeskRun>) -> Verdict {
    for seed in SEEDS {
        runs.push(desk_scale_run(seed));
    }
    let mut acc: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let per_seed = runs
        .iter()
        .map(|r| {
            format!(
                "seed {} {:.4} on {}",
                r.seed,
                r.test_accuracy,
                r.split.test.len()
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    acc.sort_by(f64::total_cmp);
    let median = acc[1];
    verdict(
        median >= 0.95 && runs.iter().all(|r| r.split.test.len() == 80),
        format!("median test accuracy {median:.4} (≥ 0.95); {per_seed}"),
    )
}

fn transfer_beats_scratch(runs: &[DeskRun]) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut wins = 0;
    let mut lines = Vec::new();
    for run in runs {
        // Ten classes whose ring signatures the source task never saw; three
        // training images, one validation image and four test images each.
        let target: Vec<LabeledImage> = synth_corpus_with_geometry(
            &SynthParams::new(10, 8, 32, run.seed + 100).with_offset(20),
        )
        .into_iter()
        .map(|(img, _)| img)
        .collect();
        let split = make_split(&target, 4, 0.2, run.seed).unwrap();
        assert_eq!(split.train.len(), 30);
        let config = TrainConfig {
            epochs: 15,
            batch_size: 8,
            learning_rate: 0.0002,
            seed: run.seed,
            ..TrainConfig::default()
        };
        let path = dir.path().join(format!("source_{}.bin", run.seed));
        store::save(&run.model, &path).unwrap();
        let fine = store::transfer(&path, 10, FreezeMode::FullFinetune, run.seed).unwrap();
        let (_, fine_report) = train(fine, &split, &config).unwrap();
        let scratch = Model::build(ModelSpec::resnet_micro(10), run.seed).unwrap();
        let (_, scratch_report) = train(scratch, &split, &config).unwrap();
        if fine_report.test_accuracy >= scratch_report.test_accuracy {
            wins += 1;
        }
        lines.push(format!(
            "seed {} fine-tuned {:.3} vs scratch {:.3}",
            run.seed, fine_report.test_accuracy, scratch_report.test_accuracy
        ));
    }
    verdict(
        wins >= 2,
        format!(
            "fine-tuned ≥ scratch in {wins} of 3 (≥ 2); {}",
            lines.join(", ")
        ),
    )
}

fn saliency_sanity(run: &DeskRun) -> Verdict {
    let cfg = OcclusionConfig {
        window: 8,
        stride: 4,
        fill_value: 0.0,
    };
    let mut considered = 0;
    let mut ring_wins = 0;
    for img in &run.split.test {
        let pred = run
            .model
            .predict(&Tensor::stack(&[&img.pixels]).unwrap())
            .unwrap()[0];
        if pred != img.class_id {
            continue;
        }
        considered += 1;
        let geom = run
            .geometry
            .iter()
            .find(|(p, _)| *p == img.source_path)
            .unwrap()
            .1;
        let map = saliency::sweep(&run.model, &img.pixels, img.class_id, &cfg).unwrap();
        let (mut ring_sum, mut ring_n) = (0f64, 0usize);
        for r in 0..map.grid_h {
            for c in 0..map.grid_w {
                let (top, left) = map.window_origin(r, c);
                if geom.intersects_box(top, left, cfg.window, cfg.window) {
                    ring_sum += map.drop_at(r, c) as f64;
                    ring_n += 1;
                }
            }
        }
        let (gh, gw) = (map.grid_h - 1, map.grid_w - 1);
        let corner = [(0, 0), (0, gw), (gh, 0), (gh, gw)]
            .iter()
            .map(|&(r, c)| map.drop_at(r, c) as f64)
            .sum::<f64>()
            / 4.0;
        if ring_n > 0 && ring_sum / ring_n as f64 > corner {
            ring_wins += 1;
        }
    }
    let share = ring_wins as f64 / considered.max(1) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut grid_ok = 0;
    for _ in 0..200 {
        let dim = rng.random_range(8..=48);
        let n = rng.random_range(1..=dim.min(12));
        let s = rng.random_range(1..=12);
        let text = format!(
            "variant=grid\ninput_size={dim}\nstem=in:3,out:2,kernel:3,stride:4,padding:1\n\
             stage=blocks:1,kind:basic,in:2,mid:2,out:2,stride:1,projection:false\nhead_classes=2\n"
        );
        let model = Model::build(ModelSpec::from_config_str(&text).unwrap(), 0).unwrap();
        let img = Tensor::full(&[3, dim, dim], 0.5);
        let cfg = OcclusionConfig {
            window: n,
            stride: s,
            fill_value: 0.0,
        };
        let map = saliency::sweep(&model, &img, 0, &cfg).unwrap();
        let want = (dim - n) / s + 1;
        if map.grid_h == want && map.grid_w == want && map.flip.len() == want * want {
            grid_ok += 1;
        }
    }
    verdict(
        share >= 0.9 && considered > 0 && grid_ok == 200,
        format!(
            "annulus windows beat corners on {ring_wins} of {considered} correctly classified test images \
             ({:.1}%, ≥ 90%); grid formula held on {grid_ok} of 200 triples",
            100.0 * share
        ),
    )
}

fn serialization(run: &DeskRun) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    store::save(&run.model, &a).unwrap();
    let loaded = store::load(&a).unwrap();
    store::save(&loaded, &b).unwrap();
    let fixpoint = fs::read(&a).unwrap() == fs::read(&b).unwrap();

    let images: Vec<&Tensor> = run.split.test.iter().map(|i| &i.pixels).collect();
    let batch = Tensor::stack(&images).unwrap();
    let logits_equal = run
        .model
        .logits(&batch)
        .unwrap()
        .bit_eq(&loaded.logits(&batch).unwrap());

    // Every position and every nonzero xor mask on a small model.
    let tiny = Model::build(
        ModelSpec::from_config_str(
            "variant=tiny\ninput_size=8\nstem=in:3,out:2,kernel:3,stride:2,padding:1\n\
             stage=blocks:1,kind:basic,in:2,mid:2,out:2,stride:1,projection:false\nhead_classes=2\n",
        )
        .unwrap(),
        1,
    )
    .unwrap();
    let bytes = store::encode(&tiny);
    let mut copy = bytes.clone();
    let mut missed = 0usize;
    let mut tried = 0usize;
    for pos in 0..bytes.len() {
        for delta in 1..=255u8 {
            copy[pos] = bytes[pos] ^ delta;
            tried += 1;
            missed += usize::from(store::decode(&copy).is_ok());
        }
        copy[pos] = bytes[pos];
    }
    // Random single-byte corruptions of the trained model's file.
    let big = fs::read(&a).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut copy = big.clone();
    for _ in 0..2000 {
        let pos = rng.random_range(0..big.len());
        copy[pos] ^= rng.random_range(1..=255u8);
        tried += 1;
        missed += usize::from(store::decode(&copy).is_ok());
        copy[pos] = big[pos];
    }
    verdict(
        fixpoint && logits_equal && missed == 0,
        format!(
            "save→load→save identical: {fixpoint}; logits bit-equal: {logits_equal}; \
             {missed} of {tried} single-byte corruptions undetected"
        ),
    )
}

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_irisnet"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn cli_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    cli(&[
        "synth",
        "--classes",
        "5",
        "--per-class",
        "8",
        "--out-dir",
        &p("source"),
    ]);
    cli(&[
        "synth",
        "--classes",
        "4",
        "--per-class",
        "8",
        "--class-offset",
        "5",
        "--out-dir",
        &p("target"),
    ]);
    let train = [
        "--epochs",
        "3",
        "--batch-size",
        "6",
        "--augment",
        "flip,crop,brightness",
        "--seed",
        "7",
    ];
    for run in ["pre_a", "pre_b"] {
        let mut args = vec!["pretrain", "--model", "resnet_micro", "--data-root"];
        let (root, out) = (p("source"), p(run));
        args.extend([root.as_str(), "--out-dir", out.as_str()]);
        args.extend(train);
        cli(&args);
    }
    let weights = p("pre_a/weights.bin");
    for run in ["fine_a", "fine_b"] {
        let (root, out) = (p("target"), p(run));
        let mut args = vec![
            "finetune",
            "--weights-in",
            weights.as_str(),
            "--data-root",
            root.as_str(),
        ];
        args.extend(["--out-dir", out.as_str()]);
        args.extend(train);
        cli(&args);
    }
    let same = |a: &str, b: &str, file: &str| {
        fs::read(Path::new(&p(a)).join(file)).unwrap()
            == fs::read(Path::new(&p(b)).join(file)).unwrap()
    };
    let checks = [
        ("pretrain weights", same("pre_a", "pre_b", "weights.bin")),
        ("pretrain report", same("pre_a", "pre_b", "report.csv")),
        ("finetune weights", same("fine_a", "fine_b", "weights.bin")),
        ("finetune report", same("fine_a", "fine_b", "report.csv")),
    ];
    let differing: Vec<&str> = checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            "two runs per command: weight files and report CSVs bytewise identical".to_string()
        } else {
            format!("differs: {}", differing.join(", "))
        },
    )
}

fn main() {
    let mut suite = Suite {
        passed: 0,
        failed: Vec::new(),
    };
    println!("running acceptance criteria");
    suite.run(
        "gradient correctness",
        minutes(2),
        Duration::ZERO,
        gradient_correctness,
    );
    suite.run(
        "conv oracle equivalence",
        minutes(1),
        Duration::ZERO,
        conv_equivalence,
    );
    suite.run(
        "weight-penalty objective",
        minutes(5),
        Duration::ZERO,
        penalty_objective,
    );

    let mut runs = Vec::new();
    let desk_start = Instant::now();
    suite.run(
        "desk-scale few-shot accuracy",
        minutes(10),
        Duration::ZERO,
        || desk_scale(&mut runs),
    );
    let desk_time = desk_start.elapsed();
    if runs.len() == SEEDS.len() {
        // The desk-scale models double as the pretrained source models.
        suite.run("transfer beats scratch", minutes(10), desk_time, || {
            transfer_beats_scratch(&runs)
        });
        suite.run(
            "occlusion saliency sanity",
            minutes(5),
            Duration::ZERO,
            || saliency_sanity(&runs[0]),
        );
        suite.run("serialization", minutes(1), Duration::ZERO, || {
            serialization(&runs[0])
        });
    } else {
        for name in [
            "transfer beats scratch",
            "occlusion saliency sanity",
            "serialization",
        ] {
            println!("FAIL {name}: needs the desk-scale models");
            suite.failed.push(name);
        }
    }
    suite.run("command determinism", None, Duration::ZERO, cli_determinism);

    let total = suite.passed + suite.failed.len();
    println!("acceptance: {} of {total} criteria passed", suite.passed);
    if !suite.failed.is_empty() {
        println!("failed: {}", suite.failed.join(", "));
        std::process::exit(1);
    }
}
