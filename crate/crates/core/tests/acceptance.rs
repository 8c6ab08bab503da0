//! Acceptance run. The oracle suites run at full size, then the whole
//! pipeline runs in a scratch directory: data, classifier, both agent
//! stages, an IDR-free retraining, segmentation, evaluation, the box-shift
//! study and manifest replays. One PASS/FAIL line per criterion; the exit
//! status is nonzero when any criterion fails.
//!
//! Set `FLIPLEARN_ACCEPTANCE_DIR` to keep the artifacts somewhere.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::oracles::{
    brute_force, halves, halves_edges, phantom_region, random_hist, random_mask, tabular_ddqn, td_gradcheck,
    transport_oracle,
};
use fliplearn::env::wasserstein_1d;
use fliplearn::harness::cli::Command;
use fliplearn::harness::config::Config;
use fliplearn::harness::curves::parse_curve_csv;
use fliplearn::harness::{execute, replay};
use fliplearn::metrics::{boundary_metrics, overlap_metrics};
use fliplearn::superpixel::{assign_traversal, boundary_recall, seeds_segment, SeedsParams};
use fliplearn_nn::gradcheck::{check_network, GradCheckReport};
use fliplearn_nn::{LayerSpec, NetworkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let single = |input: Vec<usize>, layer| NetworkSpec::single(input, vec![layer]);
    let specs = [
        ("conv", single(vec![2, 5, 6], LayerSpec::conv(3, 3, 2, 1))),
        ("conv-k2", single(vec![1, 4, 4], LayerSpec::conv(2, 2, 1, 0))),
        ("dense", single(vec![7], LayerSpec::dense(4))),
        ("relu", single(vec![10], LayerSpec::Relu)),
        ("max-pool", single(vec![2, 4, 5], LayerSpec::max_pool(2))),
        ("global-avg-pool", single(vec![3, 4, 5], LayerSpec::GlobalAvgPool)),
        ("softmax", single(vec![5], LayerSpec::Softmax)),
        (
            "composed",
            NetworkSpec {
                input: vec![2, 8, 8],
                trunk: vec![
                    LayerSpec::conv(3, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::max_pool(2),
                    LayerSpec::conv(4, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::max_pool(2),
                    LayerSpec::dense(6),
                    LayerSpec::Relu,
                ],
                heads: vec![vec![LayerSpec::dense(2)], vec![LayerSpec::dense(2), LayerSpec::Softmax]],
            },
        ),
    ];
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    for (seed, (name, spec)) in specs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 + 1);
        let (p, i) = check_network(spec, 2, &mut rng, 1e-6, 1e-4, 1e-9).map_err(err)?;
        reports.push((format!("{name} params"), p));
        reports.push((format!("{name} input"), i));
    }
    reports.push(("td loss".into(), td_gradcheck(8)));
    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| n.as_str()).collect();
    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let worst_abs = reports.iter().map(|(_, r)| r.max_abs_error).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    Ok((
        failed.is_empty() && secs < 60.0,
        format!("{checked} entries, worst rel err {worst:.2e}, worst abs err {worst_abs:.2e}, failing {failed:?}, {secs:.1}s"),
    ))
}

fn wasserstein() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=16);
        let (a, b) = (random_hist(&mut rng, n), random_hist(&mut rng, n));
        let w = wasserstein_1d(&a, &b).map_err(err)?;
        worst = worst.max((w - transport_oracle(&a, &b)).abs());
    }
    Ok((worst <= 1e-9, format!("1000 pairs, max |diff| {worst:.2e}")))
}

fn ddqn() -> Outcome {
    let (cur, q_star) = tabular_ddqn();
    let worst = (0..4).map(|k| (cur[k / 2][k % 2] - q_star[k / 2][k % 2]).abs()).fold(0.0, f64::max);
    Ok((worst < 1e-3, format!("max |Q - Q*| {worst:.2e}")))
}

fn superpixels() -> Outcome {
    let mut bad = Vec::new();
    for seed in 0..100 {
        let (region, bbox) = phantom_region(seed);
        for base in [SeedsParams::coarse(), SeedsParams::fine()] {
            let params = base.fit_to(region.width(), region.height());
            let a = assign_traversal(&seeds_segment(&region, &params).map_err(err)?, &bbox);
            let covered: usize = (1..=a.count()).map(|i| a.pixels_of_index(i).len()).sum();
            let b = assign_traversal(&seeds_segment(&region, &params).map_err(err)?, &bbox);
            if a.validate().is_err() || covered != region.width() * region.height() || a != b {
                bad.push(seed);
            }
        }
    }
    let map = seeds_segment(
        &halves(),
        &SeedsParams {
            superpixels: 4,
            ..SeedsParams::coarse()
        },
    )
    .map_err(err)?;
    let recall = boundary_recall(&map, &halves_edges(), 1.0);
    Ok((
        bad.is_empty() && recall == 1.0,
        format!("100 regions x 2 scales, failing seeds {bad:?}; two-halves recall {recall}"),
    ))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut mismatches, mut worst) = (0, 0.0f64);
    for _ in 0..500 {
        let (w, h) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let a = random_mask(&mut rng, w, h);
        let b = random_mask(&mut rng, w, h);
        if boundary_metrics(&a, &b).map_err(err)? != brute_force(&a, &b) {
            mismatches += 1;
        }
        let o = overlap_metrics(&a, &b).map_err(err)?;
        let d = o.dice / 100.0;
        worst = worst.max((o.jac / 100.0 - d / (2.0 - d)).abs());
    }
    Ok((
        mismatches == 0 && worst <= 1e-9,
        format!("500 pairs, {mismatches} boundary mismatches, jac-dice max diff {worst:.2e}"),
    ))
}

// ---------------------------------------------------------------------------
// Pipeline

fn read_kv(path: &Path) -> Result<BTreeMap<String, f64>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let value = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok());
        match f.len() {
            2 => out.insert(f[0].to_string(), value(1).ok_or(line)?),
            // label,metric,mean,std,n
            5 => out.insert(format!("{}/{}", f[0], f[1]), value(2).ok_or(line)?),
            _ => return Err(format!("{}: unexpected line {line:?}", path.display())),
        };
    }
    Ok(out)
}

fn get(map: &BTreeMap<String, f64>, key: &str) -> Result<f64, String> {
    map.get(key).copied().ok_or_else(|| format!("missing {key}"))
}

struct Pipeline {
    root: PathBuf,
    config: Config,
    seconds: BTreeMap<&'static str, f64>,
}

impl Pipeline {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&mut self, label: &'static str, command: Command, config: &Config) -> Result<(), String> {
        let t = Instant::now();
        execute(&command, config).map_err(|e| format!("{label}: {e}"))?;
        let secs = t.elapsed().as_secs_f64();
        eprintln!("  {label}: {secs:.1}s");
        self.seconds.insert(label, secs);
        Ok(())
    }

    fn train_and_score(&mut self, tag: &'static [&'static str; 4], config: &Config) -> Result<(), String> {
        let [stage1, stage2, seg, eval] = *tag;
        let (data, cls) = (self.dir("data"), self.dir("classifier").join("classifier.ckpt"));
        let s1 = self.dir(stage1).join("agents_stage1.ckpt");
        let s2 = self.dir(stage2).join("agents_stage2.ckpt");
        self.run(
            stage1,
            Command::TrainAgents {
                stage: 1,
                data: data.clone(),
                classifier: cls.clone(),
                stage1: None,
                out: self.dir(stage1),
            },
            config,
        )?;
        self.run(
            stage2,
            Command::TrainAgents {
                stage: 2,
                data: data.clone(),
                classifier: cls.clone(),
                stage1: Some(s1.clone()),
                out: self.dir(stage2),
            },
            config,
        )?;
        self.run(
            seg,
            Command::Segment {
                image: None,
                bbox: None,
                gt: None,
                manifest: Some(data.join("test.txt")),
                classifier: cls,
                stage1: s1,
                stage2: s2,
                out: self.dir(seg),
            },
            config,
        )?;
        self.run(
            eval,
            Command::Evaluate {
                manifest: data.join("test.txt"),
                pred: self.dir(seg),
                out: self.dir(eval),
            },
            config,
        )
    }

    fn build(root: PathBuf) -> Result<Pipeline, String> {
        let mut p = Pipeline {
            root,
            config: Config::default(),
            seconds: BTreeMap::new(),
        };
        let config = p.config.clone();
        p.run("gen-data", Command::GenData { out: p.dir("data") }, &config)?;
        p.run(
            "train-classifier",
            Command::TrainClassifier {
                data: p.dir("data"),
                out: p.dir("classifier"),
            },
            &config,
        )?;
        p.train_and_score(&["stage1", "stage2", "segment", "evaluate"], &config)?;
        p.run(
            "box-shift",
            Command::BoxShiftStudy {
                manifest: p.dir("data").join("test.txt"),
                classifier: p.dir("classifier").join("classifier.ckpt"),
                stage1: p.dir("stage1").join("agents_stage1.ckpt"),
                stage2: p.dir("stage2").join("agents_stage2.ckpt"),
                bands: "0-10,10-20,20-30".into(),
                out: p.dir("box-shift"),
            },
            &config,
        )?;
        let mut ablation = config.clone();
        ablation.idr = false;
        p.train_and_score(&["no-idr-stage1", "no-idr-stage2", "no-idr-segment", "no-idr-evaluate"], &ablation)?;
        Ok(p)
    }
}

fn classifier(p: &Pipeline) -> Outcome {
    let eval = read_kv(&p.dir("classifier").join("classifier_eval.csv"))?;
    let (acc, flip) = (get(&eval, "test_accuracy")?, get(&eval, "oracle_flip")?);
    let secs = p.seconds["train-classifier"];
    Ok((
        acc >= 0.95 && flip >= 0.90 && secs < 600.0,
        format!(
            "test accuracy {acc:.3}, val accuracy {:.3}, oracle flip {flip:.3}, intact positive {:.3}, {secs:.0}s",
            get(&eval, "val_accuracy")?,
            get(&eval, "intact_positive")?
        ),
    ))
}

fn test_count(p: &Pipeline) -> Result<usize, String> {
    let text = std::fs::read_to_string(p.dir("data").join("test.txt")).map_err(err)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).count())
}

fn end_to_end(p: &Pipeline) -> Outcome {
    let s = read_kv(&p.dir("evaluate").join("summary.csv"))?;
    let (fine, coarse) = (get(&s, "fine/dice")?, get(&s, "coarse/dice")?);
    let n = test_count(p)?;
    let train: f64 = ["train-classifier", "stage1", "stage2"].iter().map(|k| p.seconds[k]).sum();
    Ok((
        n >= 20 && fine >= 80.0 && fine >= coarse && train < 3600.0,
        format!("{n} test phantoms, fine DICE {fine:.2}, coarse DICE {coarse:.2}, training {:.1} min", train / 60.0),
    ))
}

fn termination(p: &Pipeline) -> Outcome {
    let beta = p.config.beta;
    let seg = p.dir("segment");
    let text = std::fs::read_to_string(seg.join("segment.csv")).map_err(err)?;
    let (mut episodes, mut flips, mut problems) = (0, 0, Vec::new());
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let id = f[0];
        for (term, curve) in [(f[1], format!("{id}_coarse_curve.csv")), (f[4], format!("{id}_curve.csv"))] {
            episodes += 1;
            let path = seg.join(&curve);
            let rows = parse_curve_csv(&std::fs::read_to_string(&path).map_err(err)?, &curve).map_err(err)?;
            if !rows.windows(2).all(|w| w[0].erased_px <= w[1].erased_px) {
                problems.push(format!("{curve}: erased area decreases"));
            }
            match term {
                "flip" => {
                    flips += 1;
                    if !rows.last().is_some_and(|r| r.score < beta) {
                        problems.push(format!("{curve}: flip ends at or above beta"));
                    }
                }
                "traversal-limit" => {}
                other => problems.push(format!("{curve}: termination {other:?}")),
            }
        }
    }
    Ok((
        episodes > 0 && problems.is_empty(),
        format!("{episodes} episodes, {flips} by flip, rest by traversal limit; problems {problems:?}"),
    ))
}

fn box_shift(p: &Pipeline) -> Outcome {
    let s = read_kv(&p.dir("box-shift").join("box_shift.csv"))?;
    let (b1, b2, b3) = (get(&s, "0-10/dice")?, get(&s, "10-20/dice")?, get(&s, "20-30/dice")?);
    let n = test_count(p)?;
    Ok((n >= 20 && b3 <= b1, format!("{n} phantoms, DICE by band {b1:.2} / {b2:.2} / {b3:.2}")))
}

fn idr_ablation(p: &Pipeline) -> Outcome {
    let on = read_kv(&p.dir("evaluate").join("summary.csv"))?;
    let off = read_kv(&p.dir("no-idr-evaluate").join("summary.csv"))?;
    let (o1, o0) = (get(&on, "fine/overseg")?, get(&off, "fine/overseg")?);
    Ok((
        o0 > o1,
        format!(
            "fine over-segmentation {o1:.4} with IDR, {o0:.4} without (DICE {:.2} vs {:.2})",
            get(&on, "fine/dice")?,
            get(&off, "fine/dice")?
        ),
    ))
}

fn replays(p: &Pipeline) -> Outcome {
    let metric_csvs = [
        p.dir("classifier").join("classifier_eval.csv"),
        p.dir("segment").join("segment.csv"),
        p.dir("evaluate").join("metrics_coarse.csv"),
        p.dir("evaluate").join("metrics_fine.csv"),
        p.dir("evaluate").join("summary.csv"),
        p.dir("box-shift").join("box_shift.csv"),
        p.dir("box-shift").join("box_shift_per_image.csv"),
    ];
    let before: Vec<Vec<u8>> = metric_csvs.iter().map(std::fs::read).collect::<Result<_, _>>().map_err(err)?;
    let manifests = [
        p.dir("data").join("gen-data.manifest.json"),
        p.dir("classifier").join("train-classifier.manifest.json"),
        p.dir("segment").join("segment.manifest.json"),
        p.dir("evaluate").join("evaluate.manifest.json"),
        p.dir("box-shift").join("box-shift-study.manifest.json"),
    ];
    let mut problems = Vec::new();
    for m in &manifests {
        if let Err(e) = replay(m) {
            problems.push(format!("{}: {e}", m.display()));
        }
    }
    for (path, old) in metric_csvs.iter().zip(&before) {
        if std::fs::read(path).map_err(err)? != *old {
            problems.push(format!("{} changed", path.display()));
        }
    }
    Ok((
        problems.is_empty(),
        format!("{} commands replayed, {} metric CSVs compared; problems {problems:?}", manifests.len(), metric_csvs.len()),
    ))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient checks", gradients()),
        ("2 wasserstein oracle", wasserstein()),
        ("3 ddqn fixed point", ddqn()),
        ("4 superpixel invariants", superpixels()),
        ("5 metric oracle", metric_oracle()),
    ];
    for (name, r) in &results {
        report(name, r);
    }

    let scratch = tempfile::tempdir().expect("scratch directory");
    let root = std::env::var_os("FLIPLEARN_ACCEPTANCE_DIR").map_or_else(|| scratch.path().to_path_buf(), PathBuf::from);
    eprintln!("pipeline artifacts in {}", root.display());
    let t = Instant::now();
    let pipeline = Pipeline::build(root);
    eprintln!("pipeline took {:.1} min", t.elapsed().as_secs_f64() / 60.0);
    let heavy: [(&str, fn(&Pipeline) -> Outcome); 6] = [
        ("6 classifier", classifier),
        ("7 end-to-end segmentation", end_to_end),
        ("8 termination contract", termination),
        ("9 box-shift direction", box_shift),
        ("10 IDR ablation", idr_ablation),
        ("11 manifest replay", replays),
    ];
    for (name, check) in heavy {
        let r = match &pipeline {
            Ok(p) => check(p),
            Err(e) => Err(format!("pipeline failed: {e}")),
        };
        report(name, &r);
        results.push((name, r));
    }

    let failed: Vec<&str> = results.iter().filter(|(_, r)| !matches!(r, Ok((true, _)))).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing: {}", failed.join(", "));
        std::process::exit(1);
    }
}

fn report(name: &str, r: &Outcome) {
    match r {
        Ok((true, detail)) => println!("PASS {name}: {detail}"),
        Ok((false, detail)) => println!("FAIL {name}: {detail}"),
        Err(e) => println!("FAIL {name}: error: {e}"),
    }
}
