//! End-to-end acceptance suite. Runs every criterion in sequence, prints one
//! PASS/FAIL line per criterion and exits nonzero if any failed.
//!
//! `cargo test -p forgenas --test acceptance -- 3 7` runs a subset.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use forgenas::cli::main_with_args;
use forgenas::formats;
use forgenas_core::c2pn::{self, DetectionNet, NetConfig, TrainConfig};
use forgenas_core::data::{generate_synthetic, Dataset, Domain, Sample, SynthConfig};
use forgenas_core::estimator::{edge_op_scores, generalization_from_gaps, importance};
use forgenas_core::genotype::Genotype;
use forgenas_core::metrics::{auc, auc_ratio, MetricsReport};
use forgenas_core::nn::{cdc_forward, Mode};
use forgenas_core::ops::{parse_kind, OperatorRegistry};
use forgenas_core::rng;
use forgenas_core::search::{cross_dataset_search, search, Phase, SearchConfig, Searcher};
use forgenas_core::supernet::{CellKind, Supernet, SupernetConfig};
use forgenas_core::tensor::{gradcheck, ConvGeom, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed, 0);
    Tensor::from_fn(shape, |_| rng::uniform_range(&mut r, -1.0, 1.0))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn time_limit(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("{what} took {:.0}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
}

// criterion 1 -------------------------------------------------------------

fn conv(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
    let mut tape = Tape::inference();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, g).unwrap();
    tape.value(y).clone()
}

fn cdc(x: &Tensor, w: &Tensor, theta: f64, g: ConvGeom) -> Tensor {
    let mut tape = Tape::inference();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = cdc_forward(&mut tape, xv, wv, theta, g).unwrap();
    tape.value(y).clone()
}

/// Center tap of every kernel slice shifted by `-theta * sum(slice)`.
fn center_adjusted(w: &Tensor, theta: f64) -> Tensor {
    let s = w.shape();
    let center = (s[2] / 2) * s[3] + s[3] / 2;
    let mut data = w.data().to_vec();
    for slice in data.chunks_mut(s[2] * s[3]) {
        let total: f64 = slice.iter().sum();
        slice[center] -= theta * total;
    }
    Tensor::new(s.to_vec(), data).unwrap()
}

fn criterion_cdc() -> Outcome {
    let start = Instant::now();
    let configs = (1usize..3, 1usize..3, 1usize..4, prop::sample::select(vec![1usize, 3, 5, 7]), 1usize..3, 1usize..3, 0usize..4, any::<u64>(), 0.0f64..=1.0);
    let worst = std::cell::Cell::new([0.0f64; 3]);
    let mut runner = TestRunner::new(RunnerConfig { cases: 100, ..RunnerConfig::default() });
    runner
        .run(&configs, |(n, groups, cpg, k, stride, dilation, padding, seed, theta)| {
            let size = dilation * (k - 1) + 4;
            let x = random(&[n, groups * cpg, size, size + 1], seed);
            let w = random(&[groups * 2, cpg, k, k], seed ^ 0x5eed);
            let g = ConvGeom::new(stride, padding, dilation, groups);
            let fold = max_abs_diff(&cdc(&x, &w, theta, g), &conv(&x, &center_adjusted(&w, theta), g));
            let vanilla = max_abs_diff(&cdc(&x, &w, 0.0, g), &conv(&x, &w, g));
            let constant = Tensor::full(&[n, groups * cpg, size, size + 1], rng::uniform_range(&mut rng::seeded(seed, 1), -3.0, 3.0));
            // unpadded: every output position reads interior pixels only
            let flat = cdc(&constant, &w, 1.0, ConvGeom::new(stride, 0, dilation, groups));
            let annihilated = flat.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
            let w0 = worst.get();
            worst.set([w0[0].max(fold), w0[1].max(vanilla), w0[2].max(annihilated)]);
            prop_assert!(fold < 1e-12, "folding differs by {}", fold);
            prop_assert!(vanilla < 1e-12, "theta = 0 differs from vanilla by {}", vanilla);
            prop_assert!(annihilated < 1e-10, "theta = 1 leaves {} on a constant input", annihilated);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    time_limit(start, Duration::from_secs(60), "CDC checks")?;
    let worst = worst.get();
    Ok(format!("100 configs; max |diff| fold {:.1e}, theta=0 {:.1e}, constant {:.1e}", worst[0], worst[1], worst[2]))
}

// criterion 2 -------------------------------------------------------------

const SEEDS: u64 = 20;

fn op_error(name: &str, stride: usize, seed: u64) -> gradcheck::GradReport {
    let mut store = ParamStore::new();
    let mut init = rng::seeded(seed, 1);
    let stack = parse_kind(name).unwrap().instantiate(4, stride, true, &mut store, &mut init).unwrap();
    let ids = stack.param_ids();
    for &id in &ids {
        let noise = random(store.value(id).shape(), seed ^ (id.0 as u64) << 8);
        let moved: Vec<f64> = store.value(id).data().iter().zip(noise.data()).map(|(v, n)| v + 0.3 * n).collect();
        *store.value_mut(id) = Tensor::new(store.value(id).shape().to_vec(), moved).unwrap();
    }
    let x = random(&[3, 4, 8, 8], seed + 7);
    gradcheck::check(&[x], &store, &ids, 1e-5, seed, Some(48), |tape, v, s| stack.clone().forward(tape, s, v[0], None, Mode::Train)).unwrap()
}

fn arch_error(seed: u64) -> gradcheck::GradReport {
    let rate = if seed % 2 == 0 { 1.0 } else { 0.5 };
    let config = SupernetConfig { init_channels: 4, groups: 1, sample_rate: rate, arch_init_noise: 0.5, ..SupernetConfig::default() };
    let registry = OperatorRegistry::from_names(["skip_connect", "SepCDC_3x3_0.5", "DilCDC_3x3_0.7"]).unwrap();
    let net = Supernet::new(config, registry, seed).unwrap();
    let x = random(&[2, 3, 8, 8], seed + 11);
    gradcheck::check(&[], &net.store, &net.arch_ids(), 1e-5, seed, None, |tape, _, s| {
        let mut n = net.clone();
        n.store = s.clone();
        let xv = tape.constant(x.clone());
        Ok(n.forward(tape, xv, Mode::Probe)?.logits)
    })
    .unwrap()
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    let mut refined = 0;
    for name in OperatorRegistry::default().names() {
        for stride in [1, 2] {
            for seed in 0..SEEDS {
                let report = op_error(&name, stride, seed);
                refined += report.refined;
                let err = report.max_relative_error();
                if err > worst.0 {
                    worst = (err, format!("{name} stride {stride} seed {seed}"));
                }
            }
        }
    }
    for seed in 0..SEEDS {
        let report = arch_error(seed);
        refined += report.refined;
        let err = report.max_relative_error();
        if err > worst.0 {
            worst = (err, format!("alpha/beta seed {seed}"));
        }
    }
    ensure(worst.0 < 1e-3, || format!("relative error {:.2e} at {}", worst.0, worst.1))?;
    time_limit(start, Duration::from_secs(600), "gradient suite")?;
    Ok(format!("{} ops x 2 strides + alpha/beta, {SEEDS} seeds; max relative error {:.2e} ({}); {refined} coordinates re-stepped across kinks", OperatorRegistry::default().len(), worst.0, worst.1))
}

// criterion 3 -------------------------------------------------------------

fn criterion_estimator() -> Outcome {
    let e = generalization_from_gaps(&[0.5, 0.25]);
    // softmax(1/0.5, 1/0.25) by hand
    let want = [1.0 / (1.0 + 2f64.exp()), 2f64.exp() / (1.0 + 2f64.exp())];
    ensure((e[0] - 0.1192).abs() < 1e-4 && (e[1] - 0.8808).abs() < 1e-4, || format!("E = {e:?}"))?;
    ensure((e[0] - want[0]).abs() < 1e-12, || format!("E = {e:?}, oracle {want:?}"))?;

    let equal = generalization_from_gaps(&[0.3, 0.3]);
    let i = importance(&[0.0, 0.0], &equal, &[true, true], 0.15).map_err(|e| e.to_string())?;
    ensure(i.iter().all(|v| (v - 0.575).abs() < 1e-6), || format!("I = {i:?}"))?;

    let config = SupernetConfig { init_channels: 4, groups: 1, ..SupernetConfig::default() };
    let mut net = Supernet::new(config, OperatorRegistry::default(), 0).map_err(|e| e.to_string())?;
    for id in net.arch_ids() {
        *net.store.value_mut(id) = Tensor::zeros(net.store.value(id).shape());
    }
    let edge = &mut net.arch_space_mut(CellKind::Normal).edges[0];
    edge.alive[2..].iter_mut().for_each(|a| *a = false);
    edge.reset_generalization();
    let h = edge_op_scores(net.arch_space(CellKind::Normal), &net.store, 0.15).map_err(|e| e.to_string())?;
    ensure((h[0][0] - 0.2875).abs() < 1e-6 && (h[0][1] - 0.2875).abs() < 1e-6, || format!("H = {:?}", &h[0][..2]))?;
    Ok(format!("E = ({:.4}, {:.4}), I = {:.6}, H = {:.6}", e[0], e[1], i[0], h[0][0]))
}

// criterion 4 -------------------------------------------------------------

/// Balanced tiny dataset: uniform noise, fakes brightened in one corner.
fn noise_dataset(seed: u64, n: usize, size: usize) -> Dataset {
    let mut r = rng::seeded(seed, 0);
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let img = Tensor::from_fn(&[3, size, size], |j| {
                let v = rng::uniform_range(&mut r, 0.0, 0.6);
                if label == 1 && j % (size * size) == 0 {
                    1.0
                } else {
                    v
                }
            });
            Sample::new(img, label, None, "noise").unwrap()
        })
        .collect();
    Dataset::new(samples).unwrap()
}

fn criterion_schedule() -> Outcome {
    let config = SearchConfig {
        epochs: 65,
        warmup_epochs: 10,
        prune_period: 20,
        batch_size: 4,
        probe_batch: 4,
        supernet: SupernetConfig { init_channels: 2, groups: 1, ..SupernetConfig::default() },
        seed: 3,
        ..SearchConfig::default()
    };
    let data = noise_dataset(1, 8, 4);
    let out = search(config, OperatorRegistry::default(), &data).map_err(|e| e.to_string())?;
    for epoch in 1..=65 {
        let phases: Vec<Phase> = out.events.iter().filter(|e| e.epoch == epoch).map(|e| e.phase).collect();
        let warm = epoch <= 10;
        ensure(phases.contains(&Phase::Weight), || format!("epoch {epoch} has no weight update"))?;
        ensure(phases.contains(&Phase::Arch) != warm, || format!("epoch {epoch}: architecture updates {}", if warm { "during warm-up" } else { "missing" }))?;
        let prune = [20, 40, 60].contains(&epoch);
        ensure(phases.contains(&Phase::Prune) == prune, || format!("epoch {epoch}: prune event mismatch"))?;
        ensure(phases.contains(&Phase::Rate) == prune, || format!("epoch {epoch}: rate update mismatch"))?;
    }
    let alive: Vec<Vec<usize>> = out.events.iter().filter(|e| e.phase == Phase::Prune).map(|e| e.alive.clone().unwrap_or_default()).collect();
    ensure(alive.len() == 3, || format!("{} prune events", alive.len()))?;
    for (counts, want) in alive.iter().zip([7, 5, 3]) {
        ensure(!counts.is_empty() && counts.iter().all(|&a| a == want), || format!("alive counts {counts:?}, expected all {want}"))?;
    }
    let rates: Vec<f64> = out.events.iter().filter(|e| e.phase == Phase::Rate).filter_map(|e| e.rate).collect();
    Ok(format!("warm-up 1-10 weight-only, prunes at 20/40/60 with 9->7->5->3, rates {rates:?}"))
}

// criteria 5 and 10 -------------------------------------------------------

struct Trained {
    net: DetectionNet,
    test: Dataset,
}

fn desk_net() -> NetConfig {
    NetConfig { init_channels: 8, groups: 1, ..NetConfig::default() }
}

fn train_and_test(genotype: &Genotype, train: &Dataset, val: &Dataset, test: &Dataset) -> Result<(DetectionNet, f64), String> {
    let mut net = DetectionNet::build(genotype, desk_net(), 0).map_err(|e| e.to_string())?;
    let config = TrainConfig { epochs: 20, ..TrainConfig::default() };
    c2pn::train(&mut net, train, val, &config).map_err(|e| e.to_string())?;
    let report = c2pn::evaluate(&mut net, test, Vec::new(), 0, 0).map_err(|e| e.to_string())?;
    Ok((net, report.auc))
}

fn criterion_efficacy(slot: &mut Option<Trained>) -> Outcome {
    let synth = SynthConfig::default();
    let train = generate_synthetic(1, 1000, Domain::Splice, 16, &synth).map_err(|e| e.to_string())?;
    let val = generate_synthetic(2, 500, Domain::Splice, 16, &synth).map_err(|e| e.to_string())?;
    let test = generate_synthetic(3, 500, Domain::Splice, 16, &synth).map_err(|e| e.to_string())?;
    let config = SearchConfig {
        epochs: 25,
        warmup_epochs: 5,
        prune_period: 10,
        supernet: SupernetConfig { init_channels: 8, groups: 1, ..SupernetConfig::default() },
        seed: 0,
        ..SearchConfig::default()
    };
    let start = Instant::now();
    let mut searcher = Searcher::new(config, OperatorRegistry::default(), &train).map_err(|e| e.to_string())?;
    while !searcher.is_done() {
        searcher.run_epoch(&train).map_err(|e| e.to_string())?;
        eprintln!("  search epoch {} at {:.0}s", searcher.epoch, start.elapsed().as_secs_f64());
    }
    let search_time = start.elapsed();
    let genotype = searcher.genotype().map_err(|e| e.to_string())?;
    eprintln!("  searched genotype {}", formats::genotype_to_string(&genotype).map_err(|e| e.to_string())?);
    let (net, searched) = train_and_test(&genotype, &train, &val, &test)?;
    eprintln!("  searched test AUC {searched:.4}");
    let mut baselines = Vec::new();
    for k in 0..5u64 {
        let mut r = rng::seeded(100 + k, 0);
        let g = Genotype::random(&OperatorRegistry::default(), &mut r, 100 + k);
        let (_, a) = train_and_test(&g, &train, &val, &test)?;
        eprintln!("  random genotype {k} test AUC {a:.4}");
        baselines.push(a);
    }
    let mean = baselines.iter().sum::<f64>() / baselines.len() as f64;
    *slot = Some(Trained { net, test });
    let detail = format!(
        "search {:.0}s; searched AUC {searched:.4}; random mean {mean:.4} ({})",
        search_time.as_secs_f64(),
        baselines.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(", ")
    );
    let mut problems = Vec::new();
    if search_time >= Duration::from_secs(30 * 60) {
        problems.push("search exceeded 30 min".to_string());
    }
    if searched < 0.85 {
        problems.push("searched AUC below 0.85".to_string());
    }
    if searched - mean < 0.03 {
        problems.push(format!("margin {:.4} below 0.03", searched - mean));
    }
    ensure(problems.is_empty(), || format!("{}: {detail}", problems.join("; ")))?;
    Ok(detail)
}

fn criterion_cam(slot: &mut Option<Trained>) -> Outcome {
    let Some(trained) = slot.as_mut() else { return Err("no trained model (criterion 5 did not produce one)".into()) };
    let fakes: Vec<&Sample> = trained.test.samples.iter().filter(|s| s.label == 1).take(100).collect();
    ensure(fakes.len() == 100, || format!("only {} fake test images", fakes.len()))?;
    let mut hits = 0;
    for s in &fakes {
        let map = c2pn::activation_map(&mut trained.net, &s.image).map_err(|e| e.to_string())?;
        let region = s.region.ok_or("fake without region")?;
        if map.quadrant() == Some(region.quadrant(s.height(), s.width())) {
            hits += 1;
        }
    }
    ensure(hits >= 60, || format!("{hits}/100 centers of gravity in the manipulated quadrant"))?;
    Ok(format!("{hits}/100 centers of gravity in the manipulated quadrant"))
}

// criterion 6 -------------------------------------------------------------

fn criterion_cross() -> Outcome {
    let start = Instant::now();
    let domains: Vec<Dataset> = Domain::ALL
        .iter()
        .map(|&d| generate_synthetic(5, 256, d, 16, &SynthConfig::default()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let config = SearchConfig {
        epochs: 6,
        warmup_epochs: 1,
        prune_period: 20,
        batch_size: 32,
        samples_per_domain: 256,
        supernet: SupernetConfig { init_channels: 8, groups: 1, ..SupernetConfig::default() },
        seed: 0,
        ..SearchConfig::default()
    };
    let out = cross_dataset_search(config, OperatorRegistry::default(), &domains).map_err(|e| e.to_string())?;
    out.genotype.validate().map_err(|e| e.to_string())?;
    let steps: Vec<_> = out.events.iter().filter(|e| !matches!(e.phase, Phase::Validate | Phase::Probe)).collect();
    ensure(!steps.is_empty() && steps.len() % 4 == 0, || format!("{} step events", steps.len()))?;
    for chunk in steps.chunks(4) {
        let phases: Vec<Phase> = chunk.iter().map(|e| e.phase).collect();
        ensure(phases == [Phase::InnerAdapt, Phase::InnerAdapt, Phase::SharedWeight, Phase::Arch], || format!("step {}: {phases:?}", chunk[0].step))?;
        let target = chunk[2].domain.ok_or("shared-weight update without target")?;
        ensure(chunk[3].domain == Some(target), || format!("step {}: architecture update off target", chunk[0].step))?;
        let mut sources: Vec<usize> = chunk[..2].iter().filter_map(|e| e.domain).collect();
        sources.sort_unstable();
        let expected: Vec<usize> = (0..3).filter(|&d| d != target).collect();
        ensure(sources == expected, || format!("step {}: sources {sources:?} for target {target}", chunk[0].step))?;
    }
    time_limit(start, Duration::from_secs(45 * 60), "cross-dataset search")?;
    Ok(format!("{} outer steps in order, genotype valid, {:.0}s", steps.len() / 4, start.elapsed().as_secs_f64()))
}

// criterion 7 -------------------------------------------------------------

fn criterion_auc() -> Outcome {
    let cases = (2usize..=200).prop_flat_map(|n| {
        (prop::collection::vec(0u8..10, n), prop::collection::vec(0usize..2, n))
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    });
    let mut runner = TestRunner::new(RunnerConfig { cases: 512, ..RunnerConfig::default() });
    runner
        .run(&cases, |(levels, labels)| {
            let scores: Vec<f64> = levels.iter().map(|&v| f64::from(v) / 9.0).collect();
            let (mut twice, mut pairs) = (0u128, 0u128);
            for (&si, _) in scores.iter().zip(&labels).filter(|(_, &l)| l == 1) {
                for (&sj, _) in scores.iter().zip(&labels).filter(|(_, &l)| l == 0) {
                    pairs += 1;
                    twice += match si.partial_cmp(&sj).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
            let r = auc_ratio(&scores, &labels).unwrap();
            prop_assert_eq!((r.twice_wins, r.pairs), (twice, pairs));
            prop_assert_eq!(auc(&scores, &labels).unwrap(), twice as f64 / (2 * pairs) as f64);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("512 cases with n <= 200 and heavy ties match the pairwise count exactly".into())
}

// criteria 8 and 9 --------------------------------------------------------

const CLI_CONFIG: &str = r#"
[search]
epochs = 3
warmup_epochs = 1
prune_period = 2
batch_size = 8
probe_batch = 8
samples_per_domain = 16

[train]
epochs = 2
batch_size = 8

[data]
n = 40
"#;

fn cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["forgenas"];
    full.extend_from_slice(args);
    match main_with_args(full) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

/// Run the whole command chain into `out`.
fn cli_pipeline(root: &Path, out: &str) -> Result<(), String> {
    let cfg = root.join("toy.toml");
    let cfg = cfg.to_str().unwrap();
    let o = root.join(out);
    let p = |name: &str| o.join(name).to_string_lossy().into_owned();
    let common = ["--config", cfg, "--preset", "desk", "--seed", "7"];
    let with = |cmd: &str, dir: &str, rest: &[&str]| {
        let mut v = vec![cmd.to_string()];
        v.extend(common.iter().map(|s| s.to_string()));
        v.push("--out".into());
        v.push(p(dir));
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    };
    let run = |v: Vec<String>| cli(&v.iter().map(String::as_str).collect::<Vec<_>>());
    run(with("synth-gen", "images", &["--domain", "blur_patch", "--n", "24"]))?;
    run(with("search", "search", &["--synthetic", "splice"]))?;
    run(with("cross-search", "cross", &["--domains", "splice,blur_patch,noise_patch", "--n", "16"]))?;
    let genotype = p("search/genotype.json");
    run(with("train", "train", &["--synthetic", "splice", "--genotype", &genotype]))?;
    let model = p("train/model.ckpt.json");
    run(with("eval", "eval", &["--checkpoint", &model]))?;
    run(with("eval", "eval_dir", &["--checkpoint", &model, "--data", &p("images"), "--split", "all"]))?;
    run(with("cam", "cam", &["--checkpoint", &model, "--limit", "4"]))?;
    run(with("export", "export", &["--from", &model]))?;
    Ok(())
}

fn artifacts(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "manifests.jsonl") {
                files.push(path.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    files.sort();
    files
}

fn criterion_reproducibility() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::write(root.path().join("toy.toml"), CLI_CONFIG).map_err(|e| e.to_string())?;
    cli_pipeline(root.path(), "a")?;
    cli_pipeline(root.path(), "b")?;
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let files = artifacts(&a);
    ensure(files == artifacts(&b), || "runs produced different file sets".into())?;
    let expected = ["search/genotype.json", "cross/genotype.json", "eval/report.json", "eval_dir/report.json", "export/genotype.json"];
    for f in expected {
        ensure(files.iter().any(|p| p == Path::new(f)), || format!("{f} missing"))?;
    }
    for f in &files {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        ensure(x == y, || format!("{} differs between runs", f.display()))?;
    }
    Ok(format!("7 commands twice; {} artifacts byte-identical", files.len()))
}

fn criterion_round_trip() -> Outcome {
    let registry = OperatorRegistry::default();
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut r = rng::seeded(seed, 0);
        let g = Genotype::random(&registry, &mut r, seed);
        let text = formats::genotype_to_string(&g).map_err(|e| e.to_string())?;
        let parsed = formats::genotype_from_str(&text).map_err(|e| e.to_string())?;
        ensure(formats::genotype_to_string(&parsed).unwrap() == text, || format!("genotype {seed} changed on round trip"))?;
        let config = NetConfig { init_channels: 4, groups: 2, ..NetConfig::default() };
        let mut a = DetectionNet::build(&g, config.clone(), seed).map_err(|e| e.to_string())?;
        let mut b = DetectionNet::build(&parsed, config, seed).map_err(|e| e.to_string())?;
        ensure(a.num_params() == b.num_params(), || format!("genotype {seed}: parameter counts differ"))?;
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| (i % 17) as f64 / 17.0);
        let logits = |net: &mut DetectionNet| {
            let mut tape = Tape::inference();
            let xv = tape.constant(x.clone());
            let y = net.forward(&mut tape, xv, Mode::Eval).unwrap().logits;
            tape.value(y).clone()
        };
        ensure(logits(&mut a) == logits(&mut b), || format!("genotype {seed}: outputs differ"))?;
        checked += 1;
    }
    let mut r = rng::seeded(9, 0);
    let scores: Vec<f64> = (0..50).map(|_| rng::uniform(&mut r)).collect();
    let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
    let report = MetricsReport::new(&scores, &labels, Vec::new(), 42, 9).map_err(|e| e.to_string())?;
    let text = formats::report_to_string(&report).map_err(|e| e.to_string())?;
    let parsed = formats::report_from_str(&text).map_err(|e| e.to_string())?;
    ensure(parsed == report && formats::report_to_string(&parsed).unwrap() == text, || "report changed on round trip".into())?;
    Ok(format!("{checked} genotypes and a report round-trip byte-identically; builds match in size and output"))
}

// driver ------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into())),
    }
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: usize| selected.is_empty() || selected.contains(&k);
    let mut trained = None;
    let mut failures = 0;
    let criteria: [(usize, &str); 10] = [
        (1, "CDC correctness"),
        (2, "gradient suite"),
        (3, "estimator arithmetic"),
        (4, "schedule fidelity"),
        (5, "search efficacy"),
        (6, "cross-dataset search"),
        (7, "metrics oracle"),
        (8, "reproducibility"),
        (9, "round trip"),
        (10, "activation maps"),
    ];
    for (k, name) in criteria {
        if !wanted(k) {
            continue;
        }
        let start = Instant::now();
        let outcome = guarded(|| match k {
            1 => criterion_cdc(),
            2 => criterion_gradients(),
            3 => criterion_estimator(),
            4 => criterion_schedule(),
            5 => criterion_efficacy(&mut trained),
            6 => criterion_cross(),
            7 => criterion_auc(),
            8 => criterion_reproducibility(),
            9 => criterion_round_trip(),
            10 => criterion_cam(&mut trained),
            _ => unreachable!(),
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {k:>2} {name}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {k:>2} {name}: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
