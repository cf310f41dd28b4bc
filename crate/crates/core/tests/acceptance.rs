//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use nowcast_xai::attribution::{
    baseline, compare_methods, effective_receptive_field, forecast_f1, integrated_gradients,
    target_value, AttributionTarget, Method, DEFAULT_KS,
};
use nowcast_xai::calibration::{
    apply_temperature, ece, evaluate_calibration, fit_calibrators, fit_temperature,
    CalibrationMethod, EvalCase, PixelSet, TemperatureScalar,
};
use nowcast_xai::datagen::{make_dataset, split_dataset, Scenario, Split, DEFAULT_COUNTS};
use nowcast_xai::grid::{argmax_logits, INPUT_CHANNELS, LEAD_TIMES, NUM_CLASSES, RADAR_CHANNELS};
use nowcast_xai::model::{
    accuracy, make_sampler, segmentation_architecture, train_classifier, train_segmentation,
    SegmentationShape,
};
use nowcast_xai::net::{evaluate_target, forward_with_gradient, Architecture, ChannelSum, Op};
use nowcast_xai::service::{deletion_suite, eval_cases, run_pipeline, RunConfig, Store, RF_CLASS};
use nowcast_xai::verify::{
    confusions, exact_diagram_point, modified_f1, modified_far, modified_pod, Metric, Q,
};
use nowcast_xai::{argmax_class, ClassGrid, FusedInput, NetworkParams, Tensor, ValidityMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn run(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let o = f();
        let dt = t.elapsed();
        let in_time = limit.is_none_or(|l| dt < l);
        let pass = o.pass && in_time;
        let budget = limit.map(|l| format!(" / limit {:.0}s", l.as_secs_f64())).unwrap_or_default();
        println!(
            "[{}] {name}: {} ({:.1}s{budget})",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            dt.as_secs_f64()
        );
        self.results.push((name.to_string(), pass));
    }
}

/// Trained surrogate shared by the model-dependent criteria.
struct Surrogate {
    cfg: RunConfig,
    split: Split<Scenario>,
    net: NetworkParams,
}

fn surrogate() -> Surrogate {
    let cfg = RunConfig::default().normalized();
    let data = make_dataset(&cfg.data.counts, cfg.seed, cfg.data.grid).unwrap();
    let split = split_dataset(&data, |s| s.label, cfg.data.split, cfg.seed).unwrap();
    let (net, _) = train_segmentation(&split.train, &cfg.train).unwrap();
    Surrogate { cfg, split, net }
}

// ---------------------------------------------------------------- metrics

/// Brute-force counts straight from class labels: index 0 is the 1 mm/hr
/// threshold (class ≥ 1), index 1 the 10 mm/hr threshold (class 2).
fn brute_counts(p: &[u8], t: &[u8], v: &[bool]) -> [[i128; 3]; 2] {
    let mut out = [[0i128; 3]; 2];
    for i in 0..p.len() {
        if !v[i] {
            continue;
        }
        for (k, min) in [1u8, 2].into_iter().enumerate() {
            let (fp, ft) = (p[i] >= min, t[i] >= min);
            if fp && ft {
                out[k][0] += 1;
            } else if ft {
                out[k][1] += 1;
            } else if fp {
                out[k][2] += 1;
            }
        }
    }
    out
}

/// Fraction `n / d`, `None` for a zero denominator.
fn frac(n: i128, d: i128) -> Option<(i128, i128)> {
    (d != 0).then_some((n, d))
}

fn mean2(a: Option<(i128, i128)>, b: Option<(i128, i128)>) -> Option<(i128, i128)> {
    match (a, b) {
        (Some((an, ad)), Some((bn, bd))) => Some((an * bd + bn * ad, 2 * ad * bd)),
        (x, None) | (None, x) => x,
    }
}

fn same(q: Option<Q>, f: Option<(i128, i128)>) -> bool {
    match (q, f) {
        (Some(q), Some((n, d))) => *q.numer() * d == n * *q.denom(),
        (None, None) => true,
        _ => false,
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut checked = 0;
    for pair in 0..200 {
        let p: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let t: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        // every fourth pair carries a random validity mask
        let v: Vec<bool> = (0..64).map(|_| pair % 4 != 0 || rng.random::<f64>() < 0.8).collect();
        let pred = ClassGrid::new(8, 8, p.clone()).unwrap();
        let truth = ClassGrid::new(8, 8, t.clone()).unwrap();
        let mask = ValidityMask::new(8, 8, v.clone()).unwrap();
        let (c1, c10) = confusions(&pred, &truth, &mask).unwrap();
        let b = brute_counts(&p, &t, &v);
        let pod = |k: usize| frac(b[k][0], b[k][0] + b[k][1]);
        let far = |k: usize| frac(b[k][2], b[k][0] + b[k][2]);
        let f1 = |k: usize| frac(2 * b[k][0], 2 * b[k][0] + b[k][1] + b[k][2]);
        let sr = |k: usize| frac(b[k][0], b[k][0] + b[k][2]);
        let csi = |k: usize| frac(b[k][0], b[k][0] + b[k][1] + b[k][2]);
        let bias = |k: usize| frac(b[k][0] + b[k][2], b[k][0] + b[k][1]);
        let mut ok = same(modified_pod(&c1, &c10).ratio(), mean2(pod(0), pod(1)))
            && same(modified_far(&c1, &c10).ratio(), mean2(far(0), far(1)))
            && same(modified_f1(&c1, &c10).ratio(), mean2(f1(0), f1(1)));
        for (k, c) in [c1, c10].iter().enumerate() {
            let defined = pod(k).is_some() && far(k).is_some();
            match c.point() {
                Some(pt) => {
                    ok &= defined
                        && same(Some(pt.pod), pod(k))
                        && same(Some(pt.success_ratio), sr(k))
                        && same(Some(pt.csi), csi(k))
                        && same(Some(pt.bias), bias(k));
                }
                None => ok &= !defined,
            }
        }
        // threshold-averaged diagram point over the defined thresholds
        let defined: Vec<usize> = (0..2).filter(|&k| pod(k).is_some() && far(k).is_some()).collect();
        let avg = |f: &dyn Fn(usize) -> Option<(i128, i128)>| match defined.as_slice() {
            [k] => f(*k),
            [a, b] => mean2(f(*a), f(*b)),
            _ => None,
        };
        match exact_diagram_point(&c1, &c10) {
            Some((pt, partial)) => {
                ok &= partial == (defined.len() == 1)
                    && same(Some(pt.pod), avg(&pod))
                    && same(Some(pt.success_ratio), avg(&sr))
                    && same(Some(pt.csi), avg(&csi))
                    && same(Some(pt.bias), avg(&bias));
            }
            None => ok &= defined.is_empty(),
        }
        checked += 1;
        if !ok {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{checked} grid pairs, {mismatches} mismatches"))
}

fn hand_cases() -> Outcome {
    // (pred, truth) pixels: hits 3/1, misses 1/1, false alarms 1/1 at 1/10 mm/hr
    let pixels = [(2u8, 2u8), (1, 2), (2, 1), (0, 1), (1, 0)];
    let mut p = vec![0u8; 64];
    let mut t = vec![0u8; 64];
    for (i, (a, b)) in pixels.iter().enumerate() {
        p[i] = *a;
        t[i] = *b;
    }
    let (c1, c10) = confusions(
        &ClassGrid::new(8, 8, p).unwrap(),
        &ClassGrid::new(8, 8, t).unwrap(),
        &ValidityMask::all_valid(8, 8),
    )
    .unwrap();
    let got = [modified_pod(&c1, &c10), modified_far(&c1, &c10), modified_f1(&c1, &c10)];
    let want = [Q::new(5, 8), Q::new(3, 8), Q::new(5, 8)];
    let ok = got.iter().zip(&want).all(|(g, w)| *g == Metric::Defined(*w))
        && got.iter().map(|g| g.value()).eq([Some(0.625), Some(0.375), Some(0.625)]);
    let v: Vec<String> = got.iter().map(|g| format!("{:?}", g.value().unwrap_or(f64::NAN))).collect();
    outcome(ok, format!("POD {}, FAR {}, F1 {}", v[0], v[1], v[2]))
}

// --------------------------------------------------------------- gradients

fn random_input(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FusedInput {
    let mut t = Tensor::zeros(INPUT_CHANNELS, h, w);
    for c in 0..INPUT_CHANNELS {
        for v in t.channel_mut(c) {
            *v = if c < RADAR_CHANNELS { rng.random::<f64>() * 20.0 } else { rng.random() };
        }
    }
    FusedInput::new(t).unwrap()
}

fn gradient_check() -> Outcome {
    let (h, w) = (16, 16);
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let net = NetworkParams::init(segmentation_architecture(SegmentationShape::default()), &mut rng);
        let x = random_input(&mut rng, h, w);
        let pixels: Vec<usize> = (0..16).map(|_| rng.random_range(0..h * w)).collect();
        let target = ChannelSum {
            output: rng.random_range(0..LEAD_TIMES),
            channel: rng.random_range(0..NUM_CLASSES),
            pixels,
        };
        let (_, g) = forward_with_gradient(&net, x.tensor(), &target).unwrap();
        for _ in 0..20 {
            let i = rng.random_range(0..x.tensor().data().len());
            let eps = 1e-6 * (1.0 + x.tensor().data()[i].abs());
            let mut xp = x.tensor().clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.tensor().clone();
            xm.data_mut()[i] -= eps;
            let fd = (evaluate_target(&net, &xp, &target).unwrap() - evaluate_target(&net, &xm, &target).unwrap())
                / (2.0 * eps);
            let an = g.data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    outcome(worst < 1e-3, format!("5 nets x 20 coordinates, max relative error {worst:.2e}"))
}

// -------------------------------------------------------------- attribution

/// Per-pixel linear 12 → 3 map per lead time.
fn linear_net() -> NetworkParams {
    let ops = (0..LEAD_TIMES)
        .map(|k| Op::Linear { src: 0, dst: k + 1, cin: INPUT_CHANNELS, cout: NUM_CLASSES })
        .collect();
    let arch = Architecture::new(INPUT_CHANNELS, ops, (1..=LEAD_TIMES).collect()).unwrap();
    let n = arch.param_count();
    let weights = (0..n).map(|i| ((i * 53 % 29) as f64 - 14.0) / 9.0).collect();
    NetworkParams::from_weights(arch, weights).unwrap()
}

fn ig_axioms(s: &Surrogate) -> Outcome {
    let cases = deletion_suite(&s.split.test, 1, 10).unwrap();
    let mut zero_ok = true;
    let mut worst: f64 = 0.0;
    for c in &cases {
        let t = AttributionTarget::valid_region(1, 1, &c.mask).unwrap();
        let at_base = integrated_gradients(&s.net, &c.x, &c.x, 16, &t).unwrap();
        zero_ok &= at_base.a.data().iter().all(|v| *v == 0.0);
        let base = baseline(&c.x);
        let ig = integrated_gradients(&s.net, &c.x, &base, 128, &t).unwrap();
        let delta = target_value(&s.net, c.x.tensor(), &t).unwrap() - target_value(&s.net, base.tensor(), &t).unwrap();
        let total: f64 = ig.a.data().iter().sum();
        worst = worst.max((total - delta).abs() / delta.abs());
    }

    let lin = linear_net();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut linear_ok = true;
    for _ in 0..5 {
        let x = random_input(&mut rng, 8, 8);
        let m = ValidityMask::all_valid(8, 8);
        let t = AttributionTarget::valid_region(3, 2, &m).unwrap();
        let base = baseline(&x);
        let ig = integrated_gradients(&lin, &x, &base, 9, &t).unwrap();
        let target = ChannelSum { output: 2, channel: 2, pixels: m.indices().collect() };
        let (_, g) = forward_with_gradient(&lin, x.tensor(), &target).unwrap();
        for i in 0..ig.a.data().len() {
            let d = x.tensor().data()[i] - base.tensor().data()[i];
            linear_ok &= ig.a.data()[i] == d * g.data()[i];
        }
    }
    outcome(
        zero_ok && linear_ok && worst < 0.01 && cases.len() == 10,
        format!(
            "zero at baseline {zero_ok}, linear exact {linear_ok}, completeness max rel error {:.2e} over {} cases",
            worst,
            cases.len()
        ),
    )
}

fn deletion_fidelity(s: &Surrogate) -> Outcome {
    let e = &s.cfg.explain;
    let cases = deletion_suite(&s.split.test, e.lead_time, 30).unwrap();
    let cmp = compare_methods(&s.net, &cases, &[Method::IntegratedGradients, Method::Random], &e.attribution, &DEFAULT_KS)
        .unwrap();
    let ig = cmp.result(Method::IntegratedGradients).unwrap();
    let rd = cmp.result(Method::Random).unwrap();
    let wins = ig.curves.iter().zip(&rd.curves).filter(|(a, b)| a.auc <= b.auc).count();
    let mut anchors = true;
    for (c, (a, b)) in cases.iter().zip(ig.curves.iter().zip(&rd.curves)) {
        let full = forecast_f1(&s.net, c.x.tensor(), &c.truth, &c.mask, c.lead_time).unwrap();
        let empty = forecast_f1(&s.net, baseline(&c.x).tensor(), &c.truth, &c.mask, c.lead_time).unwrap();
        for curve in [a, b] {
            anchors &= curve.ks[0] == 0.0 && curve.scores[0] == full;
            anchors &= *curve.ks.last().unwrap() == 100.0 && *curve.scores.last().unwrap() == empty;
        }
    }
    let share = wins as f64 / cases.len() as f64;
    outcome(
        cases.len() == 30 && ig.mean_auc < rd.mean_auc && share >= 0.8 && anchors,
        format!(
            "{} cases, mean AUC IG {:.4} vs random {:.4}, IG <= random in {wins}/{} ({:.0}%), anchors exact {anchors}",
            cases.len(),
            ig.mean_auc,
            rd.mean_auc,
            cases.len(),
            100.0 * share
        ),
    )
}

// -------------------------------------------------------------- calibration

/// Labels drawn from softmax(z / t_true) for Gaussian logits.
fn calibrated_set(n: usize, t_true: f64, seed: u64) -> PixelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 2.0).unwrap();
    let mut set = PixelSet::default();
    for _ in 0..n {
        let z = [d.sample(&mut rng), d.sample(&mut rng), d.sample(&mut rng)];
        let e: Vec<f64> = z.iter().map(|v| (v / t_true).exp()).collect();
        let total: f64 = e.iter().sum();
        let r: f64 = rng.random::<f64>() * total;
        let y = if r < e[0] { 0 } else if r < e[0] + e[1] { 1 } else { 2 };
        set.logits.push(z);
        set.labels.push(y);
    }
    set
}

struct Calibrated {
    cal: nowcast_xai::calibration::Calibrators,
    test: Vec<EvalCase>,
}

fn calibration_suite(c: &Calibrated) -> Outcome {
    let mut argmax_ok = true;
    let mut identity_ok = true;
    for case in &c.test {
        for (k, z) in case.logits.iter().enumerate() {
            let ts = &c.cal.leads[k].temperature;
            let (p, _) = apply_temperature(z, ts).unwrap();
            argmax_ok &= argmax_class(&p) == argmax_logits(z);
            let (p1, _) = apply_temperature(z, &TemperatureScalar::identity(k as u8 + 1)).unwrap();
            identity_ok &= p1 == z.softmax();
        }
    }
    let set = calibrated_set(20_000, 1.5, 11);
    let t1 = fit_temperature(&set, 1).unwrap().t;
    let scaled = PixelSet {
        logits: set.logits.iter().map(|z| z.map(|v| 3.0 * v)).collect(),
        labels: set.labels.clone(),
    };
    let t3 = fit_temperature(&scaled, 1).unwrap().t;
    let ratio = t3 / t1;
    let scale_ok = (ratio / 3.0 - 1.0).abs() < 0.10;

    let mut conf = vec![0.9; 5];
    conf.extend([0.6; 5]);
    let correct = [true, true, true, false, false, true, true, true, false, false];
    let hand = ece(&conf, &correct, 2).unwrap();
    let perfect = ece(
        &[0.75, 0.75, 0.75, 0.75, 0.25, 0.25, 0.25, 0.25],
        &[true, true, true, false, true, false, false, false],
        2,
    )
    .unwrap();
    outcome(
        argmax_ok && identity_ok && scale_ok && hand == 0.15 && perfect == 0.0,
        format!(
            "TS argmax invariant {argmax_ok} ({} cases x 6 leads), T=1 identity {identity_ok}, \
             T(3z)/T(z) = {ratio:.4}, ECE hand case {hand}, calibrated construction {perfect}",
            c.test.len()
        ),
    )
}

fn table1(s: &Surrogate, c: &Calibrated) -> Outcome {
    use CalibrationMethod::{LocalTemperature as Lts, Temperature as Ts, Uncalibrated as Raw};
    let cal_cfg = &s.cfg.calibration;
    let table = evaluate_calibration(&c.cal, &c.test, &[Raw, Ts, Lts], 10, &cal_cfg.sampling).unwrap();
    let mut ts_ok = true;
    let mut lts_better = 0;
    let mut f1_ts = true;
    let mut f1_lts: f64 = 0.0;
    let mut cells = Vec::new();
    for r in &table.rows {
        let (raw, ts, lts) = (r.score(Raw).unwrap(), r.score(Ts).unwrap(), r.score(Lts).unwrap());
        ts_ok &= ts.ece <= raw.ece;
        lts_better += usize::from(lts.ece < raw.ece);
        f1_ts &= ts.modified_f1 == raw.modified_f1;
        if let (Some(a), Some(b)) = (lts.modified_f1, raw.modified_f1) {
            f1_lts = f1_lts.max((a - b).abs());
        }
        cells.push(format!("{}h {:.4}/{:.4}/{:.4}", r.lead_time, raw.ece, ts.ece, lts.ece));
    }
    outcome(
        ts_ok && lts_better >= 5 && f1_ts && f1_lts <= 0.005,
        format!(
            "ECE raw/TS/LTS [{}]; TS never worse {ts_ok}, LTS better at {lts_better}/6, \
             F1 exact under TS {f1_ts}, max |dF1| under LTS {f1_lts:.4}",
            cells.join(", ")
        ),
    )
}

// ---------------------------------------------------------- classifier, RF

fn classifier(s: &Surrogate) -> Outcome {
    let (clf, _) = train_classifier(&s.split.train, &s.net, &s.cfg.classifier).unwrap();
    let acc = accuracy(&clf, &s.split.test).unwrap();

    let labels: Vec<usize> = s.split.train.iter().map(|sc| sc.label.index()).collect();
    let sampler = make_sampler(&DEFAULT_COUNTS, &labels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 100_000;
    let mut hits = [0usize; 6];
    for _ in 0..n {
        hits[labels[sampler.draw(&mut rng)]] += 1;
    }
    let inv: Vec<f64> = DEFAULT_COUNTS.iter().map(|c| 1.0 / *c as f64).collect();
    let z: f64 = inv.iter().sum();
    let dev = hits
        .iter()
        .zip(&inv)
        .map(|(h, i)| (*h as f64 / n as f64 - i / z).abs())
        .fold(0.0, f64::max);
    outcome(
        acc >= 0.90 && dev <= 0.02,
        format!(
            "held-out accuracy {:.2}% on {} cases, sampler max |freq - law| {dev:.4} at {n} draws",
            100.0 * acc,
            s.split.test.len()
        ),
    )
}

fn receptive_field(s: &Surrogate) -> Outcome {
    let e = &s.cfg.explain;
    let inputs: Vec<FusedInput> = s.split.test.iter().take(16).map(|c| c.inputs.clone()).collect();
    let rf = effective_receptive_field(&s.net, &inputs, &s.split.test[0].mask, e.lead_time, RF_CLASS, &e.attribution)
        .unwrap();
    let outside = rf.max_outside();
    outcome(
        outside == 0.0 && rf.effective_radius <= rf.theoretical_radius && inputs.len() == 16,
        format!(
            "max |a| outside theoretical RF {outside}, effective radius {} <= theoretical {} on {} samples",
            rf.effective_radius,
            rf.theoretical_radius,
            inputs.len()
        ),
    )
}

// ------------------------------------------------------------- determinism

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::smoke();
    cfg.seed = 7;
    let runs: Vec<(tempfile::TempDir, String)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let store = Store::open(dir.path()).unwrap();
            let rec = run_pipeline(&store, &cfg).unwrap();
            (dir, rec.run_id)
        })
        .collect();
    let same_id = runs[0].1 == runs[1].1 && runs[0].1 == cfg.run_id();
    let dir = |i: usize| runs[i].0.path().join("runs").join(&runs[i].1);
    let (a, b) = (files(&dir(0)), files(&dir(1)));
    let compared: Vec<&String> = a.keys().filter(|k| k.as_str() != "record.json").collect();
    let differing: Vec<&&String> = compared.iter().filter(|k| b.get(k.as_str()) != a.get(k.as_str())).collect();
    let weights = a.keys().filter(|k| k.starts_with("model/") && k.ends_with(".grdf")).count();
    let reports = a.keys().filter(|k| k.starts_with("report/")).count();
    outcome(
        same_id && differing.is_empty() && a.len() == b.len() && weights > 0 && reports > 0,
        format!(
            "run id {} twice, {} artifacts compared ({weights} weight files, {reports} report files), {} differ",
            runs[0].1,
            compared.len(),
            differing.len()
        ),
    )
}

fn main() {
    let mut suite = Suite { results: Vec::new() };
    let min = |m: u64| Some(Duration::from_secs(60 * m));

    suite.run("metric oracle suite", Some(Duration::from_secs(10)), metric_oracle);
    suite.run("modified POD/FAR/F1 hand cases", None, hand_cases);
    suite.run("gradient check", Some(Duration::from_secs(60)), gradient_check);

    let t = Instant::now();
    let s = surrogate();
    println!(
        "surrogate: {}x{} grid, {} train / {} val / {} test cases, {} epochs, trained in {:.1}s",
        s.cfg.data.grid.0,
        s.cfg.data.grid.1,
        s.split.train.len(),
        s.split.val.len(),
        s.split.test.len(),
        s.cfg.train.epochs,
        t.elapsed().as_secs_f64()
    );

    suite.run("integrated gradients axioms", min(5), || ig_axioms(&s));
    suite.run("deletion fidelity", min(15), || deletion_fidelity(&s));

    let t = Instant::now();
    let val = eval_cases(&s.net, &s.split.val).unwrap();
    let test = eval_cases(&s.net, &s.split.test).unwrap();
    let (cal, _) = fit_calibrators(&val, s.cfg.calibration.lts.as_ref(), s.cfg.calibration.bins).unwrap();
    let fit_time = t.elapsed();
    println!("calibrators: TS and LTS fitted on {} validation cases in {:.1}s", val.len(), fit_time.as_secs_f64());
    let c = Calibrated { cal, test };

    suite.run("calibration suite", None, || calibration_suite(&c));
    let limit = Duration::from_secs(20 * 60).saturating_sub(fit_time);
    suite.run("ECE improves after calibration", Some(limit), || table1(&s, &c));
    suite.run("rain-type classifier and sampler", None, || classifier(&s));
    suite.run("receptive field", None, || receptive_field(&s));
    suite.run("pipeline determinism", None, determinism);

    let failed: Vec<&str> = suite.results.iter().filter(|(_, p)| !p).map(|(n, _)| n.as_str()).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        suite.results.len() - failed.len(),
        suite.results.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
