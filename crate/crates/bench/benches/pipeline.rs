use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nowcast_xai::attribution::{attribute, AttributionConfig, AttributionTarget, Method};
use nowcast_xai::calibration::{ece_sampled, fit_temperature, EceSampling, PixelSet};
use nowcast_xai::datagen::{make_dataset, RainType};
use nowcast_xai::grid::argmax_logits;
use nowcast_xai::model::predict;
use nowcast_xai::verify::stratified_report;
use nowcast_xai::{rain_to_classes, ClassGrid};
use nowcast_xai_bench::fixture;

fn datagen(c: &mut Criterion) {
    c.bench_function("make_dataset 6x32x32", |b| b.iter(|| make_dataset(&[1; 6], 0, (32, 32)).unwrap()));
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("predict");
    for n in [16, 32, 64] {
        let (net, data) = fixture(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &data[0].inputs, |b, x| {
            b.iter(|| predict(&net, x).unwrap())
        });
    }
    g.finish();
}

fn attribution(c: &mut Criterion) {
    let (net, data) = fixture(32);
    let sc = &data[0];
    let target = AttributionTarget::valid_region(1, 1, &sc.mask).unwrap();
    let cfg = AttributionConfig {
        steps: 16,
        n_samples: 4,
        ..AttributionConfig::default()
    };
    let mut g = c.benchmark_group("attribute 32x32");
    g.sample_size(10);
    for m in [Method::Saliency, Method::IntegratedGradients, Method::SmoothIntegratedGradients] {
        g.bench_function(m.name(), |b| b.iter(|| attribute(&net, &sc.inputs, m, &target, &cfg).unwrap()));
    }
    g.finish();
}

fn verification_and_calibration(c: &mut Criterion) {
    let (net, data) = fixture(32);
    let logits: Vec<_> = data.iter().map(|s| predict(&net, &s.inputs).unwrap()).collect();
    let preds: Vec<Vec<ClassGrid>> = logits.iter().map(|l| l.iter().map(argmax_logits).collect()).collect();
    let labels: Vec<RainType> = data.iter().map(|s| s.label).collect();
    c.bench_function("stratified_report 6 cases", |b| {
        b.iter(|| stratified_report(&preds, &data, &labels).unwrap())
    });

    let truth: Vec<ClassGrid> = data.iter().map(|s| rain_to_classes(&s.truth[0]).unwrap()).collect();
    let set = PixelSet::from_grids(logits.iter().zip(&truth).zip(&data).map(|((l, t), s)| (&l[0], t, &s.mask))).unwrap();
    c.bench_function("fit_temperature", |b| b.iter(|| fit_temperature(&set, 1).unwrap()));

    let conf: Vec<f64> = (0..set.len()).map(|i| 0.34 + 0.66 * ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let correct: Vec<bool> = (0..set.len()).map(|i| i % 3 != 0).collect();
    c.bench_function("ece_sampled 10x250", |b| {
        b.iter(|| ece_sampled(&conf, &correct, 10, &EceSampling::default()).unwrap())
    });
}

criterion_group!(benches, datagen, forward, attribution, verification_and_calibration);
criterion_main!(benches);
