use mlab_core::bench::{find_max_batch, measure_throughput, peak_memory, run_bench, tracked_peak, MemTracker};
use mlab_core::minimetric::{pack_input, MiniMetricModel, ModelConfig, PackedInput, ParamSource};
use mlab_core::quantize::{quantize_model, QuantSpec, Scheme};
use mlab_core::rng::rng;
use mlab_core::synthworld::Pair;
use mlab_core::Error;
use rand::Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 300,
        max_seq_len: 32,
        num_layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 24,
        score_hidden: vec![12, 8],
        init_seed: 1,
    }
}

fn inputs(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<PackedInput> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let mut toks = |k| -> Vec<u32> { (0..k).map(|_| r.random_range(4..cfg.vocab_size as u32)).collect() };
            let (s, m, rf) = (toks(9), toks(8), toks(9));
            pack_input(&s, &m, Some(&rf), cfg).unwrap()
        })
        .collect()
}

fn full(cfg: &ModelConfig, b: usize) -> Vec<PackedInput> {
    let seg = vec![7u32; cfg.max_seq_len];
    vec![pack_input(&seg, &seg, Some(&seg), cfg).unwrap(); b]
}

#[test]
fn cap_between_eight_and_sixteen_gives_eight() {
    let cfg = tiny();
    let m = MiniMetricModel::init(cfg.clone()).unwrap();
    let p8 = tracked_peak(&m, &full(&cfg, 8)).unwrap() as u64;
    let p16 = tracked_peak(&m, &full(&cfg, 16)).unwrap() as u64;
    assert!(p8 < p16);
    let found = find_max_batch(&m, (p8 + p16) / 2, 1024).unwrap();
    assert_eq!(found.batch, 8);
    assert!(!found.hit_ceiling);
}

#[test]
fn unbounded_cap_stops_at_ceiling() {
    let m = MiniMetricModel::init(tiny()).unwrap();
    let found = find_max_batch(&m, 1u64 << 62, 16).unwrap();
    assert_eq!(found.batch, 16);
    assert!(found.hit_ceiling);
}

#[test]
fn larger_caps_never_shrink_the_batch() {
    let m = MiniMetricModel::init(tiny()).unwrap();
    let base = m.resident_bytes() as u64;
    let mut last = 0;
    let mut cap = base + 4096;
    for _ in 0..14 {
        match find_max_batch(&m, cap, 64) {
            Ok(found) => {
                assert!(found.batch >= last);
                last = found.batch;
            }
            Err(Error::Capacity(_)) => assert_eq!(last, 0),
            Err(e) => panic!("{e}"),
        }
        cap = base + (cap - base) * 2;
    }
    assert!(last > 1);
    assert_eq!(find_max_batch(&m, base * 3, 64).unwrap(), find_max_batch(&m, base * 3, 64).unwrap());
}

#[test]
fn tiny_caps_are_capacity_errors() {
    let m = MiniMetricModel::init(tiny()).unwrap();
    let base = m.resident_bytes() as u64;
    assert!(matches!(find_max_batch(&m, base, 8), Err(Error::Capacity(_))));
    assert!(matches!(find_max_batch(&m, base + 1, 8), Err(Error::Capacity(_))));
}

#[test]
fn peak_memory_is_deterministic_and_needs_a_tracker() {
    let cfg = tiny();
    let m = MiniMetricModel::init(cfg.clone()).unwrap();
    let sets = vec![(Pair::DeEn, inputs(&cfg, 20, 1)), (Pair::RuEn, inputs(&cfg, 20, 2))];
    let t = MemTracker::new();
    let a = peak_memory(&m, &sets, 8, Some(&t)).unwrap();
    let b = peak_memory(&m, &sets, 8, Some(&MemTracker::new())).unwrap();
    assert_eq!(a, b);
    assert!(a.min > m.resident_bytes() as f64);
    assert_eq!(t.live(), 0);
    assert!(matches!(peak_memory(&m, &sets, 8, None), Err(Error::Config(_))));
    let empty = peak_memory(&m, &[(Pair::ZhEn, Vec::new())], 8, Some(&t)).unwrap();
    assert_eq!(empty.max, m.resident_bytes() as f64);
}

#[test]
fn quantized_teacher_peaks_lower() {
    let cfg = ModelConfig::teacher();
    let m = MiniMetricModel::init(cfg.clone()).unwrap();
    let sets = vec![(Pair::DeEn, inputs(&cfg, 16, 3))];
    let float = peak_memory(&m, &sets, 8, Some(&MemTracker::new())).unwrap();
    for bits in [8u8, 4, 3] {
        let q = quantize_model(&m, &QuantSpec::new(Scheme::Affine, bits), None).unwrap();
        let quant = peak_memory(&q, &sets, 8, Some(&MemTracker::new())).unwrap();
        assert!(quant.max < float.max, "{bits} bits: {} >= {}", quant.max, float.max);
    }
}

#[test]
fn throughput_rates() {
    let cfg = tiny();
    let m = MiniMetricModel::init(cfg.clone()).unwrap();
    let set = inputs(&cfg, 400, 4);
    let s = measure_throughput(&m, &[(Pair::DeEn, set.clone()), (Pair::RuEn, set)], 16).unwrap();
    assert!(s.min > 0.0 && s.max.is_finite());
    assert!(s.min <= s.median && s.median <= s.max);
    // Identical sets: equal rates up to timer noise.
    assert!(s.max / s.min < 2.0, "{} vs {}", s.min, s.max);
    assert!(measure_throughput(&m, &[(Pair::DeEn, Vec::new())], 4).is_err());
}

#[test]
fn student_outpaces_teacher() {
    let teacher = MiniMetricModel::init(ModelConfig::teacher()).unwrap();
    let student = MiniMetricModel::init(ModelConfig::student()).unwrap();
    let set = vec![(Pair::DeEn, inputs(teacher.config(), 96, 5))];
    let t = measure_throughput(&teacher, &set, 16).unwrap();
    let s = measure_throughput(&student, &set, 16).unwrap();
    assert!(s.median > t.median, "student {} vs teacher {}", s.median, t.median);
}

#[test]
fn bench_report_fields() {
    let cfg = tiny();
    let m = MiniMetricModel::init(cfg.clone()).unwrap();
    let sets = vec![(Pair::DeEn, inputs(&cfg, 24, 6)), (Pair::ZhEn, inputs(&cfg, 24, 7))];
    let r = run_bench(&m, &sets, None, Some(1 << 40), 8).unwrap();
    assert_eq!(r.max_batch.unwrap().batch, 8);
    assert_eq!(r.batch, 8);
    assert!(r.peak_bytes.max > 0.0);
    assert!(r.finished_unix >= r.started_unix);
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"throughput\""));
}
