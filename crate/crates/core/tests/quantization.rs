use mlab_core::minimetric::{pack_input, predict_packed, MiniMetricModel, ModelConfig, PackedInput, ParamSource};
use mlab_core::quantize::{
    gptq_layer, output_error, quantize_model, rtn_layer, AnyModel, QuantSpec, Scheme, Stored,
};
use mlab_core::rng::rng;
use mlab_core::Error;
use rand::Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 300,
        max_seq_len: 40,
        num_layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 24,
        score_hidden: vec![12, 8],
        init_seed: 5,
    }
}

fn calib(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<PackedInput> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let mut toks = |k| -> Vec<u32> { (0..k).map(|_| r.random_range(4..cfg.vocab_size as u32)).collect() };
            let (s, m, rf) = (toks(6), toks(5), toks(6));
            pack_input(&s, &m, Some(&rf), cfg).unwrap()
        })
        .collect()
}

#[test]
fn gptq_never_loses_to_rtn() {
    for bits in [8u8, 4, 3, 2] {
        let mut strict = 0;
        for seed in 0..100u64 {
            let mut r = rng(seed * 31 + bits as u64);
            let w: Vec<f32> = (0..256).map(|_| r.random_range(-1.0..1.0)).collect();
            let x: Vec<f32> = (0..64 * 16).map(|_| r.random_range(-1.0..1.0)).collect();
            let g = gptq_layer(&w, 16, 16, &x, 64, bits, 128, 0.01).unwrap();
            let n = rtn_layer(&w, 16, 16, bits, 128).unwrap();
            let eg = output_error(&w, &g.dequantize(), 16, 16, &x, 64);
            let en = output_error(&w, &n.dequantize(), 16, 16, &x, 64);
            assert!(eg <= en + 1e-6, "bits {bits} seed {seed}: {eg} > {en}");
            strict += usize::from(eg < en);
        }
        assert!(strict >= 90, "bits {bits}: strictly better in {strict}/100");
    }
}

#[test]
fn error_shrinks_with_bits() {
    let mut ordered = 0;
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let w: Vec<f32> = (0..32 * 32).map(|_| r.random_range(-1.0..1.0)).collect();
        let errs: Vec<f64> = [2u8, 3, 4, 8]
            .iter()
            .map(|&b| {
                let q = rtn_layer(&w, 32, 32, b, 128).unwrap().dequantize();
                q.iter().zip(&w).map(|(a, b)| ((a - b) as f64).powi(2)).sum()
            })
            .collect();
        ordered += usize::from(errs.windows(2).all(|e| e[0] >= e[1]));
    }
    assert!(ordered >= 95, "{ordered}/100");
}

#[test]
fn calibration_is_required() {
    let m = MiniMetricModel::init(tiny()).unwrap();
    let err = quantize_model(&m, &QuantSpec::new(Scheme::Gptq, 4), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = quantize_model(&m, &QuantSpec::new(Scheme::Absmax8, 8), Some(&[])).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn every_scheme_round_trips_through_the_container() {
    let m = MiniMetricModel::init(tiny()).unwrap();
    let c = calib(m.config(), 16, 1);
    let probe = calib(m.config(), 8, 2);
    for spec in [
        QuantSpec::new(Scheme::Affine, 8),
        QuantSpec::new(Scheme::Absmax8, 8),
        QuantSpec::new(Scheme::Nf4, 4),
        QuantSpec::new(Scheme::Gptq, 3),
        QuantSpec::new(Scheme::Gptq, 2),
    ] {
        let q = quantize_model(&m, &spec, Some(&c)).unwrap();
        let bytes = q.to_bytes().unwrap();
        let back = match AnyModel::from_bytes(&bytes).unwrap() {
            AnyModel::Quantized(b) => b,
            AnyModel::Float(_) => panic!("expected a quantized model"),
        };
        assert_eq!(back.to_bytes().unwrap(), bytes, "{spec:?}");
        let a = predict_packed(&q, &probe, None).unwrap();
        let b = predict_packed(&back, &probe, None).unwrap();
        assert_eq!(a, b);
        // Dequantized forward equals the on-the-fly forward.
        let d = back.dequantized().unwrap();
        assert_eq!(predict_packed(&d, &probe, None).unwrap(), a);
        assert!(back.resident_bytes() < m.resident_bytes());
        for (p, s) in q.params().iter().zip(&m.layout().specs) {
            assert_eq!(matches!(p, Stored::Quant(_)), mlab_core::quantize::is_quantized_role(s.role), "{}", s.name);
        }
    }
}

#[test]
fn eight_bit_model_tracks_float_predictions() {
    let m = MiniMetricModel::init(tiny()).unwrap();
    let c = calib(m.config(), 32, 3);
    let probe = calib(m.config(), 16, 4);
    let q = quantize_model(&m, &QuantSpec::new(Scheme::Gptq, 8), Some(&c)).unwrap();
    let a = predict_packed(&m, &probe, None).unwrap();
    let b = predict_packed(&q, &probe, None).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.score - y.score).abs() < 1e-2, "{} vs {}", x.score, y.score);
    }
}

#[test]
fn requantizing_the_grid_is_idempotent() {
    let mut r = rng(8);
    let w: Vec<f32> = (0..12 * 20).map(|_| r.random_range(-1.0..1.0)).collect();
    let first = rtn_layer(&w, 12, 20, 3, 8).unwrap();
    let deq = first.dequantize();
    let again: Vec<u8> = deq
        .iter()
        .enumerate()
        .map(|(i, &v)| first.grid.quantize(i / 20, i % 20, v as f64).0)
        .collect();
    assert_eq!(again, first.codes);
}
