use std::fs;
use std::io::BufReader;
use std::path::Path;

use mlab_core::bench::{estimate_cost, footnote_discrepancy_note, run_bench, FOOTNOTE_EXAMPLES, FOOTNOTE_KG_PER_KWH,
    FOOTNOTE_SEC_PER_EXAMPLE, FOOTNOTE_WATTS};
use mlab_core::eval::{evaluate, seed_average, EvalMode, EvalReport};
use mlab_core::minimetric::{pack_input, MiniMetricModel, ModelConfig, PackedInput, ParamSource};
use mlab_core::prune::{drop_layers, prune_weights, PruneReport, ScoreMethod, SparsityPattern};
use mlab_core::quantize::{quantize_model, AnyModel, QuantSpec, Scheme};
use mlab_core::rng::{derive_seed, rng};
use mlab_core::synthworld::{labeled_dataset, read_jsonl, write_jsonl, LabeledExample, Pair};
use mlab_core::train::{bitfit_finetune, distill, RefMode, TrainConfig, TrainLog};
use mlab_core::{Error, Result};
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{
    BenchArgs, Command, CostArgs, DatagenArgs, EvaluateArgs, Finetune, ModeArg, PruneArgs, PruneMethod, QuantMethod,
    QuantizeArgs, RefArg, TrainArgs, TrainCmd,
};
use crate::Preset;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Datagen(a) => datagen(a),
        Command::TrainTeacherMimic(a) => train_model("train-teacher-mimic", ModelConfig::teacher(), a),
        Command::Distill(a) => train_model("distill", ModelConfig::student(), a),
        Command::Quantize(a) => quantize(a),
        Command::Prune(a) => prune(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Bench(a) => bench(a),
        Command::EstimateCost(a) => cost(a),
    }
}

/// Reads a file, reporting a missing one as a caller error.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Input(format!("{}: no such file", path.display())),
        _ => Error::Io(e),
    })
}

fn read_data(path: &Path) -> Result<Vec<LabeledExample>> {
    let bytes = read_bytes(path)?;
    let data = read_jsonl(BufReader::new(bytes.as_slice()))?;
    if data.is_empty() {
        return Err(Error::Input(format!("{}: no examples", path.display())));
    }
    Ok(data)
}

fn read_model(path: &Path) -> Result<AnyModel> {
    AnyModel::from_bytes(&read_bytes(path)?)
}

fn read_float(path: &Path) -> Result<MiniMetricModel> {
    match read_model(path)? {
        AnyModel::Float(m) => Ok(m),
        AnyModel::Quantized(_) => Err(Error::config(format!("{} is already quantized", path.display()))),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `n` examples picked by a seeded shuffle, packed with their references.
fn calibration(path: &Path, n: usize, seed: u64, cfg: &ModelConfig) -> Result<Vec<PackedInput>> {
    if n == 0 {
        return Err(Error::config("calibration size must be positive"));
    }
    let data = read_data(path)?;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng(derive_seed(seed, 0xca1)));
    idx.truncate(n);
    idx.iter()
        .map(|&i| {
            let ex = &data[i];
            pack_input(&ex.src, &ex.mt, Some(&ex.reference), cfg)
        })
        .collect()
}

fn datagen(a: DatagenArgs) -> Result<()> {
    if a.pairs == 0 || a.pairs > Pair::ALL.len() {
        return Err(Error::config(format!("--pairs must be 1..={}", Pair::ALL.len())));
    }
    if a.min_len == 0 || a.min_len > a.max_len {
        return Err(Error::config("need 1 <= --min-len <= --max-len"));
    }
    let pairs = &Pair::ALL[..a.pairs];
    let data = labeled_dataset(pairs, a.size, a.min_len..=a.max_len, 0..=a.max_ops, a.seed)?;
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &data)?;
    fs::write(&a.out, buf)?;
    log::info!("wrote {} examples to {}", data.len(), a.out.display());
    RunManifest::new(
        "datagen",
        json!({ "pairs": pairs, "size": a.size, "lengths": [a.min_len, a.max_len], "max_ops": a.max_ops }),
        Some(a.seed),
    )
    .write_for(&a.out)
}

fn train_config(t: &TrainArgs, seed: u64) -> TrainConfig {
    let base = match t.preset {
        Preset::Desk => TrainConfig::distill_desk(),
        Preset::Published => TrainConfig::distill_published(),
    };
    TrainConfig {
        lr_encoder: t.lr_encoder.unwrap_or(base.lr_encoder),
        lr_head: t.lr_head.unwrap_or(base.lr_head),
        batch_size: t.batch_size.unwrap_or(base.batch_size),
        epochs: t.epochs.unwrap_or(base.epochs),
        warmup_frac: t.warmup.unwrap_or(base.warmup_frac),
        lambda: t.lambda.unwrap_or(base.lambda),
        reference: match t.reference {
            Some(RefArg::With) => RefMode::With,
            Some(RefArg::Without) => RefMode::Without,
            Some(RefArg::Mixed) => RefMode::Mixed,
            None => base.reference,
        },
        workers: t.workers,
        seed,
        ..base
    }
}

fn write_log(path: Option<&Path>, log: &TrainLog) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, log.to_jsonl()?)?;
    }
    Ok(())
}

fn train_model(name: &str, arch: ModelConfig, a: TrainCmd) -> Result<()> {
    let cfg = train_config(&a.train, a.seed);
    cfg.validate()?;
    let data = read_data(&a.data)?;
    let (model, log) = distill(&arch, &data, &cfg)?;
    log::info!("final epoch losses {:?}", log.epoch_losses());
    fs::write(&a.out, model.to_bytes()?)?;
    write_log(a.log.as_deref(), &log)?;
    RunManifest::new(name, json!({ "model": model.config(), "train": cfg }), Some(a.seed))
        .input(&a.data)?
        .write_for(&a.out)
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let model = read_float(&a.model)?;
    let scheme = match a.method {
        QuantMethod::Affine => Scheme::Affine,
        QuantMethod::Absmax8 => Scheme::Absmax8,
        QuantMethod::Nf4 => Scheme::Nf4,
        QuantMethod::Gptq => Scheme::Gptq,
    };
    let spec = QuantSpec {
        group_size: a.group_size,
        ..QuantSpec::new(scheme, a.bits)
    };
    let calib = match (&a.calib, spec.needs_calibration()) {
        (Some(p), _) => Some(calibration(p, a.calib_size, a.seed, model.config())?),
        (None, true) => return Err(Error::config(format!("--method {} needs --calib", scheme.label()))),
        (None, false) => None,
    };
    let q = quantize_model(&model, &spec, calib.as_deref())?;
    let bytes = q.to_bytes()?;
    log::info!("{} bytes (float {})", bytes.len(), model.to_bytes()?.len());
    fs::write(&a.out, bytes)?;
    RunManifest::new("quantize", json!({ "spec": spec, "calib_size": a.calib_size }), Some(a.seed))
        .input(&a.model)?
        .maybe_input(a.calib.as_deref())?
        .write_for(&a.out)
}

fn prune(a: PruneArgs) -> Result<()> {
    let model = read_float(&a.model)?;
    let (pruned, mut report) = match a.method {
        PruneMethod::Layers => {
            let (m, d) = drop_layers(&model, a.n)?;
            let report = PruneReport {
                method: None,
                pattern: None,
                layers: Vec::new(),
                retained_layers: d.retained_layers,
                pooling_remap: d.pooling_remap,
                degenerate_norms: false,
            };
            (m, report)
        }
        PruneMethod::Magnitude | PruneMethod::Wanda => {
            let pattern: SparsityPattern = a.pattern.parse()?;
            let method = if matches!(a.method, PruneMethod::Wanda) { ScoreMethod::Wanda } else { ScoreMethod::Magnitude };
            let calib = match (&a.calib, method) {
                (Some(p), ScoreMethod::Wanda) => Some(calibration(p, a.calib_size, a.seed, model.config())?),
                (None, ScoreMethod::Wanda) => return Err(Error::config("--method wanda needs --calib")),
                _ => None,
            };
            prune_weights(&model, method, pattern, calib.as_deref())?
        }
    };
    let mut out = pruned;
    let mut finetune_cfg = None;
    if let Some(Finetune::Bitfit) = a.finetune {
        let data_path = a.data.as_deref().ok_or_else(|| Error::config("--finetune needs --data"))?;
        let data = read_data(data_path)?;
        let cfg = TrainConfig {
            epochs: a.epochs,
            seed: a.seed,
            workers: a.workers,
            ..TrainConfig::finetune()
        };
        let (tuned, log) = bitfit_finetune(&out, &data, &cfg)?;
        // A sparse model keeps its zeros: BitFit never touches weight matrices.
        log::info!("fine-tune losses {:?}", log.epoch_losses());
        out = tuned;
        finetune_cfg = Some(cfg);
    }
    if let Some(p) = &a.report {
        report.layers.retain(|l| l.zero_fraction.is_finite());
        write_json(p, &report)?;
    }
    fs::write(&a.out, out.to_bytes()?)?;
    RunManifest::new(
        "prune",
        json!({ "method": format!("{:?}", a.method).to_lowercase(), "pattern": a.pattern, "n": a.n,
                "calib_size": a.calib_size, "finetune": finetune_cfg }),
        Some(a.seed),
    )
    .input(&a.model)?
    .maybe_input(a.calib.as_deref())?
    .maybe_input(a.data.as_deref())?
    .write_for(&a.out)
}

#[derive(Serialize)]
struct EvaluationFile {
    report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<EvalReport>,
    /// Baseline average τ minus this model's.
    #[serde(skip_serializing_if = "Option::is_none")]
    degradation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prune: Option<PruneReport>,
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    if !a.combine.is_empty() {
        let reports = a
            .combine
            .iter()
            .map(|p| {
                let v: serde_json::Value = serde_json::from_slice(&read_bytes(p)?)?;
                // Accept both bare reports and evaluation files.
                let inner = v.get("report").cloned().unwrap_or(v);
                serde_json::from_value::<EvalReport>(inner)
                    .map_err(|e| Error::Input(format!("{}: {e}", p.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        let avg = seed_average(&reports)?;
        write_json(&a.out, &avg)?;
        let mut m = RunManifest::new("evaluate", json!({ "combine": a.combine }), None);
        for p in &a.combine {
            m = m.input(p)?;
        }
        return m.write_for(&a.out);
    }
    let (model_path, data_path) = match (&a.model, &a.data) {
        (Some(m), Some(d)) => (m, d),
        _ => return Err(Error::config("--model and --data are required")),
    };
    let mode = match a.mode {
        ModeArg::WithReference => EvalMode::WithReference,
        ModeArg::ReferenceFree => EvalMode::ReferenceFree,
    };
    let data = read_data(data_path)?;
    let seeds: Vec<u64> = a.seed.into_iter().collect();
    let model = read_model(model_path)?;
    let report = evaluate(&model, &data, mode, seeds.clone())?;
    let baseline = a
        .baseline
        .as_deref()
        .map(|p| evaluate(&read_model(p)?, &data, mode, seeds.clone()))
        .transpose()?;
    let prune = a
        .prune_report
        .as_deref()
        .map(|p| -> Result<PruneReport> { Ok(serde_json::from_slice(&read_bytes(p)?)?) })
        .transpose()?;
    let file = EvaluationFile {
        degradation: baseline.as_ref().map(|b| b.average_tau - report.average_tau),
        report,
        baseline,
        prune,
    };
    write_json(&a.out, &file)?;
    RunManifest::new("evaluate", json!({ "mode": mode, "params": model.layout().len() }), a.seed)
        .input(model_path)?
        .input(data_path)?
        .maybe_input(a.baseline.as_deref())?
        .maybe_input(a.prune_report.as_deref())?
        .write_for(&a.out)
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let data = read_data(&a.data)?;
    let sets: Vec<(Pair, Vec<PackedInput>)> = Pair::ALL
        .iter()
        .filter_map(|&p| {
            let inputs: Result<Vec<PackedInput>> = data
                .iter()
                .filter(|e| e.pair == p)
                .map(|e| pack_input(&e.src, &e.mt, Some(&e.reference), model.config()))
                .collect();
            match inputs {
                Ok(v) if v.is_empty() => None,
                r => Some(r.map(|v| (p, v))),
            }
        })
        .collect::<Result<_>>()?;
    let cap = a.memory_cap_mb.map(|mb| mb.saturating_mul(1 << 20));
    let report = run_bench(&model, &sets, a.batch, cap, a.ceiling)?;
    write_json(&a.out, &report)?;
    RunManifest::new(
        "bench",
        json!({ "batch": a.batch, "memory_cap_mb": a.memory_cap_mb, "ceiling": a.ceiling }),
        None,
    )
    .input(&a.model)?
    .input(&a.data)?
    .write_for(&a.out)
}

fn cost(a: CostArgs) -> Result<()> {
    let c = estimate_cost(a.examples, a.sec_per_example, a.watts, a.carbon_intensity)?;
    let footnote = (a.examples, a.sec_per_example, a.watts, a.carbon_intensity)
        == (FOOTNOTE_EXAMPLES, FOOTNOTE_SEC_PER_EXAMPLE, FOOTNOTE_WATTS, FOOTNOTE_KG_PER_KWH);
    let note = footnote.then(|| footnote_discrepancy_note(&c));
    let doc = json!({ "hours": c.hours, "kwh": c.kwh, "kg_co2": c.kg_co2, "note": note });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    if let Some(n) = &note {
        eprintln!("note: {n}");
    }
    if let Some(p) = &a.out {
        write_json(p, &doc)?;
        RunManifest::new(
            "estimate-cost",
            json!({ "examples": a.examples, "sec_per_example": a.sec_per_example, "watts": a.watts,
                    "carbon_intensity": a.carbon_intensity }),
            None,
        )
        .write_for(p)?;
    }
    Ok(())
}
