use std::fs;
use std::io::BufWriter;
use std::path::Path;

use gatedvlad::datagen::{generate, read_dataset_file, split, write_dataset_file, Dataset, SyntheticDatasetConfig};
use gatedvlad::ensemble::{
    budget_check, build_ensemble, ensemble_records, evaluate_ensemble, tune_coefficients, EnsembleManifest, EnsembleModel,
    EnsembleSpec, MemberSpec,
};
use gatedvlad::error::Error;
use gatedvlad::metrics::{write_predictions_csv, PredictionRecord};
use gatedvlad::model::{ModelConfig, ModelWeights};
use gatedvlad::sizing::{
    calibrate_size_model, enumerate_tensors, float16_compress, quantization_rate, sparse_compression_rate, table1,
    AccountingFlags, Selection, SizeModelConfig, SizeReport, SparseScheme,
};
use gatedvlad::training::{average_checkpoints, evaluate, predict_records, train, write_run, Checkpoint, TrainConfig};
use serde_json::{json, Value};

use crate::args::*;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("ensemble needs {total} bytes, over the budget of {budget}")]
    OverBudget { total: u64, budget: u64 },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::OverBudget { .. } => 2,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<Value> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Split(a) => split_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::AverageCheckpoints(a) => average(a),
        Command::Eval(a) => eval(a),
        Command::Compress(a) => compress(a),
        Command::SizeReport(a) => size_report(a),
        Command::CalibrateSizes(a) => calibrate(a),
        Command::AnalyzeSparsity(a) => sparsity(a),
        Command::AnalyzeQuantization(a) => quantization(a),
        Command::BuildEnsemble(a) => build(a),
        Command::TuneEnsemble(a) => tune(a),
        Command::BudgetCheck(a) => budget(a),
        Command::Predict(a) => predict(a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<Value> {
    let cfg = SyntheticDatasetConfig {
        num_videos: a.videos,
        num_classes: a.classes,
        d_video: a.d_video,
        d_audio: a.d_audio,
        max_frames: a.max_frames,
        mean_labels_per_video: a.mean_labels,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let ds = generate(&cfg)?;
    write_dataset_file(&ds, &a.out)?;
    Ok(json!({ "out": a.out, "videos": ds.len(), "classes": ds.num_classes, "seed": a.seed }))
}

fn split_cmd(a: SplitArgs) -> Result<Value> {
    let ds = read_dataset_file(&a.input)?;
    let (tr, va) = split(&ds, a.fraction, a.seed)?;
    write_dataset_file(&tr, &a.train_out)?;
    write_dataset_file(&va, &a.validate_out)?;
    Ok(json!({ "train_videos": tr.len(), "validate_videos": va.len(), "seed": a.seed }))
}

fn train_cmd(a: TrainArgs) -> Result<Value> {
    let ds = read_dataset_file(&a.data)?;
    let mut cfg = ModelConfig::new(a.k, a.h, ds.num_classes, ds.d_video, ds.d_audio);
    if let Some(ka) = a.k_audio {
        cfg.k_audio = ka;
    }
    cfg.num_experts = a.experts;
    cfg.use_dummy_expert = !a.no_dummy_expert;
    let tc = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        total_steps: a.steps,
        checkpoint_interval: a.checkpoint_interval,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let run = train(&cfg, &tc, &ds)?;
    let paths = write_run(&a.out_dir, &run, &tc)?;
    println!("wrote {} checkpoints to {}", paths.len(), a.out_dir.display());
    Ok(json!({
        "out_dir": a.out_dir,
        "checkpoints": paths,
        "final_loss": run.losses.last().map(|l| l.1),
        "steps": a.steps,
        "seed": a.seed,
    }))
}

fn average(a: AverageArgs) -> Result<Value> {
    let cks = a.checkpoints.iter().map(Checkpoint::load).collect::<gatedvlad::error::Result<Vec<_>>>()?;
    let avg = average_checkpoints(&cks)?;
    avg.save(&a.out)?;
    Ok(json!({ "out": a.out, "averaged": cks.len(), "steps": cks.iter().map(|c| c.step).collect::<Vec<_>>() }))
}

enum Source {
    Single(Checkpoint),
    Ensemble(EnsembleModel),
}

fn load_source(s: &ModelSource) -> Result<Source> {
    match (&s.checkpoint, &s.manifest) {
        (Some(p), None) => Ok(Source::Single(Checkpoint::load(p)?)),
        (None, Some(p)) => Ok(Source::Ensemble(EnsembleManifest::load(p)?.build()?)),
        _ => Err(CliError::Usage("pass exactly one of --checkpoint and --manifest".into())),
    }
}

fn records(source: &Source, ds: &Dataset, k: usize) -> Result<Vec<PredictionRecord>> {
    Ok(match source {
        Source::Single(c) => predict_records(&c.config, &c.weights.params::<f32>(&c.config)?, ds, k)?,
        Source::Ensemble(m) => ensemble_records(m, ds, k)?,
    })
}

fn eval(a: EvalArgs) -> Result<Value> {
    let ds = read_dataset_file(&a.data)?;
    let g = match load_source(&a.source)? {
        Source::Single(c) => evaluate(&c.config, &c.weights, &ds, a.top_k)?,
        Source::Ensemble(m) => evaluate_ensemble(&m, &ds, a.top_k)?,
    };
    println!("GAP@{} = {:.6} over {} videos", a.top_k, g.gap, ds.len());
    Ok(json!({ "gap": g.gap, "top_k": a.top_k, "videos": ds.len(), "pooled": g.pooled_count, "positives": g.total_positives }))
}

fn predict(a: PredictArgs) -> Result<Value> {
    let ds = read_dataset_file(&a.data)?;
    let recs = records(&load_source(&a.source)?, &ds, a.top_k)?;
    let f = fs::File::create(&a.out).map_err(Error::from)?;
    write_predictions_csv(&recs, BufWriter::new(f))?;
    Ok(json!({ "out": a.out, "videos": ds.len(), "records": recs.len() }))
}

fn compress(a: CompressArgs) -> Result<Value> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let selection = match (a.top, a.tensors.is_empty()) {
        (Some(n), _) => Selection::TopBySize(n),
        (None, false) => Selection::Names(a.tensors),
        (None, true) => Selection::default(),
    };
    let (bundle, report) = float16_compress(ck.weights.bundle(), &selection, a.strict)?;
    let out = Checkpoint::new(ck.step, ck.config.clone(), ModelWeights::from_bundle(&ck.config, bundle)?);
    out.save(&a.out)?;
    println!(
        "{:.6} MB -> {:.6} MB (rate {:.4}), {} tensors cast, {} overflowed",
        report.original_mb,
        report.compressed_mb,
        report.rate,
        report.cast_tensor_names.len(),
        report.overflow_count
    );
    Ok(serde_json::to_value(&report).map_err(Error::from)?)
}

fn size_report(a: SizeReportArgs) -> Result<Value> {
    let mut target = None;
    let report: SizeReport = if let Some(p) = &a.checkpoint {
        SizeReport::from_bundle(Checkpoint::load(p)?.weights.bundle())
    } else {
        let (k, h) = (a.k.unwrap_or_default(), a.h.unwrap_or_default());
        let (model, mut flags) = if a.paper_scale {
            let rows = table1();
            target = rows.iter().find(|r| r.k == k && r.h == h).map(|r| (r.code.clone(), r.f32_mb));
            (ModelConfig::paper_scale(k, h), calibrate_size_model(&rows)?.flags)
        } else {
            (ModelConfig::new(k, h, a.vocab, a.d_video, a.d_audio), AccountingFlags::default())
        };
        if let Some(r) = a.audio_ratio {
            flags.audio_cluster_ratio = r;
        }
        if let Some(d) = a.dummy_expert {
            flags.use_dummy_expert = d;
        }
        if let Some(g) = a.hidden_gate {
            flags.include_hidden_gate = g;
        }
        if let Some(w) = a.expert_width {
            flags.expert_hidden_width = w;
        }
        enumerate_tensors(&SizeModelConfig::new(model, flags))
    };
    print!("{}", report.to_table());
    if let Some((code, mb)) = &target {
        println!("published size of {code}: {mb:.2} MB, relative error {:.4}", (report.total_mb - mb).abs() / mb);
    }
    if let Some(p) = &a.json_out {
        write_json(p, &report)?;
    }
    Ok(json!({
        "total_bytes": report.total_bytes,
        "total_mb": report.total_mb,
        "half_mb": report.half_compressed_mb(),
        "compression_rate": report.half_compression_rate(),
        "big4_share": report.big4_share,
        "target": target.map(|(code, mb)| json!({ "code": code, "f32_mb": mb })),
    }))
}

fn calibrate(a: CalibrateArgs) -> Result<Value> {
    let cal = calibrate_size_model(&table1())?;
    println!("{:<6} {:>6} {:>6} {:>10} {:>10} {:>8} {:>8} {:>8}", "code", "k", "h", "target", "predicted", "error", "rate", "big4");
    for r in &cal.rows {
        println!(
            "{:<6} {:>6} {:>6} {:>10.2} {:>10.2} {:>8.4} {:>8.4} {:>8.4}",
            r.code, r.k, r.h, r.target_f32_mb, r.predicted_f32_mb, r.relative_error, r.predicted_rate, r.big4_share
        );
    }
    if let Some(p) = &a.out {
        let text = serde_json::to_string_pretty(&cal).map_err(Error::from)?;
        fs::write(p, text + "\n").map_err(Error::from)?;
    }
    Ok(json!({
        "flags": cal.flags,
        "mare": cal.mare,
        "mean_predicted_rate": cal.mean_predicted_rate(),
        "candidates": cal.candidates.len(),
        "out": a.out,
    }))
}

fn sparsity(a: SparsityArgs) -> Result<Value> {
    let scheme = match a.scheme {
        SchemeKind::Coordinate => SparseScheme::Coordinate { index_bits: a.index_bits, indices_per_nonzero: a.indices_per_nonzero },
        SchemeKind::Bitmask => SparseScheme::Bitmask { bits_per_flag: a.bits_per_flag },
    };
    if !(0.0..=1.0).contains(&a.sparsity) {
        return Err(Error::Validation(format!("sparsity must lie in [0, 1], got {}", a.sparsity)).into());
    }
    let rate = sparse_compression_rate(a.params, a.sparsity, a.value_bits, scheme);
    println!("compression rate {rate}");
    Ok(json!({ "rate": rate, "scheme": scheme, "params": a.params, "sparsity": a.sparsity }))
}

fn quantization(a: QuantizationArgs) -> Result<Value> {
    let rate = quantization_rate(a.from, a.to)?;
    println!("compression rate {rate}");
    Ok(json!({ "rate": rate, "from_bits": a.from, "to_bits": a.to }))
}

fn parse_member(s: &str) -> Result<MemberSpec> {
    let (path, coeff) = s
        .rsplit_once(':')
        .ok_or_else(|| CliError::Usage(format!("member `{s}` must look like PATH:COEFFICIENT")))?;
    let coefficient = coeff.parse().map_err(|_| CliError::Usage(format!("bad coefficient `{coeff}` in `{s}`")))?;
    Ok(MemberSpec { path: path.into(), coefficient })
}

fn ensemble_summary(model: &EnsembleModel) -> Value {
    json!({
        "members": model.members.len(),
        "coefficients": model.coefficients(),
        "total_bytes": model.total_bytes,
        "budget_bytes": model.budget_bytes,
    })
}

fn build(a: BuildEnsembleArgs) -> Result<Value> {
    let mut spec = EnsembleSpec::new(a.members.iter().map(|m| parse_member(m)).collect::<Result<_>>()?);
    if let Some(b) = a.budget_bytes {
        spec.budget_bytes = b;
    }
    spec.allow_unnormalized = a.allow_unnormalized;
    let model = build_ensemble(&spec)?;
    EnsembleManifest::from_model(&model)?.save(&a.out)?;
    let mut out = ensemble_summary(&model);
    out["out"] = json!(a.out);
    Ok(out)
}

fn tune(a: TuneEnsembleArgs) -> Result<Value> {
    let n = a.members.len() as f64;
    let mut spec = EnsembleSpec::new(a.members.iter().map(|p| MemberSpec { path: p.clone(), coefficient: 1.0 / n }).collect());
    if let Some(b) = a.budget_bytes {
        spec.budget_bytes = b;
    }
    let mut model = build_ensemble(&spec)?;
    let ds = read_dataset_file(&a.data)?;
    let tuned = tune_coefficients(&model, &ds, a.step, a.top_k)?;
    model.set_coefficients(&tuned.coefficients)?;
    println!("best coefficients {:?}, GAP@{} = {:.6} over {} lattice points", tuned.coefficients, a.top_k, tuned.gap.gap, tuned.lattice_points);
    if let Some(p) = &a.out {
        EnsembleManifest::from_model(&model)?.save(p)?;
    }
    let mut out = ensemble_summary(&model);
    out["gap"] = json!(tuned.gap.gap);
    out["lattice_points"] = json!(tuned.lattice_points);
    out["out"] = json!(a.out);
    Ok(out)
}

fn budget(a: BudgetCheckArgs) -> Result<Value> {
    let mut manifest = EnsembleManifest::load(&a.manifest)?;
    if let Some(b) = a.budget_bytes {
        manifest.budget_bytes = b;
    }
    let verdict = budget_check(&manifest.build()?);
    println!(
        "{}: {} bytes of {} ({} headroom)",
        if verdict.pass { "within budget" } else { "over budget" },
        verdict.total_bytes,
        verdict.budget_bytes,
        verdict.headroom_bytes
    );
    if !verdict.pass {
        return Err(CliError::OverBudget { total: verdict.total_bytes, budget: verdict.budget_bytes });
    }
    Ok(serde_json::to_value(verdict).map_err(Error::from)?)
}
