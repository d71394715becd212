use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use cirsnn::config::{load_config, RunConfig};
use cirsnn::corpus::{load_samples, save_samples, split_samples, TEST_SUBJECTS};
use cirsnn::data_io::{read_cir, read_manifest, synth_generate, write_cir, write_manifest, ManifestEntry};
use cirsnn::metrics::{count_synaptic_ops, mean_std, sparsity, spike_rate, time_inference, ModelTrace, SynapticOps};
use cirsnn::parallel;
use cirsnn::pipeline::{stack, Method, Model, ModelSpec};
use cirsnn::preprocess::{build_samples, Sample};
use cirsnn::training::{evaluate, fit, TrainReport};
use cirsnn::{Error, Result, Tensor};

#[derive(Parser, Debug)]
#[command(name = "cirsnn", version, about = "Spike-encoded CIR activity recognition")]
struct Cli {
    /// key = value run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the corpus and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic CIR corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Recordings per class, spread over the configured subjects.
        #[arg(long)]
        count: usize,
    },
    /// Turn a corpus manifest into (2, N, R, W) samples plus an index.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method on a sample index and write a checkpoint.
    Train {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Independent initialisations; F1 is reported as mean and std.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Report path (default: stdout).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate checkpoints into a per-method table and a timestep sweep.
    Benchmark {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Timestep sweep CSV.
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,13,21,29,37")]
        timesteps: Vec<usize>,
        /// Per-sample counts and decoded labels.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Repeats per latency measurement.
        #[arg(long, default_value_t = 10)]
        timing_repeats: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 1,
        Error::Dimension { .. } | Error::Format { .. } | Error::Io(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let jobs = cli.jobs.unwrap_or(0);
    match parallel::with_jobs(jobs, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.corpus.synth.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_run_config(cli)?;
    match &cli.command {
        Command::Synth { out, count } => cmd_synth(&cfg, out, *count),
        Command::Preprocess { manifest, out } => cmd_preprocess(&cfg, manifest, out),
        Command::Train { samples, method, out, repeat, report } => {
            cmd_train(&cfg, samples, *method, out, *repeat, report.as_deref())
        }
        Command::Benchmark { checkpoints, samples, out, sweep, timesteps, predictions, timing_repeats } => cmd_benchmark(
            checkpoints,
            samples,
            out,
            sweep.as_deref(),
            timesteps,
            predictions.as_deref(),
            *timing_repeats,
        ),
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::config(e.to_string()))?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path, count: usize) -> Result<()> {
    let c = &cfg.corpus;
    c.synth.validate()?;
    if c.subjects == 0 {
        return Err(Error::config("synth.subjects must be positive"));
    }
    std::fs::create_dir_all(out)?;
    let jobs: Vec<(usize, usize)> = (0..c.synth.classes.len()).flat_map(|k| (0..count).map(move |i| (k, i))).collect();
    let entries = parallel::map_slice(&jobs, |&(class, i)| {
        let subject = (i % c.subjects as usize) as u8 + 1;
        let rec = synth_generate(&c.synth, class, subject, (i / c.subjects as usize) as u64)?;
        let name = format!("rec_c{class}_s{subject}_{i:04}.cir");
        write_cir(&out.join(&name), &rec)?;
        Ok(ManifestEntry { path: PathBuf::from(name), label: rec.label, subject, packets: rec.packets })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    log::info!("wrote {} recordings and {}", entries.len(), manifest.display());
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let params = cfg.corpus.preprocess;
    params.validate()?;
    let entries = read_manifest(manifest)?;
    let per = parallel::map_slice(&entries, |e| -> Result<Vec<Sample>> {
        let rec = read_cir(&e.path)?;
        if rec.label != e.label || rec.subject != e.subject || rec.packets != e.packets {
            return Err(Error::format(
                0,
                format!("{}: header disagrees with manifest (label/subject/K)", e.path.display()),
            ));
        }
        build_samples(&rec, &params, 0)
    });
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (i, (p, e)) in per.into_iter().zip(&entries).enumerate() {
        let mut s = p?;
        if s.is_empty() {
            skipped += 1;
            log::warn!("{}: {} packets yield no samples", e.path.display(), e.packets);
        }
        for x in &mut s {
            x.recording = i;
        }
        samples.extend(s);
    }
    let index = save_samples(out, &samples)?;
    log::info!("{} samples of shape {:?} indexed in {}", samples.len(), params.sample_shape(), index.display());
    write_json(
        None,
        &serde_json::json!({
            "recordings": entries.len(),
            "skipped_recordings": skipped,
            "samples": samples.len(),
            "sample_shape": params.sample_shape(),
            "index": index,
        }),
    )
}

struct Splits {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

fn load_splits(index: &Path, classes: usize) -> Result<Splits> {
    let samples = load_samples(index)?;
    if samples.is_empty() {
        return Err(Error::format(0, format!("{} lists no samples", index.display())));
    }
    let s = split_samples(samples, classes)?;
    Ok(Splits { train: s.train, val: s.val, test: s.test })
}

fn model_spec(cfg: &RunConfig, method: Method, shape: [usize; 4], seed: u64) -> ModelSpec {
    ModelSpec {
        method,
        sample_shape: shape,
        encoder: cfg.encoder.clone(),
        classifier: cfg.classifier.clone(),
        direct: cfg.direct_spec(method == Method::DirectConv),
        seed,
    }
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    test_f1: Option<f64>,
    report: TrainReport,
}

#[derive(Serialize)]
struct TrainOutput {
    method: Method,
    checkpoint: PathBuf,
    f1_mean: Option<f64>,
    f1_std: Option<f64>,
    runs: Vec<RunSummary>,
}

fn cmd_train(cfg: &RunConfig, index: &Path, method: Method, out: &Path, repeat: usize, report: Option<&Path>) -> Result<()> {
    let mut problems = cfg.train.problems();
    if let Err(e) = cfg.classifier.validate() {
        problems.push(e.to_string());
    }
    if let Err(e) = cfg.direct_spec(method == Method::DirectConv).validate() {
        problems.push(e.to_string());
    }
    if cfg.train.class_weights.len() != cfg.classifier.classes {
        problems.push(format!(
            "{} class weights for {} classes",
            cfg.train.class_weights.len(),
            cfg.classifier.classes
        ));
    }
    if repeat == 0 {
        problems.push("--repeat must be at least 1".into());
    }
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    let splits = load_splits(index, cfg.classifier.classes)?;
    let shape: [usize; 4] = splits
        .train
        .first()
        .map(|s| s.data.shape().try_into())
        .ok_or_else(|| Error::contract("no training samples for the training subjects"))?
        .map_err(|_| Error::dim("train", "samples must have rank 4"))?;
    let mut runs = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    for r in 0..repeat as u64 {
        let seed = cfg.train.seed + r;
        let mut model = Model::new(model_spec(cfg, method, shape, seed))?;
        let tc = cirsnn::training::TrainConfig { seed, ..cfg.train.clone() };
        let rep = fit(&mut model, &splits.train, &splits.val, &tc)?;
        let test_f1 = if splits.test.is_empty() {
            None
        } else {
            Some(evaluate(&model, &splits.test, tc.batch_size, model.timesteps())?.macro_f1)
        };
        log::info!("{method} seed {seed}: best val F1 {:.4}, test F1 {test_f1:?}", rep.best_val_f1);
        if best.as_ref().map_or(true, |(f, _)| rep.best_val_f1 > *f) {
            best = Some((rep.best_val_f1, model));
        }
        runs.push(RunSummary { seed, test_f1, report: rep });
    }
    if let Some((_, m)) = &best {
        m.save(out)?;
    }
    let f1s: Vec<f64> = runs.iter().filter_map(|r| r.test_f1).collect();
    let (mean, std) = if f1s.is_empty() { (None, None) } else { let (m, s) = mean_std(&f1s); (Some(m), Some(s)) };
    write_json(report, &TrainOutput { method, checkpoint: out.to_path_buf(), f1_mean: mean, f1_std: std, runs })
}

struct MethodRow {
    method: Method,
    f1: Vec<f64>,
    params: usize,
    enc_ms: Vec<f64>,
    cls_ms: Vec<f64>,
    trace: ModelTrace,
    zeros: f64,
    elements: f64,
}

fn cmd_benchmark(
    checkpoints: &[PathBuf],
    index: &Path,
    out: &Path,
    sweep: Option<&Path>,
    timesteps: &[usize],
    predictions: Option<&Path>,
    timing_repeats: usize,
) -> Result<()> {
    let all = load_samples(index)?;
    let test: Vec<Sample> = {
        let t: Vec<Sample> = all.iter().filter(|s| TEST_SUBJECTS.contains(&s.subject)).cloned().collect();
        if t.is_empty() {
            log::warn!("no test-subject samples in {}; benchmarking on all samples", index.display());
            all
        } else {
            t
        }
    };
    if test.is_empty() {
        return Err(Error::format(0, format!("{} lists no samples", index.display())));
    }
    let mut rows: Vec<MethodRow> = Vec::new();
    let mut sweep_csv = String::from("method,checkpoint,timesteps,cls_ms,f1\n");
    let mut pred_csv = String::new();
    for ckpt in checkpoints {
        let model = Model::load(ckpt)?;
        let shape = model.spec.sample_shape;
        if test[0].data.shape() != shape {
            return Err(Error::dim(
                "benchmark",
                format!("{} expects samples {:?}, index holds {:?}", ckpt.display(), shape, test[0].data.shape()),
            ));
        }
        let t = model.timesteps();
        let mut trace = ModelTrace::default();
        let (mut zeros, mut elements) = (0.0, 0.0);
        let mut predicted = Vec::new();
        let mut counts = Vec::new();
        for chunk in test.chunks(8) {
            let refs: Vec<&Tensor> = chunk.iter().map(|s| &s.data).collect();
            let p = model.predict(&stack(&refs)?, t)?;
            trace.merge(p.trace);
            if let Some(e) = &p.encoding {
                zeros += sparsity(e) * e.len() as f64;
                elements += e.len() as f64;
            }
            predicted.extend(p.labels);
            counts.extend(p.counts);
        }
        let truths: Vec<usize> = test.iter().map(|s| s.label).collect();
        let f1 = cirsnn::metrics::macro_f1(&predicted, &truths, model.spec.classifier.classes)?;
        if pred_csv.is_empty() {
            let cols: Vec<String> = (0..model.spec.classifier.classes).map(|k| format!("count_{k}")).collect();
            pred_csv = format!("sample_id,method,{},predicted,true\n", cols.join(","));
        }
        for (i, ((c, p), y)) in counts.iter().zip(&predicted).zip(&truths).enumerate() {
            let cs: Vec<String> = c.iter().map(|v| format!("{v}")).collect();
            pred_csv.push_str(&format!("{i},{},{},{p},{y}\n", model.method(), cs.join(",")));
        }

        let one = stack(&[&test[0].data])?;
        let enc = model.encode(&one)?;
        let enc_ms = if enc.is_some() { time_inference(timing_repeats, || model.encode(&one)) } else { 0.0 };
        let cls_input = enc.unwrap_or_else(|| one.clone());
        let cls_ms = time_inference(timing_repeats, || model.classify(&cls_input, t));

        if sweep.is_some() {
            for &ts in timesteps {
                let ms = time_inference(timing_repeats, || model.classify(&cls_input, ts));
                let f = evaluate(&model, &test, 8, ts)?.macro_f1;
                sweep_csv.push_str(&format!("{},{},{ts},{ms:.4},{f:.6}\n", model.method(), ckpt.display()));
            }
        }
        let params = model.param_count().trainable;
        match rows.iter_mut().find(|r| r.method == model.method()) {
            Some(r) => {
                r.f1.push(f1);
                r.enc_ms.push(enc_ms);
                r.cls_ms.push(cls_ms);
                r.trace.merge(trace);
                r.zeros += zeros;
                r.elements += elements;
            }
            None => rows.push(MethodRow {
                method: model.method(),
                f1: vec![f1],
                params,
                enc_ms: vec![enc_ms],
                cls_ms: vec![cls_ms],
                trace,
                zeros,
                elements,
            }),
        }
    }
    let mut table = String::from("method,f1_mean,f1_std,params,enc_ms,cls_ms,spike_rate_pct,sparsity_pct\n");
    for r in &rows {
        let (f1_mean, f1_std) = mean_std(&r.f1);
        let rate = spike_rate(&r.trace).map(|v| format!("{v:.3}")).unwrap_or_default();
        let sp = if r.elements > 0.0 { format!("{:.3}", 100.0 * r.zeros / r.elements) } else { String::new() };
        let SynapticOps { acc_ops, mac_ops } = count_synaptic_ops(&r.trace);
        log::info!("{}: {acc_ops} ACC and {mac_ops} MAC operations on the test set", r.method);
        table.push_str(&format!(
            "{},{f1_mean:.6},{f1_std:.6},{},{:.4},{:.4},{rate},{sp}\n",
            r.method,
            r.params,
            mean_std(&r.enc_ms).0,
            mean_std(&r.cls_ms).0,
        ));
    }
    std::fs::write(out, table)?;
    if let Some(p) = sweep {
        std::fs::write(p, sweep_csv)?;
    }
    if let Some(p) = predictions {
        std::fs::write(p, pred_csv)?;
    }
    log::info!("benchmarked {} checkpoints on {} samples", checkpoints.len(), test.len());
    Ok(())
}
