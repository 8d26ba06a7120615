use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use performer_core::data::{assemble, read_dataset, synth_corpus, write_dataset, Dataset, Example, Split, SubjectRecord};
use performer_core::multimodal::{
    ablation_run, evaluate_classifier, train_classifier, variant_examples, InputVariant, MultimodalModel,
};
use performer_core::numerics::{mean_std, rmse};
use performer_core::preprocess::io::read_signal_csv;
use performer_core::preprocess::{preprocess, SignalWindow, WINDOW_LEN};
use performer_core::reconstructor::{model_gradcheck, train_reconstructor, write_attention_csv, ReconstructorModel};
use performer_core::{Error, Result};

use crate::config::RunConfig;
use crate::report::{ConfusionReport, EvalReport, RmseStats};

/// Worst tolerated relative error of `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-3;
const GRADCHECK_COORDS: usize = 16;
const GRADCHECK_STEP: f64 = 1e-4;

/// Flags shared by the commands; each command reads the ones it needs.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub out: Option<PathBuf>,
    pub fixed_patch: Option<usize>,
    pub model: Option<PathBuf>,
    pub recon: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub hz: Option<f64>,
    pub data: Option<PathBuf>,
    pub variant: Option<InputVariant>,
    pub window: usize,
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::Config(format!("missing required flag {flag}")))
}

fn out_dir(opts: &Options, cfg: &RunConfig) -> Result<PathBuf> {
    let out = required(&opts.out, "--out")?.to_path_buf();
    cfg.write_resolved(&out)?;
    Ok(out)
}

/// Raw subject records plus the assembled dataset described by `[data]`.
fn synth_records(cfg: &RunConfig) -> Result<(Vec<SubjectRecord>, Dataset)> {
    let labels = cfg.data.synth.n_classes.map(|_| cfg.task.labels.owned_names());
    let records = synth_corpus::<f32>(&cfg.data.synth, labels.as_deref())?;
    let dataset = assemble(&records, &cfg.data.split, cfg.data.synth.seed, &cfg.data.passbands())?;
    Ok((records, dataset))
}

fn load_dataset(cfg: &RunConfig, opts: &Options) -> Result<Dataset> {
    let hz = opts.hz.or(cfg.data.hz);
    match opts.data.as_ref().or(cfg.data.dir.as_ref()) {
        Some(dir) => read_dataset(dir, hz, &cfg.data.passbands()),
        None => Ok(synth_records(cfg)?.1),
    }
}

fn ppg_windows(path: &Path, hz: Option<f64>, cfg: &RunConfig) -> Result<Vec<SignalWindow>> {
    let file = read_signal_csv::<f32>(path, hz)?;
    let ppg = file
        .ppg
        .ok_or_else(|| Error::Input(format!("{}: no `ppg` column", path.display())))?;
    let windows = preprocess(&ppg, &cfg.data.passbands())?;
    if windows.is_empty() {
        return Err(Error::Input(format!("{}: shorter than one window", path.display())));
    }
    Ok(windows)
}

fn load_reconstructor(dir: &Path, cfg: &RunConfig, fixed_patch: Option<usize>) -> Result<ReconstructorModel> {
    let (model, _) = ReconstructorModel::load(dir, &cfg.stage_config(fixed_patch)?)?;
    Ok(model)
}

fn rmse_stats(model: &ReconstructorModel, examples: &[&Example]) -> Result<RmseStats> {
    let ppg: Vec<&[f32]> = examples.iter().map(|e| e.ppg.values()).collect();
    let hat = model.reconstruct_batch(&ppg)?;
    let errs = hat
        .iter()
        .zip(examples)
        .map(|(h, e)| {
            let h: Vec<f64> = h.iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = e.ecg.values().iter().map(|&v| v as f64).collect();
            rmse(&h, &y)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&errs);
    Ok(RmseStats {
        mean,
        std,
        windows: errs.len(),
    })
}

fn rmse_by_split(model: &ReconstructorModel, dataset: &Dataset) -> Result<BTreeMap<String, RmseStats>> {
    let mut out = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let ex: Vec<&Example> = dataset.split(split).collect();
        if !ex.is_empty() {
            out.insert(split.to_string(), rmse_stats(model, &ex)?);
        }
    }
    Ok(out)
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", i + 1));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Classifier inputs for `examples`, reconstructing ECG when the variant needs it.
fn clf_examples(
    cfg: &RunConfig,
    variant: InputVariant,
    examples: &[&Example],
    recon: Option<&ReconstructorModel>,
) -> Result<Vec<performer_core::multimodal::ClfExample>> {
    let hat = match (variant.needs_reconstruction(), recon) {
        (true, Some(r)) => {
            let ppg: Vec<&[f32]> = examples.iter().map(|e| e.ppg.values()).collect();
            Some(r.reconstruct_batch(&ppg)?)
        }
        _ => None,
    };
    variant_examples(variant, examples, hat.as_deref(), cfg.task.labels)
}

fn optional_recon(cfg: &RunConfig, opts: &Options, variant_needs: bool) -> Result<Option<ReconstructorModel>> {
    match (&opts.recon, variant_needs) {
        (Some(dir), true) => Ok(Some(load_reconstructor(dir, cfg, opts.fixed_patch)?)),
        (None, true) => Err(Error::Config("this input variant needs --recon <checkpoint>".into())),
        _ => Ok(None),
    }
}

fn model_dir(out: &Path) -> PathBuf {
    out.join("model")
}

/// Writes a synthetic corpus (signal CSVs plus `manifest.csv`) into `--out`.
pub fn synth(cfg: &RunConfig, opts: &Options) -> Result<EvalReport> {
    let out = out_dir(opts, cfg)?;
    let (records, dataset) = synth_records(cfg)?;
    write_dataset(&out.join("data"), &records, &dataset)?;
    log::info!("wrote {} subjects, {} windows", records.len(), dataset.len());
    Ok(EvalReport::new("synth", cfg.hash(), cfg.data.synth.seed))
}

pub fn train_recon(cfg: &RunConfig, opts: &Options) -> Result<EvalReport> {
    let out = out_dir(opts, cfg)?;
    let dataset = load_dataset(cfg, opts)?;
    let schedule = cfg.train.schedule();
    let mut model = ReconstructorModel::new(cfg.stage_config(opts.fixed_patch)?, schedule.seed)?;
    let pairs = dataset.pairs(Split::Train);
    log::info!(
        "training reconstructor: {} parameters, {} training windows",
        model.params().numel(),
        pairs.len()
    );
    let train = train_reconstructor(&mut model, &pairs, &schedule)?;
    model.save(&model_dir(&out), schedule.seed)?;
    write_loss_csv(&out.join("loss.csv"), &train.epoch_losses)?;
    let mut report = EvalReport::new("train-recon", cfg.hash(), schedule.seed);
    report.model_hash = Some(model.config().hash());
    report.epoch_losses = train.epoch_losses;
    report.rmse = rmse_by_split(&model, &dataset)?;
    Ok(report)
}

pub fn train_clf(cfg: &RunConfig, opts: &Options) -> Result<EvalReport> {
    let out = out_dir(opts, cfg)?;
    let variant = opts.variant.unwrap_or(cfg.task.variant);
    let recon = optional_recon(cfg, opts, variant.needs_reconstruction())?;
    let dataset = load_dataset(cfg, opts)?;
    let schedule = cfg.train.schedule();
    let train: Vec<&Example> = dataset.split(Split::Train).collect();
    let examples = clf_examples(cfg, variant, &train, recon.as_ref())?;
    let mut model = MultimodalModel::new(cfg.task.classifier_for(variant), cfg.task.labels, schedule.seed)?;
    let result = train_classifier(&mut model, &examples, &schedule, &cfg.train.clf_options())?;
    model.save(&model_dir(&out), schedule.seed)?;
    write_loss_csv(&out.join("loss.csv"), &result.epoch_losses)?;
    let mut report = EvalReport::new("train-clf", cfg.hash(), schedule.seed);
    report.model_hash = Some(model.config().hash(cfg.task.labels));
    report.epoch_losses = result.epoch_losses;
    let test: Vec<&Example> = dataset.split(Split::Test).collect();
    if !test.is_empty() {
        let cm = evaluate_classifier(&model, &clf_examples(cfg, variant, &test, recon.as_ref())?)?;
        report.confusion = Some(ConfusionReport::new(&cm, cfg.task.labels));
    }
    Ok(report)
}

/// Reconstructs ECG for every window of the `ppg` column of `--input`.
pub fn reconstruct(cfg: &RunConfig, opts: &Options) -> Result<EvalReport> {
    let model_path = required(&opts.model, "--model")?;
    let input = required(&opts.input, "--input")?;
    let out = out_dir(opts, cfg)?;
    let model = load_reconstructor(model_path, cfg, opts.fixed_patch)?;
    let windows = ppg_windows(input, opts.hz.or(cfg.data.hz), cfg)?;
    let ppg: Vec<&[f32]> = windows.iter().map(|w| w.values()).collect();
    let hat = model.reconstruct_batch(&ppg)?;
    let mut text = String::with_capacity(hat.len() * WINDOW_LEN * 16);
    text.push_str("window,start,sample,ecg_hat\n");
    for (i, (w, y)) in windows.iter().zip(&hat).enumerate() {
        for (j, v) in y.iter().enumerate() {
            text.push_str(&format!("{i},{},{j},{v}\n", w.source.start));
        }
    }
    std::fs::write(out.join("ecg_hat.csv"), text)?;
    let mut report = EvalReport::new("reconstruct", cfg.hash(), cfg.train.seed);
    report.model_hash = Some(model.config().hash());
    Ok(report)
}

/// Class distribution for every window of `--input`.
pub fn classify(cfg: &RunConfig, opts: &Options) -> Result<EvalReport> {
    let model_path = required(&opts.model, "--model")?;
    let input = required(&opts.input, "--input")?;
    let out = out_dir(opts, cfg)?;
    let variant = opts.variant.unwrap_or(cfg.task.variant);
    let recon = optional_recon(cfg, opts, variant.needs_reconstruction())?;
    let (model, _) = MultimodalModel::<f32>::load(model_path, &cfg.task.classifier_for(variant), cfg.task.labels)?;

    let hz = opts.hz.or(cfg.data.hz);
    let file = read_signal_csv::<f32>(input, hz)?;
    let bands = cfg.data.passbands();
    let ppg = match &file.ppg {
        Some(r) => preprocess(r, &bands)?,
        None => Vec::new(),
    };
    let ecg = match &file.ecg {
        Some(r) => preprocess(r, &bands)?,
        None => Vec::new(),
    };
    let hat = match &recon {
        Some(r) => r.reconstruct_batch(&ppg.iter().map(|w| w.values()).collect::<Vec<_>>())?,
        None => Vec::new(),
    };
    let missing = |what: &str| Error::Input(format!("{}: variant `{}` needs a `{what}` column", input.display(), variant.title()));
    let n = match variant {
        InputVariant::EcgOnly => ecg.len(),
        InputVariant::PpgEcg => ppg.len().min(ecg.len()),
        _ => ppg.len(),
    };
    let mut inputs: Vec<Vec<&[f32]>> = Vec::with_capacity(n);
    for i in 0..n {
        inputs.push(match variant {
            InputVariant::PpgOnly => vec![ppg[i].values()],
            InputVariant::EcgOnly => vec![ecg[i].values()],
            InputVariant::ReconEcgOnly => vec![&hat[i]],
            InputVariant::PpgEcg => vec![ppg[i].values(), ecg[i].values()],
            InputVariant::PpgReconEcg => vec![ppg[i].values(), &hat[i]],
        });
    }
    if inputs.is_empty() {
        return Err(match variant {
            InputVariant::EcgOnly => missing("ecg"),
            InputVariant::PpgEcg if file.ecg.is_none() => missing("ecg"),
            _ => missing("ppg"),
        });
    }
    let probs = model.classify_batch(&inputs)?;
    let labels = cfg.task.labels;
    let mut text = String::from("window,predicted");
    for name in labels.names() {
        text.push_str(&format!(",p_{name}"));
    }
    text.push('\n');
    for (i, p) in probs.iter().enumerate() {
        text.push_str(&format!("{i},{}", labels.name(performer_core::multimodal::argmax(p))));
        for v in p {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    std::fs::write(out.join("predictions.csv"), text)?;
    let mut report = EvalReport::new("classify", cfg.hash(), cfg.train.seed);
    report.model_hash = Some(model.config().hash(labels));
    Ok(report)
}

/// Scores a checkpoint on the dataset: RMSE per split, or the test confusion matrix.
pub fn evaluate(cfg: &RunConfig, opts: &Options) -> Result<EvalReport> {
    use crate::config::TaskKind;
    let model_path = required(&opts.model, "--model")?;
    out_dir(opts, cfg)?;
    let dataset = load_dataset(cfg, opts)?;
    match cfg.task.kind {
        TaskKind::Reconstruct => {
            let (model, seed) = ReconstructorModel::load(model_path, &cfg.stage_config(opts.fixed_patch)?)?;
            let mut report = EvalReport::new("evaluate", cfg.hash(), seed);
            report.model_hash = Some(model.config().hash());
            report.rmse = rmse_by_split(&model, &dataset)?;
            Ok(report)
        }
        TaskKind::Classify | TaskKind::Ablation => {
            let variant = opts.variant.unwrap_or(cfg.task.variant);
            let recon = optional_recon(cfg, opts, variant.needs_reconstruction())?;
            let (model, seed) =
                MultimodalModel::<f32>::load(model_path, &cfg.task.classifier_for(variant), cfg.task.labels)?;
            let mut test: Vec<&Example> = dataset.split(Split::Test).collect();
            if test.is_empty() {
                log::warn!("no test split; evaluating on every window");
                test = dataset.examples.iter().collect();
            }
            let cm = evaluate_classifier(&model, &clf_examples(cfg, variant, &test, recon.as_ref())?)?;
            let mut report = EvalReport::new("evaluate", cfg.hash(), seed);
            report.model_hash = Some(model.config().hash(cfg.task.labels));
            report.confusion = Some(ConfusionReport::new(&cm, cfg.task.labels));
            Ok(report)
        }
    }
}

/// Per-class accuracy of every configured input variant, written as `ablation.csv`.
pub fn ablation(cfg: &RunConfig, opts: &Options) -> Result<EvalReport> {
    let out = out_dir(opts, cfg)?;
    let needs = cfg.task.variants.iter().any(|v| v.needs_reconstruction());
    let recon = optional_recon(cfg, opts, needs)?;
    let dataset = load_dataset(cfg, opts)?;
    let train: Vec<&Example> = dataset.split(Split::Train).collect();
    let test: Vec<&Example> = dataset.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Input("ablation needs a non-empty test split".into()));
    }
    let schedule = cfg.train.schedule();
    let table = ablation_run(
        &train,
        &test,
        cfg.task.labels,
        &cfg.task.variants,
        &cfg.task.classifier,
        &schedule,
        &cfg.train.clf_options(),
        recon.as_ref(),
    )?;
    std::fs::write(out.join("ablation.csv"), table.to_string())?;
    Ok(EvalReport::new("ablation", cfg.hash(), schedule.seed))
}

/// Full-model finite-difference check of the configured reconstructor.
pub fn gradcheck(cfg: &RunConfig, opts: &Options) -> Result<EvalReport> {
    let stage = cfg.stage_config(opts.fixed_patch)?;
    let r = model_gradcheck(&stage, cfg.train.seed, GRADCHECK_COORDS, GRADCHECK_STEP)?;
    println!(
        "gradcheck: worst relative error {:e} over {} coordinates (analytic {:e}, numeric {:e})",
        r.max_rel_error, r.checked, r.worst_analytic, r.worst_numeric
    );
    let mut report = EvalReport::new("gradcheck", cfg.hash(), cfg.train.seed);
    report.gradcheck_max_rel_error = Some(r.max_rel_error);
    if let Some(out) = &opts.out {
        cfg.write_resolved(out)?;
    }
    Ok(report)
}

/// Attention weights of one `--input` window in long form.
pub fn attnmap(cfg: &RunConfig, opts: &Options) -> Result<EvalReport> {
    let model_path = required(&opts.model, "--model")?;
    let input = required(&opts.input, "--input")?;
    let out = out_dir(opts, cfg)?;
    let model = load_reconstructor(model_path, cfg, opts.fixed_patch)?;
    let windows = ppg_windows(input, opts.hz.or(cfg.data.hz), cfg)?;
    let window = windows.get(opts.window).ok_or_else(|| {
        Error::Input(format!("--window {} out of range: input has {} windows", opts.window, windows.len()))
    })?;
    let maps = model.extract_attention(window)?;
    write_attention_csv(&out.join("attention.csv"), &maps)?;
    let mut report = EvalReport::new("attnmap", cfg.hash(), cfg.train.seed);
    report.model_hash = Some(model.config().hash());
    Ok(report)
}

/// Runs `f`, stamps the wall clock, and writes `report.toml` when `--out` is set.
pub fn run(f: fn(&RunConfig, &Options) -> Result<EvalReport>, cfg: &RunConfig, opts: &Options) -> Result<EvalReport> {
    let t0 = Instant::now();
    let mut report = f(cfg, opts)?;
    report.wall_clock_s = t0.elapsed().as_secs_f64();
    if let Some(out) = &opts.out {
        report.write(out)?;
    }
    Ok(report)
}
