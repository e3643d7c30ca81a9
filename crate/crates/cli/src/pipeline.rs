//! One function per pipeline stage. Each reads upstream artifacts from the
//! run directory, writes its own, and records a stage manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use rayon::prelude::*;
use retsynth::classify::{
    assemble_records, read_predictions, train_multimodal, train_unimodal, write_predictions, Classifier,
    FusionConfig, LabeledImages, PredictionRow, TrainRegime, UnimodalData,
};
use retsynth::dataman::{
    conform, make_splits, DatasetManifest, Image, ImageRecord, Label, Modality, ModalityKind, Provenance, Split,
    SYNTHETIC_FAMILY,
};
use retsynth::diffusion::{sample, train_ddpm, UNet};
use retsynth::evalkit::{audit_modality, AuditReport, MetricsReport};
use retsynth::explain::{classifier_gradcams, mass_fraction, overlay, save_cam, sheet};
use retsynth::modfilter::{gate_synthetic, train_filter, write_gate_log, Candidate, FilterData, ModalityFilter};
use retsynth::phantom::{generate_phantoms, signal_mask};
use retsynth::plot::{distribution_plot, line_plot};
use retsynth::rng::{derive_seed, seeded};
use serde::{Deserialize, Serialize};

use crate::config::DatasetSource;
use crate::error::{CliError, CliResult};
use crate::rundir::{RunDir, StageManifest};

pub const PREPARE: &str = "prepare";
pub const TRAIN_DDPM: &str = "train-ddpm";
pub const SAMPLE: &str = "sample";
pub const TRAIN_FILTER: &str = "train-filter";
pub const GATE: &str = "gate";
pub const AUDIT: &str = "audit";
pub const EVALUATE: &str = "evaluate";
pub const EXPLAIN: &str = "explain";
pub const REPORT: &str = "report";

pub fn unimodal_stage(regime: TrainRegime) -> String {
    format!("train-unimodal.{}", regime.short())
}

pub fn multimodal_stage(regime: TrainRegime, metadata: bool) -> String {
    format!("train-multimodal{}.{}", if metadata { "+meta" } else { "" }, regime.short())
}

/// Row label of a fused model in reports.
pub fn fusion_tag(metadata: bool) -> &'static str {
    if metadata {
        "MULTIMODAL+META"
    } else {
        "MULTIMODAL"
    }
}

fn dataset(run: &RunDir) -> CliResult<DatasetManifest> {
    Ok(DatasetManifest::read_dir(&run.path("data"))?)
}

/// Real images of `modality` in `split` that carry a known label.
fn labeled(run: &RunDir, manifest: &DatasetManifest, modality: Modality, split: Split) -> CliResult<LabeledImages> {
    let records: Vec<&ImageRecord> = manifest
        .select(modality, split)
        .into_iter()
        .filter(|r| r.label.is_known())
        .collect();
    Ok(LabeledImages::load(manifest, &records, &run.config.preprocess)?)
}

fn accepted_pool(run: &RunDir) -> CliResult<DatasetManifest> {
    let mut m = DatasetManifest::new(run.path("synthetic"));
    m.records = DatasetManifest::read_records(&run.path("synthetic/accepted.tsv"))?;
    Ok(m)
}

fn synthetic_of(run: &RunDir, pool: &DatasetManifest, modality: Modality) -> CliResult<LabeledImages> {
    let records: Vec<&ImageRecord> = pool.records.iter().filter(|r| r.modality == modality).collect();
    Ok(LabeledImages::load(pool, &records, &run.config.preprocess)?)
}

fn ddpm_path(m: Modality) -> String {
    format!("models/ddpm/{}.safetensors", m.tag())
}

fn unimodal_model_path(r: TrainRegime, m: Modality) -> String {
    format!("models/unimodal/{}/{}.safetensors", r.short(), m.tag())
}

fn prediction_path(r: TrainRegime, model: &str) -> String {
    format!("predictions/{}/{model}.tsv", r.short())
}

pub fn prepare(run: &RunDir) -> CliResult<StageManifest> {
    let started = Instant::now();
    let cfg = &run.config;
    let data_dir = run.mkdir("data")?;
    let mut manifest = match &cfg.dataset {
        DatasetSource::Phantom(p) => generate_phantoms(p, &data_dir)?,
        DatasetSource::Manifest { dir } => {
            let src = DatasetManifest::read_dir(dir)?;
            src.validate(true)?;
            let mut m = src.clone();
            for r in &mut m.records {
                let abs = src.resolve(r);
                let abs = fs::canonicalize(&abs).map_err(|e| CliError::io(&abs, e))?;
                r.path = abs.to_string_lossy().into_owned();
            }
            m.records.retain(|r| r.provenance == Provenance::Real);
            m.base_dir = data_dir.clone();
            m.splits = None;
            m
        }
    };
    manifest.validate(false)?;
    manifest.validate_classifier_collection()?;
    let splits = make_splits(&manifest, &cfg.split, derive_seed(cfg.seed, "split"))?;
    for (s, st) in &splits.stats {
        log::info!("{}: {:?}", s.tag(), st);
    }
    run.write_json(&run.path("reports/splits.json"), &splits)?;
    manifest.splits = Some(splits);
    manifest.write_dir(&data_dir)?;
    run.finish(PREPARE, &[], &["data", "reports/splits.json"], started)
}

pub fn train_ddpm_stage(run: &RunDir) -> CliResult<StageManifest> {
    let started = Instant::now();
    let up = run.require(PREPARE, TRAIN_DDPM)?;
    let cfg = &run.config;
    let manifest = dataset(run)?;
    let schedule = cfg.diffusion.schedule.build()?;
    let logs = cfg
        .modalities
        .par_iter()
        .map(|&m| -> CliResult<(Modality, Vec<f64>)> {
            let set = labeled(run, &manifest, m, Split::Train)?;
            let data: Vec<(&Image, usize)> = set
                .images
                .iter()
                .zip(&set.labels)
                .filter_map(|(img, l)| l.class_index().map(|c| (img, c)))
                .collect();
            log::info!("training DDPM for {m} on {} images", data.len());
            let net = UNet::new(cfg.diffusion.denoiser.clone(), derive_seed(cfg.seed, &format!("ddpm/{m}/init")))?;
            let mut rng = seeded(derive_seed(cfg.seed, &format!("ddpm/{m}/train")));
            let log = train_ddpm(&net, &schedule, &data, &cfg.diffusion.train, &mut rng)?;
            net.save(&run.path(&ddpm_path(m)))?;
            Ok((m, log.epoch_losses))
        })
        .collect::<CliResult<BTreeMap<_, _>>>()?;
    run.write_json(&run.path("reports/ddpm_loss.json"), &logs)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = logs
        .iter()
        .map(|(m, l)| (m.tag().to_string(), l.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect()))
        .collect();
    let ymax = logs.values().flatten().copied().fold(0.0, f64::max);
    let epochs = cfg.diffusion.train.epochs.max(1) as f64;
    let svg = line_plot("DDPM training loss", "epoch", "noise MSE", (1.0, epochs), (0.0, ymax * 1.05), &series);
    run.write(&run.path("plots/ddpm_loss.svg"), svg.as_bytes())?;
    run.finish(TRAIN_DDPM, &[up], &["models/ddpm", "reports/ddpm_loss.json", "plots/ddpm_loss.svg"], started)
}

pub fn sample_stage(run: &RunDir) -> CliResult<StageManifest> {
    let started = Instant::now();
    let up = run.require(TRAIN_DDPM, SAMPLE)?;
    let cfg = &run.config;
    let schedule = cfg.diffusion.schedule.build()?;
    let pool_dir = run.path("synthetic/pool");
    if pool_dir.exists() {
        fs::remove_dir_all(&pool_dir).map_err(|e| CliError::io(&pool_dir, e))?;
    }
    let shape = (cfg.preprocess.channels, cfg.preprocess.side, cfg.preprocess.side);
    let per_modality = cfg
        .modalities
        .par_iter()
        .map(|&m| -> CliResult<Vec<ImageRecord>> {
            let net = UNet::load(&run.path(&ddpm_path(m)))?;
            let mut records = Vec::new();
            for label in [Label::Pos, Label::Neg] {
                let class = label.class_index().expect("known label");
                let mut rng = seeded(derive_seed(cfg.seed, &format!("sample/{m}/{}", label.tag())));
                let n = cfg.diffusion.pool_per_class;
                log::info!("sampling {n} {} images for {m}", label.tag());
                let images = sample(&net, &schedule, class, n, shape, cfg.diffusion.sample_batch, &mut rng)?;
                for (k, img) in images.iter().enumerate() {
                    let id = format!("syn-{}-{}-{k:05}", m.tag(), label.tag());
                    let rel = format!("pool/{}/{}/{id}.png", m.tag(), label.tag());
                    img.save_png(&run.path("synthetic").join(&rel))?;
                    records.push(ImageRecord {
                        path: rel,
                        family_id: SYNTHETIC_FAMILY.to_string(),
                        patient_id: id.clone(),
                        eye_id: id,
                        modality: m,
                        label,
                        provenance: Provenance::Synthetic,
                    });
                }
            }
            Ok(records)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let records: Vec<ImageRecord> = per_modality.into_iter().flatten().collect();
    DatasetManifest::write_records(&records, &run.path("synthetic/pool/pool.tsv"))?;
    run.finish(SAMPLE, &[up], &["synthetic/pool"], started)
}

pub fn train_filter_stage(run: &RunDir) -> CliResult<StageManifest> {
    let started = Instant::now();
    let up = run.require(PREPARE, TRAIN_FILTER)?;
    let cfg = &run.config;
    let manifest = dataset(run)?;
    let mut data = FilterData::default();
    for &m in &cfg.filter.classes {
        for split in Split::ALL {
            let records = manifest.select(m, split);
            let set = LabeledImages::load(&manifest, &records, &cfg.preprocess)?;
            let target = match split {
                Split::Train => &mut data.train,
                Split::Val => &mut data.val,
                Split::Test => &mut data.test,
            };
            target.extend(set.images.into_iter().map(|img| (img, m)));
        }
    }
    let (model, report) = train_filter(&data, &cfg.filter)?;
    log::info!("filter MCC: val {:.4}, test {:.4}", report.val.mcc, report.test.mcc);
    model.save(&run.path("models/filter.safetensors"))?;
    run.write_json(&run.path("reports/filter.json"), &report)?;
    run.finish(TRAIN_FILTER, &[up], &["models/filter.safetensors", "reports/filter.json"], started)
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct GateCounts {
    generated: usize,
    accepted: usize,
    wrong_modality: usize,
    low_confidence: usize,
    budget: usize,
}

pub fn gate_stage(run: &RunDir) -> CliResult<StageManifest> {
    use retsynth::modfilter::GateReason;
    let started = Instant::now();
    let up_sample = run.require(SAMPLE, GATE)?;
    let up_filter = run.require(TRAIN_FILTER, GATE)?;
    let cfg = &run.config;
    let filter = ModalityFilter::load(&run.path("models/filter.safetensors"))?;
    let mut pool = DatasetManifest::new(run.path("synthetic"));
    pool.records = DatasetManifest::read_records(&run.path("synthetic/pool/pool.tsv"))?;
    let mut decisions = Vec::new();
    let mut accepted = Vec::new();
    for &m in &cfg.modalities {
        let records: Vec<&ImageRecord> = pool.records.iter().filter(|r| r.modality == m).collect();
        let images = records
            .par_iter()
            .map(|r| Ok(conform(&Image::load_png(&pool.resolve(r))?, &cfg.preprocess)?))
            .collect::<CliResult<Vec<_>>>()?;
        let stream: Vec<Candidate<'_>> = records
            .iter()
            .zip(&images)
            .map(|(r, img)| Candidate {
                image_id: r.eye_id.clone(),
                image: img,
                modality: r.modality,
                label: r.label,
            })
            .collect();
        let d = gate_synthetic(&stream, &filter, &cfg.gate)?;
        accepted.extend(records.iter().zip(&d).filter(|(_, d)| d.accepted).map(|(r, _)| (*r).clone()));
        decisions.extend(d);
    }
    let mut counts: BTreeMap<String, GateCounts> = BTreeMap::new();
    for d in &decisions {
        let c = counts
            .entry(format!("{}/{}", d.generation_modality.tag(), d.label.tag()))
            .or_default();
        c.generated += 1;
        match d.reason {
            GateReason::Passed => c.accepted += 1,
            GateReason::WrongModality => c.wrong_modality += 1,
            GateReason::LowConfidence => c.low_confidence += 1,
            GateReason::Budget => c.budget += 1,
        }
    }
    for (k, c) in &counts {
        log::info!("gate {k}: {} of {} accepted", c.accepted, c.generated);
    }
    write_gate_log(&decisions, &run.path("synthetic/gate_log.tsv"))?;
    DatasetManifest::write_records(&accepted, &run.path("synthetic/accepted.tsv"))?;
    run.write_json(&run.path("reports/gate.json"), &counts)?;
    run.finish(
        GATE,
        &[up_sample, up_filter],
        &["synthetic/gate_log.tsv", "synthetic/accepted.tsv", "reports/gate.json"],
        started,
    )
}

pub fn audit_stage(run: &RunDir) -> CliResult<StageManifest> {
    let started = Instant::now();
    let up_prep = run.require(PREPARE, AUDIT)?;
    let up_gate = run.require(GATE, AUDIT)?;
    let cfg = &run.config;
    let manifest = dataset(run)?;
    let pool = accepted_pool(run)?;
    let mut modalities = Vec::new();
    for &m in &cfg.modalities {
        let real = labeled(run, &manifest, m, Split::Train)?;
        let synth = synthetic_of(run, &pool, m)?;
        if synth.is_empty() {
            log::warn!("audit: no accepted synthetic {m} images; skipped");
            continue;
        }
        let a = audit_modality(m, &real.images, &synth.images, &cfg.audit)?;
        log::info!(
            "audit {m}: WD(SvR,RvR) {:.4} p {:.3e}; WD(RvR,SvS) {:.4} p {:.3e}; near copies {}",
            a.wd_svr_rvr,
            a.ks_svr_rvr.p_value,
            a.wd_rvr_svs,
            a.ks_rvr_svs.p_value,
            a.near_copies
        );
        let title = format!(
            "{m}: WD(SvR,RvR)={:.3} (p={:.2e}), WD(RvR,SvS)={:.3} (p={:.2e})",
            a.wd_svr_rvr, a.ks_svr_rvr.p_value, a.wd_rvr_svs, a.ks_rvr_svs.p_value
        );
        let svg = distribution_plot(
            &title,
            "maximum pearsonr",
            &[("SvR", &a.svr[..]), ("RvR", &a.rvr[..]), ("SvS", &a.svs[..])],
        );
        run.write(&run.path(&format!("plots/audit_{}.svg", m.tag())), svg.as_bytes())?;
        modalities.push(a);
    }
    let report = AuditReport {
        config: cfg.audit.clone(),
        modalities,
    };
    let mut tsv = String::from(
        "modality\tn_real\tn_synthetic\twd_svr_rvr\tks_svr_rvr\tp_svr_rvr\twd_rvr_svs\tks_rvr_svs\tp_rvr_svs\tnear_copies\tmedian_svr\tmedian_rvr\tmemorization_flag\n",
    );
    for a in &report.modalities {
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6e}\t{:.6}\t{:.6}\t{:.6e}\t{}\t{:.6}\t{:.6}\t{}",
            a.modality,
            a.n_real,
            a.n_synthetic,
            a.wd_svr_rvr,
            a.ks_svr_rvr.statistic,
            a.ks_svr_rvr.p_value,
            a.wd_rvr_svs,
            a.ks_rvr_svs.statistic,
            a.ks_rvr_svs.p_value,
            a.near_copies,
            a.median_svr,
            a.median_rvr,
            a.memorization_flag
        );
    }
    run.write_json(&run.path("reports/audit.json"), &report)?;
    run.write(&run.path("reports/audit.tsv"), tsv.as_bytes())?;
    let plots: Vec<String> = report
        .modalities
        .iter()
        .map(|a| format!("plots/audit_{}.svg", a.modality.tag()))
        .collect();
    let mut outputs = vec!["reports/audit.json", "reports/audit.tsv"];
    outputs.extend(plots.iter().map(String::as_str));
    run.finish(AUDIT, &[up_prep, up_gate], &outputs, started)
}

pub fn train_unimodal_stage(run: &RunDir, regime: TrainRegime) -> CliResult<StageManifest> {
    let started = Instant::now();
    let stage = unimodal_stage(regime);
    let mut ups = vec![run.require(PREPARE, &stage)?];
    let pool = if regime.uses_synthetic() {
        ups.push(run.require(GATE, &stage)?);
        Some(accepted_pool(run)?)
    } else {
        None
    };
    let cfg = &run.config;
    let manifest = dataset(run)?;
    let outcomes = cfg
        .modalities
        .par_iter()
        .map(|&m| -> CliResult<()> {
            let data = UnimodalData {
                train: labeled(run, &manifest, m, Split::Train)?,
                val: labeled(run, &manifest, m, Split::Val)?,
                synthetic: pool.as_ref().map(|p| synthetic_of(run, p, m)).transpose()?,
            };
            let test = labeled(run, &manifest, m, Split::Test)?;
            let (model, outcome) = train_unimodal(&data, m, regime, &cfg.unimodal)?;
            log::info!("{m} {}: val AUROC {:.4}", regime.tag(), outcome.val.auroc);
            model.save(&run.path(&unimodal_model_path(regime, m)))?;
            let mut rows = Vec::new();
            for (split, set) in [(Split::Train, &data.train), (Split::Val, &data.val), (Split::Test, &test)] {
                let p = model.predict_p_neg(&set.refs(), None, cfg.unimodal.eval_batch)?;
                rows.extend(set.eye_ids.iter().zip(&set.labels).zip(p).map(|((eye, &label), p_neg)| PredictionRow {
                    eye_id: eye.clone(),
                    modality: m,
                    split,
                    p_neg,
                    label,
                }));
            }
            write_predictions(&rows, &run.path(&prediction_path(regime, m.tag())))?;
            run.write_json(
                &run.path(&format!("reports/unimodal/{}/{}.json", regime.short(), m.tag())),
                &outcome,
            )?;
            Ok(())
        })
        .collect::<CliResult<Vec<()>>>()?;
    drop(outcomes);
    let mut outputs = vec![
        format!("models/unimodal/{}", regime.short()),
        format!("reports/unimodal/{}", regime.short()),
    ];
    outputs.extend(cfg.modalities.iter().map(|m| prediction_path(regime, m.tag())));
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    run.finish(&stage, &ups, &refs, started)
}

/// On-disk row of a fused model's predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRow {
    pub eye_id: String,
    pub split: Split,
    pub p_neg: f64,
    pub label: Label,
}

pub fn train_multimodal_stage(run: &RunDir, regime: TrainRegime, metadata: bool) -> CliResult<StageManifest> {
    let started = Instant::now();
    let stage = multimodal_stage(regime, metadata);
    let up_prep = run.require(PREPARE, &stage)?;
    let up_uni = run.require(&unimodal_stage(regime), &stage)?;
    let cfg = &run.config;
    let manifest = dataset(run)?;
    let fcfg = FusionConfig {
        use_metadata: metadata,
        ..cfg.fusion.clone()
    };
    let mut rows = Vec::new();
    for &m in &fcfg.modalities {
        rows.extend(read_predictions(&run.path(&prediction_path(regime, m.tag())))?);
    }
    let records = assemble_records(&rows, &manifest, &fcfg.modalities)?;
    let train: Vec<_> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let (model, losses) = train_multimodal(&train, &fcfg)?;
    let tag = fusion_tag(metadata);
    model.save(&run.path(&format!("models/fusion/{}/{tag}.safetensors", regime.short())))?;
    let p = model.predict_p_neg(&records)?;
    let fused: Vec<FusedRow> = records
        .iter()
        .zip(p)
        .map(|(r, p_neg)| FusedRow {
            eye_id: r.eye_id.clone(),
            split: r.split,
            p_neg,
            label: r.label,
        })
        .collect();
    let pred = prediction_path(regime, tag);
    write_rows(&fused, &run.path(&pred))?;
    let log_path = format!("reports/fusion/{}/{tag}.json", regime.short());
    run.write_json(&run.path(&log_path), &losses)?;
    let model_path = format!("models/fusion/{}/{tag}.safetensors", regime.short());
    run.finish(&stage, &[up_prep, up_uni], &[&model_path, &pred, &log_path], started)
}

fn write_rows<T: Serialize>(rows: &[T], path: &std::path::Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| CliError::Core(e.into()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> CliResult<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| CliError::Core(e.into()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// One evaluated model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub metrics: MetricsReport,
}

/// Regimes whose unimodal stage has finished.
fn finished_regimes(run: &RunDir, needed_by: &str) -> CliResult<Vec<(TrainRegime, StageManifest)>> {
    let mut out = Vec::new();
    for r in TrainRegime::ALL {
        if run.stage(&unimodal_stage(r))?.is_some() {
            out.push((r, run.require(&unimodal_stage(r), needed_by)?));
        }
    }
    if out.is_empty() {
        return Err(CliError::MissingStage {
            stage: "train-unimodal".into(),
            needed_by: needed_by.into(),
        });
    }
    Ok(out)
}

fn score(rows: &[(Split, f64, Label)], split: Split, regime: TrainRegime) -> CliResult<MetricsReport> {
    let (p, l): (Vec<f64>, Vec<Label>) = rows
        .iter()
        .filter(|r| r.0 == split)
        .map(|r| (r.1, r.2))
        .unzip();
    Ok(MetricsReport::from_p_neg(&p, &l, split, regime.tag())?)
}

pub fn evaluate_stage(run: &RunDir) -> CliResult<StageManifest> {
    let started = Instant::now();
    let cfg = &run.config;
    let mut ups = Vec::new();
    let mut out = Vec::new();
    for (regime, up) in finished_regimes(run, EVALUATE)? {
        ups.push(up);
        let mut models: Vec<(String, Vec<(Split, f64, Label)>)> = Vec::new();
        for &m in &cfg.modalities {
            let rows = read_predictions(&run.path(&prediction_path(regime, m.tag())))?;
            models.push((m.tag().to_string(), rows.iter().map(|r| (r.split, r.p_neg, r.label)).collect()));
        }
        for metadata in [false, true] {
            if let Some(up) = run.stage(&multimodal_stage(regime, metadata))? {
                run.require(&up.stage, EVALUATE)?;
                ups.push(up);
                let tag = fusion_tag(metadata);
                let rows: Vec<FusedRow> = read_rows(&run.path(&prediction_path(regime, tag)))?;
                models.push((tag.to_string(), rows.iter().map(|r| (r.split, r.p_neg, r.label)).collect()));
            }
        }
        for (model, rows) in &models {
            for split in [Split::Val, Split::Test] {
                out.push(EvalRow {
                    model: model.clone(),
                    metrics: score(rows, split, regime)?,
                });
            }
        }
    }
    let mut tsv = String::from(
        "regime\tmodel\tsplit\tn_pos\tn_neg\tauroc\taupr\tf1\tsensitivity\tspecificity\tprecision\tyouden_threshold\n",
    );
    for r in &out {
        let m = &r.metrics;
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            m.regime,
            r.model,
            m.split.tag(),
            m.n_pos,
            m.n_neg,
            m.auroc,
            m.aupr,
            m.f1,
            m.sensitivity,
            m.specificity,
            m.precision,
            m.youden_threshold
        );
    }
    run.write(&run.path("reports/metrics.tsv"), tsv.as_bytes())?;
    run.write_json(&run.path("reports/metrics.json"), &out)?;
    run.finish(EVALUATE, &ups, &["reports/metrics.tsv", "reports/metrics.json"], started)
}

pub fn read_metrics(run: &RunDir) -> CliResult<Vec<EvalRow>> {
    let p = run.path("reports/metrics.json");
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Serialize)]
struct CamRow {
    regime: String,
    modality: Modality,
    /// `real` or `synthetic`.
    source: String,
    eye_id: String,
    label: Label,
    p_neg: f64,
    degenerate: bool,
    /// Heatmap mass inside the phantom signal region, and that region's
    /// share of the image, when the geometry is known.
    signal_mass: Option<f64>,
    signal_area: Option<f64>,
}

fn pick(records: Vec<&ImageRecord>, per_class: usize) -> Vec<&ImageRecord> {
    let mut picked = Vec::new();
    for label in [Label::Pos, Label::Neg] {
        picked.extend(records.iter().filter(|r| r.label == label).take(per_class));
    }
    picked
}

pub fn explain_stage(run: &RunDir) -> CliResult<StageManifest> {
    let started = Instant::now();
    let cfg = &run.config;
    let manifest = dataset(run)?;
    let mut ups = vec![run.require(PREPARE, EXPLAIN)?];
    // Accepted synthetic images join the sheets when the gate has run.
    let pool = match run.stage(GATE)? {
        Some(_) => {
            ups.push(run.require(GATE, EXPLAIN)?);
            Some(accepted_pool(run)?)
        }
        None => None,
    };
    let mut rows = Vec::new();
    for (regime, up) in finished_regimes(run, EXPLAIN)? {
        ups.push(up);
        for &m in &cfg.modalities {
            let model = Classifier::load(&run.path(&unimodal_model_path(regime, m)))?;
            let mut sets = vec![("real", LabeledImages::load(&manifest, &pick(manifest.select(m, Split::Test), cfg.explain.per_class), &cfg.preprocess)?)];
            if let Some(pool) = &pool {
                let records = pick(pool.records.iter().filter(|r| r.modality == m).collect(), cfg.explain.per_class);
                sets.push(("synthetic", LabeledImages::load(pool, &records, &cfg.preprocess)?));
            }
            let dir = run.path(&format!("explain/{}/{}", regime.short(), m.tag()));
            let mask = match (&cfg.dataset, m.kind()) {
                (DatasetSource::Phantom(_), ModalityKind::EnFace) => Some(signal_mask(m, cfg.preprocess.side)?),
                _ => None,
            };
            let mut tiles = Vec::new();
            for (source, set) in &sets {
                let cams = classifier_gradcams(&model, &set.refs())?;
                for ((img, cam), (eye, &label)) in set.images.iter().zip(&cams).zip(set.eye_ids.iter().zip(&set.labels)) {
                    save_cam(img, cam, &dir, eye)?;
                    tiles.push(overlay(img, cam, 0.5)?);
                    rows.push(CamRow {
                        regime: regime.tag().to_string(),
                        modality: m,
                        source: source.to_string(),
                        eye_id: eye.clone(),
                        label,
                        p_neg: cam.output,
                        degenerate: cam.degenerate,
                        signal_mass: mask.as_ref().map(|k| mass_fraction(cam, k)),
                        signal_area: mask
                            .as_ref()
                            .map(|k| k.iter().filter(|&&b| b).count() as f64 / k.len() as f64),
                    });
                }
            }
            if !tiles.is_empty() {
                sheet(&tiles, cfg.explain.columns)?.save_png(&dir.with_extension("sheet.png"))?;
            }
        }
    }
    write_rows(&rows, &run.path("explain/summary.tsv"))?;
    run.finish(EXPLAIN, &ups, &["explain"], started)
}
