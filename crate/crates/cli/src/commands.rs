use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowgraph_core::eval::{
    build_graphs, class_indices, confusion_matrix, cross_validate, label_indices, macro_metrics,
    open_world_classify, open_world_experiment, open_world_stats, predict_flows, shift_analysis,
    time_inference, EvaluationReport, Verdict,
};
use flowgraph_core::ingest::{ingest_manifest, load_flows, read_manifest, save_flows};
use flowgraph_core::model::checkpoint::Checkpoint;
use flowgraph_core::model::train::{argmax, train};
use flowgraph_core::model::ModelConfig;
use flowgraph_core::stability::stability_report;
use flowgraph_core::synth::{
    shift_flows, structural_capture, ShiftConfig, ENVIRONMENTS, STRUCTURAL_CLASSES,
};
use flowgraph_core::tensor::Real;
use flowgraph_core::{FeatureSet, Flow, GraphSat};

use crate::config::{Pipeline, Precision};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_flows(path: &Path) -> Result<Vec<Flow>> {
    load_flows(path).with_context(|| format!("reading flow dataset {}", path.display()))
}

fn read_features(path: Option<&Path>) -> Result<FeatureSet> {
    match path {
        Some(p) => FeatureSet::load(p).with_context(|| format!("reading feature set {}", p.display())),
        None => {
            log::info!("no feature set given; using all attributes");
            Ok(FeatureSet::all())
        }
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("refusing checkpoint {}", path.display()))
}

fn truncate(flows: &mut [Flow], max_packets: usize) {
    for f in flows {
        f.packets.truncate(max_packets);
    }
}

pub fn ingest(p: &Pipeline, manifest: &Path, out: &Path) -> Result<()> {
    let rows = read_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    if rows.is_empty() {
        log::warn!("manifest {} lists no captures", manifest.display());
    }
    let result = ingest_manifest(&rows, p.max_packets, p.exec)?;
    let mut failures = 0;
    for file in &result.files {
        match &file.outcome {
            Ok((ps, asm)) => eprintln!(
                "{}: {} frames, {} packets, {} flows, {} dropped flows, {} truncated packets, {} non-IP, {} other transport, {} fragments, {} malformed",
                file.path.display(),
                ps.frames,
                ps.packets,
                asm.flows,
                asm.dropped_flows,
                asm.truncated_packets,
                ps.non_ip,
                ps.non_tcp_udp,
                ps.fragments,
                ps.malformed
            ),
            Err(e) => {
                failures += 1;
                eprintln!("{}: error: {e}", file.path.display());
            }
        }
    }
    if !rows.is_empty() && failures == rows.len() {
        return Err(flowgraph_core::Error::Data("every capture in the manifest failed".into()).into());
    }
    save_flows(out, &result.flows).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} flows to {}", result.flows.len(), out.display());
    Ok(())
}

pub fn select_features(p: &Pipeline, flows: &Path, csv_out: &Path, features_out: &Path) -> Result<()> {
    let flows = read_flows(flows)?;
    let report = stability_report(&flows, &p.stability)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    report.write_csv(create(csv_out)?)?;
    report.selected.save(features_out)?;
    eprintln!(
        "selected {} of 39 attributes: {}",
        report.selected.len(),
        report.selected.names().join(", ")
    );
    Ok(())
}

pub struct TrainArgs<'a> {
    pub flows: &'a Path,
    pub features: Option<&'a Path>,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
}

pub fn train_model(p: &Pipeline, a: TrainArgs<'_>) -> Result<()> {
    match p.precision {
        Precision::F32 => train_as::<f32>(p, a),
        Precision::F64 => train_as::<f64>(p, a),
    }
}

fn train_as<F: Real>(p: &Pipeline, a: TrainArgs<'_>) -> Result<()> {
    let mut flows = read_flows(a.flows)?;
    truncate(&mut flows, p.max_packets);
    let features = read_features(a.features)?;
    let (classes, labels) = class_indices(&flows)?;
    let graphs = build_graphs(&flows, &features, p.exec)?;
    let config = ModelConfig {
        input_dim: features.len(),
        num_classes: classes.len(),
        ..p.model
    };
    let (model, log) = train::<F>(&graphs, &labels, config, &p.train)?;
    if let Some(path) = a.log {
        serde_json::to_writer_pretty(create(path)?, &log)?;
    }
    let last = log.epochs.last().expect("at least one epoch");
    eprintln!(
        "trained {} epochs (best {}{}), final train accuracy {:.4}, {} parameters",
        log.epochs.len(),
        log.best_epoch,
        if log.stopped_early { ", stopped early" } else { "" },
        last.train_accuracy,
        model.parameter_count()
    );
    Checkpoint {
        model: model.cast(),
        class_names: classes,
        features,
        max_packets: p.max_packets,
    }
    .save(a.out)?;
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub flows: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub held_out: Option<&'a str>,
    pub open_world: bool,
    pub out: &'a Path,
    pub confusion: Option<&'a Path>,
}

pub fn evaluate(p: &Pipeline, a: EvaluateArgs<'_>) -> Result<()> {
    let report = match p.precision {
        Precision::F32 => evaluate_as::<f32>(p, &a)?,
        Precision::F64 => evaluate_as::<f64>(p, &a)?,
    };
    report.write_json(create(a.out)?)?;
    if let Some(path) = a.confusion {
        report.write_confusion_csv(create(path)?)?;
    }
    let m = &report.pooled;
    eprintln!(
        "accuracy {:.4}, macro precision {:.4}, recall {:.4}, F1 {:.4}",
        m.accuracy, m.precision, m.recall, m.f1
    );
    if let Some(ms) = report.ms_per_100_flows {
        eprintln!("{ms:.3} ms per 100 flows");
    }
    if let Some(ow) = &report.open_world {
        eprintln!(
            "threshold {}: {:.3} of known flows and {:.3} of unknown flows above it",
            ow.threshold, ow.known_fraction, ow.unknown_fraction
        );
    }
    Ok(())
}

fn evaluate_as<F: Real>(p: &Pipeline, a: &EvaluateArgs<'_>) -> Result<EvaluationReport> {
    let mut flows = read_flows(a.flows)?;
    let Some(ck_path) = a.checkpoint else {
        truncate(&mut flows, p.max_packets);
        let config = p.eval_config();
        let mut report = cross_validate::<F>(&flows, &config)?;
        if let Some(class) = a.held_out {
            report.open_world = Some(open_world_experiment::<F>(&flows, class, &config)?);
        }
        return Ok(report);
    };

    let ck = read_checkpoint(ck_path)?;
    truncate(&mut flows, ck.max_packets);
    let model: GraphSat<F> = ck.model_as();
    let (known, unknown): (Vec<Flow>, Vec<Flow>) = flows
        .into_iter()
        .partition(|f| f.label.as_ref().is_some_and(|l| ck.class_names.contains(l)));
    if !unknown.is_empty() && !a.open_world {
        bail!(flowgraph_core::Error::Data(format!(
            "{} flows carry labels the model was not trained on; pass --open-world to score them as unknown",
            unknown.len()
        )));
    }
    if known.is_empty() {
        bail!(flowgraph_core::Error::Data("no flows of the model's classes".into()));
    }
    let labels = label_indices(&known, &ck.class_names)?;
    let probs = predict_flows(&model, &ck.features, &known, p.exec)?;
    let pred: Vec<usize> = probs.iter().map(|q| argmax(q)).collect();
    let metrics = macro_metrics(&labels, &pred)?;
    let open_world = a.open_world.then(|| -> Result<_> {
        let unknown_probs = predict_flows(&model, &ck.features, &unknown, p.exec)?;
        Ok(open_world_stats(&probs, &unknown_probs, p.threshold))
    });
    Ok(EvaluationReport {
        confusion: confusion_matrix(&labels, &pred, ck.class_names.len())?,
        classes: ck.class_names.clone(),
        folds: Vec::new(),
        mean: metrics,
        pooled: metrics,
        ms_per_100_flows: Some(time_inference(&model, &ck.features, &known, 100, 5, p.exec)?),
        parameter_count: model.parameter_count(),
        open_world: open_world.transpose()?,
    })
}

pub struct PredictArgs<'a> {
    pub flows: &'a Path,
    pub checkpoint: &'a Path,
    pub open_world: bool,
    pub out: Option<&'a Path>,
}

pub fn predict(p: &Pipeline, a: PredictArgs<'_>) -> Result<()> {
    let ck = read_checkpoint(a.checkpoint)?;
    let mut flows = read_flows(a.flows)?;
    truncate(&mut flows, ck.max_packets);
    let probs = match p.precision {
        Precision::F32 => predict_flows(&ck.model_as::<f32>(), &ck.features, &flows, p.exec)?,
        Precision::F64 => predict_flows(&ck.model_as::<f64>(), &ck.features, &flows, p.exec)?,
    };
    let sink: Box<dyn Write> = match a.out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["flow", "five_tuple", "label", "prediction", "probability"])?;
    for (i, (f, q)) in flows.iter().zip(&probs).enumerate() {
        let best = argmax(q);
        let verdict = if a.open_world {
            open_world_classify(q, p.threshold)
        } else {
            Verdict::Known(best)
        };
        let name = match verdict {
            Verdict::Known(c) => ck.class_names[c].as_str(),
            Verdict::Unknown => "UNKNOWN",
        };
        w.write_record([
            i.to_string(),
            f.five_tuple.to_string(),
            f.label.clone().unwrap_or_default(),
            name.to_string(),
            format!("{:.6}", q[best]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GroupBy {
    Environment,
    Label,
}

pub struct ShiftArgs<'a> {
    pub flows: &'a Path,
    pub by: GroupBy,
    pub group_a: &'a str,
    pub group_b: &'a str,
    pub features: Option<&'a Path>,
    pub grid: usize,
    pub out: &'a Path,
    pub distances: Option<&'a Path>,
}

pub fn shift_analyze(a: ShiftArgs<'_>) -> Result<()> {
    let flows = read_flows(a.flows)?;
    let features = read_features(a.features)?;
    let key = |f: &Flow| match a.by {
        GroupBy::Environment => f.environment_label.clone(),
        GroupBy::Label => f.label.clone(),
    };
    let pick = |g: &str| -> Vec<Flow> { flows.iter().filter(|f| key(f).as_deref() == Some(g)).cloned().collect() };
    let (ga, gb) = (pick(a.group_a), pick(a.group_b));
    for (name, g) in [(a.group_a, &ga), (a.group_b, &gb)] {
        if g.is_empty() {
            bail!(flowgraph_core::Error::Data(format!("no flows in group {name:?}")));
        }
    }
    let s = shift_analysis(&ga, &gb, &features, a.grid)?;
    s.write_density_csv(create(a.out)?)?;
    if let Some(path) = a.distances {
        s.write_distances_csv(create(path)?)?;
    }
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    eprintln!(
        "{}: {} packets, mean distance {:.4}, bandwidth {:.4}",
        a.group_a,
        s.distances_a.len(),
        mean(&s.distances_a),
        s.bandwidth_a
    );
    eprintln!(
        "{}: {} packets, mean distance {:.4}, bandwidth {:.4}",
        a.group_b,
        s.distances_b.len(),
        mean(&s.distances_b),
        s.bandwidth_b
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    /// Captures whose classes differ in conversation shape, plus a manifest.
    Structural,
    /// A flow dataset with planted stable and environment-specific attributes.
    Shift,
}

pub fn synth(p: &Pipeline, kind: SynthKind, out: &Path, count: usize) -> Result<()> {
    match kind {
        SynthKind::Structural => {
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let mut manifest = csv::Writer::from_writer(create(&out.join("manifest.csv"))?);
            manifest.write_record(["path", "label", "environment_label"])?;
            for (c, class) in STRUCTURAL_CLASSES.iter().enumerate() {
                for (e, env) in ENVIRONMENTS.iter().enumerate() {
                    let name = PathBuf::from(format!("{class}-{env}.pcap"));
                    let n = count / 2 + (e == 0) as usize * (count % 2);
                    std::fs::write(out.join(&name), structural_capture(c, n, e, p.seed))?;
                    manifest.write_record([name.to_string_lossy().as_ref(), class, env])?;
                }
            }
            manifest.flush()?;
            eprintln!("wrote captures and manifest.csv to {}", out.display());
        }
        SynthKind::Shift => {
            let flows = shift_flows(&ShiftConfig {
                flows_per_cell: count,
                packets_per_flow: p.max_packets,
                seed: p.seed,
            });
            save_flows(out, &flows)?;
            eprintln!("wrote {} flows to {}", flows.len(), out.display());
        }
    }
    Ok(())
}
