//! Metrics, cross-validation, open-world thresholding, shift analysis and
//! inference timing.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::FeatureSet;
use crate::graph::{build_flow_graph, FlowGraph};
use crate::ingest::Flow;
use crate::model::train::{argmax, stratified_holdout, train, TrainConfig};
use crate::model::{GraphSat, ModelConfig};
use crate::seed::derive_seed;
use crate::stability::{stability_report, StabilityConfig};
use crate::tensor::Real;

pub const DEFAULT_THRESHOLD: f64 = 0.975;

/// Macro-averaged scores plus accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro precision, recall and F1 over the classes present in `y_true`,
/// with 0/0 taken as 0. Macro F1 is the mean of per-class F1.
pub fn macro_metrics<L: Ord>(y_true: &[L], y_pred: &[L]) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    // class -> (true positives, support, predicted)
    let mut counts: BTreeMap<&L, (usize, usize, usize)> = BTreeMap::new();
    for t in y_true {
        counts.entry(t).or_default().1 += 1;
    }
    let mut correct = 0;
    for (t, p) in y_true.iter().zip(y_pred) {
        if let Some(c) = counts.get_mut(p) {
            c.2 += 1;
        }
        if t == p {
            correct += 1;
            counts.get_mut(t).expect("present").0 += 1;
        }
    }
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for &(tp, support, predicted) in counts.values() {
        let p = ratio(tp, predicted);
        let r = ratio(tp, support);
        precision += p;
        recall += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let k = counts.len() as f64;
    Ok(Metrics {
        precision: precision / k,
        recall: recall / k,
        f1: f1 / k,
        accuracy: correct as f64 / y_true.len() as f64,
    })
}

/// `m[true][predicted]`.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract("label and prediction counts differ".into()));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= classes || p >= classes {
            return Err(Error::Contract(format!("label outside {classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Stratified k-fold test sets (each sorted). Every class needs at least `k`
/// members.
pub fn stratified_folds<L: Ord + Debug>(labels: &[L], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut groups: BTreeMap<&L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let small: Vec<String> = groups
        .iter()
        .filter(|(_, m)| m.len() < k)
        .map(|(l, m)| format!("{l:?} ({})", m.len()))
        .collect();
    if !small.is_empty() {
        return Err(Error::Data(format!(
            "classes with fewer than {k} samples: {}",
            small.join(", ")
        )));
    }
    let mut folds = vec![Vec::new(); k];
    let mut position = 0usize;
    for (c, members) in groups.values_mut().enumerate() {
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64])));
        for &i in members.iter() {
            folds[position % k].push(i);
            position += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Known(usize),
    Unknown,
}

/// Arg-max class if its probability reaches `threshold`, else unknown.
pub fn open_world_classify(probs: &[f64], threshold: f64) -> Verdict {
    if probs.is_empty() {
        return Verdict::Unknown;
    }
    let best = argmax(probs);
    if probs[best] >= threshold {
        Verdict::Known(best)
    } else {
        Verdict::Unknown
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenWorldStats {
    pub threshold: f64,
    pub held_out_class: Option<String>,
    pub known_total: usize,
    pub known_above: usize,
    pub unknown_total: usize,
    pub unknown_above: usize,
    /// Share of known-class flows whose top probability reaches the threshold.
    pub known_fraction: f64,
    /// Same for flows of the class the model never saw.
    pub unknown_fraction: f64,
}

pub fn open_world_stats(known: &[Vec<f64>], unknown: &[Vec<f64>], threshold: f64) -> OpenWorldStats {
    let above = |ps: &[Vec<f64>]| {
        ps.iter()
            .filter(|p| matches!(open_world_classify(p, threshold), Verdict::Known(_)))
            .count()
    };
    let (ka, ua) = (above(known), above(unknown));
    OpenWorldStats {
        threshold,
        held_out_class: None,
        known_total: known.len(),
        known_above: ka,
        unknown_total: unknown.len(),
        unknown_above: ua,
        known_fraction: ratio(ka, known.len()),
        unknown_fraction: ratio(ua, unknown.len()),
    }
}

/// Sorted distinct class labels and each flow's index into them.
pub fn class_indices(flows: &[Flow]) -> Result<(Vec<String>, Vec<usize>)> {
    let mut classes: Vec<String> = Vec::new();
    for (i, f) in flows.iter().enumerate() {
        match &f.label {
            Some(l) => classes.push(l.clone()),
            None => return Err(Error::Data(format!("flow {i} has no class label"))),
        }
    }
    classes.sort();
    classes.dedup();
    let labels = label_indices(flows, &classes)?;
    Ok((classes, labels))
}

/// Index of each flow's label in `classes`.
pub fn label_indices(flows: &[Flow], classes: &[String]) -> Result<Vec<usize>> {
    flows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let l = f
                .label
                .as_ref()
                .ok_or_else(|| Error::Data(format!("flow {i} has no class label")))?;
            classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::Data(format!("flow {i} has unknown class {l:?}")))
        })
        .collect()
}

pub fn build_graphs(flows: &[Flow], features: &FeatureSet, exec: Exec) -> Result<Vec<FlowGraph>> {
    exec.map(flows, |_, f| build_flow_graph(f, features)).into_iter().collect()
}

/// Class probabilities for every flow.
pub fn predict_flows<F: Real>(model: &GraphSat<F>, features: &FeatureSet, flows: &[Flow], exec: Exec) -> Result<Vec<Vec<f64>>> {
    exec.map(flows, |_, f| model.predict_proba(&build_flow_graph(f, features)?))
        .into_iter()
        .collect()
}

/// Median wall-clock milliseconds to build graphs for and classify `batch`
/// flows (cycling through `flows` if there are fewer).
pub fn time_inference<F: Real>(
    model: &GraphSat<F>,
    features: &FeatureSet,
    flows: &[Flow],
    batch: usize,
    repetitions: usize,
    exec: Exec,
) -> Result<f64> {
    if repetitions == 0 {
        return Err(Error::Config("timing needs at least one repetition".into()));
    }
    if batch == 0 {
        return Err(Error::Config("timing batch must be positive".into()));
    }
    if flows.is_empty() {
        return Err(Error::Data("no flows to time".into()));
    }
    let batch_flows: Vec<&Flow> = flows.iter().cycle().take(batch).collect();
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let out = exec.map(&batch_flows, |_, f| model.predict_proba(&build_flow_graph(f, features)?));
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        for o in out {
            o?;
        }
        times.push(elapsed);
    }
    Ok(median(&mut times))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub folds: usize,
    pub seed: u64,
    /// Hyperparameters; input dimension and class count are set per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stability: StabilityConfig,
    pub threshold: f64,
    pub timing_repetitions: usize,
    pub exec: Exec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 5,
            seed: 0,
            model: ModelConfig::new(1, 2),
            train: TrainConfig::default(),
            stability: StabilityConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            timing_repetitions: 5,
            exec: Exec::default(),
        }
    }
}

/// What a feature selector gets to see for one fold.
#[derive(Debug)]
pub struct SelectionInput<'a> {
    pub fold: usize,
    /// Indices of the training flows in the full dataset.
    pub train_indices: &'a [usize],
    pub flows: &'a [Flow],
    pub config: StabilityConfig,
}

/// Default selector: stable features of the training flows.
pub fn select_stable(input: &SelectionInput<'_>) -> Result<FeatureSet> {
    Ok(stability_report(input.flows, &input.config)?.selected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub features: FeatureSet,
    pub metrics: Metrics,
    pub confusion: Vec<Vec<usize>>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub parameter_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub classes: Vec<String>,
    pub folds: Vec<FoldReport>,
    /// Mean of the per-fold metrics.
    pub mean: Metrics,
    /// Metrics of all folds' predictions pooled together.
    pub pooled: Metrics,
    pub confusion: Vec<Vec<usize>>,
    pub ms_per_100_flows: Option<f64>,
    pub parameter_count: usize,
    pub open_world: Option<OpenWorldStats>,
}

impl EvaluationReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Rows are true classes, columns predicted classes.
    pub fn write_confusion_csv<W: Write>(&self, w: W) -> Result<()> {
        write_confusion_csv(w, &self.classes, &self.confusion)
    }
}

pub fn write_confusion_csv<W: Write>(w: W, classes: &[String], m: &[Vec<usize>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(classes.iter().cloned());
    out.write_record(&header)?;
    for (c, row) in classes.iter().zip(m) {
        let mut rec = vec![c.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

fn model_config_for(template: &ModelConfig, features: &FeatureSet, classes: usize) -> ModelConfig {
    ModelConfig {
        input_dim: features.len(),
        num_classes: classes,
        ..*template
    }
}

/// Stratified k-fold evaluation selecting stable features per fold.
pub fn cross_validate<F: Real>(flows: &[Flow], config: &EvalConfig) -> Result<EvaluationReport> {
    cross_validate_with::<F, _>(flows, config, select_stable)
}

/// [`cross_validate`] with a custom feature selector, which only ever sees
/// the fold's training flows.
pub fn cross_validate_with<F: Real, S>(flows: &[Flow], config: &EvalConfig, mut select: S) -> Result<EvaluationReport>
where
    S: FnMut(&SelectionInput<'_>) -> Result<FeatureSet>,
{
    let (classes, labels) = class_indices(flows)?;
    let named: Vec<&String> = labels.iter().map(|&l| &classes[l]).collect();
    let folds = stratified_folds(&named, config.folds, derive_seed(config.seed, &[10]))?;

    let mut reports = Vec::with_capacity(folds.len());
    let mut pooled_true = Vec::new();
    let mut pooled_pred = Vec::new();
    let mut timing = None;
    for (k, test) in folds.iter().enumerate() {
        let mut in_test = vec![false; flows.len()];
        for &i in test {
            in_test[i] = true;
        }
        let train_idx: Vec<usize> = (0..flows.len()).filter(|&i| !in_test[i]).collect();
        let train_flows: Vec<Flow> = train_idx.iter().map(|&i| flows[i].clone()).collect();
        let features = select(&SelectionInput {
            fold: k,
            train_indices: &train_idx,
            flows: &train_flows,
            config: StabilityConfig {
                seed: derive_seed(config.seed, &[12, k as u64]),
                ..config.stability
            },
        })?;

        let train_graphs = build_graphs(&train_flows, &features, config.exec)?;
        let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
        let tc = TrainConfig {
            seed: derive_seed(config.seed, &[11, k as u64]),
            ..config.train
        };
        let mc = model_config_for(&config.model, &features, classes.len());
        let (model, log) = train::<F>(&train_graphs, &train_labels, mc, &tc)?;

        let test_flows: Vec<Flow> = test.iter().map(|&i| flows[i].clone()).collect();
        let probs = predict_flows(&model, &features, &test_flows, config.exec)?;
        let y_pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let y_true: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let metrics = macro_metrics(&y_true, &y_pred)?;
        log::info!(
            "fold {k}: {} features, accuracy {:.4}, macro F1 {:.4}",
            features.len(),
            metrics.accuracy,
            metrics.f1
        );
        if k + 1 == folds.len() && config.timing_repetitions > 0 {
            timing = Some(time_inference(
                &model,
                &features,
                &test_flows,
                100,
                config.timing_repetitions,
                config.exec,
            )?);
        }
        reports.push(FoldReport {
            fold: k,
            test_indices: test.clone(),
            confusion: confusion_matrix(&y_true, &y_pred, classes.len())?,
            features,
            metrics,
            epochs_run: log.epochs.len(),
            best_epoch: log.best_epoch,
            parameter_count: model.parameter_count(),
        });
        pooled_true.extend(y_true);
        pooled_pred.extend(y_pred);
    }

    let n = reports.len() as f64;
    let mean_of = |g: fn(&Metrics) -> f64| reports.iter().map(|r| g(&r.metrics)).sum::<f64>() / n;
    let mean = Metrics {
        precision: mean_of(|m| m.precision),
        recall: mean_of(|m| m.recall),
        f1: mean_of(|m| m.f1),
        accuracy: mean_of(|m| m.accuracy),
    };
    Ok(EvaluationReport {
        confusion: confusion_matrix(&pooled_true, &pooled_pred, classes.len())?,
        pooled: macro_metrics(&pooled_true, &pooled_pred)?,
        mean,
        ms_per_100_flows: timing,
        parameter_count: reports.last().map_or(0, |r| r.parameter_count),
        classes,
        folds: reports,
        open_world: None,
    })
}

/// Train without `held_out`, then compare how often known-class test flows
/// and held-out flows clear the threshold.
pub fn open_world_experiment<F: Real>(flows: &[Flow], held_out: &str, config: &EvalConfig) -> Result<OpenWorldStats> {
    let (known, unknown): (Vec<Flow>, Vec<Flow>) = flows
        .iter()
        .cloned()
        .partition(|f| f.label.as_deref() != Some(held_out));
    if unknown.is_empty() {
        return Err(Error::Data(format!("no flows of class {held_out:?}")));
    }
    let (classes, labels) = class_indices(&known)?;
    let (train_idx, test_idx) = stratified_holdout(&labels, 0.2, derive_seed(config.seed, &[13]));
    let train_flows: Vec<Flow> = train_idx.iter().map(|&i| known[i].clone()).collect();
    let test_flows: Vec<Flow> = test_idx.iter().map(|&i| known[i].clone()).collect();
    let features = select_stable(&SelectionInput {
        fold: 0,
        train_indices: &train_idx,
        flows: &train_flows,
        config: StabilityConfig {
            seed: derive_seed(config.seed, &[12, 0]),
            ..config.stability
        },
    })?;
    let graphs = build_graphs(&train_flows, &features, config.exec)?;
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let tc = TrainConfig {
        seed: derive_seed(config.seed, &[11, 0]),
        ..config.train
    };
    let mc = model_config_for(&config.model, &features, classes.len());
    let (model, _) = train::<F>(&graphs, &train_labels, mc, &tc)?;
    let known_probs = predict_flows(&model, &features, &test_flows, config.exec)?;
    let unknown_probs = predict_flows(&model, &features, &unknown, config.exec)?;
    let mut stats = open_world_stats(&known_probs, &unknown_probs, config.threshold);
    stats.held_out_class = Some(held_out.to_string());
    Ok(stats)
}

/// Distances of two groups' packets to their pooled centroid, with a
/// Gaussian density estimate per group on a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftAnalysis {
    pub features: FeatureSet,
    pub centroid: Vec<f64>,
    pub distances_a: Vec<f64>,
    pub distances_b: Vec<f64>,
    pub bandwidth_a: f64,
    pub bandwidth_b: f64,
    pub grid: Vec<f64>,
    pub density_a: Vec<f64>,
    pub density_b: Vec<f64>,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `0.9 · min(σ, IQR/1.34) · n^(-1/5)`. When one spread measure is zero
/// the other is used; when both are, the bandwidth is 1.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 1.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let sigma = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)) / 1.34;
    let spread = match (sigma > 0.0, iqr > 0.0) {
        (true, true) => sigma.min(iqr),
        (true, false) => sigma,
        (false, true) => iqr,
        (false, false) => return 1.0,
    };
    0.9 * spread * (n as f64).powf(-0.2)
}

/// Gaussian kernel density of `samples` evaluated at each grid point.
pub fn kde(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| {
            samples
                .iter()
                .map(|&s| {
                    let u = (x - s) / bandwidth;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect()
}

fn packet_vectors<'a>(flows: &'a [Flow], features: &'a FeatureSet) -> impl Iterator<Item = Vec<f64>> + 'a {
    flows
        .iter()
        .flat_map(|f| f.packets.iter())
        .map(|p| p.attributes.project(features.indices()))
}

pub fn shift_analysis(group_a: &[Flow], group_b: &[Flow], features: &FeatureSet, grid_points: usize) -> Result<ShiftAnalysis> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::Data("shift analysis needs flows in both groups".into()));
    }
    if grid_points < 2 {
        return Err(Error::Config("density grid needs at least 2 points".into()));
    }
    let a: Vec<Vec<f64>> = packet_vectors(group_a, features).collect();
    let b: Vec<Vec<f64>> = packet_vectors(group_b, features).collect();
    let mut centroid = vec![0.0; features.len()];
    for v in a.iter().chain(&b) {
        for (c, x) in centroid.iter_mut().zip(v) {
            *c += x;
        }
    }
    let total = (a.len() + b.len()) as f64;
    centroid.iter_mut().for_each(|c| *c /= total);

    let distances_a: Vec<f64> = a.iter().map(|v| euclidean(v, &centroid)).collect();
    let distances_b: Vec<f64> = b.iter().map(|v| euclidean(v, &centroid)).collect();
    let bandwidth_a = silverman_bandwidth(&distances_a);
    let bandwidth_b = silverman_bandwidth(&distances_b);
    let pad = 3.0 * bandwidth_a.max(bandwidth_b);
    let (lo, hi) = distances_a
        .iter()
        .chain(&distances_b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    let (lo, hi) = ((lo - pad).max(0.0), hi + pad);
    let step = (hi - lo) / (grid_points - 1) as f64;
    let grid: Vec<f64> = (0..grid_points).map(|i| lo + step * i as f64).collect();
    Ok(ShiftAnalysis {
        density_a: kde(&distances_a, bandwidth_a, &grid),
        density_b: kde(&distances_b, bandwidth_b, &grid),
        features: features.clone(),
        centroid,
        distances_a,
        distances_b,
        bandwidth_a,
        bandwidth_b,
        grid,
    })
}

impl ShiftAnalysis {
    /// `distance,density_a,density_b`.
    pub fn write_density_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["distance", "density_a", "density_b"])?;
        for ((x, da), db) in self.grid.iter().zip(&self.density_a).zip(&self.density_b) {
            out.write_record([x.to_string(), da.to_string(), db.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// `group,distance`, one row per packet.
    pub fn write_distances_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["group", "distance"])?;
        for (g, ds) in [("a", &self.distances_a), ("b", &self.distances_b)] {
            for d in ds {
                out.write_record([g.to_string(), d.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}
