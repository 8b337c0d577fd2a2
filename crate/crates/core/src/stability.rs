//! Environment-stability screening of packet attributes.
//!
//! For every class the class's flows are split into two environment groups
//! and compared against each other (inter-class divergence) and against all
//! other classes (extra-class divergence). A feature whose class-size
//! weighted sum of `inter - extra` is negative is kept.
//!
//! Distributions are 64-bin equal-width histograms of per-packet values over
//! the training min–max of each feature. Divergences use log base 2.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{ATTRIBUTE_COUNT, ATTRIBUTE_NAMES};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::FeatureSet;
use crate::ingest::Flow;
use crate::seed::derive_seed;

pub const HISTOGRAM_BINS: usize = 64;

/// Discrete distribution over shared bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHistogram {
    pub bin_edges: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Equal-width binning of one feature over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binning {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Binning {
    pub fn over(values: impl IntoIterator<Item = f64>, bins: usize) -> Option<Self> {
        let (lo, hi) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        (lo <= hi).then_some(Binning {
            lo,
            hi,
            bins: if lo == hi { 1 } else { bins },
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.bins == 1
    }

    pub fn edges(&self) -> Vec<f64> {
        if self.is_degenerate() {
            return vec![self.lo, self.hi];
        }
        let width = (self.hi - self.lo) / self.bins as f64;
        let mut e: Vec<f64> = (0..self.bins).map(|i| self.lo + width * i as f64).collect();
        e.push(self.hi);
        e
    }

    /// Bin of `v`; values outside the range clamp to the end bins.
    pub fn bin(&self, v: f64) -> usize {
        if self.is_degenerate() {
            return 0;
        }
        let t = (v - self.lo) / (self.hi - self.lo) * self.bins as f64;
        if t.is_nan() || t <= 0.0 {
            0
        } else {
            (t as usize).min(self.bins - 1)
        }
    }
}

impl FeatureHistogram {
    /// Normalized counts. `counts` must be non-empty with a positive total.
    pub fn from_counts(bin_edges: Vec<f64>, counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Data("histogram of an empty sample".into()));
        }
        if bin_edges.len() != counts.len() + 1 {
            return Err(Error::Contract(format!(
                "{} edges for {} bins",
                bin_edges.len(),
                counts.len()
            )));
        }
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(FeatureHistogram { bin_edges, probs })
    }

    pub fn from_values(values: &[f64], binning: &Binning) -> Result<Self> {
        let mut counts = vec![0u64; binning.bins];
        for &v in values {
            counts[binning.bin(v)] += 1;
        }
        Self::from_counts(binning.edges(), &counts)
    }

    /// Histogram over unit-spaced edges `0, 1, ..., len`.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        FeatureHistogram {
            bin_edges: (0..=probs.len()).map(|i| i as f64).collect(),
            probs,
        }
    }
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * (pi / mi).log2())
        .sum()
}

fn jsd_probs(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
    let d = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    d.clamp(0.0, 1.0)
}

/// Jensen–Shannon divergence (base 2) between histograms on identical bins.
pub fn jsd(p: &FeatureHistogram, q: &FeatureHistogram) -> Result<f64> {
    if p.bin_edges != q.bin_edges || p.probs.len() != q.probs.len() {
        return Err(Error::Contract("histograms do not share bin edges".into()));
    }
    Ok(jsd_probs(&p.probs, &q.probs))
}

/// Two disjoint index groups drawn from one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvironmentSplit {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    /// Environment labels routed to each side (empty for a random split).
    pub first_labels: Vec<Option<String>>,
    pub second_labels: Vec<Option<String>>,
    pub warning: Option<String>,
}

/// Split the flows at `members` into two groups.
///
/// With at least two distinct environment labels the labels themselves are
/// shuffled and halved, and flows follow their label. Otherwise the flows
/// are shuffled and halved. The same seed gives the same split.
pub fn split_environments(
    members: &[usize],
    environment: &[Option<String>],
    seed: u64,
) -> Result<EnvironmentSplit> {
    if members.len() < 2 {
        return Err(Error::Data(format!(
            "a class needs at least 2 samples to split, got {}",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: BTreeSet<&Option<String>> = members.iter().map(|&i| &environment[i]).collect();
    let any_label = labels.iter().any(|l| l.is_some());

    if labels.len() >= 2 {
        let mut shuffled: Vec<Option<String>> = labels.into_iter().cloned().collect();
        shuffled.shuffle(&mut rng);
        let second_labels = shuffled.split_off(shuffled.len() / 2);
        let first_labels = shuffled;
        let (first, second) = members
            .iter()
            .partition(|&&i| first_labels.contains(&environment[i]));
        return Ok(EnvironmentSplit {
            first,
            second,
            first_labels,
            second_labels,
            warning: None,
        });
    }

    let mut shuffled = members.to_vec();
    shuffled.shuffle(&mut rng);
    let second = shuffled.split_off(shuffled.len() / 2);
    Ok(EnvironmentSplit {
        first: shuffled,
        second,
        first_labels: Vec::new(),
        second_labels: Vec::new(),
        warning: any_label.then(|| "only one environment label; split flows at random".to_string()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub seed: u64,
    /// Number of seeded environment splits averaged per class.
    pub splits: usize,
    pub bins: usize,
    pub exec: Exec,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            seed: 0,
            splits: 1,
            bins: HISTOGRAM_BINS,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub classes: Vec<String>,
    /// `fd_matrix[f][l]`: inter-class minus extra-class divergence.
    pub fd_matrix: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
    pub weighted_diff: Vec<f64>,
    pub selected: FeatureSet,
    pub warnings: Vec<String>,
}

/// Labeled training data viewed per flow.
struct Labeled<'a> {
    class_of: Vec<usize>,
    environment: Vec<Option<String>>,
    flows: &'a [Flow],
}

fn label_flows(flows: &[Flow]) -> Result<(Vec<String>, Labeled<'_>)> {
    let mut classes = BTreeSet::new();
    for (i, f) in flows.iter().enumerate() {
        let l = f
            .label
            .as_ref()
            .ok_or_else(|| Error::Data(format!("flow {i} has no class label")))?;
        classes.insert(l.clone());
    }
    let classes: Vec<String> = classes.into_iter().collect();
    let class_of = flows
        .iter()
        .map(|f| classes.binary_search(f.label.as_ref().unwrap()).unwrap())
        .collect();
    let environment = flows.iter().map(|f| f.environment_label.clone()).collect();
    Ok((
        classes,
        Labeled {
            class_of,
            environment,
            flows,
        },
    ))
}

/// The FD matrix along with class metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FdMatrix {
    pub classes: Vec<String>,
    pub class_counts: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Per-feature, per-class divergence differences over labeled flows.
pub fn compute_fd_matrix(flows: &[Flow], config: &StabilityConfig) -> Result<FdMatrix> {
    if config.splits == 0 {
        return Err(Error::Config("at least one environment split is required".into()));
    }
    if config.bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let (classes, data) = label_flows(flows)?;
    if classes.len() < 2 {
        return Err(Error::Data(format!(
            "feature selection needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let mut warnings = Vec::new();
    let class_counts: Vec<usize> = (0..classes.len())
        .map(|c| data.class_of.iter().filter(|&&x| x == c).count())
        .collect();

    // Per (class, split): the flow indices of T_I and T_II.
    let mut splits: Vec<Vec<(Vec<usize>, Vec<usize>)>> = Vec::with_capacity(classes.len());
    for (c, name) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..flows.len()).filter(|&i| data.class_of[i] == c).collect();
        if members.len() < 2 {
            let msg = format!("class `{name}` has {} sample(s); skipped", members.len());
            log::warn!("{msg}");
            warnings.push(msg);
            splits.push(Vec::new());
            continue;
        }
        let mut per_split = Vec::with_capacity(config.splits);
        for s in 0..config.splits {
            let split = split_environments(
                &members,
                &data.environment,
                derive_seed(config.seed, &[c as u64, s as u64]),
            )?;
            if let Some(w) = split.warning {
                let msg = format!("class `{name}`: {w}");
                if !warnings.contains(&msg) {
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
            }
            per_split.push((split.first, split.second));
        }
        splits.push(per_split);
    }

    let values = config.exec.map_range(ATTRIBUTE_COUNT, |f| {
        feature_row(&data, f, classes.len(), &splits, config.bins)
    });
    Ok(FdMatrix {
        classes,
        class_counts,
        values,
        warnings,
    })
}

fn feature_row(
    data: &Labeled<'_>,
    f: usize,
    num_classes: usize,
    splits: &[Vec<(Vec<usize>, Vec<usize>)>],
    bins: usize,
) -> Vec<f64> {
    let binning = Binning::over(
        data.flows
            .iter()
            .flat_map(|fl| fl.packets.iter().map(move |p| p.attributes[f])),
        bins,
    )
    .expect("training set has packets");
    // Per-flow bin counts for this feature.
    let flow_counts: Vec<Vec<u64>> = data
        .flows
        .iter()
        .map(|fl| {
            let mut c = vec![0u64; binning.bins];
            for p in &fl.packets {
                c[binning.bin(p.attributes[f])] += 1;
            }
            c
        })
        .collect();
    let pooled = |idx: &mut dyn Iterator<Item = usize>| -> Vec<f64> {
        let mut c = vec![0u64; binning.bins];
        for i in idx {
            for (a, b) in c.iter_mut().zip(&flow_counts[i]) {
                *a += b;
            }
        }
        let total: u64 = c.iter().sum();
        c.iter().map(|&x| x as f64 / total as f64).collect()
    };

    (0..num_classes)
        .map(|c| {
            if splits[c].is_empty() {
                return 0.0;
            }
            let rest = pooled(&mut (0..data.flows.len()).filter(|&i| data.class_of[i] != c));
            let sum: f64 = splits[c]
                .iter()
                .map(|(t1, t2)| {
                    let p1 = pooled(&mut t1.iter().copied());
                    let p2 = pooled(&mut t2.iter().copied());
                    jsd_probs(&p1, &p2) - jsd_probs(&p1, &rest)
                })
                .sum();
            sum / splits[c].len() as f64
        })
        .collect()
}

/// Outcome of the weighted sign test.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub weighted_diff: Vec<f64>,
    pub selected: FeatureSet,
    pub fell_back: bool,
}

/// Keep features whose class-size weighted FD sum is negative. Falls back to
/// the full set when nothing qualifies.
pub fn select_stable_features(fd: &[Vec<f64>], class_counts: &[usize]) -> Result<Selection> {
    let weighted_diff: Vec<f64> = fd
        .iter()
        .map(|row| {
            if row.len() != class_counts.len() {
                return Err(Error::Contract(format!(
                    "FD row has {} classes, counts have {}",
                    row.len(),
                    class_counts.len()
                )));
            }
            Ok(row.iter().zip(class_counts).map(|(d, &n)| d * n as f64).sum())
        })
        .collect::<Result<_>>()?;
    let keep: Vec<usize> = (0..weighted_diff.len()).filter(|&f| weighted_diff[f] < 0.0).collect();
    let (selected, fell_back) = if keep.is_empty() {
        log::warn!("no feature passed the stability test; keeping all features");
        (FeatureSet::all(), true)
    } else {
        (FeatureSet::new(keep)?, false)
    };
    Ok(Selection {
        weighted_diff,
        selected,
        fell_back,
    })
}

/// FD matrix plus selection in one report.
pub fn stability_report(flows: &[Flow], config: &StabilityConfig) -> Result<StabilityReport> {
    let fd = compute_fd_matrix(flows, config)?;
    let sel = select_stable_features(&fd.values, &fd.class_counts)?;
    let mut warnings = fd.warnings;
    if sel.fell_back {
        warnings.push("no stable feature found; using all features".into());
    }
    Ok(StabilityReport {
        classes: fd.classes,
        fd_matrix: fd.values,
        class_counts: fd.class_counts,
        weighted_diff: sel.weighted_diff,
        selected: sel.selected,
        warnings,
    })
}

impl StabilityReport {
    /// `feature,fd_<class>...,weighted_diff,selected`, one row per feature.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["feature".to_string()];
        header.extend(self.classes.iter().map(|c| format!("fd_{c}")));
        header.push("weighted_diff".into());
        header.push("selected".into());
        out.write_record(&header)?;
        for (f, row) in self.fd_matrix.iter().enumerate() {
            let mut rec = vec![ATTRIBUTE_NAMES[f].to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.12}")));
            rec.push(format!("{:.12}", self.weighted_diff[f]));
            rec.push((self.selected.contains(f) as u8).to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn h(p: &[f64]) -> FeatureHistogram {
        FeatureHistogram::from_probs(p.to_vec())
    }

    #[test]
    fn jsd_reference_values() {
        assert_eq!(jsd(&h(&[0.2, 0.3, 0.5]), &h(&[0.2, 0.3, 0.5])).unwrap(), 0.0);
        assert!((jsd(&h(&[1.0, 0.0]), &h(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-12);
        // independent scalar evaluation: 0.0487949406953985
        let d = jsd(&h(&[0.5, 0.5]), &h(&[0.75, 0.25])).unwrap();
        assert!((d - 0.0487949406953985).abs() < 1e-12, "{d}");
    }

    #[test]
    fn jsd_rejects_mismatched_edges() {
        let a = h(&[0.5, 0.5]);
        let mut b = h(&[0.5, 0.5]);
        b.bin_edges[1] = 0.5;
        assert!(matches!(jsd(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn binning_edges_and_clamp() {
        let b = Binning::over([0.0, 64.0], 64).unwrap();
        assert_eq!(b.edges().len(), 65);
        assert_eq!(b.bin(64.0), 63);
        assert_eq!(b.bin(0.0), 0);
        assert_eq!(b.bin(1.5), 1);
        let c = Binning::over([3.0, 3.0], 64).unwrap();
        assert!(c.is_degenerate());
        let hist = FeatureHistogram::from_values(&[3.0, 3.0], &c).unwrap();
        assert_eq!(hist.probs, vec![1.0]);
    }

    #[test]
    fn environment_split_is_seeded_and_nonempty() {
        let env: Vec<Option<String>> =
            ["a", "b", "c", "d"].iter().cycle().take(20).map(|s| Some(s.to_string())).collect();
        let members: Vec<usize> = (0..20).collect();
        let s1 = split_environments(&members, &env, 7).unwrap();
        let s2 = split_environments(&members, &env, 7).unwrap();
        assert_eq!(s1, s2);
        assert!(!s1.first_labels.is_empty() && !s1.second_labels.is_empty());
        assert_eq!(s1.first_labels.len() + s1.second_labels.len(), 4);
        for &i in &s1.first {
            assert!(s1.first_labels.contains(&env[i]));
        }
        assert_eq!(s1.first.len() + s1.second.len(), 20);
        assert!(s1.warning.is_none());
    }

    #[test]
    fn unlabeled_split_halves() {
        let env = vec![None; 100];
        let members: Vec<usize> = (0..100).collect();
        let s = split_environments(&members, &env, 1).unwrap();
        assert_eq!((s.first.len(), s.second.len()), (50, 50));
        assert!(s.warning.is_none());

        let one = vec![Some("x".to_string()); 10];
        let s = split_environments(&members[..10], &one, 1).unwrap();
        assert!(s.warning.is_some());
        assert_eq!(s.first.len(), 5);
    }

    #[test]
    fn selection_arithmetic() {
        let sel = select_stable_features(&[vec![-0.2]], &[10]).unwrap();
        assert_eq!(sel.weighted_diff, vec![-2.0]);
        assert!(sel.selected.contains(0));

        let mut fd = vec![vec![0.1, -0.1]; 39];
        fd[3] = vec![-0.1, 0.1];
        let sel = select_stable_features(&fd, &[100, 10]).unwrap();
        assert!((sel.weighted_diff[0] - 9.0).abs() < 1e-12);
        assert_eq!(sel.selected.indices(), &[3]);

        let sel = select_stable_features(&vec![vec![0.5, 0.5]; 39], &[1, 1]).unwrap();
        assert!(sel.fell_back);
        assert_eq!(sel.selected, FeatureSet::all());
    }

    proptest! {
        #[test]
        fn jsd_symmetric_and_bounded(raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..64)) {
            let sp: f64 = raw.iter().map(|x| x.0).sum::<f64>() + 1e-9;
            let sq: f64 = raw.iter().map(|x| x.1).sum::<f64>() + 1e-9;
            let p = h(&raw.iter().map(|x| x.0 / sp).collect::<Vec<_>>());
            let q = h(&raw.iter().map(|x| x.1 / sq).collect::<Vec<_>>());
            let a = jsd(&p, &q).unwrap();
            let b = jsd(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn selection_scale_invariant(
            fd in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 39),
            counts in prop::collection::vec(1usize..500, 3),
            k in 1usize..20,
        ) {
            let a = select_stable_features(&fd, &counts).unwrap();
            let scaled: Vec<usize> = counts.iter().map(|c| c * k).collect();
            let b = select_stable_features(&fd, &scaled).unwrap();
            prop_assert_eq!(a.selected, b.selected);
        }
    }
}
