//! Graph classifier: two mean-aggregation hops with neighbor sampling,
//! multi-head graph attention, sigmoid mean readout, and a
//! dropout/linear/softmax head.
//!
//! Gradients are derived by hand for each stage; `tests/gradcheck.rs`
//! checks them against central differences.

pub mod checkpoint;
pub mod sampling;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::FlowGraph;
use crate::seed::{derive_seed, Fnv64};
use crate::tensor::{dot, Matrix, Real};

pub use sampling::{aggregation_set, sample_neighbors};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Neighbors sampled for the hop closest to the target node.
    pub sample_first: usize,
    /// Neighbors sampled for the outer hop.
    pub sample_second: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden: 128,
            heads: 4,
            sample_first: 10,
            sample_second: 10,
            num_classes,
            dropout: 0.7,
            leaky_slope: 0.2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.hidden == 0 || self.heads == 0 {
            return fail("dimensions and head count must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.sample_first == 0 || self.sample_second == 0 {
            return fail("sample sizes must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Parameter tensor shapes in storage order.
    pub fn shapes(&self) -> [(&'static str, (usize, usize)); 8] {
        let h = self.hidden;
        [
            ("sage1_weight", (self.input_dim, h)),
            ("sage1_bias", (1, h)),
            ("sage2_weight", (h, h)),
            ("sage2_bias", (1, h)),
            ("gat_weight", (h, h)),
            ("gat_attention", (self.heads, 2 * self.head_dim())),
            ("classifier_weight", (h, self.num_classes)),
            ("classifier_bias", (1, self.num_classes)),
        ]
    }

    /// Closed-form trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden, self.num_classes);
        d * h + h + h * h + h + h * h + 2 * h + h * c + c
    }
}

/// All trainable tensors. Also used as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub sage1_w: Matrix<F>,
    pub sage1_b: Matrix<F>,
    pub sage2_w: Matrix<F>,
    pub sage2_b: Matrix<F>,
    /// Head projections side by side: head `k` owns columns `k*hd..(k+1)*hd`.
    pub gat_w: Matrix<F>,
    /// Row `k` is `[a_src | a_dst]` of head `k`.
    pub gat_att: Matrix<F>,
    pub cls_w: Matrix<F>,
    pub cls_b: Matrix<F>,
}

impl<F: Real> Params<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let s = cfg.shapes();
        let z = |i: usize| Matrix::zeros(s[i].1 .0, s[i].1 .1);
        Params {
            sage1_w: z(0),
            sage1_b: z(1),
            sage2_w: z(2),
            sage2_b: z(3),
            gat_w: z(4),
            gat_att: z(5),
            cls_w: z(6),
            cls_b: z(7),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let glorot = |m: &mut Matrix<F>, fan_in: usize, fan_out: usize, rng: &mut R| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in m.as_mut_slice() {
                *x = F::of(rng.gen_range(-limit..limit));
            }
        };
        let (d, h, hd, c) = (cfg.input_dim, cfg.hidden, cfg.head_dim(), cfg.num_classes);
        glorot(&mut p.sage1_w, d, h, rng);
        glorot(&mut p.sage2_w, h, h, rng);
        glorot(&mut p.gat_w, h, hd, rng);
        glorot(&mut p.gat_att, 2 * hd, 1, rng);
        glorot(&mut p.cls_w, h, c, rng);
        p
    }

    pub fn tensors(&self) -> [&Matrix<F>; 8] {
        [
            &self.sage1_w,
            &self.sage1_b,
            &self.sage2_w,
            &self.sage2_b,
            &self.gat_w,
            &self.gat_att,
            &self.cls_w,
            &self.cls_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<F>; 8] {
        [
            &mut self.sage1_w,
            &mut self.sage1_b,
            &mut self.sage2_w,
            &mut self.sage2_b,
            &mut self.gat_w,
            &mut self.gat_att,
            &mut self.cls_w,
            &mut self.cls_b,
        ]
    }

    pub fn add_assign(&mut self, other: &Params<F>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            sage1_w: self.sage1_w.cast(),
            sage1_b: self.sage1_b.cast(),
            sage2_w: self.sage2_w.cast(),
            sage2_b: self.sage2_b.cast(),
            gat_w: self.gat_w.cast(),
            gat_att: self.gat_att.cast(),
            cls_w: self.cls_w.cast(),
            cls_b: self.cls_b.cast(),
        }
    }
}

/// Per-dimension standardization fitted on training nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Scaler {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(graphs: &[&FlowGraph], dim: usize) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for g in graphs {
            for i in 0..g.num_nodes {
                for (k, &x) in g.node(i).iter().enumerate() {
                    sum[k] += x;
                    sq[k] += x * x;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n as f64 - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Scaler { mean, std }
    }

    pub fn apply<F: Real>(&self, g: &FlowGraph) -> Matrix<F> {
        Matrix::from_fn(g.num_nodes, g.dim, |i, k| {
            F::of((g.attributes[i * g.dim + k] - self.mean[k]) / self.std[k])
        })
    }
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Sampled aggregation sets for both hops of one graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    /// Sets used to build first-layer embeddings (outer hop).
    pub outer: Vec<Vec<usize>>,
    /// Sets used to aggregate first-layer embeddings into the targets.
    pub inner: Vec<Vec<usize>>,
    /// Full neighborhoods plus self, used by attention.
    pub attention: Vec<Vec<usize>>,
}

impl Neighborhoods {
    pub fn sample<R: Rng>(adj: &[Vec<usize>], cfg: &ModelConfig, rng: &mut R) -> Self {
        let outer = (0..adj.len())
            .map(|v| aggregation_set(&adj[v], v, cfg.sample_second, rng))
            .collect();
        let inner = (0..adj.len())
            .map(|v| aggregation_set(&adj[v], v, cfg.sample_first, rng))
            .collect();
        Neighborhoods {
            outer,
            inner,
            attention: attention_sets(adj),
        }
    }

    /// Inference-time sampling that does not depend on node numbering: each
    /// node draws from its own generator keyed by its content, over
    /// neighbors ordered by content. Nodes with identical attributes are
    /// ordered by index.
    pub fn canonical(g: &FlowGraph, cfg: &ModelConfig) -> Self {
        let adj = g.adjacency();
        let hashes = node_hashes(g);
        let base = canonical_seed(g);
        let draw = |hop: u64, s: usize| -> Vec<Vec<usize>> {
            (0..adj.len())
                .map(|v| {
                    let mut by_content = adj[v].clone();
                    by_content.sort_by_key(|&u| (hashes[u], u));
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &[hop, hashes[v]]));
                    let sampled = sample_neighbors(&by_content, v, s, &mut rng);
                    let mut set = vec![v];
                    set.extend(sampled.into_iter().filter(|&u| u != v));
                    set[1..].sort_unstable();
                    set.dedup();
                    set
                })
                .collect()
        };
        Neighborhoods {
            outer: draw(0, cfg.sample_second),
            inner: draw(1, cfg.sample_first),
            attention: attention_sets(&adj),
        }
    }
}

fn attention_sets(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    (0..adj.len())
        .map(|v| {
            let mut s = vec![v];
            s.extend(adj[v].iter().copied().filter(|&u| u != v));
            s
        })
        .collect()
}

/// Row-wise mean over each aggregation set (self first, then neighbors
/// ascending).
pub fn mean_aggregate<F: Real>(x: &Matrix<F>, sets: &[Vec<usize>]) -> Matrix<F> {
    let mut out = Matrix::zeros(sets.len(), x.cols());
    for (v, set) in sets.iter().enumerate() {
        let row = out.row_mut(v);
        for &u in set {
            for (o, &xu) in row.iter_mut().zip(x.row(u)) {
                *o += xu;
            }
        }
        let n = F::of(set.len() as f64);
        row.iter_mut().for_each(|o| *o = *o / n);
    }
    out
}

fn relu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

fn elu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        x.exp() - F::one()
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Numerically stable softmax.
pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Attention weights of one node for one head.
#[derive(Debug, Clone)]
pub struct AttentionRow<F> {
    pub members: Vec<usize>,
    pub pre: Vec<F>,
    pub alpha: Vec<F>,
}

/// Output and intermediates of the attention block.
#[derive(Debug, Clone)]
pub struct AttentionOut<F> {
    pub z: Matrix<F>,
    pub u: Matrix<F>,
    pub out: Matrix<F>,
    /// `rows[head][node]`.
    pub rows: Vec<Vec<AttentionRow<F>>>,
}

/// Multi-head attention over `sets` (each starting with the node itself).
pub fn gat_forward<F: Real>(
    h: &Matrix<F>,
    sets: &[Vec<usize>],
    weight: &Matrix<F>,
    attention: &Matrix<F>,
    heads: usize,
    slope: F,
) -> AttentionOut<F> {
    let n = h.rows();
    let hd = weight.cols() / heads;
    let z = h.matmul(weight);
    let mut u = Matrix::zeros(n, weight.cols());
    let mut rows = Vec::with_capacity(heads);
    for k in 0..heads {
        let cols = k * hd..(k + 1) * hd;
        let a = attention.row(k);
        let (a_src, a_dst) = a.split_at(hd);
        let src: Vec<F> = (0..n).map(|i| dot(&z.row(i)[cols.clone()], a_src)).collect();
        let dst: Vec<F> = (0..n).map(|j| dot(&z.row(j)[cols.clone()], a_dst)).collect();
        let mut head_rows = Vec::with_capacity(n);
        for i in 0..n {
            let members = sets[i].clone();
            let pre: Vec<F> = members.iter().map(|&j| src[i] + dst[j]).collect();
            let scores: Vec<F> = pre
                .iter()
                .map(|&e| if e > F::zero() { e } else { e * slope })
                .collect();
            let alpha = softmax(&scores);
            let out_row = &mut u.row_mut(i)[cols.clone()];
            for (&j, &w) in members.iter().zip(&alpha) {
                for (o, &zj) in out_row.iter_mut().zip(&z.row(j)[cols.clone()]) {
                    *o += w * zj;
                }
            }
            head_rows.push(AttentionRow { members, pre, alpha });
        }
        rows.push(head_rows);
    }
    let out = u.map(elu);
    AttentionOut { z, u, out, rows }
}

/// Element-wise sigmoid of the node mean.
pub fn readout<F: Real>(h: &Matrix<F>) -> Vec<F> {
    let mut m = vec![F::zero(); h.cols()];
    h.add_col_sums(&mut m);
    let n = F::of(h.rows() as f64);
    m.iter().map(|&s| sigmoid(s / n)).collect()
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub neighborhoods: Neighborhoods,
    pub x: Matrix<F>,
    pub m1: Matrix<F>,
    pub p1: Matrix<F>,
    pub h1: Matrix<F>,
    pub m2: Matrix<F>,
    pub p2: Matrix<F>,
    pub h2: Matrix<F>,
    pub attention: AttentionOut<F>,
    pub readout: Vec<F>,
    /// Per-unit multiplier applied by dropout (0 or `1/(1-p)`; 1 at inference).
    pub dropout_scale: Vec<F>,
    pub dropped: Vec<F>,
    pub logits: Vec<F>,
    pub probs: Vec<F>,
}

/// A model with its configuration and input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSat<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
    pub scaler: Scaler,
}

impl<F: Real> GraphSat<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(GraphSat {
            params: Params::init(&config, &mut rng),
            scaler: Scaler::identity(config.input_dim),
            config,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_input(&self, g: &FlowGraph) -> Result<()> {
        if g.dim != self.config.input_dim {
            return Err(Error::Contract(format!(
                "graph attribute dimension {} differs from model input {}",
                g.dim, self.config.input_dim
            )));
        }
        if g.num_nodes == 0 {
            return Err(Error::Contract("graph has no nodes".into()));
        }
        Ok(())
    }

    /// Two mean-aggregation hops on standardized inputs.
    pub fn sage_forward(&self, x: &Matrix<F>, nb: &Neighborhoods) -> [Matrix<F>; 6] {
        let p = &self.params;
        let m1 = mean_aggregate(x, &nb.outer);
        let mut p1 = m1.matmul(&p.sage1_w);
        p1.add_row(p.sage1_b.as_slice());
        let h1 = p1.map(relu);
        let m2 = mean_aggregate(&h1, &nb.inner);
        let mut p2 = m2.matmul(&p.sage2_w);
        p2.add_row(p.sage2_b.as_slice());
        let h2 = p2.map(relu);
        [m1, p1, h1, m2, p2, h2]
    }

    /// Full forward pass with given neighborhoods and dropout multipliers.
    pub fn forward_with(&self, g: &FlowGraph, nb: Neighborhoods, dropout_scale: Vec<F>) -> Result<ForwardCache<F>> {
        self.check_input(g)?;
        let x: Matrix<F> = self.scaler.apply(g);
        let [m1, p1, h1, m2, p2, h2] = self.sage_forward(&x, &nb);
        let attention = gat_forward(
            &h2,
            &nb.attention,
            &self.params.gat_w,
            &self.params.gat_att,
            self.config.heads,
            F::of(self.config.leaky_slope),
        );
        let r = readout(&attention.out);
        let dropped: Vec<F> = r.iter().zip(&dropout_scale).map(|(&a, &s)| a * s).collect();
        let mut logits = self.params.cls_b.as_slice().to_vec();
        for (i, &ri) in dropped.iter().enumerate() {
            if ri == F::zero() {
                continue;
            }
            for (l, &w) in logits.iter_mut().zip(self.params.cls_w.row(i)) {
                *l += ri * w;
            }
        }
        let probs = softmax(&logits);
        Ok(ForwardCache {
            neighborhoods: nb,
            x,
            m1,
            p1,
            h1,
            m2,
            p2,
            h2,
            attention,
            readout: r,
            dropout_scale,
            dropped,
            logits,
            probs,
        })
    }

    /// Forward pass drawing sampling and dropout from `rng`.
    pub fn forward<R: Rng>(&self, g: &FlowGraph, mode: Mode, rng: &mut R) -> Result<ForwardCache<F>> {
        let nb = Neighborhoods::sample(&g.adjacency(), &self.config, rng);
        let scale = dropout_mask(self.config.hidden, self.config.dropout, mode, rng);
        self.forward_with(g, nb, scale)
    }

    /// Inference-mode forward pass with content-keyed sampling.
    pub fn infer(&self, g: &FlowGraph) -> Result<ForwardCache<F>> {
        self.check_input(g)?;
        let nb = Neighborhoods::canonical(g, &self.config);
        self.forward_with(g, nb, vec![F::one(); self.config.hidden])
    }

    /// Inference-mode class probabilities; repeated calls and node
    /// relabelings agree.
    pub fn predict_proba(&self, g: &FlowGraph) -> Result<Vec<f64>> {
        Ok(self.infer(g)?.probs.iter().map(|p| p.as_f64()).collect())
    }

    /// Accumulate `scale * d(-log p_target)/dθ` into `grads`.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&self, c: &ForwardCache<F>, target: usize, scale: F, grads: &mut Params<F>) {
        let p = &self.params;
        let cfg = &self.config;
        let hidden = cfg.hidden;
        let n = c.x.rows();

        let mut dlogits = c.probs.clone();
        dlogits[target] -= F::one();
        dlogits.iter_mut().for_each(|d| *d *= scale);

        // linear head
        for (i, &ri) in c.dropped.iter().enumerate() {
            for (g, &dl) in grads.cls_w.row_mut(i).iter_mut().zip(&dlogits) {
                *g += ri * dl;
            }
        }
        for (g, &dl) in grads.cls_b.as_mut_slice().iter_mut().zip(&dlogits) {
            *g += dl;
        }
        // dropout, sigmoid, mean
        let dmean: Vec<F> = (0..hidden)
            .map(|i| {
                let dr = dot(p.cls_w.row(i), &dlogits) * c.dropout_scale[i];
                let r = c.readout[i];
                dr * r * (F::one() - r) / F::of(n as f64)
            })
            .collect();

        // attention block
        let att = &c.attention;
        let hd = cfg.head_dim();
        let slope = F::of(cfg.leaky_slope);
        let mut du = Matrix::zeros(n, hidden);
        for i in 0..n {
            for k in 0..hidden {
                let u = att.u.get(i, k);
                let d_elu = if u > F::zero() { F::one() } else { att.out.get(i, k) + F::one() };
                du.set(i, k, dmean[k] * d_elu);
            }
        }
        let mut dz = Matrix::zeros(n, hidden);
        for head in 0..cfg.heads {
            let cols = head * hd..(head + 1) * hd;
            let (a_src, a_dst) = p.gat_att.row(head).split_at(hd);
            let mut dsrc = vec![F::zero(); n];
            let mut ddst = vec![F::zero(); n];
            for i in 0..n {
                let row = &att.rows[head][i];
                let du_i = &du.row(i)[cols.clone()];
                let dalpha: Vec<F> = row
                    .members
                    .iter()
                    .map(|&j| dot(du_i, &att.z.row(j)[cols.clone()]))
                    .collect();
                for (&j, &a) in row.members.iter().zip(&row.alpha) {
                    for (dzj, &d) in dz.row_mut(j)[cols.clone()].iter_mut().zip(du_i) {
                        *dzj += a * d;
                    }
                }
                let weighted: F = row.alpha.iter().zip(&dalpha).map(|(&a, &d)| a * d).sum();
                for (idx, &j) in row.members.iter().enumerate() {
                    let de = row.alpha[idx] * (dalpha[idx] - weighted);
                    let dpre = if row.pre[idx] > F::zero() { de } else { de * slope };
                    dsrc[i] += dpre;
                    ddst[j] += dpre;
                }
            }
            let (g_src, g_dst) = grads.gat_att.row_mut(head).split_at_mut(hd);
            for i in 0..n {
                let zi = &att.z.row(i)[cols.clone()];
                for (g, &zv) in g_src.iter_mut().zip(zi) {
                    *g += dsrc[i] * zv;
                }
                for (g, &zv) in g_dst.iter_mut().zip(zi) {
                    *g += ddst[i] * zv;
                }
                let dzi = &mut dz.row_mut(i)[cols.clone()];
                for ((d, &s), &t) in dzi.iter_mut().zip(a_src).zip(a_dst) {
                    *d += dsrc[i] * s + ddst[i] * t;
                }
            }
        }
        c.h2.add_tn_product(&dz, &mut grads.gat_w);
        let dh2 = dz.matmul_nt(&p.gat_w);

        // second hop
        let dp2 = relu_grad(&dh2, &c.p2);
        c.m2.add_tn_product(&dp2, &mut grads.sage2_w);
        dp2.add_col_sums(grads.sage2_b.as_mut_slice());
        let dm2 = dp2.matmul_nt(&p.sage2_w);
        let dh1 = scatter_mean_grad(&dm2, &c.neighborhoods.inner, n);

        // first hop
        let dp1 = relu_grad(&dh1, &c.p1);
        c.m1.add_tn_product(&dp1, &mut grads.sage1_w);
        dp1.add_col_sums(grads.sage1_b.as_mut_slice());
    }

    /// Mean cross-entropy and its gradient over `batch` with fixed
    /// neighborhoods and dropout (test helper for finite differences).
    pub fn loss_with(&self, batch: &[(&FlowGraph, usize, Neighborhoods, Vec<F>)]) -> Result<(F, Params<F>)> {
        let mut grads = Params::zeros(&self.config);
        let mut loss = F::zero();
        let scale = F::one() / F::of(batch.len() as f64);
        for (g, y, nb, drop) in batch {
            let c = self.forward_with(g, nb.clone(), drop.clone())?;
            loss += -c.probs[*y].ln() * scale;
            self.backward(&c, *y, scale, &mut grads);
        }
        Ok((loss, grads))
    }

    pub fn cast<G: Real>(&self) -> GraphSat<G> {
        GraphSat {
            config: self.config,
            params: self.params.cast(),
            scaler: self.scaler.clone(),
        }
    }
}

fn relu_grad<F: Real>(dout: &Matrix<F>, pre: &Matrix<F>) -> Matrix<F> {
    Matrix::from_fn(dout.rows(), dout.cols(), |i, k| {
        if pre.get(i, k) > F::zero() {
            dout.get(i, k)
        } else {
            F::zero()
        }
    })
}

fn scatter_mean_grad<F: Real>(dm: &Matrix<F>, sets: &[Vec<usize>], n: usize) -> Matrix<F> {
    let mut dx = Matrix::zeros(n, dm.cols());
    for (v, set) in sets.iter().enumerate() {
        let w = F::one() / F::of(set.len() as f64);
        for &u in set {
            for (d, &g) in dx.row_mut(u).iter_mut().zip(dm.row(v)) {
                *d += g * w;
            }
        }
    }
    dx
}

/// Inverted-dropout multipliers for `len` units.
pub fn dropout_mask<F: Real, R: Rng>(len: usize, rate: f64, mode: Mode, rng: &mut R) -> Vec<F> {
    match mode {
        Mode::Infer => vec![F::one(); len],
        Mode::Train => {
            let keep = F::of(1.0 / (1.0 - rate));
            (0..len)
                .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
                .collect()
        }
    }
}

/// Hash of each node's attribute bits.
pub fn node_hashes(g: &FlowGraph) -> Vec<u64> {
    (0..g.num_nodes)
        .map(|i| {
            let mut h = Fnv64::default();
            for x in g.node(i) {
                h.write_u64(x.to_bits());
            }
            h.finish()
        })
        .collect()
}

/// Seed derived from graph content, independent of node numbering.
pub fn canonical_seed(g: &FlowGraph) -> u64 {
    let mut node_hashes = node_hashes(g);
    node_hashes.sort_unstable();
    let mut h = Fnv64::default();
    node_hashes.iter().for_each(|&x| h.write_u64(x));
    h.write_u64(g.edges.len() as u64);
    derive_seed(h.finish(), &[])
}

/// Apply the classifier head to a readout vector.
pub fn classify<F: Real, R: Rng>(params: &Params<F>, cfg: &ModelConfig, readout: &[F], mode: Mode, rng: &mut R) -> Vec<F> {
    let scale: Vec<F> = dropout_mask(readout.len(), cfg.dropout, mode, rng);
    let mut logits = params.cls_b.as_slice().to_vec();
    for (i, (&r, &s)) in readout.iter().zip(&scale).enumerate() {
        for (l, &w) in logits.iter_mut().zip(params.cls_w.row(i)) {
            *l += r * s * w;
        }
    }
    softmax(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeKind, GraphEdge};
    use crate::ingest::Direction;

    fn graph(n: usize, dim: usize, attrs: Vec<f64>, edges: &[(usize, usize)]) -> FlowGraph {
        FlowGraph {
            num_nodes: n,
            dim,
            attributes: attrs,
            directions: vec![Direction::Forward; n],
            edges: edges.iter().map(|&(a, b)| GraphEdge::new(a, b, EdgeKind::Window)).collect(),
            label: None,
            environment_label: None,
        }
    }

    fn identity_sage(dim: usize) -> GraphSat<f64> {
        let mut cfg = ModelConfig::new(dim, 2);
        cfg.hidden = 4;
        cfg.heads = 1;
        cfg.sample_first = 1;
        cfg.sample_second = 1;
        let mut m = GraphSat::new(cfg, 0).unwrap();
        m.params.sage1_w = Matrix::from_fn(dim, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        m.params.sage2_w = Matrix::from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        m
    }

    #[test]
    fn identity_weights_average_node_and_neighbor() {
        let m = identity_sage(2);
        let g = graph(2, 2, vec![2.0, 4.0, 4.0, 8.0], &[(0, 1)]);
        let nb = Neighborhoods::sample(&g.adjacency(), &m.config, &mut ChaCha8Rng::seed_from_u64(1));
        let x: Matrix<f64> = m.scaler.apply(&g);
        let [.., h2] = m.sage_forward(&x, &nb);
        assert_eq!(h2.row(0), &[3.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn isolated_node_uses_itself() {
        let m = identity_sage(2);
        let g = graph(1, 2, vec![2.0, 4.0], &[]);
        let nb = Neighborhoods::sample(&g.adjacency(), &m.config, &mut ChaCha8Rng::seed_from_u64(1));
        let [.., h2] = m.sage_forward(&m.scaler.apply(&g), &nb);
        assert_eq!(h2.row(0), &[2.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_attention_vector_is_uniform() {
        let h = Matrix::<f64>::from_fn(3, 4, |i, k| (i * 4 + k) as f64 * 0.1);
        let w = Matrix::from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        let a = Matrix::zeros(2, 4);
        let sets = vec![vec![0, 1, 2], vec![1, 0], vec![2, 0]];
        let out = gat_forward(&h, &sets, &w, &a, 2, 0.2);
        assert_eq!(out.rows[0][0].alpha, vec![1.0 / 3.0; 3]);
        assert_eq!(out.rows[1][1].alpha, vec![0.5, 0.5]);

        let lone = Matrix::from_vec(1, 4, h.row(2).to_vec());
        let single = gat_forward(&lone, &[vec![0]], &w, &Matrix::from_fn(2, 4, |_, _| 0.7), 2, 0.2);
        assert_eq!(single.rows[0][0].alpha, vec![1.0]);
        let expect: Vec<f64> = lone.row(0).iter().map(|&v| elu(v)).collect();
        assert_eq!(single.out.row(0), expect.as_slice());
    }

    #[test]
    fn readout_cases() {
        assert_eq!(readout(&Matrix::<f64>::zeros(5, 3)), vec![0.5; 3]);
        let one = Matrix::from_vec(1, 2, vec![1.0, -2.0]);
        assert_eq!(readout(&one), vec![sigmoid(1.0), sigmoid(-2.0)]);
        let two = Matrix::from_vec(2, 2, vec![2.0, 2.0, -2.0, -2.0]);
        assert_eq!(readout(&two), vec![0.5, 0.5]);
    }

    #[test]
    fn classifier_head() {
        let mut cfg = ModelConfig::new(3, 4);
        cfg.hidden = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zero = Params::<f64>::zeros(&cfg);
        assert_eq!(classify(&zero, &cfg, &[0.3; 8], Mode::Infer, &mut rng), vec![0.25; 4]);

        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-9 && (p[1] - 1.0 / 3.0).abs() < 1e-9);

        let trials = 100_000;
        let mask: Vec<f64> = dropout_mask(trials, 0.7, Mode::Train, &mut rng);
        let zeros = mask.iter().filter(|&&m| m == 0.0).count() as f64 / trials as f64;
        assert!((zeros - 0.7).abs() < 0.01, "{zeros}");
        assert!(mask.iter().filter(|&&m| m != 0.0).all(|&m| (m - 1.0 / 0.3).abs() < 1e-12));
    }

    #[test]
    fn parameter_count_closed_form() {
        // d=25, h=128, H=4, C=5:
        // 25*128 + 128 + 128*128 + 128 + 128*128 + 4*64 + 128*5 + 5 = 37125
        let cfg = ModelConfig::new(25, 5);
        assert_eq!(cfg.parameter_count(), 37125);
        let m = GraphSat::<f64>::new(cfg, 0).unwrap();
        assert_eq!(m.parameter_count(), 37125);
        let two = ModelConfig::new(25, 2).parameter_count();
        assert_eq!(37125 - two, 3 * (128 + 1));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(4, 3);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(4, 1);
        assert!(cfg.validate().is_err());
        cfg.num_classes = 2;
        cfg.sample_first = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let m = GraphSat::<f64>::new(ModelConfig::new(3, 2), 0).unwrap();
        let g = graph(2, 2, vec![0.0; 4], &[(0, 1)]);
        assert!(matches!(m.predict_proba(&g), Err(Error::Contract(_))));
    }
}
