//! Metric-based few-shot heads.
//!
//! The prototypical head averages each class's support embeddings into one
//! prototype and classifies a query by a softmax over (negated) distances to
//! the prototypes. The matching head attends over every support embedding
//! with a softmax of similarities and sums the attended one-hot labels.
//! Euclidean distance enters either softmax negated, cosine similarity as is.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, ParamStore, Var, NORM_FLOOR};
use crate::data::Dataset;
use crate::encoder::{stack_images, BnMode, BnStats};
use crate::error::{dim_err, Error, Result};
use crate::model::GccnNet;
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclid",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclid" | "euclidean" => Ok(Metric::Euclidean),
            "cos" | "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Prototypical,
    Matching,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Prototypical => "proto",
            Head::Matching => "matching",
        })
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "proto" | "prototypical" => Ok(Head::Prototypical),
            "matching" | "match" => Ok(Head::Matching),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

fn same_dims(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return dim_err(format!("vector dims differ: {} vs {}", p.len(), q.len()));
    }
    Ok(())
}

pub fn dot(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * b).sum()
}

pub fn euclidean(p: &[f64], q: &[f64]) -> Result<f64> {
    same_dims(p, q)?;
    Ok(p.iter()
        .zip(q)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt())
}

/// Cosine similarity; each norm is floored at [`NORM_FLOOR`].
pub fn cosine(p: &[f64], q: &[f64]) -> Result<f64> {
    same_dims(p, q)?;
    let np = dot(p, p).sqrt().max(NORM_FLOOR);
    let nq = dot(q, q).sqrt().max(NORM_FLOOR);
    Ok(dot(p, q) / (np * nq))
}

/// Score that enters the softmax: `-distance` or `+similarity`.
pub fn score(p: &[f64], q: &[f64], metric: Metric) -> Result<f64> {
    match metric {
        Metric::Euclidean => euclidean(p, q).map(|d| -d),
        Metric::Cosine => cosine(p, q),
    }
}

fn softmax_vec(scores: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    ops::softmax_row(scores, &mut out);
    out
}

/// One prototype (mean support embedding) per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub mu: Vec<Vec<f64>>,
}

/// `embeddings` is `[n, d]`; `labels[i]` is the class of row `i`.
pub fn prototypes(embeddings: &Tensor, labels: &[usize], ways: usize) -> Result<PrototypeSet> {
    let (n, d) = ops::as_matrix(embeddings, "prototypes")?;
    ops::check_labels(labels, n, ways)?;
    let mut sums = vec![vec![0.0; d]; ways];
    let mut counts = vec![0usize; ways];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(embeddings.row(i)) {
            *s += v;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {k} has no support samples")));
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(PrototypeSet { mu: sums })
}

/// Class distribution for one query under the prototypical head.
pub fn proto_predict(query: &[f64], protos: &PrototypeSet, metric: Metric) -> Result<Vec<f64>> {
    let scores = protos
        .mu
        .iter()
        .map(|mu| score(query, mu, metric))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax_vec(&scores))
}

/// Attention of one query over every support row.
pub fn matching_attention(query: &[f64], support: &Tensor, metric: Metric) -> Result<Vec<f64>> {
    let (n, _) = ops::as_matrix(support, "matching support")?;
    let scores = (0..n)
        .map(|i| score(query, support.row(i), metric))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax_vec(&scores))
}

/// Class distribution for one query under the matching head: attention
/// weights summed per support label.
pub fn matching_predict(
    query: &[f64],
    support: &Tensor,
    labels: &[usize],
    ways: usize,
    metric: Metric,
) -> Result<Vec<f64>> {
    let (n, _) = ops::as_matrix(support, "matching support")?;
    ops::check_labels(labels, n, ways)?;
    let att = matching_attention(query, support, metric)?;
    let mut out = vec![0.0; ways];
    for (a, &y) in att.iter().zip(labels) {
        out[y] += a;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Scalar mean negative log-probability of the true query classes.
    pub loss: Var,
    /// Query class distributions `[nq, ways]`.
    pub probs: Tensor,
}

/// Builds a head's loss on the graph. `support` is `[ns, d]`, `query` is
/// `[nq, d]`.
#[allow(clippy::too_many_arguments)]
pub fn head_loss(
    graph: &mut Graph,
    support: Var,
    support_labels: &[usize],
    query: Var,
    query_labels: &[usize],
    ways: usize,
    head: Head,
    metric: Metric,
) -> Result<HeadOutput> {
    let ns = graph.shape(support)[0];
    ops::check_labels(support_labels, ns, ways)?;
    match head {
        Head::Prototypical => {
            let mut counts = vec![0usize; ways];
            support_labels.iter().for_each(|&y| counts[y] += 1);
            if let Some(k) = counts.iter().position(|&c| c == 0) {
                return Err(Error::Data(format!("class {k} has no support samples")));
            }
            let mut avg = vec![0.0; ways * ns];
            for (i, &y) in support_labels.iter().enumerate() {
                avg[y * ns + i] = 1.0 / counts[y] as f64;
            }
            let avg = graph.constant(Tensor::new(vec![ways, ns], avg)?);
            let protos = graph.matmul(avg, support)?;
            let scores = scores_graph(graph, query, protos, metric)?;
            let probs = ops::softmax(graph.value(scores));
            let loss = graph.softmax_cross_entropy(scores, query_labels)?;
            Ok(HeadOutput { loss, probs })
        }
        Head::Matching => {
            let mut onehot = vec![0.0; ns * ways];
            for (i, &y) in support_labels.iter().enumerate() {
                onehot[i * ways + y] = 1.0;
            }
            let onehot = graph.constant(Tensor::new(vec![ns, ways], onehot)?);
            let scores = scores_graph(graph, query, support, metric)?;
            let att = graph.softmax(scores)?;
            let p = graph.matmul(att, onehot)?;
            let probs = graph.value(p).clone();
            let loss = graph.nll(p, query_labels)?;
            Ok(HeadOutput { loss, probs })
        }
    }
}

fn scores_graph(graph: &mut Graph, query: Var, refs: Var, metric: Metric) -> Result<Var> {
    match metric {
        Metric::Euclidean => {
            let d = graph.pairwise_euclidean(query, refs)?;
            graph.scale(d, -1.0)
        }
        Metric::Cosine => graph.pairwise_cosine(query, refs),
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = ops::argmax_rows(probs)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeItem {
    /// Index into the source dataset.
    pub sample: usize,
    /// Episode-local class in `0..ways`.
    pub class: usize,
}

/// A W-way / K-shot task with Q queries per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// Dataset class behind each episode-local class.
    pub source_classes: Vec<usize>,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        let mut s_counts = vec![0usize; self.ways];
        let mut q_counts = vec![0usize; self.ways];
        for (items, counts) in [(&self.support, &mut s_counts), (&self.query, &mut q_counts)] {
            for it in items.iter() {
                if it.class >= self.ways {
                    return Err(Error::Data(format!("episode class {} >= ways", it.class)));
                }
                counts[it.class] += 1;
            }
        }
        if s_counts.iter().any(|&c| c != self.shots) || q_counts.iter().any(|&c| c != self.queries) {
            return Err(Error::Data("episode class counts do not match shots/queries".into()));
        }
        let mut ids: Vec<usize> = self.support.iter().chain(&self.query).map(|i| i.sample).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("support and query share a sample".into()));
        }
        Ok(())
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.class).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.class).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeForward {
    pub loss: Var,
    pub probs: Tensor,
    pub query_labels: Vec<usize>,
    pub bn_stats: Vec<BnStats>,
}

/// Encodes support and query images in one batch and applies the head.
#[allow(clippy::too_many_arguments)]
pub fn episode_forward(
    graph: &mut Graph,
    episode: &Episode,
    dataset: &Dataset,
    net: &GccnNet,
    store: &ParamStore,
    head: Head,
    metric: Metric,
    mode: BnMode,
) -> Result<EpisodeForward> {
    let images: Vec<&Tensor> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|it| &dataset.images[it.sample])
        .collect();
    let x = graph.constant(stack_images(&images)?);
    let vars = net.forward(graph, store, x, mode)?;
    let ns = episode.support.len();
    let total = ns + episode.query.len();
    let support = graph.rows(vars.features, 0, ns)?;
    let query = graph.rows(vars.features, ns, total)?;
    let query_labels = episode.query_labels();
    let out = head_loss(
        graph,
        support,
        &episode.support_labels(),
        query,
        &query_labels,
        episode.ways,
        head,
        metric,
    )?;
    Ok(EpisodeForward {
        loss: out.loss,
        probs: out.probs,
        query_labels,
        bn_stats: vars.bn_stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss and accuracy of one episode without recording gradients.
pub fn episode_loss(
    episode: &Episode,
    dataset: &Dataset,
    net: &GccnNet,
    store: &ParamStore,
    head: Head,
    metric: Metric,
    mode: BnMode,
) -> Result<EpisodeOutcome> {
    let mut graph = Graph::new();
    let fwd = episode_forward(&mut graph, episode, dataset, net, store, head, metric, mode)?;
    Ok(EpisodeOutcome {
        loss: graph.value(fwd.loss).item()?,
        accuracy: accuracy(&fwd.probs, &fwd.query_labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, data: Vec<f64>) -> Tensor {
        let cols = data.len() / rows;
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(euclidean(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn prototype_examples() {
        let p = prototypes(&t(2, vec![1.0, 1.0, 3.0, 3.0]), &[0, 0], 1).unwrap();
        assert_eq!(p.mu, vec![vec![2.0, 2.0]]);
        let single = prototypes(&t(2, vec![1.0, 2.0, 3.0, 4.0]), &[1, 0], 2).unwrap();
        assert_eq!(single.mu, vec![vec![3.0, 4.0], vec![1.0, 2.0]]);
        assert!(matches!(
            prototypes(&t(1, vec![1.0]), &[0], 2),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn proto_predict_examples() {
        let one = PrototypeSet { mu: vec![vec![5.0, 1.0]] };
        assert_eq!(proto_predict(&[0.0, 0.0], &one, Metric::Euclidean).unwrap(), vec![1.0]);
        let two = PrototypeSet { mu: vec![vec![-1.0], vec![1.0]] };
        assert_eq!(proto_predict(&[0.0], &two, Metric::Euclidean).unwrap(), vec![0.5, 0.5]);
        // distances (0, 1)
        let p = proto_predict(&[0.0], &PrototypeSet { mu: vec![vec![0.0], vec![1.0]] }, Metric::Euclidean).unwrap();
        let z = 1.0 + (-1.0f64).exp();
        assert!((p[0] - 1.0 / z).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn matching_examples() {
        let p = matching_predict(&[1.0, 0.0], &t(1, vec![0.3, 0.9]), &[0], 1, Metric::Cosine).unwrap();
        assert_eq!(p, vec![1.0]);
        // cosines (1, 0)
        let support = t(2, vec![2.0, 0.0, 0.0, 5.0]);
        let a = matching_attention(&[1.0, 0.0], &support, Metric::Cosine).unwrap();
        let z = 1.0f64.exp() + 1.0;
        assert!((a[0] - 1.0f64.exp() / z).abs() < 1e-15);
        let p = matching_predict(&[1.0, 0.0], &support, &[1, 0], 2, Metric::Cosine).unwrap();
        assert!((p[1] - a[0]).abs() < 1e-15 && (p[0] - a[1]).abs() < 1e-15);
        // equal cosines everywhere -> uniform
        let eq = t(3, vec![1.0, 0.0, 2.0, 0.0, 0.5, 0.0]);
        let u = matching_attention(&[3.0, 0.0], &eq, Metric::Cosine).unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn graph_heads_match_plain_versions() {
        let support = t(4, vec![0.1, 0.5, -0.3, 0.9, 1.2, -0.4, 0.0, 0.2]);
        let query = t(2, vec![0.3, 0.1, -0.2, 0.4]);
        let s_labels = [0, 1, 1, 0];
        let q_labels = [1, 0];
        for metric in [Metric::Euclidean, Metric::Cosine] {
            for head in [Head::Prototypical, Head::Matching] {
                let mut g = Graph::new();
                let s = g.constant(support.clone());
                let q = g.constant(query.clone());
                let out = head_loss(&mut g, s, &s_labels, q, &q_labels, 2, head, metric).unwrap();
                let protos = prototypes(&support, &s_labels, 2).unwrap();
                for i in 0..2 {
                    let expect = match head {
                        Head::Prototypical => proto_predict(query.row(i), &protos, metric).unwrap(),
                        Head::Matching => matching_predict(query.row(i), &support, &s_labels, 2, metric).unwrap(),
                    };
                    for (a, b) in out.probs.row(i).iter().zip(&expect) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
                let loss = g.value(out.loss).item().unwrap();
                assert!(loss >= 0.0);
            }
        }
    }

    #[test]
    fn accuracy_ties_go_to_lowest_class() {
        let p = t(2, vec![0.5, 0.5, 0.2, 0.8]);
        assert_eq!(accuracy(&p, &[0, 1]), 1.0);
        assert_eq!(accuracy(&p, &[1, 1]), 0.5);
    }
}
