//! Retrieval evaluation: distance matrices, CMC and mAP under the
//! single-query protocol with camera filtering.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::Invalid(format!("unknown metric {s:?}"))),
        }
    }
}

/// `[Nq, Ng]` distances between the rows of `q` and `g`. Cosine distance is
/// `1 - cos`, in `[0, 2]`.
pub fn distance_matrix(q: &Tensor, g: &Tensor, metric: Metric) -> Result<Tensor> {
    if q.ndim() != 2 || g.ndim() != 2 || q.shape()[1] != g.shape()[1] {
        return Err(Error::dim("distance_matrix", q.shape(), g.shape()));
    }
    let (nq, ng) = (q.shape()[0], g.shape()[0]);
    let norms = |t: &Tensor, side: &'static str| -> Result<Vec<f64>> {
        (0..t.shape()[0])
            .map(|i| {
                let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    Err(Error::DegenerateVector { side, row: i })
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let mut out = Vec::with_capacity(nq * ng);
    match metric {
        Metric::Euclidean => {
            for i in 0..nq {
                for j in 0..ng {
                    let d: f64 = q.row(i).iter().zip(g.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    out.push(d.sqrt());
                }
            }
        }
        Metric::Cosine => {
            let (qn, gn) = (norms(q, "query")?, norms(g, "gallery")?);
            for i in 0..nq {
                for j in 0..ng {
                    let dot: f64 = q.row(i).iter().zip(g.row(j)).map(|(a, b)| a * b).sum();
                    out.push(1.0 - dot / (qn[i] * gn[j]));
                }
            }
        }
    }
    Tensor::new(&[nq, ng], out)
}

/// Identity and camera of every query and gallery item.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub q_ids: &'a [usize],
    pub g_ids: &'a [usize],
    pub q_cams: &'a [usize],
    pub g_cams: &'a [usize],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    /// Drop gallery items sharing both identity and camera with the query.
    pub same_camera_filter: bool,
    /// Ranks reported in [`EvalReport::cmc`].
    pub cmc_ranks: Vec<usize>,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            same_camera_filter: true,
            cmc_ranks: vec![1, 5, 10, 20],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    /// CMC at [`EvalReport::cmc_ranks`].
    pub cmc: Vec<f64>,
    pub cmc_ranks: Vec<usize>,
    /// CMC at every rank `1..=Ng`.
    pub cmc_curve: Vec<f64>,
    /// Average precision of each evaluated query, in query order.
    pub average_precision: Vec<f64>,
    pub excluded_queries: Vec<usize>,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc_curve[0]
    }

    pub fn rank(&self, k: usize) -> f64 {
        self.cmc_curve[(k.max(1) - 1).min(self.cmc_curve.len() - 1)]
    }
}

fn check_labels(dist: &Tensor, l: &Labels) -> Result<(usize, usize)> {
    if dist.ndim() != 2 {
        return Err(Error::dim("evaluate", dist.shape(), &[]));
    }
    let (nq, ng) = (dist.shape()[0], dist.shape()[1]);
    if l.q_ids.len() != nq || l.q_cams.len() != nq || l.g_ids.len() != ng || l.g_cams.len() != ng {
        return Err(Error::dim(
            "evaluate labels",
            &[nq, ng],
            &[l.q_ids.len(), l.g_ids.len(), l.q_cams.len(), l.g_cams.len()],
        ));
    }
    if !dist.is_finite() {
        return Err(Error::Invalid("distance matrix has non-finite entries".into()));
    }
    Ok((nq, ng))
}

fn assemble(
    ng: usize,
    per_query: Vec<Option<(f64, usize)>>,
    proto: &Protocol,
) -> Result<EvalReport> {
    let mut excluded = Vec::new();
    let mut aps = Vec::new();
    let mut hits = vec![0usize; ng];
    for (i, r) in per_query.iter().enumerate() {
        match r {
            None => excluded.push(i),
            Some((ap, first)) => {
                aps.push(*ap);
                hits[*first] += 1;
            }
        }
    }
    if aps.is_empty() {
        return Err(Error::NoValidMatch { query: 0 });
    }
    let n = aps.len() as f64;
    let mut acc = 0;
    let curve: Vec<f64> = hits
        .iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect();
    let cmc = proto
        .cmc_ranks
        .iter()
        .map(|&k| curve[(k.max(1) - 1).min(ng - 1)])
        .collect();
    Ok(EvalReport {
        map: aps.iter().sum::<f64>() / n,
        cmc,
        cmc_ranks: proto.cmc_ranks.clone(),
        cmc_curve: curve,
        average_precision: aps,
        excluded_queries: excluded,
    })
}

/// Rank the gallery for every query (ascending distance, ties by gallery
/// index), apply the camera filter and score CMC and mAP. Queries without a
/// valid match are listed in `excluded_queries` and left out of both scores.
pub fn evaluate(dist: &Tensor, labels: &Labels, proto: &Protocol) -> Result<EvalReport> {
    let (nq, ng) = check_labels(dist, labels)?;
    let mut per_query = Vec::with_capacity(nq);
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for i in 0..nq {
        let row = dist.row(i);
        order.clear();
        order.extend(0..ng);
        // Stable sort keeps ascending index among equal distances.
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap());
        let (qid, qcam) = (labels.q_ids[i], labels.q_cams[i]);
        let mut rank = 0;
        let mut found = 0;
        let mut prec_sum = 0.0;
        let mut first = None;
        for &j in &order {
            let same_id = labels.g_ids[j] == qid;
            if proto.same_camera_filter && same_id && labels.g_cams[j] == qcam {
                continue;
            }
            rank += 1;
            if same_id {
                found += 1;
                prec_sum += found as f64 / rank as f64;
                first.get_or_insert(rank - 1);
            }
        }
        per_query.push(first.map(|f| (prec_sum / found as f64, f)));
    }
    assemble(ng, per_query, proto)
}

/// Independent `O(Nq * Ng^2)` re-implementation used to cross-check
/// [`evaluate`]: each gallery item's rank is counted directly and precision
/// is enumerated at every correct rank.
pub mod oracle {
    use super::*;

    pub fn evaluate(dist: &Tensor, labels: &Labels, proto: &Protocol) -> Result<EvalReport> {
        let (nq, ng) = check_labels(dist, labels)?;
        let mut per_query = Vec::with_capacity(nq);
        for i in 0..nq {
            let d = dist.row(i);
            let valid: Vec<usize> = (0..ng)
                .filter(|&j| {
                    !(proto.same_camera_filter
                        && labels.g_ids[j] == labels.q_ids[i]
                        && labels.g_cams[j] == labels.q_cams[i])
                })
                .collect();
            // 1-based rank of j among valid items.
            let rank_of = |j: usize| {
                1 + valid
                    .iter()
                    .filter(|&&o| d[o] < d[j] || (d[o] == d[j] && o < j))
                    .count()
            };
            let mut correct: Vec<usize> = valid
                .iter()
                .filter(|&&j| labels.g_ids[j] == labels.q_ids[i])
                .map(|&j| rank_of(j))
                .collect();
            if correct.is_empty() {
                per_query.push(None);
                continue;
            }
            correct.sort_unstable();
            let mut ap = 0.0;
            for &r in &correct {
                let within = correct.iter().filter(|&&c| c <= r).count();
                ap += within as f64 / r as f64;
            }
            ap /= correct.len() as f64;
            per_query.push(Some((ap, correct[0] - 1)));
        }
        assemble(ng, per_query, proto)
    }
}

/// Mean and standard deviation of mAP when the gallery order is a uniformly
/// random permutation, estimated from `trials` shuffles.
pub fn permutation_null(labels: &Labels, proto: &Protocol, trials: usize, seed: u64) -> Result<(f64, f64)> {
    let (nq, ng) = (labels.q_ids.len(), labels.g_ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::with_capacity(trials);
    let mut ranks: Vec<f64> = (0..ng).map(|j| j as f64).collect();
    for _ in 0..trials {
        let mut data = Vec::with_capacity(nq * ng);
        for _ in 0..nq {
            ranks.shuffle(&mut rng);
            data.extend_from_slice(&ranks);
        }
        let dist = Tensor::new(&[nq, ng], data)?;
        maps.push(evaluate(&dist, labels, proto)?.map);
    }
    let mean = maps.iter().sum::<f64>() / trials as f64;
    let var = maps.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (trials.max(2) - 1) as f64;
    Ok((mean, var.sqrt()))
}
