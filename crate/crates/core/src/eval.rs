//! Retrieval metrics under the cross-camera protocol, and a deterministic
//! 2-D PCA projection for scatter plots.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identity and camera labels of one side of a ranking problem. Negative
/// identities mark junk entries.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SideLabels {
    pub ids: Vec<i64>,
    pub cams: Vec<u32>,
}

impl SideLabels {
    pub fn new(ids: Vec<i64>, cams: Vec<u32>) -> Result<Self> {
        if ids.len() != cams.len() {
            return Err(Error::Shape(format!("{} identities but {} cameras", ids.len(), cams.len())));
        }
        Ok(Self { ids, cams })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct RankingProblem {
    pub query: Tensor<f64>,
    pub query_labels: SideLabels,
    pub gallery: Tensor<f64>,
    pub gallery_labels: SideLabels,
}

impl RankingProblem {
    pub fn new(query: Tensor<f64>, query_labels: SideLabels, gallery: Tensor<f64>, gallery_labels: SideLabels) -> Result<Self> {
        if query.rank() != 2 || query.rows() != query_labels.len() {
            return Err(Error::Shape(format!("query {:?} with {} labels", query.shape(), query_labels.len())));
        }
        if gallery.rank() != 2 || gallery.rows() != gallery_labels.len() {
            return Err(Error::Shape(format!("gallery {:?} with {} labels", gallery.shape(), gallery_labels.len())));
        }
        if gallery.rows() == 0 {
            return Err(Error::InvalidArgument("empty gallery".into()));
        }
        Ok(Self { query, query_labels, gallery, gallery_labels })
    }
}

/// Euclidean distances between every query row and every gallery row.
pub fn pairwise_distances(query: &Tensor<f64>, gallery: &Tensor<f64>) -> Result<Tensor<f64>> {
    if query.rank() != 2 || gallery.rank() != 2 || query.cols() != gallery.cols() {
        return Err(Error::Shape(format!("cannot compare {:?} with {:?}", query.shape(), gallery.shape())));
    }
    let mut out = Vec::with_capacity(query.rows() * gallery.rows());
    for i in 0..query.rows() {
        let q = query.row(i);
        for j in 0..gallery.rows() {
            let d2: f64 = q.iter().zip(gallery.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push(d2.sqrt());
        }
    }
    Tensor::new(vec![query.rows(), gallery.rows()], out)
}

/// Gallery entries that count for query `q`: junk is dropped, as is
/// anything sharing both identity and camera with the query.
pub fn protocol_filter(query: &SideLabels, gallery: &SideLabels, q: usize) -> Vec<bool> {
    let (qid, qcam) = (query.ids[q], query.cams[q]);
    gallery
        .ids
        .iter()
        .zip(&gallery.cams)
        .map(|(&gid, &gcam)| gid >= 0 && !(gid == qid && gcam == qcam))
        .collect()
}

/// Mean over relevant positions of the precision at that position.
///
/// Short lists are summed as an exact fraction so that simple cases come out
/// exactly (`[1, 0, 1]` gives `5/6`); long lists fall back to floating point.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut exact = Some((0u128, 1u128));
    for (rank, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
            exact = exact.and_then(|(n, d)| add_fraction(n, d, hits as u128, rank as u128 + 1));
        }
    }
    if hits == 0 {
        return None;
    }
    match exact.and_then(|(n, d)| Some((n, d.checked_mul(hits as u128)?))) {
        Some((n, d)) if n < 1 << 53 && d < 1 << 53 => Some(n as f64 / d as f64),
        _ => Some(sum / hits as f64),
    }
}

fn add_fraction(n: u128, d: u128, a: u128, b: u128) -> Option<(u128, u128)> {
    let num = n.checked_mul(b)?.checked_add(a.checked_mul(d)?)?;
    let den = d.checked_mul(b)?;
    let g = gcd(num, den);
    Some((num / g, den / g))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    /// `(query index, AP)` for every query that had a valid match.
    pub per_query_ap: Vec<(usize, f64)>,
    pub valid_queries: usize,
    pub skipped_queries: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn evaluate(problem: &RankingProblem) -> Result<EvalReport> {
    let dist = pairwise_distances(&problem.query, &problem.gallery)?;
    evaluate_distances(&dist, &problem.query_labels, &problem.gallery_labels)
}

/// Scores a precomputed `[queries, gallery]` distance matrix. Ties rank the
/// lower gallery index first.
pub fn evaluate_distances(dist: &Tensor<f64>, query: &SideLabels, gallery: &SideLabels) -> Result<EvalReport> {
    if dist.rank() != 2 || dist.rows() != query.len() || dist.cols() != gallery.len() {
        return Err(Error::Shape(format!(
            "distances {:?} for {} queries and {} gallery entries",
            dist.shape(),
            query.len(),
            gallery.len()
        )));
    }
    let mut per_query_ap = Vec::new();
    let mut cmc_hits = [0usize; 3];
    let mut order: Vec<usize> = Vec::with_capacity(gallery.len());
    for q in 0..query.len() {
        let valid = protocol_filter(query, gallery, q);
        let row = dist.row(q);
        order.clear();
        order.extend((0..gallery.len()).filter(|&j| valid[j]));
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let flags: Vec<bool> = order.iter().map(|&j| gallery.ids[j] == query.ids[q]).collect();
        let Some(ap) = average_precision(&flags) else { continue };
        per_query_ap.push((q, ap));
        let first = flags.iter().position(|&f| f).expect("ap implies a hit");
        for (hits, r) in cmc_hits.iter_mut().zip(CMC_RANKS) {
            if first < r {
                *hits += 1;
            }
        }
    }
    let n = per_query_ap.len();
    if n == 0 {
        return Err(Error::NoValidQueries);
    }
    let frac = |h: usize| h as f64 / n as f64;
    Ok(EvalReport {
        map: per_query_ap.iter().map(|(_, ap)| ap).sum::<f64>() / n as f64,
        rank1: frac(cmc_hits[0]),
        rank5: frac(cmc_hits[1]),
        rank10: frac(cmc_hits[2]),
        per_query_ap,
        valid_queries: n,
        skipped_queries: query.len() - n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Variance captured by each of the two directions.
    pub variances: [f64; 2],
    pub total_variance: f64,
}

impl Projection {
    pub fn explained_ratio(&self) -> f64 {
        (self.variances[0] + self.variances[1]) / self.total_variance
    }
}

/// Projects mean-centered rows onto their top two principal directions.
/// Each axis is flipped so that its largest-magnitude coordinate is positive.
pub fn pca_project_2d(x: &Tensor<f64>) -> Result<Projection> {
    if x.rank() != 2 || x.rows() < 2 {
        return Err(Error::InvalidArgument(format!("projection needs at least 2 rows, got {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let total = cov.trace();
    if total <= f64::EPSILON * mean.iter().map(|m| m * m).sum::<f64>().max(1.0) {
        return Err(Error::InvalidArgument("data has rank zero after centering".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut coords = vec![[0.0; 2]; n];
    let mut variances = [0.0; 2];
    for (k, &col) in order.iter().take(2).enumerate() {
        let mut proj: Vec<f64> = (&centered * eig.eigenvectors.column(col)).iter().copied().collect();
        let peak = proj.iter().copied().fold(0.0, |m: f64, p| if p.abs() > m.abs() { p } else { m });
        if peak < 0.0 {
            proj.iter_mut().for_each(|p| *p = -*p);
        }
        variances[k] = proj.iter().map(|p| p * p).sum::<f64>() / n as f64;
        for (c, p) in coords.iter_mut().zip(proj) {
            c[k] = p;
        }
    }
    Ok(Projection { points: coords, variances, total_variance: total })
}

/// Mean intra-identity pairwise distance over mean inter-identity distance.
pub fn separation_ratio(points: &[[f64; 2]], ids: &[i64]) -> Result<f64> {
    if points.len() != ids.len() {
        return Err(Error::Shape(format!("{} points for {} identities", points.len(), ids.len())));
    }
    let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt();
            if ids[i] == ids[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                ne += 1;
            }
        }
    }
    if ni == 0 || ne == 0 || inter == 0.0 {
        return Err(Error::InvalidArgument("separation needs repeated and distinct identities".into()));
    }
    Ok((intra / ni as f64) / (inter / ne as f64))
}

/// CSV with header `x,y,id,stage`.
pub fn scatter_csv(points: &[[f64; 2]], ids: &[i64], stage: &str) -> String {
    let mut out = String::from("x,y,id,stage\n");
    for (p, id) in points.iter().zip(ids) {
        writeln!(out, "{},{},{},{}", p[0], p[1], id, stage).expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_ap_values() {
        assert_eq!(average_precision(&[true, false, true]), Some(5.0 / 6.0));
        assert_eq!(average_precision(&[true, true, false]), Some(1.0));
        assert_eq!(average_precision(&[false, false, false, true]), Some(0.25));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn distance_extremes() {
        let q = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, -1.0]).unwrap();
        let d = pairwise_distances(&q, &g).unwrap();
        assert_eq!(d.data()[0], 0.0);
        assert_eq!(d.data()[3], 2.0);
        let bad = Tensor::from_f64(&[1, 3], &[1.0, 0.0, 0.0]).unwrap();
        assert!(pairwise_distances(&q, &bad).is_err());
    }

    #[test]
    fn mixed_filter_case() {
        let q = SideLabels::new(vec![3], vec![1]).unwrap();
        let g = SideLabels::new(vec![3, 3, 4, -1, 4, 3], vec![1, 2, 1, 2, 2, 1]).unwrap();
        assert_eq!(protocol_filter(&q, &g, 0), vec![false, true, true, false, true, false]);
    }

    #[test]
    fn filtered_only_match_is_skipped() {
        let q = SideLabels::new(vec![0, 1], vec![1, 1]).unwrap();
        let g = SideLabels::new(vec![0, 1], vec![1, 2]).unwrap();
        let d = Tensor::from_f64(&[2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = evaluate_distances(&d, &q, &g).unwrap();
        assert_eq!((r.valid_queries, r.skipped_queries), (1, 1));
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn collinear_points_have_flat_second_axis() {
        let x = Tensor::from_f64(&[4, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 2.0, 4.0, 6.0, -1.0, -2.0, -3.0]).unwrap();
        let p = pca_project_2d(&x).unwrap();
        assert!(p.points.iter().all(|c| c[1].abs() < 1e-9));
        assert!((p.explained_ratio() - 1.0).abs() < 1e-12, "{p:?}");
        let flat = Tensor::from_f64(&[3, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(pca_project_2d(&flat).is_err());
    }
}
