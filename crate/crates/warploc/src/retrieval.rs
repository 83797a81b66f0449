//! Global-descriptor gallery index, shortlist search, dense re-ranking, and
//! recall evaluation.
//!
//! The index is a plain matrix of unit-norm descriptors; search is exact
//! brute-force inner product, descending, with ties broken by gallery order
//! so results are reproducible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, EncoderModel};
use crate::regressor::{warp_pair, RegressorError, RegressorModel};
use crate::tensor::{Graph, Scalar, Tensor, TensorError};

/// Mean Earth radius in meters for the equirectangular approximation.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot mix planar and geographic positions")]
    MixedCoordinateKinds,
    #[error("position out of range: {0}")]
    InvalidPosition(String),
    #[error("gallery index is empty")]
    EmptyIndex,
    #[error("shortlist is empty")]
    EmptyShortlist,
    #[error("shortlist entry {index} out of bounds for gallery of {len}")]
    ShortlistEntryOutOfBounds { index: usize, len: usize },
    #[error("query {query} has {got} results, need {need}")]
    InsufficientResults {
        query: usize,
        got: usize,
        need: usize,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Tagged position: planar meters or geographic degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Position {
    Planar { x: f64, y: f64 },
    Geographic { lat: f64, lon: f64 },
}

impl Position {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        match *self {
            Position::Planar { x, y } => {
                if !x.is_finite() || !y.is_finite() {
                    return Err(RetrievalError::InvalidPosition(format!(
                        "non-finite planar position ({x}, {y})"
                    )));
                }
            }
            Position::Geographic { lat, lon } => {
                if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                    return Err(RetrievalError::InvalidPosition(format!(
                        "geographic position ({lat}, {lon}) out of range"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Distance in meters. Planar pairs are Euclidean; geographic pairs use the
/// equirectangular approximation R * sqrt(dphi^2 + (cos(phi_m) * dlambda)^2).
pub fn geo_distance(a: &Position, b: &Position) -> Result<f64, RetrievalError> {
    match (a, b) {
        (Position::Planar { x: ax, y: ay }, Position::Planar { x: bx, y: by }) => {
            Ok(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt())
        }
        (
            Position::Geographic { lat: alat, lon: alon },
            Position::Geographic { lat: blat, lon: blon },
        ) => {
            let dphi = (alat - blat).to_radians();
            let dlam = (alon - blon).to_radians();
            let phi_m = ((alat + blat) / 2.0).to_radians();
            Ok(EARTH_RADIUS_M * (dphi.powi(2) + (phi_m.cos() * dlam).powi(2)).sqrt())
        }
        _ => Err(RetrievalError::MixedCoordinateKinds),
    }
}

/// A geotagged image held in memory, ready for encoding.
#[derive(Debug, Clone)]
pub struct GeoImage<S: Scalar> {
    pub id: String,
    /// [3, H, W], values in [0, 1].
    pub image: Tensor<S>,
    pub pos: Position,
}

/// Immutable gallery of unit-norm global descriptors, row order = input order.
#[derive(Debug, Clone)]
pub struct GalleryIndex<S: Scalar> {
    descriptors: Vec<S>,
    dim: usize,
    ids: Vec<String>,
    positions: Vec<Position>,
}

impl<S: Scalar> GalleryIndex<S> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    /// Descriptor row for one gallery entry.
    pub fn row(&self, i: usize) -> &[S] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn descriptor(&self, i: usize) -> &[S] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn position(&self, i: usize) -> &Position {
        &self.positions[i]
    }

    pub fn from_rows(
        rows: Vec<Vec<S>>,
        ids: Vec<String>,
        positions: Vec<Position>,
    ) -> Result<Self, RetrievalError> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.len() != ids.len() || rows.len() != positions.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "index rows {} vs ids {} vs positions {}",
                rows.len(),
                ids.len(),
                positions.len()
            ))
            .into());
        }
        let mut descriptors = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            if r.len() != dim {
                return Err(TensorError::ShapeMismatch(format!(
                    "descriptor length {} vs {}",
                    r.len(),
                    dim
                ))
                .into());
            }
            descriptors.extend_from_slice(r);
        }
        Ok(Self {
            descriptors,
            dim,
            ids,
            positions,
        })
    }
}

/// One retrieval hit: position in the gallery, global similarity, optional
/// dense re-rank score, and the current rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub gallery_index: usize,
    pub global_sim: f64,
    pub dense_score: Option<f64>,
    pub rank: usize,
}

/// Encodes every gallery image into the descriptor matrix. Deterministic:
/// row order equals input order, duplicates produce identical rows.
pub fn build_index<S: Scalar>(
    gallery: &[GeoImage<S>],
    encoder: &EncoderModel<S>,
) -> Result<GalleryIndex<S>, RetrievalError> {
    let mut rows = Vec::with_capacity(gallery.len());
    let mut ids = Vec::with_capacity(gallery.len());
    let mut positions = Vec::with_capacity(gallery.len());
    for g in gallery {
        g.pos.validate()?;
        let d = encoder.image_descriptor(&g.image)?;
        rows.push(d.into_data());
        ids.push(g.id.clone());
        positions.push(g.pos);
    }
    GalleryIndex::from_rows(rows, ids, positions)
}

/// Exact top-k by inner product, descending, ties broken by gallery order.
/// `top` is clamped to the gallery size.
pub fn knn_search<S: Scalar>(
    index: &GalleryIndex<S>,
    query: &[S],
    top: usize,
) -> Result<Vec<RankedResult>, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if query.len() != index.dim() {
        return Err(TensorError::ShapeMismatch(format!(
            "query dim {} vs index dim {}",
            query.len(),
            index.dim()
        ))
        .into());
    }
    let mut sims: Vec<(usize, f64)> = (0..index.len())
        .map(|i| {
            let row = index.descriptor(i);
            let s: f64 = row
                .iter()
                .zip(query)
                .map(|(a, b)| (*a * *b).into_f64())
                .sum();
            (i, s)
        })
        .collect();
    // stable sort keeps gallery order among equal similarities
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    sims.truncate(top.min(index.len()));
    Ok(sims
        .into_iter()
        .enumerate()
        .map(|(rank, (gallery_index, global_sim))| RankedResult {
            gallery_index,
            global_sim,
            dense_score: None,
            rank,
        })
        .collect())
}

/// Dense similarity: sum over the spatial grid of per-location inner products
/// of two channel-normalized feature grids (equivalently the flattened dot
/// product). Larger = more similar.
pub fn rerank_score<S: Scalar>(fq: &Tensor<S>, fp: &Tensor<S>) -> Result<f64, RetrievalError> {
    if fq.shape() != fp.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "rerank_score: {:?} vs {:?}",
            fq.shape(),
            fp.shape()
        ))
        .into());
    }
    Ok(fq
        .data()
        .iter()
        .zip(fp.data())
        .map(|(a, b)| (*a * *b).into_f64())
        .sum())
}

/// Dense re-ranking flavor: score predicted-warp feature grids, or the raw
/// resized grids of the unwarped images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RerankMode {
    Warp,
    NoWarp,
}

/// Re-scores a shortlist with dense local features and re-sorts it.
///
/// Warp mode runs the pairwise warp and scores the feature grids of the two
/// warped images; no-warp mode scores the raw grids. The sort is stable and
/// descending by dense score, so ties keep the incoming (global-rank) order.
/// An entry whose scoring fails stays unscored, keeps its relative order, and
/// sorts after every scored entry. Query-side failures in no-warp mode abort
/// the whole call since no entry could succeed.
pub fn rerank_shortlist<S: Scalar>(
    query: &GeoImage<S>,
    shortlist: &[RankedResult],
    gallery: &[GeoImage<S>],
    encoder: &EncoderModel<S>,
    model: &RegressorModel<S>,
    mode: RerankMode,
) -> Result<Vec<RankedResult>, RetrievalError> {
    if shortlist.is_empty() {
        return Err(RetrievalError::EmptyShortlist);
    }
    for e in shortlist {
        if e.gallery_index >= gallery.len() {
            return Err(RetrievalError::ShortlistEntryOutOfBounds {
                index: e.gallery_index,
                len: gallery.len(),
            });
        }
    }
    let query_grid = match mode {
        RerankMode::NoWarp => Some(encoder.image_feature_grid(&query.image)?),
        RerankMode::Warp => None,
    };
    let mut out = shortlist.to_vec();
    for e in &mut out {
        let img = &gallery[e.gallery_index].image;
        let scored: Result<f64, RetrievalError> = (|| match mode {
            RerankMode::NoWarp => {
                let fp = encoder.image_feature_grid(img)?;
                rerank_score(query_grid.as_ref().expect("computed above"), &fp)
            }
            RerankMode::Warp => {
                let mut g: Graph<S> = Graph::new();
                let iq = g.leaf(query.image.clone());
                let ip = g.leaf(img.clone());
                let wp = warp_pair(&mut g, encoder, model, iq, ip, false)?;
                let fq = encoder.feature_grid(&mut g, wp.warped_q)?;
                let fp = encoder.feature_grid(&mut g, wp.warped_p)?;
                rerank_score(g.value(fq), g.value(fp))
            }
        })();
        e.dense_score = scored.ok();
    }
    out.sort_by(|a, b| match (a.dense_score, b.dense_score) {
        (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(std::cmp::Ordering::Equal),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (rank, e) in out.iter_mut().enumerate() {
        e.rank = rank;
    }
    Ok(out)
}

/// Percentage of queries whose top-n results contain a gallery item within
/// `threshold` meters of the query position.
pub fn recall_at_n(
    results: &[Vec<RankedResult>],
    query_positions: &[Position],
    gallery_positions: &[Position],
    n: usize,
    threshold_m: f64,
) -> Result<f64, RetrievalError> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (qi, (rs, qp)) in results.iter().zip(query_positions).enumerate() {
        if rs.len() < n {
            return Err(RetrievalError::InsufficientResults {
                query: qi,
                got: rs.len(),
                need: n,
            });
        }
        let mut hit = false;
        for r in &rs[..n] {
            if geo_distance(qp, &gallery_positions[r.gallery_index])? <= threshold_m {
                hit = true;
                break;
            }
        }
        hits += hit as usize;
    }
    Ok(100.0 * hits as f64 / results.len() as f64)
}
