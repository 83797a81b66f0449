//! Warp-regressor training: self-supervised quadruplet generation, weakly
//! supervised pair mining, the three losses, and the training loop.
//!
//! The encoder stays frozen throughout; only regressor parameters receive
//! gradients. All randomness is drawn from one seeded generator, so a fixed
//! config reproduces the run bit-for-bit.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::{EncoderError, EncoderModel};
use crate::geometry::{
    apply_homography, homography_from_quad, intersect_trapezoids, sample_quad, to_normalized,
    warp_image, GeometryError, NormalizedQuad, Quad,
};
use crate::regressor::{
    correlation_map, predict_points, warp_pair, RegressorError, RegressorModel,
};
use crate::retrieval::{geo_distance, GeoImage, RetrievalError};
use crate::tensor::{Adam, Graph, Scalar, Tensor, TensorError, Var};

/// Resample attempts before quadruplet generation gives up.
pub const QUADRUPLET_RETRIES: usize = 16;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("encoder must be frozen before warp training")]
    EncoderNotFrozen,
    #[error("quadruplet generation failed after {0} attempts")]
    QuadrupletRetriesExhausted(usize),
    #[error("mined pair ({query}, {gallery}) out of bounds for {queries} queries, {galleries} gallery items")]
    MinedPairOutOfBounds {
        query: usize,
        gallery: usize,
        queries: usize,
        galleries: usize,
    },
    #[error("consistency loss needs at least one branch")]
    NoBranches,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// One self-supervised training example: two warped views of a single image
/// and the pixel-space quads marking their common region in each view.
#[derive(Debug, Clone)]
pub struct Quadruplet<S: Scalar> {
    pub i_a: Tensor<S>,
    pub i_b: Tensor<S>,
    /// Common region inside `i_a`'s frame.
    pub t_a: Quad,
    /// Common region inside `i_b`'s frame.
    pub t_b: Quad,
}

/// Samples two overlapping trapezoids on `img`, warps each to a full frame,
/// and maps their intersection into both warped frames. `k = 0` collapses to
/// the identity: both views equal `img` and both quads equal its corners.
pub fn gen_quadruplet<S: Scalar>(
    img: &Tensor<S>,
    k: f64,
    rng: &mut impl Rng,
) -> Result<Quadruplet<S>, TrainingError> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(TensorError::ShapeMismatch(format!(
            "gen_quadruplet: want [C,H,W], got {shape:?}"
        ))
        .into());
    }
    let (h, w) = (shape[1], shape[2]);
    let (hf, wf) = (h as f64, w as f64);
    for _ in 0..QUADRUPLET_RETRIES {
        let t_x = sample_quad(rng, k, wf, hf)?;
        let t_y = sample_quad(rng, k, wf, hf)?;
        let t_z = match intersect_trapezoids(&t_x, &t_y) {
            Ok(q) => q,
            Err(GeometryError::DegenerateIntersection(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        let frame = Quad::frame(wf, hf);
        let i_a = warp_image(img, &t_x, (h, w))?;
        let i_b = warp_image(img, &t_y, (h, w))?;
        let h_a = homography_from_quad(&t_x, &frame)?;
        let h_b = homography_from_quad(&t_y, &frame)?;
        let pa = apply_homography(&h_a, &t_z.p)?;
        let pb = apply_homography(&h_b, &t_z.p)?;
        return Ok(Quadruplet {
            i_a,
            i_b,
            t_a: Quad::new(pa[0], pa[1], pa[2], pa[3]),
            t_b: Quad::new(pb[0], pb[1], pb[2], pb[3]),
        });
    }
    Err(TrainingError::QuadrupletRetriesExhausted(QUADRUPLET_RETRIES))
}

/// Squared L2 norm of the 16-D gap between a prediction node and the
/// ground-truth quads, both in normalized coordinates. `a_hw`/`b_hw` are the
/// pixel sizes of the frames `t_a` and `t_b` live on.
pub fn loss_ss<S: Scalar>(
    g: &mut Graph<S>,
    points: Var,
    t_a: &Quad,
    t_b: &Quad,
    a_hw: (usize, usize),
    b_hw: (usize, usize),
) -> Result<Var, TrainingError> {
    let shape = g.shape(points);
    if shape != [16] {
        return Err(TensorError::ShapeMismatch(format!(
            "loss_ss: want [16] points, got {shape:?}"
        ))
        .into());
    }
    let na = to_normalized(t_a, a_hw.1 as f64, a_hw.0 as f64).0;
    let nb = to_normalized(t_b, b_hw.1 as f64, b_hw.0 as f64).0;
    let mut gt = Vec::with_capacity(16);
    gt.extend(na.iter().map(|v| S::from_f64(*v)));
    gt.extend(nb.iter().map(|v| S::from_f64(*v)));
    let gtv = g.leaf(Tensor::new(&[16], gt)?);
    let d = g.sub(points, gtv)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq))
}

/// Pure form of the self-supervised loss on already-normalized quads.
pub fn loss_ss_value(pred: &[f64; 16], gt_a: &NormalizedQuad, gt_b: &NormalizedQuad) -> f64 {
    let mut acc = 0.0;
    for i in 0..8 {
        acc += (pred[i] - gt_a.0[i]).powi(2);
        acc += (pred[8 + i] - gt_b.0[i]).powi(2);
    }
    acc
}

/// One weakly supervised training pair: indices into the query and gallery
/// sets plus the measurements that admitted it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MinedPair {
    pub query: usize,
    pub gallery: usize,
    pub geo_m: f64,
    pub desc_sq: f64,
}

/// All (query, gallery) pairs closer than `t_geo` meters whose squared
/// descriptor distance is below `t_feat`. Runs once before training; the same
/// query may appear in several pairs. Output order is (query, gallery)
/// lexicographic, so the result is deterministic.
pub fn mine_pairs<S: Scalar>(
    queries: &[GeoImage<S>],
    gallery: &[GeoImage<S>],
    encoder: &EncoderModel<S>,
    t_geo: f64,
    t_feat: f64,
) -> Result<Vec<MinedPair>, TrainingError> {
    let describe = |imgs: &[GeoImage<S>]| -> Result<Vec<Vec<f64>>, TrainingError> {
        imgs.iter()
            .map(|im| {
                Ok(encoder
                    .image_descriptor(&im.image)?
                    .data()
                    .iter()
                    .map(|v| v.into_f64())
                    .collect())
            })
            .collect()
    };
    let qd = describe(queries)?;
    let gd = describe(gallery)?;
    let mut out = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        for (gi, gal) in gallery.iter().enumerate() {
            let geo_m = geo_distance(&q.pos, &gal.pos)?;
            if geo_m >= t_geo {
                continue;
            }
            let desc_sq: f64 = qd[qi]
                .iter()
                .zip(&gd[gi])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if desc_sq < t_feat {
                out.push(MinedPair {
                    query: qi,
                    gallery: gi,
                    geo_m,
                    desc_sq,
                });
            }
        }
    }
    Ok(out)
}

/// Feature-level warp loss: total squared difference between the frozen
/// encoder's feature grids of the two warped images. Gradients reach the
/// regressor through the warps only.
pub fn loss_fw<S: Scalar>(
    g: &mut Graph<S>,
    encoder: &EncoderModel<S>,
    warped_q: Var,
    warped_p: Var,
) -> Result<Var, TrainingError> {
    let fq = encoder.feature_grid(g, warped_q)?;
    let fp = encoder.feature_grid(g, warped_p)?;
    let d = g.sub(fq, fp)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq))
}

/// Pure form: warps a pair with the current model and evaluates `loss_fw`.
pub fn loss_fw_value<S: Scalar>(
    encoder: &EncoderModel<S>,
    model: &RegressorModel<S>,
    i_q: &Tensor<S>,
    i_g: &Tensor<S>,
) -> Result<f64, TrainingError> {
    let mut g: Graph<S> = Graph::new();
    let a = g.leaf(i_q.clone());
    let b = g.leaf(i_g.clone());
    let wp = warp_pair(&mut g, encoder, model, a, b, false)?;
    let l = loss_fw(&mut g, encoder, wp.warped_q, wp.warped_p)?;
    Ok(g.value(l).data()[0].into_f64())
}

/// Input transforms for consistency training. The image action operates on
/// pixels; the inverse point action undoes the transform on a [16]
/// prediction so every branch reports quads in the original orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformTau {
    Identity,
    HorizontalFlip,
}

impl TransformTau {
    /// Pixel-space action on a [C,H,W] image.
    pub fn apply_image<S: Scalar>(&self, img: &Tensor<S>) -> Result<Tensor<S>, TrainingError> {
        match self {
            TransformTau::Identity => Ok(img.clone()),
            TransformTau::HorizontalFlip => {
                let shape = img.shape();
                if shape.len() != 3 {
                    return Err(TensorError::ShapeMismatch(format!(
                        "apply_image: want [C,H,W], got {shape:?}"
                    ))
                    .into());
                }
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let src = img.data();
                let mut out = Vec::with_capacity(src.len());
                for ci in 0..c {
                    for i in 0..h {
                        let row = (ci * h + i) * w;
                        for j in 0..w {
                            out.push(src[row + (w - 1 - j)]);
                        }
                    }
                }
                Ok(Tensor::new(shape, out)?)
            }
        }
    }

    /// Inverse point action on a [16] prediction node. HorizontalFlip mirrors
    /// x (exact negation in normalized coordinates) and re-pairs the corners
    /// (p1 <-> p2, p4 <-> p3) in each half so quads return in TL,TR,BR,BL
    /// order. Applying it twice is the identity, bit-for-bit.
    pub fn inverse_points<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        points: Var,
    ) -> Result<Var, TrainingError> {
        match self {
            TransformTau::Identity => Ok(points),
            TransformTau::HorizontalFlip => {
                let shape = g.shape(points);
                if shape != [16] {
                    return Err(TensorError::ShapeMismatch(format!(
                        "inverse_points: want [16], got {shape:?}"
                    ))
                    .into());
                }
                const HALF: [usize; 8] = [2, 3, 0, 1, 6, 7, 4, 5];
                let mut perm = [0usize; 16];
                let mut mul = [S::zero(); 16];
                let add = [S::zero(); 16];
                for half in 0..2 {
                    for i in 0..8 {
                        perm[half * 8 + i] = half * 8 + HALF[i];
                        mul[half * 8 + i] = if i % 2 == 0 {
                            S::from_f64(-1.0)
                        } else {
                            S::one()
                        };
                    }
                }
                Ok(g.affine_permute(points, &perm, &mul, &add)?)
            }
        }
    }
}

/// The transform set used by default (identity plus horizontal flip).
pub fn default_taus() -> Vec<TransformTau> {
    vec![TransformTau::Identity, TransformTau::HorizontalFlip]
}

/// Swaps the two 8-coordinate halves of a [16] node.
fn swap_halves<S: Scalar>(g: &mut Graph<S>, points: Var) -> Result<Var, TrainingError> {
    let mut perm = [0usize; 16];
    for (i, p) in perm.iter_mut().enumerate() {
        *p = (i + 8) % 16;
    }
    let mul = [S::one(); 16];
    let add = [S::zero(); 16];
    Ok(g.affine_permute(points, &perm, &mul, &add)?)
}

/// Runs the 2N consistency branches for one pair: for each transform, the
/// forward prediction and the argument-swapped prediction, both mapped back
/// through the inverse point action and ordered query-half first. Feature
/// grids are computed once per transform and shared between the two
/// directions.
pub fn cons_branches<S: Scalar>(
    g: &mut Graph<S>,
    encoder: &EncoderModel<S>,
    model: &RegressorModel<S>,
    i_q: &Tensor<S>,
    i_g: &Tensor<S>,
    taus: &[TransformTau],
    tracked: bool,
) -> Result<Vec<Var>, TrainingError> {
    let mut branches = Vec::with_capacity(2 * taus.len());
    for tau in taus {
        let tq = g.leaf(tau.apply_image(i_q)?);
        let tg = g.leaf(tau.apply_image(i_g)?);
        let fq = encoder.feature_grid(g, tq)?;
        let fg = encoder.feature_grid(g, tg)?;

        let corr_qg = correlation_map(g, fq, fg)?;
        let pts_qg = model.regress(g, corr_qg, tracked)?;
        branches.push(tau.inverse_points(g, pts_qg)?);

        let corr_gq = correlation_map(g, fg, fq)?;
        let pts_gq = model.regress(g, corr_gq, tracked)?;
        let back = tau.inverse_points(g, pts_gq)?;
        branches.push(swap_halves(g, back)?);
    }
    Ok(branches)
}

/// Mean of the branch predictions, cut out of the gradient graph: the
/// consistency target is treated as a constant.
pub fn pseudo_from_branches<S: Scalar>(
    g: &mut Graph<S>,
    branches: &[Var],
) -> Result<Var, TrainingError> {
    let (&first, rest) = branches.split_first().ok_or(TrainingError::NoBranches)?;
    let mut acc = first;
    for &b in rest {
        acc = g.add(acc, b)?;
    }
    let mean = g.scale(acc, S::from_f64(1.0 / branches.len() as f64));
    Ok(g.detach(mean))
}

/// Consistency loss: mean over the 2N branches of the squared 16-D gap to
/// the detached pseudo-label.
pub fn loss_cons<S: Scalar>(
    g: &mut Graph<S>,
    branches: &[Var],
    pseudo: Var,
) -> Result<Var, TrainingError> {
    if branches.is_empty() {
        return Err(TrainingError::NoBranches);
    }
    let mut acc: Option<Var> = None;
    for &b in branches {
        let d = g.sub(b, pseudo)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), S::from_f64(1.0 / branches.len() as f64)))
}

/// Pure form: the averaged pseudo-label quads for one pair under the given
/// transforms, query half first.
pub fn pseudo_labels<S: Scalar>(
    model: &RegressorModel<S>,
    encoder: &EncoderModel<S>,
    i_q: &Tensor<S>,
    i_g: &Tensor<S>,
    taus: &[TransformTau],
) -> Result<(NormalizedQuad, NormalizedQuad), TrainingError> {
    let mut g: Graph<S> = Graph::new();
    let branches = cons_branches(&mut g, encoder, model, i_q, i_g, taus, false)?;
    let pseudo = pseudo_from_branches(&mut g, &branches)?;
    let vals = g.value(pseudo).data();
    let mut t_q = [0.0f64; 8];
    let mut t_g = [0.0f64; 8];
    for i in 0..8 {
        t_q[i] = vals[i].into_f64();
        t_g[i] = vals[8 + i].into_f64();
    }
    Ok((NormalizedQuad(t_q), NormalizedQuad(t_g)))
}

/// Weighted sum of loss terms. Zero-weight terms are skipped entirely, never
/// evaluated into the sum; with no active term the result is a constant zero
/// and nothing requires gradients.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    parts: &[(f64, Var)],
) -> Result<Var, TrainingError> {
    let mut acc: Option<Var> = None;
    for &(weight, v) in parts {
        if weight == 0.0 {
            continue;
        }
        let scaled = g.scale(v, S::from_f64(weight));
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.leaf(Tensor::new(&[1], vec![S::zero()])?),
    })
}

/// Training hyperparameters. `taus.len()` is the transform count N.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Warp aggressiveness for quadruplet generation, in [0, 1].
    pub k: f64,
    pub lambda_ss: f64,
    pub lambda_fw: f64,
    pub lambda_cons: f64,
    pub t_geo_m: f64,
    pub t_feat: f64,
    pub iterations: usize,
    pub batch_ss: usize,
    pub batch_ws: usize,
    pub taus: Vec<TransformTau>,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 0.6,
            lambda_ss: 1.0,
            lambda_fw: 10.0,
            lambda_cons: 0.1,
            t_geo_m: 25.0,
            t_feat: 1.2,
            iterations: 50_000,
            batch_ss: 16,
            batch_ws: 16,
            taus: default_taus(),
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// One row of the training loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub l_ss: f64,
    pub l_fw: f64,
    pub l_cons: f64,
    pub l_total: f64,
}

/// Renders the loss log as CSV with a header row.
pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("iteration,l_ss,l_fw,l_cons,l_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration, r.l_ss, r.l_fw, r.l_cons, r.l_total
        ));
    }
    out
}

/// Trains the regressor: per iteration, `batch_ss` fresh quadruplets feed the
/// self-supervised loss and `batch_ws` mined pairs feed the feature-warp and
/// consistency losses, all summed into one optimizer step. Mined pairs are
/// consumed in shuffled epochs and reshuffled when exhausted; with an empty
/// mined set only the self-supervised loss runs. Batch losses are means over
/// their batch.
pub fn train_warp<S: Scalar>(
    model: &mut RegressorModel<S>,
    encoder: &EncoderModel<S>,
    corpus: &[Tensor<S>],
    queries: &[GeoImage<S>],
    gallery: &[GeoImage<S>],
    mined: &[MinedPair],
    cfg: &TrainConfig,
) -> Result<Vec<LossRow>, TrainingError> {
    if corpus.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    if !encoder.is_frozen() {
        return Err(TrainingError::EncoderNotFrozen);
    }
    for mp in mined {
        if mp.query >= queries.len() || mp.gallery >= gallery.len() {
            return Err(TrainingError::MinedPairOutOfBounds {
                query: mp.query,
                gallery: mp.gallery,
                queries: queries.len(),
                galleries: gallery.len(),
            });
        }
    }
    let use_ss = cfg.lambda_ss != 0.0 && cfg.batch_ss > 0;
    let use_fw = cfg.lambda_fw != 0.0 && !mined.is_empty() && cfg.batch_ws > 0;
    let use_cons =
        cfg.lambda_cons != 0.0 && !mined.is_empty() && cfg.batch_ws > 0 && !cfg.taus.is_empty();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(S::from_f64(cfg.lr));
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut pair_order: Vec<usize> = (0..mined.len()).collect();
    let mut cursor = pair_order.len();

    let batch_mean = |g: &mut Graph<S>, terms: &[Var]| -> Result<Var, TrainingError> {
        let stacked = g.stack0(terms)?;
        Ok(g.mean(stacked))
    };

    for iteration in 0..cfg.iterations {
        let mut g: Graph<S> = Graph::new();
        let mut parts: Vec<(f64, Var)> = Vec::new();
        let (mut l_ss_v, mut l_fw_v, mut l_cons_v) = (0.0, 0.0, 0.0);

        if use_ss {
            let mut terms = Vec::with_capacity(cfg.batch_ss);
            for _ in 0..cfg.batch_ss {
                let img = &corpus[rng.gen_range(0..corpus.len())];
                let q = gen_quadruplet(img, cfg.k, &mut rng)?;
                let sa = q.i_a.shape().to_vec();
                let sb = q.i_b.shape().to_vec();
                let ia = g.leaf(q.i_a);
                let ib = g.leaf(q.i_b);
                let pts = predict_points(&mut g, encoder, model, ia, ib, true)?;
                terms.push(loss_ss(
                    &mut g,
                    pts,
                    &q.t_a,
                    &q.t_b,
                    (sa[1], sa[2]),
                    (sb[1], sb[2]),
                )?);
            }
            let l = batch_mean(&mut g, &terms)?;
            l_ss_v = g.value(l).data()[0].into_f64();
            parts.push((cfg.lambda_ss, l));
        }

        if use_fw || use_cons {
            let mut fw_terms = Vec::with_capacity(cfg.batch_ws);
            let mut cons_terms = Vec::with_capacity(cfg.batch_ws);
            for _ in 0..cfg.batch_ws {
                if cursor >= pair_order.len() {
                    pair_order.shuffle(&mut rng);
                    cursor = 0;
                }
                let mp = &mined[pair_order[cursor]];
                cursor += 1;
                let i_q = &queries[mp.query].image;
                let i_g = &gallery[mp.gallery].image;
                if use_fw {
                    let a = g.leaf(i_q.clone());
                    let b = g.leaf(i_g.clone());
                    let wp = warp_pair(&mut g, encoder, model, a, b, true)?;
                    fw_terms.push(loss_fw(&mut g, encoder, wp.warped_q, wp.warped_p)?);
                }
                if use_cons {
                    let branches =
                        cons_branches(&mut g, encoder, model, i_q, i_g, &cfg.taus, true)?;
                    let pseudo = pseudo_from_branches(&mut g, &branches)?;
                    cons_terms.push(loss_cons(&mut g, &branches, pseudo)?);
                }
            }
            if use_fw {
                let l = batch_mean(&mut g, &fw_terms)?;
                l_fw_v = g.value(l).data()[0].into_f64();
                parts.push((cfg.lambda_fw, l));
            }
            if use_cons {
                let l = batch_mean(&mut g, &cons_terms)?;
                l_cons_v = g.value(l).data()[0].into_f64();
                parts.push((cfg.lambda_cons, l));
            }
        }

        let total = total_loss(&mut g, &parts)?;
        let l_total_v = g.value(total).data()[0].into_f64();
        if !parts.is_empty() {
            g.backward(total, model.params_mut())?;
            opt.step(model.params_mut())?;
            model.params_mut().clear_grads();
        }
        rows.push(LossRow {
            iteration,
            l_ss: l_ss_v,
            l_fw: l_fw_v,
            l_cons: l_cons_v,
            l_total: l_total_v,
        });
    }
    Ok(rows)
}
