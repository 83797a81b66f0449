//! Shared convolutional encoder, GeM descriptor pooling, feature-grid
//! preparation, and the weakly supervised triplet trainer.
//!
//! The encoder is a 4-layer stride-2 conv stack (3 -> 16 -> 32 -> 64 -> 64,
//! kernel 3, padding 1, ReLU), so spatial extents shrink by 16x. Once
//! trained it is frozen and serves three consumers: global descriptors
//! (GeM + L2), dense feature grids for correlation, and dense grids for
//! re-rank scoring.

use log::warn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::retrieval::{geo_distance, GeoImage, RetrievalError};
use crate::tensor::{Adam, Graph, ParameterSet, Scalar, Tensor, TensorError, Var};

/// Minimum input extent: four stride-2 layers need 64 px to yield a 4x4 grid.
pub const MIN_IMAGE_EXTENT: usize = 64;
/// Output (and third-layer) channel count C.
pub const FEATURE_CHANNELS: usize = 64;
/// Spatial side of the resized feature grid used by correlation and re-rank.
pub const FEATURE_GRID_SIZE: usize = 15;
/// GeM pooling exponent.
pub const GEM_P: f64 = 3.0;
/// Clamp floor applied before the GeM power (features can be non-positive).
pub const GEM_EPS: f64 = 1e-6;

const CHANNEL_PLAN: [usize; 5] = [3, 16, 32, 64, FEATURE_CHANNELS];
const LAYERS: usize = 4;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("image {h}x{w} smaller than the {min} px receptive minimum")]
    ImageTooSmall { h: usize, w: usize, min: usize },
    #[error("no gallery image within {radius} m of any query")]
    NoPositives { radius: f64 },
    #[error("parameter set does not match the encoder architecture: {0}")]
    BadParameters(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Position(#[from] Box<RetrievalError>),
}

fn weight_name(layer: usize) -> String {
    format!("encoder.conv{layer}.w")
}

fn bias_name(layer: usize) -> String {
    format!("encoder.conv{layer}.b")
}

/// The shared encoder E. `frozen` makes every forward pass gradient-free,
/// so warp training cannot move these parameters.
#[derive(Debug, Clone)]
pub struct EncoderModel<S: Scalar> {
    params: ParameterSet<S>,
    frozen: bool,
}

impl<S: Scalar> EncoderModel<S> {
    /// Seeded He-uniform initialization, biases zero.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for l in 0..LAYERS {
            let (c_in, c_out) = (CHANNEL_PLAN[l], CHANNEL_PLAN[l + 1]);
            let fan_in = (c_in * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w: Vec<S> = (0..c_out * c_in * 9)
                .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            params
                .insert(
                    &weight_name(l + 1),
                    Tensor::new(&[c_out, c_in, 3, 3], w).expect("init shape"),
                )
                .expect("unique name");
            params
                .insert(&bias_name(l + 1), Tensor::zeros(&[c_out]))
                .expect("unique name");
        }
        Self {
            params,
            frozen: false,
        }
    }

    /// Wraps a loaded parameter set, validating names and shapes.
    pub fn from_params(params: ParameterSet<S>, frozen: bool) -> Result<Self, EncoderError> {
        if params.len() != 2 * LAYERS {
            return Err(EncoderError::BadParameters(format!(
                "want {} tensors, got {}",
                2 * LAYERS,
                params.len()
            )));
        }
        for l in 0..LAYERS {
            let (c_in, c_out) = (CHANNEL_PLAN[l], CHANNEL_PLAN[l + 1]);
            let w = params
                .get(&weight_name(l + 1))
                .ok_or_else(|| EncoderError::BadParameters(format!("missing {}", weight_name(l + 1))))?;
            if w.shape() != [c_out, c_in, 3, 3] {
                return Err(EncoderError::BadParameters(format!(
                    "{} has shape {:?}",
                    weight_name(l + 1),
                    w.shape()
                )));
            }
            let b = params
                .get(&bias_name(l + 1))
                .ok_or_else(|| EncoderError::BadParameters(format!("missing {}", bias_name(l + 1))))?;
            if b.shape() != [c_out] {
                return Err(EncoderError::BadParameters(format!(
                    "{} has shape {:?}",
                    bias_name(l + 1),
                    b.shape()
                )));
            }
        }
        Ok(Self { params, frozen })
    }

    pub fn params(&self) -> &ParameterSet<S> {
        &self.params
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// SHA-256 over names, shapes, and raw weight bytes.
    pub fn param_hash(&self) -> String {
        crate::tensor::content_hash_hex(&self.params)
    }

    fn forward(&self, g: &mut Graph<S>, img: Var, tracked: bool) -> Result<Var, EncoderError> {
        let shape = g.shape(img).to_vec();
        if shape.len() != 3 || shape[0] != CHANNEL_PLAN[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "encoder input: want [3,H,W], got {shape:?}"
            ))
            .into());
        }
        let (h, w) = (shape[1], shape[2]);
        if h < MIN_IMAGE_EXTENT || w < MIN_IMAGE_EXTENT {
            return Err(EncoderError::ImageTooSmall {
                h,
                w,
                min: MIN_IMAGE_EXTENT,
            });
        }
        let mut x = g.reshape(img, &[1, CHANNEL_PLAN[0], h, w])?;
        for l in 0..LAYERS {
            let (wv, bv) = if tracked {
                (
                    g.param(&self.params, &weight_name(l + 1))?,
                    g.param(&self.params, &bias_name(l + 1))?,
                )
            } else {
                (
                    g.leaf(self.params.get(&weight_name(l + 1)).expect("validated").clone()),
                    g.leaf(self.params.get(&bias_name(l + 1)).expect("validated").clone()),
                )
            };
            let conv = g.conv2d(x, wv, bv, (2, 2), (1, 1))?;
            x = g.relu(conv);
        }
        let out_shape = g.shape(x).to_vec();
        g.reshape(x, &[out_shape[1], out_shape[2], out_shape[3]])
            .map_err(Into::into)
    }

    /// Dense feature map [C, H/16, W/16] (pre-resize, pre-normalization).
    /// Frozen models run gradient-free.
    pub fn extract_features(&self, g: &mut Graph<S>, img: Var) -> Result<Var, EncoderError> {
        self.forward(g, img, !self.frozen)
    }

    /// Unit-norm global descriptor [C]: GeM pooling over the feature map.
    pub fn descriptor(&self, g: &mut Graph<S>, img: Var) -> Result<Var, EncoderError> {
        let f = self.extract_features(g, img)?;
        gem_pool(g, f, GEM_P).map_err(Into::into)
    }

    /// Channel-normalized 15x15 feature grid for correlation and re-ranking.
    pub fn feature_grid(&self, g: &mut Graph<S>, img: Var) -> Result<Var, EncoderError> {
        let f = self.extract_features(g, img)?;
        let r = resize_features(g, f)?;
        normalize_features(g, r).map_err(Into::into)
    }

    /// Convenience: descriptor of an in-memory image, never tracked.
    pub fn image_descriptor(&self, img: &Tensor<S>) -> Result<Tensor<S>, EncoderError> {
        let mut g: Graph<S> = Graph::new();
        let iv = g.leaf(img.clone());
        let f = self.forward(&mut g, iv, false)?;
        let d = gem_pool(&mut g, f, GEM_P)?;
        Ok(g.value(d).clone())
    }

    /// Convenience: normalized 15x15 grid of an in-memory image, never tracked.
    pub fn image_feature_grid(&self, img: &Tensor<S>) -> Result<Tensor<S>, EncoderError> {
        let mut g: Graph<S> = Graph::new();
        let iv = g.leaf(img.clone());
        let f = self.forward(&mut g, iv, false)?;
        let r = resize_features(&mut g, f)?;
        let n = normalize_features(&mut g, r)?;
        Ok(g.value(n).clone())
    }
}

/// Bilinear resize of a [C,h,w] grid to the canonical 15x15; a grid already
/// at target size passes through untouched.
pub fn resize_features<S: Scalar>(g: &mut Graph<S>, f: Var) -> Result<Var, TensorError> {
    let shape = g.shape(f);
    if shape.len() == 3 && shape[1] == FEATURE_GRID_SIZE && shape[2] == FEATURE_GRID_SIZE {
        return Ok(f);
    }
    g.bilinear_resize_hw(f, FEATURE_GRID_SIZE, FEATURE_GRID_SIZE)
}

/// L2-normalizes each spatial location's channel vector.
pub fn normalize_features<S: Scalar>(g: &mut Graph<S>, f: Var) -> Result<Var, TensorError> {
    g.l2_normalize(f, 0, S::from_f64(1e-12))
}

/// GeM before L2: clamp at eps, raise to p, spatial mean, raise to 1/p.
/// p = 1 is mean pooling; large p approaches channelwise max.
pub fn gem_pool_raw<S: Scalar>(g: &mut Graph<S>, f: Var, p: f64) -> Result<Var, TensorError> {
    let clamped = g.clamp_min(f, S::from_f64(GEM_EPS));
    let powed = g.powf(clamped, S::from_f64(p));
    let pooled = g.spatial_mean(powed)?;
    Ok(g.powf(pooled, S::from_f64(1.0 / p)))
}

/// Unit-norm GeM descriptor.
pub fn gem_pool<S: Scalar>(g: &mut Graph<S>, f: Var, p: f64) -> Result<Var, TensorError> {
    let raw = gem_pool_raw(g, f, p)?;
    g.l2_normalize(raw, 0, S::from_f64(1e-12))
}

/// max(0, margin + ||a - p|| - ||a - n||) on descriptor nodes.
pub fn triplet_margin_loss<S: Scalar>(
    g: &mut Graph<S>,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: f64,
) -> Result<Var, TensorError> {
    let eps = S::from_f64(1e-12);
    let dp = {
        let d = g.sub(anchor, positive)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        g.sqrt_eps(s, eps)
    };
    let dn = {
        let d = g.sub(anchor, negative)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        g.sqrt_eps(s, eps)
    };
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_scalar(diff, S::from_f64(margin));
    Ok(g.relu(shifted))
}

#[derive(Debug, Clone)]
pub struct TripletConfig {
    pub iterations: usize,
    pub batch_queries: usize,
    /// Negatives sampled per query; the hardest one forms the triplet.
    pub negative_pool: usize,
    /// Gallery descriptor cache refresh period, in iterations.
    pub refresh_every: usize,
    pub lr: f64,
    pub margin: f64,
    pub positive_radius_m: f64,
    pub negative_exclusion_m: f64,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_queries: 8,
            negative_pool: 10,
            refresh_every: 25,
            lr: 1e-3,
            margin: 0.1,
            positive_radius_m: 10.0,
            negative_exclusion_m: 25.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TripletStats {
    /// (iteration, mean batch loss)
    pub loss_log: Vec<(usize, f64)>,
    /// queries dropped at setup for lacking any in-radius gallery image
    pub skipped_queries: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Triplet training: positive = descriptor-nearest gallery image within the
/// positive radius, negative = hardest of a random pool drawn beyond the
/// exclusion radius. One Adam step per iteration over a query batch.
pub fn train_encoder_triplet<S: Scalar>(
    model: &mut EncoderModel<S>,
    queries: &[GeoImage<S>],
    gallery: &[GeoImage<S>],
    cfg: &TripletConfig,
) -> Result<TripletStats, EncoderError> {
    let mut eligible: Vec<(usize, Vec<usize>, Vec<usize>)> = Vec::new();
    let mut skipped = 0usize;
    for (qi, q) in queries.iter().enumerate() {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (gi, g) in gallery.iter().enumerate() {
            let d = geo_distance(&q.pos, &g.pos).map_err(Box::new)?;
            if d <= cfg.positive_radius_m {
                pos.push(gi);
            } else if d > cfg.negative_exclusion_m {
                neg.push(gi);
            }
        }
        if pos.is_empty() {
            warn!("query {} ({}) has no gallery image within {} m; skipped", qi, q.id, cfg.positive_radius_m);
            skipped += 1;
        } else if neg.is_empty() {
            warn!("query {} ({}) has no gallery image beyond {} m; skipped", qi, q.id, cfg.negative_exclusion_m);
            skipped += 1;
        } else {
            eligible.push((qi, pos, neg));
        }
    }
    if eligible.is_empty() {
        return Err(EncoderError::NoPositives {
            radius: cfg.positive_radius_m,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam: Adam<S> = Adam::new(S::from_f64(cfg.lr));
    let mut cache: Vec<Vec<f64>> = Vec::new();
    let mut loss_log = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        if it % cfg.refresh_every.max(1) == 0 {
            cache.clear();
            for g in gallery {
                let d = model.image_descriptor(&g.image)?;
                cache.push(d.data().iter().map(|v| v.into_f64()).collect());
            }
        }

        let mut g: Graph<S> = Graph::new();
        let mut losses = Vec::with_capacity(cfg.batch_queries);
        for _ in 0..cfg.batch_queries {
            let (qi, pos, neg) = &eligible[rng.gen_range(0..eligible.len())];
            let qdesc = model.image_descriptor(&queries[*qi].image)?;
            let qvec: Vec<f64> = qdesc.data().iter().map(|v| v.into_f64()).collect();
            let best_pos = *pos
                .iter()
                .min_by(|a, b| {
                    sq_dist(&qvec, &cache[**a])
                        .partial_cmp(&sq_dist(&qvec, &cache[**b]))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .expect("non-empty positives");
            let pool: Vec<usize> = (0..cfg.negative_pool.min(neg.len()).max(1))
                .map(|_| neg[rng.gen_range(0..neg.len())])
                .collect();
            let best_neg = *pool
                .iter()
                .min_by(|a, b| {
                    sq_dist(&qvec, &cache[**a])
                        .partial_cmp(&sq_dist(&qvec, &cache[**b]))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .expect("non-empty pool");

            let qv = g.leaf(queries[*qi].image.clone());
            let pv = g.leaf(gallery[best_pos].image.clone());
            let nv = g.leaf(gallery[best_neg].image.clone());
            let qd = model.descriptor(&mut g, qv)?;
            let pd = model.descriptor(&mut g, pv)?;
            let nd = model.descriptor(&mut g, nv)?;
            losses.push(triplet_margin_loss(&mut g, qd, pd, nd, cfg.margin)?);
        }
        let stacked = g.stack0(&losses)?;
        let loss = g.mean(stacked);
        let loss_val = g.value(loss).data()[0].into_f64();
        g.backward(loss, &mut model.params)?;
        adam.step(&mut model.params)?;
        model.params.clear_grads();
        loss_log.push((it, loss_val));
    }

    Ok(TripletStats {
        loss_log,
        skipped_queries: skipped,
    })
}
