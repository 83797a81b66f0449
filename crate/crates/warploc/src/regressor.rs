//! Pairwise warp regression: dense correlation matching between two feature
//! grids, a small conv regressor that emits eight points per image, and the
//! differentiable composition that warps both images onto their shared
//! region.
//!
//! The correlation layer is parameterless. The regressor starts as a
//! constant function: its fully connected weights are zero and its biases
//! are the normalized frame corners, so an untrained model predicts exact
//! corner quads and every warp is the identity. Training only ever moves it
//! away from that fixed point.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::{EncoderError, EncoderModel, FEATURE_GRID_SIZE};
use crate::geometry::{GeometryError, NormalizedQuad, NORMALIZED_CORNERS};
use crate::tensor::{Graph, ParameterSet, Scalar, Tensor, TensorError, Var};

/// Channels of the correlation map: one per source grid cell.
pub const CORR_CHANNELS: usize = FEATURE_GRID_SIZE * FEATURE_GRID_SIZE;

const R_CHANNELS: [usize; 7] = [CORR_CHANNELS, 128, 128, 64, 64, 32, 32];
const R_STRIDES: [usize; 6] = [1, 2, 1, 2, 1, 2];
/// 15 -> 15 -> 8 -> 8 -> 4 -> 4 -> 2 across the stride plan, so the flatten
/// sees 32 * 2 * 2 values.
const FC_IN: usize = 128;
const FC_OUT: usize = 16;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("parameter set does not match the regressor architecture: {0}")]
    BadParameters(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn conv_w(layer: usize) -> String {
    format!("regressor.conv{layer}.w")
}

fn conv_b(layer: usize) -> String {
    format!("regressor.conv{layer}.b")
}

const FC_W: &str = "regressor.fc.w";
const FC_B: &str = "regressor.fc.b";

/// Eight points on each input image, normalized coordinates, first image
/// first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpPrediction {
    pub t_q: NormalizedQuad,
    pub t_p: NormalizedQuad,
}

/// Dense correlation before post-processing: out[k, i, j] is the inner
/// product of the first grid's vector at (i, j) with the second grid's
/// vector at cell k = i_k * 15 + j_k. For unit-norm inputs every entry lies
/// in [-1, 1].
pub fn correlation_map_raw<S: Scalar>(
    g: &mut Graph<S>,
    f_q: Var,
    f_p: Var,
) -> Result<Var, TensorError> {
    let (sq, sp) = (g.shape(f_q).to_vec(), g.shape(f_p).to_vec());
    let want_hw = [FEATURE_GRID_SIZE, FEATURE_GRID_SIZE];
    if sq.len() != 3 || sp.len() != 3 || sq[1..] != want_hw || sp[1..] != want_hw || sq[0] != sp[0]
    {
        return Err(TensorError::ShapeMismatch(format!(
            "correlation_map: want two [C,15,15] grids, got {sq:?} and {sp:?}"
        )));
    }
    let c = sq[0];
    // rows of p_mat are the second grid's cell vectors; columns of q_flat
    // are the first grid's cell vectors
    let p_mat = g.chw_to_mat(f_p)?;
    let q_flat = g.reshape(f_q, &[c, CORR_CHANNELS])?;
    let corr = g.matmul(p_mat, q_flat)?;
    g.reshape(corr, &[CORR_CHANNELS, FEATURE_GRID_SIZE, FEATURE_GRID_SIZE])
}

/// Correlation with the published post-processing: ReLU, then L2
/// normalization along the match axis.
pub fn correlation_map<S: Scalar>(
    g: &mut Graph<S>,
    f_q: Var,
    f_p: Var,
) -> Result<Var, TensorError> {
    let raw = correlation_map_raw(g, f_q, f_p)?;
    let pos = g.relu(raw);
    g.l2_normalize(pos, 0, S::from_f64(1e-12))
}

/// The warp regression head R: six convs and a fully connected layer.
#[derive(Debug, Clone)]
pub struct RegressorModel<S: Scalar> {
    params: ParameterSet<S>,
}

impl<S: Scalar> RegressorModel<S> {
    /// Conv layers get seeded He-uniform weights; the fully connected layer
    /// is zero with corner biases, making the initial output constant.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for l in 0..6 {
            let (c_in, c_out) = (R_CHANNELS[l], R_CHANNELS[l + 1]);
            let bound = (6.0 / (c_in * 9) as f64).sqrt();
            let w: Vec<S> = (0..c_out * c_in * 9)
                .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            params
                .insert(&conv_w(l + 1), Tensor::new(&[c_out, c_in, 3, 3], w).expect("shape"))
                .expect("unique");
            params
                .insert(&conv_b(l + 1), Tensor::zeros(&[c_out]))
                .expect("unique");
        }
        params
            .insert(FC_W, Tensor::zeros(&[FC_OUT, FC_IN]))
            .expect("unique");
        let bias: Vec<S> = NORMALIZED_CORNERS
            .iter()
            .chain(NORMALIZED_CORNERS.iter())
            .map(|v| S::from_f64(*v))
            .collect();
        params
            .insert(FC_B, Tensor::new(&[FC_OUT], bias).expect("shape"))
            .expect("unique");
        Self { params }
    }

    pub fn from_params(params: ParameterSet<S>) -> Result<Self, RegressorError> {
        if params.len() != 14 {
            return Err(RegressorError::BadParameters(format!(
                "want 14 tensors, got {}",
                params.len()
            )));
        }
        for l in 0..6 {
            let (c_in, c_out) = (R_CHANNELS[l], R_CHANNELS[l + 1]);
            let w = params
                .get(&conv_w(l + 1))
                .ok_or_else(|| RegressorError::BadParameters(format!("missing {}", conv_w(l + 1))))?;
            if w.shape() != [c_out, c_in, 3, 3] {
                return Err(RegressorError::BadParameters(format!(
                    "{} has shape {:?}",
                    conv_w(l + 1),
                    w.shape()
                )));
            }
            let b = params
                .get(&conv_b(l + 1))
                .ok_or_else(|| RegressorError::BadParameters(format!("missing {}", conv_b(l + 1))))?;
            if b.shape() != [c_out] {
                return Err(RegressorError::BadParameters(format!(
                    "{} has shape {:?}",
                    conv_b(l + 1),
                    b.shape()
                )));
            }
        }
        for (name, shape) in [(FC_W, vec![FC_OUT, FC_IN]), (FC_B, vec![FC_OUT])] {
            let t = params
                .get(name)
                .ok_or_else(|| RegressorError::BadParameters(format!("missing {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(RegressorError::BadParameters(format!(
                    "{name} has shape {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParameterSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<S> {
        &mut self.params
    }

    pub fn param_hash(&self) -> String {
        crate::tensor::content_hash_hex(&self.params)
    }

    /// 16-point regression from a correlation map node. `tracked` decides
    /// whether parameters enter the graph as trainable nodes.
    pub fn regress(
        &self,
        g: &mut Graph<S>,
        corr: Var,
        tracked: bool,
    ) -> Result<Var, RegressorError> {
        let shape = g.shape(corr).to_vec();
        if shape != [CORR_CHANNELS, FEATURE_GRID_SIZE, FEATURE_GRID_SIZE] {
            return Err(TensorError::ShapeMismatch(format!(
                "regress: want [225,15,15], got {shape:?}"
            ))
            .into());
        }
        let node = |g: &mut Graph<S>, name: &str| -> Result<Var, TensorError> {
            if tracked {
                g.param(&self.params, name)
            } else {
                Ok(g.leaf(self.params.get(name).expect("validated").clone()))
            }
        };
        let mut x = g.reshape(corr, &[1, CORR_CHANNELS, FEATURE_GRID_SIZE, FEATURE_GRID_SIZE])?;
        for l in 0..6 {
            let wv = node(g, &conv_w(l + 1))?;
            let bv = node(g, &conv_b(l + 1))?;
            let s = R_STRIDES[l];
            let conv = g.conv2d(x, wv, bv, (s, s), (1, 1))?;
            x = g.relu(conv);
        }
        let flat = g.reshape(x, &[1, FC_IN])?;
        let wv = node(g, FC_W)?;
        let bv = node(g, FC_B)?;
        let out = g.linear(flat, wv, bv)?;
        g.reshape(out, &[FC_OUT]).map_err(Into::into)
    }
}

/// Pure inference: correlation map tensor in, split prediction out.
pub fn regress_points<S: Scalar>(
    model: &RegressorModel<S>,
    corr: &Tensor<S>,
) -> Result<WarpPrediction, RegressorError> {
    let mut g: Graph<S> = Graph::new();
    let cv = g.leaf(corr.clone());
    let out = model.regress(&mut g, cv, false)?;
    let vals = g.value(out).data();
    let mut t_q = [0.0f64; 8];
    let mut t_p = [0.0f64; 8];
    for i in 0..8 {
        t_q[i] = vals[i].into_f64();
        t_p[i] = vals[8 + i].into_f64();
    }
    Ok(WarpPrediction {
        t_q: NormalizedQuad(t_q),
        t_p: NormalizedQuad(t_p),
    })
}

/// Graph nodes produced by one pairwise warp.
pub struct WarpPairNodes {
    /// [16]: both predicted quads in normalized coordinates, first image
    /// first.
    pub points: Var,
    /// [8] pixel-space quad on the first image.
    pub quad_q: Var,
    /// [8] pixel-space quad on the second image.
    pub quad_p: Var,
    /// First image warped onto its predicted quad (same size as the input).
    pub warped_q: Var,
    /// Second image warped onto its predicted quad.
    pub warped_p: Var,
}

/// Converts an [8] normalized-coordinate node to pixel coordinates for a
/// w-by-h frame. Exact at the corners: -1 maps to 0.0 and +1 to the full
/// extent, bit-for-bit, which keeps untrained warps on the identity path.
fn normalized_to_pixels<S: Scalar>(
    g: &mut Graph<S>,
    nq: Var,
    w: f64,
    h: f64,
) -> Result<Var, TensorError> {
    let perm: Vec<usize> = (0..8).collect();
    let mut mul = [S::zero(); 8];
    let mut add = [S::zero(); 8];
    for i in 0..4 {
        mul[2 * i] = S::from_f64(w / 2.0);
        add[2 * i] = S::from_f64(w / 2.0);
        mul[2 * i + 1] = S::from_f64(h / 2.0);
        add[2 * i + 1] = S::from_f64(h / 2.0);
    }
    g.affine_permute(nq, &perm, &mul, &add)
}

/// Points-only forward: encode both images, correlate, regress. The [16]
/// output holds both predicted quads in normalized coordinates, first image
/// first. Same computation as `warp_pair` minus the image warps.
pub fn predict_points<S: Scalar>(
    g: &mut Graph<S>,
    encoder: &EncoderModel<S>,
    model: &RegressorModel<S>,
    img_q: Var,
    img_p: Var,
    tracked: bool,
) -> Result<Var, RegressorError> {
    let f_q = encoder.feature_grid(g, img_q)?;
    let f_p = encoder.feature_grid(g, img_p)?;
    let corr = correlation_map(g, f_q, f_p)?;
    model.regress(g, corr, tracked)
}

/// The full pairwise warp W: encode both images (frozen encoder), correlate,
/// regress 16 points, convert to pixels, and warp each image onto its
/// predicted quad. Differentiable w.r.t. the regressor parameters when
/// `tracked`.
pub fn warp_pair<S: Scalar>(
    g: &mut Graph<S>,
    encoder: &EncoderModel<S>,
    model: &RegressorModel<S>,
    img_q: Var,
    img_p: Var,
    tracked: bool,
) -> Result<WarpPairNodes, RegressorError> {
    let (sq, sp) = (g.shape(img_q).to_vec(), g.shape(img_p).to_vec());
    let points = predict_points(g, encoder, model, img_q, img_p, tracked)?;
    let nq = g.slice(points, &[0], &[8])?;
    let np = g.slice(points, &[8], &[8])?;
    let quad_q = normalized_to_pixels(g, nq, sq[2] as f64, sq[1] as f64)?;
    let quad_p = normalized_to_pixels(g, np, sp[2] as f64, sp[1] as f64)?;
    let warped_q = g.warp_image(img_q, quad_q, (sq[1], sq[2]))?;
    let warped_p = g.warp_image(img_p, quad_p, (sp[1], sp[2]))?;
    Ok(WarpPairNodes {
        points,
        quad_q,
        quad_p,
        warped_q,
        warped_p,
    })
}
