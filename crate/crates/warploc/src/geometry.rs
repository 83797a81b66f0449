//! Exact homography math: four-point parameterization against frame corners,
//! the 8x8 direct-linear-transform solve, point and image projection,
//! constrained trapezoid sampling, and trapezoid intersection.
//!
//! Conventions. Image frames are the continuous rectangles [0,w] x [0,h] with
//! y growing downward; pixel (row i, col j) has center (j+0.5, i+0.5). Quads
//! list their points in top-left, top-right, bottom-right, bottom-left order.
//! A quad paired with the frame corners defines the homography that fills the
//! frame with the quad's content (crop-and-rectify, inverse sampling).

use nalgebra::{Matrix3, SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("singular correspondence system: {0}")]
    SingularSystem(String),
    #[error("point at infinity under homography (w = {0:.3e})")]
    PointAtInfinity(f64),
    #[error("degenerate quad: {0}")]
    DegenerateQuad(String),
    #[error("k must lie in [0,1], got {0}")]
    InvalidK(f64),
    #[error("empty trapezoid intersection: {0}")]
    DegenerateIntersection(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pt {
    pub x: f64,
    pub y: f64,
}

impl Pt {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, o: &Pt) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }
}

/// Four points in TL, TR, BR, BL order, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub p: [Pt; 4],
}

impl Quad {
    pub fn new(p1: Pt, p2: Pt, p3: Pt, p4: Pt) -> Self {
        Self { p: [p1, p2, p3, p4] }
    }

    /// The frame-corner quad (0,0),(w,0),(w,h),(0,h).
    pub fn frame(w: f64, h: f64) -> Self {
        Self::new(
            Pt::new(0.0, 0.0),
            Pt::new(w, 0.0),
            Pt::new(w, h),
            Pt::new(0.0, h),
        )
    }

    pub fn from_coords(c: &[f64; 8]) -> Self {
        Self::new(
            Pt::new(c[0], c[1]),
            Pt::new(c[2], c[3]),
            Pt::new(c[4], c[5]),
            Pt::new(c[6], c[7]),
        )
    }

    pub fn coords(&self) -> [f64; 8] {
        [
            self.p[0].x, self.p[0].y, self.p[1].x, self.p[1].y, self.p[2].x, self.p[2].y,
            self.p[3].x, self.p[3].y,
        ]
    }

    /// Shoelace area; positive for TL,TR,BR,BL winding in y-down coordinates.
    pub fn area(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..4 {
            let a = self.p[i];
            let b = self.p[(i + 1) % 4];
            s += a.x * b.y - b.x * a.y;
        }
        s / 2.0
    }

    /// Convex with positive area and consistent winding.
    pub fn is_convex_nondegenerate(&self) -> bool {
        let mut signs = [0.0f64; 4];
        for i in 0..4 {
            let a = self.p[i];
            let b = self.p[(i + 1) % 4];
            let c = self.p[(i + 2) % 4];
            signs[i] = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        }
        self.area() > 0.0 && signs.iter().all(|s| *s > 0.0)
    }

    /// Vertical parallel sides: p1.x == p4.x and p2.x == p3.x.
    pub fn is_vertical_trapezoid(&self) -> bool {
        self.p[0].x == self.p[3].x && self.p[1].x == self.p[2].x
    }
}

/// 3x3 projective map, normalized so the bottom-right entry is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Entries normalized with m[2][2] == 1.
    pub fn entries(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let s = m[(2, 2)];
        if s.abs() < 1e-300 {
            return Err(GeometryError::SingularSystem(
                "cannot normalize h33 = 0".into(),
            ));
        }
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = m[(r, c)] / s;
            }
        }
        Ok(Self { m: out })
    }

    fn to_matrix(self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    pub fn det(&self) -> f64 {
        self.to_matrix().determinant()
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let inv = self
            .to_matrix()
            .try_inverse()
            .ok_or_else(|| GeometryError::SingularSystem("homography not invertible".into()))?;
        Self::from_matrix(inv)
    }

    /// Composition `self(other(p))`.
    pub fn compose(&self, other: &Homography) -> Result<Self, GeometryError> {
        Self::from_matrix(self.to_matrix() * other.to_matrix())
    }

    pub fn apply_pt(&self, p: Pt) -> Result<Pt, GeometryError> {
        let w = self.m[2][0] * p.x + self.m[2][1] * p.y + self.m[2][2];
        if w.abs() <= 1e-12 {
            return Err(GeometryError::PointAtInfinity(w));
        }
        Ok(Pt::new(
            (self.m[0][0] * p.x + self.m[0][1] * p.y + self.m[0][2]) / w,
            (self.m[1][0] * p.x + self.m[1][1] * p.y + self.m[1][2]) / w,
        ))
    }
}

fn three_collinear(q: &Quad) -> bool {
    // scale-aware: compare twice-area of each triple against its extent
    for i in 0..4 {
        let a = q.p[i];
        let b = q.p[(i + 1) % 4];
        let c = q.p[(i + 2) % 4];
        let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        let scale = a.dist(&b).max(b.dist(&c)).max(1e-12);
        if cross.abs() < 1e-9 * scale * scale {
            return true;
        }
    }
    false
}

/// Builds one correspondence pair's two rows of the 8x8 DLT system.
fn dlt_rows(a: &mut SMatrix<f64, 8, 8>, b: &mut SVector<f64, 8>, i: usize, s: Pt, d: Pt) {
    let r = 2 * i;
    a[(r, 0)] = s.x;
    a[(r, 1)] = s.y;
    a[(r, 2)] = 1.0;
    a[(r, 6)] = -d.x * s.x;
    a[(r, 7)] = -d.x * s.y;
    b[r] = d.x;
    a[(r + 1, 3)] = s.x;
    a[(r + 1, 4)] = s.y;
    a[(r + 1, 5)] = 1.0;
    a[(r + 1, 6)] = -d.y * s.x;
    a[(r + 1, 7)] = -d.y * s.y;
    b[r + 1] = d.y;
}

/// Homography mapping the four `src` points onto the four `dst` points,
/// solved from the 8x8 direct-linear-transform system with h33 pinned to 1.
///
/// `src == dst` (bitwise) short-circuits to the exact identity matrix, which
/// keeps identity warps bit-exact downstream.
pub fn homography_from_quad(src: &Quad, dst: &Quad) -> Result<Homography, GeometryError> {
    if src == dst {
        return Ok(Homography::identity());
    }
    if three_collinear(src) {
        return Err(GeometryError::SingularSystem(
            "three source points collinear".into(),
        ));
    }
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        dlt_rows(&mut a, &mut b, i, src.p[i], dst.p[i]);
    }
    let lu = a.lu();
    let h = lu
        .solve(&b)
        .ok_or_else(|| GeometryError::SingularSystem("DLT system singular".into()))?;
    let hm = Homography {
        m: [
            [h[0], h[1], h[2]],
            [h[3], h[4], h[5]],
            [h[6], h[7], 1.0],
        ],
    };
    // reject maps that collapse the quad (e.g. collinear destinations)
    let scale = src.p[0].dist(&src.p[2]).max(1.0);
    if hm.det().abs() < 1e-12 * scale {
        return Err(GeometryError::SingularSystem(
            "resulting homography not invertible".into(),
        ));
    }
    Ok(hm)
}

pub fn apply_homography(h: &Homography, pts: &[Pt]) -> Result<Vec<Pt>, GeometryError> {
    pts.iter().map(|p| h.apply_pt(*p)).collect()
}

/// Coordinates rescaled to the [-1,1]^2 canonical frame, (-1,-1) = top-left,
/// stored (x1,y1,...,x4,y4).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedQuad(pub [f64; 8]);

pub fn to_normalized(q: &Quad, w: f64, h: f64) -> NormalizedQuad {
    let c = q.coords();
    let mut n = [0.0; 8];
    for i in 0..4 {
        n[2 * i] = 2.0 * c[2 * i] / w - 1.0;
        n[2 * i + 1] = 2.0 * c[2 * i + 1] / h - 1.0;
    }
    NormalizedQuad(n)
}

pub fn from_normalized(nq: &NormalizedQuad, w: f64, h: f64) -> Quad {
    let mut c = [0.0; 8];
    for i in 0..4 {
        c[2 * i] = (nq.0[2 * i] + 1.0) * w / 2.0;
        c[2 * i + 1] = (nq.0[2 * i + 1] + 1.0) * h / 2.0;
    }
    Quad::from_coords(&c)
}

/// The corner quad in normalized coordinates: (-1,-1),(1,-1),(1,1),(-1,1).
pub const NORMALIZED_CORNERS: [f64; 8] = [-1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0];

/// Samples a random vertical-sided trapezoid inside a w x h frame.
///
/// Six uniforms in fixed order: the left x offset (shared by p1 and p4), the
/// right x offset (shared by p2 and p3), then the four independent y offsets
/// for p1, p2, p3, p4. Each offset is U(0,k) times half the frame extent, so
/// k = 0 yields exactly the frame corners.
pub fn sample_quad(rng: &mut impl Rng, k: f64, w: f64, h: f64) -> Result<Quad, GeometryError> {
    if !(0.0..=1.0).contains(&k) || !k.is_finite() {
        return Err(GeometryError::InvalidK(k));
    }
    let mut u = || rng.gen::<f64>() * k;
    let x_l = u() * w / 2.0;
    let x_r = w - u() * w / 2.0;
    let y1 = u() * h / 2.0;
    let y2 = u() * h / 2.0;
    let y3 = h - u() * h / 2.0;
    let y4 = h - u() * h / 2.0;
    Ok(Quad::new(
        Pt::new(x_l, y1),
        Pt::new(x_r, y2),
        Pt::new(x_r, y3),
        Pt::new(x_l, y4),
    ))
}

/// Evaluates the line through `a` and `b` at abscissa `x` (requires a.x != b.x).
fn line_y(a: Pt, b: Pt, x: f64) -> f64 {
    a.y + (x - a.x) * (b.y - a.y) / (b.x - a.x)
}

/// Widest vertical-sided trapezoid inside the intersection of two
/// vertical-sided trapezoids.
///
/// Left side at the max of the input lefts, right side at the min of the
/// rights; at each side the top is the max of the two top edges and the
/// bottom the min of the two bottom edges. The top boundary of the true
/// intersection is a max of lines (convex), the bottom a min of lines
/// (concave), so the output's straight chords stay inside the intersection,
/// and no contained trapezoid can be wider because nothing of the
/// intersection exists outside [left, right].
pub fn intersect_trapezoids(tx: &Quad, ty: &Quad) -> Result<Quad, GeometryError> {
    for (name, t) in [("first", tx), ("second", ty)] {
        if !t.is_vertical_trapezoid() {
            return Err(GeometryError::DegenerateQuad(format!(
                "{name} input is not a vertical-sided trapezoid"
            )));
        }
        if t.p[1].x <= t.p[0].x {
            return Err(GeometryError::DegenerateQuad(format!(
                "{name} input has non-positive width"
            )));
        }
    }
    let xl = tx.p[0].x.max(ty.p[0].x);
    let xr = tx.p[1].x.min(ty.p[1].x);
    if xl >= xr {
        return Err(GeometryError::DegenerateIntersection(format!(
            "x ranges [{}, {}] and [{}, {}] do not overlap",
            tx.p[0].x, tx.p[1].x, ty.p[0].x, ty.p[1].x
        )));
    }
    let top = |t: &Quad, x: f64| line_y(t.p[0], t.p[1], x);
    let bot = |t: &Quad, x: f64| line_y(t.p[3], t.p[2], x);
    let top_l = top(tx, xl).max(top(ty, xl));
    let top_r = top(tx, xr).max(top(ty, xr));
    let bot_l = bot(tx, xl).min(bot(ty, xl));
    let bot_r = bot(tx, xr).min(bot(ty, xr));
    if top_l >= bot_l || top_r >= bot_r {
        return Err(GeometryError::DegenerateIntersection(format!(
            "vertical extent empty at x={xl} or x={xr}"
        )));
    }
    Ok(Quad::new(
        Pt::new(xl, top_l),
        Pt::new(xr, top_r),
        Pt::new(xr, bot_r),
        Pt::new(xl, bot_l),
    ))
}

// ---- image warping ----

struct WarpPlan {
    h: Homography,
    identity: bool,
}

fn plan_warp(
    quad: &Quad,
    img_h: usize,
    img_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<WarpPlan, GeometryError> {
    if !quad.is_convex_nondegenerate() {
        return Err(GeometryError::DegenerateQuad(format!(
            "warp source quad not convex/positive: {:?}",
            quad.coords()
        )));
    }
    let frame = Quad::frame(img_w as f64, img_h as f64);
    if out_h == img_h && out_w == img_w && *quad == frame {
        return Ok(WarpPlan {
            h: Homography::identity(),
            identity: true,
        });
    }
    let out_frame = Quad::frame(out_w as f64, out_h as f64);
    let h = homography_from_quad(&out_frame, quad)
        .map_err(|e| GeometryError::DegenerateQuad(format!("warp DLT failed: {e}")))?;
    Ok(WarpPlan { h, identity: false })
}

/// Four bilinear taps around continuous index position (x, y); out-of-bounds
/// taps are dropped (read 0).
#[inline]
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> ([(usize, usize, f64); 4], usize) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0i, y0i) = (x0 as isize, y0 as isize);
    let mut taps = [(0usize, 0usize, 0.0f64); 4];
    let mut n = 0;
    let cands = [
        (y0i, x0i, (1.0 - fy) * (1.0 - fx)),
        (y0i, x0i + 1, (1.0 - fy) * fx),
        (y0i + 1, x0i, fy * (1.0 - fx)),
        (y0i + 1, x0i + 1, fy * fx),
    ];
    for (yy, xx, wgt) in cands {
        if wgt != 0.0 && yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
            taps[n] = (yy as usize, xx as usize, wgt);
            n += 1;
        }
    }
    (taps, n)
}

fn warp_forward<S: Scalar>(
    img: &Tensor<S>,
    plan: &WarpPlan,
    out_h: usize,
    out_w: usize,
) -> Tensor<S> {
    let shape = img.shape();
    let (c, ih, iw) = (shape[0], shape[1], shape[2]);
    if plan.identity {
        return img.clone();
    }
    let x = img.data();
    let mut out = vec![S::zero(); c * out_h * out_w];
    let m = plan.h.entries();
    for oi in 0..out_h {
        let v = oi as f64 + 0.5;
        for oj in 0..out_w {
            let u = oj as f64 + 0.5;
            let z = m[2][0] * u + m[2][1] * v + m[2][2];
            let sx = (m[0][0] * u + m[0][1] * v + m[0][2]) / z - 0.5;
            let sy = (m[1][0] * u + m[1][1] * v + m[1][2]) / z - 0.5;
            let (taps, n) = bilinear_taps(sx, sy, ih, iw);
            for ci in 0..c {
                let plane = &x[ci * ih * iw..(ci + 1) * ih * iw];
                let mut acc = S::zero();
                for (yy, xx, wgt) in &taps[..n] {
                    acc += S::from_f64(*wgt) * plane[yy * iw + xx];
                }
                out[(ci * out_h + oi) * out_w + oj] = acc;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("shape")
}

/// Projects the region bounded by `quad` (on `img`) onto a fresh
/// `out_hw`-sized frame via the quad-to-corners homography, sampling
/// bilinearly; samples outside the image read 0. `quad` equal to the frame
/// corners with matching sizes reproduces the input bit-for-bit.
pub fn warp_image<S: Scalar>(
    img: &Tensor<S>,
    quad: &Quad,
    out_hw: (usize, usize),
) -> Result<Tensor<S>, GeometryError> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(TensorError::ShapeMismatch(format!(
            "warp_image: want [C,H,W], got {shape:?}"
        ))
        .into());
    }
    let plan = plan_warp(quad, shape[1], shape[2], out_hw.0, out_hw.1)?;
    Ok(warp_forward(img, &plan, out_hw.0, out_hw.1))
}

impl<S: Scalar> Graph<S> {
    /// Differentiable crop-and-rectify: `quad8` is a flat [8] node of pixel
    /// coordinates (x1,y1,..,x4,y4 in TL,TR,BR,BL order) on `img`'s frame.
    /// Gradients flow into the image through the bilinear taps and into the
    /// quad through the adjoint of the DLT linear system.
    pub fn warp_image(
        &mut self,
        img: Var,
        quad8: Var,
        out_hw: (usize, usize),
    ) -> Result<Var, GeometryError> {
        let ishape = self.shape(img).to_vec();
        if ishape.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "warp_image: want [C,H,W] image, got {ishape:?}"
            ))
            .into());
        }
        if self.shape(quad8) != [8] {
            return Err(TensorError::ShapeMismatch(format!(
                "warp_image: want [8] quad, got {:?}",
                self.shape(quad8)
            ))
            .into());
        }
        let (c, ih, iw) = (ishape[0], ishape[1], ishape[2]);
        let (oh, ow) = out_hw;
        let qvals = self.value(quad8).data();
        let mut qc = [0.0f64; 8];
        for i in 0..8 {
            qc[i] = qvals[i].into_f64();
        }
        let quad = Quad::from_coords(&qc);
        let plan = plan_warp(&quad, ih, iw, oh, ow)?;
        let out = warp_forward(self.value(img), &plan, oh, ow);

        let (ii, qi) = (img.0, quad8.0);
        Ok(self.push_op(
            out,
            &[img, quad8],
            Box::new(move |vals, g, sink| {
                let qvals: &[S] = vals[qi].data();
                let mut qc = [0.0f64; 8];
                for i in 0..8 {
                    qc[i] = qvals[i].into_f64();
                }
                let quad = Quad::from_coords(&qc);
                // Forward succeeded on these exact values; the replan only
                // reconstructs the same homography.
                let plan = plan_warp(&quad, ih, iw, oh, ow).expect("replanning forward warp");
                let x: &[S] = vals[ii].data();
                let m = *plan.h.entries();
                let wants_img = sink.wants(ii);
                let wants_quad = sink.wants(qi);

                // dL/dH accumulates over all output pixels (free entries only;
                // h33 is pinned at 1).
                let mut gh = [0.0f64; 8];
                if wants_img {
                    // borrow juggling: image grads are written in one pass,
                    // position grads collected in the same loop
                    let gimg = sink.buf(ii);
                    accumulate_warp_grads::<S, true>(
                        x, g, gimg, &m, plan.identity, c, ih, iw, oh, ow, wants_quad, &mut gh,
                    );
                } else if wants_quad {
                    accumulate_warp_grads::<S, false>(
                        x,
                        g,
                        &mut [],
                        &m,
                        plan.identity,
                        c,
                        ih,
                        iw,
                        oh,
                        ow,
                        true,
                        &mut gh,
                    );
                }

                if wants_quad {
                    // Adjoint of A(quad) h = b(quad): solve A^T lambda = dL/dh,
                    // then dL/dq_i picks up lambda against db/dq - (dA/dq) h.
                    let out_frame = Quad::frame(ow as f64, oh as f64);
                    let mut a = SMatrix::<f64, 8, 8>::zeros();
                    let mut b = SVector::<f64, 8>::zeros();
                    for i in 0..4 {
                        dlt_rows(&mut a, &mut b, i, out_frame.p[i], quad.p[i]);
                    }
                    let dl_dh = SVector::<f64, 8>::from_row_slice(&gh);
                    if let Some(lambda) = a.transpose().lu().solve(&dl_dh) {
                        let h31 = m[2][0];
                        let h32 = m[2][1];
                        let gq = sink.buf(qi);
                        for i in 0..4 {
                            let s = out_frame.p[i];
                            let depth = 1.0 + s.x * h31 + s.y * h32;
                            gq[2 * i] += S::from_f64(lambda[2 * i] * depth);
                            gq[2 * i + 1] += S::from_f64(lambda[2 * i + 1] * depth);
                        }
                    }
                }
            }),
        ))
    }
}

/// Shared backward loop for the warp op. With `WANT_IMG` the bilinear taps
/// scatter into `gimg`; with `want_pos` the projective chain terms accumulate
/// into `gh`.
#[allow(clippy::too_many_arguments)]
fn accumulate_warp_grads<S: Scalar, const WANT_IMG: bool>(
    x: &[S],
    g: &[S],
    gimg: &mut [S],
    m: &[[f64; 3]; 3],
    identity: bool,
    c: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    want_pos: bool,
    gh: &mut [f64; 8],
) {
    if identity {
        // exact copy both ways; position gradient of the identity plan still
        // accumulates (the quad can move even if it currently sits on the corners)
        for oi in 0..oh {
            let v = oi as f64 + 0.5;
            for oj in 0..ow {
                let u = oj as f64 + 0.5;
                if WANT_IMG {
                    for ci in 0..c {
                        gimg[(ci * ih + oi) * iw + oj] += g[(ci * oh + oi) * ow + oj];
                    }
                }
                if want_pos {
                    let (gx, gy) = position_grad::<S>(x, g, u - 0.5, v - 0.5, c, ih, iw, oh, ow, oi, oj);
                    // identity plan: Z = 1, X = u, Y = v
                    add_gh(gh, gx, gy, u, v, u, v, 1.0);
                }
            }
        }
        return;
    }
    for oi in 0..oh {
        let v = oi as f64 + 0.5;
        for oj in 0..ow {
            let u = oj as f64 + 0.5;
            let z = m[2][0] * u + m[2][1] * v + m[2][2];
            let px = (m[0][0] * u + m[0][1] * v + m[0][2]) / z;
            let py = (m[1][0] * u + m[1][1] * v + m[1][2]) / z;
            let sx = px - 0.5;
            let sy = py - 0.5;
            if WANT_IMG {
                let (taps, n) = bilinear_taps(sx, sy, ih, iw);
                for ci in 0..c {
                    let gv = g[(ci * oh + oi) * ow + oj];
                    for (yy, xx, wgt) in &taps[..n] {
                        gimg[(ci * ih + yy) * iw + xx] += gv * S::from_f64(*wgt);
                    }
                }
            }
            if want_pos {
                let (gx, gy) = position_grad::<S>(x, g, sx, sy, c, ih, iw, oh, ow, oi, oj);
                add_gh(gh, gx, gy, u, v, px, py, z);
            }
        }
    }
}

/// d(output pixel)/d(sample position), summed over channels against the
/// output gradient. Out-of-bounds taps contribute 0, matching the forward
/// zero-fill.
#[allow(clippy::too_many_arguments)]
#[inline]
fn position_grad<S: Scalar>(
    x: &[S],
    g: &[S],
    sx: f64,
    sy: f64,
    c: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    oi: usize,
    oj: usize,
) -> (f64, f64) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0i, y0i) = (x0 as isize, y0 as isize);
    let fetch = |plane: &[S], yy: isize, xx: isize| -> f64 {
        if yy >= 0 && (yy as usize) < ih && xx >= 0 && (xx as usize) < iw {
            plane[(yy as usize) * iw + xx as usize].into_f64()
        } else {
            0.0
        }
    };
    let mut gx = 0.0;
    let mut gy = 0.0;
    for ci in 0..c {
        let plane = &x[ci * ih * iw..(ci + 1) * ih * iw];
        let v00 = fetch(plane, y0i, x0i);
        let v01 = fetch(plane, y0i, x0i + 1);
        let v10 = fetch(plane, y0i + 1, x0i);
        let v11 = fetch(plane, y0i + 1, x0i + 1);
        let gv = g[(ci * oh + oi) * ow + oj].into_f64();
        gx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
        gy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
    }
    (gx, gy)
}

/// Projective chain rule: folds d(sample x,y)/dH into the 8 free entries.
#[inline]
fn add_gh(gh: &mut [f64; 8], gx: f64, gy: f64, u: f64, v: f64, px: f64, py: f64, z: f64) {
    let iz = 1.0 / z;
    gh[0] += gx * u * iz;
    gh[1] += gx * v * iz;
    gh[2] += gx * iz;
    gh[3] += gy * u * iz;
    gh[4] += gy * v * iz;
    gh[5] += gy * iz;
    gh[6] += -(gx * px + gy * py) * u * iz;
    gh[7] += -(gx * px + gy * py) * v * iz;
}
