//! Procedural planar-facade world with exact ground truth.
//!
//! Every scene is a seeded 512x512 texture; every view is a perspective crop
//! (a vertical-sided trapezoid on the texture) plus photometric jitter and
//! opaque occluders. Because views are exact homographic crops, the true
//! inter-view homography and overlap region are computable in closed form,
//! which gives the retrieval and warping stages an independent oracle.
//!
//! Textures are deliberately band-limited: feature edges are wide smoothstep
//! ramps, stripes are sinusoidal, and the value noise is C1, so resampling a
//! rendered view through a second homography reproduces another view of the
//! same scene to within a couple of gray levels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{
    apply_homography, homography_from_quad, intersect_trapezoids, sample_quad, warp_image,
    GeometryError, Homography, Pt, Quad,
};
use crate::retrieval::Position;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Side length of every scene's base texture.
pub const BASE_TEXTURE_SIZE: usize = 512;
/// Largest fraction of a view the occluders may cover.
pub const OCCLUDER_BUDGET: f64 = 0.15;
/// Largest distance between a view position and its scene anchor, meters.
pub const VIEW_POSITION_JITTER_M: f64 = 5.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("a world needs at least 2 scenes, got {0}")]
    TooFewScenes(usize),
    #[error("each scene needs at least 2 views (one gallery, one query), got {0}")]
    TooFewViews(usize),
    #[error("occluders cover {got:.1}% of the frame, budget is {budget:.0}%")]
    OccluderBudget { got: f64, budget: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One planar facade: a texture seed and a world position.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub id: usize,
    pub texture_seed: u64,
    pub pos: Position,
}

/// Photometric perturbation applied after warping. The identity is
/// brightness 0, contrast 1, zero color shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub color: [f64; 3],
}

impl PhotometricJitter {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            color: [0.0; 3],
        }
    }
}

/// Opaque axis-aligned rectangle painted over the rendered view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub color: [f64; 3],
}

/// Full recipe for one camera view of a scene. The quad is the sub-region of
/// the base texture this camera sees; keeping it in the record makes the true
/// homography between any two views of the same scene recoverable.
#[derive(Debug, Clone)]
pub struct ViewSpec {
    pub scene: usize,
    /// Vertical-sided trapezoid on the base texture, strictly inside it.
    pub quad: Quad,
    pub jitter: PhotometricJitter,
    pub occluders: Vec<Occluder>,
    /// Rendered output size (height, width).
    pub out_hw: (usize, usize),
}

impl ViewSpec {
    /// A full-frame, jitter-free, occluder-free view: rendering it returns
    /// the base texture unchanged.
    pub fn identity(scene: usize) -> Self {
        let n = BASE_TEXTURE_SIZE as f64;
        Self {
            scene,
            quad: Quad::frame(n, n),
            jitter: PhotometricJitter::identity(),
            occluders: Vec::new(),
            out_hw: (BASE_TEXTURE_SIZE, BASE_TEXTURE_SIZE),
        }
    }
}

/// Smoothstep ramp: 0 below the window, 1 above, C1 in between.
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// C1 value noise on a square lattice with the given cell size.
struct ValueNoise {
    cells: usize,
    cell: f64,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Self {
        let cells = size / cell + 2;
        let lattice = (0..cells * cells).map(|_| rng.gen::<f64>()).collect();
        Self {
            cells,
            cell: cell as f64,
            lattice,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (cx, cy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (cx.floor() as usize, cy.floor() as usize);
        let (fx, fy) = (smoothstep(cx.fract()), smoothstep(cy.fract()));
        let g = |i: usize, j: usize| self.lattice[j * self.cells + i];
        let top = g(ix, iy) * (1.0 - fx) + g(ix + 1, iy) * fx;
        let bot = g(ix, iy + 1) * (1.0 - fx) + g(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Muted facade palette anchoring every scene's hues. Each scene perturbs
/// its picks (see `base_texture`), so scenes are related but separable.
const PALETTE: [[f64; 3]; 6] = [
    [0.76, 0.70, 0.58],
    [0.62, 0.58, 0.54],
    [0.71, 0.55, 0.45],
    [0.55, 0.60, 0.66],
    [0.68, 0.64, 0.70],
    [0.58, 0.52, 0.42],
];

fn mix3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Deterministic facade texture for a seed: wall color, sinusoidal stripe
/// bands, a soft window grid, and two octaves of smooth value noise.
/// Shape [3, 512, 512], values in [0, 1]; the same seed regenerates the
/// texture bit-for-bit.
pub fn base_texture<S: Scalar>(seed: u64) -> Tensor<S> {
    let n = BASE_TEXTURE_SIZE;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Small per-scene channel offsets keep scenes color-confusable (global
    // retrieval stays non-trivial); scene identity lives mostly in layout:
    // stripe direction/period/strength and the window grid geometry.
    let pick = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let c = PALETTE[rng.gen_range(0..PALETTE.len())];
        [
            (c[0] + rng.gen_range(-0.06..0.06)).clamp(0.05, 0.95),
            (c[1] + rng.gen_range(-0.06..0.06)).clamp(0.05, 0.95),
            (c[2] + rng.gen_range(-0.06..0.06)).clamp(0.05, 0.95),
        ]
    };
    let wall = pick(&mut rng);
    let stripe = pick(&mut rng);
    let window = pick(&mut rng);
    let stripes_vertical = rng.gen::<bool>();
    let period = rng.gen_range(40.0..120.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let stripe_amp = rng.gen_range(0.2..0.5);

    let cols = rng.gen_range(2..=5usize);
    let rows = rng.gen_range(2..=5usize);
    let margin_frac = rng.gen_range(0.12..0.28);
    let win_amp = rng.gen_range(0.3..0.7);
    let edge = 20.0;

    let coarse = ValueNoise::new(&mut rng, n, 64);
    let fine = ValueNoise::new(&mut rng, n, 32);
    let noise_gain = [
        rng.gen_range(0.05..0.09),
        rng.gen_range(0.05..0.09),
        rng.gen_range(0.05..0.09),
    ];

    // soft membership profile of a window cell along one axis
    let cell_profile = |coord: f64, cells: usize| -> f64 {
        let cell = nf / cells as f64;
        let t = coord / cell;
        let local = (t - t.floor()) * cell;
        let margin = cell * margin_frac;
        let into = (local - margin).min(cell - margin - local);
        smoothstep(into / edge)
    };

    let mut data = Vec::with_capacity(3 * n * n);
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let (xf, yf) = (x as f64, y as f64);
                let s_coord = if stripes_vertical { xf } else { yf };
                let s = 0.5
                    + 0.5 * (std::f64::consts::TAU * s_coord / period + phase).sin();
                let mut px = mix3(wall, stripe, stripe_amp * s);
                let w = cell_profile(xf, cols) * cell_profile(yf, rows);
                px = mix3(px, window, win_amp * w);
                let nz = 0.6 * coarse.at(xf, yf) + 0.4 * fine.at(xf, yf);
                let v = (px[c] + noise_gain[c] * (nz - 0.5) * 2.0).clamp(0.0, 1.0);
                data.push(S::from_f64(v));
            }
        }
    }
    Tensor::new(&[3, n, n], data).expect("texture shape")
}

/// Fraction of the frame covered by the union of the occluders, measured on
/// the pixel grid.
pub fn occluder_coverage(occluders: &[Occluder], hw: (usize, usize)) -> f64 {
    let (h, w) = hw;
    if h == 0 || w == 0 {
        return 0.0;
    }
    let mut mask = vec![false; h * w];
    for o in occluders {
        for y in o.y..(o.y + o.h).min(h) {
            for x in o.x..(o.x + o.w).min(w) {
                mask[y * w + x] = true;
            }
        }
    }
    mask.iter().filter(|m| **m).count() as f64 / (h * w) as f64
}

/// Renders a view: homographic crop of the base texture, then photometric
/// jitter, then occluders. A full-frame identity spec reproduces the base
/// texture exactly.
pub fn render_view<S: Scalar>(
    base: &Tensor<S>,
    spec: &ViewSpec,
) -> Result<Tensor<S>, SynthError> {
    let cover = occluder_coverage(&spec.occluders, spec.out_hw);
    if cover > OCCLUDER_BUDGET {
        return Err(SynthError::OccluderBudget {
            got: 100.0 * cover,
            budget: 100.0 * OCCLUDER_BUDGET,
        });
    }
    let mut img = warp_image(base, &spec.quad, spec.out_hw)?;
    let j = &spec.jitter;
    let photometric_identity =
        j.brightness == 0.0 && j.contrast == 1.0 && j.color == [0.0; 3];
    if !photometric_identity {
        let (h, w) = spec.out_hw;
        let data = img.data_mut();
        for c in 0..3 {
            let shift = j.brightness + j.color[c];
            for v in &mut data[c * h * w..(c + 1) * h * w] {
                let x = (v.into_f64() - 0.5) * j.contrast + 0.5 + shift;
                *v = S::from_f64(x.clamp(0.0, 1.0));
            }
        }
    }
    if !spec.occluders.is_empty() {
        let (h, w) = spec.out_hw;
        let data = img.data_mut();
        for o in &spec.occluders {
            for c in 0..3 {
                let col = S::from_f64(o.color[c]);
                for y in o.y..(o.y + o.h).min(h) {
                    for x in o.x..(o.x + o.w).min(w) {
                        data[(c * h + y) * w + x] = col;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Homography sending pixel coordinates of view `a`'s rendered frame to the
/// corresponding pixels of view `b`'s rendered frame (same scene).
pub fn view_homography(a: &ViewSpec, b: &ViewSpec) -> Result<Homography, SynthError> {
    let fa = Quad::frame(a.out_hw.1 as f64, a.out_hw.0 as f64);
    let fb = Quad::frame(b.out_hw.1 as f64, b.out_hw.0 as f64);
    // frame -> base quad for each view; a-frame -> base -> b-frame
    let base_a = homography_from_quad(&fa, &a.quad)?;
    let base_b = homography_from_quad(&fb, &b.quad)?;
    Ok(base_b.inverse()?.compose(&base_a)?)
}

/// Ground-truth overlap of two views of one scene, as a quad on the base
/// texture: the intersection of their view trapezoids.
pub fn overlap_on_base(a: &ViewSpec, b: &ViewSpec) -> Result<Quad, SynthError> {
    Ok(intersect_trapezoids(&a.quad, &b.quad)?)
}

/// Projects a quad given on the base texture into a view's pixel frame.
pub fn base_quad_in_view(spec: &ViewSpec, on_base: &Quad) -> Result<Quad, SynthError> {
    let f = Quad::frame(spec.out_hw.1 as f64, spec.out_hw.0 as f64);
    let to_base = homography_from_quad(&f, &spec.quad)?;
    let pts = apply_homography(&to_base.inverse()?, &on_base.p)?;
    Ok(Quad::new(pts[0], pts[1], pts[2], pts[3]))
}

/// Camera role within a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Gallery,
    Query,
}

/// One rendered view with its recipe, world position, and role.
#[derive(Debug, Clone)]
pub struct RenderedView<S: Scalar> {
    pub id: String,
    pub scene: usize,
    pub role: Role,
    pub spec: ViewSpec,
    pub image: Tensor<S>,
    pub pos: Position,
}

/// A generated dataset: scenes plus all rendered views.
#[derive(Debug, Clone)]
pub struct SynthWorld<S: Scalar> {
    pub scenes: Vec<SynthScene>,
    pub views: Vec<RenderedView<S>>,
}

impl<S: Scalar> SynthWorld<S> {
    pub fn views_with_role(&self, role: Role) -> Vec<&RenderedView<S>> {
        self.views.iter().filter(|v| v.role == role).collect()
    }
}

/// World-generation knobs. `new` fills the desk-scale defaults.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub n_scenes: usize,
    /// Views per scene: one gallery view plus `views_per_scene - 1` queries.
    pub views_per_scene: usize,
    /// Grid spacing between scene anchors, meters.
    pub spacing_m: f64,
    pub seed: u64,
    /// Rendered view size (height, width).
    pub view_hw: (usize, usize),
    /// Range of the view-crop aggressiveness parameter.
    pub k_view: (f64, f64),
    pub photometric_jitter: bool,
    pub occluders: bool,
}

impl WorldConfig {
    pub fn new(n_scenes: usize, views_per_scene: usize, spacing_m: f64, seed: u64) -> Self {
        Self {
            n_scenes,
            views_per_scene,
            spacing_m,
            seed,
            view_hw: (128, 128),
            k_view: (0.25, 0.55),
            photometric_jitter: true,
            occluders: true,
        }
    }
}

/// Samples a view trapezoid strictly inside the base texture: the crop is
/// drawn on an inset sub-frame and shifted back, so no corner touches the
/// border.
fn sample_view_quad(rng: &mut ChaCha8Rng, k: f64) -> Result<Quad, SynthError> {
    let margin = 4.0;
    let inner = BASE_TEXTURE_SIZE as f64 - 2.0 * margin;
    let q = sample_quad(rng, k, inner, inner)?;
    let p = q.p.map(|pt| Pt::new(pt.x + margin, pt.y + margin));
    Ok(Quad::new(p[0], p[1], p[2], p[3]))
}

fn sample_jitter(rng: &mut ChaCha8Rng) -> PhotometricJitter {
    PhotometricJitter {
        brightness: rng.gen_range(-0.08..0.08),
        contrast: rng.gen_range(0.9..1.1),
        color: [
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        ],
    }
}

/// Draws up to three random opaque rectangles, stopping before the union
/// would exceed the coverage budget.
fn sample_occluders(rng: &mut ChaCha8Rng, hw: (usize, usize)) -> Vec<Occluder> {
    let (h, w) = hw;
    let count = rng.gen_range(0..=3);
    let mut out: Vec<Occluder> = Vec::new();
    for _ in 0..count {
        let ow = rng.gen_range(w / 12..w / 4).max(1);
        let oh = rng.gen_range(h / 12..h / 4).max(1);
        let x = rng.gen_range(0..w - ow);
        let y = rng.gen_range(0..h - oh);
        let shade = rng.gen_range(0.05..0.35);
        let cand = Occluder {
            x,
            y,
            w: ow,
            h: oh,
            color: [shade, shade, shade * rng.gen_range(0.8..1.2)],
        };
        let mut trial = out.clone();
        trial.push(cand);
        if occluder_coverage(&trial, hw) <= OCCLUDER_BUDGET {
            out.push(cand);
        }
    }
    out
}

/// Generates a deterministic world: scenes on a square grid `spacing_m`
/// apart, each with one gallery view and `views_per_scene - 1` query views.
/// Every view gets an independent crop, jitter, occluders, and a position
/// within [`VIEW_POSITION_JITTER_M`] of its scene anchor.
pub fn gen_world<S: Scalar>(cfg: &WorldConfig) -> Result<SynthWorld<S>, SynthError> {
    if cfg.n_scenes < 2 {
        return Err(SynthError::TooFewScenes(cfg.n_scenes));
    }
    if cfg.views_per_scene < 2 {
        return Err(SynthError::TooFewViews(cfg.views_per_scene));
    }
    let side = (cfg.n_scenes as f64).sqrt().ceil() as usize;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut views = Vec::new();
    for id in 0..cfg.n_scenes {
        let texture_seed = master.gen::<u64>();
        let anchor_x = (id % side) as f64 * cfg.spacing_m;
        let anchor_y = (id / side) as f64 * cfg.spacing_m;
        let scene = SynthScene {
            id,
            texture_seed,
            pos: Position::Planar {
                x: anchor_x,
                y: anchor_y,
            },
        };
        let base: Tensor<S> = base_texture(texture_seed);
        let mut scene_rng = ChaCha8Rng::seed_from_u64(texture_seed ^ 0x9e37_79b9_7f4a_7c15);
        for v in 0..cfg.views_per_scene {
            let role = if v == 0 { Role::Gallery } else { Role::Query };
            let k = scene_rng.gen_range(cfg.k_view.0..cfg.k_view.1);
            let quad = sample_view_quad(&mut scene_rng, k)?;
            let jitter = if cfg.photometric_jitter {
                sample_jitter(&mut scene_rng)
            } else {
                PhotometricJitter::identity()
            };
            let occluders = if cfg.occluders {
                sample_occluders(&mut scene_rng, cfg.view_hw)
            } else {
                Vec::new()
            };
            let radius = scene_rng.gen_range(0.0..VIEW_POSITION_JITTER_M);
            let angle = scene_rng.gen_range(0.0..std::f64::consts::TAU);
            let spec = ViewSpec {
                scene: id,
                quad,
                jitter,
                occluders,
                out_hw: cfg.view_hw,
            };
            let image = render_view(&base, &spec)?;
            views.push(RenderedView {
                id: format!("scene{id:03}-view{v}"),
                scene: id,
                role,
                spec,
                image,
                pos: Position::Planar {
                    x: anchor_x + radius * angle.cos(),
                    y: anchor_y + radius * angle.sin(),
                },
            });
        }
        scenes.push(scene);
    }
    Ok(SynthWorld { scenes, views })
}
