//! End-to-end pipeline stages, shared by the command-line tool and the
//! integration suites: dataset synthesis, encoder training, pair mining,
//! warp training, gallery indexing, ranking, and evaluation. Every stage
//! reads and writes the artifact formats of the io module, so a run is a
//! chain of files and each stage is independently rerunnable.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::encoder::{train_encoder_triplet, EncoderError, EncoderModel, TripletConfig, TripletStats};
use crate::io::{
    atomic_write, load_checkpoint, load_manifest, read_manifest_records, save_checkpoint,
    write_manifest_records, write_png, CheckpointMeta, IoError, ManifestRecord, RunConfig, Split,
};
use crate::regressor::{predict_points, RegressorError, RegressorModel, WarpPrediction};
use crate::retrieval::{
    build_index, knn_search, rerank_shortlist, GalleryIndex, GeoImage, Position, RankedResult,
    RerankMode, RetrievalError,
};
use crate::synthworld::{gen_world, Role, SynthError, WorldConfig};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::training::{
    loss_log_csv, mine_pairs, train_warp, LossRow, MinedPair, TrainingError,
};

pub const MODEL_KIND_ENCODER: &str = "encoder";
pub const MODEL_KIND_REGRESSOR: &str = "warp-regressor";
/// Planar y offset separating the test world from the train world, meters.
pub const TEST_WORLD_OFFSET_M: f64 = 100_000.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("checkpoint at {path} holds a `{got}` model, expected `{want}`")]
    WrongModelKind {
        path: PathBuf,
        want: &'static str,
        got: String,
    },
    #[error("index and manifest disagree: {0}")]
    IndexMismatch(String),
    #[error("--mode warp needs a regressor checkpoint")]
    MissingRegressor,
    #[error("no thresholds given")]
    NoThresholds,
    #[error("--top {top} is too short for recall@{need}; raise it to at least {need}")]
    ShortTop { top: usize, need: usize },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------- gen-synth

/// Renders a train world and a test world into `dir/images/*.png` plus a
/// single JSON-Lines manifest. The test world is shifted far from the train
/// world so the two never interact geographically. Returns (train, test)
/// image counts.
pub fn run_gen_synth(
    dir: &Path,
    train: &WorldConfig,
    test: &WorldConfig,
) -> Result<(usize, usize), PipelineError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(IoError::from)?;
    let mut records = Vec::new();

    let mut emit = |cfg: &WorldConfig, prefix: &str, y_off: f64| -> Result<usize, PipelineError> {
        let world = gen_world::<f32>(cfg)?;
        let n = world.views.len();
        for v in &world.views {
            let file = format!("images/{prefix}-{}.png", v.id);
            write_png(&v.image, &dir.join(&file))?;
            let (x, y) = match v.pos {
                Position::Planar { x, y } => (x, y),
                Position::Geographic { .. } => unreachable!("worlds are planar"),
            };
            let split = match (prefix, v.role) {
                ("train", Role::Query) => Split::TrainQuery,
                ("train", Role::Gallery) => Split::TrainGallery,
                (_, Role::Query) => Split::TestQuery,
                (_, Role::Gallery) => Split::TestGallery,
            };
            records.push(ManifestRecord {
                path: file,
                x_m: Some(x),
                y_m: Some(y + y_off),
                lat: None,
                lon: None,
                split,
            });
        }
        Ok(n)
    };

    let n_train = emit(train, "train", 0.0)?;
    let n_test = emit(test, "test", TEST_WORLD_OFFSET_M)?;
    write_manifest_records(&dir.join("manifest.jsonl"), &records)?;
    Ok((n_train, n_test))
}

// ------------------------------------------------------------- checkpoints

fn triplet_config_hash(cfg: &TripletConfig) -> String {
    use sha2::Digest;
    let mut h = sha2::Sha256::new();
    h.update(format!("{cfg:?}").as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads an encoder checkpoint; the result is frozen, ready to serve as the
/// fixed feature extractor for every downstream stage.
pub fn load_encoder(path: &Path) -> Result<EncoderModel<f32>, PipelineError> {
    let (params, meta) = load_checkpoint::<f32>(path)?;
    if meta.model_kind != MODEL_KIND_ENCODER {
        return Err(PipelineError::WrongModelKind {
            path: path.to_path_buf(),
            want: MODEL_KIND_ENCODER,
            got: meta.model_kind,
        });
    }
    Ok(EncoderModel::from_params(params, true)?)
}

pub fn load_regressor(path: &Path) -> Result<RegressorModel<f32>, PipelineError> {
    let (params, meta) = load_checkpoint::<f32>(path)?;
    if meta.model_kind != MODEL_KIND_REGRESSOR {
        return Err(PipelineError::WrongModelKind {
            path: path.to_path_buf(),
            want: MODEL_KIND_REGRESSOR,
            got: meta.model_kind,
        });
    }
    Ok(RegressorModel::from_params(params)?)
}

// ------------------------------------------------------------ train-encoder

/// Trains the global-descriptor encoder on the manifest's train splits and
/// checkpoints the result.
pub fn run_train_encoder(
    manifest: &Path,
    out_ckpt: &Path,
    cfg: &TripletConfig,
) -> Result<TripletStats, PipelineError> {
    let ds = load_manifest::<f32>(manifest)?;
    let mut model = EncoderModel::<f32>::init(cfg.seed);
    let stats = train_encoder_triplet(&mut model, &ds.train_queries, &ds.train_gallery, cfg)?;
    save_checkpoint(
        model.params(),
        &CheckpointMeta {
            model_kind: MODEL_KIND_ENCODER.into(),
            config_hash: triplet_config_hash(cfg),
        },
        out_ckpt,
    )?;
    Ok(stats)
}

// -------------------------------------------------------------- mine-pairs

/// Mines weak-supervision pairs from the train splits and writes them as
/// JSON-Lines.
pub fn run_mine_pairs(
    manifest: &Path,
    encoder_ckpt: &Path,
    out_pairs: &Path,
    t_geo_m: f64,
    t_feat: f64,
) -> Result<Vec<MinedPair>, PipelineError> {
    let ds = load_manifest::<f32>(manifest)?;
    let encoder = load_encoder(encoder_ckpt)?;
    let pairs = mine_pairs(&ds.train_queries, &ds.train_gallery, &encoder, t_geo_m, t_feat)?;
    let mut buf = String::new();
    for p in &pairs {
        buf.push_str(&serde_json::to_string(p).expect("mined pair serializes"));
        buf.push('\n');
    }
    atomic_write(out_pairs, buf.as_bytes())?;
    Ok(pairs)
}

pub fn read_mined_pairs(path: &Path) -> Result<Vec<MinedPair>, PipelineError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()).into());
    }
    let text = fs::read_to_string(path).map_err(IoError::from)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let p: MinedPair = serde_json::from_str(raw).map_err(|e| IoError::ParseError {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

// -------------------------------------------------------------- train-warp

/// Trains the warp regressor against the frozen encoder and writes the
/// checkpoint plus the loss-log CSV.
pub fn run_train_warp(
    manifest: &Path,
    encoder_ckpt: &Path,
    pairs_path: &Path,
    cfg: &RunConfig,
    out_ckpt: &Path,
    out_csv: &Path,
) -> Result<Vec<LossRow>, PipelineError> {
    let ds = load_manifest::<f32>(manifest)?;
    let encoder = load_encoder(encoder_ckpt)?;
    let mined = read_mined_pairs(pairs_path)?;
    let corpus: Vec<Tensor<f32>> = ds
        .train_gallery
        .iter()
        .chain(&ds.train_queries)
        .map(|g| g.image.clone())
        .collect();
    let mut model = RegressorModel::<f32>::init(cfg.seed);
    let rows = train_warp(
        &mut model,
        &encoder,
        &corpus,
        &ds.train_queries,
        &ds.train_gallery,
        &mined,
        &cfg.to_train_config(),
    )?;
    save_checkpoint(
        model.params(),
        &CheckpointMeta {
            model_kind: MODEL_KIND_REGRESSOR.into(),
            config_hash: cfg.hash(),
        },
        out_ckpt,
    )?;
    atomic_write(out_csv, loss_log_csv(&rows).as_bytes())?;
    Ok(rows)
}

// ------------------------------------------------------------------- index

/// Serialized gallery index: descriptors plus identity and position columns.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IndexFile {
    pub dim: usize,
    pub ids: Vec<String>,
    pub positions: Vec<Position>,
    pub descriptors: Vec<Vec<f64>>,
}

/// Builds the global-descriptor index over the manifest's test gallery and
/// writes it as JSON.
pub fn run_index(
    manifest: &Path,
    encoder_ckpt: &Path,
    out_index: &Path,
) -> Result<IndexFile, PipelineError> {
    let ds = load_manifest::<f32>(manifest)?;
    let encoder = load_encoder(encoder_ckpt)?;
    let index = build_index(&ds.test_gallery, &encoder)?;
    let file = IndexFile {
        dim: index.dim(),
        ids: index.ids().to_vec(),
        positions: index.positions().to_vec(),
        descriptors: (0..index.len())
            .map(|i| index.row(i).iter().map(|v| *v as f64).collect())
            .collect(),
    };
    let json = serde_json::to_string(&file).expect("index serializes");
    atomic_write(out_index, json.as_bytes())?;
    Ok(file)
}

pub fn read_index(path: &Path) -> Result<GalleryIndex<f32>, PipelineError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()).into());
    }
    let text = fs::read_to_string(path).map_err(IoError::from)?;
    let file: IndexFile = serde_json::from_str(&text).map_err(|e| IoError::ParseError {
        line: 1,
        msg: format!("index json: {e}"),
    })?;
    let rows: Vec<Vec<f32>> = file
        .descriptors
        .iter()
        .map(|r| r.iter().map(|v| *v as f32).collect())
        .collect();
    Ok(GalleryIndex::from_rows(rows, file.ids, file.positions)?)
}

// -------------------------------------------------------------------- rank

/// Retrieval mode for ranking and evaluation: the raw global shortlist, or
/// dense re-ranking without or with the learned warp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMode {
    Global,
    NoWarp,
    Warp,
}

impl RankMode {
    pub fn label(self) -> &'static str {
        match self {
            RankMode::Global => "global",
            RankMode::NoWarp => "no-warp",
            RankMode::Warp => "warp",
        }
    }
}

/// Ranks every test query against the index: global shortlist of `top`,
/// then optional dense re-ranking. Returns (query id, ranked results) in
/// manifest order.
pub fn rank_queries(
    queries: &[GeoImage<f32>],
    gallery: &[GeoImage<f32>],
    index: &GalleryIndex<f32>,
    encoder: &EncoderModel<f32>,
    regressor: Option<&RegressorModel<f32>>,
    top: usize,
    mode: RankMode,
) -> Result<Vec<(String, Vec<RankedResult>)>, PipelineError> {
    if index.len() != gallery.len() {
        return Err(PipelineError::IndexMismatch(format!(
            "index has {} entries, manifest test gallery has {}",
            index.len(),
            gallery.len()
        )));
    }
    for (i, g) in gallery.iter().enumerate() {
        if index.ids()[i] != g.id {
            return Err(PipelineError::IndexMismatch(format!(
                "entry {i}: index id `{}` vs manifest id `{}`",
                index.ids()[i],
                g.id
            )));
        }
    }
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let desc = encoder.image_descriptor(&q.image)?;
        let shortlist = knn_search(index, desc.data(), top)?;
        let ranked = match mode {
            RankMode::Global => shortlist,
            RankMode::NoWarp => {
                rerank_shortlist(q, &shortlist, gallery, encoder, unused_regressor(), RerankMode::NoWarp)?
            }
            RankMode::Warp => {
                let model = regressor.ok_or(PipelineError::MissingRegressor)?;
                rerank_shortlist(q, &shortlist, gallery, encoder, model, RerankMode::Warp)?
            }
        };
        out.push((q.id.clone(), ranked));
    }
    Ok(out)
}

/// NoWarp re-ranking never consults the regressor; a fixed placeholder
/// keeps the call signature uniform.
fn unused_regressor() -> &'static RegressorModel<f32> {
    use std::sync::OnceLock;
    static MODEL: OnceLock<RegressorModel<f32>> = OnceLock::new();
    MODEL.get_or_init(|| RegressorModel::init(0))
}

/// CSV rendering of ranking output: one row per (query, shortlist entry).
pub fn ranking_csv(rankings: &[(String, Vec<RankedResult>)], gallery_ids: &[String]) -> String {
    let mut out = String::from("query_id,rank,gallery_id,global_sim,dense_score\n");
    for (qid, results) in rankings {
        for r in results {
            let dense = r
                .dense_score
                .map(|d| d.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{qid},{},{},{},{dense}\n",
                r.rank, gallery_ids[r.gallery_index], r.global_sim
            ));
        }
    }
    out
}

/// Full rank stage: loads artifacts, ranks all test queries, writes CSV.
pub fn run_rank(
    manifest: &Path,
    index_path: &Path,
    encoder_ckpt: &Path,
    regressor_ckpt: Option<&Path>,
    top: usize,
    mode: RankMode,
    out_csv: &Path,
) -> Result<(), PipelineError> {
    let ds = load_manifest::<f32>(manifest)?;
    let index = read_index(index_path)?;
    let encoder = load_encoder(encoder_ckpt)?;
    let regressor = match regressor_ckpt {
        Some(p) => Some(load_regressor(p)?),
        None => None,
    };
    if mode == RankMode::Warp && regressor.is_none() {
        return Err(PipelineError::MissingRegressor);
    }
    let rankings = rank_queries(
        &ds.test_queries,
        &ds.test_gallery,
        &index,
        &encoder,
        regressor.as_ref(),
        top,
        mode,
    )?;
    let ids: Vec<String> = index.ids().to_vec();
    atomic_write(out_csv, ranking_csv(&rankings, &ids).as_bytes())?;
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub mode: &'static str,
    pub threshold_m: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("mode,threshold_m,recall_at_1,recall_at_5\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.mode, r.threshold_m, r.recall_at_1, r.recall_at_5
        ));
    }
    out
}

/// Evaluates recall@1 and recall@5 for each mode at each threshold over the
/// manifest's test split.
pub fn evaluate(
    queries: &[GeoImage<f32>],
    gallery: &[GeoImage<f32>],
    index: &GalleryIndex<f32>,
    encoder: &EncoderModel<f32>,
    regressor: &RegressorModel<f32>,
    thresholds: &[f64],
    top: usize,
    modes: &[RankMode],
) -> Result<Vec<EvalRow>, PipelineError> {
    if thresholds.is_empty() {
        return Err(PipelineError::NoThresholds);
    }
    // recall@5 degrades to recall@|gallery| when the gallery is smaller
    let r5 = 5.min(gallery.len()).max(1);
    if top < r5 {
        return Err(PipelineError::ShortTop { top, need: r5 });
    }
    let query_pos: Vec<Position> = queries.iter().map(|q| q.pos.clone()).collect();
    let gallery_pos: Vec<Position> = index.positions().to_vec();
    let mut rows = Vec::new();
    for mode in modes {
        let rankings = rank_queries(queries, gallery, index, encoder, Some(regressor), top, *mode)?;
        let results: Vec<Vec<RankedResult>> = rankings.into_iter().map(|(_, r)| r).collect();
        for &t in thresholds {
            rows.push(EvalRow {
                mode: mode.label(),
                threshold_m: t,
                recall_at_1: crate::retrieval::recall_at_n(&results, &query_pos, &gallery_pos, 1, t)?,
                recall_at_5: crate::retrieval::recall_at_n(&results, &query_pos, &gallery_pos, r5, t)?,
            });
        }
    }
    Ok(rows)
}

/// Full eval stage: loads artifacts, evaluates all three modes, writes CSV.
pub fn run_eval(
    manifest: &Path,
    index_path: &Path,
    encoder_ckpt: &Path,
    regressor_ckpt: &Path,
    thresholds: &[f64],
    top: usize,
    out_csv: &Path,
) -> Result<Vec<EvalRow>, PipelineError> {
    let ds = load_manifest::<f32>(manifest)?;
    let index = read_index(index_path)?;
    let encoder = load_encoder(encoder_ckpt)?;
    let regressor = load_regressor(regressor_ckpt)?;
    let rows = evaluate(
        &ds.test_queries,
        &ds.test_gallery,
        &index,
        &encoder,
        &regressor,
        thresholds,
        top,
        &[RankMode::Global, RankMode::NoWarp, RankMode::Warp],
    )?;
    atomic_write(out_csv, eval_csv(&rows).as_bytes())?;
    Ok(rows)
}

// ---------------------------------------------------------------- warp-viz

/// Predicts the warp quads for an image pair with the trained models.
pub fn predict_warp(
    encoder: &EncoderModel<f32>,
    model: &RegressorModel<f32>,
    i_q: &Tensor<f32>,
    i_p: &Tensor<f32>,
) -> Result<WarpPrediction, PipelineError> {
    let mut g: Graph<f32> = Graph::new();
    let qv = g.leaf(i_q.clone());
    let pv = g.leaf(i_p.clone());
    let pts = predict_points(&mut g, encoder, model, qv, pv, false)?;
    let vals = g.value(pts).data();
    let mut t_q = [0.0f64; 8];
    let mut t_p = [0.0f64; 8];
    for i in 0..8 {
        t_q[i] = vals[i] as f64;
        t_p[i] = vals[8 + i] as f64;
    }
    Ok(WarpPrediction {
        t_q: crate::geometry::NormalizedQuad(t_q),
        t_p: crate::geometry::NormalizedQuad(t_p),
    })
}

/// Full warp-viz stage: loads the pair and the models, emits the panel PNG.
pub fn run_warp_viz(
    query_png: &Path,
    pair_png: &Path,
    encoder_ckpt: &Path,
    regressor_ckpt: &Path,
    out_png: &Path,
) -> Result<(), PipelineError> {
    let i_q = crate::io::read_png::<f32>(query_png)?;
    let i_p = crate::io::read_png::<f32>(pair_png)?;
    let encoder = load_encoder(encoder_ckpt)?;
    let model = load_regressor(regressor_ckpt)?;
    let pred = predict_warp(&encoder, &model, &i_q, &i_p)?;
    crate::io::emit_warp_visualization(&i_q, &i_p, &pred, out_png)?;
    Ok(())
}

// ----------------------------------------------------------- shared helpers

/// Splits a `10,25,50`-style flag into numeric thresholds.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>, PipelineError> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let t: f64 = part
            .trim()
            .parse()
            .map_err(|e| IoError::ParseError {
                line: 1,
                msg: format!("threshold `{part}`: {e}"),
            })?;
        if !t.is_finite() || t <= 0.0 {
            return Err(IoError::ParseError {
                line: 1,
                msg: format!("threshold `{part}` must be positive"),
            }
            .into());
        }
        out.push(t);
    }
    if out.is_empty() {
        return Err(PipelineError::NoThresholds);
    }
    Ok(out)
}

/// Convenience: counts manifest records per split without loading images.
pub fn manifest_counts(path: &Path) -> Result<[usize; 4], PipelineError> {
    let records = read_manifest_records(path)?;
    let mut counts = [0usize; 4];
    for r in &records {
        let i = match r.split {
            Split::TrainQuery => 0,
            Split::TrainGallery => 1,
            Split::TestQuery => 2,
            Split::TestGallery => 3,
        };
        counts[i] += 1;
    }
    Ok(counts)
}
