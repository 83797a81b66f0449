//! Command-line orchestration: each subcommand wraps one pipeline stage.
//! Exit codes: 0 success, 1 usage error (synopsis on stderr), 2 runtime
//! error. Every command that draws random numbers takes a --seed flag, and
//! identical seeds reproduce output artifacts byte for byte.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use crate::encoder::TripletConfig;
use crate::io::{load_run_config, RunConfig};
use crate::pipeline::{
    manifest_counts, parse_thresholds, run_eval, run_gen_synth, run_index, run_mine_pairs,
    run_rank, run_train_encoder, run_train_warp, run_warp_viz, PipelineError, RankMode,
};
use crate::synthworld::WorldConfig;

#[derive(Parser)]
#[command(
    name = "warploc",
    about = "Visual geolocalization with learned pairwise warping",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliMode {
    Global,
    NoWarp,
    Warp,
}

impl From<CliMode> for RankMode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Global => RankMode::Global,
            CliMode::NoWarp => RankMode::NoWarp,
            CliMode::Warp => RankMode::Warp,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic train/test dataset with exact ground truth
    GenSynth {
        /// Output directory for images/ and manifest.jsonl
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        train_scenes: usize,
        #[arg(long, default_value_t = 4)]
        train_views: usize,
        #[arg(long, default_value_t = 50)]
        test_scenes: usize,
        #[arg(long, default_value_t = 4)]
        test_views: usize,
        /// Scene grid spacing, meters
        #[arg(long, default_value_t = 100.0)]
        spacing: f64,
        /// Rendered view side length, pixels
        #[arg(long, default_value_t = 128)]
        view_size: usize,
        /// Disable photometric jitter and occluders
        #[arg(long, default_value_t = false)]
        plain: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the global-descriptor encoder with triplets
    TrainEncoder {
        #[arg(long)]
        manifest: PathBuf,
        /// Output encoder checkpoint
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mine weak-supervision pairs from the train split
    MinePairs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// Output pair list (JSON-Lines)
        #[arg(long)]
        out: PathBuf,
        /// Geographic radius, meters
        #[arg(long, default_value_t = 25.0)]
        t_geo: f64,
        /// Squared descriptor-distance threshold
        #[arg(long, default_value_t = 1.2)]
        t_feat: f64,
    },
    /// Train the warp regressor against the frozen encoder
    TrainWarp {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Output regressor checkpoint
        #[arg(long)]
        out: PathBuf,
        /// Output loss-log CSV
        #[arg(long)]
        loss_csv: PathBuf,
        /// Optional key=value run-config file; flags below override it
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_ss: Option<usize>,
        #[arg(long)]
        batch_ws: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the global-descriptor index over the test gallery
    Index {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// Output index file (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank all test queries: global shortlist, then optional re-ranking
    Rank {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// Regressor checkpoint, required for --mode warp
        #[arg(long)]
        regressor: Option<PathBuf>,
        /// Shortlist length
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long, value_enum, default_value_t = CliMode::Warp)]
        mode: CliMode,
        /// Output ranking CSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate recall@N per mode at metric thresholds
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        regressor: PathBuf,
        /// Comma-separated thresholds in meters
        #[arg(long, default_value = "10,25,50")]
        thresholds: String,
        #[arg(long, default_value_t = 5)]
        top: usize,
        /// Output evaluation CSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the 2x2 warp diagnostic panel for an image pair
    WarpViz {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        regressor: PathBuf,
        /// Output PNG
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cmd: Cmd) -> Result<(), PipelineError> {
    match cmd {
        Cmd::GenSynth {
            out,
            train_scenes,
            train_views,
            test_scenes,
            test_views,
            spacing,
            view_size,
            plain,
            seed,
        } => {
            let mut train = WorldConfig::new(train_scenes, train_views, spacing, seed);
            // the test world draws from an independent seed stream
            let mut test =
                WorldConfig::new(test_scenes, test_views, spacing, seed ^ 0x7465_7374);
            for cfg in [&mut train, &mut test] {
                cfg.view_hw = (view_size, view_size);
                if plain {
                    cfg.photometric_jitter = false;
                    cfg.occluders = false;
                }
            }
            let (n_train, n_test) = run_gen_synth(&out, &train, &test)?;
            let counts = manifest_counts(&out.join("manifest.jsonl"))?;
            println!(
                "wrote {n_train} train and {n_test} test images to {}; \
                 splits: {} train_query, {} train_gallery, {} test_query, {} test_gallery",
                out.display(),
                counts[0],
                counts[1],
                counts[2],
                counts[3]
            );
            Ok(())
        }
        Cmd::TrainEncoder {
            manifest,
            out,
            iterations,
            batch,
            lr,
            seed,
        } => {
            let cfg = TripletConfig {
                iterations,
                batch_queries: batch,
                lr,
                seed,
                ..TripletConfig::default()
            };
            let stats = run_train_encoder(&manifest, &out, &cfg)?;
            let first = stats.loss_log.first().map(|(_, l)| *l).unwrap_or(0.0);
            let last = stats.loss_log.last().map(|(_, l)| *l).unwrap_or(0.0);
            println!(
                "trained encoder for {iterations} iterations (loss {first:.4} -> {last:.4}, \
                 {} queries skipped); checkpoint at {}",
                stats.skipped_queries,
                out.display()
            );
            Ok(())
        }
        Cmd::MinePairs {
            manifest,
            encoder,
            out,
            t_geo,
            t_feat,
        } => {
            let pairs = run_mine_pairs(&manifest, &encoder, &out, t_geo, t_feat)?;
            println!(
                "mined {} pairs (t_geo {t_geo} m, t_feat {t_feat}) into {}",
                pairs.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::TrainWarp {
            manifest,
            encoder,
            pairs,
            out,
            loss_csv,
            config,
            iterations,
            batch_ss,
            batch_ws,
            lr,
            k,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => load_run_config(&p)?,
                None => RunConfig::default(),
            };
            if let Some(v) = iterations {
                cfg.iterations = v;
            }
            if let Some(v) = batch_ss {
                cfg.batch_ss = v;
            }
            if let Some(v) = batch_ws {
                cfg.batch_ws = v;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = k {
                cfg.k = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            let rows = run_train_warp(&manifest, &encoder, &pairs, &cfg, &out, &loss_csv)?;
            let last = rows.last().map(|r| r.l_total).unwrap_or(0.0);
            println!(
                "trained warp regressor for {} iterations (final loss {last:.5}); \
                 checkpoint at {}, losses at {}",
                rows.len(),
                out.display(),
                loss_csv.display()
            );
            Ok(())
        }
        Cmd::Index {
            manifest,
            encoder,
            out,
        } => {
            let file = run_index(&manifest, &encoder, &out)?;
            println!(
                "indexed {} gallery images ({}-d descriptors) into {}",
                file.ids.len(),
                file.dim,
                out.display()
            );
            Ok(())
        }
        Cmd::Rank {
            manifest,
            index,
            encoder,
            regressor,
            top,
            mode,
            out,
        } => {
            run_rank(
                &manifest,
                &index,
                &encoder,
                regressor.as_deref(),
                top,
                mode.into(),
                &out,
            )?;
            println!(
                "ranked test queries (top {top}, mode {}) into {}",
                RankMode::from(mode).label(),
                out.display()
            );
            Ok(())
        }
        Cmd::Eval {
            manifest,
            index,
            encoder,
            regressor,
            thresholds,
            top,
            out,
        } => {
            let t = parse_thresholds(&thresholds)?;
            let rows = run_eval(&manifest, &index, &encoder, &regressor, &t, top, &out)?;
            println!("evaluation ({} rows) written to {}", rows.len(), out.display());
            for r in &rows {
                println!(
                    "  {:<8} @{:>3} m  recall@1 {:6.2}  recall@5 {:6.2}",
                    r.mode, r.threshold_m, r.recall_at_1, r.recall_at_5
                );
            }
            Ok(())
        }
        Cmd::WarpViz {
            query,
            pair,
            encoder,
            regressor,
            out,
        } => {
            run_warp_viz(&query, &pair, &encoder, &regressor, &out)?;
            println!("visualization written to {}", out.display());
            Ok(())
        }
    }
}

/// Entry point behind `main`: parses arguments and runs one stage.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            }
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
