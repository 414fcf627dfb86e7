//! Command-line front end for the correlation-verification pipeline.
//!
//! Every command is deterministic: identical inputs and seeds produce
//! byte-identical output files and stdout.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use corrver::encoder::{load_weights, save_weights};
use corrver::retrieval::{
    eval_map, global_rank, ingest, load_rankings, load_truth, rerank_topk, save_rankings,
    save_truth, FeatureStore,
};
use corrver::tensor::io::save_tensor;
use corrver::training::{generate_toy_dataset, train_rerank_toy, TrainSpec};

#[derive(Parser)]
#[command(name = "corrver", version, about = "Correlation-verification retrieval pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the verifier on the synthetic corpus; writes the weights file
    /// and prints the loss curve as CSV.
    TrainToy {
        /// `key = value` config text; defaults apply to omitted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the trained weights.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic corpus as a feature dump: maps, an ingest
    /// manifest, and a ground-truth CSV.
    GenToy {
        /// Same config format as train-toy; only generator keys matter.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build or extend a feature store from a manifest of feature maps.
    Ingest {
        /// Dump manifest: `channels/height/width` headers plus `<id> = <path>` lines.
        #[arg(long)]
        manifest: PathBuf,
        /// Store directory to create or extend.
        #[arg(long)]
        out: PathBuf,
        /// Weights file whose reducers compress the pyramids.
        #[arg(long)]
        weights: PathBuf,
        /// Keep reduced levels as floats instead of 8-bit codes.
        #[arg(long)]
        float: bool,
    },
    /// Rank the whole store against a query by global-descriptor cosine.
    Rank {
        /// Query id; must be ingested.
        #[arg(long)]
        query: u64,
        /// Store directory.
        #[arg(long)]
        store: PathBuf,
        /// Keep only the best N rows.
        #[arg(long)]
        top: Option<usize>,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-rank the global top k with the correlation verifier.
    Rerank {
        /// Query id; must be ingested.
        #[arg(long)]
        query: u64,
        /// Store directory.
        #[arg(long)]
        store: PathBuf,
        /// Weights file; must match the reducers used at ingest.
        #[arg(long)]
        weights: PathBuf,
        /// Prefix length to verify (clamped to the store size).
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// Fusion weight in `s_g + alpha * s_r`.
        #[arg(long, default_value_t = 0.5)]
        alpha: f32,
        /// Keep only the best N rows.
        #[arg(long)]
        top: Option<usize>,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rankings against ground truth with mean average precision.
    Eval {
        /// Rankings CSV; may hold several `# query = <id>` blocks.
        #[arg(long)]
        ranks: PathBuf,
        /// Ground truth CSV of `query_id,relevant_id` rows.
        #[arg(long)]
        truth: PathBuf,
        /// Evaluate only the best N rows per query (mAP@N).
        #[arg(long)]
        cutoff: Option<usize>,
    },
}

fn load_spec(config: &Option<PathBuf>) -> anyhow::Result<TrainSpec> {
    match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            Ok(TrainSpec::parse(&text)?)
        }
        None => Ok(TrainSpec::default()),
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::TrainToy { config, out } => {
            let spec = load_spec(&config)?;
            let dataset = generate_toy_dataset(&spec.gen)?;
            let (weights, curve) =
                train_rerank_toy(&dataset, &spec.encoder, &spec.train, &spec.schedule)?;
            save_weights(&out, &weights)?;
            println!("step,loss,lr,r_h,p_has");
            for r in &curve {
                println!("{},{:.6},{:.6},{:.6},{:.6}", r.step, r.loss, r.lr, r.r_h, r.p_has);
            }
        }
        Cmd::GenToy { config, out } => {
            let spec = load_spec(&config)?;
            let dataset = generate_toy_dataset(&spec.gen)?;
            fs::create_dir_all(out.join("maps"))?;
            let mut manifest = format!(
                "channels = {}\nheight = {}\nwidth = {}\n",
                spec.gen.channels, spec.gen.height, spec.gen.width
            );
            for s in &dataset.samples {
                let rel = format!("maps/{}.cvt", s.id);
                save_tensor(&out.join(&rel), s.map.data())?;
                manifest.push_str(&format!("{} = {}\n", s.id, rel));
            }
            fs::write(out.join("manifest.txt"), manifest)?;
            let mut truth: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
            for a in &dataset.samples {
                for b in &dataset.samples {
                    if a.label == b.label {
                        truth.entry(a.id).or_default().insert(b.id);
                    }
                }
            }
            save_truth(&out.join("truth.csv"), &truth)?;
            println!("wrote {} maps to {}", dataset.samples.len(), out.display());
        }
        Cmd::Ingest { manifest, out, weights, float } => {
            let w = load_weights(&weights)?;
            let mut store = if out.join("manifest.txt").exists() {
                FeatureStore::load(&out)?
            } else {
                FeatureStore::new()
            };
            ingest(&manifest, &w.reducers, !float, &mut store)?;
            store.save(&out)?;
            println!("store holds {} entries", store.len());
        }
        Cmd::Rank { query, store, top, out } => {
            let store = FeatureStore::load(&store)?;
            let mut rl = global_rank(query, &store)?;
            if let Some(n) = top {
                rl.entries.truncate(n);
            }
            save_rankings(&out, &[rl])?;
            println!("wrote {}", out.display());
        }
        Cmd::Rerank { query, store, weights, k, alpha, top, out } => {
            let store = FeatureStore::load(&store)?;
            let w = load_weights(&weights)?;
            let rl = global_rank(query, &store)?;
            let k = k.min(rl.entries.len());
            let mut rl = rerank_topk(query, &rl, k, &w, alpha, &store)?;
            if let Some(n) = top {
                rl.entries.truncate(n);
            }
            save_rankings(&out, &[rl])?;
            println!("wrote {}", out.display());
        }
        Cmd::Eval { ranks, truth, cutoff } => {
            let rankings = load_rankings(&ranks)?;
            let truth = load_truth(&truth)?;
            let map = eval_map(&rankings, &truth, cutoff)?;
            println!("mAP = {map:.6}");
        }
    }
    Ok(())
}
