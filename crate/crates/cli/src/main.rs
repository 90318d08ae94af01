use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use svll_reid::config::RunConfig;
use svll_reid::data::{generate_synthetic, Dataset, Split};
use svll_reid::eval::{pca_project_2d, scatter_csv, separation_ratio};
use svll_reid::train::{
    adopt_config, check_resume, embed_split, evaluate_model, load_dataset, run_stage1, run_stage2, Checkpoint,
    MetricsLog, Stage,
};

/// Two-stage vision-language ReID experiments on synthetic or Market-style data.
#[derive(Parser)]
#[command(name = "svll", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration and its digest.
    ShowConfig(ConfigArgs),
    /// Render the synthetic dataset to PNG files plus manifest.json.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage, writing a checkpoint and metrics log to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Continue from a checkpoint of the same stage and config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stage-1 checkpoint for stage 2 (default: <output>/stage1.ckpt).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Stop once this many epochs of the stage are complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate query-vs-gallery retrieval and write an EvalReport JSON.
    Eval {
        #[command(flatten)]
        source: CheckpointArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write image embeddings of one split as CSV.
    Embed {
        #[command(flatten)]
        source: CheckpointArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Query)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a 2-D PCA scatter (x,y,id,stage) of text features or image embeddings.
    Project {
        #[command(flatten)]
        source: CheckpointArgs,
        #[arg(long, value_enum)]
        space: Space,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. --set stage1.lambda_lss=0 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to use instead of the checkpoint config's source.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Query,
    Gallery,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Query => Split::Query,
            SplitArg::Gallery => Split::Gallery,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Text,
    Image,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        let cfg = base.with_overrides(&self.overrides)?;
        echo(&cfg);
        Ok(cfg)
    }
}

fn echo(cfg: &RunConfig) {
    eprintln!("config {}", cfg.canonical_json());
    eprintln!("config digest {}", cfg.digest_hex());
}

impl CheckpointArgs {
    fn load(&self) -> Result<(Checkpoint, Dataset)> {
        let ck = Checkpoint::load(&self.checkpoint).with_context(|| format!("loading {}", self.checkpoint.display()))?;
        echo(&ck.config);
        let image = &ck.config.model.image;
        let data = match &self.data {
            Some(dir) => Dataset::open(dir, image.height, image.width)?,
            None => load_dataset(&ck.config)?,
        };
        if data.images.first().is_some_and(|i| i.height() != image.height || i.width() != image.width) {
            bail!("dataset images do not match the checkpoint's {}x{} input", image.height, image.width);
        }
        Ok((ck, data))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let Some(spec) = cfg.synthetic_spec() else { bail!("gen-data needs a synthetic dataset source") };
    let data = generate_synthetic(&spec)?;
    data.export(out).with_context(|| format!("writing dataset to {}", out.display()))?;
    let counts = data.manifest.counts();
    println!(
        "identities {} train {} query {} gallery {} occluded {}",
        data.manifest.identities,
        counts[&Split::Train],
        counts[&Split::Query],
        counts[&Split::Gallery],
        data.occluded.iter().filter(|&&o| o).count()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, stage: u8, resume: Option<&Path>, from: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let out = &cfg.output;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ck_path = out.join(format!("stage{stage}.ckpt"));
    let log_path = out.join(format!("stage{stage}.metrics.tsv"));
    let wanted = if stage == 1 { Stage::One } else { Stage::Two };

    let (mut ck, mut log) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            check_resume(&ck, cfg)?;
            if ck.state.stage != wanted {
                bail!("{} is a {:?} checkpoint, not stage {stage}", path.display(), ck.state.stage);
            }
            let log = match fs::read_to_string(&log_path) {
                Ok(text) => MetricsLog::resume(text),
                Err(_) => MetricsLog::new(cfg, wanted),
            };
            (ck, log)
        }
        None if stage == 1 => {
            let data_ids = load_dataset(cfg)?.manifest.identities;
            (Checkpoint::new(cfg.clone(), data_ids)?, MetricsLog::new(cfg, wanted))
        }
        None => {
            let src = from.map(Path::to_path_buf).unwrap_or_else(|| out.join("stage1.ckpt"));
            if !src.exists() {
                bail!("stage 2 needs a stage-1 checkpoint; {} not found", src.display());
            }
            let mut ck = Checkpoint::load(&src).with_context(|| format!("loading {}", src.display()))?;
            adopt_config(&mut ck, cfg)?;
            (ck, MetricsLog::new(cfg, wanted))
        }
    };
    let data = load_dataset(cfg)?;
    let total = if stage == 1 { cfg.stage1.epochs } else { cfg.stage2.epochs };
    let limit = stop_after.map_or(total, |s| s.min(total));
    loop {
        let done = if ck.state.stage == wanted { ck.state.epoch } else { 0 };
        let report = if stage == 1 {
            run_stage1(&mut ck, &data, &mut log, Some((done + 1).min(limit)))?
        } else {
            run_stage2(&mut ck, &data, &mut log, Some((done + 1).min(limit)))?
        };
        ck.save(&ck_path)?;
        write_file(&log_path, log.as_str())?;
        if ck.state.epoch >= limit {
            log::info!("frozen digests unchanged: {:?}", report.exit);
            break;
        }
    }
    println!("stage {stage}: {} of {total} epochs, checkpoint {}", ck.state.epoch, ck_path.display());
    Ok(())
}

fn cmd_eval(source: &CheckpointArgs, out: Option<&Path>) -> Result<()> {
    let (ck, data) = source.load()?;
    let report = evaluate_model(&ck.model, &data, ck.config.eval.chunk)?;
    println!(
        "mAP {:.4} rank1 {:.4} rank5 {:.4} rank10 {:.4} queries {} skipped {}",
        report.map, report.rank1, report.rank5, report.rank10, report.valid_queries, report.skipped_queries
    );
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| ck.config.output.join("eval.json"));
    write_file(&path, &(report.to_json()? + "\n"))
}

fn cmd_embed(source: &CheckpointArgs, split: Split, out: &Path) -> Result<()> {
    let (ck, data) = source.load()?;
    let (emb, _) = embed_split(&ck.model, &data, split, ck.config.eval.chunk)?;
    let mut csv = String::from("file,id,cam,split");
    for k in 0..emb.cols() {
        csv.push_str(&format!(",e{k}"));
    }
    csv.push('\n');
    for (row, (_, s)) in data.manifest.split(split).enumerate() {
        csv.push_str(&format!("{},{},{},{:?}", s.file, s.id, s.cam, s.split).to_lowercase());
        for v in emb.row(row) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write_file(out, &csv)?;
    println!("{} embeddings of dimension {} written to {}", emb.rows(), emb.cols(), out.display());
    Ok(())
}

fn cmd_project(source: &CheckpointArgs, space: Space, out: &Path) -> Result<()> {
    let (ck, data) = source.load()?;
    let stage = format!("stage{}", ck.state.stage as u8);
    let (points, ids) = match space {
        Space::Text => {
            let feats = match &ck.model.id_text {
                Some(t) => t.clone(),
                None => ck.model.compute_id_text_features()?,
            };
            let ids: Vec<i64> = (0..feats.rows() as i64).collect();
            (pca_project_2d(&feats.cast())?.points, ids)
        }
        Space::Image => {
            let (q, ql) = embed_split(&ck.model, &data, Split::Query, ck.config.eval.chunk)?;
            let (g, gl) = embed_split(&ck.model, &data, Split::Gallery, ck.config.eval.chunk)?;
            let mut rows = q.into_data();
            rows.extend(g.into_data());
            let n = ql.len() + gl.len();
            let all = svll_reid::tensor::Tensor::new(vec![n, ck.config.model.image.embed_dim], rows)?;
            let ids: Vec<i64> = ql.ids.iter().chain(&gl.ids).copied().collect();
            (pca_project_2d(&all)?.points, ids)
        }
    };
    write_file(out, &scatter_csv(&points, &ids, &stage))?;
    match separation_ratio(&points, &ids) {
        Ok(r) => println!("{} points written to {}, separation ratio {r:.4}", points.len(), out.display()),
        Err(_) => println!("{} points written to {}", points.len(), out.display()),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SVLL_LOG", "info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::ShowConfig(args) => {
            let cfg = args.resolve()?;
            println!("{}", cfg.to_pretty_json());
            Ok(())
        }
        Command::GenData { config, out } => cmd_gen_data(&config.resolve()?, out),
        Command::Train { config, stage, resume, from, stop_after } => {
            cmd_train(&config.resolve()?, *stage, resume.as_deref(), from.as_deref(), *stop_after)
        }
        Command::Eval { source, out } => cmd_eval(source, out.as_deref()),
        Command::Embed { source, split, out } => cmd_embed(source, (*split).into(), out),
        Command::Project { source, space, out } => cmd_project(source, *space, out),
    }
}
