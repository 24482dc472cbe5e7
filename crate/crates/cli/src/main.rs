use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use lingsplat::ablation::{self, PlantedSpec};
use lingsplat::eval::{self, MetricReport};
use lingsplat::io::{self, Dataset, LocalizationRecord, Manifest, RunLog};
use lingsplat::localization::{self, QueryEmbedding, RefineConfig, Semantics, Views};
use lingsplat::quantizer::{self, QuantizerConfig};
use lingsplat::raster::{self, Channels, RenderConfig};
use lingsplat::scene::{Camera, GaussianScene};
use lingsplat::semantics::{self, Decoder, Mlp};
use lingsplat::synthetic::{self, SyntheticSpec};
use lingsplat::training::{self, EditConfig, EditMode, TrainConfig};

#[derive(Parser)]
#[command(name = "lingsplat", version, about = "Language-embedded dynamic Gaussian splatting")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "LINGSPLAT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    GenSynthetic(GenArgs),
    /// Learn a codebook over the manifest's feature stack and write index maps.
    Quantize(QuantizeArgs),
    /// Jointly optimize a scene and decoder against a manifest.
    Train(TrainArgs),
    /// Select the Gaussians relevant to a query.
    Localize(LocalizeArgs),
    /// Render a scene along a camera path.
    Render(RenderArgs),
    /// Optimize localized Gaussians towards an edited reference video.
    Edit(EditArgs),
    /// Compute PSNR, mIoU or feature directional similarity.
    Eval(EvalArgs),
    /// Run the refinement ablation on a planted-error fixture.
    Ablation(AblationArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    clusters: usize,
    #[arg(long, default_value_t = 50)]
    gaussians_per_cluster: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Image width and height.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Per-Gaussian feature dimension.
    #[arg(long, default_value_t = 8)]
    df: usize,
    /// Motion bases.
    #[arg(long, default_value_t = 10)]
    bases: usize,
    /// Side of the static backdrop grid (0 disables it).
    #[arg(long, default_value_t = 12)]
    static_grid: usize,
    /// Dimension of the query embedding space.
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    /// Angular noise on pixel embeddings, in degrees.
    #[arg(long, default_value_t = 5.0)]
    noise_deg: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct QuantizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Codebook entries.
    #[arg(long, default_value_t = 128)]
    n: usize,
    /// Assignment/update alternations.
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (defaults to the manifest's directory). The manifest
    /// is updated in place to point at the new files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON training configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Decoder hidden width.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
}

#[derive(Args, Serialize)]
struct LocalizeArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Decoder file (defaults to decoder.lgdc next to the scene).
    #[arg(long)]
    decoder: Option<PathBuf>,
    /// Manifest providing the codebook, cameras, index maps and queries.
    #[arg(long)]
    manifest: PathBuf,
    /// Query label from the manifest, or a path to a query file.
    #[arg(long)]
    query: String,
    /// Relevance threshold (strict).
    #[arg(long, default_value_t = 0.95)]
    tau: f64,
    /// Recall refinement epochs.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Precision refinement epochs.
    #[arg(long, default_value_t = 10)]
    m: usize,
    /// Recall-then-precision rounds.
    #[arg(long, default_value_t = 1)]
    alternations: usize,
    /// Refinement learning rate.
    #[arg(long, default_value_t = 3e-2)]
    lr: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-frame relevance maps of the final scene as PNGs.
    #[arg(long)]
    relevance_png: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ChannelArg {
    Color,
    Feature,
    Both,
}

#[derive(Args, Serialize)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Camera file: one camera per frame, or a single camera for all frames.
    #[arg(long)]
    camera_path: PathBuf,
    /// Frames to render as START:END (end exclusive); defaults to all.
    #[arg(long)]
    t_range: Option<String>,
    #[arg(long, value_enum, default_value_t = ChannelArg::Color)]
    channels: ChannelArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    Full,
    ColorOnly,
}

#[derive(Args, Serialize)]
struct EditArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Localization result naming the Gaussians to edit.
    #[arg(long)]
    localization: PathBuf,
    /// Edited reference video: a PNG directory or an RGB frame tensor.
    #[arg(long)]
    reference_video: PathBuf,
    /// Cameras of the reference frames.
    #[arg(long)]
    camera_path: PathBuf,
    /// Edit epochs.
    #[arg(long, default_value_t = 500)]
    k: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EvalMode {
    Psnr,
    Miou,
    Dirsim,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long, value_enum)]
    mode: EvalMode,
    /// psnr: first video (PNG directory or RGB tensor).
    #[arg(long)]
    a: Option<PathBuf>,
    /// psnr: second video.
    #[arg(long)]
    b: Option<PathBuf>,
    /// psnr: pixel mask tensor [T, H, W] (u8 or f32, non-zero selects).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Manifest with ground truth (label maps, query membership, codebook).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// psnr: restrict to the ground-truth mask of this query label.
    #[arg(long)]
    label: Option<String>,
    /// miou: NAME=LOCALIZATION.json, repeatable.
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// miou: scene the localizations index into; dirsim: original scene.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// miou: training record whose lineage maps scene rows to reference rows.
    #[arg(long)]
    train_record: Option<PathBuf>,
    /// dirsim: edited scene.
    #[arg(long)]
    edited: Option<PathBuf>,
    /// dirsim: decoder (defaults to decoder.lgdc next to --scene).
    #[arg(long)]
    decoder: Option<PathBuf>,
    /// dirsim: localization whose selection defines the edited region.
    #[arg(long)]
    localization: Option<PathBuf>,
    /// dirsim: query before the edit (label or file).
    #[arg(long)]
    before: Option<String>,
    /// dirsim: query after the edit (label or file).
    #[arg(long)]
    after: Option<String>,
    /// Report path (JSON; miou also writes a CSV table next to it).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct AblationArgs {
    /// Fixture seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Share of the target cluster planted as false negatives (and as many
    /// false positives).
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[arg(long, default_value_t = 0.95)]
    tau: f64,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    /// CSV table path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn flags<T: Serialize>(args: &T) -> Value {
    serde_json::to_value(args).unwrap_or(Value::Null)
}

/// Path stored in a manifest: relative when `file` lives under the
/// manifest's directory, absolute otherwise.
fn manifest_path(manifest: &Path, file: &Path) -> Result<PathBuf> {
    let base = std::path::absolute(manifest.parent().unwrap_or(Path::new(".")))?;
    let file = std::path::absolute(file)?;
    Ok(file.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(file))
}

fn load_query(ds: &Dataset, spec: &str) -> Result<QueryEmbedding> {
    if let Some((_, q)) = ds.query(spec) {
        return Ok(q.clone());
    }
    let path = Path::new(spec);
    if path.is_file() {
        return Ok(io::read_query(path)?);
    }
    let known: Vec<&str> = ds.queries.iter().map(|(e, _)| e.label.as_str()).collect();
    bail!("query '{spec}' is neither a manifest label ({}) nor a file", known.join(", "))
}

fn sibling_decoder(scene: &Path, decoder: &Option<PathBuf>) -> PathBuf {
    decoder
        .clone()
        .unwrap_or_else(|| scene.parent().unwrap_or(Path::new(".")).join("decoder.lgdc"))
}

fn require<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().with_context(|| format!("--{what} is required for this mode"))
}

fn gen_synthetic(args: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: args.seed,
        clusters: args.clusters,
        gaussians_per_cluster: args.gaussians_per_cluster,
        static_grid: args.static_grid,
        frames: args.frames,
        size: args.size,
        feature_dim: args.df,
        bases: args.bases,
        embed_dim: args.embed_dim,
        noise_deg: args.noise_deg,
        ..Default::default()
    };
    let ds = synthetic::generate(&spec)?;
    let path = io::write_synthetic(&ds, &args.out, json!({ "flags": flags(args), "spec": spec }))?;
    log::info!(
        "{} Gaussians, {} frames, {} queries",
        ds.world.scene.len(),
        spec.frames,
        spec.clusters
    );
    println!("{}", path.display());
    Ok(())
}

fn quantize(args: &QuantizeArgs) -> Result<()> {
    let mut manifest = Manifest::load(&args.manifest)?;
    let resolve = |p: &Path| io::resolve(&args.manifest, p);
    let fpath = resolve(manifest.features.as_ref().context("manifest has no feature stack")?);
    let vpath = manifest.feature_valid.as_ref().map(|p| resolve(p));
    let features = io::read_feature_stack(&fpath, vpath.as_deref())?;
    let cfg = QuantizerConfig {
        entries: args.n,
        epochs: args.epochs,
        lr: args.lr,
        seed: args.seed,
        ..Default::default()
    };
    let (book, indices, stats) = quantizer::learn_codebook(&features, &cfg)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    let (bpath, ipath) = (out.join("codebook.lgcb"), out.join("index_maps.lgt"));
    io::write_codebook(&bpath, &book)?;
    io::write_index_stack(&ipath, &indices)?;
    let final_loss = stats.losses.last().copied().unwrap_or(0.0);
    io::write_json(
        &out.join("quantize.json"),
        &json!({ "flags": flags(args), "config": cfg, "stats": stats, "final_loss": final_loss }),
    )?;
    manifest.codebook = Some(manifest_path(&args.manifest, &bpath)?);
    manifest.index_maps = Some(manifest_path(&args.manifest, &ipath)?);
    manifest.save(&args.manifest)?;
    println!("final L_quant: {final_loss:.6}");
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let ds = Dataset::load(&args.manifest)?;
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let scene = ds.scene.as_ref().context("manifest has no initial scene")?;
    let book = ds.codebook.as_ref().context("manifest has no codebook; run quantize first")?;
    let sup = ds.supervision_with_index()?;
    let decoder = Decoder::random(scene.feature_dim, args.hidden, book.entries, cfg.seed);

    let mut log = RunLog::create(&args.out.join("run.jsonl"))?;
    log.record(&json!({ "flags": flags(args), "config": cfg }))?;
    let mut log_err = None;
    let outcome = training::train_with(scene, &decoder, book, &sup, &cfg, |e| {
        if e.epoch % 50 == 0 || e.epoch + 1 == cfg.epochs {
            log::info!("epoch {} loss {:.6} ({} Gaussians)", e.epoch, e.loss.total, e.gaussians);
        }
        if let Err(err) = log.record(&json!({ "epoch": e })) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_err {
        return Err(err.into());
    }
    for d in &outcome.densify {
        log.record(&json!({ "densify": d }))?;
    }
    log.finish()?;

    let mut trained = outcome.scene;
    if let Some(cb) = &ds.manifest.codebook {
        trained.codebook_ref = io::resolve(&args.manifest, cb).display().to_string();
    }
    io::write_scene(&args.out.join("scene.lgsc"), &trained)?;
    io::write_decoder(&args.out.join("decoder.lgdc"), &outcome.decoder)?;
    let last = outcome.epochs.last().cloned().unwrap_or_default();
    io::write_json(
        &args.out.join("train.json"),
        &json!({
            "schema_version": io::SCHEMA_VERSION,
            "flags": flags(args),
            "config": cfg,
            "final": last,
            "gaussians": trained.len(),
            "densify": outcome.densify,
            "lineage": outcome.lineage,
        }),
    )?;
    println!("final loss {:.6}, {} Gaussians", last.loss.total, trained.len());
    Ok(())
}

fn localize(args: &LocalizeArgs) -> Result<()> {
    let ds = Dataset::load(&args.manifest)?;
    let mut scene = io::read_scene(&args.scene)?;
    let decoder = io::read_decoder(&sibling_decoder(&args.scene, &args.decoder))?;
    let book = ds.codebook.as_ref().context("manifest has no codebook")?;
    let query = load_query(&ds, &args.query)?;
    let mlp = Mlp::from(&decoder);
    let sem = Semantics {
        decoder: &mlp,
        codebook: book,
    };
    let cfg = RefineConfig {
        tau: args.tau,
        recall_epochs: args.n,
        precision_epochs: args.m,
        alternations: args.alternations,
        lr: args.lr,
        ..Default::default()
    };
    let refine = (args.n > 0 || args.m > 0) && args.alternations > 0;
    let result = if refine {
        let index_maps = ds.index_maps.as_ref().context("refinement needs index maps; run quantize first")?;
        let views = Views {
            cameras: &ds.cameras,
            index_maps,
        };
        localization::localize_refined(&mut scene, sem, &query, views, &cfg)?
    } else {
        localization::localize(&scene, sem, &query, args.tau)?
    };
    let (n, m) = if refine {
        (args.n * args.alternations, args.m * args.alternations)
    } else {
        (0, 0)
    };
    let record = LocalizationRecord::new(&result, n, m, flags(args));
    io::write_json(&args.out.join("localization.json"), &record)?;
    io::write_scene(&args.out.join("scene.lgsc"), &scene)?;
    if args.relevance_png {
        for (t, cam) in ds.cameras.iter().enumerate() {
            let map = localization::relevance_map(&scene, sem, &query, t, cam, &cfg.render)?;
            io::relevance_to_png(
                &args.out.join("relevance").join(format!("{t:05}.png")),
                &map.values,
                map.width,
                map.height,
            )?;
        }
    }
    println!("{} Gaussians selected for '{}'", record.count, record.label);
    Ok(())
}

fn parse_range(spec: &Option<String>, len: usize) -> Result<std::ops::Range<usize>> {
    let Some(s) = spec else { return Ok(0..len) };
    let (a, b) = s.split_once(':').context("--t-range must look like START:END")?;
    let a: usize = if a.is_empty() { 0 } else { a.parse().context("bad --t-range start")? };
    let b: usize = if b.is_empty() { len } else { b.parse().context("bad --t-range end")? };
    if a >= b || b > len {
        bail!("--t-range {s} is empty or exceeds the {len} available frames");
    }
    Ok(a..b)
}

/// Camera for frame `t`: per-frame paths, or one camera reused for every frame.
fn camera_at(cameras: &[Camera], t: usize) -> Result<&Camera> {
    match cameras.len() {
        0 => bail!("camera file holds no cameras"),
        1 => Ok(&cameras[0]),
        n if t < n => Ok(&cameras[t]),
        n => bail!("frame {t} has no camera ({n} in the file)"),
    }
}

fn render(args: &RenderArgs) -> Result<()> {
    let scene = io::read_scene(&args.scene)?;
    let cameras = io::read_cameras(&args.camera_path)?;
    let range = parse_range(&args.t_range, scene.frames())?;
    let channels = match args.channels {
        ChannelArg::Color => Channels::Color,
        ChannelArg::Feature => Channels::Feature,
        ChannelArg::Both => Channels::Both,
    };
    let cfg = RenderConfig::default();
    let (mut color, mut feature, mut alpha, mut depth) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut w, mut h) = (0, 0);
    for t in range.clone() {
        let cam = camera_at(&cameras, t)?;
        let out = raster::render(&scene, t, cam, channels, &cfg)?;
        if color.is_empty() && feature.is_empty() {
            (w, h) = (out.width, out.height);
        } else if (w, h) != (out.width, out.height) {
            bail!("camera sizes differ along the path");
        }
        if channels != Channels::Feature {
            io::write_rgb_png(&args.out.join("color").join(format!("{t:05}.png")), &out.color, w, h)?;
            color.push(out.color);
        }
        if channels.has_feature() {
            feature.push(out.feature);
        }
        alpha.push(out.alpha);
        depth.push(out.depth);
    }
    if !color.is_empty() {
        io::write_frame_tensor(&args.out.join("color.lgt"), &color, w, h, 3)?;
    }
    if !feature.is_empty() {
        io::write_frame_tensor(&args.out.join("feature.lgt"), &feature, w, h, scene.feature_dim)?;
    }
    io::write_frame_tensor(&args.out.join("alpha.lgt"), &alpha, w, h, 1)?;
    io::write_frame_tensor(&args.out.join("depth.lgt"), &depth, w, h, 1)?;
    io::write_json(
        &args.out.join("render.json"),
        &json!({ "flags": flags(args), "frames": [range.start, range.end], "width": w, "height": h }),
    )?;
    println!("rendered frames {}..{}", range.start, range.end);
    Ok(())
}

fn edit(args: &EditArgs) -> Result<()> {
    let scene = io::read_scene(&args.scene)?;
    let loc = LocalizationRecord::load(&args.localization)?;
    let (w, h, targets) = io::read_video(&args.reference_video)?;
    let all = io::read_cameras(&args.camera_path)?;
    let cameras = (0..targets.len())
        .map(|t| camera_at(&all, t).cloned())
        .collect::<Result<Vec<_>>>()?;
    if cameras.iter().any(|c| (c.width, c.height) != (w, h)) {
        bail!("reference video is {w}x{h} but the cameras differ");
    }
    if loc.selected.is_empty() {
        log::warn!("localization selects no Gaussians; the scene is left unchanged");
    }
    let cfg = EditConfig {
        epochs: args.k,
        mode: match args.mode {
            ModeArg::Full => EditMode::Full,
            ModeArg::ColorOnly => EditMode::ColorOnly,
        },
        ..Default::default()
    };
    let (edited, report) = training::edit(&scene, &loc.selected, &targets, &cameras, &cfg)?;
    io::write_scene(&args.out.join("scene.lgsc"), &edited)?;
    let frames = (0..cameras.len())
        .map(|t| Ok(raster::render(&edited, t, &cameras[t], Channels::Color, &cfg.render)?.color))
        .collect::<Result<Vec<_>>>()?;
    io::write_png_dir(&args.out.join("frames"), &frames, w, h)?;
    let mask: Vec<bool> = vec![true; w * h * frames.len()];
    let fidelity = eval::psnr(&frames.concat(), &targets.concat(), 3, Some(&mask))?;
    io::write_json(
        &args.out.join("edit.json"),
        &json!({
            "flags": flags(args),
            "config": cfg,
            "selected": loc.selected.len(),
            "losses": report.losses,
            "psnr_vs_reference": fidelity.capped(),
        }),
    )?;
    println!(
        "edited {} Gaussians, final loss {:.6}, PSNR vs reference {:.2} dB",
        loc.selected.len(),
        report.losses.last().copied().unwrap_or(0.0),
        fidelity.capped()
    );
    Ok(())
}

/// Per-frame `[T, H, W]` mask from a u8 or f32 tensor.
fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let t = io::read_tensor(path)?;
    Ok(match t.data {
        io::TensorData::U8(v) => v.into_iter().map(|x| x != 0).collect(),
        io::TensorData::F32(v) => v.into_iter().map(|x| x != 0.0).collect(),
        io::TensorData::I32(v) => v.into_iter().map(|x| x != 0).collect(),
    })
}

/// Ground-truth pixel mask of a query label, from the manifest's label maps.
fn label_mask(ds: &Dataset, label: &str) -> Result<Vec<bool>> {
    let (entry, _) = ds.query(label).with_context(|| format!("manifest has no query '{label}'"))?;
    let id = entry.mask_label.with_context(|| format!("query '{label}' has no mask label"))?;
    let maps = ds.label_maps.as_ref().context("manifest has no label maps")?;
    Ok(maps.iter().map(|&l| l == id).collect())
}

fn eval_psnr(args: &EvalArgs) -> Result<Value> {
    let (wa, ha, a) = io::read_video(require(&args.a, "a")?)?;
    let (wb, hb, b) = io::read_video(require(&args.b, "b")?)?;
    if (wa, ha, a.len()) != (wb, hb, b.len()) {
        bail!("videos differ in size: {}x{}x{} vs {}x{}x{}", wa, ha, a.len(), wb, hb, b.len());
    }
    let mask = match (&args.mask, &args.label) {
        (Some(p), _) => Some(read_mask(p)?),
        (None, Some(label)) => Some(label_mask(&Dataset::load(require(&args.manifest, "manifest")?)?, label)?),
        (None, None) => None,
    };
    if mask.as_ref().is_some_and(|m| m.len() != wa * ha * a.len()) {
        bail!("mask does not match the video size");
    }
    let (a, b) = (a.concat(), b.concat());
    let p = eval::psnr(&a, &b, 3, mask.as_deref())?;
    println!("PSNR {:.4} dB", p.capped());
    Ok(json!({ "psnr_db": p.capped(), "mse": p.mse, "identical": p.identical() }))
}

fn eval_miou(args: &EvalArgs) -> Result<Value> {
    let ds = Dataset::load(require(&args.manifest, "manifest")?)?;
    let scene = io::read_scene(require(&args.scene, "scene")?)?;
    if args.variants.is_empty() {
        bail!("at least one --variant NAME=LOCALIZATION.json is required");
    }
    let reference = ds.reference_scene.as_ref();
    let lineage: Option<Vec<usize>> = match &args.train_record {
        Some(p) => {
            let v: Value = io::read_json(p)?;
            Some(serde_json::from_value(v.get("lineage").cloned().context("training record has no lineage")?)?)
        }
        None => None,
    };
    if lineage.as_ref().is_some_and(|l| l.len() != scene.len()) {
        bail!("lineage covers {} rows, scene has {}", lineage.as_ref().map_or(0, Vec::len), scene.len());
    }
    let render = RenderConfig::default();
    let mut rows = Vec::new();
    for spec in &args.variants {
        let (name, path) = spec.split_once('=').context("--variant must look like NAME=PATH")?;
        let loc = LocalizationRecord::load(Path::new(path))?;
        let (entry, _) = ds
            .query(&loc.label)
            .with_context(|| format!("manifest has no query '{}'", loc.label))?;
        let members = entry.members.as_ref();
        let gt: Option<Vec<usize>> = match (&lineage, members) {
            (Some(l), Some(m)) => Some((0..scene.len()).filter(|&i| m.binary_search(&l[i]).is_ok()).collect()),
            (None, Some(m)) if reference.is_some_and(|r| r.len() == scene.len()) => Some(m.clone()),
            _ => None,
        };
        let mask = label_mask(&ds, &loc.label)?;
        let pixels = ds.manifest.width * ds.manifest.height;
        let (mut part, mut full, mut per_frame, mut ious) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (t, cam) in ds.cameras.iter().enumerate() {
            let f = raster::render(&scene, t, cam, Channels::Color, &render)?;
            let s = raster::render_subset(&scene, t, cam, Channels::Color, &render, &loc.selected)?;
            let m = &mask[t * pixels..(t + 1) * pixels];
            if m.iter().any(|&v| v) {
                per_frame.push(eval::psnr(&s.color, &f.color, 3, Some(m))?.capped());
            }
            if gt.is_none() {
                let sel: Vec<bool> = s.alpha.iter().map(|&a| a >= 0.5).collect();
                ious.push(eval::iou_masks(&sel, m)?);
            }
            part.extend(s.color);
            full.extend(f.color);
        }
        let psnr_db = eval::psnr(&part, &full, 3, Some(&mask))?.capped();
        let (miou, both_empty) = match &gt {
            Some(g) => {
                let i = eval::iou_sets(&loc.selected, g);
                (i.value, i.both_empty)
            }
            None => (
                ious.iter().map(|i| i.value).sum::<f64>() / ious.len().max(1) as f64,
                ious.iter().all(|i| i.both_empty),
            ),
        };
        log::info!("{name}: mIoU {miou:.4} ({}), PSNR {psnr_db:.2} dB", if gt.is_some() { "3D" } else { "2D" });
        rows.push(MetricReport {
            variant: name.to_string(),
            query: loc.label.clone(),
            psnr_db,
            miou,
            miou_both_empty: both_empty,
            per_frame_psnr: per_frame,
        });
    }
    let table = eval::table_csv(&rows);
    print!("{table}");
    if let Some(out) = &args.out {
        io::write_text(&out.with_extension("csv"), &table)?;
    }
    Ok(json!({ "rows": rows }))
}

/// Expected-embedding image of `scene` at frame `t`.
fn embedding_frame(scene: &GaussianScene, t: usize, cam: &Camera, sem: Semantics) -> Result<Vec<f64>> {
    let out = raster::render(scene, t, cam, Channels::Feature, &RenderConfig::default())?;
    let dist = semantics::decode_map(&out.feature, sem.decoder)?;
    let mut e = Vec::with_capacity(dist.rows * sem.codebook.dim);
    for r in 0..dist.rows {
        e.extend(semantics::expected_embedding(dist.row(r), sem.codebook)?);
    }
    Ok(e)
}

fn eval_dirsim(args: &EvalArgs) -> Result<Value> {
    let ds = Dataset::load(require(&args.manifest, "manifest")?)?;
    let scene_path = require(&args.scene, "scene")?;
    let original = io::read_scene(scene_path)?;
    let edited = io::read_scene(require(&args.edited, "edited")?)?;
    let decoder = io::read_decoder(&sibling_decoder(scene_path, &args.decoder))?;
    let loc = LocalizationRecord::load(require(&args.localization, "localization")?)?;
    let before = load_query(&ds, require(&args.before, "before")?)?;
    let after = load_query(&ds, require(&args.after, "after")?)?;
    let book = ds.codebook.as_ref().context("manifest has no codebook")?;
    let mlp = Mlp::from(&decoder);
    let sem = Semantics {
        decoder: &mlp,
        codebook: book,
    };
    let (mut a, mut b, mut region) = (Vec::new(), Vec::new(), Vec::new());
    for (t, cam) in ds.cameras.iter().enumerate() {
        a.extend(embedding_frame(&original, t, cam, sem)?);
        b.extend(embedding_frame(&edited, t, cam, sem)?);
        let s = raster::render_subset(&edited, t, cam, Channels::Color, &RenderConfig::default(), &loc.selected)?;
        region.extend(s.alpha.iter().map(|&v| v >= 0.5));
    }
    let d = eval::feature_dir_sim(&a, &b, book.dim, &before.vector, &after.vector, &region)?;
    println!("directional similarity {:.4} over {} pixels ({} unchanged)", d.value, d.pixels, d.undefined);
    Ok(serde_json::to_value(d)?)
}

fn evaluate(args: &EvalArgs) -> Result<()> {
    let result = match args.mode {
        EvalMode::Psnr => eval_psnr(args)?,
        EvalMode::Miou => eval_miou(args)?,
        EvalMode::Dirsim => eval_dirsim(args)?,
    };
    if let Some(out) = &args.out {
        io::write_json(out, &json!({ "flags": flags(args), "result": result }))?;
    }
    Ok(())
}

fn run_ablation(args: &AblationArgs) -> Result<()> {
    let cfg = RefineConfig {
        tau: args.tau,
        recall_epochs: args.n,
        precision_epochs: args.m,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for &seed in &args.seeds {
        let mut spec = PlantedSpec {
            fraction: args.fraction,
            ..Default::default()
        };
        spec.world.seed = seed;
        let fix = ablation::planted_fixture(&spec)?;
        rows.extend(ablation::ablation(&fix, &cfg)?.into_iter().map(|r| (seed, r)));
    }
    let mut csv = String::from("seed,variant,psnr_db,miou\n");
    for (seed, r) in &rows {
        csv.push_str(&format!("{seed},{},{:.4},{:.4}\n", r.variant, r.psnr_db, r.miou));
    }
    print!("{csv}");
    if let Some(out) = &args.out {
        io::write_text(out, &csv)?;
        let rows: Vec<Value> = rows.iter().map(|(seed, r)| json!({ "seed": seed, "report": r })).collect();
        io::write_json(&out.with_extension("json"), &json!({ "flags": flags(args), "rows": rows }))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Quantize(a) => quantize(a),
        Command::Train(a) => train(a),
        Command::Localize(a) => localize(a),
        Command::Render(a) => render(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => evaluate(a),
        Command::Ablation(a) => run_ablation(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
