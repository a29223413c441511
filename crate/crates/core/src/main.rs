use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use oa_bridge::audio::{save_wav, OaGrid};
use oa_bridge::backends::{Backends, Enhancer, Recognizer};
use oa_bridge::cache::{PqCache, WerCache, FEATURE_CACHE_DIR, PQ_CACHE_FILE, WER_CACHE_FILE};
use oa_bridge::config::Config;
use oa_bridge::features::{FbankConfig, FeatureCache};
use oa_bridge::manifest::{Manifest, ManifestRecord, Split, Subset};
use oa_bridge::model::{load_checkpoint, save_checkpoint, BridgingNet};
use oa_bridge::pipeline::{
    evaluate, gather_examples, histogram, histogram_text, infer_utterance, predict_omega, sweep, OmegaPolicy,
    TargetSources,
};
use oa_bridge::supervision::build_pq_targets;
use oa_bridge::synth::{write_corpus, CorpusSpec};
use oa_bridge::training::{train, write_metrics_log, Strategy};

#[derive(Parser)]
#[command(name = "oa-bridge", version, about = "Predict observation-addition coefficients between frozen SE and ASR models")]
struct Cli {
    /// TOML config file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr_peak=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a JSON-Lines manifest from a directory of WAV files.
    PrepareManifest(PrepareManifestArgs),
    /// Write a synthetic tone-in-noise corpus and its manifest.
    MakeSynthetic(MakeSyntheticArgs),
    /// Score noisy audio and cache quality targets.
    PreparePqTargets(ManifestArg),
    /// Cache per-utterance WER vectors and print the OA sweep table.
    SweepWer(SweepArgs),
    /// Train the bridging network from cached targets.
    Train(TrainArgs),
    /// Run SE, bridging, blending and ASR on single utterances.
    Infer(InferArgs),
    /// Pooled WER per subset and overall.
    Evaluate(EvaluateArgs),
    /// Distribution of the chosen coefficients.
    Histogram(HistogramArgs),
}

#[derive(Args)]
struct ManifestArg {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct PrepareManifestArgs {
    /// Directory scanned (non-recursively) for `.wav` files.
    #[arg(long)]
    audio_dir: PathBuf,
    /// Subset tag for every record, e.g. `et_real`.
    #[arg(long)]
    subset: Subset,
    /// Kaldi-style transcripts: `<utt_id> <words...>` per line.
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// Keep only files whose stem ends with this suffix (e.g. `.CH5`) and drop it from the utterance id.
    #[arg(long)]
    channel_suffix: Option<String>,
    /// Zero-based channel to read from multi-channel files.
    #[arg(long)]
    channel: Option<usize>,
    /// Directory holding `<utt_id>.wav` enhanced outputs.
    #[arg(long)]
    enhanced_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Add to an existing manifest instead of replacing it.
    #[arg(long)]
    append: bool,
}

#[derive(Args)]
struct MakeSyntheticArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_utts: usize,
    #[arg(long, default_value_t = 0.2)]
    dev_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Also write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training records (`tr_*`); `dt_*` records validate unless `--val-manifest` is given.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Receives best.ckpt, last.ckpt, metrics.jsonl and config.toml.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, conflicts_with = "fixed_omega", required_unless_present = "fixed_omega")]
    checkpoint: Option<PathBuf>,
    /// Blend every utterance with this coefficient instead of a model.
    #[arg(long)]
    fixed_omega: Option<f64>,
    /// Selection rule; defaults to the strategy stored in the checkpoint.
    #[arg(long)]
    strategy: Option<Strategy>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Utterances to process; all when omitted.
    #[arg(long = "utt")]
    utts: Vec<String>,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Write each blended waveform to `<dir>/<utt_id>.wav`.
    #[arg(long)]
    wav_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Restrict to these subsets. Repeatable.
    #[arg(long = "subset")]
    subsets: Vec<Subset>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Skip the plain-text bar chart.
    #[arg(long)]
    no_chart: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = Config::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::PrepareManifest(a) => prepare_manifest(a),
        Command::MakeSynthetic(a) => make_synthetic(a),
        Command::PreparePqTargets(a) => prepare_pq_targets(&cfg, &a.manifest),
        Command::SweepWer(a) => sweep_wer(&cfg, a),
        Command::Train(a) => run_train(&cfg, a),
        Command::Infer(a) => run_infer(&cfg, a),
        Command::Evaluate(a) => run_evaluate(&cfg, a),
        Command::Histogram(a) => run_histogram(&cfg, a),
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn enhancer(cfg: &Config) -> Result<Arc<dyn Enhancer>> {
    Ok(cfg.backends.enhancer.build_enhancer()?)
}

fn recognizer(cfg: &Config, grid: &OaGrid) -> Result<Arc<dyn Recognizer>> {
    let d = cfg
        .backends
        .recognizer
        .as_ref()
        .ok_or_else(|| anyhow!("backends.recognizer is not configured"))?;
    Ok(d.build_recognizer(grid)?)
}

fn open_caches(cfg: &Config) -> Result<(PathBuf, WerCache, PqCache)> {
    let root = cfg.cache_root();
    std::fs::create_dir_all(&root).with_context(|| format!("creating cache dir {}", root.display()))?;
    Ok((
        root.clone(),
        WerCache::open(root.join(WER_CACHE_FILE))?,
        PqCache::open(root.join(PQ_CACHE_FILE))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_transcripts(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let l = l.trim();
            match l.split_once(char::is_whitespace) {
                Some((id, words)) => (id.to_string(), words.trim().to_string()),
                None => (l.to_string(), String::new()),
            }
        })
        .collect())
}

fn prepare_manifest(a: PrepareManifestArgs) -> Result<()> {
    let transcripts = a.transcripts.as_deref().map(read_transcripts).transpose()?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.audio_dir)
        .with_context(|| format!("listing {}", a.audio_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();

    let mut records = Vec::new();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let utt_id = match &a.channel_suffix {
            Some(sfx) => match stem.strip_suffix(sfx.as_str()) {
                Some(id) => id.to_string(),
                None => continue,
            },
            None => stem.to_string(),
        };
        let transcript = transcripts.as_ref().and_then(|t| t.get(&utt_id).cloned());
        if transcripts.is_some() && transcript.is_none() {
            log::warn!("no transcript for {utt_id}");
        }
        let enhanced_path = a.enhanced_dir.as_ref().map(|d| d.join(format!("{utt_id}.wav")));
        records.push(ManifestRecord {
            utt_id,
            noisy_path: path,
            enhanced_path,
            transcript,
            subset: a.subset,
            channel: a.channel,
            clean_path: None,
            snr_db: None,
        });
    }
    if records.is_empty() {
        bail!("no matching .wav files in {}", a.audio_dir.display());
    }
    let added = records.len();
    if a.append && a.out.exists() {
        let mut existing = load_manifest(&a.out)?;
        existing.records.extend(records);
        records = existing.records;
    }
    let manifest = Manifest::new(records)?;
    manifest.save(&a.out)?;
    println!("wrote {} records ({added} new) to {}", manifest.len(), a.out.display());
    Ok(())
}

fn make_synthetic(a: MakeSyntheticArgs) -> Result<()> {
    let spec = CorpusSpec {
        n_utts: a.n_utts,
        dev_fraction: a.dev_fraction,
        ..CorpusSpec::default()
    };
    let m = write_corpus(&a.out_dir, &spec, a.seed)?;
    println!("wrote {} utterances and {}", m.len(), a.out_dir.join("manifest.jsonl").display());
    Ok(())
}

fn prepare_pq_targets(cfg: &Config, manifest: &Path) -> Result<()> {
    let m = load_manifest(manifest)?;
    let scorer = cfg
        .backends
        .scorer
        .as_ref()
        .ok_or_else(|| anyhow!("backends.scorer is not configured"))?
        .build_scorer()?;
    let (root, _, pq_cache) = open_caches(cfg)?;
    let t = build_pq_targets(&m, scorer.as_ref(), Some(&pq_cache));
    println!(
        "{} targets, {} failures, cache {}",
        t.targets.len(),
        t.failures.len(),
        root.join(PQ_CACHE_FILE).display()
    );
    for (utt, msg) in &t.failures {
        println!("  {utt}: {msg}");
    }
    Ok(())
}

fn sweep_wer(cfg: &Config, a: SweepArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let grid = cfg.grid()?;
    let backends = Backends::new(enhancer(cfg)?, recognizer(cfg, &grid)?);
    let (_, wer_cache, _) = open_caches(cfg)?;
    let table = sweep(&m, &grid, &backends, Some(&wer_cache));
    print!("{}", table.to_text());
    if let Some(p) = &a.json {
        write_json(p, &table)?;
    }
    Ok(())
}

fn run_train(cfg: &Config, a: TrainArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let (train_m, val_m) = match &a.val_manifest {
        Some(p) => (m, load_manifest(p)?),
        None => {
            let (dev, rest): (Vec<_>, Vec<_>) = m.records.into_iter().partition(|r| r.subset.split == Split::Dev);
            (Manifest::new(rest)?, Manifest::new(dev)?)
        }
    };
    let strategy = cfg.train.strategy;
    let grid = cfg.grid()?;
    let enh = enhancer(cfg)?;
    let (root, wer_cache, pq_cache) = open_caches(cfg)?;
    let features = FeatureCache::new(root.join(FEATURE_CACHE_DIR));
    let scorer_id = cfg.backends.scorer.as_ref().map(|d| d.id.as_str());
    let asr_id = cfg.backends.recognizer.as_ref().map(|d| d.id.as_str());
    if strategy.needs_pq() && scorer_id.is_none() {
        bail!("strategy {strategy} needs backends.scorer to locate cached targets");
    }
    if strategy.needs_wers() && asr_id.is_none() {
        bail!("strategy {strategy} needs backends.recognizer to locate cached WER vectors");
    }
    let sources = TargetSources {
        pq: scorer_id.map(|id| (&pq_cache, id)),
        wer: asr_id.map(|id| (&wer_cache, id, &grid)),
    };
    let gather = |m: &Manifest| gather_examples(m, strategy, enh.as_ref(), &cfg.fbank, Some(&features), sources);
    let train_set = gather(&train_m).context("training targets (run prepare-pq-targets / sweep-wer first)")?;
    let val_set = gather(&val_m).context("validation targets")?;
    log::info!("training {strategy} on {} utterances, validating on {}", train_set.len(), val_set.len());

    let out = train(&train_set, &val_set, &cfg.model, &cfg.train)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut meta = BTreeMap::new();
    meta.insert("strategy".to_string(), strategy.to_string());
    meta.insert("k".to_string(), cfg.train.k.to_string());
    meta.insert("fbank".to_string(), serde_json::to_string(&cfg.fbank)?);
    meta.insert("enhancer".to_string(), enh.id().to_string());
    meta.insert("best_epoch".to_string(), out.best_epoch.to_string());
    meta.insert("best_val_loss".to_string(), out.best_val_loss.to_string());
    save_checkpoint(a.out_dir.join("best.ckpt"), &cfg.model, &out.best.params, &meta)?;
    save_checkpoint(a.out_dir.join("last.ckpt"), &cfg.model, &out.last.params, &meta)?;
    write_metrics_log(a.out_dir.join("metrics.jsonl"), &out.log)?;
    std::fs::write(a.out_dir.join("config.toml"), cfg.to_toml()?)?;
    println!(
        "best epoch {} (validation loss {:.6}); checkpoints in {}",
        out.best_epoch,
        out.best_val_loss,
        a.out_dir.display()
    );
    Ok(())
}

/// A network with the selection rule, grid and features it was trained with.
struct LoadedModel {
    net: BridgingNet,
    strategy: Strategy,
    grid: OaGrid,
    fbank: FbankConfig,
    fingerprint: String,
}

impl LoadedModel {
    fn load(cfg: &Config, path: &Path, strategy: Option<Strategy>) -> Result<Self> {
        let ckpt = load_checkpoint(path, None).with_context(|| format!("loading {}", path.display()))?;
        let strategy = match strategy {
            Some(s) => s,
            None => match ckpt.meta.get("strategy") {
                Some(s) => s.parse()?,
                None => cfg.train.strategy,
            },
        };
        let k = match ckpt.meta.get("k") {
            Some(k) => k.parse().with_context(|| format!("bad k {k:?} in checkpoint"))?,
            None => cfg.train.k,
        };
        let fbank: FbankConfig = match ckpt.meta.get("fbank") {
            Some(f) => serde_json::from_str(f).context("bad fbank config in checkpoint")?,
            None => cfg.fbank.clone(),
        };
        let fingerprint = format!("model={} strategy={strategy} fbank={}", ckpt.cfg.fingerprint(), fbank.fingerprint());
        Ok(Self {
            net: BridgingNet::new(ckpt.cfg, ckpt.params)?,
            strategy,
            grid: OaGrid::new(k)?,
            fbank,
            fingerprint,
        })
    }

    fn policy(&self) -> OmegaPolicy<'_> {
        OmegaPolicy::Model {
            net: &self.net,
            strategy: self.strategy,
            grid: &self.grid,
            fbank: &self.fbank,
        }
    }
}

fn load_policy_model(cfg: &Config, p: &PolicyArgs) -> Result<Option<LoadedModel>> {
    p.checkpoint
        .as_deref()
        .map(|c| LoadedModel::load(cfg, c, p.strategy))
        .transpose()
}

fn policy_of<'a>(model: &'a Option<LoadedModel>, p: &PolicyArgs) -> Result<(OmegaPolicy<'a>, String)> {
    match (model, p.fixed_omega) {
        (Some(m), _) => Ok((m.policy(), m.fingerprint.clone())),
        (None, Some(w)) => Ok((OmegaPolicy::Fixed(w), format!("fixed-omega={w}"))),
        (None, None) => bail!("give --checkpoint or --fixed-omega"),
    }
}

fn run_infer(cfg: &Config, a: InferArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let model = load_policy_model(cfg, &a.policy)?;
    let (policy, _) = policy_of(&model, &a.policy)?;
    let grid = model.as_ref().map_or_else(|| cfg.grid(), |m| Ok(m.grid.clone()))?;
    let backends = Backends::new(enhancer(cfg)?, recognizer(cfg, &grid)?);
    let records: Vec<&ManifestRecord> = if a.utts.is_empty() {
        m.records.iter().collect()
    } else {
        a.utts
            .iter()
            .map(|u| m.get(u).ok_or_else(|| anyhow!("utterance {u} not in manifest")))
            .collect::<Result<_>>()?
    };
    if let Some(d) = &a.wav_dir {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    for rec in records {
        let inf = infer_utterance(rec, &policy, &backends)?;
        if let Some(d) = &a.wav_dir {
            save_wav(&inf.blended, d.join(format!("{}.wav", rec.utt_id)))?;
        }
        println!("{}\t{:.4}\t{}", rec.utt_id, inf.omega, inf.hypothesis);
    }
    Ok(())
}

fn run_evaluate(cfg: &Config, a: EvaluateArgs) -> Result<()> {
    let mut m = load_manifest(&a.manifest)?;
    if !a.subsets.is_empty() {
        m = m.filter_subsets(&a.subsets);
    }
    let model = load_policy_model(cfg, &a.policy)?;
    let (policy, fingerprint) = policy_of(&model, &a.policy)?;
    let grid = model.as_ref().map_or_else(|| cfg.grid(), |m| Ok(m.grid.clone()))?;
    let backends = Backends::new(enhancer(cfg)?, recognizer(cfg, &grid)?);
    let fingerprint = format!(
        "{fingerprint} enhancer={} recognizer={}",
        backends.enhancer.id(),
        backends.recognizer.id()
    );
    let report = evaluate(&m, &policy, &backends, &fingerprint);
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct HistogramReport {
    bins: usize,
    edges: Vec<f64>,
    counts: Vec<usize>,
    utterances: usize,
    omegas: BTreeMap<String, f64>,
    failures: BTreeMap<String, String>,
}

fn run_histogram(cfg: &Config, a: HistogramArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let model = LoadedModel::load(cfg, &a.checkpoint, a.strategy)?;
    let policy = model.policy();
    let enh = enhancer(cfg)?;
    let results: Vec<_> = m
        .records
        .par_iter()
        .map(|r| (r.utt_id.clone(), predict_omega(r, &policy, enh.as_ref())))
        .collect();
    let mut omegas = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for (utt, r) in results {
        match r {
            Ok(w) => {
                omegas.insert(utt, w);
            }
            Err(e) => {
                log::warn!("{utt}: {e}");
                failures.insert(utt, e.to_string());
            }
        }
    }
    let values: Vec<f64> = omegas.values().copied().collect();
    let counts = histogram(&values, a.bins)?;
    if !a.no_chart {
        print!("{}", histogram_text(&counts));
    }
    if !failures.is_empty() {
        println!("failed utterances: {}", failures.len());
    }
    if let Some(p) = &a.json {
        let report = HistogramReport {
            bins: a.bins,
            edges: (0..=a.bins).map(|i| i as f64 / a.bins as f64).collect(),
            counts,
            utterances: values.len(),
            omegas,
            failures,
        };
        write_json(p, &report)?;
    }
    Ok(())
}
