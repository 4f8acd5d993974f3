//! The subcommand implementations.  Every artifact embeds the producing
//! configuration, the seed and the dataset digest, is written atomically,
//! and never mutates the input dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use srfuse_core::building::polygonize;
use srfuse_core::data::{split_scene, Split};
use srfuse_core::eval::{
    corpus_fingerprint, downstream_table, evaluate_methods, histograms_by_method, lr_histograms,
    metric_table, run_downstream, spectra_by_method, DownstreamConfig, DownstreamReport, Method,
};
use srfuse_core::ingest::{coregister, IngestJob, LocalDirClient};
use srfuse_core::io::{
    atomic_write, atomic_write_json, hash_file, read_json, save_checkpoint,
    BuildingCollection, BuildingFeature, DatasetManifest, RasterHeader, RevisitEntry, SceneEntry,
};
use srfuse_core::metrics::{histogram_l1, BandHistograms, MetricReport, SpectrumCurve};
use srfuse_core::synth::{generate_synthetic_scene, DegradationSpec};
use srfuse_core::train::{run_training, TrainReport};
use srfuse_core::{building::SegTrainConfig, data::Scene};
use srfuse_core::{Error, Result};
use srfuse_autograd::nn::ParamStore;

use crate::config::{resolve_output, ExperimentConfig};
use crate::dataset::{open_dataset, OpenDataset};
use crate::model::{init_nets, load_model, CheckpointConfig, LoadedModel, ModelNets};
use crate::plot::{line_chart, Series};

/// Frequency cutoff (cycles/pixel) for the integrated high-frequency power
/// summary attached to spectrum artifacts.
pub const SPECTRUM_CUTOFF: f64 = 0.25;

// ---------------------------------------------------------------------------
// Artifact envelope
// ---------------------------------------------------------------------------

/// Envelope written around every JSON artifact: the payload plus everything
/// needed to reproduce it.
#[derive(Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config: serde_json::Value,
    pub seed: u64,
    pub dataset_hash: String,
    pub payload: T,
}

fn write_artifact<C: Serialize, T: Serialize>(
    path: &Path,
    config: &C,
    seed: u64,
    dataset_hash: &str,
    payload: &T,
) -> Result<()> {
    let artifact = Artifact {
        config: serde_json::to_value(config)?,
        seed,
        dataset_hash: dataset_hash.to_string(),
        payload,
    };
    atomic_write_json(path, &artifact)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", path.display())))
}

fn text_header(config_hash: &str, seed: u64, dataset_hash: &str) -> String {
    format!("# config {config_hash}\n# seed {seed}\n# dataset {dataset_hash}\n")
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub scenes: usize,
    /// Revisits per scene.
    #[arg(long, default_value_t = 8)]
    pub revisits: usize,
    #[arg(long, default_value_t = 1)]
    pub bands: usize,
    /// HR scene side length (square scenes).
    #[arg(long, default_value_t = 96)]
    pub hr_size: usize,
    #[arg(long, default_value_t = 2)]
    pub sr_factor: usize,
    /// Patch side length on the LR grid.
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    /// Patch stride on the LR grid.
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub shift_max_px: f64,
    #[arg(long, default_value_t = 1.0)]
    pub blur_sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub color_gain_lo: f64,
    #[arg(long, default_value_t = 1.0)]
    pub color_gain_hi: f64,
    #[arg(long, default_value_t = 0.0)]
    pub color_bias_lo: f64,
    #[arg(long, default_value_t = 0.0)]
    pub color_bias_hi: f64,
    #[arg(long, default_value_t = 0.0)]
    pub cloud_lo: f64,
    #[arg(long, default_value_t = 0.0)]
    pub cloud_hi: f64,
}

impl SynthArgs {
    fn degradation(&self) -> DegradationSpec {
        let mut spec = DegradationSpec::default();
        spec.shift_max_px = self.shift_max_px;
        spec.blur_sigma = self.blur_sigma;
        spec.noise_sigma = self.noise_sigma;
        spec.color_gain = (self.color_gain_lo, self.color_gain_hi);
        spec.color_bias = (self.color_bias_lo, self.color_bias_hi);
        spec.cloud_fraction = (self.cloud_lo, self.cloud_hi);
        spec
    }
}

/// Write one scene's rasters and footprints; returns its manifest entry.
fn write_scene_files(
    scene_dir: &Path,
    rel_dir: &Path,
    scene: &Scene,
    patch: usize,
    stride: usize,
) -> Result<SceneEntry> {
    ensure_dir(scene_dir)?;
    let hr_rel = rel_dir.join("hr.bin");
    srfuse_core::io::write_raster(
        &scene_dir.join("hr.bin"),
        &scene.hr_reference,
        None,
        None,
        None,
    )?;
    let mut revisits = Vec::with_capacity(scene.revisits.len());
    for (k, rev) in scene.revisits.iter().enumerate() {
        let name = format!("lr_{k:02}.bin");
        srfuse_core::io::write_raster(
            &scene_dir.join(&name),
            &rev.raster,
            Some(&rev.cloud_mask),
            Some(rev.acquired_at.as_str()),
            None,
        )?;
        revisits.push(RevisitEntry {
            path: rel_dir.join(&name).to_string_lossy().into_owned(),
            acquired_at: rev.acquired_at.clone(),
            cloud_fraction: rev.cloud_fraction,
        });
    }
    let lr = &scene.revisits[0].raster;
    let labeled = split_scene((lr.height(), lr.width()), (patch, patch), (stride, stride))?;
    let mut splits: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (origin, split) in labeled {
        splits.entry(split.as_str().to_string()).or_default().push(origin);
    }
    // Footprint polygons: traced from the generator's building mask so the
    // ground truth survives the file round trip.
    let buildings_path = match scene.truth.as_ref().and_then(|t| t.building_mask.as_ref()) {
        Some(mask) => {
            let features: Vec<BuildingFeature> = polygonize(&mask.view(), 1)
                .into_iter()
                .enumerate()
                .map(|(id, inst)| BuildingFeature { id, rings: inst.rings })
                .collect();
            let rel = rel_dir.join("buildings.json");
            BuildingCollection { features }.save(&scene_dir.join("buildings.json"))?;
            Some(rel.to_string_lossy().into_owned())
        }
        None => None,
    };
    Ok(SceneEntry {
        scene_id: scene.scene_id.clone(),
        hr_path: hr_rel.to_string_lossy().into_owned(),
        revisits,
        splits,
        truth: scene.truth.clone(),
        buildings_path,
        terrain_tags: scene.terrain_tags.clone(),
    })
}

/// Generate a synthetic dataset; returns the manifest path.
pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    if args.scenes == 0 {
        return Err(Error::invalid("need at least one scene"));
    }
    let out = resolve_output(&args.out);
    ensure_dir(&out)?;
    let deg = args.degradation();
    let mut entries = Vec::with_capacity(args.scenes);
    for i in 0..args.scenes {
        let scene = generate_synthetic_scene(
            args.seed + i as u64,
            args.revisits,
            args.bands,
            (args.hr_size, args.hr_size),
            args.sr_factor,
            &deg,
        )?;
        let rel_dir = PathBuf::from("scenes").join(format!("{i:04}"));
        let scene_dir = out.join(&rel_dir);
        entries.push(write_scene_files(&scene_dir, &rel_dir, &scene, args.patch, args.stride)?);
    }
    let manifest = DatasetManifest {
        name: "synthetic".to_string(),
        sr_factor: args.sr_factor,
        patch: args.patch,
        stride: args.stride,
        scenes: entries,
    };
    let manifest_path = out.join("manifest.json");
    manifest.save(&manifest_path)?;
    let hash = srfuse_core::io::hash_dataset(&manifest_path)?;
    write_artifact(
        &out.join("synth_record.json"),
        args,
        args.seed,
        &hash,
        &serde_json::json!({ "scenes": args.scenes, "manifest": "manifest.json" }),
    )?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct IngestArgs {
    /// JSON file listing coregistration jobs.
    #[arg(long)]
    pub jobs: PathBuf,
    /// Directory the jobs' raster paths resolve against.
    #[arg(long)]
    pub input_dir: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub sr_factor: usize,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
}

/// One entry of the jobs file: a coregistration job plus an optional
/// footprint polygon file (relative to the input directory).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IngestJobSpec {
    #[serde(flatten)]
    pub job: IngestJob,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buildings_path: Option<String>,
}

/// Co-register raw rasters into a dataset; returns the manifest path.
pub fn cmd_ingest(args: &IngestArgs) -> Result<PathBuf> {
    let specs: Vec<IngestJobSpec> = read_json(&args.jobs)?;
    if specs.is_empty() {
        return Err(Error::invalid("jobs file lists no jobs"));
    }
    let client = LocalDirClient::new(&args.input_dir);
    let out = resolve_output(&args.out);
    ensure_dir(&out)?;
    let mut entries = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let scene = coregister(&client, &spec.job, args.sr_factor)?;
        let rel_dir = PathBuf::from("scenes").join(format!("{i:04}"));
        let scene_dir = out.join(&rel_dir);
        let mut entry =
            write_scene_files(&scene_dir, &rel_dir, &scene, args.patch, args.stride)?;
        if let Some(bp) = &spec.buildings_path {
            // Copy the footprints next to the scene so the dataset is
            // self-contained.
            let collection = BuildingCollection::load(&args.input_dir.join(bp))?;
            collection.save(&scene_dir.join("buildings.json"))?;
            entry.buildings_path =
                Some(rel_dir.join("buildings.json").to_string_lossy().into_owned());
        }
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        name: "ingested".to_string(),
        sr_factor: args.sr_factor,
        patch: args.patch,
        stride: args.stride,
        scenes: entries,
    };
    let manifest_path = out.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct SplitArgs {
    /// Input dataset manifest.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub patch: usize,
    #[arg(long)]
    pub stride: usize,
    /// Where to write the re-split manifest (must differ from the input).
    #[arg(long)]
    pub out: PathBuf,
}

/// Recompute patch splits at a new patch/stride; writes a new manifest and
/// leaves the input untouched.
pub fn cmd_split(args: &SplitArgs) -> Result<PathBuf> {
    let out = resolve_output(&args.out);
    if out == args.dataset {
        return Err(Error::invalid(
            "split writes a new manifest; point --out somewhere other than --dataset",
        ));
    }
    let mut manifest = DatasetManifest::load(&args.dataset)?;
    let base = args
        .dataset
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    for entry in &mut manifest.scenes {
        let first = entry
            .revisits
            .first()
            .ok_or_else(|| Error::schema(format!("scene {} has no revisits", entry.scene_id)))?;
        let header: RasterHeader =
            read_json(&base.join(&first.path).with_extension("json"))?;
        let labeled = split_scene(
            (header.height, header.width),
            (args.patch, args.patch),
            (args.stride, args.stride),
        )?;
        let mut splits: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        for (origin, split) in labeled {
            splits.entry(split.as_str().to_string()).or_default().push(origin);
        }
        entry.splits = splits;
    }
    manifest.patch = args.patch;
    manifest.stride = args.stride;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    manifest.save(&out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub report: TrainReport,
}

/// Train the configured model; persists the best-validation checkpoint and
/// the per-epoch log.  On divergence the last good checkpoint is still
/// written before the error propagates.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = open_dataset(Path::new(&cfg.dataset))?;
    let train = ds.load_patches(&[Split::Train])?;
    let val = ds.load_patches(&[Split::Val])?;
    let bands = ds.bands()?;
    let sr_factor = ds.manifest.sr_factor;

    let mut store = ParamStore::new();
    let nets = init_nets(&mut store, cfg, bands, sr_factor)?;
    let objective = nets.objective(cfg)?;

    let out = resolve_output(Path::new(&cfg.output_dir));
    ensure_dir(&out)?;
    let checkpoint_path = out.join("checkpoint.ckpt");
    let log_path = out.join("train_log.json");
    let ck_config = CheckpointConfig {
        experiment: cfg.clone(),
        bands,
        sr_factor,
        dataset_hash: ds.hash.clone(),
    };

    let outcome = run_training(&mut store, objective.as_ref(), &train, &val, &cfg.optimizer(), cfg.seed);
    match outcome {
        Ok(report) => {
            save_checkpoint(&checkpoint_path, &store, &ck_config, cfg.seed)?;
            write_artifact(&log_path, &ck_config, cfg.seed, &ds.hash, &report)?;
            Ok(TrainOutcome { checkpoint: checkpoint_path, log: log_path, report })
        }
        Err(err) => {
            // The trainer restores the best snapshot before reporting
            // divergence; keep it on disk for inspection.
            if err.kind() == "diverged" {
                save_checkpoint(&checkpoint_path, &store, &ck_config, cfg.seed)?;
            }
            Err(err)
        }
    }
}

// ---------------------------------------------------------------------------
// evaluate / spectrum / hist
// ---------------------------------------------------------------------------

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct EvalArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Single-image model checkpoint.
    #[arg(long)]
    pub sisr: Option<PathBuf>,
    /// Fusion model checkpoint (plain or consistency-trained).
    #[arg(long)]
    pub misr: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Checkpoints loaded for evaluation.
struct EvalModels {
    sisr: Option<LoadedModel>,
    misr: Option<LoadedModel>,
}

impl EvalModels {
    fn load(args: &EvalArgs) -> Result<Self> {
        let sisr = args.sisr.as_deref().map(load_model).transpose()?;
        if let Some(m) = &sisr {
            if !matches!(m.nets, ModelNets::Sisr(_)) {
                return Err(Error::invalid("--sisr expects a single-image model checkpoint"));
            }
        }
        let misr = args.misr.as_deref().map(load_model).transpose()?;
        if let Some(m) = &misr {
            if matches!(m.nets, ModelNets::Sisr(_)) {
                return Err(Error::invalid("--misr expects a fusion model checkpoint"));
            }
        }
        Ok(Self { sisr, misr })
    }

    /// The method list: bicubic always, model-backed methods when their
    /// checkpoints are present, and the HR reference row last.
    fn methods(&self) -> Vec<Method<'_>> {
        let mut methods = vec![Method::Bicubic];
        if let Some(m) = &self.sisr {
            if let ModelNets::Sisr(net) = &m.nets {
                methods.push(Method::Sisr(net, &m.store));
            }
        }
        if let Some(m) = &self.misr {
            match &m.nets {
                ModelNets::Misr { net, .. } => methods.push(Method::Misr(net, &m.store)),
                ModelNets::MisrConsistency { net, color_match, .. } => {
                    methods.push(Method::Misr(net, &m.store));
                    methods.push(Method::MisrColorMatched(net, color_match, &m.store));
                }
                ModelNets::Sisr(_) => {}
            }
        }
        methods.push(Method::HrOracle);
        methods
    }
}

/// Command configuration embedded in evaluation artifacts: the arguments
/// plus digests of the referenced checkpoints.
#[derive(Serialize)]
struct EvalConfigRecord<'a> {
    #[serde(flatten)]
    args: &'a EvalArgs,
    sisr_checkpoint_hash: Option<String>,
    misr_checkpoint_hash: Option<String>,
}

fn eval_config_record(args: &EvalArgs) -> Result<EvalConfigRecord<'_>> {
    Ok(EvalConfigRecord {
        args,
        sisr_checkpoint_hash: args.sisr.as_deref().map(hash_file).transpose()?,
        misr_checkpoint_hash: args.misr.as_deref().map(hash_file).transpose()?,
    })
}

/// Spectrum artifact payload: per-method curves plus the integrated power
/// above the cutoff frequency.
#[derive(Serialize, Deserialize)]
pub struct SpectrumArtifact {
    pub split: Split,
    pub cutoff: f64,
    pub methods: Vec<(String, SpectrumCurve)>,
    pub integrated_above_cutoff: Vec<(String, f64)>,
}

/// Histogram artifact payload: per-method band histograms, the raw LR
/// histogram, and L1 distances to the LR and HR references.
#[derive(Serialize, Deserialize)]
pub struct HistogramArtifact {
    pub split: Split,
    pub methods: Vec<(String, BandHistograms)>,
    pub lr: BandHistograms,
    pub l1_to_lr: Vec<(String, f64)>,
    pub l1_to_hr: Vec<(String, f64)>,
}

fn build_spectrum_artifact(
    samples: &[srfuse_core::data::PatchSample],
    split: Split,
    methods: &[Method<'_>],
) -> Result<SpectrumArtifact> {
    let curves = spectra_by_method(samples, split, methods)?;
    let integrated = curves
        .iter()
        .map(|(name, c)| (name.clone(), c.integrated_power_above(SPECTRUM_CUTOFF)))
        .collect();
    Ok(SpectrumArtifact {
        split,
        cutoff: SPECTRUM_CUTOFF,
        methods: curves,
        integrated_above_cutoff: integrated,
    })
}

fn build_histogram_artifact(
    samples: &[srfuse_core::data::PatchSample],
    split: Split,
    methods: &[Method<'_>],
) -> Result<HistogramArtifact> {
    let hists = histograms_by_method(samples, split, methods)?;
    let lr = lr_histograms(samples, split)?;
    let hr = hists.iter().find(|(name, _)| name == "hr").map(|(_, h)| h.clone());
    let mut l1_to_lr = Vec::new();
    let mut l1_to_hr = Vec::new();
    for (name, h) in &hists {
        l1_to_lr.push((name.clone(), histogram_l1(h, &lr)?));
        if let Some(hr) = &hr {
            l1_to_hr.push((name.clone(), histogram_l1(h, hr)?));
        }
    }
    Ok(HistogramArtifact { split, methods: hists, lr, l1_to_lr, l1_to_hr })
}

pub struct EvalOutcome {
    pub reports: Vec<MetricReport>,
    pub metrics_json: PathBuf,
    pub metrics_txt: PathBuf,
    pub spectrum_json: PathBuf,
    pub histograms_json: PathBuf,
}

/// Score every available method on one split and emit the metric table
/// plus spectrum and histogram artifacts.
pub fn cmd_evaluate(args: &EvalArgs) -> Result<EvalOutcome> {
    let split: Split = args.split.parse()?;
    let ds = open_dataset(&args.dataset)?;
    let samples = ds.load_patches(&[split])?;
    let models = EvalModels::load(args)?;
    let methods = models.methods();
    let reports = evaluate_methods(&samples, split, &methods)?;
    let spectrum = build_spectrum_artifact(&samples, split, &methods)?;
    let histograms = build_histogram_artifact(&samples, split, &methods)?;

    let out = resolve_output(&args.out);
    ensure_dir(&out)?;
    let record = eval_config_record(args)?;
    let config_hash = srfuse_core::io::config_hash(&record)?;
    let corpus = corpus_fingerprint(&samples);

    let metrics_json = out.join("metrics.json");
    write_artifact(&metrics_json, &record, 0, &ds.hash, &reports)?;
    let metrics_txt = out.join("metrics.txt");
    let mut table = text_header(&config_hash, 0, &ds.hash);
    table.push_str(&format!("# split corpus {corpus}\n"));
    table.push_str(&metric_table(&reports));
    atomic_write(&metrics_txt, table.as_bytes())?;
    let spectrum_json = out.join("spectrum.json");
    write_artifact(&spectrum_json, &record, 0, &ds.hash, &spectrum)?;
    let histograms_json = out.join("histograms.json");
    write_artifact(&histograms_json, &record, 0, &ds.hash, &histograms)?;
    Ok(EvalOutcome { reports, metrics_json, metrics_txt, spectrum_json, histograms_json })
}

/// Emit only the spectrum artifact.
pub fn cmd_spectrum(args: &EvalArgs) -> Result<PathBuf> {
    let split: Split = args.split.parse()?;
    let ds = open_dataset(&args.dataset)?;
    let samples = ds.load_patches(&[split])?;
    let models = EvalModels::load(args)?;
    let spectrum = build_spectrum_artifact(&samples, split, &models.methods())?;
    let out = resolve_output(&args.out);
    ensure_dir(&out)?;
    let record = eval_config_record(args)?;
    let path = out.join("spectrum.json");
    write_artifact(&path, &record, 0, &ds.hash, &spectrum)?;
    Ok(path)
}

/// Emit only the histogram artifact.
pub fn cmd_hist(args: &EvalArgs) -> Result<PathBuf> {
    let split: Split = args.split.parse()?;
    let ds = open_dataset(&args.dataset)?;
    let samples = ds.load_patches(&[split])?;
    let models = EvalModels::load(args)?;
    let histograms = build_histogram_artifact(&samples, split, &models.methods())?;
    let out = resolve_output(&args.out);
    ensure_dir(&out)?;
    let record = eval_config_record(args)?;
    let path = out.join("histograms.json");
    write_artifact(&path, &record, 0, &ds.hash, &histograms)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// downstream
// ---------------------------------------------------------------------------

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct DownstreamArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Single-image model checkpoint (for the sisr_best1 configuration).
    #[arg(long)]
    pub sisr: Option<PathBuf>,
    /// Fusion model checkpoint (for the misr_all configuration).
    #[arg(long)]
    pub misr: Option<PathBuf>,
    /// Comma-separated input configurations; all five by default.
    #[arg(long)]
    pub kinds: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub min_area: usize,
    #[arg(long, default_value_t = 0.25)]
    pub iou_threshold: f64,
    #[arg(long, default_value_t = 0.0007)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 2)]
    pub plateau_patience: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay_factor: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl DownstreamArgs {
    fn downstream_config(&self) -> Result<DownstreamConfig> {
        let mut cfg = DownstreamConfig::default();
        if let Some(list) = &self.kinds {
            cfg.kinds = list
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<Vec<_>>>()?;
        }
        cfg.hidden = self.hidden;
        cfg.min_area = self.min_area;
        cfg.iou_threshold = self.iou_threshold;
        cfg.seg = SegTrainConfig {
            learning_rate: self.learning_rate,
            max_epochs: self.epochs,
            plateau_patience: self.plateau_patience,
            lr_decay_factor: self.lr_decay_factor,
            batch_size: self.batch_size,
            seed: self.seed,
        };
        Ok(cfg)
    }
}

pub struct DownstreamOutcome {
    pub report: DownstreamReport,
    pub json: PathBuf,
    pub txt: PathBuf,
}

/// Train one segmentation backbone per input configuration and score
/// semantic IoU plus instance precision/recall/F1 on the test regions.
pub fn cmd_downstream(args: &DownstreamArgs) -> Result<DownstreamOutcome> {
    let ds = open_dataset(&args.dataset)?;
    let (scenes, masks) = ds.load_scenes_with_footprints()?;
    let models = EvalModels::load(&EvalArgs {
        dataset: args.dataset.clone(),
        split: "test".to_string(),
        sisr: args.sisr.clone(),
        misr: args.misr.clone(),
        out: args.out.clone(),
    })?;
    let mut sr_models = srfuse_core::building::SrModels::default();
    if let Some(m) = &models.sisr {
        if let ModelNets::Sisr(net) = &m.nets {
            sr_models.sisr = Some((net, &m.store));
        }
    }
    if let Some(m) = &models.misr {
        match &m.nets {
            ModelNets::Misr { net, .. } | ModelNets::MisrConsistency { net, .. } => {
                sr_models.misr = Some((net, &m.store));
            }
            ModelNets::Sisr(_) => {}
        }
    }
    let cfg = args.downstream_config()?;
    let report = run_downstream(&scenes, &masks, &sr_models, &cfg)?;

    let out = resolve_output(&args.out);
    ensure_dir(&out)?;
    let config_hash = srfuse_core::io::config_hash(args)?;
    let json = out.join("downstream.json");
    write_artifact(&json, args, args.seed, &ds.hash, &report)?;
    let txt = out.join("downstream.txt");
    let mut text = text_header(&config_hash, args.seed, &ds.hash);
    text.push_str(&downstream_table(&report));
    atomic_write(&txt, text.as_bytes())?;
    Ok(DownstreamOutcome { report, json, txt })
}

// ---------------------------------------------------------------------------
// plots
// ---------------------------------------------------------------------------

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct PlotsArgs {
    /// Directory holding previously emitted JSON artifacts.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory the SVG files are written to.
    #[arg(long)]
    pub out: PathBuf,
}

/// Render SVG charts from the JSON artifacts found in a directory; returns
/// the written paths.
pub fn cmd_plots(args: &PlotsArgs) -> Result<Vec<PathBuf>> {
    let out = resolve_output(&args.out);
    ensure_dir(&out)?;
    let mut written = Vec::new();

    let spectrum_path = args.input.join("spectrum.json");
    if spectrum_path.exists() {
        let artifact: Artifact<SpectrumArtifact> = read_json(&spectrum_path)?;
        let series_data: Vec<(String, Vec<(f64, f64)>)> = artifact
            .payload
            .methods
            .iter()
            .map(|(name, c)| {
                (
                    name.clone(),
                    c.radial_freq.iter().copied().zip(c.power_db.iter().copied()).collect(),
                )
            })
            .collect();
        let series: Vec<Series<'_>> = series_data
            .iter()
            .map(|(name, pts)| Series { label: name, points: pts })
            .collect();
        let svg = line_chart(
            "radially averaged power spectrum",
            "cycles/pixel",
            "power (dB)",
            &series,
        )?;
        let path = out.join("spectrum.svg");
        atomic_write(&path, svg.as_bytes())?;
        written.push(path);
    }

    let hist_path = args.input.join("histograms.json");
    if hist_path.exists() {
        let artifact: Artifact<HistogramArtifact> = read_json(&hist_path)?;
        let bands = artifact.payload.lr.histograms.len();
        for b in 0..bands {
            let mut series_data: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            let to_points = |h: &BandHistograms, band: usize| -> Vec<(f64, f64)> {
                let (lo, hi) = h.range;
                let step = (hi - lo) / h.bins as f64;
                h.histograms[band]
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| (lo + (i as f64 + 0.5) * step, m))
                    .collect()
            };
            for (name, h) in &artifact.payload.methods {
                series_data.push((name.clone(), to_points(h, b)));
            }
            series_data.push(("lr".to_string(), to_points(&artifact.payload.lr, b)));
            let series: Vec<Series<'_>> = series_data
                .iter()
                .map(|(name, pts)| Series { label: name, points: pts })
                .collect();
            let svg = line_chart(
                &format!("band {b} histogram"),
                "reflectance",
                "mass",
                &series,
            )?;
            let path = out.join(format!("histograms_band{b}.svg"));
            atomic_write(&path, svg.as_bytes())?;
            written.push(path);
        }
    }

    let log_path = args.input.join("train_log.json");
    if log_path.exists() {
        let artifact: Artifact<TrainReport> = read_json(&log_path)?;
        let train: Vec<(f64, f64)> = artifact
            .payload
            .log
            .iter()
            .map(|e| (e.epoch as f64, e.train_loss))
            .collect();
        let val: Vec<(f64, f64)> =
            artifact.payload.log.iter().map(|e| (e.epoch as f64, e.val_loss)).collect();
        let svg = line_chart(
            "training and validation loss",
            "epoch",
            "loss",
            &[Series { label: "train", points: &train }, Series { label: "val", points: &val }],
        )?;
        let path = out.join("train_loss.svg");
        atomic_write(&path, svg.as_bytes())?;
        written.push(path);

        let psnr: Vec<(f64, f64)> =
            artifact.payload.log.iter().map(|e| (e.epoch as f64, e.val_psnr)).collect();
        let svg = line_chart("validation PSNR", "epoch", "dB", &[Series {
            label: "val",
            points: &psnr,
        }])?;
        let path = out.join("val_psnr.svg");
        atomic_write(&path, svg.as_bytes())?;
        written.push(path);
    }

    if written.is_empty() {
        return Err(Error::invalid(format!(
            "no plottable artifacts (spectrum.json, histograms.json, train_log.json) in {}",
            args.input.display()
        )));
    }
    Ok(written)
}
