//! Experiment configuration, the single-round collaborate/fuse/detect/score
//! pipeline, parameter sweeps, and result files.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::confidence::{afm_fuse, generate_confidence, ConfidenceMap, HeadParams, Threshold};
use crate::error::{Error, Result};
use crate::eval::{average_precision, decode_detections, nms, Detection};
use crate::fusion::{fuse_self_attention, stack_sources, FusionMode};
use crate::grid::{box7d_to_bev, Box7D, FeatureMap, GridSpec, Pose2D, QuadBEV};
use crate::protocol::{
    comm_volume_log2, decode_message, encode_message, payload_bytes, sparsify, warp_to_ego, MessageHeader, MessageKind,
    HEADER_BYTES,
};
use crate::scene::{encode_observation, generate_scene, EncoderParams, ObjectSpec, Region, ScenarioConfig, Scene};
use crate::selection::{
    budget_select, build_prior_map, foreground_purity, gtfs_features, topk_select, PriorMap, SelectionMatrix,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_FILE: &str = "results.csv";
pub const JSON_FILE: &str = "results.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "no_fusion")]
    NoFusion,
    #[serde(rename = "topk")]
    TopK,
    #[serde(rename = "gtfs")]
    Gtfs,
    #[serde(rename = "fast2comm")]
    Fast2comm,
    #[serde(rename = "fast2comm_test")]
    Fast2commTest,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::NoFusion,
        Strategy::TopK,
        Strategy::Gtfs,
        Strategy::Fast2comm,
        Strategy::Fast2commTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NoFusion => "no_fusion",
            Strategy::TopK => "topk",
            Strategy::Gtfs => "gtfs",
            Strategy::Fast2comm => "fast2comm",
            Strategy::Fast2commTest => "fast2comm_test",
        }
    }

    pub fn sends_m(self) -> bool {
        matches!(self, Strategy::TopK | Strategy::Fast2comm | Strategy::Fast2commTest)
    }

    pub fn sends_g(self) -> bool {
        matches!(self, Strategy::Gtfs | Strategy::Fast2comm)
    }

    pub fn mode(self) -> FusionMode {
        match self {
            Strategy::Gtfs | Strategy::Fast2comm => FusionMode::TrainLike,
            _ => FusionMode::TestLike,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-sender payload byte budget. Written as an integer or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Budget {
    Bytes(u64),
    Unlimited,
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Bytes(b) => write!(f, "{b}"),
            Budget::Unlimited => f.write_str("inf"),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Budget::Bytes(b) => s.serialize_u64(*b),
            Budget::Unlimited => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Bytes(u64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Bytes(b) => Ok(Budget::Bytes(b)),
            Repr::Word(w) if w == "inf" => Ok(Budget::Unlimited),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "budget must be a byte count or \"inf\", got {w:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObjectsFile {
    Count(usize),
    Boxes(Vec<Box7D>),
}

/// Scenario section of the config file. Pose noise comes from the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioFile {
    pub n_agents: usize,
    pub objects: ObjectsFile,
    pub spawn_region: Region,
    pub object_region: Region,
    pub yaw_noise_scale: f64,
    pub grid: GridSpec,
    pub channels: usize,
    pub encoder: EncoderParams,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        let d = ScenarioConfig::default_occlusion();
        ScenarioFile {
            n_agents: d.n_agents,
            objects: match d.objects {
                ObjectSpec::Count(n) => ObjectsFile::Count(n),
                ObjectSpec::Explicit(b) => ObjectsFile::Boxes(b),
            },
            spawn_region: d.spawn_region,
            object_region: d.object_region,
            yaw_noise_scale: d.yaw_noise_scale,
            grid: d.grid,
            channels: d.channels,
            encoder: d.encoder,
        }
    }
}

impl ScenarioFile {
    pub fn to_config(&self, sigma_e: f64) -> ScenarioConfig {
        ScenarioConfig {
            n_agents: self.n_agents,
            objects: match &self.objects {
                ObjectsFile::Count(n) => ObjectSpec::Count(*n),
                ObjectsFile::Boxes(b) => ObjectSpec::Explicit(b.clone()),
            },
            spawn_region: self.spawn_region,
            object_region: self.object_region,
            sigma_e,
            yaw_noise_scale: self.yaw_noise_scale,
            grid: self.grid,
            channels: self.channels,
            encoder: self.encoder,
        }
    }
}

/// Classification head: foreground logit `scale * channel0 + bias`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadFile {
    pub scale: f64,
    pub bias: f64,
}

impl Default for HeadFile {
    fn default() -> Self {
        HeadFile { scale: 4.0, bias: -4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionParams {
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            score_thresh: 0.5,
            nms_iou: 0.5,
        }
    }
}

fn default_threshold() -> Threshold {
    Threshold::new(0.5).expect("static threshold")
}

fn default_topk() -> usize {
    1024
}

fn default_budgets() -> Vec<Budget> {
    vec![Budget::Unlimited]
}

fn default_sigmas() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub scenario: ScenarioFile,
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_threshold")]
    pub threshold: Threshold,
    #[serde(default = "default_topk")]
    pub topk_k: usize,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<Budget>,
    #[serde(default = "default_sigmas")]
    pub sigma_e: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub head: HeadFile,
    #[serde(default)]
    pub detection: DetectionParams,
}

impl ExperimentConfig {
    /// A config on the default scenario with default settings.
    pub fn with_defaults(strategies: Vec<Strategy>, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            scenario: ScenarioFile::default(),
            strategies,
            threshold: default_threshold(),
            topk_k: default_topk(),
            budgets: default_budgets(),
            sigma_e: default_sigmas(),
            seeds,
            output: default_output(),
            head: HeadFile::default(),
            detection: DetectionParams::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("`strategies` must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must not be empty".into()));
        }
        if self.budgets.is_empty() {
            return Err(Error::Config("`budgets` must not be empty".into()));
        }
        if self.sigma_e.is_empty() {
            return Err(Error::Config("`sigma_e` must not be empty".into()));
        }
        for (name, list_len, dedup_len) in [
            ("strategies", self.strategies.len(), {
                let mut v = self.strategies.clone();
                v.sort();
                v.dedup();
                v.len()
            }),
            ("seeds", self.seeds.len(), {
                let mut v = self.seeds.clone();
                v.sort();
                v.dedup();
                v.len()
            }),
            ("budgets", self.budgets.len(), {
                let mut v = self.budgets.clone();
                v.sort();
                v.dedup();
                v.len()
            }),
        ] {
            if list_len != dedup_len {
                return Err(Error::Config(format!("`{name}` contains duplicates")));
            }
        }
        for &s in &self.sigma_e {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "sigma_e values must be finite and >= 0, got {s}"
                )));
            }
        }
        if !(self.head.scale.is_finite() && self.head.bias.is_finite()) {
            return Err(Error::Config("head scale and bias must be finite".into()));
        }
        let d = self.detection;
        if !(0.0..=1.0).contains(&d.score_thresh) || !(0.0..=1.0).contains(&d.nms_iou) {
            return Err(Error::Config("detection thresholds must lie in [0, 1]".into()));
        }
        if self.scenario.n_agents > u8::MAX as usize {
            return Err(Error::Config("n_agents must fit sender ids 0..=255".into()));
        }
        self.scenario.to_config(0.0).validate()
    }

    pub fn head_params(&self) -> HeadParams {
        HeadParams::channel0(self.scenario.channels, self.head.scale, self.head.bias)
    }

    /// Bytes per transmitted cell: two 16-bit indices and C 32-bit values.
    pub fn bytes_per_cell(&self) -> u64 {
        4 + 4 * self.scenario.channels as u64
    }
}

/// One collaborator's state before selection.
#[derive(Debug, Clone)]
pub struct SenderState {
    pub agent: u8,
    pub estimated_pose: Pose2D,
    pub features: FeatureMap,
    /// Object footprints in the sender's true frame.
    pub footprints: Vec<QuadBEV>,
    pub prior: PriorMap,
    /// Confidence from the sender's own features.
    pub plain: ConfidenceMap,
    /// Confidence from the sender's features attended with its box-prior features.
    pub with_prior: ConfidenceMap,
}

/// Everything about one `(seed, sigma_e)` scene that does not depend on
/// strategy or budget.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub seed: u64,
    pub sigma_e: f64,
    pub scene: Scene,
    pub spec: GridSpec,
    pub ego_pose: Pose2D,
    pub ego_features: FeatureMap,
    pub senders: Vec<SenderState>,
    /// Ground-truth footprints in the ego frame whose centers lie on the ego grid.
    pub ground_truth: Vec<QuadBEV>,
}

pub fn prepare_scene(cfg: &ExperimentConfig, seed: u64, sigma_e: f64) -> Result<PreparedScene> {
    let scenario = cfg.scenario.to_config(sigma_e);
    let spec = scenario.grid;
    let head = cfg.head_params();
    let scene = generate_scene(&scenario, seed)?;
    let ego = encode_observation(&scene, 0, &scenario)?;
    let ego_pose = scene.estimated_poses[0];

    let mut senders = Vec::with_capacity(scene.n_agents().saturating_sub(1));
    for agent in 1..scene.n_agents() {
        let obs = encode_observation(&scene, agent, &scenario)?;
        let est = scene.estimated_poses[agent];
        let to_est = est.inverse();
        let boxes: Vec<_> = obs.visible_boxes.iter().map(|b| box7d_to_bev(b, &to_est).1).collect();
        let prior = build_prior_map(&boxes, &spec);
        let g = gtfs_features(&prior, &obs.features)?;
        let plain = generate_confidence(&obs.features, &head, cfg.threshold)?;
        let with_prior = generate_confidence(&afm_fuse(&[obs.features.clone(), g], 0)?, &head, cfg.threshold)?;
        senders.push(SenderState {
            agent: agent as u8,
            estimated_pose: est,
            features: obs.features,
            footprints: scene.footprints_in_agent_frame(agent),
            prior,
            plain,
            with_prior,
        });
    }

    let ground_truth = scene
        .footprints_in_agent_frame(0)
        .into_iter()
        .filter(|q| spec.contains(q.centroid()))
        .collect();

    Ok(PreparedScene {
        seed,
        sigma_e,
        spec,
        ego_pose,
        ego_features: ego.features,
        senders,
        ground_truth,
        scene,
    })
}

/// The M and G selections a sender makes under a strategy and budget. M is
/// filled first; G carries prior cells not already in M, within what is left.
pub fn sender_selections(
    cfg: &ExperimentConfig,
    sender: &SenderState,
    strategy: Strategy,
    budget: Budget,
) -> Result<Vec<(MessageKind, SelectionMatrix)>> {
    let conf = if strategy == Strategy::Fast2comm {
        &sender.with_prior
    } else {
        &sender.plain
    };
    let bpc = cfg.bytes_per_cell();
    let mut remaining = budget;
    let mut take = |sel: SelectionMatrix| -> Result<SelectionMatrix> {
        match remaining {
            Budget::Unlimited => Ok(sel),
            Budget::Bytes(b) => {
                let kept = budget_select(&sel, &conf.scores, b, bpc)?;
                remaining = Budget::Bytes(b - kept.count() as u64 * bpc);
                Ok(kept)
            }
        }
    };
    let mut out = Vec::new();
    if strategy.sends_m() {
        let k = cfg.topk_k.min(conf.binary.count());
        out.push((MessageKind::M, take(topk_select(&conf.scores, k))?));
    }
    if strategy.sends_g() {
        let mut prior = sender.prior.clone();
        if let Some((_, m)) = out.first() {
            for (p, &in_m) in prior.mask.as_mut_slice().iter_mut().zip(m.mask().as_slice()) {
                *p &= !in_m;
            }
        }
        out.push((MessageKind::G, take(prior.into_selection())?));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub sigma_e: f64,
    pub budget_bytes: Budget,
    pub total_bytes_sent: u64,
    pub payload_bytes: u64,
    pub header_bytes: u64,
    pub comm_volume_log2: f64,
    pub ap50: f64,
    pub ap70: f64,
    pub purity: Option<f64>,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub fused: FeatureMap,
    pub detections: Vec<Detection>,
    /// Encoded frames in send order.
    pub frames: Vec<Vec<u8>>,
    pub row: ResultRow,
}

/// Runs the exchange, fusion, detection, and scoring for one strategy and budget.
pub fn execute(
    cfg: &ExperimentConfig,
    prep: &PreparedScene,
    strategy: Strategy,
    budget: Budget,
) -> Result<PipelineOutput> {
    let start = Instant::now();
    let spec = prep.spec;
    let mut frames = Vec::new();
    let mut warped = Vec::new();
    let (mut payload, mut header) = (0u64, 0u64);
    let (mut inside, mut shared) = (0.0f64, 0usize);

    if strategy != Strategy::NoFusion {
        for s in &prep.senders {
            for (kind, sel) in sender_selections(cfg, s, strategy, budget)? {
                if let Some(p) = foreground_purity(sel.mask(), &spec, &s.footprints) {
                    inside += p * sel.count() as f64;
                    shared += sel.count();
                }
                let hdr = MessageHeader {
                    sender: s.agent,
                    round: 0,
                    kind,
                    pose: s.estimated_pose,
                };
                let msg = sparsify(&s.features, &sel, hdr)?;
                let bytes = encode_message(&msg);
                payload += payload_bytes(&msg) as u64;
                header += HEADER_BYTES as u64;
                let received = decode_message(&bytes, &spec)?;
                warped.push(warp_to_ego(&received, &prep.ego_pose, &spec));
                frames.push(bytes);
            }
        }
    }

    let fused = fuse_self_attention(&stack_sources(&prep.ego_features, &warped, strategy.mode())?);
    let raw = decode_detections(&fused, &cfg.head_params(), cfg.detection.score_thresh)?;
    let detections = nms(&raw, cfg.detection.nms_iou);
    let ap50 = average_precision(&detections, &prep.ground_truth, 0.5).ap;
    let ap70 = average_precision(&detections, &prep.ground_truth, 0.7).ap;
    let total = payload + header;

    let row = ResultRow {
        strategy,
        seed: prep.seed,
        sigma_e: prep.sigma_e,
        budget_bytes: budget,
        total_bytes_sent: total,
        payload_bytes: payload,
        header_bytes: header,
        comm_volume_log2: comm_volume_log2(total),
        ap50,
        ap70,
        purity: (shared > 0).then(|| inside / shared as f64),
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(PipelineOutput {
        fused,
        detections,
        frames,
        row,
    })
}

fn with_context<T>(r: Result<T>, strategy: &str, seed: u64, sigma_e: f64) -> Result<T> {
    r.map_err(|e| Error::Run {
        strategy: strategy.to_string(),
        seed,
        sigma_e,
        source: Box::new(e),
    })
}

/// One end-to-end run.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    seed: u64,
    sigma_e: f64,
    budget: Budget,
) -> Result<ResultRow> {
    let prep = with_context(prepare_scene(cfg, seed, sigma_e), strategy.name(), seed, sigma_e)?;
    with_context(execute(cfg, &prep, strategy, budget), strategy.name(), seed, sigma_e).map(|o| o.row)
}

/// Position of a row in canonical order: (strategy, seed, sigma_e, budget) indices.
type RowKey = (usize, usize, usize, usize);

/// Every `strategy x seed x sigma_e x budget` row, in config order with the
/// strategy varying slowest.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let scenes: Vec<(usize, usize)> = (0..cfg.seeds.len())
        .flat_map(|i| (0..cfg.sigma_e.len()).map(move |j| (i, j)))
        .collect();
    let per_scene: Vec<Vec<(RowKey, ResultRow)>> = scenes
        .par_iter()
        .map(|&(i, j)| {
            let (seed, sigma) = (cfg.seeds[i], cfg.sigma_e[j]);
            let prep = with_context(prepare_scene(cfg, seed, sigma), "prepare", seed, sigma)?;
            let mut rows = Vec::with_capacity(cfg.strategies.len() * cfg.budgets.len());
            for (si, &strategy) in cfg.strategies.iter().enumerate() {
                for (bi, &budget) in cfg.budgets.iter().enumerate() {
                    let out = with_context(execute(cfg, &prep, strategy, budget), strategy.name(), seed, sigma)?;
                    rows.push(((si, i, j, bi), out.row));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<_> = per_scene.into_iter().flatten().collect();
    rows.sort_by_key(|(k, _)| *k);
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Creates the output directory and confirms a file can be written there.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    Ok(())
}

#[derive(Serialize)]
struct ResultDocument<'a> {
    schema_version: u32,
    config: &'a ExperimentConfig,
    rows: &'a [ResultRow],
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

/// Writes `results.csv` and `results.json` into `dir`, each replaced atomically.
pub fn write_results(cfg: &ExperimentConfig, rows: &[ResultRow], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    ensure_writable(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    let csv_bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    let doc = ResultDocument {
        schema_version: SCHEMA_VERSION,
        config: cfg,
        rows,
    };
    let mut json = serde_json::to_vec_pretty(&doc).map_err(|e| Error::Config(format!("json: {e}")))?;
    json.push(b'\n');
    let (csv_path, json_path) = (dir.join(CSV_FILE), dir.join(JSON_FILE));
    write_atomic(&csv_path, &csv_bytes)?;
    write_atomic(&json_path, &json)?;
    Ok((csv_path, json_path))
}

/// Per sender with a non-empty prior map: purity of the box-prior selection
/// and of a top-k selection of the same size, as `(gtfs, topk, cells)`.
pub fn selection_purity(prep: &PreparedScene) -> Vec<(f64, f64, usize)> {
    prep.senders
        .iter()
        .filter_map(|s| {
            let n = s.prior.mask.count();
            let g = foreground_purity(&s.prior.mask, &prep.spec, &s.footprints)?;
            let t = foreground_purity(topk_select(&s.plain.scores, n).mask(), &prep.spec, &s.footprints)?;
            Some((g, t, n))
        })
        .collect()
}
