//! Experiment orchestration: run configuration, on-disk artifacts and the
//! stages behind each CLI command. Every stage writes its outputs into the
//! run directory together with a manifest recording the configuration,
//! output checksums and timing.

use crate::actor::{train_actor, write_actor_log, ActorExample, ActorTrainConfig, ActorTrainOutcome};
use crate::agent::{generate_message, ActorAgent, SlotContent};
use crate::analysis::{
    aggregate_p50, delta_ce_sweep, latency_bench, length_sweep, parallelism_profile, truncate_len, write_latency_csv,
    write_profile_csv, write_sweep_csv, LatencyStats, ParallelismProfile, SweepResult,
};
use crate::channel::{extract_latents, AdapterParams, LatentMessage, ADAPTER_HEADS};
use crate::checkpoint::{load_into, Checkpoint};
use crate::compression::{
    latent_rollout, train_reasoner, write_compression_log, CompressionConfig, CompressionExample, CompressionLogRow, ProjBridge,
    ReasonerTrainConfig,
};
use crate::data::{actor_example, actor_text_example, model_config, sender_example, teacher_message};
use crate::error::{Error, Result};
use crate::lm::{train_lm, LmTrainConfig};
use crate::minihouse::episode::sender_prompt;
use crate::minihouse::tasks::{read_jsonl, teacher_trace, write_jsonl};
use crate::minihouse::vocab::END;
use crate::minihouse::{evaluate_suite, generate_tasks, SuiteReport, TaskCounts, TaskInstance, TeacherTrace, Vocab, WorldKinds};
use crate::model::ModelParams;
use crate::perturb::{apply_perturbation, PerturbationKind, PerturbationSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

/// Environment variable that overrides the root directory for run outputs.
pub const OUTPUT_ROOT_ENV: &str = "INTERLAT_OUTPUT_ROOT";

/// Longest plan the sender may decode at evaluation time.
pub const MAX_PLAN_TOKENS: usize = 96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Episodes per split per seed; seed s uses the s-th disjoint block of
    /// each evaluation pool.
    pub tasks_per_split: usize,
    pub seeds: Vec<u64>,
    pub payloads: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks_per_split: 100,
            seeds: vec![0, 1, 2],
            payloads: [
                "matched",
                "text",
                "none",
                "CrossTask",
                "CovNoise-0.5x",
                "CovNoise-1.0x",
                "WhiteNoise",
                "CovGauss-0mu",
                "CovGauss-mu",
                "RandomRot",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub r_grid: Vec<f64>,
    /// Instances (from the seen pool) used for CE sweeps and profiles.
    pub examples: usize,
    /// Compression length used for the parallelism profile and latency rows.
    pub k: usize,
    pub latency_reps: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { r_grid: (0..=20).map(|i| i as f64 / 20.0).collect(), examples: 100, k: 8, latency_reps: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub tasks: TaskCounts,
    /// Language-model pretraining of the shared base (sender and receiver
    /// roles); the base serves as teacher and initializes actor and reasoner.
    pub pretrain: LmTrainConfig,
    /// Copies of each sender (task -> plan) example in the pretraining mix;
    /// the receiver transcript appears once.
    pub sender_repeat: usize,
    /// Training tasks turned into actor examples (a prefix of the pool).
    pub actor_examples: usize,
    pub actor: ActorTrainConfig,
    pub compression: CompressionConfig,
    pub reasoner: ReasonerTrainConfig,
    pub reasoner_examples: usize,
    pub k_grid: Vec<usize>,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            tasks: TaskCounts::default(),
            pretrain: LmTrainConfig::default(),
            sender_repeat: 2,
            actor_examples: 2000,
            actor: ActorTrainConfig::default(),
            compression: CompressionConfig::default(),
            reasoner: ReasonerTrainConfig::default(),
            reasoner_examples: 10000,
            k_grid: crate::compression::K_GRID.to_vec(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.actor.weights.validate()?;
        self.compression.validate()?;
        if self.sender_repeat == 0 {
            return Err(Error::Config("sender_repeat must be at least 1".into()));
        }
        if self.actor_examples == 0 || self.actor_examples > self.tasks.train {
            return Err(Error::Config(format!("actor_examples must be in 1..={}", self.tasks.train)));
        }
        if self.reasoner_examples == 0 || self.reasoner_examples > self.tasks.train {
            return Err(Error::Config(format!("reasoner_examples must be in 1..={}", self.tasks.train)));
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return Err(Error::Config("k_grid must be non-empty with positive lengths".into()));
        }
        let need = self.eval.tasks_per_split * self.eval.seeds.len();
        if need > self.tasks.seen_eval || need > self.tasks.unseen_eval {
            return Err(Error::Config(format!("{need} evaluation tasks per split needed, pools hold fewer")));
        }
        for p in &self.eval.payloads {
            p.parse::<PayloadSpec>()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("run config serializes")))
    }
}

/// What the actor receives at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PayloadSpec {
    /// The sender's own latent message for the task.
    Matched,
    Text,
    None,
    Perturbed(PerturbationKind),
    /// A K-step rollout of the trained reasoner.
    Reasoner(usize),
}

impl fmt::Display for PayloadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PayloadSpec::Matched => f.write_str("matched"),
            PayloadSpec::Text => f.write_str("text"),
            PayloadSpec::None => f.write_str("none"),
            PayloadSpec::Perturbed(k) => write!(f, "{k}"),
            PayloadSpec::Reasoner(k) => write!(f, "reasoner-K{k}"),
        }
    }
}

impl FromStr for PayloadSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched" | "latent" => Ok(PayloadSpec::Matched),
            "text" => Ok(PayloadSpec::Text),
            "none" => Ok(PayloadSpec::None),
            _ => {
                if let Some(k) = s.strip_prefix("reasoner-K").and_then(|k| k.parse().ok()) {
                    return Ok(PayloadSpec::Reasoner(k));
                }
                s.parse::<PerturbationKind>().map(PayloadSpec::Perturbed).map_err(|_| {
                    Error::Input(format!(
                        "unknown payload {s:?}; valid: matched, text, none, reasoner-K<k>, CrossTask, \
                         CovNoise-<λ>x, WhiteNoise, CovGauss-0mu, CovGauss-mu, RandomRot"
                    ))
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub outputs: Vec<OutputRecord>,
    pub generator_tags: Vec<String>,
    pub seconds: f64,
    pub summary: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Artifacts of one run directory.
pub struct Workspace {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub kinds: WorldKinds,
    pub vocab: Vocab,
    /// Skip stages whose manifest matches the current configuration.
    pub reuse: bool,
    pub verbose: bool,
}

/// Loaded evaluation pool with teacher traces.
pub struct Dataset {
    pub train: Vec<TaskInstance>,
    pub validation: Vec<TaskInstance>,
    pub seen_eval: Vec<TaskInstance>,
    pub unseen_eval: Vec<TaskInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub payload: String,
    pub split: String,
    pub seed: u64,
    pub episodes: usize,
    pub success_rate: f64,
    pub steps_success: Option<f64>,
    pub steps_all: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub payload: String,
    pub split: String,
    pub success_mean: f64,
    pub success_std: f64,
    pub steps_success_mean: Option<f64>,
    pub steps_all_mean: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn summarize(rows: &[EvalRow]) -> Vec<EvalSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.payload.clone(), r.split.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(payload, split)| {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.payload == payload && r.split == split).collect();
            let (success_mean, success_std) = mean_std(&sel.iter().map(|r| r.success_rate).collect::<Vec<_>>());
            let ss: Vec<f64> = sel.iter().filter_map(|r| r.steps_success).collect();
            let steps_success_mean = (!ss.is_empty()).then(|| mean_std(&ss).0);
            let steps_all_mean = mean_std(&sel.iter().map(|r| r.steps_all).collect::<Vec<_>>()).0;
            EvalSummary { payload, split, success_mean, success_std, steps_success_mean, steps_all_mean }
        })
        .collect()
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl Workspace {
    pub fn new(cfg: RunConfig, dir: PathBuf) -> Result<Self> {
        cfg.validate()?;
        let kinds = WorldKinds::default();
        let vocab = Vocab::new(&kinds)?;
        fs::create_dir_all(&dir)?;
        Ok(Self { cfg, dir, kinds, vocab, reuse: false, verbose: false })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn manifest_path(&self, command: &str) -> PathBuf {
        self.path(&format!("manifest-{command}.json"))
    }

    /// True when `command` already ran with this exact configuration and all
    /// of its outputs are intact.
    /// Hash of the configuration sections a stage depends on, so changing
    /// the settings of a later stage leaves earlier stages reusable.
    pub fn stage_hash(&self, command: &str) -> String {
        let c = &self.cfg;
        let level = match command {
            "gen-data" => 0,
            "pretrain" => 1,
            "train-actor" => 2,
            s if s.starts_with("train-reasoner") => 3,
            _ => return c.hash(),
        };
        let mut v = serde_json::json!({ "seed": c.seed, "tasks": c.tasks });
        if level >= 1 {
            v["pretrain"] = serde_json::json!(c.pretrain);
            v["sender_repeat"] = c.sender_repeat.into();
        }
        if level >= 2 {
            v["actor_examples"] = c.actor_examples.into();
            v["actor"] = serde_json::json!(c.actor);
        }
        if level >= 3 {
            v["compression"] = serde_json::json!(c.compression);
            v["reasoner"] = serde_json::json!(c.reasoner);
            v["reasoner_examples"] = c.reasoner_examples.into();
        }
        hex::encode(Sha256::digest(v.to_string()))
    }

    pub fn is_fresh(&self, command: &str) -> bool {
        if !self.reuse {
            return false;
        }
        let Ok(text) = fs::read_to_string(self.manifest_path(command)) else { return false };
        let Ok(m) = serde_json::from_str::<RunManifest>(&text) else { return false };
        m.config_hash == self.stage_hash(command)
            && m.outputs.iter().all(|o| sha256_file(&self.path(&o.path)).map(|h| h == o.sha256).unwrap_or(false))
    }

    pub fn read_manifest(&self, command: &str) -> Result<RunManifest> {
        let text = fs::read_to_string(self.manifest_path(command))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write_manifest(
        &self,
        command: &str,
        outputs: &[&str],
        generator_tags: Vec<String>,
        started: Instant,
        summary: serde_json::Value,
    ) -> Result<RunManifest> {
        let outputs = outputs
            .iter()
            .map(|p| Ok(OutputRecord { path: p.to_string(), sha256: sha256_file(&self.path(p))? }))
            .collect::<Result<Vec<_>>>()?;
        let m = RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.cfg.seed,
            config_hash: self.stage_hash(command),
            config: self.cfg.clone(),
            outputs,
            generator_tags,
            seconds: started.elapsed().as_secs_f64(),
            summary,
        };
        fs::write(self.manifest_path(command), serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }

    // ----- data -----

    pub fn gen_data(&self) -> Result<Dataset> {
        if self.is_fresh("gen-data") {
            return self.load_data();
        }
        let t0 = Instant::now();
        let sets = generate_tasks(self.cfg.seed, self.cfg.tasks, &self.kinds, &self.vocab)?;
        let files = ["tasks-train.jsonl", "tasks-validation.jsonl", "tasks-seen.jsonl", "tasks-unseen.jsonl"];
        for (name, tasks) in files.iter().zip([&sets.train, &sets.validation, &sets.seen_eval, &sets.unseen_eval]) {
            write_jsonl(BufWriter::new(File::create(self.path(name))?), tasks)?;
        }
        let summary = serde_json::json!({
            "train": sets.train.len(), "validation": sets.validation.len(),
            "seen": sets.seen_eval.len(), "unseen": sets.unseen_eval.len(),
            "unseen_combos": sets.unseen_combos.len(),
        });
        self.write_manifest("gen-data", &files, Vec::new(), t0, summary)?;
        Ok(Dataset { train: sets.train, validation: sets.validation, seen_eval: sets.seen_eval, unseen_eval: sets.unseen_eval })
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let read = |name: &str| -> Result<Vec<TaskInstance>> {
            let path = self.path(name);
            let f = File::open(&path)
                .map_err(|_| Error::Config(format!("dataset file {} missing; run gen-data first", path.display())))?;
            read_jsonl(BufReader::new(f))
        };
        Ok(Dataset {
            train: read("tasks-train.jsonl")?,
            validation: read("tasks-validation.jsonl")?,
            seen_eval: read("tasks-seen.jsonl")?,
            unseen_eval: read("tasks-unseen.jsonl")?,
        })
    }

    fn traces(&self, tasks: &[TaskInstance]) -> Result<Vec<TeacherTrace>> {
        tasks.iter().map(|t| teacher_trace(t, &self.vocab)).collect()
    }

    // ----- base model -----

    /// Pretrains the shared base on sender plans and text-payload actor
    /// transcripts of the training pool.
    pub fn pretrain_base(&self, data: &Dataset) -> Result<ModelParams> {
        if self.is_fresh("pretrain") {
            return self.load_base();
        }
        let t0 = Instant::now();
        let traces = self.traces(&data.train)?;
        let mut examples = Vec::with_capacity((1 + self.cfg.sender_repeat) * data.train.len());
        for (t, tr) in data.train.iter().zip(&traces) {
            let sender = sender_example(t, tr, &self.vocab);
            examples.extend(std::iter::repeat_n(sender, self.cfg.sender_repeat));
            examples.push(actor_text_example(t, tr, &self.vocab)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xba5e);
        let mut base = ModelParams::init(model_config(&self.vocab), &mut rng)?;
        let losses = train_lm(&mut base, &examples, &self.cfg.pretrain, |s, l| {
            if s % 250 == 0 {
                self.log(format!("pretrain step {s} loss {l:.4}"));
            }
        })?;
        Checkpoint::from_model(&base).write(&self.path("base.ckpt"))?;
        let rows: Vec<(usize, f64)> = losses.iter().copied().enumerate().collect();
        let mut w = csv::Writer::from_path(self.path("pretrain_log.csv"))?;
        w.write_record(["step", "loss"])?;
        for (s, l) in rows {
            w.write_record([s.to_string(), format!("{l:.6}")])?;
        }
        w.flush()?;
        let last = losses.last().copied().unwrap_or(f64::NAN);
        self.write_manifest(
            "pretrain",
            &["base.ckpt", "pretrain_log.csv"],
            Vec::new(),
            t0,
            serde_json::json!({ "final_loss": last }),
        )?;
        Ok(base)
    }

    pub fn load_base(&self) -> Result<ModelParams> {
        let path = self.path("base.ckpt");
        if !path.exists() {
            return Err(Error::Config(format!("base checkpoint {} missing; run train-actor first", path.display())));
        }
        Checkpoint::read(&path)?.model()
    }

    /// Teacher-forced messages over the gold plans, paired with transcripts.
    pub fn actor_examples(&self, teacher: &ModelParams, tasks: &[TaskInstance]) -> Result<Vec<ActorExample>> {
        tasks
            .iter()
            .map(|t| {
                let tr = teacher_trace(t, &self.vocab)?;
                let msg = teacher_message(teacher, t, &tr, &self.vocab)?;
                actor_example(t, &tr, msg, &self.vocab)
            })
            .collect()
    }

    // ----- actor -----

    pub fn train_actor(&self) -> Result<(ModelParams, AdapterParams, ActorTrainOutcome)> {
        let data = self.load_data()?;
        let base = self.pretrain_base(&data)?;
        if self.is_fresh("train-actor") {
            let (a, ad) = self.load_actor()?;
            let m = self.read_manifest("train-actor")?;
            let outcome: ActorOutcomeSummary = serde_json::from_value(m.summary)?;
            let log = read_actor_log(&self.path("actor_log.csv"))?;
            return Ok((
                a,
                ad,
                ActorTrainOutcome {
                    log,
                    best_val: outcome.best_val,
                    best_step: outcome.best_step,
                    stopped_early: outcome.stopped_early,
                },
            ));
        }
        let t0 = Instant::now();
        let train = self.actor_examples(&base, &data.train[..self.cfg.actor_examples])?;
        let val = self.actor_examples(&base, &data.validation)?;
        let mut actor = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xada7);
        let mut adapter = AdapterParams::init(actor.config.d_model, ADAPTER_HEADS, &mut rng)?;
        let outcome = train_actor(&mut actor, &mut adapter, &train, &val, &self.cfg.actor, |r| {
            if r.step % 50 == 0 || r.val_loss.is_some() {
                self.log(format!(
                    "actor step {} ce {:.4} js {:.4} align {:.4} val {:?}",
                    r.step, r.ce, r.js, r.align, r.val_loss
                ));
            }
        })?;
        Checkpoint::from_model(&actor).with_section("adapter", &adapter).write(&self.path("actor.ckpt"))?;
        write_actor_log(BufWriter::new(File::create(self.path("actor_log.csv"))?), &outcome.log)?;
        let summary = ActorOutcomeSummary {
            best_val: outcome.best_val,
            best_step: outcome.best_step,
            stopped_early: outcome.stopped_early,
        };
        self.write_manifest("train-actor", &["actor.ckpt", "actor_log.csv"], Vec::new(), t0, serde_json::to_value(summary)?)?;
        Ok((actor, adapter, outcome))
    }

    pub fn load_actor(&self) -> Result<(ModelParams, AdapterParams)> {
        let path = self.path("actor.ckpt");
        if !path.exists() {
            return Err(Error::Config(format!("actor checkpoint {} missing; run train-actor first", path.display())));
        }
        let ck = Checkpoint::read(&path)?;
        let actor = ck.model()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut adapter = AdapterParams::init(actor.config.d_model, ADAPTER_HEADS, &mut rng)?;
        let t = ck.section("adapter").ok_or_else(|| Error::Format("actor checkpoint lacks an adapter section".into()))?;
        load_into(&mut adapter, t)?;
        Ok((actor, adapter))
    }

    // ----- reasoner -----

    fn reasoner_name(k: usize) -> String {
        format!("reasoner-K{k}.ckpt")
    }

    pub fn compression_examples(&self, teacher: &ModelParams, tasks: &[TaskInstance]) -> Result<Vec<CompressionExample>> {
        let ex = self.actor_examples(teacher, tasks)?;
        Ok(tasks
            .iter()
            .zip(ex)
            .map(|(t, actor)| CompressionExample { prompt: sender_prompt(&t.initial, &self.vocab), actor })
            .collect())
    }

    /// Trains one reasoner per K in the grid (or in `only`).
    pub fn train_reasoners(&self, only: Option<&[usize]>) -> Result<Vec<(usize, Vec<CompressionLogRow>)>> {
        let ks: Vec<usize> = only.map(|o| o.to_vec()).unwrap_or_else(|| self.cfg.k_grid.clone());
        let command = format!("train-reasoner-{}", ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("-"));
        let (actor, adapter) = self.load_actor()?;
        if self.is_fresh(&command) {
            return ks.iter().map(|&k| Ok((k, read_compression_log(&self.path(&format!("reasoner-K{k}_log.csv")))?))).collect();
        }
        let t0 = Instant::now();
        let data = self.load_data()?;
        let teacher = self.load_base()?;
        let examples = self.compression_examples(&teacher, &data.train[..self.cfg.reasoner_examples])?;
        let mut outputs = Vec::new();
        let mut logs = Vec::new();
        let mut finals = serde_json::Map::new();
        for &k in &ks {
            let cfg = CompressionConfig { k, ..self.cfg.compression.clone() };
            let mut reasoner = teacher.clone();
            let mut bridge = self.initial_bridge(&teacher);
            let log = train_reasoner(&mut reasoner, &mut bridge, &actor, &adapter, &examples, &cfg, &self.cfg.reasoner, |r| {
                if r.step % 50 == 0 {
                    self.log(format!("reasoner K={k} step {} task {:.4} pref {:.4} geom {:.4}", r.step, r.task, r.pref, r.geom));
                }
            })?;
            let ck = Self::reasoner_name(k);
            Checkpoint::from_model(&reasoner).with_section("bridge", &bridge).write(&self.path(&ck))?;
            let lg = format!("reasoner-K{k}_log.csv");
            write_compression_log(BufWriter::new(File::create(self.path(&lg))?), &log)?;
            finals.insert(format!("K{k}"), serde_json::to_value(log.last())?);
            outputs.push(ck);
            outputs.push(lg);
            logs.push((k, log));
        }
        let refs: Vec<&str> = outputs.iter().map(|s| s.as_str()).collect();
        self.write_manifest(&command, &refs, vec![crate::channel::GeneratorTag::TrainedReasoner.to_string()], t0, finals.into())?;
        Ok(logs)
    }

    /// The bridge every reasoner starts from, seeded by the run seed.
    pub fn initial_bridge(&self, teacher: &ModelParams) -> ProjBridge {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xb41d);
        ProjBridge::init(teacher.config.d_model, token_embedding_scale(teacher), &mut rng)
    }

    pub fn load_reasoner(&self, k: usize) -> Result<(ModelParams, ProjBridge)> {
        let path = self.path(&Self::reasoner_name(k));
        if !path.exists() {
            return Err(Error::Config(format!("reasoner checkpoint {} missing; run train-reasoner first", path.display())));
        }
        let ck = Checkpoint::read(&path)?;
        let reasoner = ck.model()?;
        let mut bridge = self.initial_bridge(&reasoner);
        load_into(&mut bridge, ck.section("bridge").ok_or_else(|| Error::Format("reasoner checkpoint lacks a bridge".into()))?)?;
        Ok((reasoner, bridge))
    }

    // ----- evaluation -----

    /// Seed `s` block of an evaluation pool.
    pub fn eval_block<'a>(&self, pool: &'a [TaskInstance], seed_index: usize) -> &'a [TaskInstance] {
        let n = self.cfg.eval.tasks_per_split;
        &pool[seed_index * n..(seed_index + 1) * n]
    }

    /// Greedy sender messages for `tasks`.
    pub fn sender_messages(&self, sender: &ModelParams, tasks: &[TaskInstance]) -> Result<Vec<LatentMessage>> {
        let end = self.vocab.tok(END);
        tasks
            .iter()
            .map(|t| generate_message(sender, &sender_prompt(&t.initial, &self.vocab), end, MAX_PLAN_TOKENS, &t.task_id))
            .collect()
    }

    fn slot_for(
        &self,
        payload: PayloadSpec,
        i: usize,
        seed: u64,
        messages: &[LatentMessage],
        reasoner: Option<&(ModelParams, ProjBridge)>,
        task: &TaskInstance,
        tags: &mut Vec<String>,
    ) -> Result<SlotContent> {
        let msg = &messages[i];
        Ok(match payload {
            PayloadSpec::Matched => SlotContent::Latent(msg.values.clone()),
            PayloadSpec::Text => SlotContent::Text(msg.plan_tokens.clone()),
            PayloadSpec::None => SlotContent::None,
            PayloadSpec::Perturbed(kind) => {
                let spec = PerturbationSpec { kind, seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64) };
                let pool: Vec<&LatentMessage> = messages.iter().collect();
                match apply_perturbation(msg, &spec, &pool) {
                    Ok(p) => {
                        if tags.len() < 3 {
                            tags.push(p.generator_tag.to_string());
                        }
                        SlotContent::Latent(p.values)
                    }
                    // Moments need at least two rows; shorter messages are sent as is.
                    Err(Error::InsufficientData(_)) => {
                        self.log(format!("{kind}: message for {} has {} rows, sent unperturbed", task.task_id, msg.len()));
                        SlotContent::Latent(msg.values.clone())
                    }
                    Err(e) => return Err(e),
                }
            }
            PayloadSpec::Reasoner(k) => {
                let (r, b) = reasoner.expect("reasoner loaded for reasoner payloads");
                let m = latent_rollout(r, b, &sender_prompt(&task.initial, &self.vocab), k, &task.task_id)?;
                SlotContent::Latent(m.values)
            }
        })
    }

    /// Runs every configured payload on both evaluation splits for every
    /// evaluation seed.
    pub fn eval(&self, payloads: &[PayloadSpec]) -> Result<(Vec<EvalRow>, Vec<EvalSummary>)> {
        let names: Vec<String> = payloads.iter().map(|p| p.to_string()).collect();
        let command = format!("eval-{}", short_hash(&names.join(",")));
        let (actor, adapter) = self.load_actor()?;
        if self.is_fresh(&command) {
            let rows: Vec<EvalRow> = read_csv_rows(&self.path(&format!("{command}.csv")))?;
            let summary = summarize(&rows);
            return Ok((rows, summary));
        }
        let t0 = Instant::now();
        let data = self.load_data()?;
        let teacher = self.load_base()?;
        let mut reasoners = std::collections::BTreeMap::new();
        for p in payloads {
            if let PayloadSpec::Reasoner(k) = p {
                reasoners.insert(*k, self.load_reasoner(*k)?);
            }
        }
        let mut rows = Vec::new();
        let mut tags = Vec::new();
        for (si, &seed) in self.cfg.eval.seeds.iter().enumerate() {
            for (split, pool) in [("seen", &data.seen_eval), ("unseen", &data.unseen_eval)] {
                let tasks = self.eval_block(pool, si);
                let messages = self.sender_messages(&teacher, tasks)?;
                for &payload in payloads {
                    let r = match payload {
                        PayloadSpec::Reasoner(k) => reasoners.get(&k),
                        _ => None,
                    };
                    let mut slots = Vec::with_capacity(tasks.len());
                    for (i, t) in tasks.iter().enumerate() {
                        slots.push(self.slot_for(payload, i, seed, &messages, r, t, &mut tags)?);
                    }
                    let report: SuiteReport =
                        evaluate_suite(tasks, |t, i| ActorAgent::new(&actor, &adapter, &self.vocab, t, &slots[i]))?;
                    self.log(format!(
                        "eval seed {seed} {split} {payload}: success {:.2} steps {}",
                        report.success_rate,
                        report.steps_label()
                    ));
                    rows.push(EvalRow {
                        payload: payload.to_string(),
                        split: split.into(),
                        seed,
                        episodes: tasks.len(),
                        success_rate: report.success_rate,
                        steps_success: report.steps_success,
                        steps_all: report.steps_all,
                    });
                }
            }
        }
        let summary = summarize(&rows);
        let (csv_name, sum_name) = (format!("{command}.csv"), format!("{command}-summary.csv"));
        write_csv_rows(&self.path(&csv_name), &rows)?;
        write_csv_rows(&self.path(&sum_name), &summary)?;
        self.write_manifest(&command, &[&csv_name, &sum_name], tags, t0, serde_json::json!({ "payloads": names }))?;
        Ok((rows, summary))
    }

    // ----- analysis -----

    fn analysis_examples(&self, teacher: &ModelParams) -> Result<(Vec<TaskInstance>, Vec<ActorExample>)> {
        let data = self.load_data()?;
        let n = self.cfg.analysis.examples.min(data.seen_eval.len());
        let tasks = data.seen_eval[..n].to_vec();
        let ex = self.actor_examples(teacher, &tasks)?;
        Ok((tasks, ex))
    }

    /// Training-free ratio sweep plus matched-length comparisons between
    /// truncated teacher messages and trained reasoners.
    pub fn compress_sweep(&self) -> Result<Vec<SweepResult>> {
        if self.is_fresh("compress-sweep") {
            return Ok(serde_json::from_value(self.read_manifest("compress-sweep")?.summary)?);
        }
        let t0 = Instant::now();
        let (actor, adapter) = self.load_actor()?;
        let teacher = self.load_base()?;
        let (tasks, examples) = self.analysis_examples(&teacher)?;
        let ratio = delta_ce_sweep(&actor, &adapter, &examples, &self.cfg.analysis.r_grid)?;
        let ks: Vec<usize> = self.cfg.k_grid.iter().copied().filter(|&k| self.path(&Self::reasoner_name(k)).exists()).collect();
        let mut sweeps = vec![ratio];
        if !ks.is_empty() {
            let truncated: Vec<Vec<_>> =
                ks.iter().map(|&k| examples.iter().map(|e| truncate_len(&e.message, k).values).collect()).collect();
            sweeps.push(length_sweep(&actor, &adapter, &examples, "truncated-teacher-K", &ks, &truncated)?);
            let mut trained = Vec::with_capacity(ks.len());
            for &k in &ks {
                let (r, b) = self.load_reasoner(k)?;
                let msgs = tasks
                    .iter()
                    .map(|t| latent_rollout(&r, &b, &sender_prompt(&t.initial, &self.vocab), k, &t.task_id).map(|m| m.values))
                    .collect::<Result<Vec<_>>>()?;
                trained.push(msgs);
            }
            sweeps.push(length_sweep(&actor, &adapter, &examples, "trained-reasoner-K", &ks, &trained)?);
        }
        write_sweep_csv(BufWriter::new(File::create(self.path("sweep.csv"))?), &sweeps)?;
        self.write_manifest("compress-sweep", &["sweep.csv"], Vec::new(), t0, serde_json::to_value(&sweeps)?)?;
        Ok(sweeps)
    }

    /// LM-head bands of K-step rollouts: trained reasoner versus the
    /// untrained base with the initial bridge. Returns (trained, base)
    /// profiles.
    pub fn analyze_parallelism(&self) -> Result<(Vec<ParallelismProfile>, Vec<ParallelismProfile>)> {
        if self.is_fresh("analyze-parallelism") {
            return Ok(serde_json::from_value(self.read_manifest("analyze-parallelism")?.summary["profiles"].clone())?);
        }
        let t0 = Instant::now();
        let k = self.cfg.analysis.k;
        let teacher = self.load_base()?;
        let (r, b) = self.load_reasoner(k)?;
        let b0 = self.initial_bridge(&teacher);
        let data = self.load_data()?;
        let n = self.cfg.analysis.examples.min(data.seen_eval.len());
        let mut trained = Vec::with_capacity(n);
        let mut base = Vec::with_capacity(n);
        for t in &data.seen_eval[..n] {
            let prompt = sender_prompt(&t.initial, &self.vocab);
            trained.push(parallelism_profile(&latent_rollout(&r, &b, &prompt, k, &t.task_id)?, &r, k)?);
            base.push(parallelism_profile(&latent_rollout(&teacher, &b0, &prompt, k, &t.task_id)?, &teacher, k)?);
        }
        let mut rows: Vec<(String, usize, &ParallelismProfile)> = Vec::new();
        for (i, p) in trained.iter().enumerate() {
            rows.push((format!("trained-reasoner-K{k}"), i, p));
        }
        for (i, p) in base.iter().enumerate() {
            rows.push((format!("untrained-base-K{k}"), i, p));
        }
        write_profile_csv(BufWriter::new(File::create(self.path("parallelism.csv"))?), &rows)?;
        let (tm, tp) = aggregate_p50(&trained);
        let (bm, bp) = aggregate_p50(&base);
        let summary = serde_json::json!({
            "trained_mean_p50": tm, "trained_pooled_p50": tp,
            "base_mean_p50": bm, "base_pooled_p50": bp,
            "profiles": (&trained, &base),
        });
        self.write_manifest("analyze-parallelism", &["parallelism.csv"], Vec::new(), t0, summary)?;
        Ok((trained, base))
    }

    /// Message-production latency: full plan decode (which yields the
    /// latents along the way) versus K-step rollouts.
    pub fn bench_latency(&self) -> Result<Vec<LatencyStats>> {
        let t0 = Instant::now();
        let k = self.cfg.analysis.k;
        let teacher = self.load_base()?;
        let data = self.load_data()?;
        let task = &data.seen_eval[0];
        let prompt = sender_prompt(&task.initial, &self.vocab);
        let end = self.vocab.tok(END);
        let reps = self.cfg.analysis.latency_reps;
        let mut rows = Vec::new();
        rows.push(latency_bench("full-decode", reps, || {
            let m = generate_message(&teacher, &prompt, end, MAX_PLAN_TOKENS, &task.task_id)?;
            extract_latents(&teacher, &prompt, &m.plan_tokens, &task.task_id).map(|_| ())
        })?);
        if let Ok((r, b)) = self.load_reasoner(k) {
            rows.push(latency_bench(&format!("trained-rollout-K{k}"), reps, || {
                latent_rollout(&r, &b, &prompt, k, &task.task_id).map(|_| ())
            })?);
        }
        let b0 = self.initial_bridge(&teacher);
        rows.push(latency_bench(&format!("untrained-rollout-K{k}"), reps, || {
            latent_rollout(&teacher, &b0, &prompt, k, &task.task_id).map(|_| ())
        })?);
        write_latency_csv(BufWriter::new(File::create(self.path("latency.csv"))?), &rows)?;
        self.write_manifest("bench-latency", &["latency.csv"], Vec::new(), t0, serde_json::to_value(&rows)?)?;
        Ok(rows)
    }
}

/// RMS entry of the token-embedding table.
pub fn token_embedding_scale(m: &ModelParams) -> f64 {
    let e = &m.tok_emb;
    (e.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / e.len().max(1) as f64).sqrt()
}

fn short_hash(s: &str) -> String {
    hex::encode(&Sha256::digest(s.as_bytes())[..4])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ActorOutcomeSummary {
    best_val: f64,
    best_step: usize,
    stopped_early: bool,
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

pub fn read_actor_log(path: &Path) -> Result<Vec<crate::actor::ActorLogRow>> {
    read_csv_rows(path)
}

pub fn read_compression_log(path: &Path) -> Result<Vec<CompressionLogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format("bad compression log row".into()))
        };
        out.push(CompressionLogRow {
            step: f(0)? as usize,
            task: f(1)?,
            pref: f(2)?,
            geom: f(3)?,
            total: f(4)?,
            k: f(5)? as usize,
        });
    }
    Ok(out)
}
