//! Multi-task objective and the staged training loop.
//!
//! Default stages for a model with both branches:
//!
//! | stage | losses                 | trainable groups      |
//! |-------|------------------------|-----------------------|
//! | 1     | `L_app`                | stem, appearance      |
//! | 2     | `L_app + lambda L_att` | all                   |
//! | 3     | `L_app`                | all                   |
//!
//! The attribute forward pass only runs when the attribute loss is active
//! (and `lambda > 0`). Parameters that are not part of the graph get no
//! gradient and no update, so in stage 3 the attribute branch keeps its
//! stage-2 weights while its hidden states remain in the descriptor.
//!
//! Every random draw is keyed on `(seed, stage, epoch, step)`, so a run
//! restarted from an epoch-boundary checkpoint replays exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::appearance;
use crate::attribute;
use crate::checkpoint::Checkpoint;
use crate::config::{join_list, Branches, KeyValues};
use crate::data::augment::{augment, AugmentConfig};
use crate::data::{stack_images, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{forward, Heads, Model};
use crate::optim::SgdState;
use crate::params::{Mode, ParamGroup, Session};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 2.0;

/// `L_app + lambda * L_att`.
pub fn total_loss(l_app: f64, l_att: f64, lambda: f64) -> f64 {
    l_app + lambda * l_att
}

/// Which losses a stage optimizes and which parameter groups it may update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub appearance_loss: bool,
    pub attribute_loss: bool,
    pub trainable: Vec<ParamGroup>,
}

impl StageSpec {
    fn losses_name(&self) -> &'static str {
        match (self.appearance_loss, self.attribute_loss) {
            (true, true) => "app+att",
            (true, false) => "app",
            (false, true) => "att",
            (false, false) => "none",
        }
    }
}

fn parse_losses(s: &str) -> Result<(bool, bool)> {
    match s.trim() {
        "app+att" | "att+app" => Ok((true, true)),
        "app" => Ok((true, false)),
        "att" => Ok((false, true)),
        _ => Err(Error::Config(format!("unknown loss set {s:?} (app|att|app+att)"))),
    }
}

fn parse_groups(s: &str) -> Result<Vec<ParamGroup>> {
    s.split(',')
        .map(|g| ParamGroup::parse(g.trim()).ok_or_else(|| Error::Config(format!("unknown parameter group {g:?}"))))
        .collect()
}

fn groups_name(groups: &[ParamGroup]) -> String {
    groups.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(",")
}

/// Stage plan for a model with the given branches.
pub fn default_stages(branches: Branches) -> Vec<StageSpec> {
    use ParamGroup::*;
    let spec = |app, att, trainable: &[ParamGroup]| StageSpec {
        appearance_loss: app,
        attribute_loss: att,
        trainable: trainable.to_vec(),
    };
    match branches {
        Branches::Both => vec![
            spec(true, false, &[Stem, Appearance]),
            spec(true, true, &ParamGroup::ALL),
            spec(true, false, &ParamGroup::ALL),
        ],
        Branches::AppearanceOnly => vec![spec(true, false, &[Stem, Appearance]); 3],
        Branches::AttributeOnly => vec![spec(false, true, &[Stem, Attribute]); 3],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    /// Epoch budget of each stage.
    pub epochs: Vec<usize>,
    pub seed: u64,
    /// Number of leading stages to run.
    pub stages: usize,
    /// Stop a stage once the best epoch-mean loss of the last this-many
    /// epochs improves on the best before them by less than
    /// `early_stop_tolerance` (relative). 0 disables.
    pub early_stop_window: usize,
    pub early_stop_tolerance: f64,
    /// Learning-rate multiplier applied for the last `lr_drop_fraction` of
    /// each stage's epochs.
    pub lr_drop_factor: f64,
    pub lr_drop_fraction: f64,
    pub augment: AugmentConfig,
    /// Per-stage replacements for the default plan, keyed by stage index (0-based).
    pub stage_overrides: BTreeMap<usize, StageSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: DEFAULT_LAMBDA,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
            batch_size: 16,
            epochs: vec![20, 30, 20],
            seed: 0,
            stages: 3,
            early_stop_window: 3,
            early_stop_tolerance: 1e-3,
            lr_drop_factor: 0.1,
            lr_drop_fraction: 0.25,
            augment: AugmentConfig::default(),
            stage_overrides: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 for batch norm, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        if self.epochs.len() != 3 {
            return bad(format!("epochs needs one value per stage (3), got {}", self.epochs.len()));
        }
        if !(1..=3).contains(&self.stages) {
            return bad(format!("stages must be 1, 2 or 3, got {}", self.stages));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_fraction) || !(self.lr_drop_factor > 0.0) {
            return bad("lr_drop_fraction must be in [0, 1] and lr_drop_factor positive".into());
        }
        if let Some((i, _)) = self.stage_overrides.iter().find(|(i, s)| **i >= 3 || !(s.appearance_loss || s.attribute_loss)) {
            return bad(format!("stage {} override is out of range or has no loss", i + 1));
        }
        Ok(())
    }

    /// The plan for `branches` with any overrides applied.
    pub fn stage_specs(&self, branches: Branches) -> Vec<StageSpec> {
        let mut specs = default_stages(branches);
        for (&i, s) in &self.stage_overrides {
            if i < specs.len() {
                specs[i] = s.clone();
            }
        }
        specs
    }

    /// Learning rate for `epoch` (0-based) of a stage with `epochs` epochs.
    pub fn learning_rate_at(&self, epochs: usize, epoch: usize) -> f64 {
        let drop_from = (epochs as f64 * (1.0 - self.lr_drop_fraction)).ceil() as usize;
        if epoch >= drop_from {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        take!("lambda", self.lambda);
        take!("learning_rate", self.learning_rate);
        take!("momentum", self.momentum);
        take!("weight_decay", self.weight_decay);
        take!("nesterov", self.nesterov);
        take!("batch_size", self.batch_size);
        take!("seed", self.seed);
        take!("stages", self.stages);
        take!("early_stop_window", self.early_stop_window);
        take!("early_stop_tolerance", self.early_stop_tolerance);
        take!("lr_drop_factor", self.lr_drop_factor);
        take!("lr_drop_fraction", self.lr_drop_fraction);
        take!("flip_prob", self.augment.flip_prob);
        take!("erase_prob", self.augment.erase_prob);
        if let Some(v) = kv.get_list("epochs")? {
            self.epochs = v;
        }
        if let Some(false) = kv.get::<bool>("augment")? {
            self.augment = AugmentConfig::disabled();
        }
        for i in 0..3 {
            let losses = kv.get_str(&format!("stage{}.losses", i + 1));
            let trainable = kv.get_str(&format!("stage{}.trainable", i + 1));
            if losses.is_none() && trainable.is_none() {
                continue;
            }
            let mut spec = self.stage_overrides.get(&i).cloned().unwrap_or_else(|| default_stages(Branches::Both)[i].clone());
            if let Some(l) = losses {
                (spec.appearance_loss, spec.attribute_loss) = parse_losses(l)?;
            }
            if let Some(t) = trainable {
                spec.trainable = parse_groups(t)?;
            }
            self.stage_overrides.insert(i, spec);
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("lambda", self.lambda.to_string());
        kv.set("learning_rate", self.learning_rate.to_string());
        kv.set("momentum", self.momentum.to_string());
        kv.set("weight_decay", self.weight_decay.to_string());
        kv.set("nesterov", self.nesterov.to_string());
        kv.set("batch_size", self.batch_size.to_string());
        kv.set("epochs", join_list(&self.epochs));
        kv.set("seed", self.seed.to_string());
        kv.set("stages", self.stages.to_string());
        kv.set("early_stop_window", self.early_stop_window.to_string());
        kv.set("early_stop_tolerance", self.early_stop_tolerance.to_string());
        kv.set("lr_drop_factor", self.lr_drop_factor.to_string());
        kv.set("lr_drop_fraction", self.lr_drop_fraction.to_string());
        kv.set("flip_prob", self.augment.flip_prob.to_string());
        kv.set("erase_prob", self.augment.erase_prob.to_string());
        for (i, s) in &self.stage_overrides {
            kv.set(format!("stage{}.losses", i + 1), s.losses_name());
            kv.set(format!("stage{}.trainable", i + 1), groups_name(&s.trainable));
        }
        kv
    }
}

/// One optimizer step. Stage and epoch are 1-based; `step` counts from 1
/// within the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub l_app: Option<f64>,
    pub l_att: Option<f64>,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "stage\tepoch\tstep\tL_app\tL_att\tL_total\tlr";

impl TrainLog {
    /// Tab-separated rows under a header line. Inactive losses are `-`;
    /// floats use the shortest text that parses back to the same value.
    pub fn render(&self) -> String {
        self.render_rows(|_| true)
    }

    pub fn render_stage(&self, stage: usize) -> String {
        self.render_rows(|r| r.stage == stage)
    }

    fn render_rows(&self, keep: impl Fn(&LogRow) -> bool) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        let mut out = format!("{LOG_HEADER}\n");
        for r in self.rows.iter().filter(|r| keep(r)) {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.stage,
                r.epoch,
                r.step,
                opt(r.l_app),
                opt(r.l_att),
                r.l_total,
                r.lr
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let perr = |d: &str| Error::Parse {
                file: "train log".into(),
                line: i + 1,
                detail: d.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(perr("expected 7 fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| perr("bad integer"));
            let float = |s: &str| s.parse::<f64>().map_err(|_| perr("bad number"));
            let opt = |s: &str| if s == "-" { Ok(None) } else { float(s).map(Some) };
            rows.push(LogRow {
                stage: int(f[0])?,
                epoch: int(f[1])?,
                step: int(f[2])?,
                l_app: opt(f[3])?,
                l_att: opt(f[4])?,
                l_total: float(f[5])?,
                lr: float(f[6])?,
            });
        }
        Ok(TrainLog { rows })
    }
}

/// Where the next epoch starts. `stage` and `epoch` are 0-based.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Progress {
    pub stage: usize,
    pub epoch: usize,
    /// Epoch-mean total loss of each finished epoch of the current stage.
    pub history: Vec<f64>,
}

/// Training split in dense form.
#[derive(Debug, Clone)]
struct TrainData {
    images: Vec<Tensor>,
    ids: Vec<usize>,
    attributes: Vec<Vec<usize>>,
}

impl TrainData {
    fn from_dataset(ds: &Dataset) -> Result<Self> {
        let classes = ds.train_classes();
        let train = ds.split(Split::Train);
        if train.is_empty() {
            return Err(Error::Validation("dataset has no training samples".into()));
        }
        Ok(TrainData {
            images: train.iter().map(|s| s.image.clone()).collect(),
            ids: train.iter().map(|s| classes[&s.identity]).collect(),
            attributes: train.iter().map(|s| s.attributes.clone()).collect(),
        })
    }
}

/// Generator for one purpose at one point of the schedule.
pub fn step_rng(seed: u64, stage: usize, epoch: usize, step: usize, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, stage as u64, epoch as u64, step as u64].iter().enumerate() {
        key[i * 8..i * 8 + 8].copy_from_slice(&v.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(purpose);
    rng
}

const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub optimizer: SgdState,
    pub log: TrainLog,
    progress: Progress,
    specs: Vec<StageSpec>,
    data: TrainData,
}

/// Result of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub stage: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    /// The stage ended after this epoch (budget spent or early stop).
    pub stage_done: bool,
    pub early_stopped: bool,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let optimizer = SgdState::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.nesterov);
        Self::assemble(model, cfg, optimizer, TrainLog::default(), Progress::default(), dataset)
    }

    fn assemble(
        mut model: Model,
        cfg: TrainConfig,
        optimizer: SgdState,
        log: TrainLog,
        progress: Progress,
        dataset: &Dataset,
    ) -> Result<Self> {
        let data = TrainData::from_dataset(dataset)?;
        let classes = dataset.train_classes().len();
        if classes != model.num_ids {
            return Err(Error::Config(format!(
                "model has {} identity classes, training split has {classes}",
                model.num_ids
            )));
        }
        if dataset.schema.class_counts() != model.schema.class_counts() {
            return Err(Error::Config("dataset attribute schema differs from the model's".into()));
        }
        let shape = &data.images[0].shape()[1..];
        if shape != [model.cfg.image_height, model.cfg.image_width] {
            return Err(Error::Config(format!(
                "images are {}x{}, model expects {}x{}",
                shape[0], shape[1], model.cfg.image_height, model.cfg.image_width
            )));
        }
        let specs = cfg.stage_specs(model.cfg.branches);
        for (i, s) in specs.iter().enumerate().take(cfg.stages) {
            let branches = model.cfg.branches;
            if s.appearance_loss && !branches.has_appearance() || s.attribute_loss && !branches.has_attribute() {
                return Err(Error::Config(format!(
                    "stage {} uses losses {} but the model is {}",
                    i + 1,
                    s.losses_name(),
                    branches.name()
                )));
            }
            if !s.appearance_loss && cfg.lambda == 0.0 {
                return Err(Error::Config(format!("stage {} optimizes only the attribute loss but lambda is 0", i + 1)));
            }
        }
        model.set_mode(Mode::Train);
        Ok(Trainer {
            cfg,
            model,
            optimizer,
            log,
            progress,
            specs,
            data,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint, dataset: &Dataset) -> Result<Self> {
        let kv = &ck.state;
        let cfg = TrainConfig::from_kv(&prefixed(kv, "train."))?;
        let bad = |m: &str| Error::Integrity(format!("checkpoint trainer state: {m}"));
        let stage = kv.get("progress.stage")?.ok_or_else(|| bad("missing stage"))?;
        let epoch = kv.get("progress.epoch")?.ok_or_else(|| bad("missing epoch"))?;
        let history = match kv.get_str("progress.history").unwrap_or("") {
            "" => Vec::new(),
            h => h
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| bad("bad history value")))
                .collect::<Result<_>>()?,
        };
        let optimizer = ck.optimizer.ok_or_else(|| bad("no optimizer state"))?;
        let log = TrainLog::parse(&ck.log)?;
        let progress = Progress { stage, epoch, history };
        Self::assemble(ck.model, cfg, optimizer, log, progress, dataset)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = KeyValues::default();
        let train = self.cfg.to_kv();
        for k in train.keys() {
            state.set(format!("train.{k}"), train.get_str(k).unwrap_or_default());
        }
        state.set("progress.stage", self.progress.stage.to_string());
        state.set("progress.epoch", self.progress.epoch.to_string());
        let hist: Vec<String> = self.progress.history.iter().map(f64::to_string).collect();
        state.set("progress.history", hist.join(","));
        let mut model = self.model.clone();
        model.set_mode(Mode::Eval);
        Checkpoint {
            model,
            optimizer: Some(self.optimizer.clone()),
            state,
            log: self.log.render(),
        }
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn specs(&self) -> &[StageSpec] {
        &self.specs
    }

    pub fn is_finished(&self) -> bool {
        self.progress.stage >= self.cfg.stages
    }

    /// The trained model in eval mode.
    pub fn into_model(self) -> Model {
        let mut m = self.model;
        m.set_mode(Mode::Eval);
        m
    }

    /// One update on the training samples at `batch`. `stage` is 0-based,
    /// `epoch` and `step` are 1-based and only used for the log and the
    /// augmentation stream.
    pub fn train_step(&mut self, stage: usize, epoch: usize, step: usize, batch: &[usize], lr: f64) -> Result<LogRow> {
        let spec = self.specs[stage].clone();
        let lambda = self.cfg.lambda;
        let att_active = spec.attribute_loss && lambda > 0.0;
        let images: Vec<Tensor> = batch
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                let mut rng = step_rng(self.cfg.seed, stage, epoch, step, AUGMENT + pos as u64);
                augment(&self.data.images[i], &self.cfg.augment, &mut rng).0
            })
            .collect();
        let x = stack_images(&images)?;
        let ids: Vec<usize> = batch.iter().map(|&i| self.data.ids[i]).collect();
        let labels: Vec<Vec<usize>> = batch.iter().map(|&i| self.data.attributes[i].clone()).collect();

        let (cfg, schema) = (self.model.cfg.clone(), self.model.schema.clone());
        let mut s = Session::new(&mut self.model.store, Mode::Train, &spec.trainable);
        let xv = s.input(x);
        let heads = Heads {
            attribute: att_active,
            appearance: spec.appearance_loss,
        };
        let out = forward(&cfg, &schema, &mut s, xv, heads)?;
        let l_app = match &out.appearance {
            Some(a) => Some(appearance::appearance_loss(&mut s.tape, &a.logits, &ids)?),
            None => None,
        };
        let l_att = match &out.attribute {
            Some(a) => Some(attribute::attribute_loss(&mut s.tape, &a.logits, &labels)?),
            None => None,
        };
        let total = match (l_app, l_att) {
            (Some(a), Some(b)) => {
                let w = s.tape.scale(b, lambda);
                s.tape.add(a, w)?
            }
            (Some(a), None) => a,
            (None, Some(b)) => s.tape.scale(b, lambda),
            (None, None) => return Err(Error::Config("stage has no active loss".into())),
        };
        let value = |v: Option<_>, s: &Session<'_>| v.map(|v| s.tape.value(v).item());
        let row = LogRow {
            stage: stage + 1,
            epoch,
            step,
            l_app: value(l_app, &s),
            l_att: value(l_att, &s),
            l_total: s.tape.value(total).item(),
            lr,
        };
        if !row.l_total.is_finite() {
            return Err(Error::Divergence {
                stage: stage + 1,
                epoch,
                step,
                loss: row.l_total,
            });
        }
        s.backward(total)?;
        let names: Vec<String> = s
            .bound_names()
            .filter(|n| ParamGroup::of(n).is_some_and(|g| spec.trainable.contains(&g)))
            .map(str::to_string)
            .collect();
        drop(s);
        self.optimizer.learning_rate = lr;
        let stepped = self.optimizer.step(&mut self.model.store, names.iter().map(String::as_str));
        for (_, p) in self.model.store.params_mut() {
            p.clear_grad();
        }
        stepped?;
        self.log.rows.push(row);
        Ok(row)
    }

    /// Runs the next epoch and advances the schedule.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        if self.is_finished() {
            return Err(Error::Usage("training already finished".into()));
        }
        let Progress { stage, epoch, .. } = self.progress;
        let budget = self.cfg.epochs[stage];
        let lr = self.cfg.learning_rate_at(budget, epoch);
        let mut order: Vec<usize> = (0..self.data.images.len()).collect();
        order.shuffle(&mut step_rng(self.cfg.seed, stage, epoch + 1, 0, SHUFFLE));
        let mut sum = 0.0;
        let mut count = 0;
        // a trailing batch of one cannot be batch-normalized; it is dropped
        for (b, batch) in order.chunks(self.cfg.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let row = self.train_step(stage, epoch + 1, b + 1, batch, lr)?;
            sum += row.l_total;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Validation("training split is too small for one batch of two".into()));
        }
        let mean_loss = sum / count as f64;
        let p = &mut self.progress;
        p.history.push(mean_loss);
        let w = self.cfg.early_stop_window;
        // best loss of the last `w` epochs against the best before them
        let early_stopped = w > 0 && p.history.len() > w && {
            let (before, recent) = p.history.split_at(p.history.len() - w);
            let best = |h: &[f64]| h.iter().cloned().fold(f64::INFINITY, f64::min);
            let old = best(before);
            (old - best(recent)) / old.abs() < self.cfg.early_stop_tolerance
        };
        let stage_done = early_stopped || epoch + 1 >= budget;
        if stage_done {
            *p = Progress {
                stage: stage + 1,
                epoch: 0,
                history: Vec::new(),
            };
        } else {
            p.epoch += 1;
        }
        Ok(EpochSummary {
            stage: stage + 1,
            epoch: epoch + 1,
            mean_loss,
            stage_done,
            early_stopped,
        })
    }

    /// Trains to the end of the schedule, calling `after_epoch` after each
    /// epoch (for checkpointing or reporting). On divergence the trainer is
    /// rolled back to the state after the last good epoch before the error
    /// is returned.
    pub fn run(&mut self, mut after_epoch: impl FnMut(&Trainer, &EpochSummary) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let snapshot = (self.model.clone(), self.optimizer.clone(), self.log.clone(), self.progress.clone());
            match self.run_epoch() {
                Ok(summary) => after_epoch(self, &summary)?,
                Err(e) => {
                    (self.model, self.optimizer, self.log, self.progress) = snapshot;
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    /// [`Trainer::run`] that saves a checkpoint to `path` after every epoch.
    pub fn run_with_checkpoints(&mut self, path: &Path) -> Result<()> {
        self.run(|t, _| t.checkpoint().save(path))
    }
}

fn prefixed(kv: &KeyValues, prefix: &str) -> KeyValues {
    let mut out = KeyValues::default();
    for k in kv.keys() {
        if let Some(stripped) = k.strip_prefix(prefix) {
            out.set(stripped, kv.get_str(k).unwrap_or_default());
        }
    }
    out
}

#[cfg(test)]
mod tests;
