//! Run configuration and the end-to-end synth / train / eval pipelines
//! behind the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dsp::{FrontendConfig, Featurizer};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Arch, Model, ModelConfig};
use crate::parallel::Execution;
use crate::signal_io::{load_manifest, read_wav, split_by_patient, write_synthetic_dataset, ManifestEntry, Split, SynthSpec};
use crate::training::{evaluate, train, Dataset, EpochRecord, EvalReport, TrainConfig};

pub const SEED_ENV: &str = "AUDIOFUSE_SEED";
pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Full,
    Desk,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::full(),
            Preset::Desk => ModelConfig::desk(),
        }
    }

    pub fn frontend(self) -> FrontendConfig {
        match self {
            Preset::Full => FrontendConfig::full(),
            Preset::Desk => FrontendConfig::desk(),
        }
    }
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_workers() -> usize {
    1
}

/// The single JSON document describing a run. `model` and `frontend` start
/// from the chosen preset and only the keys given in the file override it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Preset,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Fraction of patients sent to validation when the manifest leaves
    /// rows unassigned.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Featurization threads.
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub frontend: FrontendConfig,
}

/// Command-line values that replace individual config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub arch: Option<Arch>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub max_epochs: Option<usize>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    let s = path.to_string();
    if s == "." {
        String::new()
    } else {
        format!("/{}", s.replace('.', "/"))
    }
}

fn set(doc: &mut Value, section: Option<&str>, key: &str, v: Value) {
    let Value::Object(root) = doc else { return };
    match section {
        None => {
            root.insert(key.into(), v);
        }
        Some(s) => {
            let slot = root.entry(s).or_insert_with(|| json!({}));
            if let Value::Object(m) = slot {
                m.insert(key.into(), v);
            }
        }
    }
}

impl RunConfig {
    /// Builds a config from a parsed document, CLI overrides and the
    /// fallback seed from the environment (used only when neither the
    /// document nor the overrides name a seed).
    pub fn resolve(mut doc: Value, ov: &Overrides, env_seed: Option<&str>) -> Result<Self> {
        if !doc.is_object() {
            return Err(Error::Schema {
                pointer: String::new(),
                reason: "run config must be a JSON object".into(),
            });
        }
        if let Some(a) = ov.arch {
            set(&mut doc, Some("model"), "arch", json!(a.as_str()));
        }
        if let Some(s) = ov.seed {
            set(&mut doc, Some("train"), "seed", json!(s));
        }
        if let Some(e) = ov.max_epochs {
            set(&mut doc, Some("train"), "max_epochs", json!(e));
        }
        if let Some(w) = ov.workers {
            set(&mut doc, None, "workers", json!(w));
        }
        if let Some(p) = &ov.out_dir {
            set(&mut doc, None, "out_dir", json!(p));
        }
        if let Some(p) = &ov.manifest {
            set(&mut doc, None, "manifest", json!(p));
        }
        if doc.pointer("/train/seed").is_none() {
            if let Some(raw) = env_seed {
                let s: u64 = raw
                    .trim()
                    .parse()
                    .map_err(|_| Error::Argument(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
                set(&mut doc, Some("train"), "seed", json!(s));
            }
        }
        let preset: Preset = match doc.get("preset") {
            None => Preset::default(),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Schema {
                pointer: "/preset".into(),
                reason: e.to_string(),
            })?,
        };
        let mut full = json!({
            "model": serde_json::to_value(preset.model()).expect("serializable"),
            "frontend": serde_json::to_value(preset.frontend()).expect("serializable"),
        });
        merge(&mut full, doc);
        let cfg: RunConfig = serde_path_to_error::deserialize(full).map_err(|e| Error::Schema {
            pointer: pointer_of(e.path()),
            reason: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut doc: Value = serde_json::from_str(&text).map_err(|e| Error::Schema {
            pointer: String::new(),
            reason: format!("{}: {e}", path.display()),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for key in ["manifest", "out_dir"] {
            if let Some(Value::String(p)) = doc.get(key) {
                if Path::new(p).is_relative() {
                    let joined = base.join(p);
                    doc[key] = json!(joined);
                }
            }
        }
        let env = std::env::var(SEED_ENV).ok();
        RunConfig::resolve(doc, ov, env.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |pointer: &str, reason: String| {
            Err(Error::Schema {
                pointer: pointer.into(),
                reason,
            })
        };
        self.model.validate()?;
        self.train.validate()?;
        self.frontend.validate()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return schema("/val_fraction", format!("{} is not in (0, 1)", self.val_fraction));
        }
        if self.workers == 0 {
            return schema("/workers", "must be at least 1".into());
        }
        if self.model.image_size != self.frontend.image_size {
            return schema(
                "/model/image_size",
                format!("{} differs from frontend image_size {}", self.model.image_size, self.frontend.image_size),
            );
        }
        if self.model.wave_len != self.frontend.wave_len {
            return schema(
                "/model/wave_len",
                format!("{} differs from frontend wave_len {}", self.model.wave_len, self.frontend.wave_len),
            );
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&serde_json::to_value(self).expect("serializable")).expect("serializable");
        s.push('\n');
        s
    }
}

/// Refuses to reuse a non-empty directory unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut it = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if it.next().is_some() && !force {
            return Err(Error::DirectoryNotEmpty(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Assigns unsplit rows to train/validation by patient; rows that already
/// carry a split keep it.
pub fn assign_splits(entries: &[ManifestEntry], val_fraction: f64, seed: u64) -> Result<Vec<ManifestEntry>> {
    let open: Vec<ManifestEntry> = entries.iter().filter(|e| e.split.is_none()).cloned().collect();
    if open.is_empty() {
        return Ok(entries.to_vec());
    }
    let mut assigned = split_by_patient(&open, val_fraction, seed)?.into_iter();
    Ok(entries
        .iter()
        .map(|e| match e.split {
            Some(_) => e.clone(),
            None => assigned.next().expect("one assignment per open row"),
        })
        .collect())
}

/// Decodes and featurizes the rows of one split.
pub fn load_split(
    entries: &[ManifestEntry],
    base: &Path,
    split: Split,
    featurizer: &Featurizer,
    workers: usize,
) -> Result<Dataset> {
    let rows: Vec<&ManifestEntry> = entries.iter().filter(|e| e.split == Some(split)).collect();
    if rows.is_empty() {
        return Err(Error::EmptySplit(format!("manifest has no {split} rows")));
    }
    let clips = rows.iter().map(|e| read_wav(e.resolve(base))).collect::<Result<Vec<_>>>()?;
    let features = featurizer.featurize_all(&clips, workers)?;
    let cfg = &featurizer.config;
    Dataset::new(features, rows.iter().map(|e| e.label).collect(), cfg.image_size, cfg.wave_len)
}

fn manifest_base(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: Arch,
    pub seed: u64,
    pub param_count: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub class_weights: [f64; 2],
    /// Metrics of the restored best weights on the validation split.
    pub validation: EvalReport,
}

/// Featurized train and validation splits for a config.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let entries = load_manifest(&cfg.manifest)?;
    let entries = assign_splits(&entries, cfg.val_fraction, cfg.split_seed)?;
    let fz = Featurizer::new(cfg.frontend.clone())?;
    let base = manifest_base(&cfg.manifest);
    let tr = load_split(&entries, base, Split::Train, &fz, cfg.workers)?;
    let va = load_split(&entries, base, Split::Validation, &fz, cfg.workers)?;
    Ok((tr, va))
}

/// Trains one model on already featurized data and writes the fixed output
/// layout into `cfg.out_dir`.
pub fn train_on(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let dir = &cfg.out_dir;
    write(&dir.join(CONFIG_FILE), &cfg.to_json())?;
    let model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let out = train(&model, train_set, val_set, &cfg.train, on_epoch)?;
    write(&dir.join(HISTORY_FILE), &out.history.to_csv())?;
    let meta = json!({
        "frontend": cfg.frontend,
        "train": cfg.train,
        "val_fraction": cfg.val_fraction,
        "split_seed": cfg.split_seed,
        "best_epoch": out.best_epoch,
        "best_val_acc": out.best_val_acc,
    });
    save_checkpoint(dir.join(CHECKPOINT_FILE), &model, meta)?;
    let report = TrainReport {
        arch: cfg.model.arch,
        seed: cfg.train.seed,
        param_count: model.param_count(),
        n_train: train_set.len(),
        n_val: val_set.len(),
        epochs_run: out.history.epochs.len(),
        best_epoch: out.best_epoch,
        best_val_acc: out.best_val_acc,
        class_weights: out.class_weights,
        validation: out.best_report,
    };
    write(&dir.join(REPORT_FILE), &json_text(&report)?)?;
    Ok(report)
}

/// Full training pipeline: manifest, featurization, training, outputs.
pub fn run_train(cfg: &RunConfig, force: bool, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainReport> {
    prepare_out_dir(&cfg.out_dir, force)?;
    let (tr, va) = load_datasets(cfg)?;
    train_on(cfg, &tr, &va, on_epoch)
}

pub fn json_text<S: Serialize>(v: &S) -> Result<String> {
    let v = serde_json::to_value(v).map_err(|e| Error::Argument(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Argument(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Load(format!("checkpoint metadata lacks {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Load(format!("checkpoint metadata {key:?}: {e}")))
}

/// Eval-mode metrics of a checkpoint on one split of a manifest. Unsplit
/// rows are assigned with the split settings recorded at training time.
pub fn run_eval(checkpoint: &Path, manifest: &Path, split: Split, workers: usize) -> Result<EvalReport> {
    let (model, header) = load_checkpoint::<f32>(checkpoint)?;
    let frontend: FrontendConfig = meta_field(&header.meta, "frontend")?;
    let tc: TrainConfig = meta_field(&header.meta, "train")?;
    let val_fraction: f64 = meta_field(&header.meta, "val_fraction")?;
    let split_seed: u64 = meta_field(&header.meta, "split_seed")?;
    if frontend.image_size != model.config.image_size || frontend.wave_len != model.config.wave_len {
        return Err(Error::Load("checkpoint front-end and model shapes disagree".into()));
    }
    let entries = assign_splits(&load_manifest(manifest)?, val_fraction, split_seed)?;
    let fz = Featurizer::new(frontend)?;
    let data = load_split(&entries, manifest_base(manifest), split, &fz, workers.max(1))?;
    let weights = if data.labels.contains(&0) && data.labels.contains(&1) {
        tc.resolve_weights(&data.labels).unwrap_or([1.0, 1.0])
    } else {
        [1.0, 1.0]
    };
    let (_, _, report) = evaluate(&model, &data, tc.eval_batch_size, weights)?;
    Ok(report)
}

/// Writes a synthetic dataset into `dir`.
pub fn run_synth(dir: &Path, spec: &SynthSpec, val_fraction: f64, force: bool, workers: usize) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    prepare_out_dir(dir, force)?;
    let exec = if workers > 1 { Execution::auto() } else { Execution::Sequential };
    write_synthetic_dataset(dir, spec, val_fraction, exec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Value {
        json!({"manifest": "m.csv", "out_dir": "out", "preset": "desk"})
    }

    #[test]
    fn presets_and_overrides() {
        let c = RunConfig::resolve(base(), &Overrides::default(), None).unwrap();
        assert_eq!(c.model, ModelConfig::desk());
        assert_eq!((c.val_fraction, c.workers, c.train.seed), (0.2, 1, 0));
        let mut doc = base();
        doc["model"] = json!({"depth": 1});
        let ov = Overrides {
            arch: Some(Arch::CnnOnly),
            ..Default::default()
        };
        let c = RunConfig::resolve(doc, &ov, Some("9")).unwrap();
        assert_eq!((c.model.depth, c.model.arch, c.model.embed_dim, c.train.seed), (1, Arch::CnnOnly, 64, 9));
        let mut doc = base();
        doc["train"] = json!({"seed": 4});
        assert_eq!(RunConfig::resolve(doc.clone(), &Overrides::default(), Some("9")).unwrap().train.seed, 4);
        let ov = Overrides {
            seed: Some(5),
            ..Default::default()
        };
        assert_eq!(RunConfig::resolve(doc, &ov, Some("9")).unwrap().train.seed, 5);
        assert!(RunConfig::resolve(base(), &Overrides::default(), Some("x")).is_err());
    }

    #[test]
    fn schema_pointers() {
        let ptr = |doc: Value| match RunConfig::resolve(doc, &Overrides::default(), None) {
            Err(Error::Schema { pointer, .. }) => pointer,
            other => panic!("{other:?}"),
        };
        let mut d = base();
        d["model"] = json!({"embed_dim": "wide"});
        assert_eq!(ptr(d), "/model/embed_dim");
        let mut d = base();
        d["train"] = json!({"lerning_rate": 1.0});
        assert_eq!(ptr(d), "/train/lerning_rate");
        let mut d = base();
        d["frontend"] = json!({"stft": {"n_fft": 256, "hop": 64, "window": "box"}});
        assert_eq!(ptr(d), "/frontend/stft/window");
        let mut d = base();
        d["model"] = json!({"image_size": 32});
        assert_eq!(ptr(d), "/model/image_size");
        let mut d = base();
        d["colour"] = json!(1);
        assert_eq!(ptr(d), "/colour");
        assert_eq!(ptr(json!({"out_dir": "o", "preset": "desk"})), "");
        assert_eq!(ptr(json!([1])), "");
    }

    #[test]
    fn split_assignment_keeps_existing() {
        let e = |p: &str, s: Option<Split>| ManifestEntry {
            path: PathBuf::from(format!("{p}.wav")),
            label: 0,
            patient_id: p.into(),
            split: s,
            cue: None,
        };
        let rows = vec![e("a", Some(Split::Test)), e("b", None), e("c", None), e("d", None), e("e", None)];
        let out = assign_splits(&rows, 0.5, 1).unwrap();
        assert_eq!(out[0].split, Some(Split::Test));
        assert!(out.iter().all(|r| r.split.is_some()));
        assert_eq!(out.iter().filter(|r| r.split == Some(Split::Validation)).count(), 2);
        assert_eq!(out, assign_splits(&rows, 0.5, 1).unwrap());
    }

    #[test]
    fn out_dir_refusal() {
        let t = tempfile::tempdir().unwrap();
        let d = t.path().join("o");
        prepare_out_dir(&d, false).unwrap();
        prepare_out_dir(&d, false).unwrap();
        std::fs::write(d.join("x"), "1").unwrap();
        assert!(matches!(prepare_out_dir(&d, false), Err(Error::DirectoryNotEmpty(_))));
        prepare_out_dir(&d, true).unwrap();
    }
}
