use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DataSource, ExperimentConfig};
use crate::baselines::{
    badt_unlearn, neggrad_unlearn, negkl_unlearn, receraser_plan, sisa_train, sisa_unlearn,
    Method, ShardPlan,
};
use crate::data::{load_interactions, BundleOptions, DatasetBundle};
use crate::error::{Error, Result};
use crate::eval::{acc, auc, logloss, paired_divergence, render_table, time_and_count, MetricsReport, LOG_BASE};
use crate::model::{train_original, ClickScorer, ModelConfig, ModelParams, ParamCount, TrainMode, TrainReport};
use crate::unlearn::{run_e2urec, UnlearnConfig};

pub const BUNDLE_FILE: &str = "bundle.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RENDERED_FILE: &str = "rendered.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const REPORTS_DIR: &str = "reports";
pub const COMPARISON_FILE: &str = "comparison.txt";
pub const ABLATION_FILE: &str = "ablation.txt";

/// Row labels of the ablation table.
pub const ABLATION_LABELS: [&str; 3] = ["E2URec", "w/o L_FGT", "w/o L_REM"];

/// Content hashes and split sizes of a prepared bundle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub data_digest: String,
    pub files: BTreeMap<String, String>,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub forgotten: usize,
    pub retained: usize,
    pub forgotten_users: usize,
    pub vocab_size: usize,
}

/// Sidecar written next to a cached model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    training_digest: String,
    wall_time_seconds: f64,
    report: TrainReport,
}

fn file_sha(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn scored_fields(
    m: &dyn ClickScorer,
    bundle: &DatasetBundle,
    reference: Option<&ModelParams>,
) -> Result<(f64, f64, f64, Option<(f64, f64)>)> {
    let labels: Vec<u8> = bundle.test.iter().map(|s| s.label).collect();
    let scores = m.scores(&bundle.test)?;
    let div = match reference {
        Some(r) => Some(paired_divergence(&m.scores(&bundle.forgotten)?, &r.scores(&bundle.forgotten)?)?),
        None => None,
    };
    Ok((auc(&scores, &labels)?, acc(&scores, &labels, 0.5)?, logloss(&scores, &labels)?, div))
}

/// Outcome of one unlearning method.
enum Unlearned {
    Single(ModelParams),
    Ensemble(crate::baselines::ShardEnsemble),
    Reference,
}

/// One experiment rooted at an output directory. Data, the original model
/// and the retrained reference are built once and cached on disk.
pub struct Experiment {
    config: ExperimentConfig,
    out: PathBuf,
    bundle: Option<DatasetBundle>,
    original: Option<(ModelParams, f64)>,
    reference: Option<(ModelParams, f64)>,
    /// Number of times the original model was trained (not loaded).
    pub original_trainings: usize,
}

impl Experiment {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let out = config.out_dir.clone();
        std::fs::create_dir_all(out.join(REPORTS_DIR)).map_err(|e| Error::io(&out, e))?;
        write(&out.join(RESOLVED_CONFIG_FILE), &config.to_toml())?;
        Ok(Self {
            config,
            out,
            bundle: None,
            original: None,
            reference: None,
            original_trainings: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn bundle_options(&self) -> BundleOptions {
        BundleOptions {
            ratios: self.config.data.split,
            forgotten_fraction: self.config.data.forgotten_fraction,
            prompt: self.config.data.prompt,
            seed: self.config.seed,
        }
    }

    /// Builds the bundle from the configured source and writes it with its
    /// manifest.
    pub fn prepare(&mut self, dump_rendered: bool) -> Result<Manifest> {
        let rows = match &self.config.data.source {
            DataSource::Synthetic(spec) => spec.generate()?,
            DataSource::Csv { path, delimiter } => {
                load_interactions(path, &DataSource::csv_format(*delimiter)?)?
            }
        };
        let bundle = DatasetBundle::build(rows, &self.bundle_options())?;
        let path = self.out.join(BUNDLE_FILE);
        bundle.save_json(&path)?;
        let mut files = BTreeMap::from([(BUNDLE_FILE.to_string(), file_sha(&path)?)]);
        if dump_rendered {
            let rendered = self.out.join(RENDERED_FILE);
            bundle.dump_rendered(&rendered)?;
            files.insert(RENDERED_FILE.to_string(), file_sha(&rendered)?);
        }
        let manifest = Manifest {
            data_digest: self.config.data_digest(),
            files,
            train: bundle.train.len(),
            valid: bundle.valid.len(),
            test: bundle.test.len(),
            forgotten: bundle.forgotten.len(),
            retained: bundle.retained.len(),
            forgotten_users: bundle.forgotten_user_ids.len(),
            vocab_size: bundle.vocab.len(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        write(&self.out.join(MANIFEST_FILE), &json)?;
        info!(
            "prepared {} train / {} valid / {} test samples, {} forgotten users",
            manifest.train, manifest.valid, manifest.test, manifest.forgotten_users
        );
        self.bundle = Some(bundle);
        Ok(manifest)
    }

    fn load_cached_bundle(&self) -> Option<DatasetBundle> {
        let text = std::fs::read_to_string(self.out.join(MANIFEST_FILE)).ok()?;
        let manifest: Manifest = serde_json::from_str(&text).ok()?;
        let path = self.out.join(BUNDLE_FILE);
        if manifest.data_digest != self.config.data_digest()
            || manifest.files.get(BUNDLE_FILE) != file_sha(&path).ok().as_ref()
        {
            return None;
        }
        DatasetBundle::load_json(&path).ok()
    }

    /// The prepared bundle, loading or building it on first use.
    pub fn bundle(&mut self) -> Result<&DatasetBundle> {
        if self.bundle.is_none() {
            match self.load_cached_bundle() {
                Some(b) => self.bundle = Some(b),
                None => {
                    self.prepare(false)?;
                }
            }
        }
        Ok(self.bundle.as_ref().expect("bundle ready"))
    }

    /// Model config with the data vocabulary size filled in.
    pub fn model_config(&mut self) -> Result<ModelConfig> {
        let vocab_size = self.bundle()?.vocab.len();
        Ok(ModelConfig { vocab_size, ..self.config.model.clone() })
    }

    fn cached_model(&self, name: &str) -> Option<(ModelParams, f64)> {
        let meta: ModelMeta =
            serde_json::from_str(&std::fs::read_to_string(self.out.join(format!("{name}.json"))).ok()?).ok()?;
        if meta.training_digest != self.config.training_digest() {
            return None;
        }
        let vocab = self.bundle.as_ref()?.vocab.len();
        let model = ModelParams::load_for_vocab(&self.out.join(format!("{name}.ckpt")), vocab).ok()?;
        Some((model, meta.wall_time_seconds))
    }

    fn train_and_cache(&mut self, name: &str, retained_only: bool) -> Result<(ModelParams, f64)> {
        let config = self.model_config()?;
        let bundle = self.bundle.as_ref().expect("bundle ready");
        let train = if retained_only { &bundle.retained } else { &bundle.train };
        let start = Instant::now();
        let (model, report) = train_original(&config, train, &bundle.valid, &self.config.train)?;
        let secs = start.elapsed().as_secs_f64();
        model.save(&self.out.join(format!("{name}.ckpt")))?;
        let meta = ModelMeta {
            training_digest: self.config.training_digest(),
            wall_time_seconds: secs,
            report,
        };
        let json = serde_json::to_string_pretty(&meta).expect("meta serialises");
        write(&self.out.join(format!("{name}.json")), &json)?;
        info!("trained {name} model in {secs:.1}s");
        Ok((model, secs))
    }

    /// The original model trained on all of `train`, loaded from the cache
    /// when present.
    pub fn original(&mut self) -> Result<&ModelParams> {
        if self.original.is_none() {
            self.bundle()?;
            let m = match self.cached_model("original") {
                Some(m) => m,
                None => {
                    self.original_trainings += 1;
                    self.train_and_cache("original", false)?
                }
            };
            self.original = Some(m);
        }
        Ok(&self.original.as_ref().expect("original ready").0)
    }

    /// The retrained reference on the retained set only.
    pub fn reference(&mut self) -> Result<&ModelParams> {
        if self.reference.is_none() {
            self.bundle()?;
            let m = match self.cached_model("retrained") {
                Some(m) => m,
                None => self.train_and_cache("retrained", true)?,
            };
            self.reference = Some(m);
        }
        Ok(&self.reference.as_ref().expect("reference ready").0)
    }

    fn report_for(
        &self,
        label: &str,
        model: &dyn ClickScorer,
        with_divergence: bool,
        wall_time_seconds: f64,
        count: ParamCount,
        digest: String,
    ) -> Result<MetricsReport> {
        let bundle = self.bundle.as_ref().expect("bundle ready");
        let reference = with_divergence.then(|| &self.reference.as_ref().expect("reference ready").0);
        let (auc, acc, logloss, div) = scored_fields(model, bundle, reference)?;
        let r = MetricsReport {
            method: label.to_string(),
            seed: self.config.seed,
            config_digest: digest,
            auc,
            acc,
            logloss,
            jsd: div.map(|d| d.0),
            l2norm: div.map(|d| d.1),
            wall_time_seconds,
            trainable_params: count.trainable,
            total_params: count.total,
            log_base: LOG_BASE.to_string(),
        };
        r.validate()?;
        Ok(r)
    }

    fn unlearn_one(&self, method: Method, ucfg: &UnlearnConfig) -> Result<(Unlearned, ParamCount, f64)> {
        let bundle = self.bundle.as_ref().expect("bundle ready");
        let original = &self.original.as_ref().expect("original ready").0;
        let (d_f, d_r, valid) = (&bundle.forgotten, &bundle.retained, &bundle.valid);
        let fc = &self.config.finetune;
        let full = original.count_params(TrainMode::Full);
        let sharded = |plan: ShardPlan| -> Result<(Unlearned, ParamCount, f64)> {
            let config = original.config().clone();
            let ens = sisa_train(&config, &bundle.train, valid, &plan, &self.config.train)?;
            let (out, cost) = time_and_count(|| {
                let (e, _) = sisa_unlearn(&ens, d_f, valid, &self.config.train)?;
                let n = e.total_params();
                Ok((e, ParamCount { total: n, trainable: n }))
            })?;
            Ok((Unlearned::Ensemble(out), ParamCount { total: cost.total_params, trainable: cost.trainable_params }, cost.wall_time_seconds))
        };
        let single = |f: &dyn Fn() -> Result<ModelParams>| -> Result<(Unlearned, ParamCount, f64)> {
            let (m, cost) = time_and_count(|| Ok((f()?, full)))?;
            Ok((Unlearned::Single(m), full, cost.wall_time_seconds))
        };
        match method {
            Method::Retrain => {
                let secs = self.reference.as_ref().expect("reference ready").1;
                Ok((Unlearned::Reference, full, secs))
            }
            Method::Sisa => sharded(ShardPlan::random(&bundle.train, self.config.sisa.n_shards, self.config.seed)?),
            Method::Receraser => sharded(receraser_plan(&bundle.train, self.config.sisa.n_shards, self.config.seed)?),
            Method::Negkl => single(&|| negkl_unlearn(original, d_f, d_r, fc)),
            Method::Neggrad => single(&|| neggrad_unlearn(original, d_f, d_r, fc)),
            Method::Badt => single(&|| badt_unlearn(original, d_f, d_r, fc)),
            Method::E2urec => {
                let (out, cost) = time_and_count(|| {
                    let o = run_e2urec(original, d_f, d_r, valid, ucfg)?;
                    let c = o.trainable;
                    Ok((o, c))
                })?;
                let log = self.out.join(REPORTS_DIR).join(format!("e2urec_beta{}.log.json", ucfg.beta));
                out.write_log(&log)?;
                let count = ParamCount { total: cost.total_params, trainable: cost.trainable_params };
                Ok((Unlearned::Single(out.model), count, cost.wall_time_seconds))
            }
        }
    }

    fn finish(&self, method: Method, label: &str, digest: String, done: (Unlearned, ParamCount, f64)) -> Result<MetricsReport> {
        let (model, count, secs) = done;
        match &model {
            Unlearned::Single(m) => self.report_for(label, m, true, secs, count, digest),
            Unlearned::Ensemble(e) => self.report_for(label, e, true, secs, count, digest),
            Unlearned::Reference => {
                let r = &self.reference.as_ref().expect("reference ready").0;
                debug_assert_eq!(method, Method::Retrain);
                self.report_for(label, r, false, secs, count, digest)
            }
        }
    }

    fn original_report(&self) -> Result<MetricsReport> {
        let (m, secs) = self.original.as_ref().expect("original ready");
        let count = m.count_params(TrainMode::Full);
        self.report_for("Original", m, false, *secs, count, self.config.digest())
    }

    fn save_reports(&self, rows: &[MetricsReport], prefix: &str) -> Result<()> {
        let dir = self.out.join(REPORTS_DIR);
        for r in rows {
            let key: String = r
                .method
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
                .collect();
            write(&dir.join(format!("{prefix}{key}.json")), &r.to_json())?;
        }
        Ok(())
    }

    /// Runs `methods` from the cached original and writes one report per
    /// method plus the comparison table. The first row is the original model.
    pub fn run(&mut self, methods: &[Method], parallel: bool) -> Result<Vec<MetricsReport>> {
        if methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        self.original()?;
        self.reference()?;
        let digest = self.config.digest();
        let ucfg = self.config.unlearn.clone();
        let done: Vec<Result<(Unlearned, ParamCount, f64)>> = if parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = methods
                    .iter()
                    .map(|&m| {
                        let ucfg = &ucfg;
                        let this = &*self;
                        s.spawn(move || this.unlearn_one(m, ucfg))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("method thread panicked")).collect()
            })
        } else {
            methods
                .iter()
                .map(|&m| {
                    info!("running {}", m.label());
                    self.unlearn_one(m, &ucfg)
                })
                .collect()
        };
        let mut rows = vec![self.original_report()?];
        for (&m, d) in methods.iter().zip(done) {
            rows.push(self.finish(m, m.label(), digest.clone(), d?)?);
        }
        self.save_reports(&rows, "")?;
        write(&self.out.join(COMPARISON_FILE), &render_table(&rows))?;
        Ok(rows)
    }

    /// E2URec with the configured β, with β = 0 (no forgetting loss) and
    /// with β = 1 (no remembering loss).
    pub fn ablate(&mut self) -> Result<Vec<MetricsReport>> {
        self.original()?;
        self.reference()?;
        let mut rows = Vec::with_capacity(3);
        for (label, beta) in ABLATION_LABELS.iter().zip([self.config.unlearn.beta, 0.0, 1.0]) {
            let ucfg = UnlearnConfig { beta, ..self.config.unlearn.clone() };
            let mut variant = self.config.clone();
            variant.unlearn.beta = beta;
            info!("ablation {label} (beta {beta})");
            let done = self.unlearn_one(Method::E2urec, &ucfg)?;
            rows.push(self.finish(Method::E2urec, label, variant.digest(), done)?);
        }
        self.save_reports(&rows, "ablation_")?;
        write(&self.out.join(ABLATION_FILE), &render_table(&rows))?;
        Ok(rows)
    }
}

/// Re-renders the comparison and ablation tables from saved reports.
pub fn render_saved(out_dir: &Path) -> Result<String> {
    let dir = out_dir.join(REPORTS_DIR);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.to_string_lossy().ends_with(".log.json"))
        .collect();
    paths.sort();
    let (mut main, mut abl) = (Vec::new(), Vec::new());
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r = MetricsReport::from_json(&text)?;
        let is_abl = p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("ablation_"));
        if is_abl { abl.push(r) } else { main.push(r) }
    }
    if main.is_empty() && abl.is_empty() {
        return Err(Error::EmptyDataset("saved reports"));
    }
    let order = |r: &MetricsReport| {
        std::iter::once("Original")
            .chain(Method::ALL.iter().map(|m| m.label()))
            .chain(ABLATION_LABELS)
            .position(|l| l == r.method)
            .unwrap_or(usize::MAX)
    };
    main.sort_by_key(order);
    abl.sort_by_key(order);
    let mut out = String::new();
    if !main.is_empty() {
        out += &render_table(&main);
    }
    if !abl.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        out += &render_table(&abl);
    }
    Ok(out)
}
