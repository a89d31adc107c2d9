//! Subcommands. Everything a run produces lives under `out_dir`:
//!
//! ```text
//! config.toml                 resolved configuration
//! manifests/<command>.toml    config, seeds, version and timings of each command
//! dataset/{train,test}/       paired samples
//! checkpoints/{wtconv,plain}.ckpt   plus .toml metadata, .run.toml config stamp, .losses.csv
//! recon/<method>/img_NNNNN.bin
//! recon/<method>/times.csv
//! eval/metrics.csv            mean/std PSNR and SSIM per method and angle range
//! eval/timings.csv
//! eval/<method>_<start>-<end>.csv   per-image reports
//! eval/residuals/<method>/img_NNNNN.bin
//! ablation/<kind>.csv, ablation/<kind>.svg
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use pwd_lact::data::{generate_dataset, load_dataset, persist_dataset, PairedSample};
use pwd_lact::diffusion::{train, Checkpoint, CODE_VERSION};
use pwd_lact::eval::{
    ablate, evaluate, reconstruct, AblationContext, AblationKind, Method, ModelEntry, ReconReport,
};
use pwd_lact::sampler::{sample, SampleConfig};
use pwd_lact::tomo::io::{read_image, write_image};
use pwd_lact::tomo::AngleRange;
use serde::Serialize;

use crate::config::{MethodName, RunConfig, CONFIG_ECHO};

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Dataset,
    Train {
        /// Overrides `train.wtconv`.
        wtconv: Option<bool>,
        /// Retrain even if a matching checkpoint exists.
        force: bool,
    },
    Reconstruct(ReconstructArgs),
    Evaluate,
    Ablate { kind: AblationKind },
    Pipeline,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconstructArgs {
    pub checkpoint: Option<PathBuf>,
    /// Reconstruct this single prior image instead of the test set.
    pub prior: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
    pub w: Option<f64>,
    pub seed: Option<u64>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Dataset => "dataset",
            Command::Train { .. } => "train",
            Command::Reconstruct(_) => "reconstruct",
            Command::Evaluate => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::Pipeline => "pipeline",
        }
    }
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("dataset/train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.root.join("dataset/test")
    }

    pub fn checkpoint(&self, wtconv: bool) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(if wtconv { "wtconv.ckpt" } else { "plain.ckpt" })
    }

    pub fn recon_dir(&self, method: MethodName) -> PathBuf {
        self.root.join("recon").join(method.as_str())
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn metrics(&self) -> PathBuf {
        self.eval_dir().join("metrics.csv")
    }

    pub fn ablation(&self, kind: AblationKind, ext: &str) -> PathBuf {
        self.root.join("ablation").join(format!("{kind}.{ext}"))
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{name}.toml"))
    }
}

fn image_name(k: usize) -> String {
    format!("img_{k:05}.bin")
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: String,
    code_version: &'a str,
    finished_unix: u64,
    seeds: BTreeMap<&'static str, u64>,
    timings_seconds: BTreeMap<String, f64>,
    outputs: Vec<String>,
    config: &'a RunConfig,
}

/// Collects timings and outputs of one command and writes its manifest.
struct Recorder<'a> {
    cfg: &'a RunConfig,
    layout: &'a Layout,
    timings: BTreeMap<String, f64>,
    outputs: Vec<String>,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a RunConfig, layout: &'a Layout) -> Self {
        Self {
            cfg,
            layout,
            timings: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        self.timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
        Ok(out)
    }

    fn output(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.layout.root).unwrap_or(path);
        self.outputs.push(rel.display().to_string());
    }

    fn finish(self, name: &str) -> Result<()> {
        let seeds = BTreeMap::from([
            ("global", self.cfg.seed),
            ("dataset", self.cfg.dataset_seed()),
            ("train", self.cfg.train_seed()),
            ("sample", self.cfg.sample_seed()),
        ]);
        let m = Manifest {
            command: name.to_string(),
            code_version: CODE_VERSION,
            finished_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            seeds,
            timings_seconds: self.timings,
            outputs: self.outputs,
            config: self.cfg,
        };
        write_text(&self.layout.manifest(name), &toml::to_string(&m)?)
    }
}

#[derive(Serialize)]
struct SingleReport {
    checkpoint: String,
    prior: String,
    seconds: f64,
    sample: SampleConfig,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Runs one command against `cfg`, writing everything under `cfg.out_dir`.
pub fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    write_text(&layout.root.join(CONFIG_ECHO), &cfg.echo())?;
    let mut rec = Recorder::new(cfg, &layout);
    let manifest_name = match cmd {
        Command::Dataset => {
            rec.time("dataset", |r| cmd_dataset(cfg, r))?;
            "dataset".to_string()
        }
        Command::Train { wtconv, force } => {
            let wt = wtconv.unwrap_or(cfg.train.wtconv);
            rec.time("train", |r| cmd_train(cfg, wt, *force, r))?;
            format!("train_{}", if wt { "wtconv" } else { "plain" })
        }
        Command::Reconstruct(args) => {
            rec.time("reconstruct", |r| cmd_reconstruct(cfg, args, r))?;
            "reconstruct".to_string()
        }
        Command::Evaluate => {
            rec.time("evaluate", |r| cmd_evaluate(cfg, r))?;
            "evaluate".to_string()
        }
        Command::Ablate { kind } => {
            rec.time("ablate", |r| cmd_ablate(cfg, *kind, r))?;
            format!("ablate_{kind}")
        }
        Command::Pipeline => {
            rec.time("dataset", |r| cmd_dataset(cfg, r))?;
            rec.time("train", |r| cmd_train(cfg, cfg.train.wtconv, false, r))?;
            rec.time("reconstruct", |r| cmd_reconstruct(cfg, &ReconstructArgs::default(), r))?;
            rec.time("evaluate", |r| cmd_evaluate(cfg, r))?;
            "pipeline".to_string()
        }
    };
    rec.finish(&manifest_name)
}

fn cmd_dataset(cfg: &RunConfig, rec: &mut Recorder) -> Result<()> {
    let ds = generate_dataset(&cfg.dataset_spec()?)?;
    for (dir, split) in [(rec.layout.train_dir(), &ds.train), (rec.layout.test_dir(), &ds.test)] {
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("cannot clear {}", dir.display()))?;
        }
        persist_dataset(split, &dir)?;
        rec.output(&dir);
    }
    eprintln!("dataset: {} train / {} test pairs", ds.train.len(), ds.test.len());
    Ok(())
}

fn load_split(dir: &Path) -> Result<Vec<PairedSample>> {
    if !dir.exists() {
        bail!("dataset not found at {} (run `pwd-lact dataset` first)", dir.display());
    }
    Ok(load_dataset(dir)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        bail!("checkpoint not found: {} (run `pwd-lact train` first)", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn cmd_train(cfg: &RunConfig, wtconv: bool, force: bool, rec: &mut Recorder) -> Result<()> {
    let path = rec.layout.checkpoint(wtconv);
    let tc = cfg.train_config(wtconv);
    let stamp = path.with_extension("run.toml");
    if !force && reusable(&path, &stamp, cfg, &tc) {
        eprintln!("train: reusing {}", path.display());
        rec.output(&path);
        return Ok(());
    }
    let data = load_split(&rec.layout.train_dir())?;
    let every = (tc.steps / 20).max(1);
    let start = Instant::now();
    let ckpt_dir = path.with_extension("steps");
    let out = train(&data, &tc, Some(&ckpt_dir), |step, loss| {
        if step % every == 0 || step + 1 == tc.steps {
            eprintln!("train: step {step} loss {loss:.5} ({:.0}s)", start.elapsed().as_secs_f64());
        }
    })?;
    out.checkpoint.save(&path)?;
    write_text(&stamp, &cfg.echo())?;
    let losses: String = out.losses.iter().enumerate().map(|(k, l)| format!("{k},{l}\n")).collect();
    let loss_path = path.with_extension("losses.csv");
    write_text(&loss_path, &format!("step,loss\n{losses}"))?;
    rec.output(&path);
    rec.output(&loss_path);
    Ok(())
}

/// True when `path` holds a finished checkpoint whose recorded run config
/// (`stamp`) agrees with `cfg` on everything that feeds training.
fn reusable(path: &Path, stamp: &Path, cfg: &RunConfig, tc: &pwd_lact::diffusion::TrainConfig) -> bool {
    let Ok(text) = fs::read_to_string(stamp) else {
        return false;
    };
    let Ok(prev) = RunConfig::parse(&text) else {
        return false;
    };
    let training_inputs = |c: &RunConfig| {
        let mut c = c.clone();
        c.out_dir = PathBuf::new();
        c.sample = Default::default();
        c.eval = Default::default();
        c.train.wtconv = false;
        c
    };
    if training_inputs(&prev) != training_inputs(cfg) {
        return false;
    }
    match Checkpoint::load(path) {
        Ok(ck) => ck.config == *tc && ck.steps_done == tc.steps,
        Err(_) => false,
    }
}

fn method_for<'a>(
    name: MethodName,
    cfg: &RunConfig,
    model: Option<&'a (Checkpoint, pwd_lact::diffusion::NoiseSchedule)>,
    sample_cfg: SampleConfig,
) -> Result<Method<'a>> {
    Ok(match name {
        MethodName::Fbp => Method::Fbp,
        MethodName::Tv => Method::Tv(cfg.eval.tv),
        MethodName::Ddim | MethodName::Pwd => {
            let (ck, schedule) = model.context("diffusion method without a model")?;
            let config = SampleConfig {
                guidance_weight: if name == MethodName::Ddim { 0.0 } else { sample_cfg.guidance_weight },
                ..sample_cfg
            };
            Method::Diffusion {
                model: ck,
                schedule,
                config,
            }
        }
    })
}

fn cmd_reconstruct(cfg: &RunConfig, args: &ReconstructArgs, rec: &mut Recorder) -> Result<()> {
    let mut sample_cfg = cfg.sample_config();
    if let Some(k) = args.steps {
        sample_cfg.n_steps = k;
    }
    if let Some(w) = args.w {
        sample_cfg.guidance_weight = w;
    }
    if let Some(s) = args.seed {
        sample_cfg.seed = s;
    }
    let ckpt_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| rec.layout.checkpoint(cfg.train.wtconv));

    if let Some(prior_path) = &args.prior {
        let ck = load_checkpoint(&ckpt_path)?;
        let prior = read_image(prior_path).with_context(|| format!("cannot read prior {}", prior_path.display()))?;
        let out = args
            .out
            .clone()
            .unwrap_or_else(|| rec.layout.root.join("recon/single.bin"));
        let schedule = ck.schedule()?;
        let start = Instant::now();
        let img = sample(&ck, &prior, &schedule, &sample_cfg)?;
        let seconds = start.elapsed().as_secs_f64();
        write_image(&out, &img)?;
        let report = SingleReport {
            checkpoint: ckpt_path.display().to_string(),
            prior: prior_path.display().to_string(),
            seconds,
            sample: sample_cfg,
        };
        let report_path = out.with_extension("report.toml");
        write_text(&report_path, &toml::to_string(&report)?)?;
        rec.output(&out);
        rec.output(&report_path);
        return Ok(());
    }
    if args.out.is_some() {
        bail!("--out is only valid together with --prior");
    }

    let test = load_split(&rec.layout.test_dir())?;
    let model = if cfg.eval.methods.iter().any(|m| m.needs_model()) {
        let ck = load_checkpoint(&ckpt_path)?;
        let schedule = ck.schedule()?;
        Some((ck, schedule))
    } else {
        None
    };
    for &name in &cfg.eval.methods {
        let method = method_for(name, cfg, model.as_ref(), sample_cfg)?;
        let start = Instant::now();
        let out = reconstruct(&method, &test, cfg.eval.parallel)?;
        eprintln!("reconstruct: {name} done in {:.1}s", start.elapsed().as_secs_f64());
        let dir = rec.layout.recon_dir(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("cannot clear {}", dir.display()))?;
        }
        for (k, img) in out.images.iter().enumerate() {
            write_image(&dir.join(image_name(k)), img)?;
        }
        let mut times = String::from("index,seconds\n");
        for k in 0..out.images.len() {
            let s = out.seconds.as_ref().map(|s| s[k].to_string()).unwrap_or_default();
            times.push_str(&format!("{k},{s}\n"));
        }
        write_text(&dir.join("times.csv"), &times)?;
        rec.output(&dir);
    }
    Ok(())
}

fn read_times(path: &Path, n: usize) -> Result<Option<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = Vec::with_capacity(n);
    for rec in r.records() {
        let rec = rec.with_context(|| format!("bad row in {}", path.display()))?;
        match &rec[1] {
            "" => return Ok(None),
            v => out.push(v.parse::<f64>().with_context(|| format!("bad time in {}", path.display()))?),
        }
    }
    if out.len() != n {
        bail!("{} lists {} images, expected {n}", path.display(), out.len());
    }
    Ok(Some(out))
}

fn range_tag(r: &AngleRange) -> String {
    format!("{}-{}", r.start, r.end)
}

fn cmd_evaluate(cfg: &RunConfig, rec: &mut Recorder) -> Result<()> {
    let test = load_split(&rec.layout.test_dir())?;
    let ranges = cfg.angle_ranges()?;
    let eval_dir = rec.layout.eval_dir();
    let mut metrics = csv::Writer::from_writer(Vec::new());
    metrics.write_record([
        "method",
        "angle_start",
        "angle_end",
        "count",
        "mean_psnr_db",
        "std_psnr_db",
        "mean_ssim",
        "std_ssim",
    ])?;
    let mut timings = String::from("method,angle_start,angle_end,mean_seconds\n");
    for &name in &cfg.eval.methods {
        let dir = rec.layout.recon_dir(name);
        if !dir.exists() {
            bail!("reconstructions for {name} not found at {} (run `pwd-lact reconstruct` first)", dir.display());
        }
        let times = read_times(&dir.join("times.csv"), test.len())?;
        for range in &ranges {
            let idx: Vec<usize> = (0..test.len()).filter(|&k| test[k].angle_range == *range).collect();
            let recons = idx
                .iter()
                .map(|&k| read_image(&dir.join(image_name(k))))
                .collect::<pwd_lact::Result<Vec<_>>>()?;
            let refs: Vec<_> = idx.iter().map(|&k| test[k].target.clone()).collect();
            let secs: Option<Vec<f64>> = times.as_ref().map(|t| idx.iter().map(|&k| t[k]).collect());
            let label = format!("{name} {range}");
            let mut ev = evaluate(&recons, &refs, &label)?.with_seconds(secs.as_deref())?;
            ev.report.config = report_config(cfg, name)?;
            let tag = format!("{name}_{}", range_tag(range));
            let path = eval_dir.join(format!("{tag}.csv"));
            ev.report.save(&path)?;
            rec.output(&path);
            for (res, &k) in ev.residuals.iter().zip(&idx) {
                write_image(&eval_dir.join("residuals").join(name.as_str()).join(image_name(k)), res)?;
            }
            let s = ev.report.summary();
            metrics.write_record([
                name.to_string(),
                range.start.to_string(),
                range.end.to_string(),
                s.count.to_string(),
                s.mean_psnr.to_string(),
                s.std_psnr.to_string(),
                s.mean_ssim.to_string(),
                s.std_ssim.to_string(),
            ])?;
            let mean_s = s.mean_seconds.map(|v| v.to_string()).unwrap_or_default();
            timings.push_str(&format!("{name},{},{},{mean_s}\n", range.start, range.end));
            eprintln!(
                "evaluate: {name:>4} {range:<10} PSNR {:6.2} dB  SSIM {:.4}",
                s.mean_psnr, s.mean_ssim
            );
        }
    }
    let table = String::from_utf8(metrics.into_inner()?)?;
    write_text(&rec.layout.metrics(), &table)?;
    write_text(&eval_dir.join("timings.csv"), &timings)?;
    rec.output(&rec.layout.metrics());
    Ok(())
}

fn report_config(cfg: &RunConfig, name: MethodName) -> Result<toml::Table> {
    let mut t = toml::Table::new();
    t.insert("method".into(), name.as_str().into());
    t.insert("seed".into(), toml::Value::Integer(cfg.seed as i64));
    match name {
        MethodName::Fbp => {}
        MethodName::Tv => {
            t.insert("tv".into(), toml::Value::try_from(cfg.eval.tv)?);
        }
        MethodName::Ddim | MethodName::Pwd => {
            let mut s = cfg.sample.clone();
            if name == MethodName::Ddim {
                s.guidance_weight = 0.0;
            }
            t.insert("sample".into(), toml::Value::try_from(s)?);
        }
    }
    Ok(t)
}

fn cmd_ablate(cfg: &RunConfig, kind: AblationKind, rec: &mut Recorder) -> Result<()> {
    let test = load_split(&rec.layout.test_dir())?;
    // Ablations use the first configured angle range.
    let range = cfg.angle_ranges()?[0];
    let subset: Vec<PairedSample> = test.into_iter().filter(|s| s.angle_range == range).collect();
    let (grid, wanted): (Vec<f64>, Vec<bool>) = match kind {
        AblationKind::GuidanceWeight => (cfg.eval.guidance_grid.clone(), vec![cfg.train.wtconv]),
        AblationKind::StepCount => (cfg.eval.step_grid.iter().map(|&k| k as f64).collect(), vec![cfg.train.wtconv]),
        AblationKind::Wtconv => (cfg.eval.wtconv_grid.iter().map(|&k| k as f64).collect(), vec![true, false]),
    };
    let ckpts = wanted
        .iter()
        .map(|&wt| load_checkpoint(&rec.layout.checkpoint(wt)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&str> = wanted.iter().map(|&wt| if wt { "wtconv" } else { "plain" }).collect();
    let ctx = AblationContext {
        models: ckpts
            .iter()
            .zip(&labels)
            .map(|(c, l)| ModelEntry { label: l, checkpoint: c })
            .collect(),
        test: &subset,
        base: cfg.sample_config(),
        parallel: cfg.eval.parallel,
    };
    let table = ablate(kind, &grid, &ctx)?;
    let csv_path = rec.layout.ablation(kind, "csv");
    table.write_csv(&csv_path)?;
    table.write_plot(&rec.layout.ablation(kind, "svg"))?;
    let detail = rec.layout.root.join("ablation").join(kind.as_str());
    for (k, report) in table.reports.iter().enumerate() {
        report.save(&detail.join(format!("row_{k:02}.csv")))?;
    }
    for r in &table.rows {
        eprintln!(
            "ablate: {kind} {:>6} = {:<6} PSNR {:6.2} dB  SSIM {:.4}  {}",
            r.model,
            r.value,
            r.summary.mean_psnr,
            r.summary.mean_ssim,
            r.summary.mean_seconds.map(|s| format!("{s:.2}s/img")).unwrap_or_default()
        );
    }
    rec.output(&csv_path);
    Ok(())
}

/// Loads a per-image report written by `evaluate`.
pub fn load_report(layout: &Layout, method: MethodName, range: &AngleRange) -> Result<ReconReport> {
    let path = layout.eval_dir().join(format!("{method}_{}.csv", range_tag(range)));
    Ok(ReconReport::load(&path)?)
}
