//! `brainenc` command-line driver.
//!
//! Layout conventions:
//! - features: `<features_dir>/<source>.<modality>.nmef`
//! - BOLD: `<bold_dir>/<source>.nmeb` (one subject per directory)
//! - predictions: `<out>/predictions/<source>.nmeb`, covering the trailing
//!   rows of the source (the first `n_lags` samples have no full history)
//!
//! Every file is written through a temporary sibling and renamed into place;
//! a lock file keeps two runs out of the same output directory.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use faer::Mat;

use crate::attention::fit_attention_pipeline;
use crate::codec;
use crate::config::{keys_help, Family, RunConfig, Settings};
use crate::data::{
    read_bold_file, read_feature_file, write_bold_file, write_feature_file, BoldSeries, DatasetSplit, Role,
    SourceData,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate, aggregate_rows, export_report, parse_report_csv, score_concatenated, score_parcels, ScoreMeta, ALL};
use crate::linear::{fit_linear_pipeline, predict_matrix, stacked_training_set, LinearPipelineConfig};
use crate::model::EncoderModel;
use crate::synth::{draw_kernel, generate, write_kernel_file, SynthSpec};

pub const LOCK_NAME: &str = ".brainenc.lock";

#[derive(Parser, Debug)]
#[command(name = "brainenc", version, about = "Parcel-wise multimodal fMRI encoding models")]
pub struct Cli {
    /// Config file of `key = value` lines
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the `seed` key
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for dense linear algebra
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides one config key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, manifest and kernel with a known answer
    Synth,
    /// Fit the configured model family on the train split
    Fit,
    /// Write predictions for every source in the evaluated roles
    Predict {
        /// Model bundle written by `fit`
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Score predictions against BOLD data
    Eval {
        /// Directory of prediction files written by `predict`
        #[arg(long, value_name = "DIR")]
        predictions: PathBuf,
    },
    /// Merge report CSVs and tabulate per-source means by model
    Report {
        /// report.csv files written by `eval`
        #[arg(required = true, value_name = "CSV")]
        inputs: Vec<PathBuf>,
    },
}

/// The clap command with the config-key table appended to every
/// subcommand's help.
pub fn command() -> clap::Command {
    let keys = keys_help();
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
    for name in names {
        let keys = keys.clone();
        cmd = cmd.mut_subcommand(name, move |c| c.after_help(keys));
    }
    cmd
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one `error kind=... code=... msg=...` line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let kind = e.kind();
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(
                std::io::stderr(),
                "error kind={} code={} msg={msg:?}",
                kind.as_str(),
                kind.exit_code()
            );
            kind.exit_code()
        }
    }
}

struct OutLock(PathBuf);

impl OutLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is in use (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn execute(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    faer::set_global_parallelism(if cli.jobs == 1 {
        faer::Par::Seq
    } else {
        faer::Par::rayon(cli.jobs)
    });

    let mut settings = Settings::default();
    if let Some(path) = &cli.config {
        settings.apply_file(path)?;
    }
    for kv in &cli.set {
        settings.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        settings.set("seed", &seed.to_string())?;
    }
    let cfg = RunConfig::from_settings(&settings)?;
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))?;

    let _lock = OutLock::acquire(&out)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &out),
        Command::Fit => cmd_fit(&cfg, &out),
        Command::Predict { model } => cmd_predict(&cfg, model, &out),
        Command::Eval { predictions } => cmd_eval(&cfg, predictions, &out),
        Command::Report { inputs } => cmd_report(inputs, &out),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{key} must be set")))
}

fn feature_path(dir: &Path, source: &str, m: crate::data::Modality) -> PathBuf {
    dir.join(format!("{source}.{m}.nmef"))
}

fn bold_path(dir: &Path, source: &str) -> PathBuf {
    dir.join(format!("{source}.nmeb"))
}

fn missing(path: &Path, what: &str) -> Error {
    Error::Dataset(format!("{what} {} does not exist", path.display()))
}

fn load_source(cfg: &RunConfig, id: &str, with_bold: bool) -> Result<SourceData> {
    let fdir = required(&cfg.features_dir, "data.features_dir")?;
    let features = cfg
        .lag
        .modality_order
        .iter()
        .map(|&m| {
            let path = feature_path(fdir, id, m);
            if !path.exists() {
                return Err(missing(&path, "feature file"));
            }
            let f = read_feature_file(&path)?;
            if f.source_id() != id || f.modality() != m {
                return Err(Error::Dataset(format!(
                    "{} holds {} features for {:?}",
                    path.display(),
                    f.modality(),
                    f.source_id()
                )));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let bold = if with_bold {
        let path = bold_path(required(&cfg.bold_dir, "data.bold_dir")?, id);
        if !path.exists() {
            return Err(missing(&path, "BOLD file"));
        }
        let b = read_bold_file(&path)?;
        if b.source_id() != id {
            return Err(Error::Dataset(format!("{} holds BOLD for {:?}", path.display(), b.source_id())));
        }
        Some(b)
    } else {
        None
    };
    SourceData::new(features, bold)
}

fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let path = required(&cfg.manifest, "data.manifest")?;
    if !path.exists() {
        return Err(missing(path, "manifest"));
    }
    DatasetSplit::read(path)
}

fn load_role(cfg: &RunConfig, split: &DatasetSplit, role: Role, with_bold: bool) -> Result<Vec<SourceData>> {
    split.role(role).iter().map(|id| load_source(cfg, id, with_bold)).collect()
}

fn eval_sources(cfg: &RunConfig, split: &DatasetSplit) -> Vec<String> {
    cfg.eval_roles
        .iter()
        .flat_map(|&r| split.role(r).iter().cloned())
        .collect()
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = &cfg.synth;
    let features_dir = out.join("features");
    let bold_dir = out.join("bold");
    for d in [&features_dir, &bold_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let kernel_dim = s.n_lags_true * (s.d_visual + s.d_audio);
    let kernel = draw_kernel(s.n_parcels, kernel_dim, cfg.seed);
    let mut split = DatasetSplit::default();
    let groups = [
        (Role::Train, "train", s.n_train),
        (Role::Val, "val", s.n_val),
        (Role::TestId, "tid", s.n_test_id),
        (Role::TestOod, "tood", s.n_test_ood),
    ];
    let mut index = 0u64;
    for (role, prefix, count) in groups {
        for i in 0..count {
            index += 1;
            let id = format!("{prefix}-{i:03}");
            let mut spec = SynthSpec::new(
                s.t_samples,
                s.d_visual,
                s.d_audio,
                s.n_parcels,
                s.n_lags_true,
                s.snr,
                cfg.seed.wrapping_add(index),
            );
            spec.kernel = Some(kernel.clone());
            spec.source_id = id.clone();
            spec.subject_id = s.subject.clone();
            spec.tr = s.tr;
            if role == Role::TestOod && s.ood_ar1 != 0.0 {
                spec.ar1 = Some(s.ood_ar1);
            }
            let g = generate(&spec).map_err(|e| match e {
                Error::InvalidArgument(m) | Error::Shape(m) => Error::Config(format!("synth: {m}")),
                other => other,
            })?;
            write_feature_file(&g.visual, feature_path(&features_dir, &id, g.visual.modality()))?;
            write_feature_file(&g.audio, feature_path(&features_dir, &id, g.audio.modality()))?;
            write_bold_file(&g.bold, bold_path(&bold_dir, &id))?;
            match role {
                Role::Train => split.train.push(id),
                Role::Val => split.validation.push(id),
                Role::TestId => split.test_id.push(id),
                Role::TestOod => split.test_ood.push(id),
            }
        }
    }
    write_kernel_file(&kernel, out.join("kernel.nmek"))?;
    split.write(out.join("manifest.tsv"))?;
    let data_cfg = format!(
        "data.manifest = manifest.tsv\ndata.features_dir = features\ndata.bold_dir = bold\nlag.n_lags = {}\nlag.modalities = visual,audio\n",
        s.n_lags_true
    );
    codec::write_atomic(&out.join("data.cfg"), data_cfg.as_bytes())
}

fn mse(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    (a - b).squared_norm_l2() / (a.nrows() * a.ncols()) as f64
}

fn cmd_fit(cfg: &RunConfig, out: &Path) -> Result<()> {
    let split = load_split(cfg)?;
    let train = load_role(cfg, &split, Role::Train, true)?;
    let val = load_role(cfg, &split, Role::Val, true)?;
    match cfg.family {
        Family::Linear => {
            let pcfg = LinearPipelineConfig {
                k_per_modality: cfg.k_per_modality.clone(),
                whiten: cfg.whiten,
                lag_config: cfg.lag.clone(),
                ridge_lambda: cfg.ridge_lambda,
            };
            let model = fit_linear_pipeline(&train, &pcfg)?;
            let prep = model.prep().expect("pipeline models carry their preparation");
            let mut log = String::from("split,n_rows,mse\n");
            for (name, sources) in [("train", &train), ("val", &val)] {
                if sources.is_empty() {
                    continue;
                }
                let (x, y) = stacked_training_set(prep, sources)?;
                let pred = predict_matrix(&model, &x)?;
                log.push_str(&format!("{name},{},{:.16e}\n", y.nrows(), mse(&pred, &y)));
            }
            model.save(out.join("model.nmel"))?;
            codec::write_atomic(&out.join("fit_log.csv"), log.as_bytes())
        }
        Family::Attention => {
            let (model, log) = fit_attention_pipeline(
                &train,
                &val,
                &cfg.k_per_modality,
                cfg.whiten,
                &cfg.lag,
                &cfg.attention,
            )?;
            model.save(out.join("model.nmea"))?;
            codec::write_atomic(&out.join("fit_log.csv"), log.to_csv().as_bytes())
        }
    }
}

fn cmd_predict(cfg: &RunConfig, model_path: &Path, out: &Path) -> Result<()> {
    let model = EncoderModel::load(model_path)?;
    let split = load_split(cfg)?;
    let ids = eval_sources(cfg, &split);
    if ids.is_empty() {
        return Err(Error::Dataset("no sources in the evaluated roles".into()));
    }
    let sources = ids
        .iter()
        .map(|id| load_source(cfg, id, false))
        .collect::<Result<Vec<_>>>()?;
    let dir = out.join("predictions");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for s in &sources {
        let (_, pred) = model.predict_source(s)?;
        let tr = s.features()[0].tr();
        let series = BoldSeries::new(tr, s.source_id(), "", pred)?;
        write_bold_file(&series, bold_path(&dir, s.source_id()))?;
    }
    Ok(())
}

fn trailing_rows(m: &Mat<f64>, n: usize) -> Mat<f64> {
    m.as_ref().subrows(m.nrows() - n, n).to_owned()
}

fn cmd_eval(cfg: &RunConfig, predictions: &Path, out: &Path) -> Result<()> {
    let split = load_split(cfg)?;
    let ids = eval_sources(cfg, &split);
    if ids.is_empty() {
        return Err(Error::Dataset("no sources in the evaluated roles".into()));
    }
    let bold_dir = required(&cfg.bold_dir, "data.bold_dir")?;
    let mut pairs = Vec::with_capacity(ids.len());
    let mut subject = None::<String>;
    for id in &ids {
        let ppath = bold_path(predictions, id);
        if !ppath.exists() {
            return Err(missing(&ppath, "prediction file"));
        }
        let pred = read_bold_file(&ppath)?;
        let apath = bold_path(bold_dir, id);
        if !apath.exists() {
            return Err(missing(&apath, "BOLD file"));
        }
        let actual = read_bold_file(&apath)?;
        if pred.n_parcels() != actual.n_parcels() || pred.t_samples() > actual.t_samples() {
            return Err(Error::Dataset(format!(
                "prediction for {id:?} is {}×{} but BOLD is {}×{}",
                pred.t_samples(),
                pred.n_parcels(),
                actual.t_samples(),
                actual.n_parcels()
            )));
        }
        let subj = if actual.subject_id().is_empty() {
            cfg.subject.clone().unwrap_or_else(|| "unknown".into())
        } else {
            actual.subject_id().to_string()
        };
        match &subject {
            Some(s) if *s != subj => {
                return Err(Error::Dataset(format!(
                    "BOLD directory mixes subjects {s:?} and {subj:?}"
                )))
            }
            _ => subject = Some(subj),
        }
        let a = trailing_rows(actual.values(), pred.t_samples());
        pairs.push((id.clone(), pred.values().clone(), a));
    }
    let subject = subject.expect("at least one source");
    let scores = if cfg.eval_concat {
        let refs: Vec<(&Mat<f64>, &Mat<f64>)> = pairs.iter().map(|(_, p, a)| (p, a)).collect();
        vec![score_concatenated(&refs, &subject, &cfg.model_tag)?]
    } else {
        pairs
            .iter()
            .map(|(id, p, a)| score_parcels(p, a, ScoreMeta::new(subject.as_str(), id.as_str(), cfg.model_tag.as_str())))
            .collect::<Result<Vec<_>>>()?
    };
    export_report(&aggregate(&scores)?, out)
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for path in inputs {
        let bytes = codec::read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Dataset(format!("{} is not UTF-8", path.display())))?;
        rows.extend(parse_report_csv(&text)?.into_iter().filter(|r| !r.is_aggregate()));
    }
    let report = aggregate_rows(rows)?;
    codec::write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;

    let mut models: Vec<&str> = report.aggregates.iter().map(|r| r.meta.model_tag.as_str()).collect();
    models.sort_unstable();
    models.dedup();
    let mut sources: Vec<&str> = report
        .aggregates
        .iter()
        .filter(|r| r.meta.subject_id == ALL && r.meta.source_id != ALL)
        .map(|r| r.meta.source_id.as_str())
        .collect();
    sources.sort_unstable();
    sources.dedup();
    sources.push(ALL);
    let mut table = format!("source_id,{}\n", models.join(","));
    for src in sources {
        table.push_str(src);
        for m in &models {
            let v = report
                .aggregates
                .iter()
                .find(|r| r.meta.subject_id == ALL && r.meta.source_id == src && r.meta.model_tag == *m)
                .map_or(String::new(), |r| format!("{:.16e}", r.mean_rho));
            table.push(',');
            table.push_str(&v);
        }
        table.push('\n');
    }
    codec::write_atomic(&out.join("table.csv"), table.as_bytes())
}
