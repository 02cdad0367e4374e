//! The `catsd` command-line front end.
//!
//! Exit codes: 0 success, 1 failed gradient check or other runtime error,
//! 2 unreadable or malformed config, 3 dataset generation error, 4 missing
//! input file, 5 method or hyperparameter mismatch.

pub mod gradcheck;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::distill::{class_name, ClassTaxonomy, Method};
use crate::harness::reference::{reference_config, write_reference_data};
use crate::harness::{
    continual_train, evaluate, forgetting_summary, load_samples, load_test_sets, robustness_report, spearman, train_stage0,
    ClassGroupMetrics, Corruption, ExperimentConfig, Family, GroupMiou, HarnessError, MetricsReport, RobustnessReport, RobustnessSummary,
    TestSets, SEVERITIES,
};
use crate::segnet::{ModelWeights, SegnetError};
use crate::synth::{synth_dataset, SynthConfig, SynthError};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_GENERATION: i32 = 3;
pub const EXIT_MISSING: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

pub const TEACHER_FILE: &str = "teacher.weights";

#[derive(Debug, Parser)]
#[command(name = "catsd", version, about = "Continual segmentation with class-aware temperature and shifted-feature distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Train the first-stage model.
    Train(Common),
    /// Continue training the first-stage model on new classes.
    Continual {
        #[command(flatten)]
        common: Common,
        /// ft, lwf, ilt, localpod or catsd.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate weights on the configured test sets.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Weights file; defaults to the configured one.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Evaluate weights under input corruptions.
    Robust {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Check every loss gradient against finite differences.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Random instances per loss.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Generate data, train both stages and report forgetting end to end.
    Demo {
        #[command(flatten)]
        common: Common,
    },
}

/// Corruptions and severities swept by `robust`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustSettings {
    pub families: Vec<Family>,
    /// Restricts the sweep to these corruptions when non-empty.
    pub corruptions: Vec<Corruption>,
    pub severities: Vec<u8>,
}

impl Default for RobustSettings {
    fn default() -> Self {
        RobustSettings { families: Family::ALL.to_vec(), corruptions: Vec::new(), severities: SEVERITIES.to_vec() }
    }
}

impl RobustSettings {
    pub fn selected(&self) -> Vec<Corruption> {
        if self.corruptions.is_empty() {
            self.families.iter().flat_map(|f| f.corruptions()).collect()
        } else {
            self.corruptions.clone()
        }
    }
}

/// One run's configuration. The top-level `seed` and `taxonomy` replace those
/// of the `synth` and `experiment` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub taxonomy: ClassTaxonomy,
    pub synth: SynthConfig,
    pub experiment: ExperimentConfig,
    /// First-stage weights read by `continual`; defaults to `<out>/teacher.weights`.
    pub teacher: Option<PathBuf>,
    /// Weights read by `eval` and `robust`; defaults to the teacher.
    pub weights: Option<PathBuf>,
    pub robust: RobustSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("catsd-out"),
            taxonomy: ClassTaxonomy::surgical(),
            synth: SynthConfig::default(),
            experiment: ExperimentConfig::default(),
            teacher: None,
            weights: None,
            robust: RobustSettings::default(),
        }
    }
}

impl RunConfig {
    fn propagate(&mut self) {
        self.synth.seed = self.seed;
        self.synth.taxonomy = self.taxonomy.clone();
        self.experiment.seed = self.seed;
        self.experiment.taxonomy = self.taxonomy.clone();
    }

    fn teacher_path(&self) -> PathBuf {
        self.teacher.clone().unwrap_or_else(|| self.out.join(TEACHER_FILE))
    }
}

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::MissingInput(_) => EXIT_MISSING,
            HarnessError::Hyperparameter(_) => EXIT_MISMATCH,
            HarnessError::Synth(SynthError::Io(io)) | HarnessError::Segnet(SegnetError::Io(io))
                if io.kind() == std::io::ErrorKind::NotFound =>
            {
                EXIT_MISSING
            }
            _ => EXIT_FAILURE,
        };
        CliError::new(code, e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses a run configuration; diagnostics name the offending line and column.
pub fn parse_config(text: &str, origin: &str) -> CliResult<RunConfig> {
    serde_json::from_str(text).map_err(|e| CliError::new(EXIT_CONFIG, format!("{origin}:{}:{}: {e}", e.line(), e.column())))
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", p.display())))?;
            parse_config(&text, &p.display().to_string())?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.propagate();
    Ok(cfg)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display()))
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn load_weights(path: &Path) -> CliResult<ModelWeights> {
    if !path.is_file() {
        return Err(CliError::new(EXIT_MISSING, format!("weights not found: {}", path.display())));
    }
    ModelWeights::load(path).map_err(|e| io_err(path, e))
}

fn save_weights(w: &ModelWeights, path: &Path) -> CliResult<()> {
    w.save(path).map_err(|e| io_err(path, e))
}

fn parse_method(s: &str) -> CliResult<Method> {
    Method::parse(s).ok_or_else(|| CliError::new(EXIT_MISMATCH, format!("unknown method {s:?}; expected ft, lwf, ilt, localpod or catsd")))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Tab-separated group mIoU table, one row per model.
pub fn group_table(rows: &[(String, GroupMiou)]) -> String {
    let mut s = String::from("model\tregular\told\tnew\tall\n");
    for (name, g) in rows {
        let _ = writeln!(s, "{name}\t{}\t{}\t{}\t{}", cell(g.regular), cell(g.old), cell(g.new), cell(g.all));
    }
    s
}

fn class_table(m: &ClassGroupMetrics) -> String {
    let mut s = String::from("class\tname\tiou\n");
    for (c, v) in &m.per_class_iou {
        let _ = writeln!(s, "{c}\t{}\t{v:.4}", class_name(*c));
    }
    s
}

fn check_class_list(w: &ModelWeights, tax: &ClassTaxonomy) -> CliResult<()> {
    if let Some(c) = w.class_list.iter().find(|&&c| c != 0 && !tax.contains(c)) {
        return Err(CliError::new(EXIT_MISMATCH, format!("weights predict class {c}, which the taxonomy lacks")));
    }
    Ok(())
}

fn test_sets(cfg: &RunConfig) -> CliResult<TestSets> {
    if cfg.experiment.test.is_empty() {
        return Err(CliError::new(EXIT_MISSING, "no test manifests configured"));
    }
    Ok(load_test_sets(&cfg.experiment.test)?)
}

fn weights_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_synth(common: &Common) -> CliResult<String> {
    let cfg = load_config(common)?;
    let manifest = synth_dataset(&cfg.synth, &cfg.out).map_err(|e| CliError::new(EXIT_GENERATION, e.to_string()))?;
    let mut s = String::from("class\tname\tinstances\n");
    for (c, n) in &manifest.class_totals {
        let _ = writeln!(s, "{c}\t{}\t{n}", class_name(*c));
    }
    Ok(s)
}

fn cmd_train(common: &Common) -> CliResult<String> {
    let cfg = load_config(common)?;
    cfg.experiment.validate()?;
    let t0 = cfg.experiment.train_t0.as_ref().ok_or_else(|| CliError::new(EXIT_MISSING, "experiment.train_t0 not configured"))?;
    let (_, data) = load_samples(t0)?;
    let validation = cfg.experiment.validation.as_ref().map(|p| load_test_sets(std::slice::from_ref(p))).transpose()?;
    let (w, log) = train_stage0(&cfg.experiment, &data, validation.as_ref())?;
    ensure_dir(&cfg.out)?;
    save_weights(&w, &cfg.out.join(TEACHER_FILE))?;
    write_json(&cfg.out.join("teacher_log.json"), &log)?;
    let last = log.steps.last().map_or(f64::NAN, |s| s.total);
    Ok(format!("model\tsteps\tfinal_loss\nteacher\t{}\t{last:.6}\n", log.steps.len()))
}

fn cmd_continual(common: &Common, method: Option<&str>) -> CliResult<String> {
    let mut cfg = load_config(common)?;
    if let Some(m) = method {
        cfg.experiment.method = parse_method(m)?;
    }
    cfg.experiment.validate()?;
    let teacher = load_weights(&cfg.teacher_path())?;
    if teacher.class_list != cfg.taxonomy.old_model_classes() {
        return Err(CliError::new(EXIT_MISMATCH, format!("teacher classes {:?} do not match the taxonomy", teacher.class_list)));
    }
    let t1 = cfg.experiment.train_t1.as_ref().ok_or_else(|| CliError::new(EXIT_MISSING, "experiment.train_t1 not configured"))?;
    let (_, data) = load_samples(t1)?;
    let validation = cfg.experiment.validation.as_ref().map(|p| load_test_sets(std::slice::from_ref(p))).transpose()?;
    let (w, log) = continual_train(&teacher, &cfg.experiment, &data, validation.as_ref())?;
    ensure_dir(&cfg.out)?;
    let name = cfg.experiment.method.name().to_lowercase();
    save_weights(&w, &cfg.out.join(format!("{name}.weights")))?;
    write_json(&cfg.out.join(format!("{name}_log.json")), &log)?;
    let last = log.steps.last().map_or(f64::NAN, |s| s.total);
    Ok(format!("model\tsteps\tfinal_loss\n{name}\t{}\t{last:.6}\n", log.steps.len()))
}

fn eval_target(cfg: &RunConfig, flag: Option<&PathBuf>) -> PathBuf {
    flag.cloned().or_else(|| cfg.weights.clone()).unwrap_or_else(|| cfg.teacher_path())
}

fn cmd_eval(common: &Common, weights: Option<&PathBuf>) -> CliResult<String> {
    let cfg = load_config(common)?;
    let path = eval_target(&cfg, weights);
    let w = load_weights(&path)?;
    check_class_list(&w, &cfg.taxonomy)?;
    let test = test_sets(&cfg)?;
    let m = evaluate(&w, &test, &cfg.taxonomy)?;
    let method = method_of(&w, &cfg);
    ensure_dir(&cfg.out)?;
    let stem = weights_stem(&path);
    write_json(&cfg.out.join(format!("metrics_{stem}.json")), &MetricsReport::new(method, cfg.seed, &m))?;
    Ok(group_table(&[(stem, m.group_miou)]) + "\n" + &class_table(&m))
}

/// Teacher weights carry no continual method.
fn method_of(w: &ModelWeights, cfg: &RunConfig) -> Option<Method> {
    (w.class_list != cfg.taxonomy.old_model_classes()).then_some(cfg.experiment.method)
}

fn robust_summaries(r: &RobustnessReport) -> Vec<RobustnessSummary> {
    r.rows.iter().map(|row| RobustnessSummary { family: row.family, severity: row.severity, group_miou: row.group_miou }).collect()
}

fn robust_table(r: &RobustnessReport) -> String {
    let mut s = String::from("family\tseverity\tregular\told\tnew\tall\n");
    let g = r.clean.group_miou;
    let _ = writeln!(s, "clean\t0\t{}\t{}\t{}\t{}", cell(g.regular), cell(g.old), cell(g.new), cell(g.all));
    for row in &r.rows {
        let g = row.group_miou;
        let _ =
            writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", row.family.name(), row.severity, cell(g.regular), cell(g.old), cell(g.new), cell(g.all));
    }
    s
}

fn cmd_robust(common: &Common, weights: Option<&PathBuf>) -> CliResult<String> {
    let cfg = load_config(common)?;
    let path = eval_target(&cfg, weights);
    let w = load_weights(&path)?;
    check_class_list(&w, &cfg.taxonomy)?;
    let test = test_sets(&cfg)?;
    let r = robustness_report(&w, &test, &cfg.taxonomy, &cfg.robust.selected(), &cfg.robust.severities, cfg.seed)?;
    let mut report = MetricsReport::new(method_of(&w, &cfg), cfg.seed, &r.clean);
    report.robustness = robust_summaries(&r);
    ensure_dir(&cfg.out)?;
    let stem = weights_stem(&path);
    write_json(&cfg.out.join(format!("robust_{stem}.json")), &report)?;
    Ok(robust_table(&r))
}

fn cmd_gradcheck(seed: u64, instances: usize, fault: bool) -> CliResult<String> {
    let checks = gradcheck::run_gradcheck(instances, seed, fault);
    let mut s = String::from("loss\tinstances\tfailures\tmax_rel_error\tstatus\n");
    for c in &checks {
        let _ =
            writeln!(s, "{}\t{}\t{}\t{:.3e}\t{}", c.loss, c.instances, c.failures, c.max_rel_error, if c.pass() { "PASS" } else { "FAIL" });
    }
    if checks.iter().all(gradcheck::LossCheck::pass) {
        Ok(s)
    } else {
        print!("{s}");
        Err(CliError::new(EXIT_FAILURE, "gradient check failed"))
    }
}

fn cmd_demo(common: &Common) -> CliResult<String> {
    let cfg = load_config(common)?;
    let data = cfg.out.join("data");
    write_reference_data(&cfg.taxonomy, cfg.seed, &data).map_err(|e| CliError::new(EXIT_GENERATION, e.to_string()))?;
    let exp =
        ExperimentConfig { distill: cfg.experiment.distill.clone(), ..reference_config(&cfg.taxonomy, Method::CatSd, cfg.seed, &data) };
    let methods = [Method::Ft, Method::CatSd];
    let out = crate::harness::reference::run_reference(&exp, &methods)?;
    save_weights(&out.teacher, &cfg.out.join(TEACHER_FILE))?;
    let mut rows = vec![("teacher".to_string(), out.teacher_metrics.group_miou)];
    let mut forgetting = String::from("method\told_delta\tplasticity\trigidity\n");
    for (w, m) in &out.students {
        let name = m.method.name().to_lowercase();
        save_weights(w, &cfg.out.join(format!("{name}.weights")))?;
        write_json(&cfg.out.join(format!("metrics_{name}.json")), &MetricsReport::new(Some(m.method), cfg.seed, &m.metrics))?;
        rows.push((name.clone(), m.metrics.group_miou));
        let f = forgetting_summary(&out.teacher_metrics, &m.metrics)?;
        let _ = writeln!(forgetting, "{name}\t{}\t{}\t{}", cell(f.delta.old), cell(f.plasticity), cell(f.rigidity));
    }
    write_json(&cfg.out.join("metrics_teacher.json"), &MetricsReport::new(None, cfg.seed, &out.teacher_metrics))?;
    let (catsd, _) = out.students.iter().find(|(_, m)| m.method == Method::CatSd).expect("ran CATSD");
    let test = load_test_sets(&exp.test)?;
    let r = robustness_report(catsd, &test, &cfg.taxonomy, &[Corruption::GaussianNoise], &SEVERITIES, cfg.seed)?;
    let (sev, old): (Vec<f64>, Vec<f64>) = r.old_series(Family::Noise).into_iter().filter_map(|(s, v)| Some((s as f64, v?))).unzip();
    let rho = spearman(&sev, &old);
    Ok(format!("{}\n{forgetting}\n{}spearman(old mIoU, severity)\t{}\n", group_table(&rows), robust_table(&r), cell(rho)))
}

fn configure_threads() {
    if let Some(n) = std::env::var("CATSD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Runs one parsed command and returns its stdout table.
pub fn run(cli: &Cli) -> CliResult<String> {
    configure_threads();
    match &cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::Train(c) => cmd_train(c),
        Command::Continual { common, method } => cmd_continual(common, method.as_deref()),
        Command::Eval { common, weights } => cmd_eval(common, weights.as_ref()),
        Command::Robust { common, weights } => cmd_robust(common, weights.as_ref()),
        Command::Gradcheck { seed, instances, inject_fault } => cmd_gradcheck(seed.unwrap_or(0), *instances, *inject_fault),
        Command::Demo { common } => cmd_demo(common),
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
