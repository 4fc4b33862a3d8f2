//! Command-line front end: `train`, `eval`, `export-ldm`, `oracle-check`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Run
//! configs are JSON documents with unknown keys rejected; see the README for
//! the schema and every default.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{self, Corpus};
use crate::error::{Error, Result};
use crate::ldm::LdmMode;
use crate::numerics::Matrix;
use crate::oracle;
use crate::trainer::{self, evaluate, EvalReport, TrainCheckpoint, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "clld",
    version,
    about = "Multi-task text classifier with label-distance contrastive learning"
)]
pub struct Cli {
    /// Override the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a JSON run config and write all artifacts.
    Train {
        /// Path to the run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Resume from an earlier training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a TSV file and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// TSV data file (`label<TAB>text` per line).
        #[arg(long)]
        data: PathBuf,
    },
    /// Render a label distance matrix as a PGM heatmap (plus its CSV).
    ExportLdm {
        /// A training checkpoint (.json) or a distance matrix (.csv).
        #[arg(long)]
        input: PathBuf,
        /// Output PGM path; the CSV and metadata land next to it.
        #[arg(long)]
        output: PathBuf,
        /// Distance ceiling for the intensity scale when the input carries
        /// no metadata.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Run the independent oracle comparisons and report each max error.
    OracleCheck {
        /// Self-test hook: corrupt analytic gradients by this amount; any
        /// nonzero value must make the gradient checks fail.
        #[arg(long, default_value_t = 0.0)]
        perturb_gradient: f64,
    },
}

/// JSON run configuration: a data source, training hyperparameters, and an
/// output directory. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Either TSV files (one file auto-splits 80/10/10) or the synthetic
/// confusable-corpus generator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default)]
    pub train_file: Option<PathBuf>,
    #[serde(default)]
    pub val_file: Option<PathBuf>,
    #[serde(default)]
    pub test_file: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub overlap: f64,
    /// Defaults to the training seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DataSource {
    fn load(&self, train_seed: u64) -> Result<Corpus> {
        match (&self.train_file, &self.synthetic) {
            (Some(train), None) => match (&self.val_file, &self.test_file) {
                (Some(val), Some(test)) => data::load_tsv_split(train, val, test, None),
                (None, None) => data::load_tsv(train, None),
                _ => Err(Error::Config(
                    "val_file and test_file must be given together".into(),
                )),
            },
            (None, Some(spec)) => data::make_synthetic_confusable(
                spec.seed.unwrap_or(train_seed),
                spec.classes,
                spec.per_class,
                spec.overlap,
            ),
            (Some(_), Some(_)) => Err(Error::Config(
                "config must name either train_file or synthetic, not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "config must name a train_file or a synthetic corpus".into(),
            )),
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Train { config, resume } => {
            cmd_train(&config, resume.as_deref(), cli.seed, cli.output_dir)
        }
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::ExportLdm { input, output, tau } => cmd_export_ldm(&input, &output, tau),
        Command::OracleCheck { perturb_gradient } => {
            cmd_oracle_check(cli.seed.unwrap_or(0), perturb_gradient)
        }
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let content = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&content)
        .map_err(|e| Error::Config(format!("bad {what} {}: {e}", path.display())))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Metadata written next to every exported distance-matrix CSV.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LdmSidecar {
    pub labels: Vec<String>,
    pub mode: LdmMode,
    pub tau: f64,
}

fn ldm_to_csv(matrix: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..matrix.rows() {
        let row: Vec<String> = matrix.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn csv_to_matrix(content: &str, path: &Path) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::MatrixFile(format!(
                        "{}:{}: not a number: {cell:?}",
                        path.display(),
                        idx + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::MatrixFile(format!(
            "{}: matrix must be square and non-empty",
            path.display()
        )));
    }
    Ok(Matrix::from_vec(n, n, rows.into_iter().flatten().collect()))
}

/// Linear intensity map from distance in [1, tau] to gray in [255, 0]:
/// darker means larger distance.
fn ldm_to_pgm(matrix: &Matrix, tau: f64) -> String {
    let n = matrix.rows();
    let mut out = format!("P2\n{n} {n}\n255\n");
    for i in 0..n {
        let row: Vec<String> = matrix
            .row(i)
            .iter()
            .map(|&v| {
                let gray = if tau > 1.0 {
                    (255.0 * (tau - v) / (tau - 1.0)).round()
                } else {
                    255.0
                };
                format!("{}", gray.clamp(0.0, 255.0) as u32)
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn cmd_train(
    config_path: &Path,
    resume: Option<&Path>,
    seed_override: Option<u64>,
    output_override: Option<PathBuf>,
) -> Result<i32> {
    if !config_path.exists() {
        return Err(Error::Config(format!(
            "config not found: {}",
            config_path.display()
        )));
    }
    let run_config: RunConfigFile = read_json(config_path, "run config")?;
    let mut train_config = run_config.train.clone();
    if let Some(seed) = seed_override {
        train_config.seed = seed;
    }
    train_config.validate()?;

    let output_dir = output_override
        .or(run_config.output_dir.clone())
        .ok_or_else(|| Error::Config("no output_dir in config or on the command line".into()))?;
    fs::create_dir_all(&output_dir).map_err(|source| Error::Io {
        path: output_dir.clone(),
        source,
    })?;

    let corpus = run_config.data.load(train_config.seed)?;
    if corpus.test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }

    let resume_point = match resume {
        Some(path) => {
            let checkpoint: TrainCheckpoint = read_json(path, "checkpoint")?;
            if checkpoint.label_space != corpus.label_space {
                return Err(Error::LabelSpaceMismatch {
                    checkpoint_n: checkpoint.label_space.len(),
                    data_n: corpus.label_space.len(),
                    example: String::from("(resume label spaces differ)"),
                });
            }
            Some(checkpoint.to_resume_point()?)
        }
        None => None,
    };

    let result = trainer::fit_from(&corpus, &train_config, resume_point)?;
    let featurizer = train_config.featurizer()?;
    let report = evaluate(
        &corpus.test,
        &result.best_params,
        &featurizer,
        &corpus.label_space,
    )?;

    let checkpoint = TrainCheckpoint::from_fit(&result, &train_config, &corpus.label_space);
    write_file(
        &output_dir.join("checkpoint.json"),
        &serde_json::to_string(&checkpoint).expect("checkpoint serializes"),
    )?;

    let mut history_lines = String::new();
    for record in &result.history {
        history_lines.push_str(&serde_json::to_string(record).expect("record serializes"));
        history_lines.push('\n');
    }
    write_file(&output_dir.join("history.jsonl"), &history_lines)?;

    write_file(
        &output_dir.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;

    write_file(
        &output_dir.join("ldm.csv"),
        &ldm_to_csv(result.ldm.matrix()),
    )?;
    let sidecar = LdmSidecar {
        labels: corpus.label_space.names().to_vec(),
        mode: result.ldm.mode(),
        tau: train_config.tau,
    };
    write_file(
        &output_dir.join("ldm.meta.json"),
        &serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    write_file(
        &output_dir.join("labels.json"),
        &corpus.label_space.to_json(),
    )?;

    let summary = serde_json::json!({
        "mode": train_config.mode.as_str(),
        "seed": train_config.seed,
        "epochs_run": result.history.len(),
        "best_epoch": result.state.best_epoch,
        "best_val_accuracy": result.state.best_val_accuracy,
        "test_accuracy": report.accuracy,
        "output_dir": output_dir,
    });
    println!("{summary}");
    Ok(0)
}

fn distinct_labels_in(path: &Path) -> usize {
    fs::read_to_string(path)
        .map(|content| {
            content
                .lines()
                .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                .filter_map(|l| {
                    l.split_once('\t')
                        .map(|(label, _)| label.trim().to_string())
                })
                .collect::<BTreeSet<String>>()
                .len()
        })
        .unwrap_or(0)
}

fn cmd_eval(checkpoint_path: &Path, data_path: &Path) -> Result<i32> {
    let checkpoint: TrainCheckpoint = read_json(checkpoint_path, "checkpoint")?;
    let examples = match data::load_examples(data_path, &checkpoint.label_space) {
        Ok(examples) => examples,
        Err(Error::UnknownLabel { label, .. }) => {
            return Err(Error::LabelSpaceMismatch {
                checkpoint_n: checkpoint.label_space.len(),
                data_n: distinct_labels_in(data_path),
                example: label,
            });
        }
        Err(other) => return Err(other),
    };
    let params = checkpoint.best_params()?;
    let featurizer = checkpoint.config.featurizer()?;
    let report: EvalReport = evaluate(&examples, &params, &featurizer, &checkpoint.label_space)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(0)
}

fn cmd_export_ldm(input: &Path, output: &Path, tau_flag: Option<f64>) -> Result<i32> {
    let is_checkpoint = input.extension().is_some_and(|ext| ext == "json");
    let (matrix, sidecar) = if is_checkpoint {
        let checkpoint: TrainCheckpoint = read_json(input, "checkpoint")?;
        let ldm = checkpoint.ldm.to_ldm()?;
        let sidecar = LdmSidecar {
            labels: checkpoint.label_space.names().to_vec(),
            mode: ldm.mode(),
            tau: checkpoint.config.tau,
        };
        (ldm.matrix().clone(), sidecar)
    } else {
        let content = fs::read_to_string(input).map_err(|source| Error::Io {
            path: input.to_path_buf(),
            source,
        })?;
        let matrix = csv_to_matrix(&content, input)?;
        // Prefer metadata written next to the CSV; fall back to the flag.
        let meta_path = input.with_extension("meta.json");
        let sidecar = if meta_path.exists() {
            read_json::<LdmSidecar>(&meta_path, "distance matrix metadata")?
        } else {
            LdmSidecar {
                labels: (0..matrix.rows()).map(|i| format!("class{i}")).collect(),
                mode: LdmMode::Static,
                tau: tau_flag.unwrap_or(5.0),
            }
        };
        (matrix, sidecar)
    };
    let tau = tau_flag.unwrap_or(sidecar.tau);

    write_file(output, &ldm_to_pgm(&matrix, tau))?;
    let csv_path = output.with_extension("csv");
    write_file(&csv_path, &ldm_to_csv(&matrix))?;
    let meta_path = output.with_extension("meta.json");
    write_file(
        &meta_path,
        &serde_json::to_string_pretty(&LdmSidecar { tau, ..sidecar }).expect("sidecar serializes"),
    )?;
    Ok(0)
}

fn cmd_oracle_check(seed: u64, perturb_gradient: f64) -> Result<i32> {
    let outcomes = oracle::run_all(seed, perturb_gradient)?;
    let mut all_passed = true;
    for outcome in &outcomes {
        let verdict = if outcome.passed() { "PASS" } else { "FAIL" };
        println!(
            "check {}: max error {:.3e} (tolerance {:.0e}) {verdict}",
            outcome.name, outcome.max_error, outcome.tolerance
        );
        all_passed &= outcome.passed();
    }
    if all_passed {
        println!("all {} checks passed", outcomes.len());
        Ok(0)
    } else {
        eprintln!("oracle check failed");
        Ok(1)
    }
}
