//! The `pnn` command line: one subcommand per pipeline stage. Every command
//! reads a flat config, writes its artifacts into the output directory and
//! echoes the resolved config there as `config.txt`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::analysis::{
    dropout_bias_experiment, heatmap, poly2_experiment, ExperimentConfig, Poly2Generator,
};
use crate::config::Config;
use crate::data::{random_batch, Dataset};
use crate::error::{Error, Result};
use crate::featuremap::{FeatureMap, FieldDecl, FieldKind, RawRecord};
use crate::metrics::evaluate;
use crate::models::{check_gradients, Model};
use crate::optim::{gstar, long_tail_gradient};
use crate::train::{train, write_log};

pub const MAP_FILE: &str = "featuremap.txt";
pub const ENCODED_FILE: &str = "encoded.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(
    name = "pnn",
    version,
    about = "Sparse training of factorization and product-based neural models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override one config key, e.g. `--set lr=1e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Build a feature map from raw CSV records.
    MakeMap,
    /// Encode raw CSV records with a feature map.
    Encode,
    /// Train a model; writes a checkpoint and a training log.
    Train,
    /// Report AUC and log loss of a checkpoint on encoded data.
    Evaluate,
    /// Field-interaction heatmap of a trained fm, ffm or kfm.
    Heatmap,
    /// Generate poly-2 data or run the network-vs-poly-2 experiment.
    Synth,
    /// Adam diagnostic surfaces.
    DiagAdam,
    /// Dropout mini-batch bias simulation.
    DiagDropout,
    /// Finite-difference gradient check on random data.
    GradCheck,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match resolve_config(cli.config.as_deref(), &cli.overrides)
        .and_then(|c| run(cli.command, &c, &cli.out))
    {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut config = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for pair in overrides {
        config.set_pair(pair)?;
    }
    Ok(config)
}

/// Execute one command and return a human-readable summary.
pub fn run(command: Command, config: &Config, out: &Path) -> Result<String> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(CONFIG_ECHO), |w| write!(w, "{config}"))?;
    match command {
        Command::MakeMap => make_map(config, out),
        Command::Encode => encode(config, out),
        Command::Train => run_train(config, out),
        Command::Evaluate => run_evaluate(config, out),
        Command::Heatmap => run_heatmap(config, out),
        Command::Synth => synth(config, out),
        Command::DiagAdam => diag_adam(config, out),
        Command::DiagDropout => diag_dropout(config, out),
        Command::GradCheck => grad_check(config, out),
    }
}

fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// A path key, or the named artifact in the output directory.
fn input_path(config: &Config, key: &str, out: &Path, fallback: &str) -> Result<PathBuf> {
    match config.optional_path(key) {
        Some(p) => Ok(p),
        None => {
            let p = out.join(fallback);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::config(
                    key,
                    format!("not set and {} does not exist", p.display()),
                ))
            }
        }
    }
}

fn parse_schema(spec: &str) -> Result<Vec<FieldDecl>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (name, kind) = item.trim().split_once(':').unwrap_or((item.trim(), "cat"));
            let kind = match kind.trim() {
                "cat" | "categorical" => FieldKind::Categorical,
                "num" | "numerical" => FieldKind::Numerical,
                "set" => FieldKind::Set,
                other => {
                    return Err(Error::config(
                        "schema",
                        format!("unknown field kind `{other}`"),
                    ))
                }
            };
            Ok(FieldDecl::new(name.trim(), kind))
        })
        .collect()
}

/// Raw CSV with a header row; the label column holds 0 or 1.
fn read_raw(config: &Config) -> Result<(Vec<String>, Vec<RawRecord>)> {
    let path = config.path("raw_data")?;
    let label_column = config.raw("label_column");
    let mut reader = csv::Reader::from_reader(open(&path)?);
    let located = |line: u64, m: String| Error::parse(format!("{} line {line}", path.display()), m);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| located(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_at = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::config(
                "label_column",
                format!("no column `{label_column}` in {}", path.display()),
            )
        })?;
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| located(line, e.to_string()))?;
        let label = match row.get(label_at).map(str::trim) {
            Some("0") => 0,
            Some("1") => 1,
            other => return Err(located(line, format!("label {other:?} is not 0 or 1"))),
        };
        let values = header
            .iter()
            .zip(row.iter())
            .enumerate()
            .filter(|&(c, _)| c != label_at)
            .map(|(_, (h, v))| (h.clone(), v.to_string()));
        records.push(RawRecord::new(label, values));
    }
    let fields = header
        .into_iter()
        .enumerate()
        .filter(|&(c, _)| c != label_at)
        .map(|(_, h)| h)
        .collect();
    Ok((fields, records))
}

fn schema(config: &Config, columns: &[String]) -> Result<Vec<FieldDecl>> {
    match config.raw("schema") {
        "" => Ok(columns
            .iter()
            .map(|c| FieldDecl::new(c.clone(), FieldKind::Categorical))
            .collect()),
        s => parse_schema(s),
    }
}

fn load_map(config: &Config, out: &Path) -> Result<FeatureMap> {
    let path = input_path(config, "map", out, MAP_FILE)?;
    let mut map = FeatureMap::read(open(&path)?)?;
    let sets: Vec<String> = parse_schema(config.raw("schema"))?
        .into_iter()
        .filter(|d| d.kind == FieldKind::Set)
        .map(|d| d.name)
        .collect();
    map.mark_set_fields(&sets)?;
    Ok(map)
}

fn load_data(
    config: &Config,
    key: &str,
    out: &Path,
    fallback: &str,
    map: &FeatureMap,
) -> Result<Dataset> {
    let path = input_path(config, key, out, fallback)?;
    Dataset::read_encoded(open(&path)?, map.field_sizes()).map_err(|e| match e {
        Error::Parse { location, message } => {
            Error::parse(format!("{}: {location}", path.display()), message)
        }
        other => other,
    })
}

fn make_map(config: &Config, out: &Path) -> Result<String> {
    let (columns, records) = read_raw(config)?;
    let decls = schema(config, &columns)?;
    let map = FeatureMap::build(
        &records,
        &decls,
        config.get("min_count")?,
        config.get("buckets")?,
    )?;
    let path = out.join(MAP_FILE);
    write_file(&path, |w| map.write(w))?;
    Ok(format!(
        "wrote {} (n={} N={}) from {} records\n",
        path.display(),
        map.num_fields(),
        map.total_categories(),
        records.len()
    ))
}

fn encode(config: &Config, out: &Path) -> Result<String> {
    let map = load_map(config, out)?;
    let (_, records) = read_raw(config)?;
    let mut data = Dataset::new(map.field_sizes());
    for rec in &records {
        data.push(&map.encode(rec)?)?;
    }
    let path = config
        .optional_path("encoded")
        .unwrap_or_else(|| out.join(ENCODED_FILE));
    write_file(&path, |w| data.write_encoded(w))?;
    Ok(format!(
        "wrote {} ({} instances)\n",
        path.display(),
        data.len()
    ))
}

fn build_model(config: &Config, map: &FeatureMap) -> Result<Model> {
    Model::new(config.model_spec()?, &map.field_sizes())
}

fn run_train(config: &Config, out: &Path) -> Result<String> {
    let map = load_map(config, out)?;
    let model = build_model(config, &map)?;
    let train_data = load_data(config, "train_data", out, ENCODED_FILE, &map)?;
    let valid = match config.optional_path("valid_data") {
        Some(_) => Some(load_data(config, "valid_data", out, "", &map)?),
        None => None,
    };
    let seed = config.seed()?;
    let outcome = train(
        &model,
        model.init_params(seed),
        &train_data,
        valid.as_ref(),
        &config.train_config()?,
    )?;
    let ckpt = config
        .optional_path("checkpoint")
        .unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let file = File::create(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    let mut w = BufWriter::new(file);
    model.save_checkpoint(&mut w, &outcome.params, Some(seed))?;
    w.flush().map_err(|e| Error::io(&ckpt, e))?;
    let log = out.join(LOG_FILE);
    write_file(&log, |w| write_log(w, &outcome.log))?;
    let mut summary = format!(
        "model={} seed={seed} steps={}\n",
        model.family(),
        outcome
            .log
            .iter()
            .filter(|r| r.train_loss.is_some())
            .count()
    );
    if let Some(best) = outcome.best {
        summary += &format!(
            "best step {}: auc={} logloss={}\n",
            outcome.best_step, best.auc, best.logloss
        );
    }
    summary += &format!("wrote {} and {}\n", ckpt.display(), log.display());
    Ok(summary)
}

fn load_trained(
    config: &Config,
    out: &Path,
    map: &FeatureMap,
) -> Result<(Model, crate::compute::ParamStore)> {
    let model = build_model(config, map)?;
    let path = input_path(config, "checkpoint", out, CHECKPOINT_FILE)?;
    let (params, _) = model
        .load_checkpoint(open(&path)?)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    Ok((model, params))
}

fn run_evaluate(config: &Config, out: &Path) -> Result<String> {
    let map = load_map(config, out)?;
    let (model, params) = load_trained(config, out, &map)?;
    let key = if config.optional_path("eval_data").is_some() {
        "eval_data"
    } else {
        "train_data"
    };
    let data = load_data(config, key, out, ENCODED_FILE, &map)?;
    let batch = config.get::<usize>("bs")?.max(1024);
    let r = evaluate(&model, &params, &data, batch)?;
    let path = out.join("metrics.csv");
    write_file(&path, |w| {
        writeln!(w, "auc,logloss,count,positive_ratio")?;
        writeln!(
            w,
            "{},{},{},{}",
            r.auc, r.logloss, r.count, r.positive_ratio
        )
    })?;
    Ok(format!(
        "auc={} logloss={} count={}\n",
        r.auc, r.logloss, r.count
    ))
}

fn run_heatmap(config: &Config, out: &Path) -> Result<String> {
    let map = load_map(config, out)?;
    let (model, params) = load_trained(config, out, &map)?;
    let names: Vec<String> = map.fields().iter().map(|f| f.name.clone()).collect();
    let h = heatmap(&model, &params, &names)?;
    let csv = out.join("heatmap.csv");
    write_file(&csv, |w| h.write_csv(w))?;
    if config.flag("heatmap_image")? {
        write_file(&out.join("heatmap.pgm"), |w| h.write_pgm(w))?;
        write_file(&out.join("heatmap_range.txt"), |w| {
            w.write_all(h.sidecar().as_bytes())
        })?;
    }
    Ok(format!("wrote {}\n", csv.display()))
}

fn synth(config: &Config, out: &Path) -> Result<String> {
    let seed = config.seed()?;
    let categories: Vec<usize> = config.list("synth_categories")?;
    match config.raw("synth_mode") {
        "data" => {
            let &[n] = categories.as_slice() else {
                return Err(Error::config(
                    "synth_categories",
                    "data mode takes a single category count",
                ));
            };
            let generator = Poly2Generator::new(&config.poly2_spec(n)?, seed)?;
            let train_data = generator.sample(config.get("synth_train")?, seed.wrapping_add(1));
            let valid = generator.sample(config.get("synth_valid")?, seed.wrapping_add(2));
            let map = FeatureMap::synthetic(generator.field_sizes())?;
            write_file(&out.join(MAP_FILE), |w| map.write(w))?;
            write_file(&out.join("train.txt"), |w| train_data.write_encoded(w))?;
            write_file(&out.join("valid.txt"), |w| valid.write_encoded(w))?;
            Ok(format!(
                "wrote {} train and {} validation instances (N={}, positive ratio {:.4}) to {}\n",
                train_data.len(),
                valid.len(),
                map.total_categories(),
                train_data.positive_ratio(),
                out.display()
            ))
        }
        "experiment" => {
            let mut summary = String::from("label,final_auc,best_auc\n");
            for n in categories {
                let curves = poly2_experiment(&ExperimentConfig {
                    data: config.poly2_spec(n)?,
                    train_size: config.get("synth_train")?,
                    valid_size: config.get("synth_valid")?,
                    hidden_shapes: config.synth_nets()?,
                    include_poly2: config.flag("synth_poly2")?,
                    activation: config.get("activation")?,
                    train: config.train_config()?,
                    seed,
                })?;
                for c in curves {
                    let name = format!("curve_{}.csv", c.label.replace([',', '='], "_"));
                    write_file(&out.join(name), |w| c.write_csv(w))?;
                    summary += &format!("{},{},{}\n", c.label, c.final_auc, c.best_auc);
                }
            }
            write_file(&out.join("synth_summary.csv"), |w| {
                w.write_all(summary.as_bytes())
            })?;
            Ok(summary)
        }
        other => Err(Error::config(
            "synth_mode",
            format!("`{other}` is neither `data` nor `experiment`"),
        )),
    }
}

fn diag_adam(config: &Config, out: &Path) -> Result<String> {
    let opt = config.optimizer()?;
    let steps: Vec<u64> = config.list("diag_t")?;
    let epsilons: Vec<f64> = config.list("diag_eps")?;
    let mut rows = String::from("t,eps,gstar\n");
    for &t in &steps {
        for &eps in &epsilons {
            rows += &format!("{t},{eps},{}\n", gstar(eps, opt.beta2, t)?);
        }
    }
    write_file(&out.join("gstar.csv"), |w| w.write_all(rows.as_bytes()))?;

    let spike: u64 = config.get("diag_spike_step")?;
    let grads: Vec<f64> = config.list("diag_g")?;
    let horizons: Vec<u64> = config.list("diag_horizon")?;
    let mut tail = String::from("g_t,T,g_prime\n");
    for &g in &grads {
        for &window in &horizons {
            let v = long_tail_gradient(g, spike, window, opt.beta1, opt.beta2, opt.eps)?;
            tail += &format!("{g},{window},{v}\n");
        }
    }
    write_file(&out.join("long_tail.csv"), |w| w.write_all(tail.as_bytes()))?;
    Ok(format!(
        "wrote gstar.csv and long_tail.csv to {}\n",
        out.display()
    ))
}

fn diag_dropout(config: &Config, out: &Path) -> Result<String> {
    let cells = dropout_bias_experiment(&config.dropout_bias()?)?;
    let mut rows = String::from("batch_size,rate,mean_kl\n");
    for c in &cells {
        rows += &format!("{},{},{}\n", c.batch_size, c.rate, c.mean_kl);
    }
    write_file(&out.join("dropout_kl.csv"), |w| {
        w.write_all(rows.as_bytes())
    })?;
    Ok(rows)
}

fn grad_check(config: &Config, out: &Path) -> Result<String> {
    let seed = config.seed()?;
    let sizes = vec![config.get::<usize>("gc_field_size")?; config.get("gc_fields")?];
    let model = Model::new(config.model_spec()?, &sizes)?;
    let params = model.init_params(seed);
    let batch = random_batch(&sizes, config.get("gc_batch")?, &[], seed);
    let r = check_gradients(
        &model,
        &params,
        &batch,
        config.get("gc_h")?,
        config.get("gc_tol")?,
    )?;
    let worst = r
        .worst
        .as_ref()
        .map_or("-".to_string(), |(n, i)| format!("{n}[{i}]"));
    let report = format!(
        "model={} seed={seed} coordinates={} max_relative_error={:e} worst={worst} tolerance={:e} passed={}\n",
        model.family(),
        r.coordinates,
        r.max_relative_error,
        r.tolerance,
        r.passed()
    );
    write_file(&out.join("grad_check.txt"), |w| {
        w.write_all(report.as_bytes())
    })?;
    if r.passed() {
        Ok(report)
    } else {
        Err(Error::InvalidArgument(format!(
            "gradient check failed: {report}"
        )))
    }
}
