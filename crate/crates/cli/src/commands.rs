//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use celora::adapter::{format_percent, format_scientific};
use celora::federation::{final_accuracy_csv, load_dataset, partition_dataset, write_checkpoint, MetricsWriter};
use celora::privacy::{attack_report, report_csv, run_trial, TrialShape};
use celora::{param_counts, run_experiment, seed, ExperimentConfig, Method, Summary};
use serde::Serialize;

use crate::{Axis, Cli, CliError, TableFormat};

type Result<T> = std::result::Result<T, CliError>;

fn parse_method(raw: &str) -> Result<Method> {
    Method::parse(raw).ok_or_else(|| CliError::Config(format!("method: unknown method {raw:?}")))
}

/// Read the config, apply `--set` overrides, then the dedicated flags.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let text = match &cli.config {
        Some(path) => fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let overrides = cli
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Config(format!("--set {kv:?}: expected KEY=VALUE")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = ExperimentConfig::from_toml_str(&text, &overrides)?;
    if let Some(m) = &cli.method {
        cfg.method = parse_method(m)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output.dir = dir.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = out_dir(&cfg)?;
    write(&dir.join("effective_config.toml"), cfg.to_toml_string()?)?;
    let mut metrics = MetricsWriter::create(&dir.join("metrics.jsonl"))?;
    let every = cfg.output.checkpoint_every;
    let result = run_experiment(&cfg, |fed, outcome| {
        metrics.write(&outcome.record)?;
        let t = outcome.record.round;
        if every > 0 && t % every == 0 {
            for c in &fed.clients {
                write_checkpoint(&dir.join(format!("checkpoints/round_{t:04}/client_{:03}.bin", c.id)), &c.factors())?;
            }
        }
        Ok(())
    })?;
    if let Some(last) = result.records.last() {
        write(&dir.join("final_accuracy.csv"), final_accuracy_csv(last))?;
    }
    let summary = serde_json::to_string_pretty(&result.summary).context("serializing summary")?;
    write(&dir.join("summary.json"), summary + "\n")?;
    let s = &result.summary;
    println!(
        "{} on {} clients, {} rounds: mean acc {:.4}, worst {:.4}, best {:.4}; wrote {}",
        s.method,
        s.clients,
        s.rounds,
        s.mean_accuracy,
        s.worst_accuracy,
        s.best_accuracy,
        dir.display()
    );
    Ok(())
}

pub fn comm_table(cli: &Cli, format: TableFormat) -> Result<()> {
    let cfg = load_config(cli)?;
    let classes = match &cfg.shape {
        Some(_) => 0,
        None => load_dataset(&cfg)?.class_count,
    };
    let shape = cfg.model_shape(classes);
    shape.validate()?;
    let counts = param_counts(&shape);
    let rows = [
        (Method::FedavgLora, counts.fedpetuning),
        (Method::FfaLora, counts.ffa),
        (Method::CeLora, counts.ce_lora),
        (Method::LocalOnly, 0),
    ];
    match format {
        TableFormat::Csv => {
            println!("method,params_per_round,bytes_per_round,percent_of_fedavg");
            for (m, n) in rows {
                println!("{m},{n},{},{}", n * 8, format_percent(n, counts.fedpetuning).trim_end_matches('%'));
            }
        }
        TableFormat::Table => {
            println!("L = {}, r = {}", shape.layers, shape.rank);
            println!("{:<12} {:>14} {:>26}", "method", "params/round", "(% of fedavg-lora)");
            for (m, n) in rows {
                let pretty = format!("{} ({})", format_scientific(n), format_percent(n, counts.fedpetuning));
                println!("{:<12} {:>14} {:>26}", m.as_str(), n, pretty);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    axis: &'static str,
    value: String,
    method: &'static str,
    mean_accuracy: Option<f64>,
    worst_accuracy: Option<f64>,
    best_accuracy: Option<f64>,
    comm_params: Option<u64>,
    comm_bytes: Option<u64>,
    heterogeneity: Option<f64>,
    error: String,
}

impl SweepRow {
    fn new(axis: Axis, value: &str, method: Method, outcome: std::result::Result<Summary, String>) -> Self {
        let axis = match axis {
            Axis::Alpha => "alpha",
            Axis::Clients => "clients",
            Axis::Rank => "rank",
        };
        let mut row = SweepRow {
            axis,
            value: value.to_string(),
            method: method.as_str(),
            mean_accuracy: None,
            worst_accuracy: None,
            best_accuracy: None,
            comm_params: None,
            comm_bytes: None,
            heterogeneity: None,
            error: String::new(),
        };
        match outcome {
            Ok(s) => {
                row.mean_accuracy = Some(s.mean_accuracy);
                row.worst_accuracy = Some(s.worst_accuracy);
                row.best_accuracy = Some(s.best_accuracy);
                row.comm_params = Some(s.comm.total_upload_params);
                row.comm_bytes = Some(s.comm.total_upload_bytes);
                row.heterogeneity = Some(s.heterogeneity);
            }
            Err(e) => row.error = e,
        }
        row
    }
}

fn set_axis(cfg: &mut ExperimentConfig, axis: Axis, raw: &str) -> Result<()> {
    let bad = |e: &dyn std::fmt::Display| CliError::Config(format!("sweep value {raw:?}: {e}"));
    match axis {
        Axis::Alpha => cfg.partition.alpha = raw.parse().map_err(|e| bad(&e))?,
        Axis::Clients => cfg.partition.clients = raw.parse().map_err(|e| bad(&e))?,
        Axis::Rank => cfg.model.rank = raw.parse().map_err(|e| bad(&e))?,
    }
    Ok(())
}

pub fn sweep(cli: &Cli, axis: Axis, values: &[String], methods: &[String]) -> Result<()> {
    let base = load_config(cli)?;
    let methods = if methods.is_empty() {
        vec![base.method]
    } else {
        methods.iter().map(|m| parse_method(m)).collect::<Result<Vec<_>>>()?
    };
    // parse every value up front so typos fail before any training
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        set_axis(&mut cfg, axis, v)?;
        configs.push((v.as_str(), cfg));
    }
    let dir = out_dir(&base)?;
    let path = dir.join("sweep.csv");
    let mut out = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut failed = 0;
    for (value, cfg) in &configs {
        for &method in &methods {
            let mut cfg = cfg.clone();
            cfg.method = method;
            let outcome = cfg.validate().and_then(|_| run_experiment(&cfg, |_, _| Ok(()))).map(|r| r.summary).map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::error!("{method} at {value}: {e}");
                failed += 1;
            }
            out.serialize(SweepRow::new(axis, value, method, outcome)).context("writing sweep row")?;
            out.flush().context("writing sweep row")?;
        }
    }
    println!("wrote {} ({} runs, {failed} failed)", path.display(), configs.len() * methods.len());
    if failed > 0 {
        return Err(anyhow::anyhow!("{failed} sweep run(s) failed").into());
    }
    Ok(())
}

pub fn attack(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let a = &cfg.attack;
    let shape = TrialShape { input_dim: a.input_dim, classes: a.classes, rank: a.rank };
    let mut trials = Vec::new();
    for s in 0..a.seeds {
        let trial_seed = seed::derive(cfg.seed, "attack", &[s as u64]);
        for &surface in &a.surfaces {
            for &b in &a.batch_sizes {
                let t = run_trial(shape, surface, b, trial_seed, a.steps, a.attack_lr, a.restarts)?;
                log::info!("seed {s} {surface} batch {b}: mse {:.3e}, cosine {:.3}", t.mse, t.cosine);
                trials.push(t);
            }
        }
    }
    let rows = attack_report(&trials)?;
    let dir = out_dir(&cfg)?;
    let path = dir.join("attack.csv");
    write(&path, report_csv(&rows))?;
    let trials_path = dir.join("attack_trials.csv");
    let mut out = csv::Writer::from_path(&trials_path).with_context(|| format!("creating {}", trials_path.display()))?;
    for t in &trials {
        out.serialize(t).context("writing trial row")?;
    }
    out.flush().context("writing trial row")?;
    for r in &rows {
        println!("{:<10} batch {:>3}: mse {:.3e} ± {:.1e}, cosine {:.3}", r.surface.as_str(), r.batch_size, r.mean_mse, r.std_mse, r.mean_cosine);
    }
    Ok(())
}

pub fn partition_dump(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let data = load_dataset(&cfg)?;
    let shards = partition_dataset(&cfg, &data)?;
    let dir = out_dir(&cfg)?;
    let path = dir.join("partition.json");
    let json = serde_json::to_string_pretty(&celora::partition::partition_to_json(&shards)).context("serializing partition")?;
    write(&path, json + "\n")?;
    let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
    println!("wrote {} (shard sizes {sizes:?})", path.display());
    Ok(())
}
