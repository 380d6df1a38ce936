use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use gossipgrid::config::{parse_ini, ConfigError, RunConfig, KEYS};
use gossipgrid::energy::{parse_benchmarks, write_generic_trace};
use gossipgrid::runner::{run_and_emit, RunError};
use gossipgrid::sweep::{accuracy_matrix_csv, energy_matrix_csv, parse_range, run_sweep, select_best};
use gossipgrid::topology::{generate_regular, metropolis_weights, second_eigenvalue_modulus, TopologyError};

const THREADS_ENV: &str = "GOSSIPGRID_THREADS";

fn key_args() -> Vec<Arg> {
    KEYS.iter()
        .map(|&(key, help)| {
            let mut arg = Arg::new(key).long(key.replace('_', "-")).value_name("VALUE").help(help);
            arg = match key {
                "algorithm" => arg.visible_alias("algo"),
                "learning_rate" => arg.alias("lr"),
                _ => arg,
            };
            arg
        })
        .collect()
}

fn config_arg() -> Arg {
    Arg::new("config").long("config").short('c').value_name("FILE").help("flat key = value config file")
}

fn cli() -> Command {
    Command::new("gossipgrid")
        .about("Energy-aware decentralized learning simulator")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(format!("{THREADS_ENV} caps worker threads (0 = automatic)."))
        .subcommand(Command::new("run").about("Run one simulation").args_override_self(true).arg(config_arg()).args(key_args()))
        .subcommand(
            Command::new("sweep")
                .about("Grid search over training and synchronization block lengths")
                .args_override_self(true)
                .arg(config_arg())
                .arg(
                    Arg::new("gamma_train_range")
                        .long("gamma-train-range")
                        .value_name("RANGE")
                        .default_value("1-8")
                        .help("training block lengths: a-b, a,b,c or a single value"),
                )
                .arg(
                    Arg::new("gamma_sync_range")
                        .long("gamma-sync-range")
                        .value_name("RANGE")
                        .default_value("0-8")
                        .help("synchronization block lengths"),
                )
                .args(key_args().into_iter().filter(|a| !matches!(a.get_id().as_str(), "gamma_train" | "gamma_sync"))),
        )
        .subcommand(
            Command::new("trace-gen")
                .about("Build a device trace from benchmark parameters")
                .arg(Arg::new("params").long("params").value_name("FILE").required(true).help(
                    "CSV: device,power_w,inference_s_per_sample,batch_size,local_steps,param_ratio,battery_capacity_wh,battery_fraction",
                ))
                .arg(Arg::new("out").long("out").short('o').value_name("FILE").help("output path [default: stdout]")),
        )
        .subcommand(
            Command::new("topology")
                .about("Generate a random regular graph as an edge list")
                .arg(Arg::new("n").long("n").value_name("N").required(true).help("number of nodes"))
                .arg(Arg::new("degree").long("degree").short('d').value_name("D").required(true).help("node degree"))
                .arg(Arg::new("seed").long("seed").value_name("SEED").default_value("0"))
                .arg(Arg::new("out").long("out").short('o').value_name("FILE").help("output path [default: stdout]")),
        )
}

fn load_config(matches: &ArgMatches) -> Result<RunConfig, ConfigError> {
    let mut config = RunConfig::default();
    if let Ok(value) = std::env::var(THREADS_ENV) {
        if !value.trim().is_empty() {
            config.threads = value
                .trim()
                .parse()
                .map_err(|_| ConfigError::new(THREADS_ENV, format!("`{value}` is not a non-negative integer")))?;
        }
    }
    if let Some(path) = matches.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("config", format!("{path}: {e}")))?;
        config.apply(parse_ini(&text)?)?;
    }
    for &(key, _) in KEYS {
        if let Ok(Some(value)) = matches.try_get_one::<String>(key) {
            config.set(key, value)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn write_output(out: Option<&String>, text: &str) -> Result<(), RunError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| RunError::Runtime(format!("{path}: {e}"))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_run(matches: &ArgMatches) -> Result<(), RunError> {
    let config = load_config(matches)?;
    let (out, files) = run_and_emit(&config)?;
    let accuracy = out
        .records
        .last()
        .and_then(|r| r.mean_accuracy)
        .map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "{}: {} rounds, total energy {:.2} Wh, final mean accuracy {accuracy}",
        config.effective_label(),
        config.rounds,
        out.ledger.total_wh()
    );
    println!("wrote {} and {}", files.metrics_csv.display(), files.summary_json.display());
    Ok(())
}

fn cmd_sweep(matches: &ArgMatches) -> Result<(), RunError> {
    let config = load_config(matches)?;
    let train = parse_range("gamma_train_range", matches.get_one::<String>("gamma_train_range").unwrap())?;
    let sync = parse_range("gamma_sync_range", matches.get_one::<String>("gamma_sync_range").unwrap())?;
    let result = run_sweep(&config, &train, &sync)?;
    let label = config.effective_label();
    let dir: &Path = &config.output;
    let write = |name: String, text: String| -> Result<PathBuf, RunError> {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| RunError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    };
    std::fs::create_dir_all(dir).map_err(|e| RunError::Runtime(format!("{}: {e}", dir.display())))?;
    let acc = write(format!("{label}.accuracy.csv"), accuracy_matrix_csv(&result))?;
    let energy = write(format!("{label}.energy.csv"), energy_matrix_csv(&result))?;
    let best = select_best(&result.cells);
    let summary = serde_json::json!({ "label": label, "best": best, "cells": result.cells, "config": config.to_json() });
    write(format!("{label}.sweep.json"), serde_json::to_string_pretty(&summary).expect("sweep serializes") + "\n")?;
    for cell in result.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!("cell ({}, {}) failed: {}", cell.gamma_train, cell.gamma_sync, cell.error.as_deref().unwrap_or(""));
    }
    match best {
        Some(b) => println!(
            "best: gamma_train={} gamma_sync={} accuracy={:.4} energy={:.2} Wh",
            b.gamma_train,
            b.gamma_sync,
            b.accuracy.unwrap_or(f64::NAN),
            b.energy_wh.unwrap_or(f64::NAN)
        ),
        None => println!("best: none (no cell reported an accuracy)"),
    }
    println!("wrote {} and {}", acc.display(), energy.display());
    Ok(())
}

fn cmd_trace_gen(matches: &ArgMatches) -> Result<(), RunError> {
    let path = matches.get_one::<String>("params").unwrap();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("params", format!("{path}: {e}")))?;
    let params = parse_benchmarks(&text).map_err(|e| ConfigError::new("params", e.to_string()))?;
    let profiles = params
        .iter()
        .map(|p| p.to_profile())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ConfigError::new("params", e.to_string()))?;
    write_output(matches.get_one::<String>("out"), &write_generic_trace(&profiles))
}

fn cmd_topology(matches: &ArgMatches) -> Result<(), RunError> {
    let int = |name: &str| -> Result<u64, ConfigError> {
        let raw = matches.get_one::<String>(name).unwrap();
        raw.parse().map_err(|_| ConfigError::new(name, format!("`{raw}` is not a non-negative integer")))
    };
    let (n, d, seed) = (int("n")? as usize, int("degree")? as usize, int("seed")?);
    let topology = generate_regular(n, d, seed).map_err(|e| match e {
        TopologyError::Infeasible { .. } => RunError::Config(ConfigError::new("degree", e.to_string())),
        other => RunError::Runtime(other.to_string()),
    })?;
    let lambda = second_eigenvalue_modulus(&metropolis_weights(&topology)).map_err(|e| RunError::Runtime(e.to_string()))?;
    write_output(matches.get_one::<String>("out"), &topology.to_edge_list())?;
    eprintln!("{n} nodes, {} edges, second eigenvalue modulus {lambda:.6}", topology.edge_count());
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("run", m)) => cmd_run(m),
        Some(("sweep", m)) => cmd_sweep(m),
        Some(("trace-gen", m)) => cmd_trace_gen(m),
        Some(("topology", m)) => cmd_topology(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gossipgrid::config::canonical_key;

    #[test]
    fn command_is_well_formed() {
        cli().debug_assert();
    }

    #[test]
    fn every_key_has_a_flag() {
        for &(key, _) in KEYS {
            assert_eq!(canonical_key(&key.replace('_', "-")), key);
        }
    }
}
