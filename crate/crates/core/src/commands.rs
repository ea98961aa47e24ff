//! The experiment commands behind the CLI. Each writes a config copy, its
//! CSV tables and a JSON summary into one output directory.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::accounting::{closed_form_params, flops_forward};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::report::{self, fixed2, float, optional_float, RunSummary, Table};
use crate::routing::{estimate_moments, theoretical_moments, GateConfig};
use crate::training::{
    convergence_runs, expert_sweep, forgetting_runs, make_task_suite, median_degradation, median_loss,
    AdapterMethod, SweepOutcome,
};
use crate::verify::{run_verify, CheckStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Verify,
    Train,
    Forget,
    Sweep,
    Moments,
    Account,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Train => "train",
            Command::Forget => "forget",
            Command::Sweep => "sweep",
            Command::Moments => "moments",
            Command::Account => "account",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutcome {
    /// One-line human summary.
    pub summary: String,
    /// Names of failing gating checks; only `verify` fills this.
    pub failing: Vec<String>,
    /// Files written, relative to the output directory.
    pub files: Vec<String>,
}

struct Output<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Output<'_> {
    fn table(&mut self, table: &Table) -> Result<()> {
        table.write(self.dir)?;
        self.files.push(table.schema.file.into());
        Ok(())
    }
}

/// Runs `command` with `config`, writing artifacts into `out`.
pub fn run(command: Command, config: &ExperimentConfig, out: &Path, jobs: usize) -> Result<CommandOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join(report::CONFIG_COPY);
    fs::write(&config_path, config.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    let mut output = Output { dir: out, files: vec![report::CONFIG_COPY.into()] };

    let (summary, failing, results) = match command {
        Command::Verify => verify(config, &mut output)?,
        Command::Train => train(config, &mut output)?,
        Command::Forget => forget(config, &mut output)?,
        Command::Sweep => sweep(config, &mut output, jobs)?,
        Command::Moments => moments(config, &mut output)?,
        Command::Account => account(config, &mut output)?,
    };
    RunSummary::new(command.name(), config.seed, output.files.clone(), results).write(out)?;
    Ok(CommandOutcome { summary, failing, files: output.files })
}

type Produced = (String, Vec<String>, serde_json::Value);

fn verify(config: &ExperimentConfig, out: &mut Output) -> Result<Produced> {
    let report = run_verify(&config.verify, config.seed)?;
    let mut table = Table::new(report::VERIFY);
    for c in &report.checks {
        table.push(vec![
            c.name.clone(),
            float(c.measured),
            c.relation.symbol().into(),
            float(c.tolerance),
            c.status.to_string(),
        ]);
    }
    out.table(&table)?;
    let failing: Vec<String> = report.failing().into_iter().map(String::from).collect();
    let passed = report.checks.iter().filter(|c| c.status == CheckStatus::Pass).count();
    let informational = report.checks.iter().filter(|c| c.status == CheckStatus::Informational).count();
    let summary = if failing.is_empty() {
        format!("verify: {passed} checks passed, {informational} informational")
    } else {
        format!("verify: {} of {} checks failed: {}", failing.len(), report.checks.len(), failing.join(", "))
    };
    let results = json!({ "passed": passed, "informational": informational, "failing": failing, "checks": report.checks });
    Ok((summary, failing, results))
}

fn train(config: &ExperimentConfig, out: &mut Output) -> Result<Produced> {
    let bench = config.train_benchmark()?;
    let runs = convergence_runs(&bench)?;
    let mut log = Table::new(report::TRAIN_LOG);
    let mut eval = Table::new(report::EVAL);
    let mut loads = Table::new(report::LOADS);
    let mut finals = Table::new(report::TRAIN_SUMMARY);
    for run in &runs {
        let (seed, method) = (run.seed.to_string(), run.method.to_string());
        for step in 0..run.log.steps() {
            log.push(vec![
                seed.clone(),
                method.clone(),
                step.to_string(),
                float(run.log.task_loss[step]),
                float(run.log.balance_loss[step]),
                float(run.log.grad_norm[step]),
            ]);
        }
        for point in &run.log.eval {
            eval.push(vec![seed.clone(), method.clone(), point.step.to_string(), float(point.loss)]);
            for (expert, &load) in point.load.iter().enumerate() {
                loads.push(vec![seed.clone(), method.clone(), point.step.to_string(), expert.to_string(), float(load)]);
            }
        }
        finals.push(vec![
            seed,
            method,
            float(run.reference_loss),
            float(run.log.final_eval),
            float(run.relative_final_loss()),
        ]);
    }
    for t in [&log, &eval, &loads, &finals] {
        out.table(t)?;
    }
    let medians: Vec<(AdapterMethod, f64)> = AdapterMethod::ALL.iter().map(|&m| (m, median_loss(&runs, m))).collect();
    let summary = format!(
        "train: median relative final loss {}",
        medians.iter().map(|(m, v)| format!("{m}={v:.4}")).collect::<Vec<_>>().join(", ")
    );
    let results = json!({
        "seeds": bench.seeds,
        "median_relative_final_loss": medians.iter().map(|(m, v)| (m.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
    });
    Ok((summary, Vec::new(), results))
}

fn forget(config: &ExperimentConfig, out: &mut Output) -> Result<Produced> {
    let bench = config.forget_benchmark()?;
    let runs = forgetting_runs(&bench, config.forget.dense_ablation)?;
    let mut retention = Table::new(report::RETENTION);
    let mut degradation = Table::new(report::DEGRADATION);
    for run in &runs {
        let (seed, label) = (run.seed.to_string(), run.label());
        for row in &run.report.rows {
            retention.push(vec![
                seed.clone(),
                label.clone(),
                row.phase.to_string(),
                row.task.to_string(),
                float(row.loss),
                float(row.reference_loss),
                float(row.retention),
            ]);
        }
        for (task, &d) in run.report.degradation.iter().enumerate() {
            degradation.push(vec![seed.clone(), label.clone(), task.to_string(), float(d)]);
        }
    }
    out.table(&retention)?;
    out.table(&degradation)?;
    let mut labels: Vec<String> = Vec::new();
    for run in &runs {
        if !labels.contains(&run.label()) {
            labels.push(run.label());
        }
    }
    let medians: Vec<(String, f64)> = labels.iter().map(|l| (l.clone(), median_degradation(&runs, l))).collect();
    let summary = format!(
        "forget: median degradation {}",
        medians.iter().map(|(m, v)| format!("{m}={v:.4}")).collect::<Vec<_>>().join(", ")
    );
    let results = json!({
        "seeds": bench.seeds,
        "median_degradation": medians.into_iter().map(|(m, v)| (m, json!(v))).collect::<serde_json::Map<_, _>>(),
    });
    Ok((summary, Vec::new(), results))
}

fn sweep(config: &ExperimentConfig, out: &mut Output, jobs: usize) -> Result<Produced> {
    let section = &config.sweep;
    let suite = make_task_suite(&section.suite, section.domains, config.seed)?;
    let mixture = suite.mixture()?;
    let cells = expert_sweep(
        &section.cells(),
        section.total_rank,
        &suite.pretrained,
        &mixture,
        &section.layer,
        &config.sweep_train_config(),
        jobs,
    )?;
    let mut table = Table::new(report::SWEEP);
    let mut best: Option<(usize, usize, f64)> = None;
    let mut skipped = 0;
    for cell in &cells {
        let head = vec![cell.n_experts.to_string(), cell.top_k.to_string(), cell.seed.to_string()];
        let tail = match &cell.outcome {
            SweepOutcome::Completed { final_loss, trainable_params, min_load } => {
                if best.is_none_or(|b| *final_loss < b.2) {
                    best = Some((cell.n_experts, cell.top_k, *final_loss));
                }
                vec![
                    "completed".into(),
                    float(*final_loss),
                    trainable_params.to_string(),
                    optional_float(*min_load),
                    String::new(),
                ]
            }
            SweepOutcome::Skipped { reason } => {
                skipped += 1;
                vec!["skipped".into(), String::new(), String::new(), String::new(), reason.clone()]
            }
        };
        table.push(head.into_iter().chain(tail).collect());
    }
    out.table(&table)?;
    let summary = match best {
        Some((n, k, loss)) => format!(
            "sweep: {} cells, {skipped} skipped; best {k}-of-{n} with final loss {loss:.6}",
            cells.len()
        ),
        None => format!("sweep: {} cells, all skipped", cells.len()),
    };
    let results = json!({
        "cells": cells.len(),
        "skipped": skipped,
        "best": best.map(|(n, k, loss)| json!({ "n_experts": n, "top_k": k, "final_loss": loss })),
    });
    Ok((summary, Vec::new(), results))
}

fn moments(config: &ExperimentConfig, out: &mut Output) -> Result<Produced> {
    let m = &config.moments;
    let gate = GateConfig::new(m.n_experts, m.top_k)?;
    let (mean_t, var_t) = theoretical_moments(m.n_experts, m.top_k)?;
    let est = estimate_moments(&gate, m.sampler, m.samples, config.seed)?;
    let mut table = Table::new(report::MOMENTS);
    for i in 0..m.n_experts {
        table.push(vec![i.to_string(), float(est.mean[i]), float(est.variance[i]), float(mean_t), float(var_t)]);
    }
    out.table(&table)?;
    let mean_dev = est.mean.iter().map(|v| (v - mean_t).abs()).fold(0.0, f64::max);
    let var_dev = est.variance.iter().map(|v| (v - var_t).abs()).fold(0.0, f64::max);
    let summary = format!(
        "moments: {}-of-{} over {} samples; theoretical mean {mean_t}, variance {var_t}; max deviations {mean_dev:.2e}, {var_dev:.2e}",
        m.top_k, m.n_experts, m.samples
    );
    let results = json!({
        "theoretical_mean": mean_t,
        "theoretical_variance": var_t,
        "max_mean_deviation": mean_dev,
        "max_variance_deviation": var_dev,
    });
    Ok((summary, Vec::new(), results))
}

fn account(config: &ExperimentConfig, out: &mut Output) -> Result<Produced> {
    let a = &config.account;
    let mut table = Table::new(report::ACCOUNTING);
    let mut unsupported = Vec::new();
    let mut rows = Vec::new();
    for preset in &a.presets {
        for &method in &a.methods {
            let count = match closed_form_params(preset, method) {
                Ok(c) => c,
                Err(Error::InvalidInput(reason)) => {
                    unsupported.push(json!({ "preset": preset.name, "method": method.name(), "reason": reason }));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let flops = if method.has_flops_formula() {
                flops_forward(preset, method, a.batch, a.seq).ok().map(|f| f.total())
            } else {
                None
            };
            table.push(vec![
                preset.name.clone(),
                method.name().into(),
                float(count.trainable),
                fixed2(count.proportion),
                optional_float(flops),
            ]);
            rows.push(json!({ "preset": preset.name, "method": method.name(), "proportion": count.proportion_display() }));
        }
    }
    out.table(&table)?;
    let summary = format!("account: {} rows, {} unsupported combinations", rows.len(), unsupported.len());
    Ok((summary, Vec::new(), json!({ "rows": rows, "unsupported": unsupported })))
}
