//! Subcommand bodies.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fera_core::cost::{cost_table, render_table, CostParams};
use fera_core::datamodel::{dirichlet_partition, load_dataset, load_round, write_dataset};
use fera_core::protocol::{run_federation, FederationReport};
use fera_core::theory::{median_final_errors, run_sweep, trajectories_csv, SweepSpec};
use log::info;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{CostArgs, InspectArgs, PartitionArgs, RunArgs, TheoryArgs};

const BUNDLED_COST_PARAMS: &str = include_str!("../../../params/reference-params.toml");
const REPORT_FILE: &str = "report.json";

pub fn run(args: RunArgs) -> Result<()> {
    let mut manifest = match &args.config {
        Some(path) => RunManifest::load(path)?,
        None => RunManifest::default(),
    };
    let fed = &mut manifest.federation;
    if let Some(v) = args.rounds {
        fed.num_rounds = v;
    }
    if let Some(v) = args.tau {
        fed.tau = v;
    }
    if let Some(v) = args.seed {
        fed.seed = v;
    }
    if let Some(v) = args.mode {
        fed.mode = v;
    }
    if let Some(v) = args.aggregation {
        fed.aggregation = v;
    }
    if let Some(v) = args.backend {
        manifest.backend.kind = v;
    }
    if let Some(v) = args.alpha {
        manifest.data.alpha = Some(v);
    }

    let report_path = args.out.join(REPORT_FILE);
    if report_path.exists() && !args.force {
        bail!(
            "{} holds a completed run; pass --force to overwrite",
            args.out.display()
        );
    }
    let prepared = manifest.prepare()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    if args.force {
        clear_run(&args.out)?;
    }
    let manifest_text = toml::to_string(&manifest).context("serializing the effective manifest")?;
    write(&args.out.join("manifest.toml"), &manifest_text)?;

    info!(
        "running {} rounds, {} clients, mode {}, aggregation {}",
        prepared.config.num_rounds,
        prepared.config.num_clients,
        prepared.config.mode,
        prepared.config.effective_aggregation()
    );
    let state = run_federation(&prepared.config, &prepared.inputs, &prepared.backends, Some(&args.out))
        .context("federation failed; completed rounds are kept in the output directory")?;
    let report = FederationReport::from_state(&state, &prepared.config);
    let table = report.render_text();
    write(&args.out.join("report.txt"), &table)?;
    print!("{table}");
    info!("wrote {}", report_path.display());
    Ok(())
}

/// Removes outputs of an earlier run so stale rounds cannot linger.
fn clear_run(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let is_output = name == REPORT_FILE
            || name == "report.txt"
            || name == "manifest.toml"
            || (name.starts_with("round_") && name.ends_with(".json"));
        if is_output {
            fs::remove_file(&path).with_context(|| format!("removing {}", path.display()))?;
        }
    }
    Ok(())
}

pub fn theory(args: TheoryArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<SweepSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SweepSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.first_seed = v;
    }
    if let Some(v) = args.seeds {
        spec.seeds = v;
    }
    if let Some(v) = args.tau {
        spec.tau = v;
    }
    if let Some(v) = args.rounds {
        spec.k = v;
    }
    info!(
        "sweep over N = {:?}, schemes {:?}, {} seeds, K = {}",
        spec.ns, spec.schemes, spec.seeds, spec.k
    );
    let cells = run_sweep(&spec)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write(&args.out.join("trajectories.csv"), &trajectories_csv(&cells))?;

    let mut summary = format!("{:<14} {:>6} {:>14}\n", "scheme", "N", "median_error");
    for (scheme, n, median) in median_final_errors(&cells) {
        summary.push_str(&format!("{:<14} {n:>6} {median:>14.6e}\n", scheme.to_string()));
    }
    write(&args.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn cost(args: CostArgs) -> Result<()> {
    let (text, source) = match &args.config {
        Some(path) => (
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            path.display().to_string(),
        ),
        None => (BUNDLED_COST_PARAMS.to_string(), "bundled parameters".to_string()),
    };
    let params = CostParams::from_toml(&text).with_context(|| format!("loading {source}"))?;
    let reports = cost_table(&params)?;
    let table = render_table(&reports, &params.reference);
    print!("{table}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let record = json!({ "source": source, "params": params, "rows": reports });
        let body = serde_json::to_string_pretty(&record)?;
        write(&out.join("cost.json"), &body)?;
        write(&out.join("cost.txt"), &table)?;
    }
    Ok(())
}

pub fn partition(args: PartitionArgs) -> Result<()> {
    let items = load_dataset(&args.input, args.task).context("loading dataset")?;
    let parts = dirichlet_partition(&items, args.alpha, args.clients, args.seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for part in &parts {
        let path = args.out.join(format!("client_{}.jsonl", part.client_id()));
        write_dataset(&path, part.base())?;
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in part.base() {
            *counts.entry(d.category.as_deref().unwrap_or("-")).or_default() += 1;
        }
        println!("client {}: {} items {counts:?}", part.client_id(), part.base().len());
    }
    Ok(())
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let path = &args.path;
    let report_path = if path.is_dir() {
        path.join(REPORT_FILE)
    } else {
        path.clone()
    };
    let name = report_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.starts_with("round_") {
        let snap = load_round(&report_path)?;
        println!(
            "round {}: {} queries, {} submissions",
            snap.round,
            snap.query_set.len(),
            snap.submissions.len()
        );
        for (k, v) in &snap.metrics {
            println!("  {k} = {v}");
        }
        for q in &snap.query_set {
            println!(
                "  [{}] {} -> {} ({} steps)",
                q.query_id,
                q.query,
                q.answer,
                q.steps.len()
            );
        }
        return Ok(());
    }
    if !report_path.exists() {
        bail!("{}: no report found (run incomplete?)", report_path.display());
    }
    let report = FederationReport::load(&report_path)?;
    print!("{}", report.render_text());
    Ok(())
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}
