use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pkus_cli::driver::{self, bench_setup, contributors_for, run_lifecycle, run_prune, run_serve};
use pkus_cli::scenario::Scenario;
use pkus_core::audit;
use pkus_core::backbone::Backbone;
use pkus_core::crypto::VerifyingKey;
use pkus_core::swiftsched::{
    run_request, BatchPolicy, CostModel, ExecMode, RunOptions, ServeRequest,
};

#[derive(Parser)]
#[command(
    name = "pkus",
    version,
    about = "Split-execution adapter serving testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a provider's adapters with progressive pruning and write the
    /// adapter payload plus a report.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        provider: String,
        /// Override the provider's r_max.
        #[arg(long)]
        r_max: Option<f64>,
        /// Override the provider's delta_r.
        #[arg(long)]
        delta_r: Option<f64>,
        /// Override the provider's epsilon.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Override the provider's checkpoint interval.
        #[arg(long)]
        checkpoint_interval: Option<usize>,
        /// Override the provider's total training steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the provider's learning rate.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Drive every plan through prepare, bind, channel and onboard; write the
    /// audit log and lifecycle summary.
    Lifecycle {
        #[command(flatten)]
        common: Common,
    },
    /// Serve one scenario request and write the output and schedule trace.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Index into the scenario's request list.
        #[arg(long, default_value_t = 0)]
        request: usize,
    },
    /// Revoke a provider's enclave: erase it and write the final quote.
    Revoke {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        provider: String,
    },
    /// Synthetic scheduler benchmark over k providers.
    Bench {
        #[arg(long, default_value_t = 1)]
        providers: usize,
        #[arg(long, default_value_t = 2)]
        tokens: usize,
        #[arg(long, default_value_t = 6)]
        segment_size: usize,
        /// simulated | realtime
        #[arg(long, default_value = "simulated")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        layers: u32,
        #[arg(long, default_value_t = 6)]
        hidden_dim: usize,
        #[arg(long, default_value_t = true)]
        pipelined: bool,
        #[arg(long, default_value_t = 1)]
        host_workers: usize,
        #[arg(long)]
        adaptive: bool,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        // cost model overrides
        #[arg(long)]
        c_msg: Option<f64>,
        #[arg(long)]
        c_byte: Option<f64>,
        #[arg(long)]
        c_site: Option<f64>,
        #[arg(long)]
        c_gpu_layer: Option<f64>,
        #[arg(long)]
        c_cpu_layer: Option<f64>,
        #[arg(long)]
        c_host_msg: Option<f64>,
    },
    /// Audit log operations.
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Re-verify every signature and sequence number in an audit log.
    Verify {
        /// Log file; defaults to <out-dir>/audit.log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Attestation public key (hex); defaults to <out-dir>/hw-pubkey.hex.
        #[arg(long)]
        hw_pubkey: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_scenario(common: &Common) -> Result<Scenario> {
    let mut scenario = Scenario::load(&common.scenario)?;
    if let Some(seed) = common.seed {
        scenario.seed = seed;
    }
    fs::create_dir_all(&common.out_dir)
        .with_context(|| format!("creating {}", common.out_dir.display()))?;
    Ok(scenario)
}

fn adapter_path(out_dir: &Path, provider: &str) -> PathBuf {
    out_dir.join(format!("adapters-{provider}.bin"))
}

fn adapter_sig_path(out_dir: &Path, provider: &str) -> PathBuf {
    out_dir.join(format!("adapters-{provider}.sig"))
}

/// Load adapter payloads and check each provider's signature over its file,
/// so a payload tampered at rest never reaches an enclave.
fn load_blobs(scenario: &Scenario, out_dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let keys = driver::derive_keys(scenario);
    let mut blobs = BTreeMap::new();
    for plan in &scenario.plans {
        let path = adapter_path(out_dir, &plan.owner);
        let blob = fs::read(&path).with_context(|| {
            format!(
                "reading {}; run `pkus prune --provider {}` first",
                path.display(),
                plan.owner
            )
        })?;
        let sig_path = adapter_sig_path(out_dir, &plan.owner);
        let sig_hex = fs::read_to_string(&sig_path)
            .with_context(|| format!("reading {}", sig_path.display()))?;
        let signature = hex::decode(sig_hex.trim()).context("decoding adapter signature hex")?;
        let record = pkus_core::aegisproto::SignedRecord {
            payload: pkus_core::crypto::sha256(&blob).to_vec(),
            signer_id: plan.owner.clone(),
            signature: signature
                .try_into()
                .map_err(|_| anyhow::anyhow!("adapter signature must be 64 bytes"))?,
        };
        keys.registry.verify(&record).with_context(|| {
            format!(
                "adapter payload {} failed its provider signature (file tampered?)",
                path.display()
            )
        })?;
        blobs.insert(plan.owner.clone(), blob);
    }
    Ok(blobs)
}

fn load_revoked(out_dir: &Path) -> BTreeSet<String> {
    fs::read_to_string(out_dir.join("revoked.json"))
        .ok()
        .and_then(|text| serde_json::from_str(&text).ok())
        .unwrap_or_default()
}

fn store_revoked(out_dir: &Path, revoked: &BTreeSet<String>) -> Result<()> {
    fs::write(
        out_dir.join("revoked.json"),
        serde_json::to_string_pretty(revoked)?,
    )?;
    Ok(())
}

fn write_audit_artifacts(out_dir: &Path, lifecycle: &driver::Lifecycle) -> Result<()> {
    let records = lifecycle.audit_records();
    fs::write(out_dir.join("audit.log"), audit::to_jsonl(&records))?;
    fs::write(
        out_dir.join("hw-pubkey.hex"),
        hex::encode(lifecycle.keys.hw.verifying_key().to_bytes()),
    )?;
    Ok(())
}

fn quote_json(quote: &pkus_core::aegisproto::Quote) -> serde_json::Value {
    json!({
        "measurement": hex::encode(quote.measurement),
        "user_data": hex::encode(&quote.user_data),
        "nonce": hex::encode(quote.nonce),
        "signature": hex::encode(quote.signature),
    })
}

/// Rebuild the lifecycle and re-apply recorded revocations, so each command
/// starts from the same deterministic state.
fn restore_lifecycle(
    scenario: &Scenario,
    out_dir: &Path,
) -> Result<(driver::Lifecycle, BTreeSet<String>)> {
    let blobs = load_blobs(scenario, out_dir)?;
    let mut lifecycle = run_lifecycle(scenario, &blobs)?;
    let revoked = load_revoked(out_dir);
    for provider in &revoked {
        lifecycle.revoke(provider)?;
    }
    Ok((lifecycle, revoked))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prune {
            common,
            provider,
            r_max,
            delta_r,
            epsilon,
            checkpoint_interval,
            steps,
            lr,
        } => {
            let mut scenario = load_scenario(&common)?;
            let section = scenario
                .providers
                .iter_mut()
                .find(|p| p.id == provider)
                .with_context(|| format!("unknown provider {provider}"))?;
            if let Some(v) = r_max {
                section.prune.r_max = v;
            }
            if let Some(v) = delta_r {
                section.prune.delta_r = v;
            }
            if let Some(v) = epsilon {
                section.prune.epsilon = v;
            }
            if let Some(v) = checkpoint_interval {
                section.prune.checkpoint_interval = v;
            }
            if let Some(v) = steps {
                section.training.total_steps = v;
            }
            if let Some(v) = lr {
                section.training.lr = v;
            }
            let (blob, report) = run_prune(&scenario, &provider)?;
            fs::write(adapter_path(&common.out_dir, &provider), &blob)?;
            let keys = driver::derive_keys(&scenario);
            let owner_key = keys.owners.get(&provider).context("provider has no key")?;
            let signature = owner_key.sign(&pkus_core::crypto::sha256(&blob));
            fs::write(
                adapter_sig_path(&common.out_dir, &provider),
                hex::encode(signature),
            )?;
            let report_path = common.out_dir.join(format!("prune-report-{provider}.json"));
            fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
            println!(
                "pruned {provider}: final ratio {:.3}, metric {:.3} (baseline {:.3}), report {}",
                report.final_ratio,
                report.final_metric,
                report.baseline_metric,
                report_path.display()
            );
            Ok(())
        }
        Command::Lifecycle { common } => {
            let scenario = load_scenario(&common)?;
            let blobs = load_blobs(&scenario, &common.out_dir)?;
            let lifecycle = run_lifecycle(&scenario, &blobs)?;
            write_audit_artifacts(&common.out_dir, &lifecycle)?;

            let summary: Vec<serde_json::Value> = lifecycle
                .enclaves
                .iter()
                .map(|e| {
                    let owner = e.owner_id().unwrap_or("-").to_string();
                    json!({
                        "enclave_id": e.id(),
                        "owner": owner,
                        "state": format!("{:?}", e.state()),
                        "measurement": hex::encode(e.measurement()),
                        "plan_hash": e.plan_hash().map(hex::encode),
                        "quotes": lifecycle.quotes.get(&owner)
                            .map(|qs| qs.iter().map(quote_json).collect::<Vec<_>>()),
                    })
                })
                .collect();
            fs::write(
                common.out_dir.join("lifecycle.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            println!(
                "lifecycle complete: {} enclave(s) onboarded, audit log at {}",
                lifecycle.enclaves.len(),
                common.out_dir.join("audit.log").display()
            );
            Ok(())
        }
        Command::Serve { common, request } => {
            let scenario = load_scenario(&common)?;
            let (mut lifecycle, revoked) = restore_lifecycle(&scenario, &common.out_dir)?;
            let result = run_serve(&scenario, &mut lifecycle, request, &revoked);
            // the audit log reflects denials and MAC failures even when the
            // request aborts
            write_audit_artifacts(&common.out_dir, &lifecycle)?;
            let (output, trace) = result?;
            let out_path = common.out_dir.join(format!("serve-{request}.json"));
            fs::write(
                &out_path,
                serde_json::to_string_pretty(&json!({
                    "request": request,
                    "client": scenario.requests[request].client,
                    "output": output.as_slice(),
                    "makespan": trace.makespan,
                    "message_count": trace.message_count,
                    "per_provider": trace.per_provider,
                }))?,
            )?;
            fs::write(
                common.out_dir.join(format!("trace-{request}.csv")),
                trace.to_csv(),
            )?;
            println!("served request {request}: {}", trace.summary_line());
            Ok(())
        }
        Command::Revoke { common, provider } => {
            let scenario = load_scenario(&common)?;
            let (mut lifecycle, mut revoked) = restore_lifecycle(&scenario, &common.out_dir)?;
            if !revoked.contains(&provider) {
                let quote = lifecycle.revoke(&provider)?;
                revoked.insert(provider.clone());
                store_revoked(&common.out_dir, &revoked)?;
                fs::write(
                    common.out_dir.join(format!("final-quote-{provider}.json")),
                    serde_json::to_string_pretty(&quote_json(&quote))?,
                )?;
            }
            write_audit_artifacts(&common.out_dir, &lifecycle)?;
            println!("revoked {provider}; final quote carries the revocation marker");
            Ok(())
        }
        Command::Bench {
            providers,
            tokens,
            segment_size,
            mode,
            seed,
            layers,
            hidden_dim,
            pipelined,
            host_workers,
            adaptive,
            out_dir,
            c_msg,
            c_byte,
            c_site,
            c_gpu_layer,
            c_cpu_layer,
            c_host_msg,
        } => {
            fs::create_dir_all(&out_dir)?;
            let setup = bench_setup(providers, layers, hidden_dim, seed)?;
            let mut lifecycle = run_lifecycle(&setup.scenario, &setup.blobs)?;
            let request = &setup.scenario.requests[0];
            let contributors = contributors_for(
                &lifecycle,
                &request.client,
                &request.providers,
                &BTreeSet::new(),
            )?;
            let mut cost = CostModel::default();
            for (field, value) in [
                (&mut cost.c_msg, c_msg),
                (&mut cost.c_byte, c_byte),
                (&mut cost.c_site, c_site),
                (&mut cost.c_gpu_layer, c_gpu_layer),
                (&mut cost.c_cpu_layer, c_cpu_layer),
                (&mut cost.c_host_msg, c_host_msg),
            ] {
                if let Some(v) = value {
                    *field = v;
                }
            }
            let exec_mode = match mode.as_str() {
                "simulated" => ExecMode::Simulated(cost),
                "realtime" => ExecMode::Realtime { timeout_ms: 10_000 },
                other => bail!("unknown mode {other:?}"),
            };
            let backbone = Backbone::new(setup.scenario.backbone_config())?;
            let input = driver::request_input(&setup.scenario, 0, hidden_dim);
            let serve = ServeRequest {
                client_id: &request.client,
                input: &input,
                tokens,
                now: 0,
            };
            let policy = BatchPolicy::uniform(segment_size, 6);
            let options = RunOptions {
                pipelined,
                host_workers,
                adaptive,
            };
            let (_, trace) = run_request(
                &backbone,
                &contributors,
                &mut lifecycle.enclaves,
                &lifecycle.traffic_keys,
                &serve,
                &policy,
                &exec_mode,
                &options,
            )?;
            fs::write(out_dir.join("bench-trace.csv"), trace.to_csv())?;
            println!("{}", trace.summary_line());
            Ok(())
        }
        Command::Audit { command } => match command {
            AuditCommand::Verify {
                log,
                hw_pubkey,
                out_dir,
            } => {
                let log_path = log.unwrap_or_else(|| out_dir.join("audit.log"));
                let key_path = hw_pubkey.unwrap_or_else(|| out_dir.join("hw-pubkey.hex"));
                let text = fs::read_to_string(&log_path)
                    .with_context(|| format!("reading {}", log_path.display()))?;
                let key_hex = fs::read_to_string(&key_path)
                    .with_context(|| format!("reading {}", key_path.display()))?;
                let key_bytes: [u8; 32] = hex::decode(key_hex.trim())
                    .context("decoding hw public key hex")?
                    .try_into()
                    .map_err(|_| anyhow::anyhow!("hw public key must be 32 bytes"))?;
                let key = VerifyingKey::from_bytes(&key_bytes)?;
                let records = audit::from_jsonl(&text)?;
                match audit::verify_chain(&records, &key) {
                    Ok(()) => {
                        println!("audit chain OK: {} record(s) verified", records.len());
                        Ok(())
                    }
                    Err(e) => bail!("audit chain rejected: {e}"),
                }
            }
        },
    }
}
