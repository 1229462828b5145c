//! Subcommands. Each returns an [`Outcome`] whose result line is the last
//! thing written to stdout.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mutatt_core::checkpoint::Checkpoint;
use mutatt_core::data::{Dataset, RegionSet};
use mutatt_core::evaluation::{argmax, evaluate, EvalReport, Protocol};
use mutatt_core::language::encode_tokens;
use mutatt_core::matching::score_regions;
use mutatt_core::synth::{centroid_oracle, generate_synthetic, ledger_match, oracle_accuracy};
use mutatt_core::training::{train, OptimizerState};
use mutatt_core::verify::{run_all, VerifyOptions, VerifyReport};
use mutatt_core::{ModelConfig, ModelParams, Module};
use serde_json::json;

use crate::config::RunConfig;

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRAIN_EVAL: &str = "train_eval.json";
pub const LEDGER: &str = "ledger.json";
pub const VERIFY_REPORT: &str = "verify.json";

/// Success flag plus `key=value` fields for the `RESULT` line.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub command: &'static str,
    pub ok: bool,
    pub fields: Vec<(String, String)>,
}

impl Outcome {
    fn new(command: &'static str, ok: bool) -> Self {
        Self {
            command,
            ok,
            fields: Vec::new(),
        }
    }

    fn field(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn result_line(&self) -> String {
        let mut line = format!("RESULT cmd={} status={}", self.command, if self.ok { "ok" } else { "fail" });
        for (k, v) in &self.fields {
            let _ = write!(line, " {k}={v}");
        }
        line
    }
}

fn create_out(config: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    Ok(&config.out)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn config_value(config: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(config)?)
}

/// Generates the synthetic dataset into `out` with its ledger summary.
pub fn cmd_synth(config: &RunConfig) -> Result<Outcome> {
    let (dataset, ledger) = generate_synthetic(&config.synth)?;
    let out = create_out(config)?;
    dataset.save(out)?;
    let all: Vec<usize> = (0..dataset.expressions.len()).collect();
    let ledger_acc = oracle_accuracy(&ledger, &dataset, &all, ledger_match);
    let centroid_acc = oracle_accuracy(&ledger, &dataset, &all, centroid_oracle);
    let splits: Vec<_> = dataset
        .splits()
        .into_iter()
        .map(|s| {
            let n = dataset.instances(|x| x == s).len();
            (s, n)
        })
        .collect();
    write_json(
        &out.join(LEDGER),
        &json!({
            "config": config_value(config)?,
            "images": dataset.images.len(),
            "expressions": dataset.expressions.len(),
            "splits": splits.iter().map(|(s, n)| json!({"split": s, "expressions": n})).collect::<Vec<_>>(),
            "ledger_match_accuracy": ledger_acc,
            "centroid_oracle_accuracy": centroid_acc,
            "ledger": ledger,
        }),
    )?;
    println!(
        "synthesized {} images, {} expressions, vocabulary {} into {}",
        dataset.images.len(),
        dataset.expressions.len(),
        dataset.vocab.size(),
        out.display()
    );
    for (s, n) in &splits {
        println!("  {s:<6} {n:>6} expressions");
    }
    println!("  ledger match accuracy {ledger_acc:.4}, centroid oracle accuracy {centroid_acc:.4}");
    Ok(Outcome::new("synth", true)
        .field("images", dataset.images.len())
        .field("expressions", dataset.expressions.len())
        .field("centroid_oracle", format!("{centroid_acc:.4}")))
}

fn model_config(config: &RunConfig, dataset: &Dataset) -> ModelConfig {
    ModelConfig {
        embed_dim: config.model.embed_dim,
        hidden_dim: config.model.hidden_dim,
        visual_dim: dataset.visual_dim,
        vocab_size: dataset.vocab.size(),
    }
}

fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("checkpoint_{step:06}.bin"))
}

fn held_out(dataset: &Dataset) -> Vec<usize> {
    dataset.instances(|s| s != "train")
}

/// Trains to `train.max_iterations`, checkpointing every `checkpoint_every`
/// steps, then evaluates the held-out splits under `gt`.
pub fn cmd_train(config: &RunConfig) -> Result<Outcome> {
    let dataset = Dataset::load(&config.data)?;
    let model = model_config(config, &dataset);
    let provenance = config.provenance_json()?;
    let (mut params, mut optimizer) = match &config.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if *ck.params.config() != model {
                bail!(
                    "checkpoint {} has model {:?}, the configuration asks for {:?}",
                    path.display(),
                    ck.params.config(),
                    model
                );
            }
            ck.check_config_hash(&mutatt_core::checkpoint::config_hash(&provenance));
            log::info!("resuming from {} at step {}", path.display(), ck.step());
            (ck.params, ck.optimizer)
        }
        None => {
            let params = ModelParams::init(model, config.seed)?;
            let optimizer = OptimizerState::new(params.set());
            (params, optimizer)
        }
    };
    let out = create_out(config)?;
    let log_path = out.join(TRAIN_LOG);
    let log_file = if config.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log_file = BufWriter::new(log_file);
    let mut recent = Vec::new();
    train(&dataset, &mut params, &mut optimizer, &config.train, |stats, params, opt| {
        let line = serde_json::to_string(&json!({
            "step": stats.step,
            "lr": stats.lr,
            "loss": stats.loss,
            "active_fraction": stats.active_fraction(),
            "skipped_region_negatives": stats.skipped_region_negatives,
            "grad_norm": stats.grad_norm,
        }))?;
        writeln!(log_file, "{line}")?;
        let message = format!(
            "step {} lr {:.2e} loss {:.5} active {:.3}",
            stats.step,
            stats.lr,
            stats.loss,
            stats.active_fraction()
        );
        if (stats.step + 1) % config.log_every == 0 {
            log::info!("{message}");
        } else {
            log::debug!("{message}");
        }
        recent.push(stats.loss);
        if opt.step % config.checkpoint_every == 0 && opt.step < config.train.max_iterations {
            Checkpoint::new(params.clone(), opt.clone(), provenance.clone()).save(&checkpoint_path(out, opt.step))?;
        }
        Ok(())
    })?;
    log_file.flush()?;
    let final_path = config.final_checkpoint();
    Checkpoint::new(params.clone(), optimizer.clone(), provenance).save(&final_path)?;

    let report = evaluate(&dataset, &params, &config.train.ablation, Protocol::Gt, &held_out(&dataset))?;
    write_json(&out.join(TRAIN_EVAL), &report_json(config, &final_path, &report)?)?;
    print!("{}", report.summary_table());
    let tail = &recent[recent.len().saturating_sub(100)..];
    let tail_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    Ok(Outcome::new("train", true)
        .field("step", optimizer.step)
        .field("ablation", config.train.ablation)
        .field("loss", format!("{tail_loss:.5}"))
        .field("heldout_gt", format!("{:.4}", report.overall.accuracy))
        .field("checkpoint", final_path.display()))
}

fn report_json(config: &RunConfig, checkpoint: &Path, report: &EvalReport) -> Result<serde_json::Value> {
    Ok(json!({
        "config": config_value(config)?,
        "checkpoint": checkpoint,
        "protocol": report.protocol,
        "ablation": report.ablation.to_string(),
        "splits": report.splits,
        "overall": report.overall,
    }))
}

fn load_model(config: &RunConfig, dataset: &Dataset) -> Result<(PathBuf, ModelParams)> {
    let path = config.input_checkpoint();
    let ck = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let want = model_config(config, dataset);
    let have = *ck.params.config();
    if have.visual_dim != want.visual_dim || have.vocab_size != want.vocab_size {
        bail!("checkpoint {} was trained on d_v {} / vocabulary {}, the dataset has {} / {}",
            path.display(), have.visual_dim, have.vocab_size, want.visual_dim, want.vocab_size);
    }
    Ok((path, ck.params))
}

/// Scores every expression under `protocol` and writes the report files.
pub fn cmd_eval(config: &RunConfig) -> Result<Outcome> {
    let dataset = Dataset::load(&config.data)?;
    let (path, params) = load_model(config, &dataset)?;
    let all: Vec<usize> = (0..dataset.expressions.len()).collect();
    let report = evaluate(&dataset, &params, &config.train.ablation, config.protocol, &all)?;
    let out = create_out(config)?;
    let stem = format!("eval_{}", config.protocol);
    write_json(&out.join(format!("{stem}.json")), &report_json(config, &path, &report)?)?;
    fs::write(out.join(format!("{stem}_records.jsonl")), report.records_jsonl()?)?;
    let flagged = report.records.iter().filter(|r| r.error.is_some()).count();
    if flagged > 0 {
        log::warn!("{flagged} instances could not be scored, see {stem}_records.jsonl");
    }
    print!("{}", report.summary_table());
    let mut outcome = Outcome::new("eval", true)
        .field("protocol", config.protocol)
        .field("accuracy", format!("{:.4}", report.overall.accuracy));
    for s in &report.splits {
        outcome = outcome.field(&s.split, format!("{:.4}", s.accuracy));
    }
    Ok(outcome.field("flagged", flagged))
}

/// Runs the invariant suite; the outcome fails if any check fails.
pub fn cmd_verify(config: &RunConfig) -> Result<(Outcome, VerifyReport)> {
    let report = run_all(&VerifyOptions {
        seed: config.seed,
        ..VerifyOptions::default()
    });
    for c in &report.checks {
        println!(
            "{} {:<26} {:>7.2}s  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        );
    }
    let out = create_out(config)?;
    write_json(
        &out.join(VERIFY_REPORT),
        &json!({"config": config_value(config)?, "checks": report.checks}),
    )?;
    let failed: Vec<String> = report.failures().map(|c| c.name.replace(' ', "_")).collect();
    let mut outcome = Outcome::new("verify", report.passed())
        .field("passed", report.checks.len() - failed.len())
        .field("failed", failed.len());
    if !failed.is_empty() {
        outcome = outcome.field("failures", failed.join(","));
    }
    Ok((outcome, report))
}

/// Writes the word and visual attention of one expression over its image's
/// regions, plus a compact table on stdout.
pub fn cmd_dump_attn(config: &RunConfig) -> Result<Outcome> {
    let dataset = Dataset::load(&config.data)?;
    let (path, params) = load_model(config, &dataset)?;
    let index = match config.expression {
        Some(id) => dataset
            .expressions
            .iter()
            .position(|e| e.id == id)
            .with_context(|| format!("no expression with id {id}"))?,
        None => *dataset
            .instances(|s| s == "test")
            .first()
            .context("dataset has no test expressions; pass --expression")?,
    };
    let e = &dataset.expressions[index];
    let image = dataset.image_of(e);
    let set = match config.protocol {
        Protocol::Gt => RegionSet::Annotated,
        Protocol::Det => RegionSet::Detected,
    };
    let ids = encode_tokens(&e.tokens, &dataset.vocab)?;
    let ranked = score_regions(&params, &image.all_region_features(set), &ids, &config.train.ablation, true)?;
    let predicted = argmax(&ranked.scores).context("image has no candidate regions")?;
    let enc = &ranked.encoding;
    let tensor = |t: &Option<mutatt_core::Tensor>| t.as_ref().map(|t| t.data().to_vec());

    let regions: Vec<_> = ranked
        .details
        .iter()
        .enumerate()
        .map(|(r, d)| {
            json!({
                "region": r,
                "score": ranked.scores[r],
                "modules": d.modules.iter().map(|m| json!({
                    "module": m.module.name(),
                    "mode": m.mode.name(),
                    "vl": m.vl_score,
                    "lv": m.lv_score,
                    "word_weights": tensor(&m.word_weights),
                    "visual_attention": tensor(&m.visual_attention),
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    let out = create_out(config)?;
    let file = out.join(format!("attention_{}.json", e.id));
    write_json(
        &file,
        &json!({
            "config": config_value(config)?,
            "checkpoint": path,
            "expression": e.id,
            "image": image.id,
            "tokens": e.tokens,
            "target": e.target,
            "predicted": predicted,
            "module_weights": enc.module_weights.data(),
            "word_attention": Module::ALL.iter().map(|m| json!({
                "module": m.name(),
                "weights": enc.word_attention[m.index()].data(),
            })).collect::<Vec<_>>(),
            "regions": regions,
        }),
    )?;

    println!("expression {} \"{}\" (image {}, target {})", e.id, e.tokens.join(" "), image.id, e.target);
    let w = enc.module_weights.data();
    println!("module weights  subj {:.3}  loc {:.3}  rel {:.3}", w[0], w[1], w[2]);
    println!("{:<12} {:>7} {:>7} {:>7}", "word", "subj", "loc", "rel");
    for (t, token) in e.tokens.iter().enumerate() {
        let a = |m: usize| enc.word_attention[m].data()[t];
        println!("{token:<12} {:>7.3} {:>7.3} {:>7.3}", a(0), a(1), a(2));
    }
    println!("{:<8} {:>9}", "region", "score");
    for (r, s) in ranked.scores.iter().enumerate() {
        let mark = match (r == predicted, r == e.target) {
            (true, true) => "  predicted, target",
            (true, false) => "  predicted",
            (false, true) => "  target",
            _ => "",
        };
        println!("{r:<8} {s:>9.4}{mark}");
    }
    Ok(Outcome::new("dump-attn", true)
        .field("expression", e.id)
        .field("predicted", predicted)
        .field("target", e.target)
        .field("file", file.display()))
}
