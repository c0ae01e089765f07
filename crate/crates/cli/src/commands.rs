//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use serde::Serialize;

use impress_core::corpus::{
    compile_patterns, phi_scan_compiled, resolve_split, write_corpus, CorpusFormat, CorpusSplit, Report, SplitSizes, DEFAULT_PHI_PATTERNS,
};
use impress_core::deauville::ds_agreement;
use impress_core::metrics::{score_corpus, Case, MetricRegistry, MetricTable};
use impress_core::prompt::{build_example, FormattedExample, PromptMode, StyleTokenRegistry};
use impress_core::stats::benchmark::{compare_models, rank_metrics, style_transfer_report, HumanScoreSet, ModelScores};
use impress_core::stats::{bootstrap_mean, paired_exceedance_test, two_sample_exceedance_test, BootstrapConfig};
use impress_core::synth::{self, SynthConfig};
use impress_model::{batch_generate, train as train_model, DecodeConfig, ModelScorer, Seq2SeqModel, TrainConfig};
use impress_review::{build_pool, open_state, read_pool_jsonl, ServiceConfig};

use crate::files::{self, sidecar, write_json, write_manifest, GeneratedRecord, Roots};
use crate::*;

impl BootstrapArgs {
    fn config(&self) -> anyhow::Result<BootstrapConfig> {
        if self.trials == 0 || !(self.level > 0.0 && self.level < 1.0) {
            bail!("bootstrap needs trials > 0 and a level in (0, 1)");
        }
        Ok(BootstrapConfig {
            trials: self.trials,
            level: self.level,
            seed: self.seed,
        })
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn synth(roots: &Roots, a: &SynthArgs) -> anyhow::Result<()> {
    if a.findings_min == 0 || a.findings_min > a.findings_max {
        bail!("findings word range must satisfy 0 < min <= max");
    }
    if a.n_ds > a.n {
        bail!("--n-ds ({}) exceeds --n ({})", a.n_ds, a.n);
    }
    let corpus = synth::generate(&SynthConfig {
        n_reports: a.n,
        n_ds: a.n_ds,
        physicians_per_style: a.physicians_per_style,
        findings_words: (a.findings_min, a.findings_max),
        seed: a.seed,
        ..Default::default()
    });
    let out = roots.data(&a.out);
    files::ensure_parent(&out)?;
    write_corpus(&out, &corpus.reports, CorpusFormat::from_path(&out))?;
    let truth = out.with_extension("truth.json");
    write_json(
        &truth,
        &serde_json::json!({ "styles": corpus.styles, "planted_ds": corpus.planted_ds }),
    )?;
    write_manifest(&sidecar(&out), "synth", Some(a.seed), a, &[&out, &truth])?;
    print_json(&serde_json::json!({ "reports": corpus.reports.len(), "planted_ds": corpus.planted_ds.len(), "out": out }))
}

pub fn prep(roots: &Roots, a: &PrepArgs) -> anyhow::Result<()> {
    let path = roots.data(&a.corpus);
    let loaded = impress_core::corpus::load_corpus(&path, CorpusFormat::from_path(&path))?;
    let out = roots.data(&a.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let patterns = compile_patterns(DEFAULT_PHI_PATTERNS)?;
    let phi: Vec<_> = loaded.reports.iter().flat_map(|r| phi_scan_compiled(r, &patterns)).collect();
    for f in &phi {
        tracing::warn!(report = %f.report_id, field = f.field, pattern = %f.pattern, "possible PHI");
    }

    let split = resolve_split(&loaded.reports, SplitSizes::new(a.train, a.val, a.test), a.seed)?;
    let mut registry = StyleTokenRegistry::with_prefix(&a.token_prefix)?;
    // Registration follows sorted physician ids, so re-running prep on the
    // same corpus always yields the same tokens.
    let physicians: BTreeSet<&str> = loaded.reports.iter().map(|r| r.physician_id.as_str()).collect();
    for p in physicians {
        registry.register(p);
    }

    let (split_p, reg_p, issues_p, phi_p) = (
        out.join("split.json"),
        out.join("registry.json"),
        out.join("issues.json"),
        out.join("phi.json"),
    );
    split.write_manifest(&split_p)?;
    registry.save(&reg_p)?;
    write_json(&issues_p, &loaded.issues)?;
    write_json(&phi_p, &phi)?;
    write_manifest(
        &out.join("manifest.json"),
        "prep",
        Some(a.seed),
        a,
        &[&split_p, &reg_p, &issues_p, &phi_p],
    )?;
    print_json(&serde_json::json!({
        "reports": loaded.reports.len(),
        "skipped": loaded.issues.len(),
        "phi_findings": phi.len(),
        "train": split.train_ids.len(),
        "val": split.val_ids.len(),
        "test": split.test_ids.len(),
        "style_tokens": registry.len(),
        "registry_hash": registry.content_hash(),
    }))
}

fn by_id(reports: &[Report]) -> BTreeMap<&str, &Report> {
    reports.iter().map(|r| (r.report_id.as_str(), r)).collect()
}

fn select<'a>(reports: &'a [Report], ids: &[String]) -> anyhow::Result<Vec<&'a Report>> {
    let index = by_id(reports);
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| anyhow!("split lists {id} but the corpus has no such report"))
        })
        .collect()
}

fn read_split(dir: &Path) -> anyhow::Result<CorpusSplit> {
    Ok(CorpusSplit::read_manifest(&dir.join("split.json"))?)
}

pub fn train(roots: &Roots, a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = toml::from_str(&files::read_to_string(&roots.data(&a.config))?).context("parsing training config")?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.model_ref = roots.checkpoint(Path::new(&cfg.model_ref)).display().to_string();
    cfg.validate()?;
    let reports = files::reports(&roots.data(&a.corpus))?;
    let prep = roots.data(&a.prep);
    let split = read_split(&prep)?;
    let registry = StyleTokenRegistry::load(&prep.join("registry.json"))?;
    let examples = |ids: &[String]| -> anyhow::Result<Vec<FormattedExample>> {
        select(&reports, ids)?
            .into_iter()
            .map(|r| build_example(r, &registry, cfg.arch, PromptMode::Train).map_err(Into::into))
            .collect()
    };
    let (train_ex, val_ex) = (examples(&split.train_ids)?, examples(&split.val_ids)?);
    let texts: Vec<String> = train_ex.iter().flat_map(|e| [e.prompt(), e.target_text.clone()]).collect();
    let mut model = Seq2SeqModel::from_ref(&cfg.model_ref, cfg.arch, texts.iter().map(String::as_str), cfg.seed)?;
    let delta = model.add_style_tokens(&registry)?;
    tracing::info!(added = delta.added.len(), params = model.num_params(), "model ready");

    let out = roots.checkpoint(&a.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let run = train_model(&mut model, &cfg, &train_ex, &val_ex, Some(&out))?;
    let (loss_p, run_p) = (out.join("loss.csv"), out.join("run.json"));
    run.write_loss_csv(&loss_p)?;
    write_json(&run_p, &run)?;
    write_manifest(
        &out.join("manifest.json"),
        "train",
        Some(cfg.seed),
        &serde_json::json!({ "cli": a, "config": cfg }),
        &[&loss_p, &run_p],
    )?;
    print_json(&serde_json::json!({
        "steps": run.loss_curve.len(),
        "initial_loss": run.initial_loss(),
        "final_loss": run.final_loss(),
        "best_val": run.best_val,
        "best_checkpoint": run.best_checkpoint,
        "trainable_params": run.trainable_params,
    }))
}

pub fn generate(roots: &Roots, a: &GenerateArgs) -> anyhow::Result<()> {
    let model = Seq2SeqModel::load(&roots.checkpoint(&a.model))?;
    let reports = files::reports(&roots.data(&a.corpus))?;
    let chosen: Vec<&Report> = match a.cohort {
        Cohort::All => reports.iter().collect(),
        c => {
            let prep = a.prep.as_ref().ok_or_else(|| anyhow!("--prep is required unless --cohort all"))?;
            let split = read_split(&roots.data(prep))?;
            let ids = match c {
                Cohort::Train => &split.train_ids,
                Cohort::Val => &split.val_ids,
                _ => &split.test_ids,
            };
            select(&reports, ids)?
        }
    };
    let token = match &a.as_physician {
        Some(p) => Some(
            model
                .registry
                .token(p)
                .ok_or_else(|| anyhow!("physician {p} has no style token in this checkpoint"))?
                .to_string(),
        ),
        None => None,
    };
    let examples: Vec<FormattedExample> = chosen
        .iter()
        .map(|r| {
            let ex = build_example(r, &model.registry, model.config.arch, PromptMode::Infer)?;
            Ok(match &token {
                Some(t) => ex.with_style_token(t),
                None => ex,
            })
        })
        .collect::<anyhow::Result<_>>()?;
    let decode = DecodeConfig {
        beam_width: a.beam,
        max_new_tokens: a.max_new_tokens,
        length_penalty: a.length_penalty,
        no_repeat_ngram: a.no_repeat_ngram,
        seed: 0,
    };
    decode.validate()?;
    let mut records = Vec::with_capacity(examples.len());
    let mut failed = 0;
    for (id, result) in batch_generate(&model, &examples, &decode) {
        match result {
            Ok(g) => records.push(GeneratedRecord {
                report_id: id,
                impression: g.text,
                score: Some(g.score),
                truncated: g.truncated,
            }),
            Err(e) => {
                failed += 1;
                tracing::error!(report = %id, error = %e, "generation failed");
            }
        }
    }
    let out = roots.data(&a.out);
    files::write_generated(&out, &records)?;
    write_manifest(&sidecar(&out), "generate", Some(decode.seed), a, &[&out])?;
    let truncated = records.iter().filter(|r| r.truncated).count();
    print_json(&serde_json::json!({ "generated": records.len(), "failed": failed, "truncated": truncated, "out": out }))?;
    if failed > 0 {
        bail!("{failed} reports failed to generate");
    }
    Ok(())
}

fn cases(reports: &[Report], generated: &BTreeMap<String, String>) -> anyhow::Result<Vec<Case>> {
    let index = by_id(reports);
    generated
        .iter()
        .map(|(id, hyp)| {
            let r = index
                .get(id.as_str())
                .ok_or_else(|| anyhow!("generated impression for unknown report {id}"))?;
            Ok(Case {
                report_id: id.clone(),
                source: r.findings.clone(),
                hypothesis: hyp.clone(),
                reference: Some(r.impression.clone()),
            })
        })
        .collect()
}

pub fn score(roots: &Roots, a: &ScoreArgs) -> anyhow::Result<()> {
    let reports = files::reports(&roots.data(&a.corpus))?;
    let generated = files::read_generated(&roots.data(&a.generated))?;
    let cases = cases(&reports, &generated)?;
    let mut registry = MetricRegistry::standard();
    if let Some(p) = &a.scorer {
        let model = Seq2SeqModel::load(&roots.checkpoint(p))?;
        registry.register_scorer("genscore", Arc::new(ModelScorer::new(model)))?;
    }
    let selection: Vec<&str> = a.metrics.iter().map(String::as_str).collect();
    let table = score_corpus(&registry, &selection, &cases)?;
    let out = roots.data(&a.out);
    table.write_long_csv(files::create(&out)?)?;
    write_manifest(&sidecar(&out), "score", None, a, &[&out])?;
    for gap in table.gaps.iter().take(20) {
        tracing::warn!(metric = %gap.metric, report = %gap.report_id, reason = %gap.reason, "metric gap");
    }
    let means: BTreeMap<String, Option<f64>> = table
        .metrics
        .iter()
        .map(|m| {
            let v: Vec<f64> = table.by_case(&m.name).into_values().collect();
            let mean = (!v.is_empty()).then(|| m.display_scale * v.iter().sum::<f64>() / v.len() as f64);
            (m.name.clone(), mean)
        })
        .collect();
    print_json(&serde_json::json!({ "cases": cases.len(), "gaps": table.gaps.len(), "means": means, "out": out }))
}

fn read_table(path: &Path) -> anyhow::Result<MetricTable> {
    let registry = MetricRegistry::standard();
    MetricTable::read_long_csv(files::open(path)?, Some(&registry)).with_context(|| format!("reading {}", path.display()))
}

pub fn rank(roots: &Roots, a: &RankArgs) -> anyhow::Result<()> {
    let table = read_table(&roots.data(&a.table))?;
    let human = HumanScoreSet::read_csv("reader_1", files::open(&roots.data(&a.human))?)?;
    let second = match &a.second {
        Some(p) => Some(HumanScoreSet::read_csv("reader_2", files::open(&roots.data(p))?)?),
        None => None,
    };
    let ranking = rank_metrics(&table, &human, second.as_ref(), a.bootstrap.config()?)?;
    let out = roots.data(&a.out);
    let mut w = files::create(&out)?;
    ranking.write_csv(&mut w)?;
    drop(w);
    write_manifest(&sidecar(&out), "benchmark rank", Some(a.bootstrap.seed), a, &[&out])?;
    print_json(&ranking)
}

pub fn compare(roots: &Roots, a: &CompareArgs) -> anyhow::Result<()> {
    let mut models = Vec::new();
    let mut higher = BTreeMap::new();
    for spec in &a.models {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--model expects name=table.csv, got {spec:?}"))?;
        let table = read_table(&roots.data(Path::new(path)))?;
        for m in &table.metrics {
            higher.insert(m.name.clone(), m.higher_is_better);
        }
        models.push(ModelScores::from_table(name, &table));
    }
    let grid = compare_models(&models, &higher, a.bootstrap.config()?)?;
    let out = roots.data(&a.out);
    let mut w = files::create(&out)?;
    grid.write_long_csv(&mut w)?;
    drop(w);
    write_manifest(&sidecar(&out), "benchmark compare", Some(a.bootstrap.seed), a, &[&out])?;
    print_json(&grid)
}

fn columns(table: &MetricTable) -> BTreeMap<String, Vec<f64>> {
    table
        .metrics
        .iter()
        .map(|m| (m.name.clone(), table.by_case(&m.name).into_values().collect()))
        .collect()
}

pub fn shift(roots: &Roots, a: &ShiftArgs) -> anyhow::Result<()> {
    let internal = columns(&read_table(&roots.data(&a.internal))?);
    let external = columns(&read_table(&roots.data(&a.external))?);
    let shifts = style_transfer_report(&internal, &external, a.bootstrap.config()?)?;
    let out = roots.data(&a.out);
    write_json(&out, &shifts)?;
    write_manifest(&sidecar(&out), "benchmark shift", Some(a.bootstrap.seed), a, &[&out])?;
    print_json(&shifts)
}

pub fn deauville(roots: &Roots, a: &DeauvilleArgs) -> anyhow::Result<()> {
    let reports = files::reports(&roots.data(&a.corpus))?;
    let generated = files::read_generated(&roots.data(&a.generated))?;
    let references: BTreeMap<String, String> = reports
        .iter()
        .filter(|r| generated.contains_key(&r.report_id))
        .map(|r| (r.report_id.clone(), r.impression.clone()))
        .collect();
    let result = ds_agreement(&generated, &references, a.bootstrap.config()?)?;
    let out = roots.data(&a.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (summary_p, confusion_p, cases_p) = (out.join("summary.csv"), out.join("confusion.csv"), out.join("cases.json"));
    result.write_summary_csv(&a.model_name, files::create(&summary_p)?)?;
    result.write_confusion_csv(files::create(&confusion_p)?)?;
    write_json(&cases_p, &result.cases)?;
    write_manifest(
        &out.join("manifest.json"),
        "deauville",
        Some(a.bootstrap.seed),
        a,
        &[&summary_p, &confusion_p, &cases_p],
    )?;
    print_json(&serde_json::json!({
        "n": result.n,
        "accuracy": result.accuracy,
        "accuracy_ci": result.accuracy_ci,
        "kappa_linear": result.kappa_linear,
        "kappa_ci": result.kappa_ci,
        "generated_absent": result.generated_absent,
    }))
}

pub fn ci(roots: &Roots, a: &CiArgs) -> anyhow::Result<()> {
    let values = files::read_values(&roots.data(&a.values))?;
    print_json(&bootstrap_mean(&values, a.bootstrap.config()?)?)
}

pub fn exceedance(roots: &Roots, a: &ExceedanceArgs) -> anyhow::Result<()> {
    let x = files::read_values(&roots.data(&a.a))?;
    let y = files::read_values(&roots.data(&a.b))?;
    let cfg = a.bootstrap.config()?;
    let result = if a.paired {
        paired_exceedance_test(&x, &y, cfg)?
    } else {
        two_sample_exceedance_test(&x, &y, cfg)?
    };
    print_json(&result)
}

pub fn pool(roots: &Roots, a: &PoolArgs) -> anyhow::Result<()> {
    let reports = files::reports(&roots.data(&a.corpus))?;
    let generated = files::read_generated(&roots.data(&a.generated))?;
    let chosen: Vec<Report> = reports.into_iter().filter(|r| generated.contains_key(&r.report_id)).collect();
    let pool = build_pool(&chosen, &generated);
    let out = roots.data(&a.out);
    let mut text = String::new();
    for c in &pool {
        text.push_str(&serde_json::to_string(c)?);
        text.push('\n');
    }
    files::ensure_parent(&out)?;
    std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
    write_manifest(&sidecar(&out), "pool", None, a, &[&out])?;
    print_json(&serde_json::json!({ "cases": pool.len(), "reports": chosen.len(), "out": out }))
}

pub fn serve(roots: &Roots, a: &ServeArgs) -> anyhow::Result<()> {
    let mut config = ServiceConfig::load(a.config.as_ref().map(|p| roots.data(p)).as_deref())?;
    if config.data_dir.is_relative() {
        config.data_dir = roots.data(&config.data_dir);
    }
    std::fs::create_dir_all(&config.data_dir).with_context(|| format!("creating {}", config.data_dir.display()))?;
    let bind = config.bind.clone();
    let state = open_state(config)?;
    if let Some(p) = &a.pool {
        let cases = read_pool_jsonl(&files::read_to_string(&roots.data(p))?)?;
        let added = state.store.add_cases(&cases)?;
        tracing::info!(added, total = cases.len(), "case pool loaded");
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        tokio::select! {
            r = impress_review::serve(state, listener) => r.map_err(anyhow::Error::from),
            _ = tokio::signal::ctrl_c() => {
                tracing::info!("shutting down");
                Ok(())
            }
        }
    })
}
