use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use lco_core::contrastive::{cl_train as train_cl, read_triplets, smooth, BatchPool, Refined, WorldTriplets};
use lco_core::datagen::{build_world, export_dataset, sample_batch, World, TEXT};
use lco_core::embdump::{parse_emb, write_emb};
use lco_core::evalsuite::{ndcg_at_k, rank_by_cosine, read_qrels, recall_at_k, validate_qrels};
use lco_core::geometry::{anisotropy, layerwise_alignment, mutual_knn, EmbeddingSet};
use lco_core::numerics::{Matrix, Rng};
use lco_core::pipeline::{
    self, all_modalities, build_stage, dataset_id, evaluate, heldout, heldout_generative_loss, metric_csv, seed_list,
    thread_count, Csv, HeldOut, REPLICATE_TARGETS,
};
use lco_core::provenance::content_hash;
use lco_core::theory::{grsl_fit, pac_bayes_bound, read_scaling_points, BoundInputs, GrslFit};
use lco_core::toymodel::{soup as soup_checkpoints, Checkpoint, ToyModel};
use serde_json::{json, Value};

use crate::run::{at, CliResult, Failure, Run};
use crate::Common;

const STREAM_EXPORT: u64 = 0x4558_504F;
const TRACE_WINDOW: usize = 50;

#[derive(Args)]
pub struct GenWorld {
    #[command(flatten)]
    common: Common,
    /// Samples to export; defaults to `eval.heldout`.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
pub struct Pretrain {
    #[command(flatten)]
    common: Common,
    /// Also dump held-out embeddings of every modality.
    #[arg(long)]
    dump_emb: bool,
}

#[derive(Args)]
pub struct ClTrain {
    #[command(flatten)]
    common: Common,
    /// Pre-refinement checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL triplets `{"anchor":[..],"pos":[..],"neg":[..]}`; default: fresh world triplets.
    #[arg(long)]
    triplets: Option<PathBuf>,
    /// Also dump held-out embeddings of every modality.
    #[arg(long)]
    dump_emb: bool,
}

#[derive(Args)]
pub struct Soup {
    #[command(flatten)]
    common: Common,
    /// Ingredient checkpoint (repeat at least twice).
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args)]
pub struct Analyze {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = ["anisotropy", "alignment"])]
    metric: String,
    /// `.emb` dump (one per dump for anisotropy, exactly two for alignment).
    #[arg(long = "emb")]
    emb: Vec<PathBuf>,
    /// Analyze a checkpoint on held-out world samples instead of dumps.
    #[arg(long, conflicts_with = "emb")]
    checkpoint: Option<PathBuf>,
    /// Neighbors for alignment; defaults to `eval.align_k`.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
pub struct Eval {
    #[command(flatten)]
    common: Common,
    /// Run the evaluation suite on this checkpoint.
    #[arg(long, conflicts_with_all = ["queries", "docs", "qrels"])]
    checkpoint: Option<PathBuf>,
    /// Arm label written to the metrics table.
    #[arg(long, default_value = "model")]
    arm: String,
    /// Query embeddings (`.emb`).
    #[arg(long, requires_all = ["docs", "qrels"])]
    queries: Option<PathBuf>,
    /// Document embeddings (`.emb`).
    #[arg(long)]
    docs: Option<PathBuf>,
    /// Tab-separated `query_id<TAB>doc_id` relevance judgments.
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Cutoff for nDCG and Recall; defaults to `eval.ndcg_k`.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
pub struct Grsl {
    #[command(flatten)]
    common: Common,
    /// Scaling points CSV (model_id,gen_score,gen_direction,rep_score).
    #[arg(long)]
    points: Option<PathBuf>,
}

#[derive(Args)]
pub struct Bound {
    #[command(flatten)]
    common: Common,
    /// KL(Q||P) in nats; selects formula mode.
    #[arg(long, requires_all = ["batch_size_n", "i_p", "eps_p", "n_samples"])]
    kl: Option<f64>,
    /// Candidates per anchor.
    #[arg(long)]
    batch_size_n: Option<usize>,
    /// Mutual information of the generative prior, nats.
    #[arg(long)]
    i_p: Option<f64>,
    /// Excess training risk over the generative floor, nats.
    #[arg(long)]
    eps_p: Option<f64>,
    /// Training samples.
    #[arg(long)]
    n_samples: Option<usize>,
    /// Confidence parameter; defaults to `bound.delta`.
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args)]
pub struct ImportEmb {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    emb: PathBuf,
}

#[derive(Args)]
pub struct Replicate {
    #[arg(value_parser = REPLICATE_TARGETS.to_vec())]
    target: String,
    #[command(flatten)]
    common: Common,
}

fn num(v: f64) -> String {
    v.to_string()
}

fn world_for(run: &Run) -> CliResult<World> {
    Ok(build_world(&run.cfg.world_spec(run.seed)?)?)
}

fn load_model(run: &mut Run, path: &PathBuf) -> CliResult<(Checkpoint, ToyModel)> {
    let bytes = run.input("checkpoint", path)?;
    let ckpt = at(path, Checkpoint::from_bytes(&bytes))?;
    let model = at(path, ckpt.to_model())?;
    Ok((ckpt, model))
}

fn load_emb(run: &mut Run, role: &str, path: &PathBuf) -> CliResult<(EmbeddingSet, String)> {
    let bytes = run.input(role, path)?;
    let (header, m) = at(path, parse_emb(&bytes))?;
    Ok((EmbeddingSet::from_matrix(&header.modality, m), content_hash(&bytes)[..16].to_string()))
}

fn dump_heldout(run: &mut Run, model: &ToyModel, world: &World) -> CliResult<()> {
    let held = heldout(world, run.cfg.get("eval.heldout")?, run.seed)?;
    let refined = Refined::plain(model.clone());
    for m in all_modalities(world) {
        let mut buf = Vec::new();
        write_emb(&m, &refined.embed(&m, held.inputs(&m)?)?, &mut buf)?;
        run.output(&format!("{m}.emb"), buf);
    }
    Ok(())
}

fn trace_csv(trace: &[f64]) -> String {
    let mut csv = Csv::new(&["step", "loss"]);
    for (i, l) in trace.iter().enumerate() {
        csv.row(&[i.to_string(), num(*l)]);
    }
    csv.finish()
}

fn final_smoothed(trace: &[f64]) -> Option<f64> {
    smooth(trace, TRACE_WINDOW).last().copied()
}

pub fn gen_world(c: &GenWorld) -> CliResult<()> {
    let mut run = Run::start("gen-world", &c.common)?;
    let world = world_for(&run)?;
    let n = match c.samples {
        Some(n) => n,
        None => run.cfg.get("eval.heldout")?,
    };
    let samples = sample_batch(&world, n, &mut Rng::derive(run.seed, STREAM_EXPORT))?;
    let mut data = Vec::new();
    export_dataset(&samples, &mut data)?;
    let spec = world.spec();
    let mut csv = Csv::new(&["class", "page", "tokens"]);
    for class in 0..world.classes() {
        for page in 0..spec.pages {
            let toks: Vec<String> = world.tokens(class, page).iter().map(u32::to_string).collect();
            csv.row(&[class.to_string(), page.to_string(), toks.join(" ")]);
        }
    }
    run.output("dataset.jsonl", data);
    run.output("world_tokens.csv", csv.finish());
    let modalities: Vec<Value> = spec
        .modalities
        .iter()
        .map(|m| json!({ "name": m.name, "obs_dim": m.obs_dim, "noise_sigma": m.noise_sigma }))
        .collect();
    run.finish(json!({
        "dataset": dataset_id(&world),
        "classes": world.classes(),
        "modalities": modalities,
        "samples": n,
        "records": n * spec.modalities.len(),
    }))
}

pub fn pretrain(c: &Pretrain) -> CliResult<()> {
    let mut run = Run::start("pretrain", &c.common)?;
    let stage = build_stage(&run.cfg, run.seed)?;
    let dataset = dataset_id(&stage.world);
    let pcfg = run.cfg.pretrain_config()?;
    let held = heldout(&stage.world, run.cfg.get("eval.heldout")?, run.seed)?;
    let lg = heldout_generative_loss(&stage.pretrained, &held, &pcfg.sources)?;
    let ckpt = Checkpoint::from_model(&stage.pretrained, BTreeMap::new())
        .with_meta("stage", "pretrained")
        .with_meta("seed", run.seed)
        .with_meta("steps", pcfg.steps)
        .with_meta("dataset", &dataset);
    run.output("pretrained.ckpt", ckpt.to_bytes());
    run.output("pretrain_trace.csv", trace_csv(&stage.pretrain_trace));
    if c.dump_emb {
        dump_heldout(&mut run, &stage.pretrained, &stage.world)?;
    }
    run.finish(json!({
        "dataset": dataset,
        "steps": pcfg.steps,
        "final_train_loss": final_smoothed(&stage.pretrain_trace),
        "heldout_generative_loss": lg,
        "checkpoint_id": ckpt.id(),
    }))
}

pub fn cl_train(c: &ClTrain) -> CliResult<()> {
    let mut run = Run::start("cl-train", &c.common)?;
    let (parent, model) = load_model(&mut run, &c.checkpoint)?;
    let world = world_for(&run)?;
    let cl = run.cfg.cl_config(run.seed)?;
    let outcome = match &c.triplets {
        Some(path) => {
            let bytes = run.input("triplets", path)?;
            let records = at(path, read_triplets(bytes.as_slice()))?;
            let mut pool = at(path, BatchPool::from_records(&records, cl.batch))?;
            train_cl(&model, &mut pool, &cl)?
        }
        None => {
            let mut source = WorldTriplets { world: &world, hard_negatives: run.cfg.get("cl.hard_negatives")? };
            train_cl(&model, &mut source, &cl)?
        }
    };
    let refined = outcome.refined.to_model()?;
    let ckpt = Checkpoint::from_model(&refined, BTreeMap::new())
        .with_meta("stage", "refined")
        .with_meta("strategy", cl.strategy.name())
        .with_meta("seed", run.seed)
        .with_meta("steps", cl.steps)
        .with_meta("parent", parent.id());
    run.output("refined.ckpt", ckpt.to_bytes());
    run.output("cl_trace.csv", trace_csv(&outcome.trace));
    if c.dump_emb {
        dump_heldout(&mut run, &refined, &world)?;
    }
    run.finish(json!({
        "dataset": dataset_id(&world),
        "strategy": cl.strategy.name(),
        "steps": cl.steps,
        "final_train_loss": final_smoothed(&outcome.trace),
        "parent_id": parent.id(),
        "checkpoint_id": ckpt.id(),
    }))
}

pub fn soup(c: &Soup) -> CliResult<()> {
    let mut run = Run::start("soup", &c.common)?;
    let mut ingredients = Vec::new();
    for path in &c.checkpoints {
        ingredients.push(load_model(&mut run, path)?.0);
    }
    let mixed = soup_checkpoints(&ingredients)?;
    run.output("soup.ckpt", mixed.to_bytes());
    let ids: Vec<String> = ingredients.iter().map(Checkpoint::id).collect();
    run.finish(json!({ "ingredients": ids, "checkpoint_id": mixed.id() }))
}

const ANALYZE_HEADER: &[&str] = &["seed", "dataset", "modality", "metric", "layer", "k", "n", "value"];

pub fn analyze(c: &Analyze) -> CliResult<()> {
    let mut run = Run::start("analyze", &c.common)?;
    let k = match c.k {
        Some(k) => k,
        None => run.cfg.get("eval.align_k")?,
    };
    let seed = run.seed.to_string();
    let mut csv = Csv::new(ANALYZE_HEADER);
    let mut results = Vec::new();
    let mut emit = |dataset: &str, modality: &str, layer: &str, k: Option<usize>, n: usize, value: f64| {
        let k = k.map(|k| k.to_string()).unwrap_or_default();
        csv.row(&[seed.clone(), dataset.into(), modality.into(), c.metric.clone(), layer.into(), k.clone(), n.to_string(), num(value)]);
        results.push(json!({ "dataset": dataset, "modality": modality, "layer": layer, "k": k, "n": n, "value": value }));
    };
    if let Some(path) = &c.checkpoint {
        let (_, model) = load_model(&mut run, path)?;
        let world = world_for(&run)?;
        let dataset = dataset_id(&world);
        let held = heldout(&world, run.cfg.get("eval.heldout")?, run.seed)?;
        if c.metric == "anisotropy" {
            let refined = Refined::plain(model);
            for m in all_modalities(&world) {
                let set = EmbeddingSet::from_matrix(&m, refined.embed(&m, held.inputs(&m)?)?);
                emit(&dataset, &m, "final", None, set.len(), anisotropy(&set)?);
            }
        } else {
            let batch: HeldOut = held.head(run.cfg.get("eval.align_batch")?);
            for m in world.modality_names() {
                let curve = layerwise_alignment(&model, None, (&m, batch.inputs(&m)?), (TEXT, batch.inputs(TEXT)?), k)?;
                for (layer, score) in curve.layers.iter().zip(&curve.scores) {
                    emit(&dataset, &format!("{m}~{TEXT}"), &layer.to_string(), Some(k), curve.batch, *score);
                }
            }
        }
    } else {
        if c.emb.is_empty() {
            return Err(Failure::validation("analyze needs --emb dumps or --checkpoint"));
        }
        let mut sets = Vec::new();
        for path in &c.emb {
            sets.push(load_emb(&mut run, "emb", path)?);
        }
        if c.metric == "anisotropy" {
            for ((set, hash), path) in sets.iter().zip(&c.emb) {
                emit(&format!("emb-{hash}"), &set.modality, "final", None, set.len(), at(path, anisotropy(set))?);
            }
        } else {
            let [(a, ha), (b, hb)] = <[_; 2]>::try_from(sets)
                .map_err(|_| Failure::validation("alignment needs exactly two --emb dumps"))?;
            let value = mutual_knn(&a, &b, k)?;
            emit(&format!("emb-{ha}+{hb}"), &format!("{}~{}", a.modality, b.modality), "final", Some(k), a.len(), value);
        }
    }
    run.output("analyze.csv", csv.finish());
    run.finish(json!({ "metric": c.metric, "rows": results }))
}

pub fn eval(c: &Eval) -> CliResult<()> {
    let mut run = Run::start("eval", &c.common)?;
    if let Some(path) = &c.checkpoint {
        let (_, model) = load_model(&mut run, path)?;
        let world = world_for(&run)?;
        let rows = evaluate(&run.cfg, &Refined::plain(model), &world, run.seed, &c.arm)?;
        run.output("metrics.csv", metric_csv(&rows));
        let summary: Vec<Value> =
            rows.iter().map(|r| json!({ "modality": r.modality, "metric": r.metric, "value": r.value })).collect();
        return run.finish(json!({ "dataset": dataset_id(&world), "arm": c.arm, "metrics": summary }));
    }
    let (Some(qp), Some(dp), Some(rp)) = (&c.queries, &c.docs, &c.qrels) else {
        return Err(Failure::validation("eval needs --checkpoint, or --queries, --docs and --qrels"));
    };
    let k = match c.k {
        Some(k) => k,
        None => run.cfg.get("eval.ndcg_k")?,
    };
    let (queries, qhash) = load_emb(&mut run, "queries", qp)?;
    let (docs, _) = load_emb(&mut run, "docs", dp)?;
    let qrels_bytes = run.input("qrels", rp)?;
    let qrels = at(rp, read_qrels(qrels_bytes.as_slice()))?;
    let ids = |set: &EmbeddingSet| -> Vec<String> { set.ids.iter().map(u64::to_string).collect() };
    let (query_ids, doc_ids) = (ids(&queries), ids(&docs));
    at(rp, validate_qrels(&qrels, &doc_ids))?;
    let rankings = rank_by_cosine(&query_ids, &queries.vectors, &doc_ids, &docs.vectors)?;
    let judged = qrels.values().filter(|d| !d.is_empty()).count();
    let dataset = format!("emb-{qhash}");
    let metrics = [
        (format!("ndcg_at_{k}"), k, ndcg_at_k(&rankings, &qrels, k)?),
        ("recall_at_1".to_string(), 1, recall_at_k(&rankings, &qrels, 1)?),
        (format!("recall_at_{k}"), k, recall_at_k(&rankings, &qrels, k)?),
    ];
    let mut csv = Csv::new(&["seed", "dataset", "metric", "k", "n", "value"]);
    let mut summary = serde_json::Map::new();
    for (name, kk, v) in &metrics {
        csv.row(&[run.seed.to_string(), dataset.clone(), name.clone(), kk.to_string(), judged.to_string(), num(*v)]);
        summary.insert(name.clone(), json!(v));
    }
    run.output("retrieval.csv", csv.finish());
    run.finish(json!({ "dataset": dataset, "queries": judged, "metrics": summary }))
}

fn fit_csv(fit: &GrslFit) -> String {
    let mut csv = Csv::new(&["n", "pearson", "spearman", "slope", "intercept"]);
    csv.row(&[fit.n.to_string(), num(fit.pearson), num(fit.spearman), num(fit.slope), num(fit.intercept)]);
    csv.finish()
}

pub fn grsl(c: &Grsl) -> CliResult<()> {
    let mut run = Run::start("grsl", &c.common)?;
    if let Some(path) = &c.points {
        let bytes = run.input("points", path)?;
        let points = at(path, read_scaling_points(bytes.as_slice()))?;
        let fit = at(path, grsl_fit(&points))?;
        run.output("grsl_fit.csv", fit_csv(&fit));
        return run.finish(json!({ "fit": fit }));
    }
    let sweep = pipeline::grsl_sweep(&run.cfg, run.seed)?;
    let out = pipeline::grsl_output(&sweep)?;
    for (name, body) in out.files {
        run.output(&name, body);
    }
    if let Ok(fit) = &sweep.fit {
        run.output("grsl_fit.csv", fit_csv(fit));
    }
    run.finish(out.summary)
}

pub fn bound(c: &Bound) -> CliResult<()> {
    let mut run = Run::start("bound", &c.common)?;
    if let Some(kl) = c.kl {
        let inputs = BoundInputs {
            batch_size_n: c.batch_size_n.expect("clap requires it"),
            i_p: c.i_p.expect("clap requires it"),
            eps_p: c.eps_p.expect("clap requires it"),
            kl,
            n_samples: c.n_samples.expect("clap requires it"),
            delta: match c.delta {
                Some(d) => d,
                None => run.cfg.get("bound.delta")?,
            },
        };
        let value = pac_bayes_bound(&inputs)?;
        let mut csv = Csv::new(&["batch_size_n", "i_p", "eps_p", "kl", "n_samples", "delta", "bound"]);
        csv.row(&[
            inputs.batch_size_n.to_string(),
            num(inputs.i_p),
            num(inputs.eps_p),
            num(inputs.kl),
            inputs.n_samples.to_string(),
            num(inputs.delta),
            num(value),
        ]);
        run.output("bound.csv", csv.finish());
        return run.finish(json!({ "inputs": inputs, "bound": value }));
    }
    if c.delta.is_some() {
        return Err(Failure::validation("--delta applies to formula mode; set bound.delta for the sweep"));
    }
    let seeds = seed_list(run.seed.wrapping_add(1), run.cfg.get("bound.seeds")?);
    run.set_seeds(seeds);
    let out = pipeline::bound_output(&pipeline::bound_sweep(&run.cfg, run.seed, thread_count()?)?);
    for (name, body) in out.files {
        run.output(&name, body);
    }
    run.finish(out.summary)
}

fn file_stem(tag: &str) -> String {
    let s: String = tag.chars().map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' }).collect();
    if s.is_empty() { "unnamed".into() } else { s }
}

pub fn import_emb(c: &ImportEmb) -> CliResult<()> {
    let mut run = Run::start("import-emb", &c.common)?;
    let bytes = run.input("emb", &c.emb)?;
    let (header, vectors): (_, Matrix) = at(&c.emb, parse_emb(&bytes))?;
    let name = format!("{}.emb", file_stem(&header.modality));
    let hash = content_hash(&bytes);
    let mut csv = Csv::new(&["file", "modality", "dim", "count", "hash"]);
    csv.row(&[name.clone(), header.modality.clone(), header.dim.to_string(), header.count.to_string(), hash.clone()]);
    run.output(&name, bytes);
    run.output("import.csv", csv.finish());
    run.finish(json!({
        "file": name,
        "modality": header.modality,
        "dim": header.dim,
        "count": header.count,
        "rows_checked": vectors.rows(),
        "hash": hash,
    }))
}

pub fn replicate(c: &Replicate) -> CliResult<()> {
    let mut run = Run::start(&format!("replicate {}", c.target), &c.common)?;
    let seeds = match c.target.as_str() {
        "bound" => seed_list(run.seed.wrapping_add(1), run.cfg.get("bound.seeds")?),
        "grsl" | "fig5" | "info-check" => vec![run.seed],
        _ => seed_list(run.seed, run.cfg.get("replicate.seeds")?),
    };
    run.set_seeds(seeds);
    let out = pipeline::replicate(&run.cfg, &c.target, run.seed, thread_count()?)?;
    for (name, body) in out.files {
        run.output(&name, body);
    }
    run.finish(out.summary)
}
