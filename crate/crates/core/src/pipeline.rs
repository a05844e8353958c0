//! End-to-end experiments on the toy world.
//!
//! Every experiment is a pure function of a [`RunConfig`] and a seed. The
//! world and the model initialization use the run seed directly; each
//! training or sampling stage draws from its own derived stream so stages
//! can be rerun in isolation. Seed sweeps fan out over threads and are
//! merged in seed order, so outputs do not depend on the thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::contrastive::{cl_train, make_toy_triplets, mean_infonce, BatchPool, CLOutcome, Refined, Strategy, WorldTriplets};
use crate::datagen::{build_world, sample_batch, true_info, World, TEXT};
use crate::error::{invalid, Error, Result};
use crate::evalsuite::{kmeans_nmi, linear_probe, ndcg_at_k, rank_by_cosine, recall_at_k, zeroshot_classify, ProbeConfig, Qrels};
use crate::geometry::{anisotropy, layerwise_alignment, mutual_knn_matrices, EmbeddingSet};
use crate::numerics::{Matrix, Rng};
use crate::theory::{bound_check, grsl_fit, write_scaling_points, BoundCheckConfig, BoundReport, Direction, GrslFit, ScalingPoint};
use crate::toymodel::{generative_loss_for, init_model, pretrain, pretrain_with_snapshots, Inputs, PretrainConfig, ToyModel};

const STREAM_PRETRAIN: u64 = 0x5052;
const STREAM_HELDOUT: u64 = 0x4844;
const STREAM_PROBE: u64 = 0x5042;
const STREAM_EXTRA: u64 = 0x4558;
const STREAM_HARD_QUERIES: u64 = 0x4851;
const STREAM_POOL: u64 = 0x504C;
const STREAM_BOUND: u64 = 0x424E;
const STREAM_INFO: u64 = 0x494E;

/// Worker threads for seed sweeps: `LCO_THREADS` if set, else the number
/// of available cores.
pub fn thread_count() -> Result<usize> {
    match std::env::var("LCO_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("LCO_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Maps `f` over `items` on up to `threads` workers; results (and the
/// first error) come back in input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every item processed")).collect()
}

/// `seed, seed + 1, ...`
pub fn seed_list(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

pub fn dataset_id(world: &World) -> String {
    let s = world.spec();
    let noise: Vec<String> = s.modalities.iter().map(|m| format!("{}{}", m.name, m.noise_sigma)).collect();
    format!("toy-K{}-s{}-{}", s.classes, s.seed, noise.join("-"))
}

/// A world, its initial model and the generatively pretrained model.
#[derive(Clone, Debug)]
pub struct Stage {
    pub seed: u64,
    pub world: World,
    pub init: ToyModel,
    pub pretrained: ToyModel,
    pub pretrain_trace: Vec<f64>,
}

pub fn build_world_and_init(cfg: &RunConfig, seed: u64) -> Result<(World, ToyModel)> {
    let world = build_world(&cfg.world_spec(seed)?)?;
    let init = init_model(&cfg.model_spec(world.spec(), seed)?)?;
    Ok((world, init))
}

pub fn build_stage(cfg: &RunConfig, seed: u64) -> Result<Stage> {
    let (world, init) = build_world_and_init(cfg, seed)?;
    let out = pretrain(&init, &world, &cfg.pretrain_config()?, &mut Rng::derive(seed, STREAM_PRETRAIN))?;
    Ok(Stage { seed, world, init, pretrained: out.model, pretrain_trace: out.trace })
}

/// Text-only contrastive refinement with the configured settings, or with
/// `strategy` in place of the configured one.
pub fn refine(cfg: &RunConfig, world: &World, model: &ToyModel, seed: u64, strategy: Option<Strategy>) -> Result<CLOutcome> {
    let mut cl = cfg.cl_config(seed)?;
    if let Some(s) = strategy {
        cl.strategy = s;
    }
    let mut source = WorldTriplets { world, hard_negatives: cfg.get("cl.hard_negatives")? };
    cl_train(model, &mut source, &cl)
}

/// Held-out samples with every modality's inputs.
#[derive(Clone, Debug)]
pub struct HeldOut {
    pub classes: Vec<usize>,
    /// A random page of each sample's class.
    pub text: Vec<Vec<u32>>,
    /// Page-0 tokens, the generative target.
    pub targets: Vec<Vec<u32>>,
    pub obs: BTreeMap<String, Matrix>,
}

impl HeldOut {
    pub fn draw(world: &World, n: usize, rng: &mut Rng) -> Result<Self> {
        let samples = sample_batch(world, n, rng)?;
        let text = samples.iter().map(|s| world.tokens(s.class_id, rng.below(world.spec().pages)).to_vec()).collect();
        let mut obs = BTreeMap::new();
        for m in world.modality_names() {
            let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.observations[&m].clone()).collect();
            obs.insert(m, Matrix::from_rows(&rows)?);
        }
        Ok(Self {
            classes: samples.iter().map(|s| s.class_id).collect(),
            targets: samples.into_iter().map(|s| s.tokens).collect(),
            text,
            obs,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn inputs(&self, modality: &str) -> Result<Inputs<'_>> {
        if modality == TEXT {
            return Ok(Inputs::Tokens(&self.text));
        }
        self.obs.get(modality).map(Inputs::Obs).ok_or_else(|| Error::UnknownModality(modality.to_string()))
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> HeldOut {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        HeldOut {
            classes: self.classes[..n].to_vec(),
            text: self.text[..n].to_vec(),
            targets: self.targets[..n].to_vec(),
            obs: self.obs.iter().map(|(k, v)| (k.clone(), v.select_rows(&idx))).collect(),
        }
    }
}

pub fn heldout(world: &World, n: usize, seed: u64) -> Result<HeldOut> {
    HeldOut::draw(world, n, &mut Rng::derive(seed, STREAM_HELDOUT))
}

/// `text` followed by the non-text modalities in world order.
pub fn all_modalities(world: &World) -> Vec<String> {
    std::iter::once(TEXT.to_string()).chain(world.modality_names()).collect()
}

/// Mean per-token generative loss over `sources` on held-out data.
pub fn heldout_generative_loss(model: &ToyModel, held: &HeldOut, sources: &[String]) -> Result<f64> {
    let mut total = 0.0;
    for s in sources {
        total += generative_loss_for(model, s, held.inputs(s)?, &held.targets, None)?;
    }
    Ok(total / sources.len() as f64)
}

/// Recall@1 and nDCG@k of `modality` queries against the page-0 text of
/// every class (one relevant document per query).
pub fn retrieval_scores(refined: &Refined, world: &World, modality: &str, held: &HeldOut, k: usize) -> Result<(f64, f64)> {
    let corpus: Vec<Vec<u32>> = (0..world.classes()).map(|c| world.tokens(c, 0).to_vec()).collect();
    let docs = refined.embed(TEXT, Inputs::Tokens(&corpus))?;
    let queries = refined.embed(modality, held.inputs(modality)?)?;
    let doc_ids: Vec<String> = (0..world.classes()).map(|c| format!("t{c:06}")).collect();
    let query_ids: Vec<String> = (0..held.len()).map(|i| format!("q{i:08}")).collect();
    let rankings = rank_by_cosine(&query_ids, &queries, &doc_ids, &docs)?;
    let qrels: Qrels =
        query_ids.iter().zip(&held.classes).map(|(q, &c)| (q.clone(), BTreeSet::from([doc_ids[c].clone()]))).collect();
    Ok((recall_at_k(&rankings, &qrels, 1)?, ndcg_at_k(&rankings, &qrels, k)?))
}

fn mean_tail(trace: &[f64], w: usize) -> f64 {
    let tail = &trace[trace.len().saturating_sub(w)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Minimal CSV builder with a fixed header.
#[derive(Clone, Debug)]
pub struct Csv {
    cols: usize,
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { cols: header.len(), text: format!("{}\n", header.join(",")) }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.cols, "CSV row width");
        let _ = writeln!(self.text, "{}", fields.join(","));
    }

    pub fn finish(self) -> String {
        self.text
    }
}

/// Named text artifacts plus a JSON summary.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub files: Vec<(String, String)>,
    pub summary: serde_json::Value,
}

// ---------------------------------------------------------------- figures

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnisotropyRow {
    pub seed: u64,
    pub dataset: String,
    pub modality: String,
    pub pre: f64,
    pub post: f64,
    pub rel_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentRow {
    pub seed: u64,
    pub dataset: String,
    pub modality: String,
    pub stage: String,
    pub layer: usize,
    pub alignment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedFigures {
    pub seed: u64,
    pub pretrain_loss: f64,
    pub cl_loss: f64,
    pub anisotropy: Vec<AnisotropyRow>,
    pub alignment: Vec<AlignmentRow>,
}

/// Held-out anisotropy of every modality and layer-wise text alignment of
/// every non-text modality, before and after text-only refinement.
pub fn figures_for_seed(cfg: &RunConfig, seed: u64) -> Result<SeedFigures> {
    let stage = build_stage(cfg, seed)?;
    let outcome = refine(cfg, &stage.world, &stage.pretrained, seed, None)?;
    let held = heldout(&stage.world, cfg.get("eval.heldout")?, seed)?;
    let dataset = dataset_id(&stage.world);
    let pre = Refined::plain(stage.pretrained.clone());
    let post = &outcome.refined;

    let mut aniso = Vec::new();
    for m in all_modalities(&stage.world) {
        let a = |r: &Refined| -> Result<f64> { anisotropy(&EmbeddingSet::from_matrix(&m, r.embed(&m, held.inputs(&m)?)?)) };
        let (before, after) = (a(&pre)?, a(post)?);
        aniso.push(AnisotropyRow {
            seed,
            dataset: dataset.clone(),
            modality: m.clone(),
            pre: before,
            post: after,
            rel_change: (after - before) / before,
        });
    }

    let b: usize = cfg.get("eval.align_batch")?;
    let k: usize = cfg.get("eval.align_k")?;
    if held.len() < b {
        return Err(Error::Config(format!("`eval.heldout` ({}) must be at least `eval.align_batch` ({b})", held.len())));
    }
    let pair = held.head(b);
    let mut align = Vec::new();
    let stages: [(&str, &ToyModel, Option<&_>); 3] = [
        ("init", &stage.init, None),
        ("pretrained", &stage.pretrained, None),
        ("refined", &post.base, post.adapter.as_ref()),
    ];
    for m in stage.world.modality_names() {
        for (name, model, adapter) in stages {
            let curve = layerwise_alignment(model, adapter, (&m, pair.inputs(&m)?), (TEXT, pair.inputs(TEXT)?), k)?;
            for (layer, score) in curve.layers.iter().zip(&curve.scores) {
                align.push(AlignmentRow {
                    seed,
                    dataset: dataset.clone(),
                    modality: m.clone(),
                    stage: name.to_string(),
                    layer: *layer,
                    alignment: *score,
                });
            }
        }
    }
    Ok(SeedFigures {
        seed,
        pretrain_loss: mean_tail(&stage.pretrain_trace, 50),
        cl_loss: mean_tail(&outcome.trace, 50),
        anisotropy: aniso,
        alignment: align,
    })
}

pub fn figures(cfg: &RunConfig, seeds: &[u64], threads: usize) -> Result<Vec<SeedFigures>> {
    par_map(seeds, threads, |&s| figures_for_seed(cfg, s))
}

pub const ANISOTROPY_HEADER: &[&str] = &["seed", "dataset", "modality", "pre", "post", "rel_change"];
pub const ALIGNMENT_HEADER: &[&str] = &["seed", "dataset", "modality", "stage", "layer", "alignment"];

/// Required relative anisotropy drop for the figure-1 check.
pub const FIG1_MIN_DROP: f64 = 0.20;

pub fn fig1_output(figs: &[SeedFigures]) -> RunOutput {
    let mut csv = Csv::new(ANISOTROPY_HEADER);
    let mut per_seed = Vec::new();
    for f in figs {
        for r in &f.anisotropy {
            csv.row(&[r.seed.to_string(), r.dataset.clone(), r.modality.clone(), r.pre.to_string(), r.post.to_string(), r.rel_change.to_string()]);
        }
        let decreased = f.anisotropy.iter().all(|r| r.post < r.pre);
        let dropped = f.anisotropy.iter().all(|r| r.rel_change <= -FIG1_MIN_DROP);
        per_seed.push(json!({
            "seed": f.seed,
            "pretrain_loss": f.pretrain_loss,
            "cl_loss": f.cl_loss,
            "all_decreased": decreased,
            "all_dropped_20pct": dropped,
        }));
    }
    let all = figs.iter().all(|f| f.anisotropy.iter().all(|r| r.rel_change <= -FIG1_MIN_DROP));
    RunOutput {
        files: vec![("fig1_anisotropy.csv".into(), csv.finish())],
        summary: json!({ "target": "fig1", "seeds": per_seed, "min_relative_drop": FIG1_MIN_DROP, "pass": all }),
    }
}

/// Final-layer score per `(modality, stage)`.
pub fn final_alignment(f: &SeedFigures) -> BTreeMap<(String, String), f64> {
    let last = f.alignment.iter().map(|r| r.layer).max().unwrap_or(0);
    f.alignment.iter().filter(|r| r.layer == last).map(|r| ((r.modality.clone(), r.stage.clone()), r.alignment)).collect()
}

/// Whether final-layer alignment rose after refinement for every non-text modality.
pub fn alignment_increased(f: &SeedFigures) -> bool {
    let fin = final_alignment(f);
    let mods: BTreeSet<&String> = fin.keys().map(|(m, _)| m).collect();
    !mods.is_empty()
        && mods.iter().all(|m| {
            let get = |s: &str| fin.get(&((*m).clone(), s.to_string())).copied();
            matches!((get("pretrained"), get("refined")), (Some(a), Some(b)) if b > a)
        })
}

pub fn fig2_output(figs: &[SeedFigures]) -> RunOutput {
    let mut csv = Csv::new(ALIGNMENT_HEADER);
    let mut per_seed = Vec::new();
    for f in figs {
        for r in &f.alignment {
            csv.row(&[r.seed.to_string(), r.dataset.clone(), r.modality.clone(), r.stage.clone(), r.layer.to_string(), r.alignment.to_string()]);
        }
        let fin: BTreeMap<String, f64> =
            final_alignment(f).into_iter().map(|((m, s), v)| (format!("{m}/{s}"), v)).collect();
        per_seed.push(json!({ "seed": f.seed, "final_layer": fin, "increased": alignment_increased(f) }));
    }
    RunOutput {
        files: vec![("fig2_alignment.csv".into(), csv.finish())],
        summary: json!({ "target": "fig2", "seeds": per_seed, "pass": figs.iter().all(alignment_increased) }),
    }
}

// ---------------------------------------------------------------- table 4

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub seed: u64,
    pub dataset: String,
    pub arm: String,
    pub modality: String,
    pub metric: String,
    pub value: f64,
}

pub const METRIC_HEADER: &[&str] = &["seed", "dataset", "arm", "modality", "metric", "value"];

pub fn metric_csv(rows: &[MetricRow]) -> String {
    let mut csv = Csv::new(METRIC_HEADER);
    for r in rows {
        csv.row(&[r.seed.to_string(), r.dataset.clone(), r.arm.clone(), r.modality.clone(), r.metric.clone(), r.value.to_string()]);
    }
    csv.finish()
}

/// Probe data: `shots` training and 4 test samples per class.
fn probe_split(world: &World, shots: usize, seed: u64) -> Result<(HeldOut, HeldOut)> {
    let mut rng = Rng::derive(seed, STREAM_PROBE);
    let k = world.classes();
    let draw = |per: usize, rng: &mut Rng| -> Result<HeldOut> {
        let mut held = HeldOut::draw(world, 1, rng)?;
        held.classes.clear();
        held.text.clear();
        held.targets.clear();
        let mut rows: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for c in 0..k {
            for _ in 0..per {
                let s = world.sample(c, rng)?;
                held.classes.push(c);
                held.text.push(world.tokens(c, rng.below(world.spec().pages)).to_vec());
                held.targets.push(s.tokens.clone());
                for (m, x) in s.observations {
                    rows.entry(m).or_default().push(x);
                }
            }
        }
        held.obs = rows.into_iter().map(|(m, r)| Ok((m, Matrix::from_rows(&r)?))).collect::<Result<_>>()?;
        Ok(held)
    };
    let train = draw(shots, &mut rng)?;
    let test = draw(4, &mut rng)?;
    Ok((train, test))
}

/// The evaluation suite for one refined model.
pub fn evaluate(cfg: &RunConfig, refined: &Refined, world: &World, seed: u64, arm: &str) -> Result<Vec<MetricRow>> {
    let held = heldout(world, cfg.get("eval.heldout")?, seed)?;
    let queries = held.head(cfg.get("eval.queries")?);
    let ndcg_k: usize = cfg.get("eval.ndcg_k")?;
    let align_k: usize = cfg.get("eval.align_k")?;
    let align_b: usize = cfg.get("eval.align_batch")?;
    let shots: usize = cfg.get("eval.probe_shots")?;
    let dataset = dataset_id(world);
    let mut rows = Vec::new();
    let mut push = |modality: &str, metric: &str, value: f64| {
        rows.push(MetricRow {
            seed,
            dataset: dataset.clone(),
            arm: arm.to_string(),
            modality: modality.to_string(),
            metric: metric.to_string(),
            value,
        })
    };
    let embs: BTreeMap<String, Matrix> =
        all_modalities(world).into_iter().map(|m| Ok((m.clone(), refined.embed(&m, held.inputs(&m)?)?))).collect::<Result<_>>()?;
    let (probe_train, probe_test) = probe_split(world, shots, seed)?;
    let corpus: Vec<Vec<u32>> = (0..world.classes()).map(|c| world.tokens(c, 0).to_vec()).collect();
    let prompts = refined.embed(TEXT, Inputs::Tokens(&corpus))?;
    let probe_cfg = ProbeConfig { shots, ..ProbeConfig::default() };
    let idx: Vec<usize> = (0..align_b.min(held.len())).collect();
    for (m, e) in &embs {
        push(m, "anisotropy", anisotropy(&EmbeddingSet::from_matrix(m, e.clone()))?);
        let x_train = refined.embed(m, probe_train.inputs(m)?)?;
        let x_test = refined.embed(m, probe_test.inputs(m)?)?;
        push(m, "probe_accuracy", linear_probe(&x_train, &probe_train.classes, &x_test, &probe_test.classes, &probe_cfg, seed)?);
        push(m, "kmeans_nmi", kmeans_nmi(e, &held.classes, world.classes(), cfg.nmi_norm()?, seed)?);
        if m != TEXT {
            let (r1, ndcg) = retrieval_scores(refined, world, m, &queries, ndcg_k)?;
            push(m, "recall_at_1", r1);
            push(m, &format!("ndcg_at_{ndcg_k}"), ndcg);
            push(m, "zeroshot_accuracy", zeroshot_classify(e, &prompts, &held.classes)?);
            let text = embs[TEXT].select_rows(&idx);
            push(m, "final_alignment", mutual_knn_matrices(&e.select_rows(&idx), &text, align_k)?);
        }
    }
    Ok(rows)
}

pub const TABLE4_ARMS: [&str; 4] = ["pretrained", "lora", "full_finetune", "linear_projection"];

/// The pretrained model and the three refinement strategies side by side.
pub fn table4_for_seed(cfg: &RunConfig, seed: u64) -> Result<Vec<MetricRow>> {
    let stage = build_stage(cfg, seed)?;
    let mut rows = evaluate(cfg, &Refined::plain(stage.pretrained.clone()), &stage.world, seed, TABLE4_ARMS[0])?;
    for arm in &TABLE4_ARMS[1..] {
        let strategy = Strategy::parse(arm, cfg.get("lora.r")?, cfg.get("lora.alpha")?)?;
        let out = refine(cfg, &stage.world, &stage.pretrained, seed, Some(strategy))?;
        rows.extend(evaluate(cfg, &out.refined, &stage.world, seed, arm)?);
    }
    Ok(rows)
}

pub fn table4_output(cfg: &RunConfig, seeds: &[u64], threads: usize) -> Result<RunOutput> {
    let rows: Vec<MetricRow> = par_map(seeds, threads, |&s| table4_for_seed(cfg, s))?.into_iter().flatten().collect();
    let mut means: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for arm in TABLE4_ARMS {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.arm == arm) {
            let e = acc.entry(format!("{}/{}", r.modality, r.metric)).or_default();
            e.0 += r.value;
            e.1 += 1;
        }
        means.insert(arm.to_string(), acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect());
    }
    Ok(RunOutput {
        files: vec![("table4_metrics.csv".into(), metric_csv(&rows))],
        summary: json!({ "target": "table4", "seeds": seeds, "mean_by_arm": means }),
    })
}

// ---------------------------------------------------------------- scaling

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrslSweep {
    pub seed: u64,
    pub points: Vec<ScalingPoint>,
    /// Why the fit failed, e.g. a constant axis.
    pub fit: std::result::Result<GrslFit, String>,
}

/// Minimum rank correlation for the scaling check.
pub const GRSL_MIN_SPEARMAN: f64 = 0.8;

/// Snapshots one pretraining run at every budget in `grsl.steps`, refines
/// each snapshot identically and relates held-out generative loss to mean
/// post-refinement Recall@1 of the non-text modalities.
pub fn grsl_sweep(cfg: &RunConfig, seed: u64) -> Result<GrslSweep> {
    let (world, init) = build_world_and_init(cfg, seed)?;
    let budgets: Vec<usize> = cfg.get_list("grsl.steps")?;
    let pcfg = PretrainConfig { steps: budgets.iter().copied().max().unwrap_or(0), ..cfg.pretrain_config()? };
    let (_, snaps) = pretrain_with_snapshots(&init, &world, &pcfg, &mut Rng::derive(seed, STREAM_PRETRAIN), &budgets)?;
    let held = heldout(&world, cfg.get("eval.heldout")?, seed)?;
    let queries = held.head(cfg.get("eval.queries")?);
    let mut points = Vec::new();
    for (steps, model) in budgets.iter().zip(&snaps) {
        let lg = heldout_generative_loss(model, &held, &pcfg.sources)?;
        let refined = refine(cfg, &world, model, seed, None)?.refined;
        let mods = world.modality_names();
        let mut recall = 0.0;
        for m in &mods {
            recall += retrieval_scores(&refined, &world, m, &queries, 1)?.0;
        }
        points.push(ScalingPoint {
            model_id: format!("steps-{steps}"),
            gen_score: lg,
            gen_direction: Direction::Lower,
            rep_score: recall / mods.len() as f64,
        });
    }
    let fit = grsl_fit(&points).map_err(|e| e.to_string());
    Ok(GrslSweep { seed, points, fit })
}

pub fn grsl_output(sweep: &GrslSweep) -> Result<RunOutput> {
    let mut buf = Vec::new();
    write_scaling_points(&sweep.points, &mut buf)?;
    Ok(RunOutput {
        files: vec![("grsl_points.csv".into(), String::from_utf8(buf).expect("ASCII CSV"))],
        summary: json!({
            "target": "grsl",
            "seed": sweep.seed,
            "fit": sweep.fit.as_ref().ok(),
            "fit_error": sweep.fit.as_ref().err(),
            "min_spearman": GRSL_MIN_SPEARMAN,
            "pass": sweep.fit.as_ref().is_ok_and(|f| f.spearman >= GRSL_MIN_SPEARMAN),
        }),
    })
}

// ---------------------------------------------------------------- hard-modality protocol

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeadocRow {
    pub seed: u64,
    pub dataset: String,
    pub arm: String,
    pub ndcg: f64,
    pub recall_at_1: f64,
}

/// Baseline: refine the pretrained model. Protocol: first continue
/// generative pretraining on a high-noise variant of one modality, then
/// refine. Both are scored on retrieval with high-noise queries.
pub fn seadoc_for_seed(cfg: &RunConfig, seed: u64) -> Result<[SeadocRow; 2]> {
    let stage = build_stage(cfg, seed)?;
    let modality = cfg.raw("seadoc.modality")?.to_string();
    let hard = stage.world.with_noise(&modality, cfg.get("seadoc.sigma")?)?;
    let extra_cfg = PretrainConfig { steps: cfg.get("seadoc.extra_steps")?, sources: vec![modality.clone()], ..cfg.pretrain_config()? };
    let continued = pretrain(&stage.pretrained, &hard, &extra_cfg, &mut Rng::derive(seed, STREAM_EXTRA))?.model;
    let queries = HeldOut::draw(&hard, cfg.get("eval.queries")?, &mut Rng::derive(seed, STREAM_HARD_QUERIES))?;
    let k: usize = cfg.get("eval.ndcg_k")?;
    let dataset = dataset_id(&hard);
    let score = |model: &ToyModel, arm: &str| -> Result<SeadocRow> {
        let refined = refine(cfg, &hard, model, seed, None)?.refined;
        let (r1, ndcg) = retrieval_scores(&refined, &hard, &modality, &queries, k)?;
        Ok(SeadocRow { seed, dataset: dataset.clone(), arm: arm.to_string(), ndcg, recall_at_1: r1 })
    };
    Ok([score(&stage.pretrained, "baseline")?, score(&continued, "continued")?])
}

/// The protocol must match or beat the baseline on at least this many seeds out of five.
pub const SEADOC_MIN_WINS_OF_5: usize = 4;

pub fn seadoc_output(cfg: &RunConfig, rows: &[[SeadocRow; 2]]) -> Result<RunOutput> {
    let k: usize = cfg.get("eval.ndcg_k")?;
    let ndcg_col = format!("ndcg_at_{k}");
    let mut csv = Csv::new(&["seed", "dataset", "arm", &ndcg_col, "recall_at_1"]);
    let mut wins = 0;
    for [base, cont] in rows {
        for r in [base, cont] {
            csv.row(&[r.seed.to_string(), r.dataset.clone(), r.arm.clone(), r.ndcg.to_string(), r.recall_at_1.to_string()]);
        }
        wins += (cont.ndcg >= base.ndcg) as usize;
    }
    let needed = (SEADOC_MIN_WINS_OF_5 * rows.len()).div_ceil(5);
    Ok(RunOutput {
        files: vec![("seadoc_protocol.csv".into(), csv.finish())],
        summary: json!({
            "target": "seadoc-protocol",
            "modality": cfg.raw("seadoc.modality")?,
            "sigma": cfg.get::<f64>("seadoc.sigma")?,
            "seeds_improved_or_tied": wins,
            "seeds": rows.len(),
            "pass": wins >= needed,
        }),
    })
}

// ---------------------------------------------------------------- bound

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRun {
    pub seed: u64,
    pub report: BoundReport,
}

/// One pretrained model; for each sweep seed a fresh adapter is trained on
/// a fixed pool of batches and checked against the bound on fresh batches.
pub fn bound_sweep(cfg: &RunConfig, seed: u64, threads: usize) -> Result<Vec<BoundRun>> {
    let stage = build_stage(cfg, seed)?;
    let hard_negatives: bool = cfg.get("cl.hard_negatives")?;
    let batch: usize = cfg.get("cl.batch")?;
    let mut pool_rng = Rng::derive(seed, STREAM_POOL);
    let batches = (0..cfg.get::<usize>("bound.pool_batches")?)
        .map(|_| {
            let b = make_toy_triplets(&stage.world, batch, &mut pool_rng)?;
            Ok(if hard_negatives { b } else { b.without_hard_negatives() })
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = BatchPool::new(batches)?;
    let eval_batch: usize = match cfg.get("bound.eval_batch")? {
        0 => batch,
        b => b,
    };
    let seeds = seed_list(seed.wrapping_add(1), cfg.get("bound.seeds")?);
    par_map(&seeds, threads, |&s| {
        let mut cl = cfg.cl_config(s)?;
        cl.steps = cfg.get("bound.cl_steps")?;
        let refined = cl_train(&stage.pretrained, &mut pool.clone(), &cl)?.refined;
        let train_loss = mean_infonce(&refined, pool.batches(), cl.tau)?;
        let check = BoundCheckConfig {
            batch: eval_batch,
            hard_negatives,
            heldout_batches: cfg.get("bound.heldout_batches")?,
            heldout_seed: Rng::derive(s, STREAM_BOUND).next_u64(),
            tau: cl.tau,
            delta: cfg.get("bound.delta")?,
            sigma_q: cfg.get("bound.sigma_q")?,
            sigma_p: cfg.get("bound.sigma_p")?,
        };
        let report = bound_check(Some(&stage.pretrained), &refined, &stage.world, train_loss, pool.samples(), &check)?;
        Ok(BoundRun { seed: s, report })
    })
}

/// Fraction of sweep runs whose bound must hold.
pub const BOUND_MIN_HOLD_RATE: f64 = 0.95;

pub const BOUND_HEADER: &[&str] = &[
    "seed", "empirical_pop_risk", "bound", "holds", "batch_size_n", "i_p", "eps_p", "kl", "n_samples", "delta", "train_loss", "h_y", "lg",
];

pub fn bound_output(runs: &[BoundRun]) -> RunOutput {
    let mut csv = Csv::new(BOUND_HEADER);
    for r in runs {
        let b = &r.report;
        let i = &b.inputs;
        csv.row(&[
            r.seed.to_string(),
            b.empirical_pop_risk.to_string(),
            b.bound.to_string(),
            b.holds.to_string(),
            i.batch_size_n.to_string(),
            i.i_p.to_string(),
            i.eps_p.to_string(),
            i.kl.to_string(),
            i.n_samples.to_string(),
            i.delta.to_string(),
            b.train_loss.to_string(),
            b.h_y.to_string(),
            b.lg.to_string(),
        ]);
    }
    let held = runs.iter().filter(|r| r.report.holds).count();
    let rate = held as f64 / runs.len().max(1) as f64;
    RunOutput {
        files: vec![("bound_sweep.csv".into(), csv.finish())],
        summary: json!({
            "target": "bound",
            "runs": runs.len(),
            "holds": held,
            "hold_rate": rate,
            "min_hold_rate": BOUND_MIN_HOLD_RATE,
            "sigma_q": runs.first().map(|r| r.report.sigma_q),
            "sigma_p": runs.first().map(|r| r.report.sigma_p),
            "pass": !runs.is_empty() && rate >= BOUND_MIN_HOLD_RATE,
        }),
    }
}

// ---------------------------------------------------------------- information check

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InfoCheck {
    pub seed: u64,
    pub modality: String,
    pub h_y: f64,
    /// Per-sequence held-out generative loss.
    pub lg: f64,
    pub i_estimate: f64,
    pub i_true: f64,
    pub i_true_std_err: f64,
    pub gap: f64,
}

/// Maximum allowed `|(H(Y) − Lg) − I_true|` in nats.
pub const INFO_MAX_GAP: f64 = 0.15;

/// Pretrains on a small world (`info.K` classes, every modality at
/// `info.sigma`) and compares `H(Y) − Lg` with the Monte Carlo `I(X;Y)`.
pub fn info_check(cfg: &RunConfig, seed: u64) -> Result<InfoCheck> {
    let mut spec = cfg.world_spec(seed)?;
    spec.classes = cfg.get("info.K")?;
    let sigma: f64 = cfg.get("info.sigma")?;
    for m in &mut spec.modalities {
        m.noise_sigma = sigma;
    }
    spec.validate()?;
    let world = build_world(&spec)?;
    let init = init_model(&cfg.model_spec(&spec, seed)?)?;
    let model = pretrain(&init, &world, &cfg.pretrain_config()?, &mut Rng::derive(seed, STREAM_PRETRAIN))?.model;
    let modality = cfg.raw("eval.align_modality")?.to_string();
    let mut rng = Rng::derive(seed, STREAM_INFO);
    let held = HeldOut::draw(&world, cfg.get("info.heldout")?, &mut rng)?;
    let lg = generative_loss_for(&model, &modality, held.inputs(&modality)?, &held.targets, None)? * spec.text_len as f64;
    let truth = true_info(&world, &modality, cfg.get("info.n_mc")?, &mut rng)?;
    let i_estimate = crate::theory::mi_from_generative(truth.h_y, lg);
    Ok(InfoCheck {
        seed,
        modality,
        h_y: truth.h_y,
        lg,
        i_estimate,
        i_true: truth.i_xy,
        i_true_std_err: truth.std_err,
        gap: (truth.h_y - lg - truth.i_xy).abs(),
    })
}

pub fn info_output(c: &InfoCheck) -> RunOutput {
    let mut csv = Csv::new(&["seed", "modality", "h_y", "lg", "i_estimate", "i_true", "i_true_std_err", "gap"]);
    csv.row(&[
        c.seed.to_string(),
        c.modality.clone(),
        c.h_y.to_string(),
        c.lg.to_string(),
        c.i_estimate.to_string(),
        c.i_true.to_string(),
        c.i_true_std_err.to_string(),
        c.gap.to_string(),
    ]);
    RunOutput {
        files: vec![("info_check.csv".into(), csv.finish())],
        summary: json!({ "target": "info-check", "result": c, "max_gap": INFO_MAX_GAP, "pass": c.gap < INFO_MAX_GAP }),
    }
}

// ---------------------------------------------------------------- replicate

pub const REPLICATE_TARGETS: &[&str] = &["fig1", "fig2", "table4", "grsl", "fig5", "seadoc-protocol", "bound", "info-check"];

/// Runs one named replication over `replicate.seeds` seeds starting at `seed`.
pub fn replicate(cfg: &RunConfig, target: &str, seed: u64, threads: usize) -> Result<RunOutput> {
    let seeds = seed_list(seed, cfg.get("replicate.seeds")?);
    match target {
        "fig1" => Ok(fig1_output(&figures(cfg, &seeds, threads)?)),
        "fig2" => Ok(fig2_output(&figures(cfg, &seeds, threads)?)),
        "table4" => table4_output(cfg, &seeds, threads),
        "grsl" | "fig5" => grsl_output(&grsl_sweep(cfg, seed)?),
        "seadoc-protocol" => {
            let rows = par_map(&seeds, threads, |&s| seadoc_for_seed(cfg, s))?;
            seadoc_output(cfg, &rows)
        }
        "bound" => Ok(bound_output(&bound_sweep(cfg, seed, threads)?)),
        "info-check" => Ok(info_output(&info_check(cfg, seed)?)),
        other => Err(invalid(format!("unknown replicate target `{other}` (one of {})", REPLICATE_TARGETS.join(", ")))),
    }
}
