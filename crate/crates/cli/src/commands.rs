//! The batch commands. Each writes into its own directory under `out_dir`
//! and records the job configuration next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use morphforge_core::blend::{compose_morph_detailed, MorphParams};
use morphforge_core::dataset::{
    build_regime, expand_augmented, load_manifest, read_samples, records_in, select_pairs, split_dataset, write_manifest,
    write_samples, FaceRecord, Gender, MorphPair, Regime, SampleKind, SampleRecord, Split,
};
use morphforge_core::imaging::{save_png, ImageBuffer};
use morphforge_core::partial::{compose_partial, RegionId, RegionSet};
use morphforge_core::render::{CropOptions, FaceStore};
use morphforge_core::seed::{derive_seed, derived_rng};
use morphforge_core::synth::FaceParams;
use morphforge_learn::attack::{
    blackbox_attack_with, train_substitute, whitebox_curve, NetOracle, Oracle, RobustnessCurve, SubstituteConfig,
    SubstituteReport, MORPH_CLASS,
};
use morphforge_learn::lrp::{lrp_propagate, mean_adjust, region_relevance, region_table, LrpError, LrpRules, RelevanceMap};
use morphforge_learn::nn::{
    evaluate_scores, load_network, retrain_head, save_network, train, EvalReport, Head, HeadRetrainConfig, Loss,
    Network, Tensor, TrainConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{JobConfig, ModelConfig};
use crate::error::{CliError, IoContext, Result};
use crate::pipeline::{load_faces, RenderedSet};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).at(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Creates a command's output directory and stores the job there.
fn job_dir(cfg: &JobConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(name);
    create_dir(&dir)?;
    write_text(&dir.join("job.json"), &cfg.to_json())?;
    Ok(dir)
}

fn crop(cfg: &JobConfig) -> CropOptions {
    CropOptions::with_shift_margin(cfg.dataset.crop_size)
}

fn morph_params(cfg: &JobConfig) -> MorphParams {
    MorphParams {
        method: cfg.morph.method,
        alpha: cfg.morph.alpha,
        outer_source: cfg.morph.outer_source,
        ..MorphParams::default()
    }
}

fn dataset_faces(cfg: &JobConfig) -> Result<FaceStore> {
    Ok(load_faces(&cfg.dataset_dir().join("faces.tsv"))?.1)
}

fn load_set(cfg: &JobConfig, store: &FaceStore, file: &str) -> Result<RenderedSet> {
    RenderedSet::load(&cfg.dataset_dir().join(file), store, &morph_params(cfg), crop(cfg))
}

fn model_path(cfg: &JobConfig) -> PathBuf {
    cfg.model_dir().join("model.mfnn")
}

/// Writes `count` procedural faces with landmark files and a manifest.
pub fn cmd_synth(cfg: &JobConfig) -> Result<PathBuf> {
    let dir = job_dir(cfg, "faces")?;
    let s = &cfg.synth;
    let databases = s.databases.max(1);
    let records: Vec<FaceRecord> = (0..s.count)
        .into_par_iter()
        .map(|i| {
            let male = i % 2 == 0;
            let params = FaceParams::random(&mut derived_rng(cfg.seed, "face", i as u64), male);
            let (img, lm) = params.render(s.size, s.size);
            let id = format!("face{i:04}");
            let image = dir.join(format!("{id}.png"));
            let landmarks = dir.join(format!("{id}.txt"));
            save_png(&img, &image)?;
            write_text(&landmarks, &lm.to_text())?;
            Ok(FaceRecord {
                id,
                image,
                landmarks,
                gender: if male { Gender::M } else { Gender::F },
                database: format!("synth{}", (i / 2) % databases),
                split: None,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Provenance of one `morph` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphRecord {
    pub output: String,
    pub a: String,
    pub b: String,
    pub method: morphforge_core::warp::WarpMethod,
    pub alpha: f64,
    pub outer_source: morphforge_core::blend::OuterSource,
    pub regions: RegionSet,
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[..] {
            ["a", "b"] if n == 0 => {}
            [a, b] => out.push((a.to_string(), b.to_string())),
            _ => return Err(CliError::data(format!("{}:{}: expected two tab-separated ids", path.display(), n + 1))),
        }
    }
    Ok(out)
}

/// Renders full-resolution morphs (or partial morphs) for listed pairs.
pub fn cmd_morph(cfg: &JobConfig) -> Result<Vec<MorphRecord>> {
    let pairs_path = cfg
        .morph
        .pairs
        .as_ref()
        .ok_or_else(|| CliError::config("morph.pairs is required"))?;
    let pairs = read_pairs(pairs_path)?;
    let (_, store) = load_faces(&cfg.manifest_path())?;
    let dir = job_dir(cfg, "morphs")?;
    let params = morph_params(cfg);
    let regions = cfg.morph.regions;
    let records: Vec<MorphRecord> = pairs
        .par_iter()
        .map(|(a, b)| {
            let (fa, fb) = (store.get(a)?, store.get(b)?);
            let m = compose_morph_detailed(&fa.image, &fb.image, &fa.landmarks, &fb.landmarks, &params)?;
            let image = if regions.is_empty() {
                m.image
            } else {
                compose_partial(&m.image, &m.outer, &m.target, regions)?
            };
            let output = if regions.is_empty() {
                format!("{a}__{b}.png")
            } else {
                format!("{a}__{b}__{regions}.png")
            };
            save_png(&image, dir.join(&output))?;
            Ok(MorphRecord {
                output,
                a: a.clone(),
                b: b.clone(),
                method: params.method,
                alpha: params.alpha,
                outer_source: params.outer_source,
                regions,
            })
        })
        .collect::<Result<_>>()?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::data(e.to_string()))?);
        text.push('\n');
    }
    write_text(&dir.join("provenance.jsonl"), &text)?;
    Ok(records)
}

fn pair_count(records: usize, per_image: f64) -> usize {
    (records as f64 * per_image / 2.0).round() as usize
}

/// Every genuine test image once, and every test pair as a complete morph
/// plus one partial morph per region.
pub fn benchmark_samples(records: &[FaceRecord], pairs: &[MorphPair], seed: u64) -> Vec<SampleRecord> {
    let mut out = Vec::new();
    let mut push = |kind: SampleKind, sources: Vec<String>, method, regions: RegionSet| {
        let index = out.len();
        let mut s = SampleRecord {
            id: format!("test-{index:06}"),
            kind,
            sources,
            method,
            outer_source: Default::default(),
            regions,
            label: Vec::new(),
            augment: None,
            seed: derive_seed(seed, "test", index as u64 + 1),
        };
        s.label = vec![s.is_attack() as u8];
        out.push(s);
    };
    for r in records {
        push(SampleKind::Genuine, vec![r.id.clone()], None, RegionSet::EMPTY);
    }
    for p in pairs {
        let sources = vec![p.a.clone(), p.b.clone()];
        push(SampleKind::CompleteMorph, sources.clone(), Some(p.method), RegionSet::EMPTY);
        for r in RegionId::ALL {
            push(SampleKind::PartialMorph, sources.clone(), Some(p.method), RegionSet::EMPTY.with(r));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub regime: Regime,
    pub split_counts: [usize; 3],
    pub pairs: [usize; 3],
    pub train: usize,
    pub head: usize,
    pub val: usize,
    pub test: usize,
}

fn absolute(records: Vec<FaceRecord>) -> Result<Vec<FaceRecord>> {
    records
        .into_iter()
        .map(|mut r| {
            r.image = fs::canonicalize(&r.image).at(&r.image)?;
            r.landmarks = fs::canonicalize(&r.landmarks).at(&r.landmarks)?;
            Ok(r)
        })
        .collect()
}

/// Splits the manifest, selects pairs per split and writes the sample lists
/// of the training regime, the validation seed set and the test benchmark.
pub fn cmd_dataset(cfg: &JobConfig) -> Result<DatasetSummary> {
    let d = &cfg.dataset;
    let records = absolute(load_manifest(cfg.manifest_path())?)?;
    let dir = job_dir(cfg, "dataset")?;
    let records = split_dataset(&records, d.ratios, cfg.seed)?;
    write_manifest(dir.join("faces.tsv"), &records)?;

    let splits = [Split::Train, Split::Test, Split::Val];
    let mut split_counts = [0; 3];
    let mut pairs: Vec<Vec<MorphPair>> = Vec::new();
    for (k, split) in splits.into_iter().enumerate() {
        let recs = records_in(&records, split);
        split_counts[k] = recs.len();
        let p = select_pairs(&recs, pair_count(recs.len(), d.pairs_per_image), derive_seed(cfg.seed, "pairs", k as u64))?;
        let mut text = String::from("a\tb\tmethod\n");
        for m in &p {
            text.push_str(&format!("{}\t{}\t{}\n", m.a, m.b, m.method));
        }
        write_text(&dir.join(format!("pairs-{split}.tsv")), &text)?;
        pairs.push(p);
    }
    let expand = |s: Vec<SampleRecord>| if d.augment { expand_augmented(&s) } else { s };

    let train_recs = records_in(&records, Split::Train);
    let train = expand(build_regime(&train_recs, &pairs[0], d.regime, d.train_total, cfg.seed)?);
    write_samples(dir.join("train.jsonl"), &train)?;
    let head = if d.regime.is_multilabel() {
        let head = expand(build_regime(&train_recs, &pairs[0], Regime::Complex, d.train_total, derive_seed(cfg.seed, "head", 0))?);
        write_samples(dir.join("head.jsonl"), &head)?;
        head.len()
    } else {
        0
    };

    let val_recs = records_in(&records, Split::Val);
    let mut val = build_regime(&val_recs, &pairs[2], Regime::Naive, d.val_total, derive_seed(cfg.seed, "val", 0))?;
    for (i, s) in val.iter_mut().enumerate() {
        s.id = format!("val-{i:06}");
    }
    write_samples(dir.join("val.jsonl"), &val)?;

    let test = benchmark_samples(&records_in(&records, Split::Test), &pairs[1], derive_seed(cfg.seed, "test", 0));
    write_samples(dir.join("test.jsonl"), &test)?;

    let summary = DatasetSummary {
        regime: d.regime,
        split_counts,
        pairs: [pairs[0].len(), pairs[1].len(), pairs[2].len()],
        train: train.len(),
        head,
        val: val.len(),
        test: test.len(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn fresh_network(cfg: &JobConfig, arch: &ModelConfig, head: Head, tag: &str) -> Result<Network> {
    let size = cfg.dataset.crop_size;
    let specs = Network::default_specs(3, size, arch.blocks, arch.width, arch.hidden, head);
    Ok(Network::from_specs(vec![3, size, size], &specs, &mut derived_rng(cfg.seed, tag, 0))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub multilabel: bool,
    pub samples: usize,
    pub epoch_loss: Vec<f64>,
    pub head_loss: Vec<f64>,
    pub params: usize,
}

/// Trains the detector on `train.jsonl`. A multi-label sample list trains a
/// four-output sigmoid net whose head is then retrained as a binary
/// classifier on `head.jsonl`.
pub fn cmd_train(cfg: &JobConfig) -> Result<TrainSummary> {
    let store = dataset_faces(cfg)?;
    let set = load_set(cfg, &store, "train.jsonl")?;
    if set.is_empty() {
        return Err(CliError::data("train.jsonl is empty"));
    }
    let multilabel = set.samples[0].label.len() == 4;
    let (head, loss) = if multilabel {
        (Head::Sigmoid(4), Loss::MultilabelBce)
    } else {
        (Head::Softmax(2), Loss::CrossEntropy)
    };
    let dir = job_dir(cfg, "model")?;
    let t = &cfg.train;
    let mut net = fresh_network(cfg, &cfg.model, head, "init")?;
    let report = train(
        &mut net,
        &set.examples(cfg.dataset.shift),
        &TrainConfig {
            loss,
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: derive_seed(cfg.seed, "train", 0),
            layer_lr: None,
            final_lr_fraction: t.final_lr_fraction,
            max_grad_norm: t.max_grad_norm,
        },
    )?;
    check_finite(&report.epoch_loss)?;
    let mut loss_tsv = String::from("phase\tepoch\tloss\n");
    for (e, l) in report.epoch_loss.iter().enumerate() {
        loss_tsv.push_str(&format!("train\t{e}\t{l}\n"));
    }
    let mut head_loss = Vec::new();
    let net = if multilabel {
        save_network(&net, dir.join("multilabel.mfnn"))?;
        drop(set);
        let head_set = load_set(cfg, &store, "head.jsonl")?;
        let (binary, r) = retrain_head(
            &net,
            &head_set.examples(cfg.dataset.shift),
            &HeadRetrainConfig {
                lr_last: t.head_lr,
                lr_second_last: t.head_lr_second,
                momentum: t.momentum,
                epochs: t.head_epochs,
                batch_size: t.batch_size,
                seed: derive_seed(cfg.seed, "head", 0),
                final_lr_fraction: t.final_lr_fraction,
                max_grad_norm: t.max_grad_norm,
            },
        )?;
        check_finite(&r.epoch_loss)?;
        for (e, l) in r.epoch_loss.iter().enumerate() {
            loss_tsv.push_str(&format!("head\t{e}\t{l}\n"));
        }
        head_loss = r.epoch_loss;
        binary
    } else {
        net
    };
    save_network(&net, dir.join("model.mfnn"))?;
    write_text(&dir.join("loss.tsv"), &loss_tsv)?;
    let summary = TrainSummary {
        multilabel,
        samples: report.epoch_loss.len(),
        epoch_loss: report.epoch_loss,
        head_loss,
        params: net.param_count(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn check_finite(losses: &[f64]) -> Result<()> {
    match losses.iter().position(|l| !l.is_finite()) {
        Some(e) => Err(CliError::numeric(format!("training loss is not finite in epoch {e}"))),
        None => Ok(()),
    }
}

/// Name of the evaluation group a sample belongs to.
pub fn group_of(s: &SampleRecord) -> String {
    match (s.kind, s.regions.len()) {
        (SampleKind::Genuine, _) => "genuine".into(),
        (SampleKind::CompleteMorph, _) => "complete".into(),
        (SampleKind::PartialMorph, 1) => s.regions.iter().next().expect("one region").name().into(),
        (SampleKind::PartialMorph, k) => format!("{k}_regions"),
    }
}

/// Fraction of a group classified correctly at the operating threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub group: String,
    pub count: usize,
    pub correct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub groups: Vec<GroupRate>,
    /// Accuracy on genuine images and complete morphs only.
    pub complete_accuracy: f64,
}

impl EvalSummary {
    pub fn group(&self, name: &str) -> Option<&GroupRate> {
        self.groups.iter().find(|g| g.group == name)
    }

    /// Mean detection rate over the four one-region partial morph groups.
    pub fn one_region_mean(&self) -> f64 {
        let rates: Vec<f64> = RegionId::ALL.iter().filter_map(|r| self.group(r.name())).map(|g| g.correct).collect();
        rates.iter().sum::<f64>() / rates.len().max(1) as f64
    }
}

/// Scores the test benchmark.
pub fn cmd_eval(cfg: &JobConfig) -> Result<EvalSummary> {
    let net = load_network(model_path(cfg))?;
    let store = dataset_faces(cfg)?;
    let set = load_set(cfg, &store, "test.jsonl")?;
    let scores = (0..set.len())
        .into_par_iter()
        .map(|i| net.morph_score(&set.tensor(i)))
        .collect::<Result<Vec<f64>, _>>()?;
    let is_morph: Vec<bool> = set.samples.iter().map(SampleRecord::is_attack).collect();
    let operating = 0.5;
    let report = evaluate_scores(&scores, &is_morph, cfg.eval.thresholds.as_deref(), operating)?;

    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut scores_tsv = String::from("id\tgroup\tscore\n");
    let (mut complete_n, mut complete_ok) = (0, 0);
    for ((s, &score), &m) in set.samples.iter().zip(&scores).zip(&is_morph) {
        let g = group_of(s);
        let ok = (score >= operating) == m;
        let e = groups.entry(g.clone()).or_default();
        e.0 += 1;
        e.1 += ok as usize;
        if s.kind != SampleKind::PartialMorph {
            complete_n += 1;
            complete_ok += ok as usize;
        }
        scores_tsv.push_str(&format!("{}\t{g}\t{score}\n", s.id));
    }
    let groups: Vec<GroupRate> = groups
        .into_iter()
        .map(|(group, (count, ok))| GroupRate {
            group,
            count,
            correct: ok as f64 / count as f64,
        })
        .collect();
    let summary = EvalSummary {
        report,
        groups,
        complete_accuracy: complete_ok as f64 / complete_n.max(1) as f64,
    };
    let dir = job_dir(cfg, "eval")?;
    write_text(&dir.join("scores.tsv"), &scores_tsv)?;
    write_text(&dir.join("curve.tsv"), &summary.report.curve_tsv())?;
    let mut groups_tsv = String::from("group\tcount\tcorrect\n");
    for g in &summary.groups {
        groups_tsv.push_str(&format!("{}\t{}\t{}\n", g.group, g.count, g.correct));
    }
    write_text(&dir.join("groups.tsv"), &groups_tsv)?;
    write_json(&dir.join("report.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub substitute: SubstituteReport,
    pub blackbox: RobustnessCurve,
    pub whitebox: Option<RobustnessCurve>,
    /// Oracle queries of the whole run: substitute training plus attack.
    pub oracle_queries: usize,
}

/// Black-box FGSM through a substitute trained on validation images
/// labelled by the detector, optionally also white-box FGSM.
pub fn cmd_attack(cfg: &JobConfig) -> Result<AttackSummary> {
    let a = &cfg.attack;
    let oracle = NetOracle::new(load_network(model_path(cfg))?);
    let store = dataset_faces(cfg)?;
    let seeds = load_set(cfg, &store, "val.jsonl")?.tensors();
    let test = load_set(cfg, &store, "test.jsonl")?;
    let morphs: Vec<Tensor> = (0..test.len())
        .filter(|&i| test.samples[i].kind == SampleKind::CompleteMorph)
        .map(|i| test.tensor(i))
        .collect();
    let substitute = fresh_network(cfg, &a.substitute, Head::Softmax(2), "substitute-init")?;
    let sub_cfg = SubstituteConfig {
        rounds: a.rounds,
        lambda: a.lambda,
        train: TrainConfig {
            loss: Loss::CrossEntropy,
            lr: a.substitute_lr,
            momentum: cfg.train.momentum,
            epochs: a.substitute_epochs,
            batch_size: cfg.train.batch_size,
            seed: derive_seed(cfg.seed, "substitute", 0),
            layer_lr: None,
            final_lr_fraction: 1.0,
            max_grad_norm: None,
        },
    };
    let (substitute, sub_report) = train_substitute(&oracle, &seeds, substitute, &sub_cfg)?;
    let dumped = Mutex::new(Vec::new());
    let blackbox = blackbox_attack_with(&oracle, &substitute, &morphs, &a.epsilons, |eps, i, adv| {
        if a.dump {
            dumped.lock().expect("dump lock").push((eps, i, adv.clone()));
        }
    })?;
    let oracle_queries = oracle.queries();
    let whitebox = if a.whitebox {
        Some(whitebox_curve(oracle.network(), &morphs, &a.epsilons)?)
    } else {
        None
    };
    let dir = job_dir(cfg, "attack")?;
    if a.dump {
        let adv_dir = dir.join("adversarial");
        create_dir(&adv_dir)?;
        let mut dumped = dumped.into_inner().expect("dump lock");
        dumped.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for (eps, i, t) in dumped {
            save_png(&t.to_image()?, adv_dir.join(format!("eps{eps}-{i:04}.png")))?;
        }
    }
    write_text(&dir.join("blackbox.tsv"), &blackbox.to_tsv())?;
    if let Some(w) = &whitebox {
        write_text(&dir.join("whitebox.tsv"), &w.to_tsv())?;
    }
    let summary = AttackSummary {
        substitute: sub_report,
        blackbox,
        whitebox,
        oracle_queries,
    };
    write_json(&dir.join("report.json"), &summary)?;
    Ok(summary)
}

/// Signed relevance as a diverging red (positive) / blue (negative) image,
/// scaled by the largest magnitude.
pub fn heatmap(map: &RelevanceMap) -> ImageBuffer {
    let peak = map.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ImageBuffer::from_fn(map.width, map.height, 3, |x, y, c| {
        let t = if peak > 0.0 { map.get(x, y) / peak } else { 0.0 };
        let fade = 1.0 - t.abs();
        match (c, t >= 0.0) {
            (0, true) | (2, false) => 1.0,
            _ => fade,
        }
    })
}

/// Mean region fractions of one sample group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRow {
    pub group: String,
    pub explained: usize,
    /// Samples below the output gate or without in-region relevance.
    pub skipped: usize,
    pub fractions: [f64; 4],
}

/// Explains the morph decision on every partial morph of the test benchmark
/// and reports mean-adjusted relevance per face region.
pub fn cmd_lrp(cfg: &JobConfig) -> Result<Vec<RelevanceRow>> {
    let net = load_network(model_path(cfg))?;
    let l = &cfg.lrp;
    let mut rules = LrpRules::for_network(&net).with_epsilon(l.epsilon);
    rules.gate = l.gate;
    if let Some(f) = l.flat_until {
        rules.flat_until = f;
    }
    let store = dataset_faces(cfg)?;
    let set = load_set(cfg, &store, "test.jsonl")?;
    let picked: Vec<usize> = (0..set.len()).filter(|&i| set.samples[i].kind == SampleKind::PartialMorph).collect();
    let maps = picked
        .par_iter()
        .map(|&i| match lrp_propagate(&net, &set.tensor(i), MORPH_CLASS, &rules) {
            Ok(m) => Ok(Some(m)),
            Err(LrpError::BelowGate { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let dir = job_dir(cfg, "lrp")?;
    if l.heatmaps {
        create_dir(&dir.join("heatmaps"))?;
        create_dir(&dir.join("maps"))?;
    }
    let mut by_group: BTreeMap<String, (Vec<usize>, usize)> = BTreeMap::new();
    for (k, &i) in picked.iter().enumerate() {
        let e = by_group.entry(group_of(&set.samples[i])).or_default();
        match &maps[k] {
            Some(m) => {
                e.0.push(k);
                if l.heatmaps {
                    let id = &set.samples[i].id;
                    save_png(&heatmap(m), dir.join("heatmaps").join(format!("{id}.png")))?;
                    write_text(&dir.join("maps").join(format!("{id}.tsv")), &grid_text(m))?;
                }
            }
            None => e.1 += 1,
        }
    }
    let mut rows = Vec::new();
    for (group, (members, mut skipped)) in by_group {
        let group_maps: Vec<RelevanceMap> = members.iter().map(|&k| maps[k].clone().expect("kept map")).collect();
        let mut sum = [0.0; 4];
        let mut explained = 0;
        if !group_maps.is_empty() {
            for (adj, &k) in mean_adjust(&group_maps)?.iter().zip(&members) {
                match region_relevance(adj, &set.rendered[picked[k]].landmarks) {
                    Ok(f) => {
                        explained += 1;
                        for r in 0..4 {
                            sum[r] += f[r];
                        }
                    }
                    Err(LrpError::ZeroRegionRelevance) => skipped += 1,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        rows.push(RelevanceRow {
            group,
            explained,
            skipped,
            fractions: sum.map(|s| s / explained.max(1) as f64),
        });
    }
    let table: Vec<(String, [f64; 4])> = rows.iter().map(|r| (r.group.clone(), r.fractions)).collect();
    write_text(&dir.join("regions.tsv"), &region_table(&table))?;
    write_json(&dir.join("report.json"), &rows)?;
    Ok(rows)
}

fn grid_text(m: &RelevanceMap) -> String {
    let mut s = String::new();
    for y in 0..m.height {
        let row: Vec<String> = (0..m.width).map(|x| m.get(x, y).to_string()).collect();
        s.push_str(&row.join("\t"));
        s.push('\n');
    }
    s
}

/// Summarizes a manifest (`.tsv`), sample list (`.jsonl`) or model
/// (`.mfnn`).
pub fn cmd_inspect(path: &Path) -> Result<Value> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "tsv" => {
            let records = load_manifest(path)?;
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for r in &records {
                let split = r.split.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
                *counts.entry(format!("{split}/{}/{}", r.database, r.gender)).or_default() += 1;
            }
            Ok(json!({ "kind": "manifest", "records": records.len(), "split/database/gender": counts }))
        }
        "jsonl" => {
            let samples = read_samples(path)?;
            let mut groups: BTreeMap<String, usize> = BTreeMap::new();
            for s in &samples {
                *groups.entry(group_of(s)).or_default() += 1;
            }
            let augmented = samples.iter().filter(|s| s.augment.is_some()).count();
            Ok(json!({ "kind": "samples", "samples": samples.len(), "augmented": augmented, "groups": groups }))
        }
        "mfnn" => {
            let net = load_network(path)?;
            Ok(json!({
                "kind": "model",
                "input_shape": net.input_shape,
                "layers": net.specs(),
                "params": net.param_count(),
            }))
        }
        other => Err(CliError::config(format!("cannot inspect {:?} files", other))),
    }
}
