//! End-to-end orchestration and the on-disk layout of its artifacts.
//!
//! Subject directory layout (`<dir>/<subject_id>/`):
//! `subject.json` plus, per view `i`, `view{i}.probs.grit` and optionally
//! `view{i}.replica{r}.grit`, `view{i}.image.grit`, `view{i}.truth.grit`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::train::{predict, write_log_csv};
use crate::adaptation::{
    generate_pseudo_label, run_adaptation, train_source_model, AdaptSample, AdaptationState,
    HeldoutSample, LogRow, TinyModel,
};
use crate::config::{RunConfig, ViewPredictions};
use crate::error::{Error, Result, Stage};
use crate::integration::{ground_and_integrate, GroundedSubject};
use crate::io::{
    load_image, load_labels, load_map, read_json, save_image, save_labels, save_map, write_json,
};
use crate::map::{Class, Image, LabelMap};
use crate::metrics::{aggregate, score_image, write_scores_csv, EvalReport, ImageScore};
use crate::par::{self, Exec};
use crate::subject::{ScanKind, SubjectBag, View};
use crate::synth::{generate_subject, source_domain_samples};

/// Seed offset separating source-domain subjects from target subjects.
const SOURCE_SEED_OFFSET: u64 = 1 << 32;

/// A subject's views with their images and, when known, true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub bag: SubjectBag,
    pub images: Vec<Option<Image>>,
    pub truth: Option<Vec<LabelMap>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewRecord {
    kind: ScanKind,
    domain: String,
    #[serde(default)]
    class_map: Option<Vec<Option<Class>>>,
    #[serde(default)]
    replicas: usize,
    #[serde(default)]
    image: bool,
    #[serde(default)]
    truth: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectRecord {
    subject_id: String,
    views: Vec<ViewRecord>,
}

pub fn save_subject(dir: &Path, s: &SubjectData) -> Result<()> {
    let root = dir.join(&s.bag.subject_id);
    std::fs::create_dir_all(&root)?;
    let mut views = Vec::new();
    for (i, v) in s.bag.views.iter().enumerate() {
        save_map(&v.probs, &root.join(format!("view{i}.probs.grit")))?;
        for (r, rep) in v.replicas.iter().enumerate() {
            save_map(rep, &root.join(format!("view{i}.replica{r}.grit")))?;
        }
        let image = s.images.get(i).and_then(|m| m.as_ref());
        if let Some(img) = image {
            save_image(img, &root.join(format!("view{i}.image.grit")))?;
        }
        let truth = s.truth.as_ref().map(|t| &t[i]);
        if let Some(t) = truth {
            save_labels(t, &root.join(format!("view{i}.truth.grit")))?;
        }
        views.push(ViewRecord {
            kind: v.kind,
            domain: v.domain.clone(),
            class_map: v.class_map.clone(),
            replicas: v.replicas.len(),
            image: image.is_some(),
            truth: truth.is_some(),
        });
    }
    write_json(
        &root.join("subject.json"),
        &SubjectRecord {
            subject_id: s.bag.subject_id.clone(),
            views,
        },
    )
}

pub fn load_subject(root: &Path) -> Result<SubjectData> {
    let rec: SubjectRecord = read_json(&root.join("subject.json"))?;
    let mut views = Vec::new();
    let mut images = Vec::new();
    let mut truth = Vec::new();
    for (i, r) in rec.views.iter().enumerate() {
        let mut v = View::new(
            r.domain.clone(),
            r.kind,
            load_map(&root.join(format!("view{i}.probs.grit")))?,
        );
        v.class_map = r.class_map.clone();
        v.replicas = (0..r.replicas)
            .map(|k| load_map(&root.join(format!("view{i}.replica{k}.grit"))))
            .collect::<Result<_>>()?;
        views.push(v);
        images.push(if r.image {
            Some(load_image(&root.join(format!("view{i}.image.grit")))?)
        } else {
            None
        });
        truth.push(if r.truth {
            Some(load_labels(&root.join(format!("view{i}.truth.grit")))?)
        } else {
            None
        });
    }
    let truth = truth.into_iter().collect::<Option<Vec<_>>>();
    Ok(SubjectData {
        bag: SubjectBag {
            subject_id: rec.subject_id,
            views,
        },
        images,
        truth,
    })
}

/// Every subject directory under `dir`, in name order.
pub fn load_subjects(dir: &Path) -> Result<Vec<SubjectData>> {
    let mut roots: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("subject.json").is_file())
        .collect();
    roots.sort();
    if roots.is_empty() {
        return Err(Error::Argument(format!(
            "no subjects found in {}",
            dir.display()
        )));
    }
    roots.iter().map(|r| load_subject(r)).collect()
}

pub fn save_subjects(dir: &Path, subjects: &[SubjectData]) -> Result<()> {
    subjects.iter().try_for_each(|s| save_subject(dir, s))
}

pub fn subject_seed(run_seed: u64, index: usize) -> u64 {
    run_seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn synthesize_subjects(cfg: &RunConfig, exec: Exec) -> Result<Vec<SubjectData>> {
    par::map_range(exec, cfg.subjects, |i| {
        let s = generate_subject(&cfg.synth, subject_seed(cfg.seed, i))?;
        Ok(SubjectData {
            bag: s.bag,
            images: s.images,
            truth: Some(s.truth),
        })
    })
    .into_iter()
    .collect()
}

/// Fits the source model on synthetic source-domain subjects.
pub fn fit_source_model(cfg: &RunConfig, exec: Exec) -> Result<TinyModel> {
    let samples = source_domain_samples(
        &cfg.synth,
        cfg.seed.wrapping_add(SOURCE_SEED_OFFSET),
        cfg.source.subjects,
    )?;
    train_source_model(&samples, &cfg.source, exec)
}

/// Replaces the maps of every view that has an image by `model`'s output.
pub fn apply_model(subjects: &mut [SubjectData], model: &TinyModel, exec: Exec) -> Result<()> {
    for s in subjects.iter_mut() {
        for (v, img) in s.bag.views.iter_mut().zip(&s.images) {
            if let Some(img) = img {
                v.probs = model.forward(img, exec)?;
                v.replicas.clear();
                v.class_map = None;
            }
        }
    }
    Ok(())
}

pub fn ground_subjects(
    subjects: &[SubjectData],
    cfg: &RunConfig,
    exec: Exec,
) -> Result<Vec<GroundedSubject>> {
    par::map(exec, subjects, |s| {
        ground_and_integrate(&s.bag, &cfg.registration, &cfg.integration)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub subject_id: String,
    pub reason: String,
}

/// Seeded split of `0..n` into (train, held-out) index lists, each sorted.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize)
        .clamp(usize::from(n > 1), n.saturating_sub(1).max(1));
    let (mut a, mut b) = (
        idx[..n_train.min(n)].to_vec(),
        idx[n_train.min(n)..].to_vec(),
    );
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Writes the integrated labels of one subject and its manifest.
pub fn save_grounded(dir: &Path, g: &GroundedSubject) -> Result<()> {
    let root = dir.join(&g.subject_id);
    std::fs::create_dir_all(&root)?;
    write_json(
        &root.join("registration.json"),
        &(&g.stage1, &g.stage2, &g.failure),
    )?;
    if let Some(int) = &g.integration {
        write_json(&root.join("manifest.json"), &int.manifest)?;
        for (i, l) in int.labels.iter().enumerate() {
            save_map(&l.soft, &root.join(format!("view{i}.soft.grit")))?;
            save_labels(&l.hard, &root.join(format!("view{i}.hard.grit")))?;
        }
    }
    Ok(())
}

/// Last stage a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Until {
    Integration,
    Adaptation,
    Evaluation,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub grounded: Vec<GroundedSubject>,
    pub exclusions: Vec<Exclusion>,
    pub train_subjects: Vec<String>,
    pub heldout_subjects: Vec<String>,
    pub source: TinyModel,
    pub adapted: Option<TinyModel>,
    pub log: Vec<LogRow>,
    pub scores: Vec<ImageScore>,
    pub report: Option<EvalReport>,
}

impl PipelineOutput {
    /// Mean held-out Dice (fraction) of `method` over artery and vein.
    pub fn mean_av_dice(&self, method: &str) -> Option<f64> {
        let report = self.report.as_ref()?;
        let g = |c| {
            report
                .group(method, "All", c)
                .and_then(|g| g.dice)
                .map(|s| s.mean)
        };
        Some((g(Class::Artery)? + g(Class::Vein)?) / 200.0)
    }

    /// Number of disc views of `method` containing any FAZ pixel.
    pub fn disc_faz_failures(&self, method: &str) -> usize {
        self.scores
            .iter()
            .filter(|s| s.method == method && s.faz_disc == Some(0.0))
            .count()
    }
}

/// Adaptation samples for every view with an image of the `train` subjects.
fn adaptation_samples(
    subjects: &[SubjectData],
    grounded: &[GroundedSubject],
    train: &[usize],
) -> Vec<AdaptSample> {
    let mut out = Vec::new();
    for &i in train {
        let labels = &grounded[i]
            .integration
            .as_ref()
            .expect("kept subjects are integrated")
            .labels;
        for (v, (view, img)) in subjects[i]
            .bag
            .views
            .iter()
            .zip(&subjects[i].images)
            .enumerate()
        {
            if let Some(img) = img {
                out.push(AdaptSample {
                    id: format!("{}/view{v}", subjects[i].bag.subject_id),
                    kind: view.kind,
                    image: img.clone(),
                    integrated: labels[v].hard.clone(),
                });
            }
        }
    }
    out
}

fn heldout_samples(subjects: &[SubjectData], held: &[usize]) -> Vec<HeldoutSample> {
    let mut out = Vec::new();
    for &i in held {
        let Some(truth) = &subjects[i].truth else {
            continue;
        };
        for (v, (view, img)) in subjects[i]
            .bag
            .views
            .iter()
            .zip(&subjects[i].images)
            .enumerate()
        {
            if let Some(img) = img {
                out.push(HeldoutSample {
                    id: format!("{}/view{v}", subjects[i].bag.subject_id),
                    kind: view.kind,
                    image: img.clone(),
                    truth: truth[v].clone(),
                });
            }
        }
    }
    out
}

/// Scores every named model on each view of `subjects` that has an image
/// and a true label.
pub fn score_models(
    subjects: &[SubjectData],
    models: &[(&str, &TinyModel)],
    exec: Exec,
) -> Result<Vec<ImageScore>> {
    let mut scores = Vec::new();
    for s in subjects {
        let Some(truth) = &s.truth else { continue };
        for (v, (view, img)) in s.bag.views.iter().zip(&s.images).enumerate() {
            let Some(img) = img else { continue };
            for (name, model) in models {
                let pred = predict(model, img, exec)?;
                scores.push(score_image(
                    &pred,
                    &truth[v],
                    &s.bag.subject_id,
                    &view.domain,
                    view.kind,
                    name,
                )?);
            }
        }
    }
    Ok(scores)
}

/// Runs grounding, adaptation and evaluation on `subjects` up to `until`,
/// writing artifacts under `out` when given.
pub fn run_on_subjects(
    cfg: &RunConfig,
    mut subjects: Vec<SubjectData>,
    out: Option<&Path>,
    until: Until,
    exec: Exec,
) -> Result<PipelineOutput> {
    cfg.check()?;
    let clock = std::time::Instant::now();
    let source = fit_source_model(cfg, exec)?;
    log::info!(
        "source model fitted after {:.1} s",
        clock.elapsed().as_secs_f64()
    );
    if cfg.pipeline.view_predictions == ViewPredictions::Model {
        apply_model(&mut subjects, &source, exec)?;
    }
    let grounded = ground_subjects(&subjects, cfg, exec)?;
    let mut exclusions = Vec::new();
    let mut kept = Vec::new();
    for (i, g) in grounded.iter().enumerate() {
        match &g.failure {
            None if g.is_success() => kept.push(i),
            other => exclusions.push(Exclusion {
                subject_id: g.subject_id.clone(),
                reason: other.clone().unwrap_or_else(|| "not integrated".into()),
            }),
        }
    }
    log::info!(
        "{} of {} subjects registered after {:.1} s",
        kept.len(),
        grounded.len(),
        clock.elapsed().as_secs_f64()
    );
    if let Some(out) = out {
        write_json(&out.join("exclusions.json"), &exclusions)?;
        for g in &grounded {
            save_grounded(&out.join("integration"), g)?;
        }
        source.save(&out.join("models").join("source"))?;
    }
    let minimum = if until == Until::Integration { 1 } else { 2 };
    if kept.len() < minimum {
        return Err(Error::Registration {
            stage: Stage::Estimate,
            reason: format!(
                "{} subject(s) registered; need at least {minimum}",
                kept.len()
            ),
        });
    }

    let (train_pos, held_pos) = split_indices(kept.len(), cfg.pipeline.train_fraction, cfg.seed);
    let train: Vec<usize> = train_pos.iter().map(|&p| kept[p]).collect();
    let held: Vec<usize> = held_pos.iter().map(|&p| kept[p]).collect();
    let ids = |idx: &[usize]| {
        idx.iter()
            .map(|&i| subjects[i].bag.subject_id.clone())
            .collect::<Vec<_>>()
    };
    let mut output = PipelineOutput {
        grounded: Vec::new(),
        exclusions,
        train_subjects: ids(&train),
        heldout_subjects: ids(&held),
        source,
        adapted: None,
        log: Vec::new(),
        scores: Vec::new(),
        report: None,
    };
    if let Some(out) = out {
        let split = serde_json::json!({ "train": output.train_subjects, "heldout": output.heldout_subjects });
        write_json(&out.join("split.json"), &split)?;
    }
    if until == Until::Integration {
        output.grounded = grounded;
        return Ok(output);
    }

    let dataset = adaptation_samples(&subjects, &grounded, &train);
    let heldout = heldout_samples(&subjects, &held);
    let mut state = AdaptationState::new(&output.source, &cfg.adaptation.train);
    output.log = run_adaptation(&dataset, &heldout, &mut state, &cfg.adaptation, exec).map_err(
        |e| match e {
            Error::Adaptation(_) => e,
            other => Error::Adaptation(other.to_string()),
        },
    )?;
    let adapted = state.student;
    log::info!(
        "adaptation finished after {:.1} s",
        clock.elapsed().as_secs_f64()
    );
    if let Some(out) = out {
        adapted.save(&out.join("models").join("adapted"))?;
        write_log_csv(&output.log, &out.join("train_log.csv"))?;
    }

    if until == Until::Evaluation {
        let mut scores = Vec::new();
        for &i in &held {
            let s = &subjects[i];
            let Some(truth) = &s.truth else { continue };
            let labels = &grounded[i]
                .integration
                .as_ref()
                .expect("kept subjects are integrated")
                .labels;
            for (v, (view, img)) in s.bag.views.iter().zip(&s.images).enumerate() {
                if img.is_some() {
                    let id = &s.bag.subject_id;
                    scores.push(score_image(
                        &labels[v].hard,
                        &truth[v],
                        id,
                        &view.domain,
                        view.kind,
                        "integrated",
                    )?);
                }
            }
        }
        let held_subjects: Vec<SubjectData> = held.iter().map(|&i| subjects[i].clone()).collect();
        scores.extend(score_models(
            &held_subjects,
            &[("source", &output.source), ("adapted", &adapted)],
            exec,
        )?);
        let report = aggregate(&scores, Some("source"));
        if let Some(out) = out {
            write_scores_csv(&scores, &out.join("scores.csv"))?;
            report.write_json(&out.join("report.json"))?;
        }
        output.scores = scores;
        output.report = Some(report);
    }
    output.adapted = Some(adapted);
    output.grounded = grounded;
    Ok(output)
}

/// Synthesized subjects, or those stored under `import`.
pub fn obtain_subjects(
    cfg: &RunConfig,
    import: Option<&Path>,
    exec: Exec,
) -> Result<Vec<SubjectData>> {
    match import {
        Some(dir) => load_subjects(dir),
        None => synthesize_subjects(cfg, exec),
    }
}

/// Full run: synthesize (or import from `import`) and process.
pub fn run_pipeline(
    cfg: &RunConfig,
    import: Option<&Path>,
    out: Option<&Path>,
    exec: Exec,
) -> Result<PipelineOutput> {
    cfg.check()?;
    let subjects = obtain_subjects(cfg, import, exec)?;
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        cfg.save(&out.join("config.json"))?;
    }
    run_on_subjects(cfg, subjects, out, Until::Evaluation, exec)
}

/// Teacher pseudo-labels for every view with an image.
pub fn pseudo_labels(
    subject: &SubjectData,
    teacher: &TinyModel,
    cfg: &RunConfig,
    exec: Exec,
) -> Result<Vec<Option<LabelMap>>> {
    subject
        .bag
        .views
        .iter()
        .zip(&subject.images)
        .map(|(v, img)| {
            img.as_ref()
                .map(|img| {
                    generate_pseudo_label(
                        &teacher.forward(img, exec)?,
                        v.kind,
                        &cfg.adaptation.thresholds,
                    )
                })
                .transpose()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let (a, b) = split_indices(30, 0.6, 1);
        assert_eq!((a.len(), b.len()), (18, 12));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(split_indices(30, 0.6, 1), (a, b));
        let (a, b) = split_indices(2, 0.6, 0);
        assert_eq!((a.len(), b.len()), (1, 1));
    }
}
