//! Orchestration of the end-to-end pipeline.
//!
//! Each stage function is one CLI subcommand's engine: it checks its
//! prerequisite artifacts (naming the subcommand that produces anything
//! missing), does the work, writes its outputs plus a run manifest, and
//! returns the results so tests can assert on them in-process.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attack::{
    attack_dataset, metrics_of_records, model_independent_eval, transfer_eval, AttackConfig,
    AttackMode, AttackRecord, MetricsReport, VictimAsr,
};
use crate::classifier::{train_classifier, Classifier, ClassifierConfig};
use crate::container;
use crate::data::{gen_synthetic_dataset, LabeledDataset};
use crate::defenses::DefenseSpec;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{DiffusionConfig, DiffusionTrainer};
use crate::error::PipelineError;
use crate::records::{
    rows_from_records, write_defense_summary, write_outcomes, DefenseRow, MetaMap,
};
use crate::report::Report;
use crate::rng::{derive_seed, rng_from};
use crate::runconfig::{ModelSpec, RunConfig};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::whitebox::{collect_pairs, WhiteboxConfig};

/// Artifact layout inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    out: PathBuf,
}

/// Filename fragment for an epsilon (254/255-grid budgets get a readable tag).
pub fn eps_slug(epsilon: f32) -> String {
    let scaled = epsilon * 255.0;
    let k = scaled.round();
    if (scaled - k).abs() < 1e-3 && k >= 1.0 {
        format!("{}of255", k as u32)
    } else {
        format!("{epsilon}").replace('.', "p")
    }
}

impl RunPaths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        RunPaths { out: out.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.out
    }

    pub fn dataset(&self, alt: bool) -> PathBuf {
        self.out
            .join(if alt { "dataset_alt.bin" } else { "dataset.bin" })
    }

    pub fn model(&self, id: &str) -> PathBuf {
        self.out.join(format!("model_{id}.ckpt"))
    }

    pub fn pairs(&self) -> PathBuf {
        self.out.join("pairs.bin")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.out.join("denoiser.ckpt")
    }

    pub fn train_log(&self) -> PathBuf {
        self.out.join("train_log.csv")
    }

    pub fn attack_csv(&self, victim: &str, mode: &str, epsilon: f32) -> PathBuf {
        self.out
            .join(format!("attack_{victim}_{mode}_{}.csv", eps_slug(epsilon)))
    }

    pub fn attack_aes(&self, victim: &str, mode: &str, epsilon: f32) -> PathBuf {
        self.out
            .join(format!("attack_{victim}_{mode}_{}_aes.bin", eps_slug(epsilon)))
    }

    pub fn ablation_csv(&self, victim: &str, kind: ScheduleKind, steps: usize, epsilon: f32) -> PathBuf {
        self.out.join(format!(
            "ablation_{victim}_{kind}_s{steps}_{}.csv",
            eps_slug(epsilon)
        ))
    }

    pub fn ablation_aes(&self, victim: &str, kind: ScheduleKind, steps: usize, epsilon: f32) -> PathBuf {
        self.out.join(format!(
            "ablation_{victim}_{kind}_s{steps}_{}_aes.bin",
            eps_slug(epsilon)
        ))
    }

    pub fn modelindep_csv(&self, victim: &str) -> PathBuf {
        self.out.join(format!("modelindep_{victim}.csv"))
    }

    pub fn dataindep_csv(&self, victim: &str, epsilon: f32) -> PathBuf {
        self.out
            .join(format!("dataindep_{victim}_{}.csv", eps_slug(epsilon)))
    }

    pub fn dataindep_aes(&self, victim: &str, epsilon: f32) -> PathBuf {
        self.out
            .join(format!("dataindep_{victim}_{}_aes.bin", eps_slug(epsilon)))
    }

    pub fn defenses_csv(&self, victim: &str) -> PathBuf {
        self.out.join(format!("defenses_{victim}.csv"))
    }

    pub fn transfer_csv(&self, from: &str) -> PathBuf {
        self.out.join(format!("transfer_{from}.csv"))
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.out.join(format!("manifest_{command}.json"))
    }

    pub fn report_txt(&self) -> PathBuf {
        self.out.join("report.txt")
    }
}

fn require(path: &Path, produced_by: &str) -> Result<(), PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            artifact: path.display().to_string(),
            produced_by: produced_by.to_string(),
        });
    }
    Ok(())
}

fn write_manifest(
    paths: &RunPaths,
    command: &str,
    cfg: &RunConfig,
    artifacts: &[&Path],
    started: Instant,
) -> Result<(), PipelineError> {
    let manifest = serde_json::json!({
        "command": command,
        "config_hash": cfg.config_hash(),
        "seeds": cfg.seeds,
        "wall_ms": started.elapsed().as_millis() as u64,
        "artifacts": artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "config": cfg,
    });
    std::fs::create_dir_all(paths.dir())?;
    std::fs::write(
        paths.manifest(command),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

/// Generate-or-load one of the two datasets.
pub fn ensure_dataset(cfg: &RunConfig, paths: &RunPaths, alt: bool) -> Result<LabeledDataset, PipelineError> {
    let path = paths.dataset(alt);
    if path.exists() {
        return Ok(container::load_dataset(&path)?);
    }
    let spec = if alt { &cfg.dataset_alt } else { &cfg.dataset };
    let seed = if alt {
        derive_seed(cfg.seeds.data, 1)
    } else {
        cfg.seeds.data
    };
    let data = gen_synthetic_dataset(spec.kind, spec.n, spec.classes, spec.channels, spec.size, seed)?;
    container::save_dataset(&path, &data)?;
    Ok(data)
}

fn classifier_config(cfg: &RunConfig, spec: &ModelSpec) -> ClassifierConfig {
    ClassifierConfig {
        arch: spec.arch,
        channels: cfg.dataset.channels,
        size: cfg.dataset.size,
        classes: cfg.dataset.classes,
    }
}

fn model_seed(cfg: &RunConfig, id: &str) -> u64 {
    // Stable per-id seed so shadow and victims always differ.
    let mut h: u64 = 0;
    for b in id.as_bytes() {
        h = h.wrapping_mul(31).wrapping_add(*b as u64);
    }
    derive_seed(cfg.seeds.models, h)
}

/// Train one model (shadow or victim) on the given dataset and save its
/// checkpoint. Returns the held-out accuracy.
fn train_and_save(
    cfg: &RunConfig,
    paths: &RunPaths,
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    id: &str,
) -> Result<f64, PipelineError> {
    let (model, acc) = train_classifier(
        dataset,
        classifier_config(cfg, spec),
        spec.epochs,
        model_seed(cfg, id),
    )?;
    container::save_classifier(&paths.model(id), &model)?;
    Ok(acc)
}

/// `train-victim`: train the shadow and/or victim models on the primary
/// dataset. `which = None` trains everything.
pub fn cmd_train_victim(
    cfg: &RunConfig,
    paths: &RunPaths,
    which: Option<&str>,
) -> Result<Vec<(String, f64)>, PipelineError> {
    let started = Instant::now();
    let dataset = ensure_dataset(cfg, paths, false)?;
    let mut results = Vec::new();
    let mut wanted: Vec<&ModelSpec> = Vec::new();
    match which {
        None => {
            wanted.push(&cfg.shadow);
            wanted.extend(cfg.victims.iter());
        }
        Some(id) => {
            let spec = std::iter::once(&cfg.shadow)
                .chain(cfg.victims.iter())
                .find(|s| s.id == id)
                .ok_or_else(|| {
                    PipelineError::Config(crate::error::ConfigError::Invalid(format!(
                        "unknown model id `{id}`"
                    )))
                })?;
            wanted.push(spec);
        }
    }
    for spec in wanted {
        let acc = train_and_save(cfg, paths, spec, &dataset, &spec.id)?;
        results.push((spec.id.clone(), acc));
    }
    let artifacts: Vec<PathBuf> = results.iter().map(|(id, _)| paths.model(id)).collect();
    let refs: Vec<&Path> = artifacts.iter().map(PathBuf::as_path).collect();
    write_manifest(paths, "train-victim", cfg, &refs, started)?;
    Ok(results)
}

/// `collect-pairs`: white-box PGD against the shadow model over the training
/// split, keeping only successful pairs.
pub fn cmd_collect_pairs(cfg: &RunConfig, paths: &RunPaths) -> Result<usize, PipelineError> {
    let started = Instant::now();
    let shadow_path = paths.model(&cfg.shadow.id);
    require(&shadow_path, "train-victim")?;
    let dataset = ensure_dataset(cfg, paths, false)?;
    let shadow = container::load_classifier(&shadow_path)?;
    let (train_idx, _) = dataset.split_indices(0.8);
    let wb = WhiteboxConfig {
        epsilon: cfg.pairs.epsilon.0,
        step_size: cfg.pairs.step_size.0,
        iterations: cfg.pairs.iterations,
        target_class: cfg.pairs.target_class,
        random_start: cfg.pairs.random_start,
    };
    let pairs = collect_pairs(&shadow, &cfg.shadow.id, &dataset, &train_idx, &wb, cfg.seeds.pairs)?;
    container::save_pairs(&paths.pairs(), &pairs)?;
    write_manifest(paths, "collect-pairs", cfg, &[&paths.pairs()], started)?;
    Ok(pairs.len())
}

/// Training loss trace: `(step, running loss)` rows written to the train log.
pub type LossTrace = Vec<(u64, f32)>;

/// `train-cdma`: fit the conditional denoiser on the collected pairs.
pub fn cmd_train_denoiser(cfg: &RunConfig, paths: &RunPaths) -> Result<LossTrace, PipelineError> {
    let started = Instant::now();
    require(&paths.pairs(), "collect-pairs")?;
    let pairs = container::load_pairs(&paths.pairs())?;
    let schedule = NoiseSchedule::build(
        cfg.schedule.kind,
        cfg.schedule.timesteps,
        cfg.schedule.beta_start as f32,
        cfg.schedule.beta_end as f32,
    )?;
    let den_cfg = DenoiserConfig {
        channels: cfg.dataset.channels,
        size: cfg.dataset.size,
        base_width: cfg.train.base_width,
        depth: cfg.train.depth,
        time_dim: cfg.train.time_dim,
    };
    let mut denoiser = Denoiser::build(den_cfg, cfg.seeds.diffusion)?;
    let mut trainer = DiffusionTrainer::new(
        schedule,
        &denoiser,
        crate::autodiff::AdamHyper::with_lr(cfg.train.learning_rate as f32),
    );
    let mut rng = rng_from(derive_seed(cfg.seeds.diffusion, 1));
    let mut trace = LossTrace::new();
    let mut running = 0.0f32;
    let mut count = 0u32;
    for step in 0..cfg.train.steps as u64 {
        let batch: Vec<(&crate::tensor::Tensor, &crate::tensor::Tensor)> = (0..cfg.train.batch_size)
            .map(|_| {
                let i = rand::Rng::gen_range(&mut rng, 0..pairs.len());
                (&pairs.clean[i], &pairs.adversarial[i])
            })
            .collect();
        let loss = trainer.train_step(&mut denoiser, &batch, &mut rng)?;
        running += loss;
        count += 1;
        if (step + 1) % 50 == 0 || step + 1 == cfg.train.steps as u64 {
            trace.push((step + 1, running / count as f32));
            running = 0.0;
            count = 0;
        }
    }
    container::save_denoiser(&paths.denoiser(), &denoiser)?;
    let mut log = format!(
        "# config_hash={}\n# seed={}\nstep,avg_loss\n",
        cfg.config_hash(),
        cfg.seeds.diffusion
    );
    for (step, loss) in &trace {
        log.push_str(&format!("{step},{loss}\n"));
    }
    std::fs::write(paths.train_log(), log)?;
    write_manifest(
        paths,
        "train-cdma",
        cfg,
        &[&paths.denoiser(), &paths.train_log()],
        started,
    )?;
    Ok(trace)
}

/// Build the sampling config for attacks (sampling-time schedule may differ
/// from the training schedule).
pub fn sampling_config(cfg: &RunConfig) -> Result<DiffusionConfig, PipelineError> {
    let kind = cfg.sampling.schedule.unwrap_or(cfg.schedule.kind);
    let schedule = NoiseSchedule::build(
        kind,
        cfg.schedule.timesteps,
        cfg.schedule.beta_start as f32,
        cfg.schedule.beta_end as f32,
    )?;
    Ok(DiffusionConfig::new(schedule, cfg.sampling.steps)?)
}

fn attack_mode(cfg: &RunConfig) -> AttackMode {
    match (cfg.attack.mode.as_str(), cfg.attack.target_class) {
        ("targeted", Some(t)) => AttackMode::Targeted(t),
        _ => AttackMode::Untargeted,
    }
}

/// Inputs attacked by every protocol: a prefix of the holdout split.
pub fn attack_indices(cfg: &RunConfig, dataset: &LabeledDataset) -> Vec<usize> {
    let (_, holdout) = dataset.split_indices(0.8);
    holdout
        .into_iter()
        .take(cfg.attack.inputs)
        .collect()
}

fn base_meta(cfg: &RunConfig, victim: &str, epsilon: f32) -> MetaMap {
    let mut meta = MetaMap::new();
    meta.insert("config_hash".into(), cfg.config_hash());
    meta.insert("seed".into(), cfg.seeds.attack.to_string());
    meta.insert("victim".into(), victim.to_string());
    meta.insert("mode".into(), cfg.attack.mode.clone());
    meta.insert("epsilon".into(), format!("{epsilon}"));
    meta.insert("q_max".into(), cfg.attack.q_max.to_string());
    meta.insert(
        "schedule".into(),
        cfg.sampling.schedule.unwrap_or(cfg.schedule.kind).to_string(),
    );
    meta.insert("steps".into(), cfg.sampling.steps.to_string());
    meta
}

/// Outcome of one attack run, with everything needed for verification.
#[derive(Debug)]
pub struct AttackRunResult {
    pub records: Vec<AttackRecord>,
    pub metrics: MetricsReport,
    pub csv_path: PathBuf,
    pub aes_path: PathBuf,
}

/// Run the black-box attack against one victim and write its artifacts.
///
/// `run_label` routes the rows to the right report section; `alt_dataset`
/// switches to the second dataset (the data-independent protocol).
pub fn run_attack(
    cfg: &RunConfig,
    paths: &RunPaths,
    victim_id: &str,
    run_label: &str,
    alt_dataset: bool,
    csv_path: PathBuf,
    aes_path: PathBuf,
) -> Result<AttackRunResult, PipelineError> {
    require(&paths.denoiser(), "train-cdma")?;
    let victim_path = paths.model(victim_id);
    require(&victim_path, "train-victim")?;
    let dataset = ensure_dataset(cfg, paths, alt_dataset)?;
    let denoiser = container::load_denoiser(&paths.denoiser())?;
    let victim = container::load_classifier(&victim_path)?;
    let diffusion = sampling_config(cfg)?;
    let indices = attack_indices(cfg, &dataset);
    let attack_cfg = AttackConfig {
        epsilon: cfg.attack.epsilon.0,
        q_max: cfg.attack.q_max,
        mode: attack_mode(cfg),
        seed: cfg.seeds.attack,
    };
    let records = attack_dataset(&denoiser, &diffusion, &victim, &dataset, &indices, &attack_cfg)?;
    let metrics = metrics_of_records(&records)?;

    let mut meta = base_meta(cfg, victim_id, attack_cfg.epsilon);
    meta.insert("run".into(), run_label.to_string());
    meta.insert("dataset".into(), dataset.meta.kind.clone());
    let rows = rows_from_records(&records, cfg.attack.mode.as_str(), attack_cfg.epsilon);
    write_outcomes(&csv_path, &meta, &rows)?;
    container::save_ae_bundle(
        &aes_path,
        &records,
        serde_json::json!({
            "config_hash": cfg.config_hash(),
            "victim": victim_id,
            "epsilon": attack_cfg.epsilon,
            "dataset": dataset.meta.kind,
        }),
    )?;
    Ok(AttackRunResult {
        records,
        metrics,
        csv_path,
        aes_path,
    })
}

/// `attack`: the standard protocol against one victim on the primary dataset.
pub fn cmd_attack(
    cfg: &RunConfig,
    paths: &RunPaths,
    victim_id: &str,
) -> Result<AttackRunResult, PipelineError> {
    let started = Instant::now();
    let eps = cfg.attack.epsilon.0;
    let csv = paths.attack_csv(victim_id, &cfg.attack.mode, eps);
    let aes = paths.attack_aes(victim_id, &cfg.attack.mode, eps);
    let result = run_attack(cfg, paths, victim_id, "attack", false, csv, aes)?;
    write_manifest(
        paths,
        "attack",
        cfg,
        &[&result.csv_path, &result.aes_path],
        started,
    )?;
    Ok(result)
}

/// Load the stored AEs of an attack run together with their true labels.
fn load_attack_aes(
    paths: &RunPaths,
    victim_id: &str,
    cfg: &RunConfig,
    epsilon: f32,
) -> Result<Vec<(usize, crate::tensor::Tensor, usize)>, PipelineError> {
    let aes_path = paths.attack_aes(victim_id, &cfg.attack.mode, epsilon);
    require(&aes_path, "attack")?;
    let dataset = ensure_dataset(cfg, paths, false)?;
    let bundle = container::load_ae_bundle(&aes_path)?;
    bundle
        .into_iter()
        .map(|(id, ae)| {
            if id >= dataset.len() {
                return Err(PipelineError::Container(
                    crate::error::ContainerError::Invariant(format!(
                        "AE id {id} out of dataset range"
                    )),
                ));
            }
            Ok((id, ae, dataset.labels[id]))
        })
        .collect()
}

/// `eval-defenses`: robust ASR of the stored AEs and clean accuracy of the
/// victim under every configured defense (plus the undefended baseline).
pub fn cmd_eval_defenses(
    cfg: &RunConfig,
    paths: &RunPaths,
    victim_id: &str,
) -> Result<Vec<DefenseRow>, PipelineError> {
    let started = Instant::now();
    let victim_path = paths.model(victim_id);
    require(&victim_path, "train-victim")?;
    let victim = container::load_classifier(&victim_path)?;
    let dataset = ensure_dataset(cfg, paths, false)?;
    let aes = load_attack_aes(paths, victim_id, cfg, cfg.attack.epsilon.0)?;
    let eval_idx = attack_indices(cfg, &dataset);

    let mut rows = Vec::new();
    let mut variants: Vec<(String, Option<DefenseSpec>)> = vec![("none".into(), None)];
    for d in &cfg.defenses {
        variants.push((d.id(), Some(d.clone())));
    }
    for (id, defense) in variants {
        let classify = |img: &crate::tensor::Tensor| -> Result<usize, PipelineError> {
            let transformed = match &defense {
                None => img.clone(),
                Some(d) => d.apply(img)?,
            };
            Ok(victim.label(&transformed)?)
        };
        let mut correct = 0usize;
        for &i in &eval_idx {
            correct += usize::from(classify(&dataset.images[i])? == dataset.labels[i]);
        }
        let clean_accuracy = correct as f64 / eval_idx.len() as f64;
        let mut still_adversarial = 0usize;
        for (_, ae, label) in &aes {
            still_adversarial += usize::from(classify(ae)? != *label);
        }
        let robust_asr = if aes.is_empty() {
            0.0
        } else {
            still_adversarial as f64 / aes.len() as f64 * 100.0
        };
        rows.push(DefenseRow {
            defense: id,
            clean_accuracy,
            robust_asr,
            kept_aes: aes.len(),
        });
    }

    let mut meta = MetaMap::new();
    meta.insert("config_hash".into(), cfg.config_hash());
    meta.insert("seed".into(), cfg.seeds.attack.to_string());
    meta.insert("victim".into(), victim_id.to_string());
    meta.insert("epsilon".into(), format!("{}", cfg.attack.epsilon.0));
    meta.insert(
        "defense_defaults".into(),
        "bits=3 window=3 quality=75 deflect=100@10".into(),
    );
    write_defense_summary(&paths.defenses_csv(victim_id), &meta, &rows)?;
    write_manifest(
        paths,
        "eval-defenses",
        cfg,
        &[&paths.defenses_csv(victim_id)],
        started,
    )?;
    Ok(rows)
}

/// `transfer`: evaluate one victim's stored AEs against every other victim,
/// one query each.
pub fn cmd_transfer(
    cfg: &RunConfig,
    paths: &RunPaths,
    from_id: &str,
) -> Result<Vec<(String, f64, usize, usize)>, PipelineError> {
    let started = Instant::now();
    let aes = load_attack_aes(paths, from_id, cfg, cfg.attack.epsilon.0)?;
    let records: Vec<AttackRecord> = aes
        .iter()
        .map(|(id, ae, label)| AttackRecord {
            input_id: *id,
            true_label: *label,
            outcome: crate::attack::AttackOutcome {
                success: true,
                queries_used: 1,
                adversarial: Some(ae.clone()),
                victim_label: None,
            },
        })
        .collect();
    let mut results = Vec::new();
    for spec in std::iter::once(&cfg.shadow).chain(cfg.victims.iter()) {
        if spec.id == from_id {
            continue;
        }
        let path = paths.model(&spec.id);
        require(&path, "train-victim")?;
        let target = container::load_classifier(&path)?;
        let (asr, fooled, total) = transfer_eval(&records, &target)?;
        results.push((spec.id.clone(), asr, fooled, total));
    }
    let mut text = format!(
        "# config_hash={}\n# seed={}\ntarget,transfer_asr,fooled,total\n",
        cfg.config_hash(),
        cfg.seeds.attack
    );
    for (id, asr, fooled, total) in &results {
        text.push_str(&format!("{id},{asr:.4},{fooled},{total}\n"));
    }
    std::fs::write(paths.transfer_csv(from_id), text)?;
    write_manifest(
        paths,
        "transfer",
        cfg,
        &[&paths.transfer_csv(from_id)],
        started,
    )?;
    Ok(results)
}

/// Results of the `model-independent` subcommand, which runs both protocols
/// over the second dataset.
#[derive(Debug)]
pub struct IndependentResult {
    /// One-sample-per-input ASR per victim (no per-victim feedback).
    pub model_independent: Vec<VictimAsr>,
    /// Full-budget attack on the unseen dataset, per victim.
    pub data_independent: Vec<(String, MetricsReport)>,
}

/// `model-independent`: sample one AE per input of the unseen dataset and
/// check it against every alt-trained victim; then run the full-budget attack
/// on that dataset per victim (the data-independent protocol).
pub fn cmd_model_independent(
    cfg: &RunConfig,
    paths: &RunPaths,
) -> Result<IndependentResult, PipelineError> {
    let started = Instant::now();
    require(&paths.denoiser(), "train-cdma")?;
    let dataset = ensure_dataset(cfg, paths, true)?;
    let denoiser = container::load_denoiser(&paths.denoiser())?;
    let diffusion = sampling_config(cfg)?;
    let indices = attack_indices(cfg, &dataset);

    // Victims for the unseen dataset are trained on it (fresh models with the
    // same architecture specs, ids suffixed `-alt`).
    let mut alt_victims: Vec<(String, Classifier)> = Vec::new();
    for spec in &cfg.victims {
        let id = format!("{}-alt", spec.id);
        let path = paths.model(&id);
        if !path.exists() {
            train_and_save(cfg, paths, spec, &dataset, &id)?;
        }
        alt_victims.push((id.clone(), container::load_classifier(&path)?));
    }

    let victim_refs: Vec<(String, &Classifier)> = alt_victims
        .iter()
        .map(|(id, m)| (id.clone(), m))
        .collect();
    let model_independent = model_independent_eval(
        &denoiser,
        &diffusion,
        &victim_refs,
        &dataset,
        &indices,
        cfg.attack.epsilon.0,
        derive_seed(cfg.seeds.attack, 0xA17),
    )?;

    // Write one single-query outcomes file per victim.
    let mut artifacts: Vec<PathBuf> = Vec::new();
    for v in &model_independent {
        let mut meta = base_meta(cfg, &v.victim_id, cfg.attack.epsilon.0);
        meta.insert("run".into(), "model-independent".into());
        meta.insert("dataset".into(), dataset.meta.kind.clone());
        meta.insert("q_max".into(), "1".into());
        let rows: Vec<crate::records::OutcomeRow> = v
            .per_input
            .iter()
            .map(|&(idx, label, fooled)| crate::records::OutcomeRow {
                input_id: idx,
                mode: cfg.attack.mode.clone(),
                epsilon: cfg.attack.epsilon.0,
                success: fooled,
                queries: 1,
                victim_label: Some(label),
            })
            .collect();
        let path = paths.modelindep_csv(&v.victim_id);
        write_outcomes(&path, &meta, &rows)?;
        artifacts.push(path);
    }

    // Data-independent: the full attack loop on the unseen dataset.
    let mut data_independent = Vec::new();
    for (id, victim) in &alt_victims {
        let attack_cfg = AttackConfig {
            epsilon: cfg.attack.epsilon.0,
            q_max: cfg.attack.q_max,
            mode: attack_mode(cfg),
            seed: derive_seed(cfg.seeds.attack, 0xD17),
        };
        let records = attack_dataset(&denoiser, &diffusion, victim, &dataset, &indices, &attack_cfg)?;
        let metrics = metrics_of_records(&records)?;
        let mut meta = base_meta(cfg, id, attack_cfg.epsilon);
        meta.insert("run".into(), "data-independent".into());
        meta.insert("dataset".into(), dataset.meta.kind.clone());
        meta.insert("seed".into(), attack_cfg.seed.to_string());
        let rows = rows_from_records(&records, cfg.attack.mode.as_str(), attack_cfg.epsilon);
        let csv = paths.dataindep_csv(id, attack_cfg.epsilon);
        write_outcomes(&csv, &meta, &rows)?;
        container::save_ae_bundle(
            &paths.dataindep_aes(id, attack_cfg.epsilon),
            &records,
            serde_json::json!({
                "config_hash": cfg.config_hash(),
                "victim": id,
                "epsilon": attack_cfg.epsilon,
                "dataset": dataset.meta.kind,
            }),
        )?;
        artifacts.push(csv);
        data_independent.push((id.clone(), metrics));
    }

    let refs: Vec<&Path> = artifacts.iter().map(PathBuf::as_path).collect();
    write_manifest(paths, "model-independent", cfg, &refs, started)?;
    Ok(IndependentResult {
        model_independent,
        data_independent,
    })
}

/// `report`: aggregate every outcome file in the run directory.
pub fn cmd_report(cfg: &RunConfig, paths: &RunPaths) -> Result<String, PipelineError> {
    let started = Instant::now();
    let mut report = Report::new();
    report.push_header(format!("config_hash: {}", cfg.config_hash()));
    report.push_header(format!(
        "seeds: data={} models={} pairs={} diffusion={} attack={}",
        cfg.seeds.data, cfg.seeds.models, cfg.seeds.pairs, cfg.seeds.diffusion, cfg.seeds.attack
    ));
    report.push_header(
        "defense defaults: bits=3 window=3 quality=75 deflect=100@10 (analog protocol; values reported, not asserted)"
            .to_string(),
    );

    let mut saw_outcomes = false;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(paths.dir())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in &entries {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if !name.ends_with(".csv") {
            continue;
        }
        if name.starts_with("attack_")
            || name.starts_with("ablation_")
            || name.starts_with("modelindep_")
            || name.starts_with("dataindep_")
        {
            let file = crate::records::read_outcomes(path)?;
            report.add_outcomes(file)?;
            saw_outcomes = true;
        } else if name.starts_with("transfer_") {
            let text = std::fs::read_to_string(path)?;
            let from = name.trim_start_matches("transfer_").trim_end_matches(".csv");
            for line in text.lines() {
                if line.starts_with('#') || line.starts_with("target,") || line.is_empty() {
                    continue;
                }
                let f: Vec<&str> = line.split(',').collect();
                if f.len() == 4 {
                    report.add_transfer_line(format!(
                        "{from} -> {}: {}% ({}/{})",
                        f[0], f[1], f[2], f[3]
                    ));
                }
            }
        } else if name.starts_with("defenses_") {
            let text = std::fs::read_to_string(path)?;
            let victim = name.trim_start_matches("defenses_").trim_end_matches(".csv");
            let mut rows = Vec::new();
            for line in text.lines() {
                if line.starts_with('#') || line.starts_with("defense,") || line.is_empty() {
                    continue;
                }
                let f: Vec<&str> = line.split(',').collect();
                if f.len() == 4 {
                    rows.push(DefenseRow {
                        defense: f[0].to_string(),
                        clean_accuracy: f[1].parse().unwrap_or(f64::NAN),
                        robust_asr: f[2].parse().unwrap_or(f64::NAN),
                        kept_aes: f[3].parse().unwrap_or(0),
                    });
                }
            }
            report.add_defense_rows(victim, rows);
        }
    }
    if !saw_outcomes && report.is_empty() {
        return Err(PipelineError::Report(crate::error::ReportError::Empty));
    }
    let text = report.render().map_err(PipelineError::Report)?;
    std::fs::write(paths.report_txt(), &text)?;
    write_manifest(paths, "report", cfg, &[&paths.report_txt()], started)?;
    Ok(text)
}

/// Sweep every outcomes CSV in a run directory and re-verify the budget and
/// range invariants of each referenced AE against its clean input.
pub fn verify_all_emitted_aes(paths: &RunPaths) -> Result<usize, PipelineError> {
    let mut checked = 0usize;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(paths.dir())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in &entries {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if !name.ends_with("_aes.bin") {
            continue;
        }
        let container = container::Container::load(path)?;
        container.expect_role("ae-bundle")?;
        let alt = name.starts_with("dataindep_");
        let dataset = container::load_dataset(&paths.dataset(alt))?;
        let epsilon = container
            .config
            .get("epsilon")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| {
                PipelineError::Container(crate::error::ContainerError::BadHeader(
                    "AE bundle missing epsilon".into(),
                ))
            })? as f32;
        for (name, ae) in &container.tensors {
            let id: usize = name
                .strip_prefix("ae/")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    PipelineError::Container(crate::error::ContainerError::BadHeader(format!(
                        "bad AE key `{name}`"
                    )))
                })?;
            let clean = &dataset.images[id];
            let dist = clean.linf_dist(ae);
            if dist > epsilon + 1e-6 {
                return Err(PipelineError::Container(
                    crate::error::ContainerError::Invariant(format!(
                        "{}: AE {id} at L-inf {dist} > {epsilon}",
                        path.display()
                    )),
                ));
            }
            if !ae.in_unit_range() {
                return Err(PipelineError::Container(
                    crate::error::ContainerError::Invariant(format!(
                        "{}: AE {id} outside [0,1]",
                        path.display()
                    )),
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}
