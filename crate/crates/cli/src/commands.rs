use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use vbackend::backends::{
    adapt_plda, adaptive_snorm, cal_norm, cohort_scores, fit_plda_em, interpolate_plda, score_trials, CosineScorer,
    PairScorer,
};
use vbackend::fusion::{
    apply_offset, contribution_report, format_contributions, format_jackknife, fuse_scores, jackknife, train_fusion,
    FusionConfig, FusionData, FusionModel,
};
use vbackend::io;
use vbackend::metrics::{det_points, equalized, summarize, Summary};
use vbackend::pipeline::{apply_transform, fit_pipeline, length_normalize_set, stack_embeddings, PipelineConfig};
use vbackend::psvm::{init_psvm_from_plda, mine_pairs, refine_psvm, MiningConfig, PairData, RefineConfig, SpeakerSimilarity};
use vbackend::synth::{make_corpus, make_trials, oracle_scores, random_shift, CorpusSpec};
use vbackend::{
    align_trials, trial_durations, DurationInfo, EmbeddingSet, EnrollmentManifest, ScoreMatrix, ScoreSet, Trial,
    TrialKey, PRIMARY_OPERATING_POINTS,
};

use crate::*;

pub enum Failure {
    Usage(String),
    Data(vbackend::Error),
}

impl From<vbackend::Error> for Failure {
    fn from(e: vbackend::Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn read_embeddings(path: &Path) -> vbackend::Result<EmbeddingSet> {
    io::read_embeddings(&io::read_bytes(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: vbackend::Error, path: &Path) -> vbackend::Error {
    match e {
        vbackend::Error::Binary(m) => vbackend::Error::Binary(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn read_model<T>(path: &Path, parse: impl FnOnce(&[u8]) -> vbackend::Result<T>) -> vbackend::Result<T> {
    parse(&io::read_bytes(path)?).map_err(|e| with_path(e, path))
}

fn read_scores(path: &Path) -> vbackend::Result<ScoreSet> {
    io::parse_file(path, io::read_scores)
}

fn read_key(path: &Path) -> vbackend::Result<TrialKey> {
    io::parse_file(path, io::parse_key)
}

fn read_manifest(path: Option<&PathBuf>) -> vbackend::Result<EnrollmentManifest> {
    match path {
        Some(p) => io::parse_file(p, io::parse_manifest),
        None => Ok(EnrollmentManifest::default()),
    }
}

fn trials_from(source: &TrialSource) -> vbackend::Result<Vec<Trial>> {
    match (&source.trials, &source.key) {
        (Some(p), _) => io::parse_file(p, io::parse_trial_list),
        (_, Some(p)) => Ok(read_key(p)?.trials().to_vec()),
        _ => unreachable!("clap requires one trial source"),
    }
}

fn system_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

/// Score files aligned to `trials`, one row per file.
fn load_matrix(paths: &[PathBuf], trials: &[Trial]) -> vbackend::Result<ScoreMatrix> {
    let sets = paths.iter().map(|p| read_scores(p)).collect::<vbackend::Result<Vec<_>>>()?;
    let names: Vec<String> = paths.iter().map(|p| system_name(p)).collect();
    let systems: Vec<(&str, &ScoreSet)> = names.iter().map(String::as_str).zip(&sets).collect();
    align_trials(&systems, trials)
}

fn load_durations(
    durations: Option<&PathBuf>,
    manifest: Option<&PathBuf>,
    trials: &[Trial],
) -> vbackend::Result<Option<Vec<DurationInfo>>> {
    let Some(path) = durations else {
        return Ok(None);
    };
    let table = io::parse_file(path, io::parse_durations)?;
    Ok(Some(trial_durations(trials, &table, &read_manifest(manifest)?)?))
}

pub fn run(cmd: Cmd, seed: u64) -> Outcome {
    match cmd {
        Cmd::Synth(a) => synth(a, seed),
        Cmd::TransformFit(a) => transform_fit(a),
        Cmd::TransformApply(a) => transform_apply(a),
        Cmd::Stack(a) => stack(a),
        Cmd::PldaTrain(a) => plda_train(a),
        Cmd::PldaInterp(a) => plda_interp(a),
        Cmd::Score(a) => score(a),
        Cmd::Snorm(a) => snorm(a),
        Cmd::PsvmInit(a) => psvm_init(a),
        Cmd::PsvmTrain(a) => psvm_train(a, seed),
        Cmd::Calibrate(a) => {
            if a.scores.len() != 1 {
                return usage("calibrate takes exactly one --scores file; use fuse for several");
            }
            fuse(a)
        }
        Cmd::Fuse(a) => fuse(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Contributions(a) => contributions(a),
        Cmd::Jackknife(a) => jackknife_cmd(a),
    }
}

fn synth(a: SynthArgs, seed: u64) -> Outcome {
    if !(a.duration_median > 0.0) {
        return usage("--duration-median must be positive");
    }
    let shift = (a.shift_scale > 0.0).then(|| random_shift(a.dim, a.shift_scale, seed));
    let spec = CorpusSpec {
        n_speakers: a.speakers,
        utts_per_speaker: a.utts,
        dim: a.dim,
        between_scale: a.between,
        within_scale: a.within,
        domain_shift: shift,
        shifted_fraction: a.shifted_fraction,
        duration_log_mean: a.duration_median.ln(),
        duration_log_sd: a.duration_log_sd,
        probe_duration_bias: a.probe_bias,
        reference_duration_bias: a.reference_bias,
        seed,
    };
    let set = make_corpus(&spec)?;
    io::write_file(&a.out, io::write_embeddings(&set)?)?;
    if let Some(p) = &a.durations {
        io::write_file(p, io::write_durations(set.durations().expect("synthetic sets carry durations")))?;
    }
    if let Some(p) = &a.domains {
        let domains = set.domains().expect("synthetic sets carry domains");
        let mut text = String::new();
        for r in set.records() {
            let _ = writeln!(text, "{}\t{}", r.segment_id, domains[&r.segment_id]);
        }
        io::write_file(p, text)?;
    }
    if a.key.is_some() || a.trials.is_some() || a.oracle_scores.is_some() {
        let key = make_trials(&set, a.targets, a.nontargets, seed.wrapping_add(1))?;
        if let Some(p) = &a.key {
            io::write_file(p, io::write_key(&key))?;
        }
        if let Some(p) = &a.trials {
            io::write_file(p, io::write_trial_list(key.trials()))?;
        }
        if let Some(p) = &a.oracle_scores {
            io::write_file(p, io::write_scores(&oracle_scores(&spec, &set, key.trials())?))?;
        }
    }
    Ok(())
}

fn transform_fit(a: TransformFitArgs) -> Outcome {
    if a.coral.is_some() && a.in_domain.is_none() {
        return usage("--coral needs --in-domain");
    }
    let train = read_embeddings(&a.train)?;
    let in_domain = a.in_domain.as_deref().map(read_embeddings).transpose()?;
    let cfg = PipelineConfig {
        center: a.center,
        coral_weight: a.coral,
        whiten_ridge: a.whiten,
        lda_dim: a.lda,
        length_normalize: false,
    };
    let fit = fit_pipeline(&train, in_domain.as_ref(), &cfg)?;
    warn(&fit.warnings);
    io::write_file(&a.out, io::write_transform(&fit.value.transform)?)?;
    Ok(())
}

fn transform_apply(a: TransformApplyArgs) -> Outcome {
    let set = read_embeddings(&a.input)?;
    let t = read_model(&a.transform, io::read_transform)?;
    let mut out = apply_transform(&t, &set)?;
    if a.length_norm {
        out = length_normalize_set(&out)?;
    }
    io::write_file(&a.out, io::write_embeddings(&out)?)?;
    Ok(())
}

fn stack(a: StackArgs) -> Outcome {
    let sets = a.input.iter().map(|p| read_embeddings(p)).collect::<vbackend::Result<Vec<_>>>()?;
    let out = stack_embeddings(&sets.iter().collect::<Vec<_>>())?;
    io::write_file(&a.out, io::write_embeddings(&out)?)?;
    Ok(())
}

fn print_log_likelihoods(lls: &[f64]) {
    println!("iteration\tlog_likelihood");
    for (i, ll) in lls.iter().enumerate() {
        println!("{i}\t{ll:.6}");
    }
}

fn plda_train(a: PldaTrainArgs) -> Outcome {
    let train = read_embeddings(&a.train)?;
    let fit = fit_plda_em(&train, a.iterations)?;
    warn(&fit.warnings);
    print_log_likelihoods(&fit.log_likelihoods);
    let model = match &a.adapt {
        Some(p) => {
            let adapted = adapt_plda(&fit.model, &read_embeddings(p)?, a.iterations, a.within_weight, a.between_weight)?;
            warn(&adapted.warnings);
            adapted.model
        }
        None => fit.model,
    };
    io::write_file(&a.out, io::write_plda(&model)?)?;
    Ok(())
}

fn plda_interp(a: PldaInterpArgs) -> Outcome {
    let out = read_model(&a.out_domain, io::read_plda)?;
    let ind = read_model(&a.in_domain, io::read_plda)?;
    io::write_file(&a.out, io::write_plda(&interpolate_plda(&out, &ind, a.alpha)?)?)?;
    Ok(())
}

struct LoadedScorer {
    scorer: Box<dyn PairScorer>,
    enroll: EmbeddingSet,
    probe: Option<EmbeddingSet>,
    manifest: EnrollmentManifest,
}

impl LoadedScorer {
    fn probe(&self) -> &EmbeddingSet {
        self.probe.as_ref().unwrap_or(&self.enroll)
    }
}

fn load_scorer(a: &ScorerArgs) -> Result<LoadedScorer, Failure> {
    let enroll = read_embeddings(&a.enroll)?;
    let probe = a.probe.as_deref().map(read_embeddings).transpose()?;
    let model = |what: &str| match &a.model {
        Some(p) => Ok(p.clone()),
        None => usage(format!("--backend {what} needs --model")),
    };
    let scorer: Box<dyn PairScorer> = match a.backend {
        Backend::Plda => Box::new(read_model(&model("plda")?, io::read_plda)?.scoring()?),
        Backend::Psvm => Box::new(read_model(&model("psvm")?, io::read_psvm)?),
        Backend::Cosine => Box::new(CosineScorer { dim: enroll.dim() }),
    };
    Ok(LoadedScorer {
        scorer,
        enroll,
        probe,
        manifest: read_manifest(a.manifest.as_ref())?,
    })
}

fn score(a: ScoreArgs) -> Outcome {
    let s = load_scorer(&a.scorer)?;
    let trials = trials_from(&a.source)?;
    let scores = score_trials(s.scorer.as_ref(), &s.enroll, s.probe(), &s.manifest, &trials)?;
    io::write_file(&a.out, io::write_scores(&scores))?;
    Ok(())
}

fn snorm(a: SnormArgs) -> Outcome {
    let s = load_scorer(&a.scorer)?;
    let raw = read_scores(&a.scores)?;
    let cohort = read_embeddings(&a.cohort)?;
    let cs = cohort_scores(s.scorer.as_ref(), &s.enroll, s.probe(), &s.manifest, raw.trials(), &cohort)?;
    let out = match a.method {
        NormMethod::Snorm => adaptive_snorm(&raw, &cs.enroll, &cs.probe, a.top)?,
        NormMethod::Calnorm => cal_norm(&raw, &cs.enroll, &cs.probe, a.top, a.a, a.b)?,
    };
    io::write_file(&a.out, io::write_scores(&out))?;
    Ok(())
}

fn psvm_init(a: PsvmInitArgs) -> Outcome {
    let plda = read_model(&a.plda, io::read_plda)?;
    io::write_file(&a.out, io::write_psvm(&init_psvm_from_plda(&plda)?)?)?;
    Ok(())
}

fn psvm_train(a: PsvmTrainArgs, seed: u64) -> Outcome {
    let init = read_model(&a.init, io::read_psvm)?;
    let train = read_embeddings(&a.train)?;
    let similarity = SpeakerSimilarity::from_set(&train)?;
    let mining = MiningConfig {
        n_same: a.n_same,
        n_impostor: a.n_impostor,
        seed,
    };
    let pairs = mine_pairs(&train, &similarity, &mining)?;
    warn(&pairs.warnings);
    let data = PairData::from_pairs(&pairs.value, &train)?;
    let cfg = RefineConfig {
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        epochs: a.epochs,
        temperature: a.temperature,
        momentum: a.momentum,
        seed: seed.wrapping_add(1),
    };
    let out = refine_psvm(&init, &data, &PRIMARY_OPERATING_POINTS, &cfg)?;
    println!("epoch\tloss");
    println!("0\t{:.6}", out.initial_loss);
    for (i, l) in out.epoch_losses.iter().enumerate() {
        println!("{}\t{l:.6}", i + 1);
    }
    io::write_file(&a.out, io::write_psvm(&out.model)?)?;
    Ok(())
}

fn fuse(a: FuseArgs) -> Outcome {
    if a.key.is_none() && a.model.is_none() {
        return usage("either --key (train) or --model (apply) is required");
    }
    if a.use_durations && a.durations.is_none() {
        return usage("--use-durations needs --durations");
    }
    let key = a.key.as_deref().map(read_key).transpose()?;
    let trials: Vec<Trial> = match (&key, &a.trials) {
        (Some(k), _) => k.trials().to_vec(),
        (None, Some(p)) => io::parse_file(p, io::parse_trial_list)?,
        (None, None) => read_scores(&a.scores[0])?.trials().to_vec(),
    };
    let matrix = load_matrix(&a.scores, &trials)?;
    let durations = load_durations(a.durations.as_ref(), a.manifest.as_ref(), &trials)?;
    let model = match (&key, &a.model) {
        (Some(k), _) => {
            let cfg = FusionConfig {
                prior: a.prior,
                use_durations: a.use_durations,
                ridge: a.ridge,
                ..FusionConfig::default()
            };
            let used = if a.use_durations { durations.as_deref() } else { None };
            train_fusion(&matrix, k.labels(), used, &cfg)?
        }
        (None, Some(p)) => {
            let m = io::parse_file(p, FusionModel::from_text)?;
            if m.names != matrix.names {
                eprintln!(
                    "warning: model subsystems {:?} applied to score files {:?} in the given order",
                    m.names, matrix.names
                );
            }
            m
        }
        (None, None) => unreachable!("checked above"),
    };
    if let Some(p) = &a.model_out {
        io::write_file(p, model.to_text())?;
    }
    if let Some(p) = &a.out {
        let fused = ScoreSet::new(trials, fuse_scores(&model, &matrix, durations.as_deref())?)?;
        io::write_file(p, io::write_scores(&apply_offset(&fused, a.offset)?))?;
    }
    if a.out.is_none() && a.model_out.is_none() {
        eprintln!("warning: neither --out nor --model-out given; nothing written");
    }
    Ok(())
}

fn summary_rows(prefix: &str, s: &Summary, out: &mut String) {
    for (name, v) in [
        ("eer", s.eer),
        ("min_cprimary", s.min_c_primary),
        ("act_cprimary", s.act_c_primary),
        ("cllr", s.cllr),
    ] {
        let _ = writeln!(out, "{prefix}{name}\t{v:.6}");
    }
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let key = read_key(&a.key)?;
    let m = load_matrix(std::slice::from_ref(&a.scores), key.trials())?;
    let (scores, labels) = (&m.rows[0], key.labels());
    let mut out = String::from("metric\tvalue\n");
    summary_rows("", &summarize(scores, labels)?, &mut out);
    if a.equalized {
        let parts = key.partitions();
        let eq = Summary {
            eer: equalized(vbackend::metrics::eer, scores, labels, parts)?,
            min_c_primary: equalized(vbackend::metrics::min_c_primary, scores, labels, parts)?,
            act_c_primary: equalized(vbackend::metrics::act_c_primary, scores, labels, parts)?,
            cllr: equalized(vbackend::metrics::cllr, scores, labels, parts)?,
            min_cllr: equalized(vbackend::metrics::min_cllr, scores, labels, parts)?,
        };
        summary_rows("equalized_", &eq, &mut out);
    }
    print!("{out}");
    if let Some(p) = &a.det {
        let mut text = String::from("probit_pfa\tprobit_pmiss\n");
        for (x, y) in det_points(scores, labels)? {
            let _ = writeln!(text, "{}\t{}", io::format_score(x), io::format_score(y));
        }
        io::write_file(p, text)?;
    }
    Ok(())
}

fn contributions(a: ContributionsArgs) -> Outcome {
    let model = io::parse_file(&a.model, FusionModel::from_text)?;
    let trials = trials_from(&a.source)?;
    let matrix = load_matrix(&a.scores, &trials)?;
    let durations = load_durations(a.durations.as_ref(), a.manifest.as_ref(), &trials)?;
    print!("{}", format_contributions(&contribution_report(&model, &matrix, durations.as_deref())?));
    Ok(())
}

fn jackknife_cmd(a: JackknifeArgs) -> Outcome {
    if a.use_durations && a.durations.is_none() {
        return usage("--use-durations needs --durations");
    }
    if a.train_scores.len() != a.eval_scores.len() {
        return usage("--train-scores and --eval-scores must list the same subsystems");
    }
    let load = |paths: &[PathBuf], key: &Path| -> vbackend::Result<(TrialKey, ScoreMatrix, Option<Vec<DurationInfo>>)> {
        let key = read_key(key)?;
        let m = load_matrix(paths, key.trials())?;
        let d = if a.use_durations {
            load_durations(a.durations.as_ref(), a.manifest.as_ref(), key.trials())?
        } else {
            None
        };
        Ok((key, m, d))
    };
    let (tk, tm, td) = load(&a.train_scores, &a.train_key)?;
    let (ek, mut em, ed) = load(&a.eval_scores, &a.eval_key)?;
    // subsystems are matched by position; keep the training names
    em.names = tm.names.clone();
    let cfg = FusionConfig {
        prior: a.prior,
        use_durations: a.use_durations,
        ridge: a.ridge,
        ..FusionConfig::default()
    };
    let rows = jackknife(
        &FusionData {
            matrix: &tm,
            labels: tk.labels(),
            durations: td.as_deref(),
        },
        &FusionData {
            matrix: &em,
            labels: ek.labels(),
            durations: ed.as_deref(),
        },
        &cfg,
    )?;
    print!("{}", format_jackknife(&rows));
    Ok(())
}
