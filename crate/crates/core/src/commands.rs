//! The subcommands behind the `tokenalign` binary.
//!
//! Each command validates its whole configuration and every input it reads
//! before writing anything. Errors raised before the first write are
//! [`Failure::Validation`], later ones [`Failure::Runtime`]. A failed gradient
//! check is [`Failure::Verification`]. All files are written atomically.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cache::{peek_dtype, write_atomic};
use crate::config::{require_corpus, require_file, Paths, RunConfig, Split};
use crate::corpus::{gen_corpus, Corpus, SyntheticSample};
use crate::error::{Error, Result};
use crate::localization::encode_pgm;
use crate::objective::{grad_check, GradCheckOptions, Objective};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::evaluate::{evaluate, localize_sample, EvalOutcome};
use crate::pipeline::train::{prepare, prepare_all, LogRow, TrainConfig, Trainer, LOSS_LOG_HEADER};
use crate::report::{comparison_table, relative_r1, ComparisonRow};
use crate::retrieval::{random_baseline, Direction, RandomBaseline};
use crate::tensor::{DType, Real};

#[derive(Debug)]
pub enum Failure {
    Validation(Error),
    Runtime(Error),
    Verification(String),
}

impl Failure {
    /// Process exit code: 1 validation, 2 runtime, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(e) => write!(f, "validation error: {e}"),
            Failure::Runtime(e) => write!(f, "runtime error: {e}"),
            Failure::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

pub type CmdResult<T> = std::result::Result<T, Failure>;

trait Phase<T> {
    fn invalid(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T> Phase<T> for Result<T> {
    fn invalid(self) -> CmdResult<T> {
        self.map_err(Failure::Validation)
    }
    fn runtime(self) -> CmdResult<T> {
        self.map_err(Failure::Runtime)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn loss_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_tsv());
        s.push('\n');
    }
    s
}

fn select(corpus: &Corpus, split: Split) -> &[SyntheticSample] {
    match split {
        Split::Train => corpus.train(),
        Split::Validation => corpus.validation(),
        Split::All => &corpus.samples,
    }
}

fn check_train_size(train: &TrainConfig, corpus: &Corpus) -> Result<()> {
    if corpus.num_train() < train.batch_size {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the {} training samples", train.batch_size, corpus.num_train()),
        ));
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, paths: &Paths) -> CmdResult<Vec<String>> {
    cfg.corpus.validate().invalid()?;
    let corpus = gen_corpus(&cfg.corpus).runtime()?;
    corpus.save(&paths.corpus).runtime()?;
    Ok(vec![
        format!("corpus={}", paths.corpus.display()),
        format!("samples={}", corpus.samples.len()),
        format!("train={}", corpus.num_train()),
        format!("validation={}", corpus.validation().len()),
    ])
}

fn train_typed<T: Real>(cfg: &TrainConfig, corpus: &Corpus, paths: &Paths) -> CmdResult<Vec<String>> {
    let data = prepare_all::<T>(corpus.train(), cfg.mask_rule).runtime()?;
    let c = &corpus.config;
    let mut trainer = Trainer::<T>::new(cfg.clone(), c.audio_dim, c.visual_dim, data.len()).runtime()?;
    let rows = trainer.run(&data, |_, _| Ok(())).runtime()?;
    if rows.iter().any(|r| !r.total.is_finite()) {
        return Err(Failure::Runtime(Error::InvalidArgument("non-finite loss".into())));
    }
    write_text(&paths.loss_log(), &loss_log(&rows)).runtime()?;
    Checkpoint::from_trainer(&trainer, data.len()).save(&paths.checkpoint).runtime()?;
    let mut out = vec![
        format!("checkpoint={}", paths.checkpoint.display()),
        format!("loss_log={}", paths.loss_log().display()),
        format!("steps={}", rows.len()),
    ];
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        out.push(format!("initial_loss={:.6}", first.total));
        out.push(format!("final_loss={:.6}", last.total));
    }
    Ok(out)
}

pub fn train(cfg: &RunConfig, paths: &Paths) -> CmdResult<Vec<String>> {
    cfg.validate().invalid()?;
    require_corpus("paths.corpus", &paths.corpus).invalid()?;
    let corpus = Corpus::load(&paths.corpus).invalid()?;
    check_train_size(&cfg.train, &corpus).invalid()?;
    match cfg.train.precision {
        DType::F32 => train_typed::<f32>(&cfg.train, &corpus, paths),
        DType::F64 => train_typed::<f64>(&cfg.train, &corpus, paths),
    }
}

/// A checkpoint evaluated on one split, at whatever precision it was saved in.
struct Scored {
    objective: Objective,
    outcome: EvalOutcome,
}

fn load_checkpoint<T: Real>(path: &Path, corpus: &Corpus) -> Result<Checkpoint<T>> {
    let ck = Checkpoint::<T>::load(path)?;
    let c = &corpus.config;
    if (ck.meta.d_audio_in, ck.meta.d_visual_in) != (c.audio_dim, c.visual_dim) {
        return Err(Error::config(
            "paths.checkpoint",
            format!(
                "checkpoint expects {}x{} input dims, corpus has {}x{}",
                ck.meta.d_audio_in, ck.meta.d_visual_in, c.audio_dim, c.visual_dim
            ),
        ));
    }
    Ok(ck)
}

fn score_typed<T: Real>(ck: &Checkpoint<T>, samples: &[SyntheticSample]) -> Result<Scored> {
    let data = prepare_all::<T>(samples, ck.meta.train.mask_rule)?;
    Ok(Scored {
        objective: ck.meta.train.objective,
        outcome: evaluate(&ck.model, &data, &ck.meta.train)?,
    })
}

/// Load failures count as validation, scoring failures as runtime.
fn score_checkpoint(path: &Path, corpus: &Corpus, samples: &[SyntheticSample]) -> CmdResult<Scored> {
    match peek_dtype(path).invalid()? {
        DType::F32 => score_typed(&load_checkpoint::<f32>(path, corpus).invalid()?, samples).runtime(),
        DType::F64 => score_typed(&load_checkpoint::<f64>(path, corpus).invalid()?, samples).runtime(),
    }
}

fn validate_checkpoint(path: &Path, corpus: &Corpus) -> Result<()> {
    match peek_dtype(path)? {
        DType::F32 => load_checkpoint::<f32>(path, corpus).map(drop),
        DType::F64 => load_checkpoint::<f64>(path, corpus).map(drop),
    }
}

fn row_of(label: &str, o: &EvalOutcome) -> ComparisonRow {
    ComparisonRow {
        label: label.to_string(),
        reports: o.reports.clone(),
        pointing_accuracy: Some(o.pointing_accuracy),
        mass_inside: Some(o.mean_mass_inside),
    }
}

fn randoms(n: usize, trials: usize, seed: u64) -> Result<Vec<RandomBaseline>> {
    Direction::BOTH
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let mut b = random_baseline(n, trials, seed.wrapping_add(i as u64))?;
            b.report.direction = d;
            Ok(b)
        })
        .collect()
}

pub fn eval(cfg: &RunConfig, paths: &Paths) -> CmdResult<Vec<String>> {
    cfg.validate().invalid()?;
    require_file("paths.checkpoint", &paths.checkpoint).invalid()?;
    require_corpus("paths.corpus", &paths.corpus).invalid()?;
    if let Some(b) = &cfg.eval.baseline {
        require_file("eval.baseline", b).invalid()?;
    }
    let corpus = Corpus::load(&paths.corpus).invalid()?;
    let samples = select(&corpus, cfg.eval.split);
    if samples.is_empty() {
        return Err(Failure::Validation(Error::config("eval.split", "selected split is empty")));
    }
    validate_checkpoint(&paths.checkpoint, &corpus).invalid()?;
    if let Some(b) = &cfg.eval.baseline {
        validate_checkpoint(b, &corpus).invalid()?;
    }

    let main = score_checkpoint(&paths.checkpoint, &corpus, samples)?;
    let label = main.objective.name();
    let mut rows = vec![row_of(label, &main.outcome)];
    let baseline = match &cfg.eval.baseline {
        Some(b) => {
            let s = score_checkpoint(b, &corpus, samples)?;
            rows.push(row_of("baseline", &s.outcome));
            Some(s)
        }
        None => None,
    };
    let reference = if baseline.is_some() { "baseline" } else { label };
    let random = randoms(samples.len(), cfg.eval.random_trials, cfg.train.seed).runtime()?;
    let table = comparison_table(&rows, reference, Some(&random)).runtime()?;

    let o = &main.outcome;
    let mut summary = vec![
        format!("objective={label}"),
        format!("similarity={:?}", o.similarity).to_lowercase(),
        format!("split={:?}", cfg.eval.split).to_lowercase(),
        format!("n={}", samples.len()),
        format!("pointing_accuracy={:.6}", o.pointing_accuracy),
        format!("mass_inside={:.6}", o.mean_mass_inside),
        format!("tokens_scored={}", o.tokens_scored),
        format!("random_mean_rank_expected={:.1}", (samples.len() + 1) as f64 / 2.0),
    ];
    if baseline.is_some() {
        for d in Direction::BOTH {
            let v = relative_r1(&rows, label, "baseline", d).map_or_else(|_| "nan".to_string(), |v| format!("{v:.2}"));
            summary.push(format!("rel_r@1_{d}={v}"));
        }
    }

    let dir = &paths.reports;
    for r in &o.reports {
        write_text(&dir.join(format!("eval_{}.txt", r.direction)), &r.to_key_value()).runtime()?;
    }
    write_text(&dir.join("eval_table.tsv"), &table).runtime()?;
    write_text(&dir.join("eval_summary.txt"), &(summary.join("\n") + "\n")).runtime()?;
    summary.insert(0, format!("checkpoint={}", paths.checkpoint.display()));
    summary.push(format!("r@1_a2v={:.2}", o.a2v().recall(1).unwrap_or(f64::NAN)));
    summary.push(format!("mean_rank_a2v={:.2}", o.a2v().mean_rank));
    Ok(summary)
}

pub const HEATMAP_MANIFEST: &str = "manifest.tsv";
pub const HEATMAP_HEADER: &str = "file\tsample\ttoken\tconcept\thit\tmass_inside\tdegenerate";

fn heatmaps_typed<T: Real>(ck: &Checkpoint<T>, corpus: &Corpus, cfg: &RunConfig, dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let eps = T::lit(ck.meta.train.eps);
    let mut files = Vec::new();
    let mut lines = Vec::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for &id in &cfg.heatmaps.samples {
        let s = prepare::<T>(&corpus.samples[id], ck.meta.train.mask_rule)?;
        let a = ck.model.embed_audio(&s.audio, eps)?;
        let v = ck.model.embed_visual(&s.visual, eps)?;
        for loc in localize_sample(&a, &v, &s)? {
            let name = format!("sample{id:05}_t{:03}_c{:03}.pgm", loc.heatmap.token, loc.concept);
            files.push((dir.join(&name), encode_pgm(&loc.heatmap, cfg.heatmaps.upscale)?));
            lines.push(format!(
                "{name}\t{id}\t{}\t{}\t{}\t{:.6}\t{}",
                loc.heatmap.token, loc.concept, loc.hit as u8, loc.mass_inside, loc.degenerate as u8
            ));
            hits += loc.hit as usize;
            total += 1;
        }
    }
    let acc = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    let mut manifest = format!("# pointing_accuracy={acc:.6}\n# tokens={total}\n{HEATMAP_HEADER}\n");
    for l in lines {
        manifest.push_str(&l);
        manifest.push('\n');
    }
    files.push((dir.join(HEATMAP_MANIFEST), manifest.into_bytes()));
    Ok(files)
}

pub fn heatmaps(cfg: &RunConfig, paths: &Paths) -> CmdResult<Vec<String>> {
    cfg.validate().invalid()?;
    require_file("paths.checkpoint", &paths.checkpoint).invalid()?;
    require_corpus("paths.corpus", &paths.corpus).invalid()?;
    let corpus = Corpus::load(&paths.corpus).invalid()?;
    if let Some(&bad) = cfg.heatmaps.samples.iter().find(|&&i| i >= corpus.samples.len()) {
        return Err(Failure::Validation(Error::config(
            "heatmaps.samples",
            format!("sample {bad} is out of range for a corpus of {}", corpus.samples.len()),
        )));
    }
    validate_checkpoint(&paths.checkpoint, &corpus).invalid()?;
    let dir = &paths.heatmaps;
    let files = match peek_dtype(&paths.checkpoint).invalid()? {
        DType::F32 => heatmaps_typed(&load_checkpoint::<f32>(&paths.checkpoint, &corpus).invalid()?, &corpus, cfg, dir),
        DType::F64 => heatmaps_typed(&load_checkpoint::<f64>(&paths.checkpoint, &corpus).invalid()?, &corpus, cfg, dir),
    }
    .runtime()?;
    let mut written: Vec<&Path> = Vec::new();
    for (path, bytes) in &files {
        if let Err(e) = write_atomic(path, bytes) {
            for p in written {
                let _ = std::fs::remove_file(p);
            }
            return Err(Failure::Runtime(e));
        }
        written.push(path);
    }
    let manifest = String::from_utf8_lossy(&files.last().expect("manifest").1).into_owned();
    let mut out = vec![format!("heatmaps={}", dir.display()), format!("files={}", files.len() - 1)];
    out.extend(manifest.lines().take(2).map(|l| l.trim_start_matches("# ").to_string()));
    Ok(out)
}

pub const GRADCHECK_HEADER: &str = "objective\tbatches\tworst_rel_err\tcoords_checked\tall_gradients_zero\tstatus";

/// Checks every configured objective; `corrupt_backward` is a negative control hook.
pub fn gradcheck(cfg: &RunConfig, paths: &Paths, corrupt_backward: bool) -> CmdResult<Vec<String>> {
    cfg.validate().invalid()?;
    let g = &cfg.gradcheck;
    let mut lines = vec![GRADCHECK_HEADER.to_string()];
    let mut failed = Vec::new();
    for &objective in &g.objectives {
        let ocfg = TrainConfig {
            objective,
            ..cfg.train.clone()
        }
        .objective_config();
        let (mut worst, mut coords, mut zero) = (0.0f64, 0usize, true);
        for b in 0..g.batches {
            let mut opts = GradCheckOptions::new(ocfg, g.seed.wrapping_add(b as u64));
            opts.batch_size = g.batch_size;
            opts.corrupt_backward = corrupt_backward;
            let r = grad_check(&opts).runtime()?;
            worst = worst.max(r.worst);
            coords += r.coords_checked;
            zero &= r.all_gradients_zero;
        }
        let ok = worst <= g.tolerance;
        if !ok {
            failed.push(objective.name());
        }
        lines.push(format!(
            "{objective}\t{}\t{worst:.3e}\t{coords}\t{}\t{}",
            g.batches,
            zero,
            if ok { "pass" } else { "fail" }
        ));
    }
    let text = lines.join("\n") + "\n";
    write_text(&paths.reports.join("gradcheck.tsv"), &text).runtime()?;
    if failed.is_empty() {
        Ok(lines)
    } else {
        Err(Failure::Verification(format!(
            "{} exceeded tolerance {:e}",
            failed.join(", "),
            g.tolerance
        )))
    }
}

/// One objective's run inside [`compare`].
#[derive(Debug, Clone)]
pub struct CompareRun {
    pub objective: Objective,
    pub log: Vec<LogRow>,
    pub outcome: EvalOutcome,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub runs: Vec<CompareRun>,
    pub table: String,
    /// `key=value` lines; independent of timing so the file is reproducible.
    pub summary: Vec<String>,
}

impl CompareOutcome {
    pub fn run(&self, o: Objective) -> Option<&CompareRun> {
        self.runs.iter().find(|r| r.objective == o)
    }

    /// True when every objective consumed the identical batch sequence.
    pub fn batches_shared(&self) -> bool {
        let hashes = |r: &CompareRun| r.log.iter().map(|l| l.batch_hash).collect::<Vec<_>>();
        self.runs.windows(2).all(|w| hashes(&w[0]) == hashes(&w[1]))
    }
}

/// Objectives trained by [`compare`], in table order.
pub const COMPARE_OBJECTIVES: [Objective; 4] = [Objective::Dense, Objective::Global, Objective::Hybrid, Objective::DenseSymmetric];

fn compare_typed<T: Real>(cfg: &RunConfig, corpus: &Corpus) -> Result<(Vec<CompareRun>, usize)> {
    let train = prepare_all::<T>(corpus.train(), cfg.train.mask_rule)?;
    let val = prepare_all::<T>(corpus.validation(), cfg.train.mask_rule)?;
    let c = &corpus.config;
    let mut runs = Vec::new();
    for objective in COMPARE_OBJECTIVES {
        let start = Instant::now();
        let tc = TrainConfig {
            objective,
            ..cfg.train.clone()
        };
        let mut t = Trainer::<T>::new(tc.clone(), c.audio_dim, c.visual_dim, train.len())?;
        let log = t.run(&train, |_, _| Ok(()))?;
        let outcome = evaluate(&t.model, &val, &tc)?;
        runs.push(CompareRun {
            objective,
            log,
            outcome,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((runs, val.len()))
}

/// Renders the outputs of a finished comparison.
pub fn compare_report(runs: Vec<CompareRun>, n_val: usize, random_trials: usize, seed: u64) -> Result<CompareOutcome> {
    let rows: Vec<ComparisonRow> = runs.iter().map(|r| row_of(r.objective.name(), &r.outcome)).collect();
    let random = randoms(n_val, random_trials, seed)?;
    let table = comparison_table(&rows, Objective::Global.name(), Some(&random))?;
    let mut outcome = CompareOutcome {
        runs,
        table,
        summary: Vec::new(),
    };
    let mut s = Vec::new();
    for r in &outcome.runs {
        let name = r.objective.name();
        s.push(format!("{name}.r@1_a2v={:.4}", r.outcome.a2v().recall(1).unwrap_or(f64::NAN)));
        s.push(format!("{name}.pointing_accuracy={:.6}", r.outcome.pointing_accuracy));
        s.push(format!("{name}.mass_inside={:.6}", r.outcome.mean_mass_inside));
        s.push(format!("{name}.final_loss={:.6}", r.log.last().map_or(f64::NAN, |l| l.total)));
    }
    let get = |o| outcome.run(o).expect("compared objective");
    let (dense, global, sym) = (get(Objective::Dense), get(Objective::Global), get(Objective::DenseSymmetric));
    let r1 = |r: &CompareRun| r.outcome.a2v().recall(1).unwrap_or(f64::NAN);
    s.push(format!("dense_over_global_r@1_ratio={:.4}", r1(dense) / r1(global)));
    s.push(format!(
        "dense_minus_global_pointing_pp={:.2}",
        100.0 * (dense.outcome.pointing_accuracy - global.outcome.pointing_accuracy)
    ));
    s.push(format!(
        "psi_minus_phi_pointing_pp={:.2}",
        100.0 * (sym.outcome.pointing_accuracy - dense.outcome.pointing_accuracy)
    ));
    s.push(format!(
        "psi_hurts_localization={}",
        sym.outcome.pointing_accuracy < dense.outcome.pointing_accuracy
    ));
    s.push(format!("batch_hashes_equal={}", outcome.batches_shared()));
    outcome.summary = s;
    Ok(outcome)
}

/// Trains every objective on one corpus with one seed and reports them side by side.
pub fn compare(cfg: &RunConfig, paths: &Paths) -> CmdResult<CompareOutcome> {
    cfg.validate().invalid()?;
    let corpus = gen_corpus(&cfg.corpus).runtime()?;
    check_train_size(&cfg.train, &corpus).invalid()?;
    if corpus.validation().is_empty() {
        return Err(Failure::Validation(Error::config("validation_fraction", "validation split is empty")));
    }
    let (runs, n_val) = match cfg.train.precision {
        DType::F32 => compare_typed::<f32>(cfg, &corpus),
        DType::F64 => compare_typed::<f64>(cfg, &corpus),
    }
    .runtime()?;
    let outcome = compare_report(runs, n_val, cfg.eval.random_trials, cfg.train.seed).runtime()?;

    let dir = &paths.reports;
    for r in &outcome.runs {
        write_text(&dir.join(format!("compare_loss_{}.tsv", r.objective)), &loss_log(&r.log)).runtime()?;
    }
    let mut hashes = String::from("step");
    for r in &outcome.runs {
        hashes.push('\t');
        hashes.push_str(r.objective.name());
    }
    hashes.push('\n');
    for i in 0..outcome.runs[0].log.len() {
        hashes.push_str(&outcome.runs[0].log[i].step.to_string());
        for r in &outcome.runs {
            hashes.push_str(&format!("\t{:016x}", r.log[i].batch_hash));
        }
        hashes.push('\n');
    }
    write_text(&dir.join("compare_batches.tsv"), &hashes).runtime()?;
    write_text(&dir.join("compare_table.tsv"), &outcome.table).runtime()?;
    write_text(&dir.join("compare_summary.txt"), &(outcome.summary.join("\n") + "\n")).runtime()?;
    write_text(&dir.join("compare_config.toml"), &cfg.to_toml().runtime()?).runtime()?;
    Ok(outcome)
}
