use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use transrec::corpus::synthetic::{generate_synthetic_world, TARGET_DOMAINS};
use transrec::corpus::{
    leave_one_out_split, load_catalog, load_interactions, subsample, write_catalog, write_interactions, CatalogSchema, Dataset, Split,
};
use transrec::encoders::ItemEncoderKind;
use transrec::eval::{compare, comparison_table, evaluate, EvalOptions, MetricsReport};
use transrec::gradcheck::{standard_fragments, GradCheckError, DEFAULT_EPS, DEFAULT_TOLERANCE};
use transrec::params::Precision;
use transrec::pipeline::{
    adapt_to_target, load_checkpoint, pretrain_user_encoder, save_checkpoint, train_end_to_end, Checkpoint, Model, RunOutcome,
    Stage, TrainStage, TransferMode,
};

use crate::config::{FileDomain, RunConfig};
use crate::convergence::{emit_convergence, ConvergenceLog, FILE_NAME};
use crate::{Cli, CliError, Command};

pub const RESOLVED_CONFIG: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_LIST: &str = "checkpoints.txt";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const REPORT_FILE: &str = "report.md";

/// Resolved config, output directory and the run's logs.
struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    reports: Vec<MetricsReport>,
    checkpoints: Vec<PathBuf>,
}

impl Run {
    fn start(cli: &Cli) -> Result<Self, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
            cfg.corpus.synthetic.seed = seed;
        }
        if let Some(dir) = &cli.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(k) = cli.k {
            cfg.eval.k = k;
        }
        cfg.eval.mask_history |= cli.mask_history;
        Ok(Self { dir: cfg.output_dir.clone(), cfg, reports: Vec::new(), checkpoints: Vec::new() })
    }

    /// Validates and writes the resolved config; nothing runs before this.
    fn prepare(&self) -> Result<(), CliError> {
        self.cfg.validate()?;
        std::fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        let path = self.dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.cfg.to_toml()).map_err(|e| CliError::io(&path, e))
    }

    fn log(&self, run_id: &str) -> Result<ConvergenceLog, CliError> {
        ConvergenceLog::open(&self.dir.join(FILE_NAME), run_id)
    }

    fn save(&mut self, ckpt: &Checkpoint, name: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        save_checkpoint(ckpt, &path)?;
        let manifest = path.with_extension("manifest.txt");
        std::fs::write(&manifest, ckpt.manifest_text()).map_err(|e| CliError::io(&manifest, e))?;
        self.checkpoints.push(path.clone());
        Ok(path)
    }

    fn record(&mut self, run_id: &str, outcome: &RunOutcome) {
        for r in [&outcome.valid, &outcome.test] {
            self.reports.push(MetricsReport { run_id: run_id.to_string(), ..r.clone() });
        }
        println!(
            "{run_id}: valid hr@{k} {:.4} ndcg@{k} {:.4} | test hr@{k} {:.4} ndcg@{k} {:.4} (best epoch {})",
            outcome.valid.hr,
            outcome.valid.ndcg,
            outcome.test.hr,
            outcome.test.ndcg,
            outcome.best_epoch,
            k = outcome.test.k
        );
    }

    fn finish(&self) -> Result<(), CliError> {
        let path = self.dir.join(METRICS_FILE);
        MetricsReport::write_csv(&self.reports, &path)?;
        let list = self.dir.join(CHECKPOINT_LIST);
        let text: String = self.checkpoints.iter().map(|p| format!("{}\n", p.display())).collect();
        std::fs::write(&list, text).map_err(|e| CliError::io(&list, e))
    }
}

fn load_file_domain(d: &FileDomain, max_seq_len: usize) -> Result<Dataset, CliError> {
    let catalog = load_catalog(&d.catalog, &CatalogSchema::default())?;
    Ok(load_interactions(&d.interactions, Arc::new(catalog), &d.name, max_seq_len)?)
}

/// The source and every target domain named by the corpus section.
fn load_domains(cfg: &RunConfig) -> Result<(Dataset, BTreeMap<String, Dataset>), CliError> {
    match &cfg.corpus.source {
        Some(src) => {
            let source = load_file_domain(src, cfg.corpus.max_seq_len)?;
            let targets = cfg
                .corpus
                .targets
                .iter()
                .map(|t| Ok((t.name.clone(), load_file_domain(t, cfg.corpus.max_seq_len)?)))
                .collect::<Result<_, CliError>>()?;
            Ok((source, targets))
        }
        None => {
            let world = generate_synthetic_world(&cfg.corpus.synthetic)?;
            let targets = world.targets.into_iter().map(|d| (d.domain_name.clone(), d)).collect();
            Ok((world.source, targets))
        }
    }
}

fn domain_order(cfg: &RunConfig, targets: &BTreeMap<String, Dataset>) -> Vec<String> {
    if cfg.corpus.source.is_none() {
        TARGET_DOMAINS.iter().map(|s| s.to_string()).collect()
    } else {
        cfg.corpus.targets.iter().map(|t| t.name.clone()).filter(|n| targets.contains_key(n)).collect()
    }
}

fn pick_domain(source: Dataset, mut targets: BTreeMap<String, Dataset>, name: &str) -> Result<Dataset, CliError> {
    if source.domain_name == name {
        return Ok(source);
    }
    let known: Vec<String> = std::iter::once(source.domain_name.clone()).chain(targets.keys().cloned()).collect();
    targets.remove(name).ok_or_else(|| CliError::config(format!("--domain `{name}` is not one of {known:?}")))
}

fn read_checkpoint(path: Option<&PathBuf>) -> Result<Option<Checkpoint>, CliError> {
    path.map(|p| load_checkpoint(p).map_err(CliError::from)).transpose()
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut run = Run::start(&cli)?;
    match cli.command {
        Command::GenData => gen_data(&mut run),
        Command::PretrainUser { stage1_freeze_items } => {
            run.cfg.pipeline.stage1_freeze_items |= stage1_freeze_items;
            pretrain(&mut run)
        }
        Command::Train { from_checkpoint, force_compat } => train(&mut run, from_checkpoint.as_ref(), force_compat),
        Command::Adapt { mode, from_checkpoint, domain, fraction, force_compat } => {
            if mode != TransferMode::Scratch && from_checkpoint.is_none() {
                return Err(CliError::config(format!("--mode {mode} requires --from-checkpoint")));
            }
            if let Some(f) = fraction {
                run.cfg.experiment.target_fraction = f;
            }
            if let Some(d) = domain {
                run.cfg.corpus.target = d;
            }
            adapt(&mut run, mode, from_checkpoint.as_ref(), force_compat)
        }
        Command::Eval { from_checkpoint, domain } => {
            let path = from_checkpoint.ok_or_else(|| CliError::config("eval requires --from-checkpoint"))?;
            eval(&mut run, &path, domain)
        }
        Command::Compare { baseline, candidate, split } => compare_files(&baseline, &candidate, &split),
        Command::GradCheck => grad_check(),
        Command::ExperimentMatrix => experiment_matrix(&mut run),
        Command::Convergence { run_dirs } => {
            print!("{}", emit_convergence(&run_dirs)?);
            Ok(())
        }
    }
}

fn gen_data(run: &mut Run) -> Result<(), CliError> {
    run.prepare()?;
    let world = generate_synthetic_world(&run.cfg.corpus.synthetic)?;
    for d in std::iter::once(&world.source).chain(&world.targets) {
        let dir = run.dir.join("data").join(&d.domain_name);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write_catalog(dir.join("catalog.jsonl"), &d.catalog)?;
        write_interactions(dir.join("interactions.jsonl"), d)?;
        println!("{}: {} users, {} items -> {}", d.domain_name, d.users.len(), d.num_items(), dir.display());
    }
    Ok(())
}

fn with_log<T>(
    run: &Run,
    run_id: &str,
    f: impl FnOnce(&mut dyn FnMut(&[transrec::pipeline::EpochRecord])) -> Result<T, transrec::pipeline::PipelineError>,
) -> Result<T, CliError> {
    let mut log = run.log(run_id)?;
    let mut io_err = None;
    let out = f(&mut |rows| {
        if let Err(e) = log.append(rows) {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    Ok(out?)
}

fn pretrain(run: &mut Run) -> Result<(), CliError> {
    run.prepare()?;
    let (source, _) = load_domains(&run.cfg)?;
    let model = run.cfg.model();
    let cfg = run.cfg.train(TrainStage::UserPretrain);
    let id = format!("pretrain-{}-seed{}", source.domain_name, run.cfg.seed);
    let out = with_log(run, &id, |cb| pretrain_user_encoder(&source, &model, &cfg, cb))?;
    run.record(&id, &out);
    run.save(&out.checkpoint, "stage1.ckpt")?;
    run.finish()
}

fn train(run: &mut Run, init: Option<&PathBuf>, force_compat: bool) -> Result<(), CliError> {
    run.prepare()?;
    let init = read_checkpoint(init)?;
    let (source, _) = load_domains(&run.cfg)?;
    let model = run.cfg.model();
    let cfg = run.cfg.source_train();
    let id = format!("train-{}-seed{}", source.domain_name, run.cfg.seed);
    if force_compat {
        log::warn!("--force-compat has no effect on stage 2; the stage-1 checkpoint must share the config");
    }
    let out = with_log(run, &id, |cb| train_end_to_end(&source, &model, &cfg, init.as_ref(), cb))?;
    run.record(&id, &out);
    run.save(&out.checkpoint, "stage2.ckpt")?;
    run.finish()
}

fn adapt(run: &mut Run, mode: TransferMode, from: Option<&PathBuf>, force_compat: bool) -> Result<(), CliError> {
    run.prepare()?;
    let ckpt = read_checkpoint(from)?;
    let (source, targets) = load_domains(&run.cfg)?;
    let target = pick_domain(source, targets, &run.cfg.corpus.target.clone())?;
    let data = subsample(&target, run.cfg.experiment.target_fraction, run.cfg.seed)?;
    let model = run.cfg.model();
    let cfg = run.cfg.train(TrainStage::EndToEnd);
    let id = format!("adapt-{}-{mode}-frac{}-seed{}", data.domain_name, run.cfg.experiment.target_fraction, run.cfg.seed);
    let out = with_log(run, &id, |cb| adapt_to_target(ckpt.as_ref(), &data, mode, &model, &cfg, force_compat, cb))?;
    for name in &out.load.fresh {
        println!("fresh tensor: {name}");
    }
    run.record(&id, &out);
    run.save(&out.checkpoint, &format!("adapted-{}-{mode}.ckpt", data.domain_name))?;
    run.finish()
}

fn eval(run: &mut Run, path: &Path, domain: Option<String>) -> Result<(), CliError> {
    run.prepare()?;
    let ckpt = load_checkpoint(path)?;
    let name = domain.unwrap_or_else(|| ckpt.domain.clone());
    let (source, targets) = load_domains(&run.cfg)?;
    let data = pick_domain(source, targets, &name)?;
    let use_head = ckpt.stage == Stage::UserPretrain && ckpt.domain == data.domain_name;
    let precision = Precision::from_env().map_err(CliError::config)?;
    let mut model = Model::build(&ckpt.model_config, &data, use_head, precision, run.cfg.seed)?;
    let report = model.load_checkpoint(&ckpt, false)?;
    if !report.fresh.is_empty() {
        log::warn!("evaluating with freshly initialised tensors: {:?}", report.fresh);
    }
    let view = leave_one_out_split(&data)?;
    let scorer = model.scorer(&data, use_head)?;
    let opts = EvalOptions { k: run.cfg.eval.k, mask_history: run.cfg.eval.mask_history };
    for split in [Split::Valid, Split::Test] {
        let r = evaluate(&scorer, &data, &view, split, &opts)?;
        println!("{} {split}: hr@{k} {:.4} ndcg@{k} {:.4} over {} users", data.domain_name, r.hr, r.ndcg, r.n_users, k = r.k);
        run.reports.push(MetricsReport {
            run_id: format!("eval-{}-{}", data.domain_name, path.display()),
            config_hash: ckpt.config_hash.clone(),
            ..r
        });
    }
    run.finish()
}

fn compare_files(a: &Path, b: &Path, split: &str) -> Result<(), CliError> {
    let split: Split = match split {
        "valid" => Split::Valid,
        "test" => Split::Test,
        other => return Err(CliError::config(format!("--split must be valid or test, got `{other}`"))),
    };
    let pick = |p: &Path| -> Result<Vec<MetricsReport>, CliError> {
        Ok(MetricsReport::read_csv(p)?.into_iter().filter(|r| r.split == split).collect())
    };
    let (ra, rb) = (pick(a)?, pick(b)?);
    let mut compared = 0;
    for x in &ra {
        for y in rb.iter().filter(|y| y.domain == x.domain && y.k == x.k) {
            let rows = compare(x, y).map_err(|e| CliError::data(e.to_string()))?;
            println!("{} ({split})\n{}", x.domain, comparison_table(x, y, &rows));
            compared += 1;
        }
    }
    if compared == 0 {
        return Err(CliError::data(format!("no {split} rows share a domain and K between the two files")));
    }
    Ok(())
}

fn grad_check() -> Result<(), CliError> {
    if Precision::from_env().map_err(CliError::config)? != Precision::F64 {
        return Err(GradCheckError::PrecisionUnsupported.into());
    }
    let mut failure = None;
    for mut f in standard_fragments() {
        match f.check(DEFAULT_EPS, DEFAULT_TOLERANCE) {
            Ok(r) => println!("PASS {:28} {:5} params  max rel err {:.2e}", f.name, r.n_checked, r.max_rel_err),
            Err(e) => {
                println!("FAIL {:28} {e}", f.name);
                failure.get_or_insert(e);
            }
        }
    }
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn experiment_matrix(run: &mut Run) -> Result<(), CliError> {
    run.prepare()?;
    let (source, targets) = load_domains(&run.cfg)?;
    let model = run.cfg.model();
    let seed = run.cfg.seed;

    let s1_cfg = run.cfg.train(TrainStage::UserPretrain);
    let id = format!("source-stage1-seed{seed}");
    let s1 = with_log(run, &id, |cb| pretrain_user_encoder(&source, &model, &s1_cfg, cb))?;
    run.record(&id, &s1);
    run.save(&s1.checkpoint, "stage1.ckpt")?;
    let s2_cfg = run.cfg.source_train();
    let id = format!("source-stage2-seed{seed}");
    let s2 = with_log(run, &id, |cb| train_end_to_end(&source, &model, &s2_cfg, Some(&s1.checkpoint), cb))?;
    run.record(&id, &s2);
    run.save(&s2.checkpoint, "stage2.ckpt")?;

    let cfg = run.cfg.train(TrainStage::EndToEnd);
    let fraction = run.cfg.experiment.target_fraction;
    let mut columns: Vec<&str> = vec!["scratch", "frozen", "finetune"];
    if run.cfg.experiment.idrec_baseline {
        columns.push("idrec");
    }
    let mut matrix: Vec<(String, BTreeMap<String, MetricsReport>)> = Vec::new();
    for name in domain_order(&run.cfg, &targets) {
        let data = subsample(&targets[&name], fraction, seed)?;
        let mut row = BTreeMap::new();
        for mode in [TransferMode::Scratch, TransferMode::FrozenFeatures, TransferMode::FinetuneFull] {
            let id = format!("{name}-{mode}-seed{seed}");
            let out = with_log(run, &id, |cb| adapt_to_target(Some(&s2.checkpoint), &data, mode, &model, &cfg, false, cb))?;
            run.record(&id, &out);
            row.insert(mode.to_string(), out.test.clone());
        }
        if run.cfg.experiment.idrec_baseline {
            let id_model = transrec::pipeline::ModelConfig { item_encoder: ItemEncoderKind::Id, ..model.clone() };
            let id = format!("{name}-idrec-seed{seed}");
            let out = with_log(run, &id, |cb| adapt_to_target(None, &data, TransferMode::Scratch, &id_model, &cfg, false, cb))?;
            run.record(&id, &out);
            row.insert("idrec".to_string(), out.test.clone());
        }
        matrix.push((name, row));
    }

    let k = run.cfg.eval.k;
    let mut csv = format!("domain,metric,{}\n", columns.join(","));
    let mut md = String::new();
    for (metric, get) in [(format!("hr@{k}"), (|r: &MetricsReport| r.hr) as fn(&MetricsReport) -> f64), (format!("ndcg@{k}"), |r| r.ndcg)] {
        let _ = writeln!(md, "### Test {metric} (target fraction {fraction})\n");
        let _ = writeln!(md, "| domain | {} | finetune vs scratch |", columns.join(" | "));
        let _ = writeln!(md, "|---|{}---|", "---|".repeat(columns.len()));
        for (name, row) in &matrix {
            let cells: Vec<String> = columns.iter().map(|c| format!("{:.4}", get(&row[*c]))).collect();
            csv += &format!("{name},{metric},{}\n", cells.join(","));
            let base = get(&row["scratch"]);
            let gain = if base > 0.0 { format!("{:+.2}%", (get(&row["finetune"]) - base) / base * 100.0) } else { "n/a".into() };
            let _ = writeln!(md, "| {name} | {} | {gain} |", cells.join(" | "));
        }
        md.push('\n');
    }
    let path = run.dir.join(MATRIX_FILE);
    std::fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
    let path = run.dir.join(REPORT_FILE);
    std::fs::write(&path, &md).map_err(|e| CliError::io(&path, e))?;
    print!("{md}");
    run.finish()
}
