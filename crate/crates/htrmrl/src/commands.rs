//! The subcommands. Each returns the directory it wrote.
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use htrmrl_core::envs::{Split, ACTION_DIM, STATE_DIM};
use htrmrl_core::eval::{
    average_rank, count_attention, mean_and_standard_error, measure_attention, project_embeddings, CurvePoint,
    MethodCurve,
};
use htrmrl_core::metarl::{
    adapt_rollout, collect_embeddings, evaluation_tasks, meta_train, method_name, summarize, AdaptResult, EvalSummary,
    MetricsLog, Progress,
};
use htrmrl_core::policy::Policy;
use htrmrl_core::rng;

use crate::checkpoint;
use crate::config::{sampling_name, Cell, RunConfig};
use crate::error::{AppError, AppResult};
use crate::plot::{self, Series};
use crate::results::{self, num, write_csv, Manifest, RunDir, CONFIG_SNAPSHOT, VERSION};
use crate::trajectory;

/// Salt separating command-line evaluation streams from training streams.
const EVAL_SALT: u64 = 0x0005_EED0_E7A1_u64;

fn say(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

pub fn checkpoint_name(env_steps: u64) -> String {
    format!("step_{env_steps:010}.htck")
}

/// Output of one training run.
#[derive(Debug)]
pub struct TrainedRun {
    pub dir: PathBuf,
    pub seed: u64,
    pub log: MetricsLog,
    pub env_steps: u64,
}

/// Train one seed into `dir`. `config` must already be specialised to the
/// seed.
pub fn train_run(config: &RunConfig, dir: PathBuf, quiet: bool) -> AppResult<TrainedRun> {
    let seed = config.train.seed;
    let run = RunDir::create(dir)?;
    let snapshot = config.to_toml();
    run.write(CONFIG_SNAPSHOT, &snapshot)?;
    let ckpt_dir = run.subdir("checkpoints")?;
    let dist = config.env.distribution()?;
    let start = Instant::now();
    let mut timing: Vec<Vec<String>> = Vec::new();
    let mut failure: Option<AppError> = None;
    let mut observer = |p: Progress<'_>, policy: &Policy| -> htrmrl_core::Result<()> {
        let wall = num(start.elapsed().as_secs_f64());
        match p {
            Progress::Update(u) => {
                timing.push(vec![u.env_steps.to_string(), "update".into(), wall]);
                say(
                    quiet,
                    format!(
                        "seed {seed} steps {:>8} batch success {:.3} return {:>8.2} kl {:.4}",
                        u.env_steps, u.train_success, u.mean_return, u.stats.approx_kl
                    ),
                );
            }
            Progress::Eval(rows) => {
                let steps = rows.first().map_or(0, |r| r.env_steps);
                timing.push(vec![steps.to_string(), "eval".into(), wall]);
                for r in rows
                    .iter()
                    .filter(|r| r.family.is_none() || rows.iter().filter(|x| x.split == r.split).count() == 1)
                {
                    say(
                        quiet,
                        format!(
                            "seed {seed} steps {steps:>8} eval {:<5} success {:.3}",
                            r.split.name(),
                            r.success_rate
                        ),
                    );
                }
                if let Err(e) = checkpoint::save(&policy.params, &ckpt_dir.join(checkpoint_name(steps))) {
                    failure = Some(e);
                    return Err(htrmrl_core::Error::contract("checkpoint write failed"));
                }
            }
        }
        Ok(())
    };
    let outcome = meta_train(&config.policy, &config.train, &dist, &mut observer);
    if let Some(e) = failure {
        return Err(e);
    }
    let outcome = outcome?;
    write_csv(
        &run.file("metrics.csv"),
        results::METRICS_HEADER,
        &results::metrics_rows(&outcome.log),
    )?;
    write_csv(&run.file("timing.csv"), results::TIMING_HEADER, &timing)?;
    let plots = run.subdir("plots")?;
    let series: Vec<Series> = [Split::Train, Split::Test]
        .into_iter()
        .map(|split| Series {
            label: split.name().into(),
            points: overall_rows(&outcome.log.evals, split)
                .map(|r| (r.env_steps as f64, r.success_rate))
                .collect(),
        })
        .collect();
    let svg = plot::line_plot(
        &format!("{} seed {seed}", method_name(&config.policy)),
        "env steps",
        "success rate",
        &series,
    );
    fs::write(plots.join("success.svg"), svg).map_err(|e| AppError::io(plots.join("success.svg"), e))?;
    let dir = run.finish(Manifest {
        version: VERSION.into(),
        command: "train".into(),
        config_sha256: config.hash(),
        method: method_name(&config.policy),
        seed: Some(seed),
        env_steps: Some(outcome.env_steps),
        params_checksum: Some(format!("{:016x}", outcome.policy.params.checksum())),
        files: vec![],
    })?;
    Ok(TrainedRun {
        dir,
        seed,
        log: outcome.log,
        env_steps: outcome.env_steps,
    })
}

/// The aggregate row of each evaluation for `split`: the `all` row when
/// several families exist, the single family row otherwise.
fn overall_rows(evals: &[EvalSummary], split: Split) -> impl Iterator<Item = &EvalSummary> {
    let multi = evals.iter().any(|e| e.split == split && e.family.is_none());
    evals
        .iter()
        .filter(move |e| e.split == split && (e.family.is_none() || !multi))
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

pub fn cmd_train(config: &RunConfig, quiet: bool) -> AppResult<Vec<PathBuf>> {
    let root = results::resolve(&config.output_dir);
    let mut dirs = Vec::new();
    for &seed in &config.seeds {
        let run = train_run(&config.for_seed(seed), seed_dir(&root, seed), quiet)?;
        say(quiet, format!("wrote {}", run.dir.display()));
        dirs.push(run.dir);
    }
    Ok(dirs)
}

/// The run directory holding `checkpoint` (the nearest ancestor with a
/// manifest).
pub fn run_dir_of(checkpoint: &Path) -> AppResult<PathBuf> {
    checkpoint
        .ancestors()
        .skip(1)
        .find(|d| d.join(results::MANIFEST).is_file())
        .map(Path::to_path_buf)
        .ok_or_else(|| AppError::Config(format!("no run manifest above {}", checkpoint.display())))
}

/// Rebuild the policy a checkpoint belongs to. With `config_path`, the
/// architecture it declares must match the run's.
pub fn load_policy(checkpoint_path: &Path, config_path: Option<&Path>) -> AppResult<(Policy, RunConfig, Manifest)> {
    let run_dir = run_dir_of(checkpoint_path)?;
    let manifest = results::read_manifest(&run_dir)?;
    let snap_path = run_dir.join(CONFIG_SNAPSHOT);
    let snapshot = RunConfig::load(&snap_path, &[])?;
    if snapshot.hash() != manifest.config_sha256 {
        return Err(AppError::Runtime(format!(
            "{} does not match the hash in its manifest",
            snap_path.display()
        )));
    }
    let config = match config_path {
        Some(p) => {
            let given = RunConfig::load(p, &[])?;
            if given.policy != snapshot.policy {
                return Err(AppError::Config(format!(
                    "architecture mismatch: {} declares {:?}, checkpoint was trained as {} with {:?}",
                    p.display(),
                    given.policy,
                    manifest.method,
                    snapshot.policy
                )));
            }
            given
        }
        None => snapshot,
    };
    let mut policy = Policy::new(config.policy.clone(), STATE_DIM, ACTION_DIM, &mut rng::seeded(0))?;
    checkpoint::load_into(&mut policy.params, checkpoint_path)?;
    Ok((policy, config, manifest))
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub config: Option<&'a Path>,
    pub split: Split,
    pub episodes: Option<usize>,
    pub tasks: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub trajectories: bool,
}

fn default_out(prefix: &str, checkpoint: &Path, split: Split) -> PathBuf {
    let run = checkpoint
        .parent()
        .and_then(Path::parent)
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PathBuf::from(format!("{prefix}-{run}-{stem}-{}", split.name()))
}

pub fn cmd_eval(a: &EvalArgs<'_>) -> AppResult<PathBuf> {
    let (policy, config, manifest) = load_policy(a.checkpoint, a.config)?;
    let episodes = a.episodes.unwrap_or(config.train.eval_episodes);
    let n_tasks = a.tasks.unwrap_or(config.train.eval_tasks);
    if episodes == 0 || n_tasks == 0 {
        return Err(AppError::Config("--episodes and --tasks must be positive".into()));
    }
    let seed = a.seed.unwrap_or(config.train.seed);
    let dist = config.env.distribution()?;
    let ctx = config.train.context();
    let out = results::resolve(
        &a.out
            .clone()
            .unwrap_or_else(|| default_out("eval", a.checkpoint, a.split)),
    );
    let run = RunDir::create(out)?;
    let mut r = rng::seeded(seed ^ EVAL_SALT);
    let tasks = evaluation_tasks(&dist, a.split, n_tasks, &mut r)?;
    let mut adapt = Vec::with_capacity(tasks.len());
    let mut dump = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        let rollout = adapt_rollout(&policy, t, episodes, &ctx, &dist.params, false, &mut r)?;
        if a.trajectories {
            dump.extend(trajectory::lines(i, &rollout));
        }
        adapt.push(AdaptResult::from_rollout(rollout));
    }
    let per_task: Vec<Vec<String>> = adapt
        .iter()
        .enumerate()
        .map(|(i, res)| {
            vec![
                i.to_string(),
                a.split.name().into(),
                res.family.name().into(),
                res.successes.len().to_string(),
                u8::from(res.final_success()).to_string(),
                num(res.returns.last().copied().unwrap_or(0.0)),
                num(res.returns.first().copied().unwrap_or(0.0)),
            ]
        })
        .collect();
    write_csv(&run.file("eval_tasks.csv"), results::EVAL_TASKS_HEADER, &per_task)?;
    write_csv(
        &run.file("eval.csv"),
        results::EVAL_HEADER,
        &eval_rows(&adapt, a.split, episodes)?,
    )?;
    if a.trajectories {
        let p = run.file("trajectories.ndjson");
        let mut f = std::io::BufWriter::new(fs::File::create(&p).map_err(|e| AppError::io(&p, e))?);
        trajectory::write(&mut f, &dump)?;
        std::io::Write::flush(&mut f).map_err(|e| AppError::io(&p, e))?;
    }
    run.write(CONFIG_SNAPSHOT, &config.to_toml())?;
    run.finish(Manifest {
        version: VERSION.into(),
        command: format!("eval {}", a.checkpoint.display()),
        config_sha256: config.hash(),
        method: manifest.method,
        seed: Some(seed),
        env_steps: None,
        params_checksum: Some(format!("{:016x}", policy.params.checksum())),
        files: vec![],
    })
}

/// Aggregate rows with the standard error of final success across tasks.
pub fn eval_rows(results: &[AdaptResult], split: Split, episodes: usize) -> AppResult<Vec<Vec<String>>> {
    summarize(0, split, results)
        .iter()
        .map(|s| {
            let flags: Vec<f64> = results
                .iter()
                .filter(|r| s.family.is_none_or(|f| f == r.family))
                .map(|r| f64::from(u8::from(r.final_success())))
                .collect();
            let (_, se) = mean_and_standard_error(&flags)?;
            Ok(vec![
                split.name().into(),
                s.family.map_or("all", |f| f.name()).into(),
                s.tasks.to_string(),
                episodes.to_string(),
                num(s.success_rate),
                num(se),
                num(s.mean_return),
            ])
        })
        .collect()
}

pub struct EmbedArgs<'a> {
    pub checkpoint: &'a Path,
    pub split: Split,
    pub episodes: usize,
    pub tasks: usize,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn cmd_export_embeddings(a: &EmbedArgs<'_>) -> AppResult<PathBuf> {
    let (policy, config, manifest) = load_policy(a.checkpoint, None)?;
    if a.episodes == 0 || a.tasks == 0 {
        return Err(AppError::Config("--episodes and --tasks must be positive".into()));
    }
    let seed = a.seed.unwrap_or(config.train.seed);
    let dist = config.env.distribution()?;
    let out = results::resolve(
        &a.out
            .clone()
            .unwrap_or_else(|| default_out("embeddings", a.checkpoint, a.split)),
    );
    let run = RunDir::create(out)?;
    let mut r = rng::seeded(seed ^ EVAL_SALT);
    let recs = collect_embeddings(
        &policy,
        &dist,
        a.split,
        a.tasks,
        a.episodes,
        &config.train.context(),
        &mut r,
    )?;
    let dim = recs.first().map_or(0, |e| e.values.len());
    let rows: Vec<Vec<String>> = recs
        .iter()
        .map(|e| {
            let mut row = vec![e.family.name().to_string(), e.task.to_string(), e.episode.to_string()];
            row.extend(e.values.iter().map(|v| num(*v)));
            row
        })
        .collect();
    write_csv(&run.file("embeddings.csv"), &results::embeddings_header(dim), &rows)?;
    let labelled: Vec<(String, Vec<f64>)> = recs
        .iter()
        .map(|e| (e.family.name().to_string(), e.values.clone()))
        .collect();
    match project_embeddings(&labelled) {
        Ok(p) => {
            let rows: Vec<Vec<String>> = recs
                .iter()
                .zip(&p.coords)
                .map(|(e, c)| {
                    vec![
                        e.family.name().into(),
                        e.task.to_string(),
                        e.episode.to_string(),
                        num(c[0]),
                        num(c[1]),
                    ]
                })
                .collect();
            write_csv(&run.file("projection.csv"), results::PROJECTION_HEADER, &rows)?;
            let families: std::collections::BTreeSet<&str> = recs.iter().map(|e| e.family.name()).collect();
            let sep = vec![vec![
                recs.len().to_string(),
                families.len().to_string(),
                num(p.silhouette),
                num(p.explained[0]),
                num(p.explained[1]),
                p.degenerate.to_string(),
            ]];
            write_csv(&run.file("separation.csv"), results::SEPARATION_HEADER, &sep)?;
            let pts: Vec<(String, f64, f64)> = labelled
                .iter()
                .zip(&p.coords)
                .map(|((l, _), c)| (l.clone(), c[0], c[1]))
                .collect();
            let svg = plot::scatter_plot(
                &format!("{} embeddings, silhouette {:.3}", manifest.method, p.silhouette),
                "pc1",
                "pc2",
                &pts,
            );
            run.write("embeddings.svg", &svg)?;
        }
        Err(e) => eprintln!("projection skipped: {e}"),
    }
    run.write(CONFIG_SNAPSHOT, &config.to_toml())?;
    run.finish(Manifest {
        version: VERSION.into(),
        command: format!("export-embeddings {}", a.checkpoint.display()),
        config_sha256: config.hash(),
        method: manifest.method,
        seed: Some(seed),
        env_steps: None,
        params_checksum: Some(format!("{:016x}", policy.params.checksum())),
        files: vec![],
    })
}

pub struct BenchGrid {
    pub k: Vec<usize>,
    pub s: Vec<usize>,
    pub heads: Vec<usize>,
    pub l1: Vec<usize>,
    pub l2: Vec<usize>,
    pub d_model: usize,
    pub seed: u64,
}

/// Closed-form and counted attention scores for every grid cell.
pub fn bench_rows(grid: &BenchGrid) -> AppResult<Vec<Vec<String>>> {
    let axes = [&grid.k, &grid.s, &grid.heads, &grid.l1, &grid.l2];
    if axes.iter().any(|a| a.is_empty() || a.contains(&0)) || grid.d_model == 0 {
        return Err(AppError::Config(
            "bench-attention needs non-empty, positive grid values".into(),
        ));
    }
    let mut r = rng::seeded(grid.seed);
    let mut rows = Vec::new();
    for &k in &grid.k {
        for &s in &grid.s {
            for &h in &grid.heads {
                if grid.d_model % h != 0 {
                    return Err(AppError::Config(format!(
                        "d_model {} is not divisible by {h} heads",
                        grid.d_model
                    )));
                }
                for &l1 in &grid.l1 {
                    for &l2 in &grid.l2 {
                        let cost = count_attention(k, s, grid.d_model, h, l1, l2)?;
                        let measured = measure_attention(k, s, grid.d_model, h, l1, l2, &mut r)?;
                        rows.push(results::counts_row(&cost, &measured));
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn cmd_bench_attention(grid: &BenchGrid, out: &Path) -> AppResult<PathBuf> {
    let rows = bench_rows(grid)?;
    let run = RunDir::create(results::resolve(out))?;
    write_csv(&run.file("counts.csv"), results::COUNTS_HEADER, &rows)?;
    for r in &rows {
        println!(
            "K={:<3} S={:<3} H={} L1={} L2={}  hierarchical {:>10}  flat {:>12}  same-depth ratio {}  counted {}",
            r[0],
            r[1],
            r[2],
            r[3],
            r[4],
            r[7],
            r[9],
            r[11],
            if r[15] == "true" { "ok" } else { "MISMATCH" }
        );
    }
    if let Some(bad) = rows.iter().find(|r| r[15] != "true") {
        return Err(AppError::Runtime(format!(
            "instrumented count differs from closed form: {}",
            bad.join(",")
        )));
    }
    run.finish(Manifest {
        version: VERSION.into(),
        command: "bench-attention".into(),
        config_sha256: String::new(),
        method: "attention-count".into(),
        seed: Some(grid.seed),
        env_steps: None,
        params_checksum: None,
        files: vec![],
    })
}

/// Final evaluation rows of one run.
fn final_rows(log: &MetricsLog) -> Vec<&EvalSummary> {
    let last = log.evals.last().map_or(0, |e| e.env_steps);
    log.evals.iter().filter(|e| e.env_steps == last).collect()
}

fn overall_final(log: &MetricsLog, split: Split) -> f64 {
    let rows = final_rows(log);
    let multi = rows.iter().any(|e| e.split == split && e.family.is_none());
    rows.iter()
        .find(|e| e.split == split && (e.family.is_none() || !multi))
        .map_or(0.0, |e| e.success_rate)
}

/// Per-family final success averaged over seeds.
fn family_means(runs: &[TrainedRun], split: Split) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for e in final_rows(&run.log) {
            if let (true, Some(f)) = (e.split == split, e.family) {
                acc.entry(f.name().into()).or_default().push(e.success_rate);
            }
        }
    }
    acc.into_iter()
        .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
        .collect()
}

fn variant_label(c: &Cell) -> String {
    format!(
        "{} {} concat={} blocks={}-{}",
        c.kind.name(),
        sampling_name(c.sampling),
        c.state_concat,
        c.blocks[0],
        c.blocks[1]
    )
}

pub fn cmd_ablate(config: &RunConfig, quiet: bool) -> AppResult<PathBuf> {
    let grid = config
        .ablate
        .as_ref()
        .ok_or_else(|| AppError::Config("ablate needs an [ablate] section".into()))?;
    let cells = grid.cells(config)?;
    let root = results::resolve(&config.output_dir);
    let table_dir = root.join("summary");
    if table_dir.exists() {
        return Err(AppError::Config(format!("{} already exists", table_dir.display())));
    }
    let mut outcomes: Vec<(Cell, RunConfig, Vec<TrainedRun>)> = Vec::new();
    for cell in &cells {
        let cfg = cell.apply(config);
        let mut runs = Vec::new();
        for &seed in &config.seeds {
            say(quiet, format!("cell {} seed {seed}", cell.label()));
            runs.push(train_run(
                &cfg.for_seed(seed),
                seed_dir(&root.join(cell.label()), seed),
                true,
            )?);
        }
        outcomes.push((*cell, cfg, runs));
    }
    let run = RunDir::create(table_dir)?;

    let mut table = Vec::new();
    let mut curves = Vec::new();
    for (cell, cfg, runs) in &outcomes {
        let train: Vec<f64> = runs.iter().map(|r| overall_final(&r.log, Split::Train)).collect();
        let test: Vec<f64> = runs.iter().map(|r| overall_final(&r.log, Split::Test)).collect();
        let (tm, ts) = mean_and_standard_error(&train)?;
        let (vm, vs) = mean_and_standard_error(&test)?;
        table.push(vec![
            cell.label(),
            method_name(&cfg.policy),
            cell.kind.name().into(),
            cell.k.to_string(),
            cell.s.to_string(),
            sampling_name(cell.sampling).into(),
            cell.state_concat.to_string(),
            cell.blocks[0].to_string(),
            cell.blocks[1].to_string(),
            runs.len().to_string(),
            num(tm),
            num(ts),
            num(vm),
            num(vs),
        ]);
        for r in runs {
            for e in &r.log.evals {
                curves.push(vec![
                    cell.label(),
                    r.seed.to_string(),
                    e.env_steps.to_string(),
                    e.split.name().into(),
                    e.family.map_or("all", |f| f.name()).into(),
                    num(e.success_rate),
                ]);
            }
        }
    }
    write_csv(&run.file("ablation.csv"), results::ABLATION_HEADER, &table)?;
    write_csv(
        &run.file("curves.csv"),
        &["cell", "seed", "env_steps", "split", "task_family", "success_rate"],
        &curves,
    )?;
    write_csv(&run.file("ks_table.csv"), &ks_header(&cells), &ks_table(&cells, &table))?;

    let mut ranks = Vec::new();
    for split in [Split::Train, Split::Test] {
        let method_curves: Vec<MethodCurve> = outcomes
            .iter()
            .map(|(cell, cfg, runs)| MethodCurve {
                method: cell.label(),
                points: vec![CurvePoint {
                    env_steps: cfg.train.meta_steps,
                    success: family_means(runs, split),
                }],
            })
            .collect();
        for (cell, rank) in average_rank(&method_curves, 0)? {
            ranks.push(vec![
                cell,
                split.name().into(),
                config.train.meta_steps.to_string(),
                num(rank),
            ]);
        }
    }
    write_csv(&run.file("ranks.csv"), results::RANKS_HEADER, &ranks)?;

    let series: Vec<Series> = outcomes
        .iter()
        .filter_map(|(cell, _, runs)| {
            mean_curve(runs, Split::Test).map(|points| Series {
                label: cell.label(),
                points,
            })
        })
        .collect();
    run.write(
        "test_success.svg",
        &plot::line_plot("final-episode test success", "env steps", "success rate", &series),
    )?;
    run.write(CONFIG_SNAPSHOT, &config.to_toml())?;
    let methods: Vec<String> = outcomes.iter().map(|(_, c, _)| method_name(&c.policy)).collect();
    let methods_unique: Vec<&str> = distinct(methods.iter().map(String::as_str));
    run.finish(Manifest {
        version: VERSION.into(),
        command: "ablate".into(),
        config_sha256: config.hash(),
        method: methods_unique.join("+"),
        seed: None,
        env_steps: None,
        params_checksum: None,
        files: vec![],
    })
}

/// Seed-mean curve, defined when every seed has the same evaluation count.
fn mean_curve(runs: &[TrainedRun], split: Split) -> Option<Vec<(f64, f64)>> {
    let per: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .map(|r| {
            overall_rows(&r.log.evals, split)
                .map(|e| (e.env_steps as f64, e.success_rate))
                .collect()
        })
        .collect();
    let n = per.first()?.len();
    if per.iter().any(|p| p.len() != n) {
        return None;
    }
    let m = per.len() as f64;
    Some(
        (0..n)
            .map(|i| {
                let x = per.iter().map(|p| p[i].0).sum::<f64>() / m;
                let y = per.iter().map(|p| p[i].1).sum::<f64>() / m;
                (x, y)
            })
            .collect(),
    )
}

fn distinct<T: PartialEq + Copy>(xs: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for x in xs {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn ks_header(cells: &[Cell]) -> Vec<String> {
    let mut h = vec!["variant".to_string(), "k".to_string()];
    h.extend(
        distinct(cells.iter().map(|c| c.s))
            .into_iter()
            .map(|s| format!("s={s}")),
    );
    h
}

/// K rows by S columns of `mean ± se` final train success, one block per
/// remaining variant.
fn ks_table(cells: &[Cell], table: &[Vec<String>]) -> Vec<Vec<String>> {
    let ss = distinct(cells.iter().map(|c| c.s));
    let mut rows = Vec::new();
    for variant in distinct(cells.iter().map(|c| (c.kind, c.sampling, c.state_concat, c.blocks))) {
        let sample = cells
            .iter()
            .find(|c| (c.kind, c.sampling, c.state_concat, c.blocks) == variant)
            .expect("variant comes from the cells");
        for k in distinct(cells.iter().map(|c| c.k)) {
            let mut row = vec![variant_label(sample), k.to_string()];
            for &s in &ss {
                let label = Cell { k, s, ..*sample }.label();
                let cell = table.iter().find(|r| r[0] == label).map_or(String::new(), |r| {
                    let m: f64 = r[10].parse().unwrap_or(f64::NAN);
                    let e: f64 = r[11].parse().unwrap_or(f64::NAN);
                    format!("{m:.3} ± {e:.3}")
                });
                row.push(cell);
            }
            rows.push(row);
        }
    }
    rows
}
