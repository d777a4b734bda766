use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate_episode, learner_step, ActorState, LearnerState, LearnerStats, Snapshot, Unroll};
use crate::config::{RunConfig, RunMode};
use crate::env::TraceWriter;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, CoverageTracker, EpisodeCsv, EpisodeStats, Summary};
use crate::rng;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub learner: LearnerState,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Incompatible(format!("checkpoint {}: {e}", path.display())))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!("checkpoint version {}, expected {CHECKPOINT_VERSION}", ck.version)));
    }
    let want = ck.config.net_config();
    for (i, a) in ck.learner.agents.iter().enumerate() {
        if a.net.config() != &want {
            return Err(Error::Incompatible(format!("checkpoint agent {i} network does not match its config")));
        }
    }
    if ck.learner.agents.len() != ck.config.env.n_agents {
        return Err(Error::Incompatible(format!(
            "checkpoint has {} agents, config expects {}",
            ck.learner.agents.len(),
            ck.config.env.n_agents
        )));
    }
    Ok(ck)
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string(value)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCoverage {
    pub exploration: f64,
    pub local: Vec<f64>,
    pub combined: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub learner_steps: u64,
    pub env_steps: u64,
    pub training_episodes: u64,
    pub training_coverage: TrainingCoverage,
    pub final_eval: BTreeMap<String, Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: String,
    pub seeds: Vec<SeedSummary>,
    /// Aggregated over the final evaluation episodes of all seeds.
    pub final_eval: BTreeMap<String, Summary>,
    /// Mean and std across seeds of each seed's mean.
    pub across_seeds: BTreeMap<String, Summary>,
}

struct Sinks {
    train: EpisodeCsv<File>,
    learner: csv::Writer<File>,
    learner_header: bool,
    episodes: u64,
}

fn append(path: &Path) -> Result<(File, bool)> {
    let exists = path.exists() && fs::metadata(path)?.len() > 0;
    Ok((OpenOptions::new().create(true).append(true).open(path)?, exists))
}

fn episode_csv(path: &Path) -> Result<EpisodeCsv<File>> {
    let (f, exists) = append(path)?;
    Ok(if exists { EpisodeCsv::resume(f) } else { EpisodeCsv::new(f) })
}

impl Sinks {
    fn open(metrics: &Path) -> Result<Self> {
        let (lf, exists) = append(&metrics.join("learner.csv"))?;
        Ok(Self {
            train: episode_csv(&metrics.join("train_episodes.csv"))?,
            learner: csv::Writer::from_writer(lf),
            learner_header: exists,
            episodes: 0,
        })
    }

    fn train_episodes(&mut self, actor: usize, env_steps: u64, eps: Vec<EpisodeStats>) -> Result<()> {
        for e in eps {
            self.episodes += 1;
            let prefix = [("actor", actor.to_string()), ("env_steps", env_steps.to_string())];
            self.train.write(&prefix, &e)?;
        }
        Ok(())
    }

    fn learner(&mut self, s: &LearnerStats) -> Result<()> {
        let l = &s.update.losses;
        let cols: [(&str, f64); 22] = [
            ("step", s.step as f64),
            ("env_steps", s.env_steps as f64),
            ("loss_total", l.total),
            ("policy_env", l.policy_env),
            ("policy_comm", l.policy_comm),
            ("value_ext", l.value_ext),
            ("value_int", l.value_int),
            ("value_comm", l.value_comm),
            ("entropy_env", l.entropy_env),
            ("entropy_comm", l.entropy_comm),
            ("clip_frac_env", l.clip_frac_env),
            ("approx_kl_env", l.approx_kl_env),
            ("grad_norm", s.update.grad_norm),
            ("mean_env_reward", s.mean_env_reward),
            ("mean_int_raw", s.mean_int_raw),
            ("mean_int_reward", s.mean_int_reward),
            ("mean_pimaex", s.mean_pimaex),
            ("mean_comm_reward", s.mean_comm_reward),
            ("mean_pi_kl", s.mean_pi_kl),
            ("mean_abs_vi_int", s.mean_abs_vi_int),
            ("rnd_loss", s.rnd_loss),
            ("rnd_skipped", s.rnd_skipped as f64),
        ];
        if !self.learner_header {
            self.learner.write_record(cols.iter().map(|(k, _)| *k))?;
            self.learner_header = true;
        }
        self.learner.write_record(cols.iter().map(|(_, v)| format!("{v}")))?;
        self.learner.flush()?;
        Ok(())
    }
}

fn evaluator_row(cfg: &RunConfig, seed: u64, snap: &Snapshot) -> Result<EpisodeStats> {
    let r = rng::stream(seed, rng::Stream::Evaluator, 0, snap.version);
    Ok(evaluate_episode(&cfg.env, &snap.nets, r, None)?.0)
}

fn write_eval(csv: &mut EpisodeCsv<File>, step: u64, env_steps: u64, e: &EpisodeStats) -> Result<()> {
    csv.write(&[("learner_step", step.to_string()), ("env_steps", env_steps.to_string())], e)
}

fn checkpoint(cfg: &RunConfig, seed: u64, learner: &LearnerState, dir: &Path) -> Result<()> {
    let ck = Checkpoint { version: CHECKPOINT_VERSION, config: cfg.clone(), seed, learner: learner.clone() };
    save_json(&dir.join("latest.json"), &ck)
}

type ActorMsg = Result<(usize, Unroll, Vec<EpisodeStats>)>;

fn train_sync(
    cfg: &RunConfig,
    seed: u64,
    learner: &mut LearnerState,
    sinks: &mut Sinks,
    eval_csv: &mut EpisodeCsv<File>,
    ckpt_dir: &Path,
) -> Result<Vec<CoverageTracker>> {
    let mut actors: Vec<ActorState> =
        (0..cfg.runtime.num_actors).map(|i| ActorState::new(cfg, seed, i)).collect::<Result<_>>()?;
    let mut snap = learner.snapshot();
    let mut k = 0usize;
    while learner.env_steps < cfg.runtime.total_env_steps {
        let mut batch = Vec::with_capacity(cfg.ppo.batch_size);
        for _ in 0..cfg.ppo.batch_size {
            let n = actors.len();
            let a = &mut actors[k % n];
            batch.push(a.collect_unroll(&snap, cfg.ppo.unroll_length)?);
            let eps = a.take_finished();
            sinks.train_episodes(a.id, learner.env_steps, eps)?;
            k += 1;
        }
        let stats = learner_step(learner, &batch, cfg)?;
        sinks.learner(&stats)?;
        snap = learner.snapshot();
        if learner.step.is_multiple_of(cfg.runtime.checkpoint_interval as u64) {
            checkpoint(cfg, seed, learner, ckpt_dir)?;
            let e = evaluator_row(cfg, seed, &snap)?;
            write_eval(eval_csv, learner.step, learner.env_steps, &e)?;
        }
    }
    Ok(actors.iter().map(|a| a.total_coverage()).collect())
}

fn train_async(
    cfg: &RunConfig,
    seed: u64,
    learner: &mut LearnerState,
    sinks: &mut Sinks,
    eval_csv: EpisodeCsv<File>,
    ckpt_dir: &Path,
) -> Result<Vec<CoverageTracker>> {
    let published = RwLock::new(Arc::new(learner.snapshot()));
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::sync_channel::<ActorMsg>(cfg.runtime.queue_capacity);
    let (etx, erx) = mpsc::channel::<(u64, Arc<Snapshot>)>();

    std::thread::scope(|s| {
        let actors: Vec<_> = (0..cfg.runtime.num_actors)
            .map(|id| {
                let tx = tx.clone();
                let (published, stop) = (&published, &stop);
                s.spawn(move || -> Result<CoverageTracker> {
                    let mut a = ActorState::new(cfg, seed, id)?;
                    while !stop.load(Ordering::Relaxed) {
                        let snap = published.read().expect("snapshot lock").clone();
                        match a.collect_unroll(&snap, cfg.ppo.unroll_length) {
                            Ok(u) => {
                                if tx.send(Ok((id, u, a.take_finished()))).is_err() {
                                    break;
                                }
                            }
                            Err(e) => {
                                let _ = tx.send(Err(e));
                                break;
                            }
                        }
                    }
                    Ok(a.total_coverage())
                })
            })
            .collect();
        drop(tx);

        let evaluator = s.spawn(move || -> Result<()> {
            let mut csv = eval_csv;
            for (env_steps, snap) in erx {
                let e = evaluator_row(cfg, seed, &snap)?;
                write_eval(&mut csv, snap.version, env_steps, &e)?;
            }
            Ok(())
        });

        let mut run = || -> Result<()> {
            while learner.env_steps < cfg.runtime.total_env_steps {
                let mut batch = Vec::with_capacity(cfg.ppo.batch_size);
                while batch.len() < cfg.ppo.batch_size {
                    match rx.recv() {
                        Ok(Ok((id, u, eps))) => {
                            sinks.train_episodes(id, learner.env_steps, eps)?;
                            batch.push(u);
                        }
                        Ok(Err(e)) => return Err(e),
                        Err(_) => return Err(Error::Runtime("all actors exited".into())),
                    }
                }
                let stats = learner_step(learner, &batch, cfg)?;
                sinks.learner(&stats)?;
                let snap = Arc::new(learner.snapshot());
                *published.write().map_err(|_| Error::Runtime("snapshot publication failed".into()))? = snap.clone();
                if learner.step.is_multiple_of(cfg.runtime.checkpoint_interval as u64) {
                    checkpoint(cfg, seed, learner, ckpt_dir)?;
                    let _ = etx.send((learner.env_steps, snap));
                }
            }
            Ok(())
        };
        let result = run();
        stop.store(true, Ordering::Relaxed);
        drop(rx);
        drop(etx);
        let mut coverage = Vec::new();
        for h in actors {
            coverage.push(h.join().map_err(|_| Error::Runtime("actor thread panicked".into()))??);
        }
        evaluator.join().map_err(|_| Error::Runtime("evaluator thread panicked".into()))??;
        result.map(|_| coverage)
    })
}

fn final_evaluation(cfg: &RunConfig, seed: u64, learner: &LearnerState, seed_dir: &Path) -> Result<Vec<EpisodeStats>> {
    let snap = learner.snapshot();
    let mut csv = EpisodeCsv::new(File::create(seed_dir.join("metrics").join("final_eval.csv"))?);
    let mut out = Vec::with_capacity(cfg.runtime.eval_episodes);
    let traces = cfg.output_dir.join("traces");
    if cfg.runtime.trace_eval {
        fs::create_dir_all(&traces)?;
    }
    for e in 0..cfg.runtime.eval_episodes {
        let r = rng::stream(seed, rng::Stream::Evaluator, 1, e as u64);
        let mut tw = if cfg.runtime.trace_eval {
            Some(TraceWriter::new(File::create(traces.join(format!("seed_{seed}_episode_{e}.jsonl")))?))
        } else {
            None
        };
        let (stats, _) = evaluate_episode(&cfg.env, &snap.nets, r, tw.as_mut())?;
        csv.write(&[("seed", seed.to_string()), ("episode", e.to_string())], &stats)?;
        out.push(stats);
    }
    Ok(out)
}

/// Train one seed; resumes from `checkpoints/latest.json` and skips seeds
/// whose `summary.json` exists.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedSummary> {
    let seed_dir = cfg.output_dir.join(format!("seed_{seed}"));
    let summary_path = seed_dir.join("summary.json");
    if summary_path.exists() {
        return Ok(serde_json::from_str(&fs::read_to_string(&summary_path)?)?);
    }
    let ckpt_dir = seed_dir.join("checkpoints");
    let metrics = seed_dir.join("metrics");
    fs::create_dir_all(&ckpt_dir)?;
    fs::create_dir_all(&metrics)?;
    let started = Instant::now();

    let latest = ckpt_dir.join("latest.json");
    let mut learner = if latest.exists() {
        let ck = load_checkpoint(&latest)?;
        if ck.config.net_config() != cfg.net_config() || ck.config.env != cfg.env {
            return Err(Error::Incompatible(format!("{} was written by a different configuration", latest.display())));
        }
        ck.learner
    } else {
        LearnerState::init(cfg, seed)?
    };

    let mut sinks = Sinks::open(&metrics)?;
    let eval_csv = episode_csv(&metrics.join("eval.csv"))?;
    let coverage = match cfg.runtime.mode {
        RunMode::Sync => {
            let mut eval_csv = eval_csv;
            train_sync(cfg, seed, &mut learner, &mut sinks, &mut eval_csv, &ckpt_dir)?
        }
        RunMode::Async => train_async(cfg, seed, &mut learner, &mut sinks, eval_csv, &ckpt_dir)?,
    };
    checkpoint(cfg, seed, &learner, &ckpt_dir)?;
    fs::copy(&latest, ckpt_dir.join("final.json"))?;

    let mut total = CoverageTracker::new(&cfg.env);
    coverage.iter().for_each(|c| total.merge(c));
    let final_eps = final_evaluation(cfg, seed, &learner, &seed_dir)?;
    let summary = SeedSummary {
        seed,
        learner_steps: learner.step,
        env_steps: learner.env_steps,
        training_episodes: sinks.episodes,
        training_coverage: TrainingCoverage {
            exploration: total.exploration_coverage(),
            local: total.local_coverage(),
            combined: total.combined_coverage(),
        },
        final_eval: aggregate(&final_eps),
    };
    let timing = serde_json::json!({ "wall_seconds": started.elapsed().as_secs_f64() });
    fs::write(seed_dir.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Train every configured seed and write `summary.json` in the run directory.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let cfg_path = cfg.output_dir.join("config.json");
    if cfg_path.exists() {
        let prev = RunConfig::load(&cfg_path)?;
        if &prev != cfg {
            return Err(Error::Incompatible(format!(
                "{} holds a different configuration; choose another output directory",
                cfg_path.display()
            )));
        }
    } else {
        cfg.save(&cfg_path)?;
    }
    let mut seeds = Vec::new();
    for &seed in &cfg.runtime.seeds {
        seeds.push(run_seed(cfg, seed)?);
    }
    let mut all = Vec::new();
    for s in &cfg.runtime.seeds {
        let path = cfg.output_dir.join(format!("seed_{s}")).join("metrics").join("final_eval.csv");
        all.extend(read_episode_measures(&path)?);
    }
    let final_eval = summarize_measure_rows(&all);
    let mut across: BTreeMap<String, crate::metrics::Welford> = BTreeMap::new();
    for s in &seeds {
        for (k, v) in &s.final_eval {
            across.entry(k.clone()).or_default().push(v.mean);
        }
    }
    let summary = RunSummary {
        preset: cfg.preset.clone(),
        seeds,
        final_eval,
        across_seeds: across.into_iter().map(|(k, w)| (k, w.summary())).collect(),
    };
    let mut f = File::create(cfg.output_dir.join("summary.json"))?;
    f.write_all(serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Rows of an episode CSV as name/value maps; blank cells are dropped.
pub fn read_episode_measures(path: &Path) -> Result<Vec<BTreeMap<String, f64>>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut m = BTreeMap::new();
        for (h, v) in headers.iter().zip(rec.iter()) {
            if let Ok(x) = v.parse::<f64>() {
                m.insert(h.to_string(), x);
            }
        }
        rows.push(m);
    }
    Ok(rows)
}

pub(crate) fn summarize_measure_rows(rows: &[BTreeMap<String, f64>]) -> BTreeMap<String, Summary> {
    let mut acc: BTreeMap<String, crate::metrics::Welford> = BTreeMap::new();
    for r in rows {
        for (k, v) in r {
            acc.entry(k.clone()).or_default().push(*v);
        }
    }
    acc.into_iter().map(|(k, w)| (k, w.summary())).collect()
}

/// Greedy evaluation of a checkpoint; one CSV row per episode.
pub fn evaluate_checkpoint(path: &Path, episodes: usize, out_csv: &Path) -> Result<(Vec<EpisodeStats>, BTreeMap<String, Summary>)> {
    let ck = load_checkpoint(path)?;
    let snap = ck.learner.snapshot();
    if let Some(dir) = out_csv.parent() {
        fs::create_dir_all(dir)?;
    }
    let (f, exists) = append(out_csv)?;
    let mut csv = if exists { EpisodeCsv::resume(f) } else { EpisodeCsv::new(f) };
    let mut eps = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let r = rng::stream(ck.seed, rng::Stream::Evaluator, 2, e as u64);
        let (stats, _) = evaluate_episode(&ck.config.env, &snap.nets, r, None)?;
        csv.write(&[("seed", ck.seed.to_string()), ("episode", e.to_string())], &stats)?;
        eps.push(stats);
    }
    let summary = aggregate(&eps);
    Ok((eps, summary))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny(preset: &str, dir: &Path, mode: RunMode) -> RunConfig {
        let mut c = RunConfig::preset(preset).unwrap();
        c.env.episode_len = 30;
        c.env.explores_per_level = 5;
        c.ppo.batch_size = 4;
        c.ppo.unroll_length = 16;
        c.ppo.num_minibatches = 2;
        c.ppo.num_epochs = 2;
        c.rnd.warmup_steps = 200;
        c.runtime.num_actors = 2;
        c.runtime.seeds = vec![7];
        c.runtime.total_env_steps = 4 * 16 * 3;
        c.runtime.eval_episodes = 2;
        c.runtime.checkpoint_interval = 2;
        c.runtime.mode = mode;
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn sync_runs_are_reproducible_and_complete() {
        let d = tempfile::tempdir().unwrap();
        let a = tiny("pimaex-beta", &d.path().join("a"), RunMode::Sync);
        let b = tiny("pimaex-beta", &d.path().join("b"), RunMode::Sync);
        let sa = run_experiment(&a).unwrap();
        let sb = run_experiment(&b).unwrap();
        assert_eq!(sa.seeds[0].learner_steps, 3);
        assert_eq!(sa.final_eval, sb.final_eval);
        let m = |c: &RunConfig, f: &str| fs::read_to_string(c.output_dir.join("seed_7/metrics").join(f)).unwrap();
        assert_eq!(m(&a, "learner.csv"), m(&b, "learner.csv"));
        assert_eq!(m(&a, "train_episodes.csv"), m(&b, "train_episodes.csv"));
        assert_eq!(m(&a, "eval.csv").lines().count(), 2);
        assert_eq!(m(&a, "final_eval.csv").lines().count(), 3);
        let fa = load_checkpoint(&a.output_dir.join("seed_7/checkpoints/final.json")).unwrap();
        let fb = load_checkpoint(&b.output_dir.join("seed_7/checkpoints/final.json")).unwrap();
        assert_eq!(fa.learner, fb.learner);
        // a finished seed is skipped
        let again = run_experiment(&a).unwrap();
        assert_eq!(again.seeds, sa.seeds);
    }

    #[test]
    fn async_run_completes() {
        let d = tempfile::tempdir().unwrap();
        let c = tiny("ppo-rnd", d.path(), RunMode::Async);
        let s = run_experiment(&c).unwrap();
        assert!(s.seeds[0].env_steps >= c.runtime.total_env_steps);
        assert!(s.final_eval.contains_key("joint_return"));
    }

    #[test]
    fn resumes_from_latest_checkpoint() {
        let d = tempfile::tempdir().unwrap();
        let mut c = tiny("ppo", d.path(), RunMode::Sync);
        c.runtime.total_env_steps = 4 * 16 * 2;
        run_seed(&c, 7).unwrap();
        fs::remove_file(d.path().join("seed_7/summary.json")).unwrap();
        c.runtime.total_env_steps = 4 * 16 * 4;
        let s = run_seed(&c, 7).unwrap();
        assert_eq!(s.learner_steps, 4);
    }

    #[test]
    fn evaluate_checkpoint_is_deterministic() {
        let d = tempfile::tempdir().unwrap();
        let c = tiny("ppo", d.path(), RunMode::Sync);
        run_seed(&c, 7).unwrap();
        let ck = d.path().join("seed_7/checkpoints/final.json");
        let (a, _) = evaluate_checkpoint(&ck, 3, &d.path().join("e1.csv")).unwrap();
        let (b, _) = evaluate_checkpoint(&ck, 3, &d.path().join("e2.csv")).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            fs::read_to_string(d.path().join("e1.csv")).unwrap(),
            fs::read_to_string(d.path().join("e2.csv")).unwrap()
        );
        assert!(matches!(load_checkpoint(&d.path().join("missing.json")), Err(Error::MissingFile(_))));
    }
}
