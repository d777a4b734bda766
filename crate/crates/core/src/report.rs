//! Comparison figures and tables over completed run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::coord::Shift;
use plotters::prelude::*;
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{summarize, Summary};
use crate::runtime::SeedSummary;

type Row = BTreeMap<String, f64>;

/// Number of env-step bins for training curves.
const TRAIN_BINS: usize = 25;

pub const FIGURES: [&str; 7] = [
    "return_over_training",
    "eval_return",
    "final_coverage",
    "eval_coverage",
    "action_pct",
    "simultaneous_actions",
    "yield_level",
];

struct SeedData {
    summary: SeedSummary,
    train: Vec<Row>,
    eval: Vec<Row>,
    final_eval: Vec<Row>,
}

pub struct RunData {
    pub name: String,
    pub dir: PathBuf,
    pub config: RunConfig,
    seeds: Vec<SeedData>,
}

fn read_rows(path: &Path) -> Result<Vec<Row>> {
    crate::runtime::read_episode_measures(path)
}

pub fn load_run(dir: &Path) -> Result<RunData> {
    let config = RunConfig::load(&dir.join("config.json"))?;
    let mut seeds = Vec::new();
    for seed in &config.runtime.seeds {
        let sd = dir.join(format!("seed_{seed}"));
        let sp = sd.join("summary.json");
        let text = fs::read_to_string(&sp).map_err(|_| Error::MissingFile(sp.clone()))?;
        let m = sd.join("metrics");
        seeds.push(SeedData {
            summary: serde_json::from_str(&text)?,
            train: read_rows(&m.join("train_episodes.csv"))?,
            eval: read_rows(&m.join("eval.csv"))?,
            final_eval: read_rows(&m.join("final_eval.csv"))?,
        });
    }
    let name = if config.preset == "custom" {
        dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
    } else {
        config.preset.clone()
    };
    Ok(RunData { name, dir: dir.to_path_buf(), config, seeds })
}

fn flat(v: &Value, prefix: &str, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => m.iter().for_each(|(k, c)| flat(c, &format!("{prefix}.{k}"), out)),
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Lines `key: a != b` for every env parameter that differs.
pub fn env_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flat(&serde_json::to_value(&a.env).expect("env serializes"), "env", &mut fa);
    flat(&serde_json::to_value(&b.env).expect("env serializes"), "env", &mut fb);
    fa.iter()
        .filter(|(k, v)| fb.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: {v} != {}", fb.get(k).map(String::as_str).unwrap_or("-")))
        .collect()
}

fn pooled(rows: impl Iterator<Item = Row>, key: &str) -> Summary {
    let v: Vec<f64> = rows.filter_map(|r| r.get(key).copied()).collect();
    summarize(v)
}

impl RunData {
    fn final_rows(&self) -> impl Iterator<Item = Row> + '_ {
        self.seeds.iter().flat_map(|s| s.final_eval.iter().cloned())
    }

    fn final_summary(&self, key: &str) -> Summary {
        pooled(self.final_rows(), key)
    }

    fn n_agents(&self) -> usize {
        self.config.env.n_agents
    }

    fn across_seeds(&self, f: impl Fn(&SeedSummary) -> f64) -> Summary {
        summarize(self.seeds.iter().map(|s| f(&s.summary)))
    }

    /// Mean/std across seeds of binned training joint return.
    fn train_curve(&self) -> Vec<(f64, Summary)> {
        let total = self.config.runtime.total_env_steps.max(1) as f64;
        let width = total / TRAIN_BINS as f64;
        let mut bins: Vec<Vec<f64>> = vec![Vec::new(); TRAIN_BINS];
        for s in &self.seeds {
            let mut per: Vec<Vec<f64>> = vec![Vec::new(); TRAIN_BINS];
            for r in &s.train {
                if let (Some(x), Some(y)) = (r.get("env_steps"), r.get("joint_return")) {
                    per[((x / width) as usize).min(TRAIN_BINS - 1)].push(*y);
                }
            }
            for (b, v) in per.into_iter().enumerate() {
                if !v.is_empty() {
                    bins[b].push(v.iter().sum::<f64>() / v.len() as f64);
                }
            }
        }
        bins.into_iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(b, v)| ((b as f64 + 0.5) * width, summarize(v)))
            .collect()
    }

    /// Mean/std across seeds of evaluator joint return per learner step.
    fn eval_curve(&self) -> Vec<(f64, Summary)> {
        let mut by: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for s in &self.seeds {
            for r in &s.eval {
                if let (Some(k), Some(x), Some(y)) = (r.get("learner_step"), r.get("env_steps"), r.get("joint_return")) {
                    let e = by.entry(*k as u64).or_default();
                    e.0.push(*x);
                    e.1.push(*y);
                }
            }
        }
        by.into_values()
            .map(|(x, y)| (x.iter().sum::<f64>() / x.len() as f64, summarize(y)))
            .collect()
    }
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err<E: std::error::Error + Send + Sync>(e: DrawingAreaErrorKind<E>) -> Error {
    Error::Runtime(format!("plot: {e}"))
}

type Area<'a> = DrawingArea<SVGBackend<'a>, Shift>;

fn bands(area: &Area, title: &str, xlabel: &str, series: &[(String, Vec<(f64, Summary)>)]) -> Result<()> {
    let pts = series.iter().flat_map(|(_, v)| v.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, s) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(s.mean - s.std);
        y1 = y1.max(s.mean + s.std);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(x0..x1.max(x0 + 1e-9), (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(xlabel).y_desc("joint return").draw().map_err(plot_err)?;
    for (i, (name, v)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let mut poly: Vec<(f64, f64)> = v.iter().map(|(x, s)| (*x, s.mean + s.std)).collect();
        poly.extend(v.iter().rev().map(|(x, s)| (*x, s.mean - s.std)));
        chart.draw_series(std::iter::once(Polygon::new(poly, c.mix(0.2)))).map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(v.iter().map(|(x, s)| (*x, s.mean)), c.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw().map_err(plot_err)?;
    Ok(())
}

/// Grouped bars with ±std whiskers; `groups[g]` holds one summary per run.
fn bars(area: &Area, title: &str, labels: &[String], runs: &[String], groups: &[Vec<Summary>]) -> Result<()> {
    let k = runs.len().max(1);
    let ymax = groups.iter().flatten().map(|s| s.mean + s.std).fold(0.0f64, f64::max);
    let ymin = groups.iter().flatten().map(|s| s.mean - s.std).fold(0.0f64, f64::min);
    let span = (ymax - ymin).max(1e-6);
    let ng = labels.len().max(1);
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..ng as f64, (ymin - 0.05 * span)..(ymax + 0.1 * span))
        .map_err(plot_err)?;
    let names = labels.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(ng * 2 + 1)
        .x_label_formatter(&|x| {
            let g = x.floor() as usize;
            if (x - g as f64 - 0.5).abs() < 1e-6 && g < names.len() {
                names[g].clone()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(plot_err)?;
    let w = 0.8 / k as f64;
    for (r, name) in runs.iter().enumerate() {
        let c = PALETTE[r % PALETTE.len()];
        let rects = groups.iter().enumerate().map(move |(g, v)| {
            let x = g as f64 + 0.1 + r as f64 * w;
            Rectangle::new([(x, 0.0), (x + w * 0.9, v[r].mean)], c.filled())
        });
        chart
            .draw_series(rects)
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], c.filled()));
        let whiskers = groups.iter().enumerate().map(move |(g, v)| {
            let x = g as f64 + 0.1 + r as f64 * w + w * 0.45;
            PathElement::new(vec![(x, v[r].mean - v[r].std), (x, v[r].mean + v[r].std)], BLACK)
        });
        chart.draw_series(whiskers).map_err(plot_err)?;
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw().map_err(plot_err)?;
    Ok(())
}

/// A figure: two panels of grouped bars, each `(title, labels, per-label summaries per run)`.
type Panel = (String, Vec<String>, Vec<Vec<Summary>>);

struct Table {
    rows: Vec<[String; 6]>,
}

impl Table {
    fn push(&mut self, figure: &str, panel: &str, label: &str, run: &str, s: Summary) {
        self.rows.push([
            figure.into(),
            panel.into(),
            label.into(),
            run.into(),
            format!("{}", s.mean),
            format!("{}", s.std),
        ]);
    }

    fn write(&self, path: &Path, header: [&str; 6]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn bar_figure(path: &Path, name: &str, runs: &[String], panels: &[Panel]) -> Result<()> {
    let mut t = Table { rows: Vec::new() };
    for (title, labels, groups) in panels {
        for (l, g) in labels.iter().zip(groups) {
            for (r, s) in runs.iter().zip(g) {
                t.push(name, title, l, r, *s);
            }
        }
    }
    t.write(&path.with_extension("csv"), ["figure", "panel", "label", "run", "mean", "std"])?;
    let root = SVGBackend::new(path, (1200, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let areas = root.split_evenly((1, panels.len()));
    for (a, (title, labels, groups)) in areas.iter().zip(panels) {
        bars(a, title, labels, runs, groups)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

fn per_agent(runs: &[RunData], n: usize, f: impl Fn(&RunData, usize) -> Summary) -> (Vec<String>, Vec<Vec<Summary>>) {
    let labels = (0..n).map(|i| format!("agent {}", i + 1)).collect();
    let groups = (0..n).map(|i| runs.iter().map(|r| f(r, i)).collect()).collect();
    (labels, groups)
}

/// Render every figure and `comparison.csv` into `out`; returns the written files.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if dirs.is_empty() {
        return Err(Error::Usage("report needs at least one run directory".into()));
    }
    let runs: Vec<RunData> = dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    for r in &runs[1..] {
        let d = env_diff(&runs[0].config, &r.config);
        if !d.is_empty() {
            return Err(Error::Incompatible(format!(
                "runs {} and {} use different environments:\n  {}",
                runs[0].dir.display(),
                r.dir.display(),
                d.join("\n  ")
            )));
        }
    }
    fs::create_dir_all(out)?;
    let names: Vec<String> = runs.iter().map(|r| r.name.clone()).collect();
    let n = runs[0].n_agents();
    let p = runs[0].config.env.clone();
    let mut files = Vec::new();
    let fig = |name: &str| out.join(format!("{name}.svg"));

    // training curves
    {
        let path = fig(FIGURES[0]);
        let train: Vec<_> = runs.iter().map(|r| (r.name.clone(), r.train_curve())).collect();
        let eval: Vec<_> = runs.iter().map(|r| (r.name.clone(), r.eval_curve())).collect();
        let mut w = csv::Writer::from_path(path.with_extension("csv"))?;
        w.write_record(["source", "run", "env_steps", "mean", "std"])?;
        for (src, set) in [("actor", &train), ("evaluator", &eval)] {
            for (name, v) in set {
                for (x, s) in v {
                    w.write_record([src, name, &format!("{x}"), &format!("{}", s.mean), &format!("{}", s.std)])?;
                }
            }
        }
        w.flush()?;
        {
            let root = SVGBackend::new(&path, (1200, 450)).into_drawing_area();
            root.fill(&WHITE).map_err(plot_err)?;
            let (l, r) = root.split_horizontally(600);
            bands(&l, "Actor episode return", "env steps", &train)?;
            bands(&r, "Evaluator episode return", "env steps", &eval)?;
            root.present().map_err(plot_err)?;
        }
        files.push(path);
    }

    let one = |title: &str, label: &str, f: &dyn Fn(&RunData) -> Summary| -> Panel {
        (title.into(), vec![label.into()], vec![runs.iter().map(f).collect()])
    };
    let agents = |title: &str, f: &dyn Fn(&RunData, usize) -> Summary| -> Panel {
        let (l, g) = per_agent(&runs, n, f);
        (title.into(), l, g)
    };

    let figures: Vec<(&str, Vec<Panel>)> = vec![
        (
            FIGURES[1],
            vec![
                one("Joint return", "joint", &|r| r.final_summary("joint_return")),
                agents("Per-agent return", &|r, i| r.final_summary(&format!("return_{i}"))),
            ],
        ),
        (
            FIGURES[2],
            vec![
                one("Final exploration coverage", "exploration", &|r| r.across_seeds(|s| s.training_coverage.exploration)),
                agents("Final agent state coverage", &|r, i| r.across_seeds(|s| s.training_coverage.combined[i])),
            ],
        ),
        (
            FIGURES[3],
            vec![
                one("Episode exploration coverage", "exploration", &|r| r.final_summary("exploration_coverage")),
                agents("Episode local coverage", &|r, i| r.final_summary(&format!("local_coverage_{i}"))),
            ],
        ),
        (
            FIGURES[4],
            vec![
                agents("Consume actions (%)", &|r, i| r.final_summary(&format!("pct_consume_{i}"))),
                agents("Explore actions (%)", &|r, i| r.final_summary(&format!("pct_explore_{i}"))),
            ],
        ),
        (FIGURES[5], {
            let ks: Vec<String> = (1..=n).map(|k| k.to_string()).collect();
            let g = |key: &'static str| -> Vec<Vec<Summary>> {
                (1..=n).map(|k| runs.iter().map(|r| r.final_summary(&format!("{key}_{k}"))).collect()).collect()
            };
            vec![
                ("Simultaneous consumers".into(), ks.clone(), g("sim_consume")),
                ("Simultaneous explorers".into(), ks, g("sim_explore")),
            ]
        }),
        (FIGURES[6], {
            let levels: Vec<u32> = (p.yield_init + 1..=p.yield_max).collect();
            vec![
                one("Final yield level", "yield", &|r| r.final_summary("final_yield")),
                (
                    "Steps to reach yield level".into(),
                    levels.iter().map(|l| l.to_string()).collect(),
                    levels
                        .iter()
                        .map(|l| {
                            let key = format!("steps_to_level_{}", l - p.yield_init);
                            runs.iter().map(|r| r.final_summary(&key)).collect()
                        })
                        .collect(),
                ),
            ]
        }),
    ];
    for (name, panels) in &figures {
        let path = fig(name);
        bar_figure(&path, name, &names, panels)?;
        files.push(path);
    }

    let path = out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["run", "measure", "mean", "std", "count", "seed_mean_std"])?;
    for r in &runs {
        let mut keys: Vec<String> = r.final_rows().flat_map(|row| row.into_keys()).collect();
        keys.sort();
        keys.dedup();
        for k in keys.iter().filter(|k| !matches!(k.as_str(), "seed" | "episode")) {
            let s = r.final_summary(k);
            let per_seed = summarize(
                r.seeds
                    .iter()
                    .map(|sd| pooled(sd.final_eval.iter().cloned(), k))
                    .filter(|s| s.count > 0)
                    .map(|s| s.mean),
            );
            w.write_record([&r.name, k, &format!("{}", s.mean), &format!("{}", s.std), &s.count.to_string(), &format!("{}", per_seed.std)])?;
        }
    }
    w.flush()?;
    files.push(path);
    Ok(files)
}
