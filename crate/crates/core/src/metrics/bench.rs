//! Benchmark runners over JSONL manifests. Image paths in a manifest are
//! resolved relative to the manifest's directory.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    correlation, judge_scores, pixel_metrics, CorrelationReport, JudgeClient, JudgeRequest,
    MetricsError,
};
use crate::agent::{run_episode, run_evaluation, EpisodeSpec, Sandbox};
use crate::par;
use crate::plot;
use crate::policy::{mix, Backend};
use crate::toolbox::{read_png, ImageBuffer};
use crate::trajectory::{EditHistory, Round, Think, ToolStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "EN")]
    En,
    #[serde(rename = "CN")]
    Cn,
}

impl Language {
    pub fn tag(self) -> &'static str {
        match self {
            Self::En => "EN",
            Self::Cn => "CN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub source: PathBuf,
    pub reference: PathBuf,
    pub instruction: String,
    pub lang: Language,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSample {
    pub id: String,
    pub source: PathBuf,
    pub edited: PathBuf,
    pub instruction: String,
    pub lang: Language,
    /// Human score on the self-evaluation scale.
    pub score: f64,
}

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, MetricsError> {
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| MetricsError::Schema {
        path: shown.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MetricsError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        out.push(
            serde_path_to_error::deserialize(de).map_err(|e| MetricsError::Schema {
                path: shown.clone(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    if out.is_empty() {
        return Err(MetricsError::Schema {
            path: shown,
            line: 0,
            message: "manifest has no samples".into(),
        });
    }
    Ok(out)
}

fn resolve(base: &Path, p: &Path, manifest: &Path, line: usize) -> Result<PathBuf, MetricsError> {
    let full = if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    };
    if !full.is_file() {
        return Err(MetricsError::Schema {
            path: manifest.display().to_string(),
            line,
            message: format!("image {} not found", full.display()),
        });
    }
    Ok(full)
}

fn check_ids<'a>(ids: impl Iterator<Item = &'a str>, manifest: &Path) -> Result<(), MetricsError> {
    let mut seen = std::collections::HashSet::new();
    for (i, id) in ids.enumerate() {
        if !seen.insert(id) {
            return Err(MetricsError::Schema {
                path: manifest.display().to_string(),
                line: i + 1,
                message: format!("duplicate id {id}"),
            });
        }
    }
    Ok(())
}

/// Parses an editing-benchmark manifest and checks that every image exists.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>, MetricsError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples: Vec<Sample> = load_jsonl(path)?;
    check_ids(samples.iter().map(|s| s.id.as_str()), path)?;
    for (i, s) in samples.iter_mut().enumerate() {
        s.source = resolve(base, &s.source, path, i + 1)?;
        s.reference = resolve(base, &s.reference, path, i + 1)?;
    }
    Ok(samples)
}

pub fn load_eval_manifest(path: &Path) -> Result<Vec<EvalSample>, MetricsError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples: Vec<EvalSample> = load_jsonl(path)?;
    check_ids(samples.iter().map(|s| s.id.as_str()), path)?;
    for (i, s) in samples.iter_mut().enumerate() {
        if !s.score.is_finite() {
            return Err(MetricsError::Schema {
                path: path.display().to_string(),
                line: i + 1,
                message: "score must be finite".into(),
            });
        }
        s.source = resolve(base, &s.source, path, i + 1)?;
        s.edited = resolve(base, &s.edited, path, i + 1)?;
    }
    Ok(samples)
}

fn read(p: &Path) -> Result<ImageBuffer, MetricsError> {
    read_png(p).map_err(|e| MetricsError::Io(format!("{}: {e}", p.display())))
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub max_rounds: u32,
    pub seed: u64,
    /// Upper bound on concurrent judge requests.
    pub judge_in_flight: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            max_rounds: 4,
            seed: 0,
            judge_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub id: String,
    pub lang: Language,
    pub rounds: usize,
    pub self_score: f64,
    pub l1: f64,
    pub l2: f64,
    pub sc: Option<f64>,
    pub pq: Option<f64>,
    pub o: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl BenchReport {
    /// Mean of every numeric column over `rows`; judge columns only when
    /// all rows have them.
    pub fn aggregate_of<'a>(
        rows: impl Iterator<Item = &'a BenchRow> + Clone,
        id: &str,
        lang: Language,
    ) -> BenchRow {
        let all = |f: fn(&BenchRow) -> Option<f64>| {
            let v: Option<Vec<f64>> = rows.clone().map(f).collect();
            v.and_then(|v| mean(v.into_iter()))
        };
        BenchRow {
            id: id.into(),
            lang,
            rounds: 0,
            self_score: mean(rows.clone().map(|r| r.self_score)).unwrap_or(f64::NAN),
            l1: mean(rows.clone().map(|r| r.l1)).unwrap_or(f64::NAN),
            l2: mean(rows.clone().map(|r| r.l2)).unwrap_or(f64::NAN),
            sc: all(|r| r.sc),
            pq: all(|r| r.pq),
            o: all(|r| r.o),
        }
    }

    pub fn aggregate(&self) -> BenchRow {
        let lang = self.rows.first().map_or(Language::En, |r| r.lang);
        Self::aggregate_of(self.rows.iter(), "mean", lang)
    }

    pub fn by_language(&self) -> Vec<BenchRow> {
        [Language::En, Language::Cn]
            .into_iter()
            .filter(|l| self.rows.iter().any(|r| r.lang == *l))
            .map(|l| {
                Self::aggregate_of(
                    self.rows.iter().filter(move |r| r.lang == l),
                    &format!("mean_{}", l.tag()),
                    l,
                )
            })
            .collect()
    }

    /// One row per sample followed by the overall mean row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut out = csv::Writer::from_writer(w);
        for r in self.rows.iter().chain([&self.aggregate()]) {
            out.serialize(r)
                .map_err(|e| MetricsError::Io(e.to_string()))?;
        }
        out.flush().map_err(|e| MetricsError::Io(e.to_string()))
    }

    pub fn summary(&self) -> String {
        let mut s = format!("samples: {}\n", self.rows.len());
        for r in std::iter::once(self.aggregate()).chain(self.by_language()) {
            s += &format!("{:8} L1x100 {:.4}  L2x1000 {:.4}", r.id, r.l1, r.l2);
            if let (Some(sc), Some(pq), Some(o)) = (r.sc, r.pq, r.o) {
                s += &format!("  SC {sc:.3}  PQ {pq:.3}  O {o:.3}");
            }
            s.push('\n');
        }
        s
    }

    pub fn svg(&self) -> String {
        let mut bars = Vec::new();
        for r in self.by_language() {
            let tag = r.lang.tag();
            bars.push((format!("L1 {tag}"), r.l1));
            bars.push((format!("L2 {tag}"), r.l2));
            if let Some(o) = r.o {
                bars.push((format!("O {tag}"), o));
            }
        }
        plot::bar_chart("editing benchmark", "value", &bars)
    }
}

/// Runs the editing agent on every sample in parallel, then scores each
/// final image against its reference and, with a judge, by SC/PQ/O.
pub fn bench_run(
    samples: &[Sample],
    sandbox: &Sandbox,
    backend: &dyn Backend,
    judge: Option<&dyn JudgeClient>,
    cfg: BenchConfig,
) -> Result<BenchReport, MetricsError> {
    let episodes = par::map_range(samples.len(), |i| -> Result<_, MetricsError> {
        let s = &samples[i];
        let source = read(&s.source)?;
        let reference = read(&s.reference)?;
        let source_ref = sandbox
            .store
            .put(&source)
            .map_err(|e| MetricsError::Io(e.to_string()))?;
        let ep = run_episode(
            backend,
            sandbox,
            EpisodeSpec {
                source: &source_ref,
                source_image: &source,
                query: &s.instruction,
                max_rounds: cfg.max_rounds,
                member: 0,
                seed: mix(cfg.seed, i as u64),
            },
        )
        .map_err(|e| MetricsError::Io(format!("sample {}: {e}", s.id)))?;
        let out = sandbox
            .store
            .get(ep.trajectory.final_image())
            .map_err(|e| MetricsError::Io(e.to_string()))?;
        let px = pixel_metrics(&out, &reference)?;
        Ok((source_ref, ep.trajectory, px))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut judged = Vec::with_capacity(samples.len());
    if let Some(judge) = judge {
        let idx: Vec<usize> = (0..samples.len()).collect();
        for chunk in idx.chunks(cfg.judge_in_flight.max(1)) {
            let scores = par::map(chunk, |&i| {
                judge_scores(
                    judge,
                    &JudgeRequest {
                        source: &episodes[i].0,
                        instruction: &samples[i].instruction,
                        edited: episodes[i].1.final_image(),
                    },
                )
            });
            for s in scores {
                judged.push(Some(s?));
            }
        }
    } else {
        judged.resize(samples.len(), None);
    }

    let rows = samples
        .iter()
        .zip(&episodes)
        .zip(judged)
        .map(|((s, (_, traj, px)), j)| BenchRow {
            id: s.id.clone(),
            lang: s.lang,
            rounds: traj.rounds().len(),
            self_score: traj.self_eval().score(),
            l1: px.l1_scaled,
            l2: px.l2_scaled,
            sc: j.map(|j| j.sc),
            pq: j.map(|j| j.pq),
            o: j.map(|j| j.o),
        })
        .collect();
    Ok(BenchReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBenchRow {
    pub id: String,
    pub lang: Language,
    pub human: f64,
    pub predicted: f64,
    pub format_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalBenchReport {
    pub rows: Vec<EvalBenchRow>,
    pub correlation: CorrelationReport,
}

impl EvalBenchReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)
                .map_err(|e| MetricsError::Io(e.to_string()))?;
        }
        out.flush().map_err(|e| MetricsError::Io(e.to_string()))
    }

    pub fn summary(&self) -> String {
        format!(
            "samples: {}\nSRCC {:.4}  PLCC {:.4}\n",
            self.correlation.n, self.correlation.srcc, self.correlation.plcc
        )
    }

    pub fn svg(&self) -> String {
        plot::bar_chart(
            "evaluation benchmark",
            "correlation",
            &[
                ("SRCC".into(), self.correlation.srcc),
                ("PLCC".into(), self.correlation.plcc),
            ],
        )
    }
}

/// Scores each edited image with the evaluator and correlates the
/// predictions with the human scores. The edit is presented as a single
/// round without tool calls.
pub fn bench_eval(
    samples: &[EvalSample],
    sandbox: &Sandbox,
    backend: &dyn Backend,
    seed: u64,
) -> Result<EvalBenchReport, MetricsError> {
    let store: Arc<_> = sandbox.store.clone();
    let rows = par::map_range(samples.len(), |i| -> Result<_, MetricsError> {
        let s = &samples[i];
        let io = |e: crate::toolbox::ToolError| MetricsError::Io(e.to_string());
        let source = store.put(&read(&s.source)?).map_err(io)?;
        let edited = store.put(&read(&s.edited)?).map_err(io)?;
        let history = EditHistory {
            rounds: vec![Round {
                think: Think::new("", 0),
                tools: ToolStep::new(vec![], 0),
                observation: edited,
            }],
            final_think: Think::new("", 0),
        };
        let (traj, _) = run_evaluation(
            backend,
            &source,
            &s.instruction,
            &history,
            0,
            mix(seed, i as u64),
        )
        .map_err(|e| MetricsError::Io(format!("sample {}: {e}", s.id)))?;
        Ok(EvalBenchRow {
            id: s.id.clone(),
            lang: s.lang,
            human: s.score,
            predicted: traj.prediction().score(),
            format_ok: traj.format_ok(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let predicted: Vec<f64> = rows.iter().map(|r| r.predicted).collect();
    let human: Vec<f64> = rows.iter().map(|r| r.human).collect();
    let correlation = correlation(&predicted, &human)?;
    Ok(EvalBenchReport { rows, correlation })
}
