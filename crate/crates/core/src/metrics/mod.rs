//! Evaluation metrics: pixel distances, rank and linear correlation, judge
//! scores and pairwise-preference rates. [`bench`] runs whole benchmarks.

pub mod bench;

use serde::{Deserialize, Serialize};

use crate::toolbox::{ImageBuffer, ImageRef, ImageStore};
use crate::wire::{ChatRequest, Message, Part, Speaker, WireClient};

pub use bench::{
    bench_eval, bench_run, load_eval_manifest, load_manifest, BenchConfig, BenchReport, BenchRow,
    EvalBenchReport, EvalBenchRow, EvalSample, Language, Sample,
};

pub const JUDGE_PROMPT: &str = include_str!("../../assets/prompts/judge.txt");

/// Largest judge grade.
pub const MAX_JUDGE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("correlation needs at least 2 paired finite samples, got {0}")]
    TooFewSamples(usize),
    #[error("vectors have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("input has zero variance")]
    DegenerateInput,
    #[error("judge client unavailable: {0}")]
    ClientUnavailable(String),
    #[error("malformed judge reply: {0}")]
    MalformedJudgeReply(String),
    #[error("no outcomes")]
    EmptyInput,
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetricReport {
    /// Mean absolute difference on `[0, 1]` values, times 100.
    pub l1_scaled: f64,
    /// Mean squared difference on `[0, 1]` values, times 1000.
    pub l2_scaled: f64,
}

/// L1/L2 on 8-bit decoded values. Sums are exact integers, so the result
/// is symmetric and zero iff the quantized images are equal.
pub fn pixel_metrics(a: &ImageBuffer, b: &ImageBuffer) -> Result<PixelMetricReport, MetricsError> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(MetricsError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    let (qa, qb) = (a.to_rgb8(), b.to_rgb8());
    let (mut abs, mut sq) = (0u64, 0u64);
    for (&x, &y) in qa.iter().zip(&qb) {
        let d = u64::from(x.abs_diff(y));
        abs += d;
        sq += d * d;
    }
    let n = qa.len().max(1) as f64;
    Ok(PixelMetricReport {
        l1_scaled: (100 * abs) as f64 / (255.0 * n),
        l2_scaled: (1000 * sq) as f64 / (65025.0 * n),
    })
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricsError::TooFewSamples(x.len()));
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::DegenerateInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; ties share the mean of their positions.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    pearson(x, y)
}

pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub srcc: f64,
    pub plcc: f64,
    pub n: usize,
}

pub fn correlation(
    predicted: &[f64],
    reference: &[f64],
) -> Result<CorrelationReport, MetricsError> {
    Ok(CorrelationReport {
        srcc: srcc(predicted, reference)?,
        plcc: plcc(predicted, reference)?,
        n: predicted.len(),
    })
}

/// Semantic-consistency and perceptual-quality grades with their geometric mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub sc: f64,
    pub pq: f64,
    pub o: f64,
}

impl JudgeScores {
    pub fn new(sc: f64, pq: f64) -> Result<Self, MetricsError> {
        for (name, v) in [("sc", sc), ("pq", pq)] {
            if !(0.0..=MAX_JUDGE).contains(&v) {
                return Err(MetricsError::MalformedJudgeReply(format!(
                    "{name} = {v} outside [0, {MAX_JUDGE}]"
                )));
            }
        }
        // clamping only absorbs rounding; the bounds hold mathematically
        let o = (sc * pq).sqrt().clamp(sc.min(pq), sc.max(pq));
        Ok(Self { sc, pq, o })
    }
}

/// Accepts a JSON object `{"sc": .., "pq": ..}` anywhere in the reply, or
/// `sc: 7` / `pq: 8` labels on separate lines.
pub fn parse_judge_reply(text: &str) -> Result<JudgeScores, MetricsError> {
    #[derive(Deserialize)]
    struct Reply {
        sc: f64,
        pq: f64,
    }
    if let (Some(a), Some(b)) = (text.find('{'), text.rfind('}')) {
        if a < b {
            if let Ok(r) = serde_json::from_str::<Reply>(&text[a..=b]) {
                return JudgeScores::new(r.sc, r.pq);
            }
        }
    }
    let label = |name: &str| {
        text.lines().find_map(|l| {
            let l = l.trim().to_ascii_lowercase();
            let rest = l
                .strip_prefix(name)?
                .trim_start()
                .strip_prefix([':', '='])?;
            rest.split_whitespace()
                .next()?
                .split('/')
                .next()?
                .trim_end_matches([',', '.'])
                .parse::<f64>()
                .ok()
        })
    };
    match (label("sc"), label("pq")) {
        (Some(sc), Some(pq)) => JudgeScores::new(sc, pq),
        _ => Err(MetricsError::MalformedJudgeReply(
            text.chars().take(120).collect(),
        )),
    }
}

#[derive(Debug, Clone)]
pub struct JudgeRequest<'a> {
    pub source: &'a ImageRef,
    pub instruction: &'a str,
    pub edited: &'a ImageRef,
}

pub trait JudgeClient: Send + Sync {
    /// The judge's raw reply text.
    fn reply(&self, req: &JudgeRequest<'_>) -> Result<String, MetricsError>;
}

/// Canned replies, keyed by edited-image hash with a fallback.
#[derive(Debug, Clone, Default)]
pub struct ScriptedJudge {
    pub by_hash: std::collections::BTreeMap<String, String>,
    pub fallback: Option<String>,
}

impl ScriptedJudge {
    pub fn constant(reply: impl Into<String>) -> Self {
        Self {
            by_hash: Default::default(),
            fallback: Some(reply.into()),
        }
    }
}

impl JudgeClient for ScriptedJudge {
    fn reply(&self, req: &JudgeRequest<'_>) -> Result<String, MetricsError> {
        self.by_hash
            .get(&req.edited.hash.to_hex())
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| {
                MetricsError::ClientUnavailable("no scripted reply for this image".into())
            })
    }
}

pub struct RemoteJudge {
    client: WireClient,
    store: std::sync::Arc<dyn ImageStore>,
    prompt: String,
}

impl RemoteJudge {
    pub fn new(client: WireClient, store: std::sync::Arc<dyn ImageStore>) -> Self {
        Self {
            client,
            store,
            prompt: JUDGE_PROMPT.to_string(),
        }
    }

    pub fn with_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.prompt = prompt.into();
        self
    }

    pub fn request(&self, req: &JudgeRequest<'_>) -> Result<ChatRequest, MetricsError> {
        let image = |r: &ImageRef| {
            self.store
                .get(r)
                .map(|img| Part::image(&img))
                .map_err(|e| MetricsError::ClientUnavailable(e.to_string()))
        };
        Ok(ChatRequest {
            messages: vec![
                Message::new(Speaker::System, vec![Part::text(self.prompt.clone())]),
                Message::new(
                    Speaker::User,
                    vec![
                        image(req.source)?,
                        Part::text(format!("Request: {}", req.instruction)),
                        image(req.edited)?,
                    ],
                ),
            ],
            max_tokens: Some(64),
        })
    }
}

impl JudgeClient for RemoteJudge {
    fn reply(&self, req: &JudgeRequest<'_>) -> Result<String, MetricsError> {
        self.client
            .send(&self.request(req)?)
            .map(|r| r.text)
            .map_err(|e| MetricsError::ClientUnavailable(e.to_string()))
    }
}

pub fn judge_scores(
    client: &dyn JudgeClient,
    req: &JudgeRequest<'_>,
) -> Result<JudgeScores, MetricsError> {
    parse_judge_reply(&client.reply(req)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Win,
    Tie,
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRates {
    pub win_rate: f64,
    /// Wins plus ties.
    pub positive_rate: f64,
}

pub fn preference_rates(outcomes: &[Outcome]) -> Result<PreferenceRates, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = outcomes.len() as f64;
    let count = |o: Outcome| outcomes.iter().filter(|&&x| x == o).count() as f64;
    let wins = count(Outcome::Win);
    Ok(PreferenceRates {
        win_rate: wins / n,
        positive_rate: (wins + count(Outcome::Tie)) / n,
    })
}
