//! Region selection and accuracy over the evaluation settings.
//!
//! A scorer maps (expression, image, region) to a real score. Selection is
//! the argmax over every candidate region of every image in the setting,
//! with ties going to the smallest (image id, object id).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distractor::{DistractorType, Region, TaskInstance};
use crate::expression::ExpressionRecord;
use crate::ids::{stable_seed, ImageId, ObjectId};
use crate::reasoning::LogicForm;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("module score and weight keys differ or are incomplete")]
    KeyMismatch,
    #[error("instance {0} has no candidate regions under this setting")]
    NoCandidates(String),
    #[error("no instances to evaluate")]
    EmptyInput,
    #[error("scorer returned {score} for {expr_id}/{image_id}/{object_id}")]
    NonFinite {
        expr_id: String,
        image_id: ImageId,
        object_id: ObjectId,
        score: f64,
    },
    #[error("no score for {expr_id}/{image_id}/{object_id}")]
    MissingScore {
        expr_id: String,
        image_id: ImageId,
        object_id: ObjectId,
    },
    #[error("scores line {line}: {detail}")]
    ScoresFile { line: usize, detail: String },
    #[error("scorer process: {0}")]
    Process(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Setting {
    Full,
    DiffCatOnly,
    CatOnly,
    CatAttrOnly,
    CatCatOnly,
    WithoutDist,
}

impl Setting {
    pub const ALL: [Setting; 6] = [
        Setting::Full,
        Setting::DiffCatOnly,
        Setting::CatOnly,
        Setting::CatAttrOnly,
        Setting::CatCatOnly,
        Setting::WithoutDist,
    ];

    fn only(self) -> Option<DistractorType> {
        match self {
            Setting::DiffCatOnly => Some(DistractorType::DiffCat),
            Setting::CatOnly => Some(DistractorType::Cat),
            Setting::CatAttrOnly => Some(DistractorType::CatAttr),
            Setting::CatCatOnly => Some(DistractorType::CatCat),
            Setting::Full | Setting::WithoutDist => None,
        }
    }

    /// Images shown under this setting, target first.
    pub fn images(self, instance: &TaskInstance) -> Vec<&ImageId> {
        let mut images = vec![&instance.target_image];
        match self {
            Setting::WithoutDist => {}
            Setting::Full => images.extend(instance.distractor_images()),
            only => {
                let kind = only.only().expect("single-type setting");
                images.extend(instance.distractors.get(&kind).into_iter().flatten());
            }
        }
        images
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Full => "Full",
            Setting::DiffCatOnly => "DiffCat",
            Setting::CatOnly => "Cat",
            Setting::CatAttrOnly => "CatAttr",
            Setting::CatCatOnly => "CatCat",
            Setting::WithoutDist => "WithoutDist",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace(['-', '_', '&'], "");
        Setting::ALL
            .into_iter()
            .find(|st| {
                let name = format!("{st:?}").to_ascii_lowercase();
                key == name || key == st.as_str().to_ascii_lowercase()
            })
            .ok_or_else(|| format!("unknown setting {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Sub,
    Loc,
    Rel,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Sub, Module::Loc, Module::Rel];
}

/// Weighted sum of modular scores over exactly {sub, loc, rel}.
pub fn combined_score(
    scores: &BTreeMap<Module, f64>,
    weights: &BTreeMap<Module, f64>,
) -> Result<f64, EvalError> {
    if scores.len() != Module::ALL.len() || !scores.keys().eq(weights.keys()) {
        return Err(EvalError::KeyMismatch);
    }
    Ok(Module::ALL.iter().map(|m| weights[m] * scores[m]).sum())
}

/// Region scorer. Implementations must be deterministic for fixed inputs.
pub trait Scorer: Send + Sync {
    fn score(&self, expr: &ExpressionRecord, image: &ImageId, region: &Region) -> Result<f64, EvalError>;

    /// Whether `score` may run on several threads at once.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// 1 on the ground-truth region, 0 elsewhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn score(&self, expr: &ExpressionRecord, image: &ImageId, region: &Region) -> Result<f64, EvalError> {
        Ok(if image == &expr.image_id && region.object_id == expr.target_id {
            1.0
        } else {
            0.0
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, _: &ExpressionRecord, _: &ImageId, _: &Region) -> Result<f64, EvalError> {
        Ok(self.0)
    }
}

/// Uniform score in [0, 1) hashed from the seed and the full region key, so
/// the same region scores the same under every setting.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, expr: &ExpressionRecord, image: &ImageId, region: &Region) -> Result<f64, EvalError> {
        let h = stable_seed(self.seed, &[&expr.id, image.as_str(), region.object_id.as_str()]);
        Ok((h >> 11) as f64 / (1u64 << 53) as f64)
    }
}

/// One line of a scores file. Either `score` or both `modules` and
/// `weights` must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub expr_id: String,
    pub image_id: ImageId,
    pub object_id: ObjectId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modules: Option<BTreeMap<Module, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BTreeMap<Module, f64>>,
}

impl ScoreLine {
    pub fn resolved(&self) -> Result<f64, EvalError> {
        match (self.score, &self.modules, &self.weights) {
            (Some(s), _, _) => Ok(s),
            (None, Some(m), Some(w)) => combined_score(m, w),
            _ => Err(EvalError::KeyMismatch),
        }
    }
}

/// Precomputed scores keyed by (expression id, image id, object id).
#[derive(Debug, Clone, Default)]
pub struct ScoresFileScorer {
    scores: HashMap<(String, ImageId, ObjectId), f64>,
}

impl ScoresFileScorer {
    pub fn from_lines(lines: impl IntoIterator<Item = ScoreLine>) -> Result<Self, EvalError> {
        let mut scores = HashMap::new();
        for (i, line) in lines.into_iter().enumerate() {
            let s = line.resolved().map_err(|e| EvalError::ScoresFile {
                line: i + 1,
                detail: e.to_string(),
            })?;
            scores.insert((line.expr_id, line.image_id, line.object_id), s);
        }
        Ok(Self { scores })
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, EvalError> {
        let mut lines = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| EvalError::ScoresFile {
                line: i + 1,
                detail: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            lines.push(serde_json::from_str(&line).map_err(|e| EvalError::ScoresFile {
                line: i + 1,
                detail: e.to_string(),
            })?);
        }
        Self::from_lines(lines)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl Scorer for ScoresFileScorer {
    fn score(&self, expr: &ExpressionRecord, image: &ImageId, region: &Region) -> Result<f64, EvalError> {
        let key = (expr.id.clone(), image.clone(), region.object_id.clone());
        self.scores.get(&key).copied().ok_or(EvalError::MissingScore {
            expr_id: key.0,
            image_id: key.1,
            object_id: key.2,
        })
    }
}

/// Scores in the oracle pattern for every candidate region, for fixtures.
pub fn oracle_score_lines(instances: &[TaskInstance]) -> Vec<ScoreLine> {
    let mut out = Vec::new();
    for inst in instances {
        for (image, regions) in &inst.candidate_regions {
            for r in regions {
                let hit = image == &inst.expression.image_id && r.object_id == inst.expression.target_id;
                out.push(ScoreLine {
                    expr_id: inst.expression.id.clone(),
                    image_id: image.clone(),
                    object_id: r.object_id.clone(),
                    score: Some(if hit { 1.0 } else { 0.0 }),
                    modules: None,
                    weights: None,
                });
            }
        }
    }
    out
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    expr_id: &'a str,
    text: &'a str,
    image_id: &'a ImageId,
    object_id: &'a ObjectId,
    category: &'a str,
    #[serde(rename = "box")]
    bbox: &'a crate::scene_graph::BoundingBox,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScoreReply {
    Bare(f64),
    Line(ScoreLine),
}

struct Pipe {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// Talks to an external process: one JSON request line per region, one
/// reply line back, either a bare number or a [`ScoreLine`]. Calls are
/// serialized.
pub struct SubprocessScorer {
    pipe: Mutex<Pipe>,
}

impl SubprocessScorer {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, EvalError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| EvalError::Process(format!("{program}: {e}")))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            pipe: Mutex::new(Pipe { child, stdin, stdout }),
        })
    }
}

impl Drop for SubprocessScorer {
    fn drop(&mut self) {
        if let Ok(pipe) = self.pipe.get_mut() {
            let _ = pipe.stdin.flush();
            let _ = pipe.child.kill();
            let _ = pipe.child.wait();
        }
    }
}

impl Scorer for SubprocessScorer {
    fn score(&self, expr: &ExpressionRecord, image: &ImageId, region: &Region) -> Result<f64, EvalError> {
        let request = ScoreRequest {
            expr_id: &expr.id,
            text: &expr.text,
            image_id: image,
            object_id: &region.object_id,
            category: &region.category,
            bbox: &region.bbox,
        };
        let mut pipe = self.pipe.lock().map_err(|_| EvalError::Process("poisoned".into()))?;
        let io = |e: std::io::Error| EvalError::Process(e.to_string());
        serde_json::to_writer(&mut pipe.stdin, &request).map_err(|e| EvalError::Process(e.to_string()))?;
        pipe.stdin.write_all(b"\n").map_err(io)?;
        pipe.stdin.flush().map_err(io)?;
        let mut reply = String::new();
        if pipe.stdout.read_line(&mut reply).map_err(io)? == 0 {
            return Err(EvalError::Process("scorer closed its output".into()));
        }
        match serde_json::from_str::<ScoreReply>(reply.trim()) {
            Ok(ScoreReply::Bare(s)) => Ok(s),
            Ok(ScoreReply::Line(line)) => line.resolved(),
            Err(e) => Err(EvalError::Process(format!("bad reply {:?}: {e}", reply.trim()))),
        }
    }

    fn concurrent_safe(&self) -> bool {
        false
    }
}

/// The argmax region under `setting`.
pub fn select_region(
    instance: &TaskInstance,
    setting: Setting,
    scorer: &dyn Scorer,
) -> Result<(ImageId, ObjectId), EvalError> {
    let expr = &instance.expression;
    let mut best: Option<(f64, &ImageId, &ObjectId)> = None;
    for image in setting.images(instance) {
        for region in instance.candidate_regions.get(image).into_iter().flatten() {
            let s = scorer.score(expr, image, region)?;
            if s.is_nan() {
                return Err(EvalError::NonFinite {
                    expr_id: expr.id.clone(),
                    image_id: image.clone(),
                    object_id: region.object_id.clone(),
                    score: s,
                });
            }
            let better = match best {
                None => true,
                Some((bs, bi, bo)) => s > bs || (s == bs && (image, &region.object_id) < (bi, bo)),
            };
            if better {
                best = Some((s, image, &region.object_id));
            }
        }
    }
    best.map(|(_, i, o)| (i.clone(), o.clone()))
        .ok_or_else(|| EvalError::NoCandidates(expr.id.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthBucket {
    Short,
    Middle,
    Long,
}

impl LengthBucket {
    pub fn of(words: usize) -> Self {
        match words {
            0..=9 => LengthBucket::Short,
            10..=20 => LengthBucket::Middle,
            _ => LengthBucket::Long,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub total: u64,
    pub correct: u64,
    pub accuracy: f64,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += u64::from(hit);
    }

    fn finish(&mut self) {
        self.accuracy = if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub overall: Tally,
    pub by_form: BTreeMap<LogicForm, Tally>,
    pub by_length: BTreeMap<LengthBucket, Tally>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy
    }
}

fn is_hit(instance: &TaskInstance, setting: Setting, scorer: &dyn Scorer) -> Result<bool, EvalError> {
    let (image, object) = select_region(instance, setting, scorer)?;
    Ok(image == instance.expression.image_id && object == instance.expression.target_id)
}

/// Accuracy of `scorer` under `setting`. Runs in parallel when the scorer
/// allows it; the report does not depend on instance order.
pub fn evaluate(
    instances: &[TaskInstance],
    setting: Setting,
    scorer: &dyn Scorer,
) -> Result<EvalReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits: Vec<bool> = if scorer.concurrent_safe() {
        instances
            .par_iter()
            .map(|i| is_hit(i, setting, scorer))
            .collect::<Result<_, _>>()?
    } else {
        instances
            .iter()
            .map(|i| is_hit(i, setting, scorer))
            .collect::<Result<_, _>>()?
    };
    let mut report = EvalReport {
        setting,
        overall: Tally::default(),
        by_form: BTreeMap::new(),
        by_length: BTreeMap::new(),
    };
    for (inst, hit) in instances.iter().zip(hits) {
        report.overall.add(hit);
        report.by_form.entry(inst.expression.form).or_default().add(hit);
        report
            .by_length
            .entry(LengthBucket::of(inst.expression.word_count()))
            .or_default()
            .add(hit);
    }
    report.overall.finish();
    report.by_form.values_mut().for_each(Tally::finish);
    report.by_length.values_mut().for_each(Tally::finish);
    Ok(report)
}

/// Number of candidate regions shown under `setting`.
pub fn candidate_count(instance: &TaskInstance, setting: Setting) -> usize {
    setting
        .images(instance)
        .into_iter()
        .map(|img| instance.candidate_regions.get(img).map_or(0, Vec::len))
        .sum()
}

/// Expected accuracy of a uniform-random scorer: mean of 1/|candidates|.
pub fn chance_rate(instances: &[TaskInstance], setting: Setting) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let sum: f64 = instances
        .iter()
        .map(|i| match candidate_count(i, setting) {
            0 => 0.0,
            n => 1.0 / n as f64,
        })
        .sum();
    sum / instances.len() as f64
}
