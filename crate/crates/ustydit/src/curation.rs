//! Staged dataset curation: text-image consistency, aesthetic score, and
//! canny-image similarity filters with pluggable scorers, JSONL manifests,
//! and a full per-record audit trail.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::imaging::{canny, ImageBuffer};
use crate::util::{fnv1a, par_map};
use crate::{Error, Result};

pub const CONSISTENCY_THRESHOLD: f64 = 30.0;
pub const AESTHETIC_THRESHOLD: f64 = 7.0;
pub const CANNY_SIMILARITY_THRESHOLD: f64 = 0.67;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Consistency,
    Aesthetic,
    CannySimilarity,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Consistency => "consistency",
            Stage::Aesthetic => "aesthetic",
            Stage::CannySimilarity => "canny",
        }
    }

    pub const ORDER: [Stage; 3] = [Stage::Consistency, Stage::Aesthetic, Stage::CannySimilarity];
}

/// keep-if-≥ threshold decision, shared by every stage.
pub fn stage_passes(score: f64, threshold: f64) -> bool {
    score >= threshold
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub prompt: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageScores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aesthetic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub canny_similarity: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageDecisions {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aesthetic: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub canny_similarity: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum FinalStatus {
    Kept,
    Rejected { stage: String },
    Errored { reason: String },
}

/// One dataset item with its full score/decision audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationRecord {
    pub id: String,
    pub image_path: String,
    pub prompt: String,
    pub scores: StageScores,
    pub decisions: StageDecisions,
    pub final_status: FinalStatus,
}

/// How a stage obtains its score.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ScorerMode {
    BuiltinStub,
    /// Spawn `command` once per batch: JSONL {id, image_path, prompt} on
    /// stdin, JSONL {id, score} on stdout; nonzero exit fails the batch.
    ExternalCommand { command: String, args: Vec<String> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorerBinding {
    pub stage: Stage,
    pub mode: ScorerMode,
    pub threshold: f64,
}

impl ScorerBinding {
    pub fn builtin(stage: Stage) -> Self {
        let threshold = match stage {
            Stage::Consistency => CONSISTENCY_THRESHOLD,
            Stage::Aesthetic => AESTHETIC_THRESHOLD,
            Stage::CannySimilarity => CANNY_SIMILARITY_THRESHOLD,
        };
        ScorerBinding {
            stage,
            mode: ScorerMode::BuiltinStub,
            threshold,
        }
    }
}

/// Deterministic consistency stand-in: hashes prompt words into the 64
/// bins of the image's luma histogram and scores the covered mass against
/// its uniform expectation. A placeholder for a semantic model, not a
/// claim of fidelity.
pub fn stub_consistency_score(image: &ImageBuffer, prompt: &str) -> f64 {
    let luma = image.to_luma();
    let mut hist = [0.0f64; 64];
    for v in &luma {
        let b = ((v * 64.0) as usize).min(63);
        hist[b] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    for h in hist.iter_mut() {
        *h /= total;
    }
    let mut buckets: Vec<usize> = prompt
        .split_whitespace()
        .map(|w| fnv1a(w.as_bytes()) as usize % 64)
        .collect();
    buckets.sort_unstable();
    buckets.dedup();
    if buckets.is_empty() {
        return 0.0;
    }
    let mass: f64 = buckets.iter().map(|&b| hist[b]).sum();
    let expected = buckets.len() as f64 / 64.0;
    100.0 * mass / (mass + expected)
}

/// Deterministic aesthetic stand-in: file bytes hashed into [0,10).
pub fn stub_aesthetic_score(image_bytes: &[u8]) -> f64 {
    (fnv1a(image_bytes) % 10_000) as f64 / 1_000.0
}

/// Canny-similarity proxy: cosine similarity between the 64-bin nonzero
/// gradient-magnitude histograms of the image and of its edge map dilated
/// once. A constant image has no nonzero gradients and scores 0.
pub fn canny_similarity_score(image: &ImageBuffer) -> Result<f64> {
    let edges = canny(image, 100.0, 200.0)?;
    let dilated = edges.dilate().to_image()?;
    let ha = gradient_histogram(image);
    let hb = gradient_histogram(&dilated);
    Ok(cosine(&ha, &hb))
}

fn gradient_histogram(image: &ImageBuffer) -> [f64; 64] {
    let (w, h) = (image.width, image.height);
    let luma = image.to_luma();
    let mut hist = [0.0f64; 64];
    for y in 0..h {
        for x in 0..w {
            let gx = if x + 1 < w {
                luma[y * w + x + 1] - luma[y * w + x]
            } else {
                0.0
            };
            let gy = if y + 1 < h {
                luma[(y + 1) * w + x] - luma[y * w + x]
            } else {
                0.0
            };
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > 0.0 {
                let b = ((mag / 2.0_f64.sqrt() * 64.0) as usize).min(63);
                hist[b] += 1.0;
            }
        }
    }
    hist
}

fn cosine(a: &[f64; 64], b: &[f64; 64]) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[derive(Debug, Serialize, Deserialize)]
struct ExternalScore {
    id: String,
    score: f64,
}

/// Run an external scorer over a batch of records.
fn external_scores(
    command: &str,
    args: &[String],
    records: &[&ManifestRecord],
) -> Result<Vec<f64>> {
    let mut child = Command::new(command)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Config(format!("cannot spawn scorer {command}: {e}")))?;
    {
        let stdin = child.stdin.as_mut().expect("piped stdin");
        for r in records {
            let line = serde_json::to_string(&ManifestRecord {
                id: r.id.clone(),
                image_path: r.image_path.clone(),
                prompt: r.prompt.clone(),
            })?;
            writeln!(stdin, "{line}")?;
        }
    }
    let out = child.wait_with_output()?;
    if !out.status.success() {
        return Err(Error::Config(format!(
            "scorer {command} exited with {:?}",
            out.status.code()
        )));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let mut by_id = std::collections::HashMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let s: ExternalScore = serde_json::from_str(line)?;
        by_id.insert(s.id, s.score);
    }
    records
        .iter()
        .map(|r| {
            by_id
                .get(&r.id)
                .copied()
                .ok_or_else(|| Error::Config(format!("scorer returned no score for {}", r.id)))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedByStage {
    pub consistency: usize,
    pub aesthetic: usize,
    pub canny: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub input_count: usize,
    pub kept: usize,
    pub rejected_by_stage: RejectedByStage,
    pub errored: usize,
}

pub struct PipelineOutput {
    pub records: Vec<CurationRecord>,
    pub summary: Summary,
}

fn builtin_score(stage: Stage, record: &ManifestRecord) -> Result<f64> {
    let path = PathBuf::from(&record.image_path);
    match stage {
        Stage::Consistency => {
            let img = ImageBuffer::read_png(&path)?;
            Ok(stub_consistency_score(&img, &record.prompt))
        }
        Stage::Aesthetic => {
            let bytes = std::fs::read(&path)?;
            Ok(stub_aesthetic_score(&bytes))
        }
        Stage::CannySimilarity => {
            let img = ImageBuffer::read_png(&path)?;
            canny_similarity_score(&img)
        }
    }
}

/// Run the three stages in order with short-circuit on first failure.
/// Output ordering equals input ordering regardless of parallelism.
pub fn run_pipeline(
    records: &[ManifestRecord],
    bindings: &[ScorerBinding],
    parallelism: usize,
) -> Result<PipelineOutput> {
    let binding_for = |stage: Stage| -> Result<&ScorerBinding> {
        bindings
            .iter()
            .find(|b| b.stage == stage)
            .ok_or_else(|| Error::Config(format!("no binding for stage {}", stage.name())))
    };
    for stage in Stage::ORDER {
        binding_for(stage)?;
    }

    // external scorers run once per batch up front; per-record errors in
    // builtin scorers are caught per record below
    let mut external: std::collections::HashMap<&'static str, Vec<f64>> =
        std::collections::HashMap::new();
    for stage in Stage::ORDER {
        if let ScorerMode::ExternalCommand { command, args } = &binding_for(stage)?.mode {
            let refs: Vec<&ManifestRecord> = records.iter().collect();
            external.insert(stage.name(), external_scores(command, args, &refs)?);
        }
    }

    let work: Vec<(usize, &ManifestRecord)> = records.iter().enumerate().collect();
    let scored: Vec<CurationRecord> = par_map(work, parallelism, |(i, rec)| {
        let mut out = CurationRecord {
            id: rec.id.clone(),
            image_path: rec.image_path.clone(),
            prompt: rec.prompt.clone(),
            scores: StageScores::default(),
            decisions: StageDecisions::default(),
            final_status: FinalStatus::Kept,
        };
        for stage in Stage::ORDER {
            let binding = binding_for(stage).expect("validated above");
            let score = match external.get(stage.name()) {
                Some(scores) => Ok(scores[i]),
                None => builtin_score(stage, rec),
            };
            let score = match score {
                Ok(s) => s,
                Err(e) => {
                    out.final_status = FinalStatus::Errored {
                        reason: e.to_string(),
                    };
                    return out;
                }
            };
            let pass = stage_passes(score, binding.threshold);
            match stage {
                Stage::Consistency => {
                    out.scores.consistency = Some(score);
                    out.decisions.consistency = Some(pass);
                }
                Stage::Aesthetic => {
                    out.scores.aesthetic = Some(score);
                    out.decisions.aesthetic = Some(pass);
                }
                Stage::CannySimilarity => {
                    out.scores.canny_similarity = Some(score);
                    out.decisions.canny_similarity = Some(pass);
                }
            }
            if !pass {
                out.final_status = FinalStatus::Rejected {
                    stage: stage.name().to_string(),
                };
                return out; // short-circuit: later stages never run
            }
        }
        out
    });

    let mut summary = Summary {
        input_count: records.len(),
        kept: 0,
        rejected_by_stage: RejectedByStage {
            consistency: 0,
            aesthetic: 0,
            canny: 0,
        },
        errored: 0,
    };
    for r in &scored {
        match &r.final_status {
            FinalStatus::Kept => summary.kept += 1,
            FinalStatus::Errored { .. } => summary.errored += 1,
            FinalStatus::Rejected { stage } => match stage.as_str() {
                "consistency" => summary.rejected_by_stage.consistency += 1,
                "aesthetic" => summary.rejected_by_stage.aesthetic += 1,
                _ => summary.rejected_by_stage.canny += 1,
            },
        }
    }
    Ok(PipelineOutput {
        records: scored,
        summary,
    })
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[CurationRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    std::fs::write(path, buf)?;
    Ok(())
}
