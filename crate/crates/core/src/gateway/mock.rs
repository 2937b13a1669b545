use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{Backend, GenerationRequest, PromptTask};
use crate::error::{Error, Result};
use crate::model::JudgmentSet;

/// Answers scoring and permutation prompts from qrels.
///
/// Scores are `level / max_level`, perturbed by uniform noise of random
/// sign and clamped to [0, 1]; unjudged passages score 0. Permutations sort
/// the window by level, descending, keeping label order among ties.
pub struct MockOracleBackend {
    model_name: String,
    judgments: Arc<JudgmentSet>,
    noise: f64,
    seed: u64,
    fingerprint: String,
}

impl MockOracleBackend {
    pub fn new(model_name: &str, judgments: JudgmentSet, noise: f64, seed: u64) -> Result<Self> {
        if !(0.0..=0.5).contains(&noise) {
            return Err(Error::Invalid(format!(
                "oracle noise {noise} outside [0, 0.5]"
            )));
        }
        let mut h = Sha256::new();
        for (q, p, l) in judgments.iter() {
            h.update(format!("{q}\t{p}\t{l}\n").as_bytes());
        }
        let fingerprint = hex::encode(&h.finalize()[..8]);
        Ok(MockOracleBackend {
            model_name: model_name.to_string(),
            judgments: Arc::new(judgments),
            noise,
            seed,
            fingerprint,
        })
    }
}

impl Backend for MockOracleBackend {
    fn id(&self) -> String {
        format!(
            "mock_oracle:{}:noise={}:seed={}:qrels={}",
            self.model_name, self.noise, self.seed, self.fingerprint
        )
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String> {
        let ctx = req
            .context
            .as_ref()
            .ok_or_else(|| Error::Invalid("oracle backend needs a prompt context".into()))?;
        Ok(match ctx.task {
            PromptTask::Score => mock_oracle_score_text(
                &ctx.query_id,
                &ctx.passage_ids,
                &self.judgments,
                self.noise,
                self.seed,
            ),
            PromptTask::Permute => {
                let mut labels: Vec<(usize, u32)> = ctx
                    .passage_ids
                    .iter()
                    .enumerate()
                    .map(|(i, pid)| (i + 1, self.judgments.level(&ctx.query_id, pid).unwrap_or(0)))
                    .collect();
                labels.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                format_permutation(labels.iter().map(|(l, _)| *l))
            }
        })
    }
}

pub(crate) fn format_permutation(labels: impl IntoIterator<Item = usize>) -> String {
    labels
        .into_iter()
        .map(|l| format!("[{l}]"))
        .collect::<Vec<_>>()
        .join(" > ")
}

fn pair_rng(seed: u64, query_id: &str, passage_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query_id.as_bytes());
    h.update([0u8]);
    h.update(passage_id.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

/// Three decimals when that is exact, otherwise the shortest round-trip form.
fn format_score(v: f64) -> String {
    let short = format!("{v:.3}");
    if short.parse::<f64>().ok() == Some(v) {
        short
    } else {
        format!("{v}")
    }
}

/// Scoring-format response text for the given passages, derived from qrels.
///
/// Each pair draws its noise from its own seeded stream, so a passage gets
/// the same score whichever chunk it appears in.
pub fn mock_oracle_score_text(
    query_id: &str,
    passage_ids: &[String],
    judgments: &JudgmentSet,
    noise: f64,
    seed: u64,
) -> String {
    let max_level = judgments.max_level();
    let mut out = String::from("Rationale: scores derived from reference judgments.\n");
    for (i, pid) in passage_ids.iter().enumerate() {
        let value = match judgments.level(query_id, pid) {
            Some(level) if max_level > 0 => {
                let base = f64::from(level) / f64::from(max_level);
                let jitter = if noise > 0.0 {
                    let mut rng = pair_rng(seed, query_id, pid);
                    let magnitude = rng.random_range(0.0..=noise);
                    if rng.random_bool(0.5) {
                        magnitude
                    } else {
                        -magnitude
                    }
                } else {
                    0.0
                };
                (base + jitter).clamp(0.0, 1.0)
            }
            _ => 0.0,
        };
        out.push_str(&format!("Passage [{}]: {}\n", i + 1, format_score(value)));
    }
    out
}

type Responder = dyn Fn(&GenerationRequest) -> Result<String> + Send + Sync;

/// Replays canned or computed responses.
pub struct ScriptedBackend {
    id: String,
    responder: Box<Responder>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Script {
    #[serde(default)]
    responses: HashMap<String, String>,
    #[serde(default)]
    default: Option<String>,
}

impl ScriptedBackend {
    pub fn from_fn<F>(id: impl Into<String>, f: F) -> Self
    where
        F: Fn(&GenerationRequest) -> Result<String> + Send + Sync + 'static,
    {
        ScriptedBackend {
            id: format!("mock_scripted:{}", id.into()),
            responder: Box::new(f),
        }
    }

    /// Loads `{"responses": {request_key: text}, "default": text}`.
    /// Requests with no entry and no default fail.
    pub fn from_file(model_name: &str, path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let script: Script = serde_json::from_str(&raw)?;
        let digest = hex::encode(&Sha256::digest(raw.as_bytes())[..8]);
        Ok(ScriptedBackend::from_fn(
            format!("{model_name}:{digest}"),
            move |req| {
                let key = req.request_key();
                script
                    .responses
                    .get(&key)
                    .or(script.default.as_ref())
                    .cloned()
                    .ok_or_else(|| {
                        Error::MalformedResponse(format!("no scripted response for {key}"))
                    })
            },
        ))
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String> {
        (self.responder)(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, PromptContext};
    use crate::model::Judgment;

    fn judgments() -> JudgmentSet {
        [("a", 3), ("b", 0), ("c", 1), ("d", 2)]
            .into_iter()
            .map(|(p, l)| Judgment {
                query_id: "q".into(),
                passage_id: p.into(),
                level: l,
            })
            .collect::<Result<JudgmentSet>>()
            .unwrap()
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn noise_free_scores() {
        let text = mock_oracle_score_text("q", &ids(&["a", "b", "zzz", "c"]), &judgments(), 0.0, 1);
        assert!(text.contains("Passage [1]: 1.000\n"));
        assert!(text.contains("Passage [2]: 0.000\n"));
        assert!(text.contains("Passage [3]: 0.000\n"));
        assert!(text.contains(&format!("Passage [4]: {}\n", 1.0 / 3.0)));
    }

    #[test]
    fn noisy_scores_deterministic_and_bounded() {
        let j = judgments();
        let pids = ids(&["a", "b", "c", "d"]);
        let t1 = mock_oracle_score_text("q", &pids, &j, 0.3, 7);
        let t2 = mock_oracle_score_text("q", &pids, &j, 0.3, 7);
        assert_eq!(t1, t2);
        // chunk composition does not change a pair's score
        let alone = mock_oracle_score_text("q", &ids(&["d"]), &j, 0.3, 7);
        let d_line = t1.lines().find(|l| l.starts_with("Passage [4]")).unwrap();
        assert_eq!(
            d_line.split(": ").nth(1),
            alone.lines().nth(1).unwrap().split(": ").nth(1)
        );
        let base = [1.0, 0.0, 1.0 / 3.0, 2.0 / 3.0];
        for (line, b) in t1.lines().skip(1).zip(base) {
            let v: f64 = line.split(": ").nth(1).unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
            assert!((v - b).abs() <= 0.3 + 1e-12);
        }
    }

    #[test]
    fn rejects_excess_noise() {
        assert!(MockOracleBackend::new("m", judgments(), 0.6, 0).is_err());
    }

    #[test]
    fn oracle_permutation_orders_by_level() {
        let backend = MockOracleBackend::new("m", judgments(), 0.0, 0).unwrap();
        let mut req = GenerationRequest::new("", "", 1);
        req.context = Some(PromptContext {
            task: PromptTask::Permute,
            query_id: "q".into(),
            passage_ids: ids(&["b", "c", "a", "x", "d"]),
        });
        assert_eq!(
            backend.complete(&req).unwrap(),
            "[3] > [5] > [2] > [1] > [4]"
        );
    }

    #[test]
    fn oracle_latency_recorded() {
        let gw = Gateway::new(Box::new(
            MockOracleBackend::new("m", judgments(), 0.0, 0).unwrap(),
        ));
        let mut req = GenerationRequest::new("", "", 1);
        req.context = Some(PromptContext {
            task: PromptTask::Score,
            query_id: "q".into(),
            passage_ids: ids(&["a"]),
        });
        let resp = gw.generate(&req).unwrap();
        assert!(!resp.from_cache);
        assert!(resp.text.contains("Passage [1]: 1.000"));
        assert!(resp.backend_id.starts_with("mock_oracle:m"));
    }

    #[test]
    fn scripted_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        let req = GenerationRequest::new("s", "u", 1);
        std::fs::write(
            &path,
            serde_json::json!({"responses": {req.request_key(): "[2] > [1]"}}).to_string(),
        )
        .unwrap();
        let b = ScriptedBackend::from_file("m", &path).unwrap();
        assert_eq!(b.complete(&req).unwrap(), "[2] > [1]");
        assert!(b.complete(&GenerationRequest::new("x", "y", 1)).is_err());
    }
}
