//! Opt-in user feedback: per-question ratings and UMUX-Lite system ratings.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("{field} = {value} is out of range [{min}, {max}]")]
    OutOfRange { field: &'static str, value: i64, min: i64, max: i64 },
    #[error("{0}")]
    Invalid(String),
    #[error("no complete responses to score")]
    UndefinedScore,
    #[error("feedback log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("feedback log: {0}")]
    Io(#[from] std::io::Error),
}

impl FeedbackError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::OutOfRange { .. } => "out_of_range",
            Self::Invalid(_) => "validation_error",
            Self::UndefinedScore => "undefined_score",
            Self::CorruptLog { .. } | Self::Io(_) => "storage_error",
        }
    }
}

fn check(field: &'static str, value: i64, min: i64, max: i64) -> Result<(), FeedbackError> {
    if (min..=max).contains(&value) {
        Ok(())
    } else {
        Err(FeedbackError::OutOfRange { field, value, min, max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionFeedback {
    pub question_id: String,
    pub helpfulness: i64,
    pub correctness: i64,
    pub completeness: i64,
}

impl QuestionFeedback {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        if self.question_id.trim().is_empty() {
            return Err(FeedbackError::Invalid("question_id is empty".into()));
        }
        check("helpfulness", self.helpfulness, 1, 5)?;
        check("correctness", self.correctness, 1, 5)?;
        check("completeness", self.completeness, 1, 5)
    }
}

/// UMUX-Lite items on the standard 7-point scale. Either item may be missing;
/// such responses are stored but not scored.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SystemFeedback {
    #[serde(default)]
    pub umux_capability: Option<i64>,
    #[serde(default)]
    pub umux_ease: Option<i64>,
    #[serde(default)]
    pub satisfaction: Option<i64>,
}

impl SystemFeedback {
    pub fn complete(capability: i64, ease: i64) -> Self {
        Self {
            umux_capability: Some(capability),
            umux_ease: Some(ease),
            satisfaction: None,
        }
    }

    pub fn validate(&self) -> Result<(), FeedbackError> {
        if let Some(v) = self.umux_capability {
            check("umux_capability", v, 1, 7)?;
        }
        if let Some(v) = self.umux_ease {
            check("umux_ease", v, 1, 7)?;
        }
        if let Some(v) = self.satisfaction {
            check("satisfaction", v, 1, 5)?;
        }
        if self.umux_capability.is_none() && self.umux_ease.is_none() && self.satisfaction.is_none() {
            return Err(FeedbackError::Invalid("system feedback has no answers".into()));
        }
        Ok(())
    }

    /// 0–100 score of one complete response, `None` when partial.
    pub fn score(&self) -> Option<f64> {
        let (c, e) = (self.umux_capability?, self.umux_ease?);
        Some(((c - 1) + (e - 1)) as f64 / 12.0 * 100.0)
    }
}

/// Mean UMUX-Lite score over complete responses.
pub fn umux_lite_score(responses: &[SystemFeedback]) -> Result<f64, FeedbackError> {
    let scores: Vec<f64> = responses.iter().filter_map(SystemFeedback::score).collect();
    if scores.is_empty() {
        return Err(FeedbackError::UndefinedScore);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feedback {
    Question(QuestionFeedback),
    System(SystemFeedback),
}

impl Feedback {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        match self {
            Self::Question(q) => q.validate(),
            Self::System(s) => s.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub id: String,
    pub recorded_at: DateTime<Utc>,
    pub session_token: String,
    #[serde(flatten)]
    pub feedback: Feedback,
}

/// Append-only feedback log, one JSON object per line.
#[derive(Debug)]
pub struct FeedbackLog {
    path: Option<PathBuf>,
    state: Mutex<(Vec<FeedbackEntry>, Option<File>)>,
}

impl FeedbackLog {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            state: Mutex::new((Vec::new(), None)),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, FeedbackError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut entries = Vec::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry = serde_json::from_str(&line).map_err(|e| FeedbackError::CorruptLog {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                entries.push(entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path: Some(path),
            state: Mutex::new((entries, Some(file))),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn record(&self, feedback: Feedback, session_token: &str) -> Result<FeedbackEntry, FeedbackError> {
        feedback.validate()?;
        let entry = FeedbackEntry {
            id: uuid::Uuid::new_v4().to_string(),
            recorded_at: Utc::now(),
            session_token: session_token.to_string(),
            feedback,
        };
        let mut state = self.state.lock().expect("feedback lock");
        if let Some(file) = state.1.as_mut() {
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        state.0.push(entry.clone());
        Ok(entry)
    }

    pub fn entries(&self) -> Vec<FeedbackEntry> {
        self.state.lock().expect("feedback lock").0.clone()
    }

    pub fn system_score(&self) -> Result<f64, FeedbackError> {
        let responses: Vec<SystemFeedback> = self
            .entries()
            .into_iter()
            .filter_map(|e| match e.feedback {
                Feedback::System(s) => Some(s),
                Feedback::Question(_) => None,
            })
            .collect();
        umux_lite_score(&responses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoring_examples() {
        assert!((umux_lite_score(&[SystemFeedback::complete(7, 7)]).unwrap() - 100.0).abs() < 1e-9);
        assert!(umux_lite_score(&[SystemFeedback::complete(1, 1)]).unwrap().abs() < 1e-9);
        let pair = [SystemFeedback::complete(7, 4), SystemFeedback::complete(4, 7)];
        assert!((umux_lite_score(&pair).unwrap() - 75.0).abs() < 1e-9);
    }

    #[test]
    fn partial_responses_excluded() {
        let partial = SystemFeedback {
            umux_capability: Some(1),
            ..Default::default()
        };
        let mixed = [partial, SystemFeedback::complete(7, 7)];
        assert_eq!(umux_lite_score(&mixed).unwrap(), 100.0);
        assert!(matches!(umux_lite_score(&[partial]), Err(FeedbackError::UndefinedScore)));
        assert!(matches!(umux_lite_score(&[]), Err(FeedbackError::UndefinedScore)));
    }

    #[test]
    fn range_checks() {
        let q = QuestionFeedback {
            question_id: "q".into(),
            helpfulness: 6,
            correctness: 3,
            completeness: 3,
        };
        assert_eq!(q.validate().unwrap_err().code(), "out_of_range");
        assert!(SystemFeedback::complete(0, 4).validate().is_err());
        assert!(SystemFeedback::complete(7, 1).validate().is_ok());
        assert!(SystemFeedback::default().validate().is_err());
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feedback.jsonl");
        let log = FeedbackLog::open(&path).unwrap();
        let q = Feedback::Question(QuestionFeedback {
            question_id: "abc".into(),
            helpfulness: 5,
            correctness: 4,
            completeness: 3,
        });
        let stored = log.record(q, "tok").unwrap();
        assert!(log.record(Feedback::System(SystemFeedback::complete(8, 1)), "tok").is_err());
        log.record(Feedback::System(SystemFeedback::complete(7, 4)), "tok").unwrap();
        drop(log);
        let log = FeedbackLog::open(&path).unwrap();
        assert_eq!(log.entries().len(), 2);
        assert_eq!(log.entries()[0], stored);
        assert!((log.system_score().unwrap() - 75.0).abs() < 1e-9);
    }
}
