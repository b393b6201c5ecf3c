use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The six evaluation categories. Each has its own ratings and leaderboard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackId {
    LiteratureReview,
    Ideation,
    HypothesisGeneration,
    Reviewer,
    PaperQa,
    AuthorQa,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown track {0:?}")]
pub struct UnknownTrack(pub String);

impl TrackId {
    pub const ALL: [TrackId; 6] = [
        TrackId::LiteratureReview,
        TrackId::Ideation,
        TrackId::HypothesisGeneration,
        TrackId::Reviewer,
        TrackId::PaperQa,
        TrackId::AuthorQa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrackId::LiteratureReview => "literature_review",
            TrackId::Ideation => "ideation",
            TrackId::HypothesisGeneration => "hypothesis_generation",
            TrackId::Reviewer => "reviewer",
            TrackId::PaperQa => "paper_qa",
            TrackId::AuthorQa => "author_qa",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            TrackId::LiteratureReview => "Literature Review",
            TrackId::Ideation => "Ideation",
            TrackId::HypothesisGeneration => "Hypothesis Generation",
            TrackId::Reviewer => "Reviewer",
            TrackId::PaperQa => "PaperQA",
            TrackId::AuthorQa => "AuthorQA",
        }
    }
}

impl fmt::Display for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrackId {
    type Err = UnknownTrack;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrackId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownTrack(s.to_owned()))
    }
}
