//! Everything that crosses the client/server boundary, recorded per round.

use ndarray::Array2;

use crate::similarity_data::GmmSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Per-category mixture summaries, sent once before training.
    GmmUpload { client: usize, set: GmmSet },
    /// The client's trained core matrices, one per adapted layer.
    CUpload { client: usize, round: usize, cores: Vec<Array2<f64>> },
    /// The personalized aggregate the client starts its next round from.
    CBarDownload { client: usize, round: usize, cores: Vec<Array2<f64>> },
    /// LoRA factors for the baselines; `a` is `None` when `A` stays frozen.
    FactorUpload { client: usize, round: usize, a: Option<Vec<Array2<f64>>>, b: Vec<Array2<f64>> },
    FactorDownload { client: usize, round: usize, a: Option<Vec<Array2<f64>>>, b: Vec<Array2<f64>> },
}

fn count(mats: &[Array2<f64>]) -> u64 {
    mats.iter().map(|m| m.len() as u64).sum()
}

impl Message {
    pub fn client(&self) -> usize {
        match self {
            Message::GmmUpload { client, .. }
            | Message::CUpload { client, .. }
            | Message::CBarDownload { client, .. }
            | Message::FactorUpload { client, .. }
            | Message::FactorDownload { client, .. } => *client,
        }
    }

    /// Round the message belongs to; `None` for the one-off setup exchange.
    pub fn round(&self) -> Option<usize> {
        match self {
            Message::GmmUpload { .. } => None,
            Message::CUpload { round, .. }
            | Message::CBarDownload { round, .. }
            | Message::FactorUpload { round, .. }
            | Message::FactorDownload { round, .. } => Some(*round),
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            Message::GmmUpload { .. } | Message::CUpload { .. } | Message::FactorUpload { .. } => Direction::Upload,
            Message::CBarDownload { .. } | Message::FactorDownload { .. } => Direction::Download,
        }
    }

    /// Number of scalars in the payload.
    pub fn payload_params(&self) -> u64 {
        match self {
            Message::GmmUpload { set, .. } => set.parameter_count() as u64,
            Message::CUpload { cores, .. } | Message::CBarDownload { cores, .. } => count(cores),
            Message::FactorUpload { a, b, .. } | Message::FactorDownload { a, b, .. } => {
                a.as_deref().map_or(0, count) + count(b)
            }
        }
    }

    /// Payload size with 8-byte floats.
    pub fn payload_bytes(&self) -> u64 {
        self.payload_params() * 8
    }

    /// Whether the payload contains a full-width (`d×r` or `r×k`) factor.
    pub fn carries_factors(&self) -> bool {
        matches!(self, Message::FactorUpload { .. } | Message::FactorDownload { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::GmmUpload { .. } => "gmm_upload",
            Message::CUpload { .. } => "c_upload",
            Message::CBarDownload { .. } => "c_bar_download",
            Message::FactorUpload { .. } => "factor_upload",
            Message::FactorDownload { .. } => "factor_download",
        }
    }
}
