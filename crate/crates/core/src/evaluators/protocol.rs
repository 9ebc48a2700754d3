//! Newline-delimited JSON spoken with an external trainer process.
//!
//! Engine to trainer: `evaluate` and `stop`. Trainer to engine: `epoch`,
//! `final`, `oom` and `error`. One object per line; any other `type` is a
//! protocol error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EngineMessage {
    Evaluate {
        arch_id: u64,
        graph: serde_json::Value,
        max_epochs: u32,
        seed: u64,
    },
    Stop {
        arch_id: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrainerMessage {
    Epoch {
        arch_id: u64,
        epoch: u32,
        train_loss: f64,
        val_metric: f64,
    },
    Final {
        arch_id: u64,
        val_metric: f64,
    },
    Oom {
        arch_id: u64,
        estimated_bytes: u64,
    },
    Error {
        arch_id: u64,
        message: String,
    },
}

impl TrainerMessage {
    pub fn arch_id(&self) -> u64 {
        match *self {
            TrainerMessage::Epoch { arch_id, .. }
            | TrainerMessage::Final { arch_id, .. }
            | TrainerMessage::Oom { arch_id, .. }
            | TrainerMessage::Error { arch_id, .. } => arch_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("protocol error: {reason} in line {line:?}")]
pub struct ProtocolError {
    pub line: String,
    pub reason: String,
}

pub fn encode(msg: &EngineMessage) -> String {
    let mut s = serde_json::to_string(msg).expect("engine message serializes");
    s.push('\n');
    s
}

pub fn parse_trainer_line(line: &str) -> Result<TrainerMessage, ProtocolError> {
    let msg: TrainerMessage = serde_json::from_str(line.trim()).map_err(|e| ProtocolError {
        line: line.to_string(),
        reason: e.to_string(),
    })?;
    let finite = match &msg {
        TrainerMessage::Epoch {
            train_loss,
            val_metric,
            ..
        } => train_loss.is_finite() && val_metric.is_finite(),
        TrainerMessage::Final { val_metric, .. } => val_metric.is_finite(),
        _ => true,
    };
    if !finite {
        return Err(ProtocolError {
            line: line.to_string(),
            reason: "non-finite metric".into(),
        });
    }
    Ok(msg)
}
