//! Message tags and calculation status codes.

use serde::{Deserialize, Serialize};

/// Tag of a transport message. The numeric values appear as the first
/// payload byte of the wire frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tag {
    /// Connection handshake (tcp/pipe transports only).
    Handshake = 0,
    /// Worker initialization (specs, workdir policy) for process transports.
    Init = 1,
    /// Manager to worker: evaluate simulation rows.
    EvalSim = 11,
    /// Manager to worker: call the generator.
    EvalGen = 12,
    /// Worker to manager: outputs of a finished user-function call.
    Result = 13,
    /// Either direction while a function is persistent: data exchange.
    PersisUpdate = 14,
    /// Manager to worker: shut down.
    Stop = 20,
    /// Manager to a persistent function: finish up and return.
    PersisStop = 21,
    /// Manager to worker: kill the running task for the named rows.
    ManKill = 22,
}

impl Tag {
    pub fn from_byte(b: u8) -> Option<Tag> {
        match b {
            0 => Some(Tag::Handshake),
            1 => Some(Tag::Init),
            11 => Some(Tag::EvalSim),
            12 => Some(Tag::EvalGen),
            13 => Some(Tag::Result),
            14 => Some(Tag::PersisUpdate),
            20 => Some(Tag::Stop),
            21 => Some(Tag::PersisStop),
            22 => Some(Tag::ManKill),
            _ => None,
        }
    }

    /// Both stop tags terminate a persistent function's loop.
    pub fn is_stop(&self) -> bool {
        matches!(self, Tag::Stop | Tag::PersisStop)
    }
}

/// Terminal status of one user-function call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(i64)]
pub enum CalcStatus {
    Completed = 0,
    Failed = 1,
    Killed = 2,
    PersisFinished = 3,
}

impl CalcStatus {
    pub fn name(&self) -> &'static str {
        match self {
            CalcStatus::Completed => "COMPLETED",
            CalcStatus::Failed => "FAILED",
            CalcStatus::Killed => "KILLED",
            CalcStatus::PersisFinished => "PERSIS_FINISHED",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_bytes_round_trip() {
        for tag in [
            Tag::Handshake,
            Tag::Init,
            Tag::EvalSim,
            Tag::EvalGen,
            Tag::Result,
            Tag::PersisUpdate,
            Tag::Stop,
            Tag::PersisStop,
            Tag::ManKill,
        ] {
            assert_eq!(Tag::from_byte(tag as u8), Some(tag));
        }
        assert_eq!(Tag::from_byte(99), None);
    }

    #[test]
    fn stop_tags() {
        assert!(Tag::Stop.is_stop());
        assert!(Tag::PersisStop.is_stop());
        assert!(!Tag::ManKill.is_stop());
    }
}
