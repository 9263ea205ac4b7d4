//! Frame layout (all integers big-endian):
//!
//! ```text
//! 0      1        5        9      11        13            15
//! | type | seq u32 | ep u32 | step | agent_id | payload_len | payload...
//! ```

use thiserror::Error;

use crate::wireless::{ApId, ApObservation, MacConfig, Observation};

pub const HEADER_LEN: usize = 15;
/// Bytes per AP entry in an OBS_REWARD payload.
pub const OBS_ENTRY_LEN: usize = 16;
pub const OBS_FIXED_LEN: usize = 4 + 8;
pub const ACTION_ENTRY_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated buffer: need {need} bytes, got {got}")]
    Truncated { need: usize, got: usize },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("length mismatch: header says {stated} payload bytes, buffer has {actual}")]
    LengthMismatch { stated: usize, actual: usize },
    #[error("payload too large: {0} bytes")]
    Oversize(usize),
    #[error("bad {0} payload")]
    BadPayload(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MsgType {
    ObsReward = 1,
    Action = 2,
    EpisodeStart = 3,
    EpisodeEnd = 4,
    Ack = 5,
}

impl MsgType {
    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::ObsReward => "OBS_REWARD",
            MsgType::Action => "ACTION",
            MsgType::EpisodeStart => "EPISODE_START",
            MsgType::EpisodeEnd => "EPISODE_END",
            MsgType::Ack => "ACK",
        }
    }
}

impl TryFrom<u8> for MsgType {
    type Error = CodecError;

    fn try_from(b: u8) -> Result<Self, CodecError> {
        Ok(match b {
            1 => MsgType::ObsReward,
            2 => MsgType::Action,
            3 => MsgType::EpisodeStart,
            4 => MsgType::EpisodeEnd,
            5 => MsgType::Ack,
            other => return Err(CodecError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub seq: u32,
    pub episode: u32,
    pub step: u16,
    pub agent_id: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        let len = u16::try_from(self.payload.len()).map_err(|_| CodecError::Oversize(self.payload.len()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.episode.to_be_bytes());
        out.extend_from_slice(&self.step.to_be_bytes());
        out.extend_from_slice(&self.agent_id.to_be_bytes());
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// The buffer must hold exactly one frame.
    pub fn decode(buf: &[u8]) -> Result<Frame, CodecError> {
        if buf.len() < HEADER_LEN {
            return Err(CodecError::Truncated {
                need: HEADER_LEN,
                got: buf.len(),
            });
        }
        let msg_type = MsgType::try_from(buf[0])?;
        let u32_at = |i: usize| u32::from_be_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]);
        let u16_at = |i: usize| u16::from_be_bytes([buf[i], buf[i + 1]]);
        let stated = u16_at(13) as usize;
        let actual = buf.len() - HEADER_LEN;
        if stated != actual {
            return Err(CodecError::LengthMismatch { stated, actual });
        }
        Ok(Frame {
            msg_type,
            seq: u32_at(1),
            episode: u32_at(5),
            step: u16_at(9),
            agent_id: u16_at(11),
            payload: buf[HEADER_LEN..].to_vec(),
        })
    }
}

/// Observation for a subset of APs plus the scalar reward.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsReward {
    pub observation: Observation,
    pub reward: f64,
}

fn narrow(v: u32) -> Result<u16, CodecError> {
    u16::try_from(v).map_err(|_| CodecError::BadPayload("observation field"))
}

/// `count u8 | n_aps u8 | window_slots u16 | count x entry | reward f64`,
/// entry = `ap_id u8 | flags u8 | delivered | collisions | attempts |
/// busy_slots | queue_len | arrivals | dropped` (u16 each); flags bit 0 is
/// "active".
pub fn encode_obs_reward(o: &ObsReward) -> Result<Vec<u8>, CodecError> {
    let aps = &o.observation.aps;
    let count = u8::try_from(aps.len()).map_err(|_| CodecError::BadPayload("observation count"))?;
    let mut out = Vec::with_capacity(OBS_FIXED_LEN + OBS_ENTRY_LEN * aps.len());
    out.push(count);
    out.push(o.observation.n_aps);
    out.extend_from_slice(&o.observation.window_slots.to_be_bytes());
    for a in aps {
        out.push(a.ap_id);
        out.push(u8::from(a.active));
        for v in [
            a.delivered,
            a.collisions,
            a.attempts,
            a.busy_slots,
            a.queue_len,
            a.arrivals,
            a.dropped,
        ] {
            out.extend_from_slice(&narrow(v)?.to_be_bytes());
        }
    }
    out.extend_from_slice(&o.reward.to_be_bytes());
    Ok(out)
}

pub fn decode_obs_reward(buf: &[u8]) -> Result<ObsReward, CodecError> {
    let bad = CodecError::BadPayload("OBS_REWARD");
    if buf.len() < OBS_FIXED_LEN {
        return Err(bad);
    }
    let count = buf[0] as usize;
    if buf.len() != OBS_FIXED_LEN + count * OBS_ENTRY_LEN {
        return Err(bad);
    }
    let u16_at = |i: usize| u16::from_be_bytes([buf[i], buf[i + 1]]) as u32;
    let aps = (0..count)
        .map(|k| {
            let e = 4 + k * OBS_ENTRY_LEN;
            if buf[e + 1] > 1 {
                return Err(CodecError::BadPayload("OBS_REWARD flags"));
            }
            Ok(ApObservation {
                ap_id: buf[e],
                active: buf[e + 1] == 1,
                delivered: u16_at(e + 2),
                collisions: u16_at(e + 4),
                attempts: u16_at(e + 6),
                busy_slots: u16_at(e + 8),
                queue_len: u16_at(e + 10),
                arrivals: u16_at(e + 12),
                dropped: u16_at(e + 14),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let r = buf.len() - 8;
    let reward = f64::from_be_bytes(buf[r..].try_into().expect("8 bytes"));
    Ok(ObsReward {
        observation: Observation {
            window_slots: u16_at(2) as u16,
            n_aps: buf[1],
            aps,
        },
        reward,
    })
}

/// `(ap_id, cw_min_exp, cw_max_exp, retry_limit)` per AP, one byte each.
pub fn encode_actions(actions: &[(ApId, MacConfig)]) -> Vec<u8> {
    actions
        .iter()
        .flat_map(|(ap, c)| [*ap, c.cw_min_exp(), c.cw_max_exp(), c.retry_limit()])
        .collect()
}

pub fn decode_actions(buf: &[u8]) -> Result<Vec<(ApId, MacConfig)>, CodecError> {
    if !buf.len().is_multiple_of(ACTION_ENTRY_LEN) {
        return Err(CodecError::BadPayload("ACTION"));
    }
    buf.chunks_exact(ACTION_ENTRY_LEN)
        .map(|c| {
            MacConfig::new(c[1], c[2], c[3])
                .map(|cfg| (c[0], cfg))
                .map_err(|_| CodecError::BadPayload("ACTION config"))
        })
        .collect()
}
