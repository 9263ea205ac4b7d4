//! Gateway <-> agent exchange of observations, rewards and actions.
//!
//! [`codec`] is the byte-level framing; [`session`] holds the two
//! event-driven endpoints that run inside the network simulation.

pub mod codec;
pub mod session;

pub use codec::{CodecError, Frame, MsgType, ObsReward, HEADER_LEN};
pub use session::{timeout_policy, AgentEndpoint, Datagram, GatewaySession, ProtoTimer, RETRY_MAX};
