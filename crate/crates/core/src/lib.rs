pub mod agents;
pub mod daemon;
pub mod dns;
pub mod experiment;
pub mod network;
pub mod orchestrator;
pub mod protocol;
pub mod routing;
pub mod sim;
pub mod topology;
pub mod wireless;
