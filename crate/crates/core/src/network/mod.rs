//! Transport: the message set and its binary wire format, a deterministic
//! discrete-event simulator, and a length-prefixed TCP transport.

pub mod message;
pub mod sim;
pub mod socket;

pub use message::{Envelope, Message, WireError};
pub use sim::{SimConfig, Simulator};
