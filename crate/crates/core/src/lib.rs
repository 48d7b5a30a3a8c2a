//! Reliable transport of a 64-bit word stream over raw Ethernet frames.
//!
//! The crate holds the wire codec, a model of the FPGA transmitter core, a
//! model of the host receiver driver, and a deterministic discrete-event
//! network simulator that ties them together.

pub mod acceptance;
pub mod codec;
pub mod netsim;
pub mod profile;
pub mod receiver;
pub mod scenario;
pub mod sender;
pub mod serial;
pub mod stats;

pub use codec::{decode_frame, encode_frame, CodecError, FrameHeader, MacAddress, Payload, WireFrame};
pub use serial::{packet_newer, seq_newer, CommandSeq, FrameSeq, PacketNumber};
