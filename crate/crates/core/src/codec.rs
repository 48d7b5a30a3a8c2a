//! Bit-exact encoder and decoder for every frame type on the link.
//!
//! Layout: destination MAC, source MAC, Ethertype, version, payload, `0xA5`
//! filler up to the 64-byte minimum, FCS. Integers are big-endian; the FCS is
//! appended least-significant byte first as on a real Ethernet wire.

use std::fmt;
use std::str::FromStr;

use bytes::{BufMut, Bytes};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::profile::*;
use crate::serial::{CommandSeq, FrameSeq, PacketNumber};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid payload: {0}")]
    InvalidPayload(&'static str),
    #[error("invalid header: ethertype {ethertype:#06x}, version {version:#06x}")]
    InvalidHeader { ethertype: u16, version: u16 },
    #[error("frame check sequence mismatch: computed {computed:#010x}, carried {carried:#010x}")]
    BadFcs { computed: u32, carried: u32 },
    #[error("unexpected ethertype {0:#06x}")]
    BadEthertype(u16),
    #[error("unsupported protocol version {found:#06x} from {sender}")]
    BadVersion { found: u16, sender: MacAddress },
    #[error("frame truncated: need {needed} bytes, got {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("unknown payload marker {0:#06x}")]
    UnknownPayloadMarker(u16),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct MacAddress(pub [u8; 6]);

impl MacAddress {
    /// Locally administered address with the given index in the low bytes.
    pub fn local(index: u32) -> Self {
        let b = index.to_be_bytes();
        MacAddress([0x02, 0x00, b[0], b[1], b[2], b[3]])
    }
}

impl fmt::Display for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.0;
        write!(f, "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}", o[0], o[1], o[2], o[3], o[4], o[5])
    }
}

impl FromStr for MacAddress {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut o = [0u8; 6];
        let mut parts = s.split(':');
        for b in o.iter_mut() {
            let part = parts.next().ok_or_else(|| format!("MAC address {s:?} has fewer than 6 octets"))?;
            *b = u8::from_str_radix(part, 16).map_err(|_| format!("bad octet {part:?} in MAC address {s:?}"))?;
        }
        if parts.next().is_some() {
            return Err(format!("MAC address {s:?} has more than 6 octets"));
        }
        Ok(MacAddress(o))
    }
}

impl Serialize for MacAddress {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddress {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub destination: MacAddress,
    pub source: MacAddress,
    pub ethertype: u16,
    pub version: u16,
}

impl FrameHeader {
    pub fn new(destination: MacAddress, source: MacAddress) -> Self {
        FrameHeader { destination, source, ethertype: ETHERTYPE, version: PROTOCOL_VERSION }
    }
}

/// Command result carried by data frames and response packets. A zero
/// command code means "no response in this frame".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommandResponseField {
    pub command_code: u16,
    pub csn: CommandSeq,
    pub return_value: [u8; 8],
}

impl CommandResponseField {
    pub const NONE: CommandResponseField =
        CommandResponseField { command_code: 0, csn: CommandSeq(0), return_value: [0; 8] };

    pub fn is_present(&self) -> bool {
        self.command_code != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckKind {
    Ack,
    Nack,
}

impl AckKind {
    fn code(self) -> u16 {
        match self {
            AckKind::Ack => ACK_KIND,
            AckKind::Nack => NACK_KIND,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckPayload {
    pub kind: AckKind,
    pub seq: FrameSeq,
    pub packet: PacketNumber,
    pub delay_echo: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandRequest {
    pub command_code: u16,
    pub csn: CommandSeq,
    pub argument: u32,
}

/// Standard data packet carrying 8192 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPayload {
    pub seq: FrameSeq,
    pub packet: PacketNumber,
    pub delay: u32,
    pub cmd_response: CommandResponseField,
    pub data: Bytes,
}

/// Final packet of a stream: 8184 data bytes and a count of valid words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LastDataPayload {
    pub seq: FrameSeq,
    pub packet: PacketNumber,
    pub delay: u32,
    pub cmd_response: CommandResponseField,
    pub data: Bytes,
    pub valid_words: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Ack(AckPayload),
    CommandRequest(CommandRequest),
    Data(DataPayload),
    LastData(LastDataPayload),
    CommandResponse(CommandResponseField),
}

impl Payload {
    /// Serialized width in bytes.
    pub fn width(&self) -> usize {
        match self {
            Payload::Ack(_) => ACK_PAYLOAD_LEN,
            Payload::CommandRequest(_) => CMD_REQUEST_PAYLOAD_LEN,
            Payload::Data(_) | Payload::LastData(_) => DATA_PAYLOAD_LEN,
            Payload::CommandResponse(_) => RESPONSE_PAYLOAD_LEN,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Payload::Ack(a) if a.kind == AckKind::Nack => "nack",
            Payload::Ack(_) => "ack",
            Payload::CommandRequest(_) => "cmd",
            Payload::Data(_) => "data",
            Payload::LastData(_) => "last",
            Payload::CommandResponse(_) => "resp",
        }
    }

    /// Sequence and packet number of a (last) data frame.
    pub fn data_ids(&self) -> Option<(FrameSeq, PacketNumber)> {
        match self {
            Payload::Data(d) => Some((d.seq, d.packet)),
            Payload::LastData(d) => Some((d.seq, d.packet)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub header: FrameHeader,
    pub payload: Payload,
    /// Number of `0xA5` bytes between payload and FCS.
    pub filler_len: usize,
    pub fcs: u32,
}

/// IEEE 802.3 CRC-32 (reflected, init and final xor all-ones).
pub fn compute_fcs(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Encoded frame length for a payload of `payload_width` bytes.
pub fn frame_len(payload_width: usize) -> usize {
    (HEADER_LEN + payload_width + FCS_LEN).max(MIN_FRAME_LEN)
}

fn put_response(out: &mut Vec<u8>, r: &CommandResponseField) {
    out.put_u16(r.command_code);
    out.put_u16(r.csn.0);
    out.put_slice(&r.return_value);
}

pub fn encode_frame(header: &FrameHeader, payload: &Payload) -> Result<Vec<u8>, CodecError> {
    if header.ethertype != ETHERTYPE || header.version != PROTOCOL_VERSION {
        return Err(CodecError::InvalidHeader { ethertype: header.ethertype, version: header.version });
    }
    let total = frame_len(payload.width());
    let mut out = Vec::with_capacity(total);
    out.put_slice(&header.destination.0);
    out.put_slice(&header.source.0);
    out.put_u16(header.ethertype);
    out.put_u16(header.version);
    match payload {
        Payload::Ack(a) => {
            out.put_u16(a.kind.code());
            out.put_u16(a.seq.0);
            out.put_u32(a.packet.0);
            out.put_u32(a.delay_echo);
        }
        Payload::CommandRequest(c) => {
            if !is_valid_command_code(c.command_code) {
                return Err(CodecError::InvalidPayload("command code is reserved"));
            }
            out.put_u16(c.command_code);
            out.put_u16(c.csn.0);
            out.put_u32(c.argument);
        }
        Payload::Data(d) => {
            if d.data.len() != PACKET_BYTES {
                return Err(CodecError::InvalidPayload("data packet must carry 8192 bytes"));
            }
            out.put_u16(DATA_MARKER);
            out.put_u16(d.seq.0);
            out.put_u32(d.packet.0);
            out.put_u32(d.delay);
            put_response(&mut out, &d.cmd_response);
            out.put_slice(&d.data);
        }
        Payload::LastData(d) => {
            if d.data.len() != LAST_PACKET_DATA_BYTES {
                return Err(CodecError::InvalidPayload("last data packet must carry 8184 bytes"));
            }
            if d.valid_words > MAX_LAST_VALID_WORDS {
                return Err(CodecError::InvalidPayload("valid word count exceeds 1023"));
            }
            out.put_u16(LAST_DATA_MARKER);
            out.put_u16(d.seq.0);
            out.put_u32(d.packet.0);
            out.put_u32(d.delay);
            put_response(&mut out, &d.cmd_response);
            out.put_slice(&d.data);
            out.put_u64(d.valid_words);
        }
        Payload::CommandResponse(r) => {
            out.put_u16(RESPONSE_FILLER);
            put_response(&mut out, r);
        }
    }
    out.resize(total - FCS_LEN, FILLER_BYTE);
    let fcs = compute_fcs(&out);
    out.put_u32_le(fcs);
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

fn be16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn be32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn mac(b: &[u8]) -> MacAddress {
    let mut o = [0u8; 6];
    o.copy_from_slice(&b[..6]);
    MacAddress(o)
}

fn response(b: &[u8]) -> CommandResponseField {
    let mut return_value = [0u8; 8];
    return_value.copy_from_slice(&b[4..12]);
    CommandResponseField { command_code: be16(b), csn: CommandSeq(be16(&b[2..])), return_value }
}

/// Checks length, FCS and Ethertype and returns the header without looking
/// at the version. Lets a receiver attribute a bad-version frame to a sender.
pub fn peek_header(bytes: &[u8]) -> Result<FrameHeader, CodecError> {
    let min = HEADER_LEN + FCS_LEN;
    if bytes.len() < min {
        return Err(CodecError::Truncated { needed: min, actual: bytes.len() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - FCS_LEN);
    let carried = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = compute_fcs(body);
    if computed != carried {
        return Err(CodecError::BadFcs { computed, carried });
    }
    let ethertype = be16(&bytes[12..]);
    if ethertype != ETHERTYPE {
        return Err(CodecError::BadEthertype(ethertype));
    }
    Ok(FrameHeader { destination: mac(bytes), source: mac(&bytes[6..]), ethertype, version: be16(&bytes[14..]) })
}

pub fn decode_frame(bytes: &[u8]) -> Result<WireFrame, CodecError> {
    let header = peek_header(bytes)?;
    if header.version != PROTOCOL_VERSION {
        return Err(CodecError::BadVersion { found: header.version, sender: header.source });
    }
    let fcs_at = bytes.len() - FCS_LEN;
    let body = &bytes[HEADER_LEN..fcs_at];
    let need = |width: usize| {
        if body.len() < width {
            Err(CodecError::Truncated { needed: HEADER_LEN + width + FCS_LEN, actual: bytes.len() })
        } else {
            Ok(())
        }
    };
    need(2)?;
    let marker = be16(body);
    let payload = match marker {
        ACK_KIND | NACK_KIND => {
            need(ACK_PAYLOAD_LEN)?;
            Payload::Ack(AckPayload {
                kind: if marker == ACK_KIND { AckKind::Ack } else { AckKind::Nack },
                seq: FrameSeq(be16(&body[2..])),
                packet: PacketNumber(be32(&body[4..])),
                delay_echo: be32(&body[8..]),
            })
        }
        DATA_MARKER | LAST_DATA_MARKER => {
            need(DATA_PAYLOAD_LEN)?;
            let seq = FrameSeq(be16(&body[2..]));
            let packet = PacketNumber(be32(&body[4..]));
            let delay = be32(&body[8..]);
            let cmd_response = response(&body[12..24]);
            let data_at = 24;
            if marker == DATA_MARKER {
                let data = Bytes::copy_from_slice(&body[data_at..data_at + PACKET_BYTES]);
                Payload::Data(DataPayload { seq, packet, delay, cmd_response, data })
            } else {
                let data_end = data_at + LAST_PACKET_DATA_BYTES;
                let data = Bytes::copy_from_slice(&body[data_at..data_end]);
                let mut count = [0u8; 8];
                count.copy_from_slice(&body[data_end..data_end + 8]);
                let valid_words = u64::from_be_bytes(count);
                if valid_words > MAX_LAST_VALID_WORDS {
                    return Err(CodecError::InvalidPayload("valid word count exceeds 1023"));
                }
                Payload::LastData(LastDataPayload { seq, packet, delay, cmd_response, data, valid_words })
            }
        }
        RESPONSE_FILLER => {
            need(RESPONSE_PAYLOAD_LEN)?;
            Payload::CommandResponse(response(&body[2..14]))
        }
        code if is_valid_command_code(code) => {
            need(CMD_REQUEST_PAYLOAD_LEN)?;
            Payload::CommandRequest(CommandRequest {
                command_code: code,
                csn: CommandSeq(be16(&body[2..])),
                argument: be32(&body[4..]),
            })
        }
        other => return Err(CodecError::UnknownPayloadMarker(other)),
    };
    let filler_len = body.len() - payload.width();
    let fcs = u32::from_le_bytes([bytes[fcs_at], bytes[fcs_at + 1], bytes[fcs_at + 2], bytes[fcs_at + 3]]);
    Ok(WireFrame { header, payload, filler_len, fcs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hdr() -> FrameHeader {
        FrameHeader::new(MacAddress([1, 2, 3, 4, 5, 6]), MacAddress::local(7))
    }

    fn data_payload() -> Payload {
        Payload::Data(DataPayload {
            seq: FrameSeq(3),
            packet: PacketNumber(9),
            delay: 77,
            cmd_response: CommandResponseField::NONE,
            data: Bytes::from(vec![0x11; PACKET_BYTES]),
        })
    }

    #[test]
    fn data_frame_has_no_filler() {
        let f = encode_frame(&hdr(), &data_payload()).unwrap();
        assert_eq!(f.len(), 14 + 2 + 8216 + 4);
        assert_eq!(f.len(), DATA_FRAME_LEN);
    }

    #[test]
    fn ack_frame_is_padded_to_minimum() {
        let ack = Payload::Ack(AckPayload {
            kind: AckKind::Ack,
            seq: FrameSeq(1),
            packet: PacketNumber(2),
            delay_echo: 3,
        });
        let f = encode_frame(&hdr(), &ack).unwrap();
        assert_eq!(f.len(), 64);
        // 28 bytes of header and payload, then 32 filler bytes.
        assert!(f[28..60].iter().all(|&b| b == 0xA5));
        assert_eq!(&f[12..16], &[0xFA, 0xDE, 0x01, 0x00]);
        assert_eq!(&f[16..28], &[0, 3, 0, 1, 0, 0, 0, 2, 0, 0, 0, 3]);
        assert_eq!(decode_frame(&f).unwrap().filler_len, 32);
    }

    #[test]
    fn response_packet_layout() {
        let r = CommandResponseField { command_code: 0x0123, csn: CommandSeq(0x4567), return_value: [0; 8] };
        let f = encode_frame(&hdr(), &Payload::CommandResponse(r)).unwrap();
        assert_eq!(&f[16..18], &RESPONSE_FILLER.to_be_bytes());
        assert_eq!(&f[18..22], &[0x01, 0x23, 0x45, 0x67]);
        assert_eq!(&f[22..30], &[0; 8]);
    }

    #[test]
    fn mac_text_form() {
        let m: MacAddress = "02:00:00:00:00:0a".parse().unwrap();
        assert_eq!(m, MacAddress::local(10));
        assert_eq!(m.to_string(), "02:00:00:00:00:0a");
        assert!("02:00:00".parse::<MacAddress>().is_err());
        assert!("02:00:00:00:00:00:01".parse::<MacAddress>().is_err());
        assert!("zz:00:00:00:00:00".parse::<MacAddress>().is_err());
    }

    #[test]
    fn header_is_destination_first() {
        let f = encode_frame(&hdr(), &data_payload()).unwrap();
        assert_eq!(&f[0..6], &[1, 2, 3, 4, 5, 6]);
        assert_eq!(&f[6..12], &MacAddress::local(7).0);
    }

    #[test]
    fn valid_words_out_of_range_rejected() {
        let p = Payload::LastData(LastDataPayload {
            seq: FrameSeq(0),
            packet: PacketNumber(0),
            delay: 0,
            cmd_response: CommandResponseField::NONE,
            data: Bytes::from(vec![0; LAST_PACKET_DATA_BYTES]),
            valid_words: 1024,
        });
        assert!(matches!(encode_frame(&hdr(), &p), Err(CodecError::InvalidPayload(_))));
    }

    #[test]
    fn wrong_data_length_rejected() {
        let p = Payload::Data(DataPayload {
            seq: FrameSeq(0),
            packet: PacketNumber(0),
            delay: 0,
            cmd_response: CommandResponseField::NONE,
            data: Bytes::from(vec![0; 100]),
        });
        assert!(matches!(encode_frame(&hdr(), &p), Err(CodecError::InvalidPayload(_))));
    }

    #[test]
    fn reserved_command_code_rejected() {
        for code in [0u16, ACK_KIND, NACK_KIND, 0x0006, DATA_MARKER, RESPONSE_FILLER] {
            let p = Payload::CommandRequest(CommandRequest { command_code: code, csn: CommandSeq(1), argument: 0 });
            assert!(encode_frame(&hdr(), &p).is_err(), "{code:#x}");
        }
    }

    #[test]
    fn single_bit_flip_in_data_is_bad_fcs() {
        let mut f = encode_frame(&hdr(), &data_payload()).unwrap();
        f[5000] ^= 0x10;
        assert!(matches!(decode_frame(&f), Err(CodecError::BadFcs { .. })));
    }

    fn refcs(f: &mut [u8]) {
        let n = f.len() - 4;
        let fcs = compute_fcs(&f[..n]);
        f[n..].copy_from_slice(&fcs.to_le_bytes());
    }

    #[test]
    fn old_version_is_bad_version() {
        let mut f = encode_frame(&hdr(), &data_payload()).unwrap();
        f[14] = 0x00;
        f[15] = 0x01;
        refcs(&mut f);
        assert_eq!(
            decode_frame(&f),
            Err(CodecError::BadVersion { found: 0x0001, sender: MacAddress::local(7) })
        );
    }

    #[test]
    fn other_ethertype_rejected() {
        let mut f = encode_frame(&hdr(), &data_payload()).unwrap();
        f[12] = 0x08;
        f[13] = 0x00;
        refcs(&mut f);
        assert_eq!(decode_frame(&f), Err(CodecError::BadEthertype(0x0800)));
    }

    #[test]
    fn truncated_and_unknown() {
        assert!(matches!(decode_frame(&[0u8; 10]), Err(CodecError::Truncated { .. })));
        let mut f = encode_frame(&hdr(), &data_payload()).unwrap();
        f.truncate(200);
        refcs(&mut f);
        assert!(matches!(decode_frame(&f), Err(CodecError::Truncated { .. })));

        let p = Payload::CommandRequest(CommandRequest { command_code: CMD_START, csn: CommandSeq(1), argument: 0 });
        let mut f = encode_frame(&hdr(), &p).unwrap();
        f[16] = 0x00;
        f[17] = 0x42;
        refcs(&mut f);
        assert_eq!(decode_frame(&f), Err(CodecError::UnknownPayloadMarker(0x0042)));
    }
}
