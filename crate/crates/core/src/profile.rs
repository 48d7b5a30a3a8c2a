//! Protocol profile: wire constants and command codes shared by both ends.

/// Private Ethertype carried by every frame.
pub const ETHERTYPE: u16 = 0xFADE;
/// Protocol version transmitted right after the Ethertype.
pub const PROTOCOL_VERSION: u16 = 0x0100;

pub const ACK_KIND: u16 = 0x0003;
pub const NACK_KIND: u16 = 0x0004;
pub const DATA_MARKER: u16 = 0xA5A5;
pub const LAST_DATA_MARKER: u16 = 0xA5A6;
/// Leading two bytes of a dedicated command response packet.
pub const RESPONSE_FILLER: u16 = 0xA5A8;
/// Padding byte used to reach the minimum frame size.
pub const FILLER_BYTE: u8 = 0xA5;

pub const CMD_START: u16 = 0x0001;
pub const CMD_STOP: u16 = 0x0002;
pub const CMD_RESET: u16 = 0x0005;
/// First code available to user-defined commands.
pub const CMD_USER_MIN: u16 = 0x0100;

pub const WORD_BYTES: usize = 8;
pub const WORDS_PER_PACKET: usize = 1024;
pub const PACKET_BYTES: usize = WORDS_PER_PACKET * WORD_BYTES;
/// Data area of a last data packet; the final word carries the valid count.
pub const LAST_PACKET_DATA_BYTES: usize = PACKET_BYTES - WORD_BYTES;
pub const MAX_LAST_VALID_WORDS: u64 = (WORDS_PER_PACKET - 1) as u64;

/// Destination MAC + source MAC + Ethertype.
pub const ETH_HEADER_LEN: usize = 14;
/// Ethernet header plus the version field.
pub const HEADER_LEN: usize = ETH_HEADER_LEN + 2;
pub const FCS_LEN: usize = 4;
/// Minimum Ethernet frame length, FCS included.
pub const MIN_FRAME_LEN: usize = 64;

pub const CMD_RESPONSE_LEN: usize = 12;
pub const ACK_PAYLOAD_LEN: usize = 12;
pub const CMD_REQUEST_PAYLOAD_LEN: usize = 8;
pub const DATA_PAYLOAD_LEN: usize = 2 + 2 + 4 + 4 + CMD_RESPONSE_LEN + PACKET_BYTES;
pub const RESPONSE_PAYLOAD_LEN: usize = 2 + CMD_RESPONSE_LEN;
/// On-wire length of a (last) data frame.
pub const DATA_FRAME_LEN: usize = HEADER_LEN + DATA_PAYLOAD_LEN + FCS_LEN;

/// Codes a command request may carry: the control commands and user codes,
/// minus every value that would alias a payload marker.
pub fn is_valid_command_code(code: u16) -> bool {
    match code {
        CMD_START | CMD_STOP | CMD_RESET => true,
        ACK_KIND | NACK_KIND | DATA_MARKER | LAST_DATA_MARKER | RESPONSE_FILLER => false,
        c => c >= CMD_USER_MIN,
    }
}
