//! Fixed-length binary frame exchanged with the microcontroller.
//!
//! Layout, little-endian throughout:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 2 | magic `b"TH"` |
//! | 2 | 1 | version |
//! | 3 | 4 | tick counter `u32` |
//! | 7 | 18 | setpoints, 9 × `i16` centidegrees C |
//! | 25 | 18 | measured, 9 × `i16` centidegrees C |
//! | 43 | 18 | currents, 9 × `i16` milliamperes |
//! | 61 | 2 | CRC-16/CCITT-FALSE over bytes 0..61 |

use serde::{Deserialize, Serialize};

use crate::{Error, Result, CHANNELS};

pub const MAGIC: [u8; 2] = *b"TH";
pub const FRAME_VERSION: u8 = 1;
pub const FRAME_LEN: usize = 63;

const OFF_TICK: usize = 3;
const OFF_SETPOINT: usize = 7;
const OFF_MEASURED: usize = OFF_SETPOINT + 2 * CHANNELS;
const OFF_CURRENT: usize = OFF_MEASURED + 2 * CHANNELS;
const OFF_CRC: usize = OFF_CURRENT + 2 * CHANNELS;

/// One telemetry/command frame in wire units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub tick: u32,
    /// Centidegrees Celsius.
    pub setpoints: [i16; CHANNELS],
    /// Centidegrees Celsius.
    pub measured: [i16; CHANNELS],
    /// Milliamperes.
    pub currents: [i16; CHANNELS],
}

impl Frame {
    /// Quantises engineering values into wire units, saturating at the `i16`
    /// range. Non-finite values encode as zero.
    pub fn from_engineering(tick: u32, setpoints: &[f64; CHANNELS], measured: &[f64; CHANNELS], currents: &[f64; CHANNELS]) -> Self {
        let q = |v: f64, scale: f64| -> i16 {
            if v.is_finite() {
                (v * scale).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
            } else {
                0
            }
        };
        Frame {
            tick,
            setpoints: setpoints.map(|v| q(v, 100.0)),
            measured: measured.map(|v| q(v, 100.0)),
            currents: currents.map(|v| q(v, 1000.0)),
        }
    }

    pub fn setpoints_c(&self) -> [f64; CHANNELS] {
        self.setpoints.map(|v| v as f64 / 100.0)
    }

    pub fn measured_c(&self) -> [f64; CHANNELS] {
        self.measured.map(|v| v as f64 / 100.0)
    }

    pub fn currents_a(&self) -> [f64; CHANNELS] {
        self.currents.map(|v| v as f64 / 1000.0)
    }
}

/// CRC-16/CCITT-FALSE: polynomial 0x1021, initial value 0xFFFF, no
/// reflection, no final xor.
pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &b in data {
        crc ^= (b as u16) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
        }
    }
    crc
}

pub fn encode(frame: &Frame) -> [u8; FRAME_LEN] {
    let mut buf = [0u8; FRAME_LEN];
    buf[..2].copy_from_slice(&MAGIC);
    buf[2] = FRAME_VERSION;
    buf[OFF_TICK..OFF_SETPOINT].copy_from_slice(&frame.tick.to_le_bytes());
    for k in 0..CHANNELS {
        buf[OFF_SETPOINT + 2 * k..][..2].copy_from_slice(&frame.setpoints[k].to_le_bytes());
        buf[OFF_MEASURED + 2 * k..][..2].copy_from_slice(&frame.measured[k].to_le_bytes());
        buf[OFF_CURRENT + 2 * k..][..2].copy_from_slice(&frame.currents[k].to_le_bytes());
    }
    let crc = crc16_ccitt_false(&buf[..OFF_CRC]);
    buf[OFF_CRC..].copy_from_slice(&crc.to_le_bytes());
    buf
}

/// Parses one frame. Errors carry the byte offset of the offending field.
pub fn decode(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() != FRAME_LEN {
        return Err(Error::FrameRejected {
            offset: bytes.len().min(FRAME_LEN),
            reason: "wrong frame length",
        });
    }
    if bytes[..2] != MAGIC {
        let offset = if bytes[0] != MAGIC[0] { 0 } else { 1 };
        return Err(Error::FrameRejected { offset, reason: "bad magic" });
    }
    if bytes[2] != FRAME_VERSION {
        return Err(Error::FrameRejected {
            offset: 2,
            reason: "unsupported version",
        });
    }
    let stored = u16::from_le_bytes([bytes[OFF_CRC], bytes[OFF_CRC + 1]]);
    if stored != crc16_ccitt_false(&bytes[..OFF_CRC]) {
        return Err(Error::FrameRejected {
            offset: OFF_CRC,
            reason: "checksum mismatch",
        });
    }
    let rd = |off: usize| i16::from_le_bytes([bytes[off], bytes[off + 1]]);
    let mut f = Frame {
        tick: u32::from_le_bytes(bytes[OFF_TICK..OFF_SETPOINT].try_into().expect("4 bytes")),
        setpoints: [0; CHANNELS],
        measured: [0; CHANNELS],
        currents: [0; CHANNELS],
    };
    for k in 0..CHANNELS {
        f.setpoints[k] = rd(OFF_SETPOINT + 2 * k);
        f.measured[k] = rd(OFF_MEASURED + 2 * k);
        f.currents[k] = rd(OFF_CURRENT + 2 * k);
    }
    Ok(f)
}

/// Accumulates a byte stream and yields frames, resynchronising on the magic
/// after a rejected frame.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
    rejected: u64,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Number of candidate frames discarded so far.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn next_frame(&mut self) -> Option<Frame> {
        loop {
            let start = self.buf.windows(2).position(|w| w == MAGIC)?;
            if start > 0 {
                self.buf.drain(..start);
            }
            if self.buf.len() < FRAME_LEN {
                return None;
            }
            match decode(&self.buf[..FRAME_LEN]) {
                Ok(f) => {
                    self.buf.drain(..FRAME_LEN);
                    return Some(f);
                }
                Err(_) => {
                    self.rejected += 1;
                    self.buf.drain(..1);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Table-driven CRC built independently of the bitwise implementation.
    fn crc_table_oracle(data: &[u8]) -> u16 {
        let mut table = [0u16; 256];
        for (n, slot) in table.iter_mut().enumerate() {
            let mut r = (n as u16) << 8;
            for _ in 0..8 {
                r = if r & 0x8000 != 0 { (r << 1) ^ 0x1021 } else { r << 1 };
            }
            *slot = r;
        }
        data.iter().fold(0xFFFFu16, |crc, &b| (crc << 8) ^ table[((crc >> 8) as u8 ^ b) as usize])
    }

    fn sample() -> Frame {
        Frame {
            tick: 0xDEADBEEF,
            setpoints: [3000, 3100, 3200, 3300, 3400, 2900, 2800, 2700, 2600],
            measured: [2999, 3001, -5, 0, i16::MAX, i16::MIN, 1, 2, 3],
            currents: [-700, 700, 0, 12, -12, 208, -208, 1, -1],
        }
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc16_ccitt_false(b"123456789"), 0x29B1);
        assert_eq!(crc_table_oracle(b"123456789"), 0x29B1);
        assert_eq!(crc16_ccitt_false(b""), 0xFFFF);
    }

    #[test]
    fn frame_is_63_bytes_with_magic_and_version() {
        let b = encode(&sample());
        assert_eq!(b.len(), 63);
        assert_eq!(&b[..3], b"TH\x01");
        assert_eq!(&b[3..7], &0xDEADBEEFu32.to_le_bytes());
    }

    #[test]
    fn rejects_with_offsets() {
        let good = encode(&sample());
        assert!(matches!(decode(&good[..62]), Err(Error::FrameRejected { offset: 62, .. })));
        let mut b = good;
        b[1] = b'X';
        assert!(matches!(decode(&b), Err(Error::FrameRejected { offset: 1, .. })));
        let mut b = good;
        b[2] = 2;
        assert!(matches!(decode(&b), Err(Error::FrameRejected { offset: 2, .. })));
        let mut b = good;
        b[30] ^= 0x40;
        assert!(matches!(decode(&b), Err(Error::FrameRejected { offset: 61, .. })));
    }

    #[test]
    fn engineering_quantisation() {
        let f = Frame::from_engineering(7, &[30.004; 9], &[f64::NAN; 9], &[-0.2084; 9]);
        assert_eq!(f.setpoints[0], 3000);
        assert_eq!(f.measured[0], 0);
        assert_eq!(f.currents[0], -208);
        assert!((f.currents_a()[0] + 0.208).abs() < 1e-12);
        let sat = Frame::from_engineering(0, &[1e9; 9], &[-1e9; 9], &[0.0; 9]);
        assert_eq!(sat.setpoints[0], i16::MAX);
        assert_eq!(sat.measured[0], i16::MIN);
    }

    #[test]
    fn reader_resyncs_after_garbage() {
        let mut r = FrameReader::new();
        let a = encode(&sample());
        let mut bad = a;
        bad[40] ^= 1;
        r.push(b"xxTH");
        r.push(&bad);
        r.push(&a[..10]);
        assert_eq!(r.next_frame(), None);
        r.push(&a[10..]);
        assert_eq!(r.next_frame(), Some(sample()));
        assert!(r.rejected() >= 1);
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        (any::<u32>(), any::<[i16; 9]>(), any::<[i16; 9]>(), any::<[i16; 9]>()).prop_map(|(tick, s, m, c)| Frame {
            tick,
            setpoints: s,
            measured: m,
            currents: c,
        })
    }

    proptest! {
        #[test]
        fn roundtrip(f in arb_frame()) {
            prop_assert_eq!(decode(&encode(&f)).unwrap(), f);
        }

        #[test]
        fn crc_matches_table_oracle(data in proptest::collection::vec(any::<u8>(), 0..200)) {
            prop_assert_eq!(crc16_ccitt_false(&data), crc_table_oracle(&data));
        }

        #[test]
        fn every_single_bit_flip_is_rejected(f in arb_frame(), bit in 0usize..FRAME_LEN * 8) {
            let mut b = encode(&f);
            b[bit / 8] ^= 1 << (bit % 8);
            prop_assert!(decode(&b).is_err());
        }
    }
}
