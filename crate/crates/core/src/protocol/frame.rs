//! Seed wire format.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MEGS"
//!      4     1  version (1)
//!      5     1  flags
//!      6     2  f_c as u16 fixed point, value = raw / 65536
//!      8     2  latent channels
//!     10     2  latent height
//!     12     2  latent width
//!     14     4  scale, f32
//!     18     4  coherence block length, u32
//!     22     4  payload symbol count, u32
//!     26     4  CRC-32 (IEEE) of bytes 0..26
//!     30   4*n  payload, f32
//! ```
//!
//! All integers and floats are little-endian. The header is assumed to
//! arrive intact; only the payload is exposed to channel noise.

use super::ProtocolError;
use crate::genmodel::Dims;

pub const FRAME_MAGIC: &[u8; 4] = b"MEGS";
pub const FRAME_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 30;

/// The payload was produced without a trained codec (benchmark modes).
pub const FLAG_UNCODED: u8 = 0b0000_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct SeedFrame {
    pub flags: u8,
    pub f_c_fixed: u16,
    pub latent: [u16; 3],
    pub scale: f32,
    pub block_length: u32,
    pub payload: Vec<f32>,
}

impl SeedFrame {
    pub fn new(
        f_c: f64,
        latent: Dims,
        scale: f32,
        block_length: usize,
        payload: Vec<f32>,
    ) -> Result<Self, ProtocolError> {
        let narrow = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| ProtocolError::Frame(format!("{what} {v} does not fit in u16")))
        };
        if !(0.0..1.0).contains(&f_c) {
            return Err(ProtocolError::Frame(format!("compression rate {f_c} outside [0, 1)")));
        }
        Ok(SeedFrame {
            flags: 0,
            f_c_fixed: fixed_rate(f_c),
            latent: [
                narrow(latent.channels, "channels")?,
                narrow(latent.height, "height")?,
                narrow(latent.width, "width")?,
            ],
            scale,
            block_length: u32::try_from(block_length)
                .map_err(|_| ProtocolError::Frame("block length too large".into()))?,
            payload,
        })
    }

    pub fn f_c(&self) -> f64 {
        self.f_c_fixed as f64 / 65536.0
    }

    pub fn latent_dims(&self) -> Dims {
        Dims::new(self.latent[0] as usize, self.latent[1] as usize, self.latent[2] as usize)
    }

    pub fn header_bytes(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(FRAME_MAGIC);
        h[4] = FRAME_VERSION;
        h[5] = self.flags;
        h[6..8].copy_from_slice(&self.f_c_fixed.to_le_bytes());
        for (i, d) in self.latent.iter().enumerate() {
            h[8 + 2 * i..10 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[14..18].copy_from_slice(&self.scale.to_le_bytes());
        h[18..22].copy_from_slice(&self.block_length.to_le_bytes());
        h[22..26].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        let crc = crc32fast::hash(&h[..26]);
        h[26..30].copy_from_slice(&crc.to_le_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.payload.len());
        out.extend_from_slice(&self.header_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let err = |m: String| Err(ProtocolError::Frame(m));
        if bytes.len() < HEADER_LEN {
            return err(format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len()));
        }
        if &bytes[0..4] != FRAME_MAGIC {
            return err("bad magic".into());
        }
        if bytes[4] != FRAME_VERSION {
            return err(format!("unsupported frame version {}", bytes[4]));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let stored = u32_at(26);
        let computed = crc32fast::hash(&bytes[..26]);
        if stored != computed {
            return err(format!("header checksum {stored:08x} != {computed:08x}"));
        }
        let count = u32_at(22) as usize;
        let expected = count
            .checked_mul(4)
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or_else(|| ProtocolError::Frame("payload size overflows".into()))?;
        if bytes.len() != expected {
            return err(format!("frame has {} bytes, header promises {expected}", bytes.len()));
        }
        let payload = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(SeedFrame {
            flags: bytes[5],
            f_c_fixed: u16_at(6),
            latent: [u16_at(8), u16_at(10), u16_at(12)],
            scale: f32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes")),
            block_length: u32_at(18),
            payload,
        })
    }

    /// Same header with a different payload (e.g. after the channel).
    pub fn with_payload(&self, payload: Vec<f32>) -> Self {
        SeedFrame { payload, ..self.clone() }
    }
}

pub fn fixed_rate(f_c: f64) -> u16 {
    (f_c * 65536.0).round().min(65535.0) as u16
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> SeedFrame {
        SeedFrame::new(0.5, Dims::new(2, 8, 8), 1.75, 16, vec![0.5, -1.0, 3.25]).unwrap()
    }

    #[test]
    fn layout_is_pinned() {
        let bytes = sample().encode();
        assert_eq!(&bytes[0..4], b"MEGS");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[6..8], &32768u16.to_le_bytes());
        assert_eq!(&bytes[8..14], &[2, 0, 8, 0, 8, 0]);
        assert_eq!(&bytes[22..26], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), HEADER_LEN + 12);
        assert_eq!(&bytes[30..34], &0.5f32.to_le_bytes());
    }

    #[test]
    fn checksum_catches_header_damage() {
        let mut bytes = sample().encode();
        bytes[19] ^= 0x40;
        assert!(matches!(SeedFrame::decode(&bytes), Err(ProtocolError::Frame(_))));
    }

    #[test]
    fn payload_length_must_match() {
        let bytes = sample().encode();
        assert!(SeedFrame::decode(&bytes[..bytes.len() - 4]).is_err());
        assert!(SeedFrame::decode(&bytes[..10]).is_err());
    }

    #[test]
    fn fixed_point_rate() {
        for f_c in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let f = SeedFrame::new(f_c, Dims::new(1, 1, 1), 1.0, 1, vec![]).unwrap();
            assert!((f.f_c() - f_c).abs() <= 0.5 / 65536.0);
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_identical(
            flags in any::<u8>(),
            f_c_fixed in any::<u16>(),
            latent in any::<[u16; 3]>(),
            scale_bits in any::<u32>(),
            block_length in any::<u32>(),
            payload_bits in proptest::collection::vec(any::<u32>(), 0..64),
        ) {
            let frame = SeedFrame {
                flags,
                f_c_fixed,
                latent,
                scale: f32::from_bits(scale_bits),
                block_length,
                payload: payload_bits.iter().map(|&b| f32::from_bits(b)).collect(),
            };
            let bytes = frame.encode();
            let back = SeedFrame::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
            prop_assert_eq!(back.scale.to_bits(), scale_bits);
        }
    }
}
