//! `.wtok` token bitstream.
//!
//! ```text
//! "WTOK" | version u8 | H u16 | W u16 | h u16 | w u16 | g u8 | d' u8 | payload
//! ```
//!
//! Integers are little-endian. The payload walks positions row-major, groups in
//! order, and writes each token's `d'` bits most significant first (bit 1 is a
//! `+1` sign), zero-padded to a whole byte. No entropy coding is applied.

use crate::error::{Error, Result};
use crate::quantizer::TokenGrid;

pub const MAGIC: &[u8; 4] = b"WTOK";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub image_height: u16,
    pub image_width: u16,
    pub h: u16,
    pub w: u16,
    pub g: u8,
    pub d_prime: u8,
}

impl Header {
    pub fn payload_bits(&self) -> usize {
        self.h as usize * self.w as usize * self.g as usize * self.d_prime as usize
    }

    pub fn payload_len(&self) -> usize {
        self.payload_bits().div_ceil(8)
    }

    /// Ratio of raw 8-bit RGB bits to token bits for this stream.
    pub fn compression_ratio(&self) -> f64 {
        compression_ratio(
            self.image_height as usize,
            self.image_width as usize,
            3,
            8,
            self.h as usize,
            self.w as usize,
            self.g as usize,
            self.d_prime as usize,
        )
    }
}

/// `(H * W * C * bits) / (h * w * g * d')`.
#[allow(clippy::too_many_arguments)]
pub fn compression_ratio(
    image_height: usize,
    image_width: usize,
    channels: usize,
    bits_per_sample: usize,
    h: usize,
    w: usize,
    g: usize,
    d_prime: usize,
) -> f64 {
    (image_height * image_width * channels * bits_per_sample) as f64 / (h * w * g * d_prime) as f64
}

fn field<T: TryFrom<usize>>(name: &str, v: usize) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Bitstream(format!("{name}={v} does not fit the header field")))
}

/// Serialize `tokens` for an `image_height x image_width` source image.
pub fn pack(tokens: &TokenGrid, image_height: usize, image_width: usize) -> Result<Vec<u8>> {
    if tokens.h == 0 || tokens.w == 0 {
        return Err(Error::Bitstream("empty token grid".into()));
    }
    if tokens.indices.len() != tokens.h * tokens.w * tokens.g {
        return Err(Error::Bitstream("token grid length does not match its shape".into()));
    }
    let header = Header {
        image_height: field("H", image_height)?,
        image_width: field("W", image_width)?,
        h: field("h", tokens.h)?,
        w: field("w", tokens.w)?,
        g: field("g", tokens.g)?,
        d_prime: field("d'", tokens.d_prime)?,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for v in [header.image_height, header.image_width, header.h, header.w] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(header.g);
    out.push(header.d_prime);

    let dp = tokens.d_prime;
    let mut acc = 0u8;
    let mut filled = 0;
    for &idx in &tokens.indices {
        if dp < 32 && idx >> dp != 0 {
            return Err(Error::Bitstream(format!("token {idx} exceeds {dp} bits")));
        }
        for b in (0..dp).rev() {
            acc = (acc << 1) | ((idx >> b) & 1) as u8;
            filled += 1;
            if filled == 8 {
                out.push(acc);
                acc = 0;
                filled = 0;
            }
        }
    }
    if filled > 0 {
        out.push(acc << (8 - filled));
    }
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Bitstream(format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Bitstream("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Bitstream(format!("unsupported version {}", bytes[4])));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let header = Header {
        image_height: u16_at(5),
        image_width: u16_at(7),
        h: u16_at(9),
        w: u16_at(11),
        g: bytes[13],
        d_prime: bytes[14],
    };
    if header.h == 0 || header.w == 0 || header.g == 0 || header.d_prime == 0 {
        return Err(Error::Bitstream("zero dimension in header".into()));
    }
    if header.d_prime > 32 {
        return Err(Error::Bitstream(format!("d'={} exceeds 32", header.d_prime)));
    }
    Ok(header)
}

pub fn unpack(bytes: &[u8]) -> Result<(Header, TokenGrid)> {
    let header = read_header(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let need = header.payload_len();
    if payload.len() < need {
        return Err(Error::Bitstream(format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(Error::Bitstream(format!("{} trailing bytes", payload.len() - need)));
    }
    let bits = header.payload_bits();
    if bits % 8 != 0 && payload[need - 1] & (0xff >> (bits % 8)) != 0 {
        return Err(Error::Bitstream("nonzero padding bits".into()));
    }
    let dp = header.d_prime as usize;
    let count = header.h as usize * header.w as usize * header.g as usize;
    let mut indices = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut idx = 0u32;
        for _ in 0..dp {
            let bit = (payload[pos / 8] >> (7 - pos % 8)) & 1;
            idx = (idx << 1) | bit as u32;
            pos += 1;
        }
        indices.push(idx);
    }
    let grid = TokenGrid::new(header.h as usize, header.w as usize, header.g as usize, dp, indices)?;
    Ok((header, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_layout() {
        let t = TokenGrid::new(1, 1, 1, 2, vec![3]).unwrap();
        let bytes = pack(&t, 2, 2).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 1);
        assert_eq!(bytes[HEADER_LEN], 0b1100_0000);
        assert_eq!(unpack(&bytes).unwrap().1, t);
    }

    #[test]
    fn header_is_little_endian() {
        let t = TokenGrid::new(1, 2, 1, 8, vec![0xab, 0x01]).unwrap();
        let bytes = pack(&t, 0x0102, 0x0304).unwrap();
        assert_eq!(&bytes[..HEADER_LEN], b"WTOK\x01\x02\x01\x04\x03\x01\x00\x02\x00\x01\x08");
        assert_eq!(&bytes[HEADER_LEN..], &[0xab, 0x01]);
    }

    #[test]
    fn table_ratios() {
        assert_eq!(compression_ratio(256, 256, 3, 8, 8, 8, 4, 8), 768.0);
        assert_eq!(compression_ratio(256, 256, 3, 8, 16, 16, 4, 8), 192.0);
        assert_eq!(compression_ratio(256, 256, 3, 8, 32, 32, 4, 8), 48.0);
        assert_eq!(compression_ratio(256, 256, 3, 8, 32, 32, 8, 8), 24.0);
    }

    #[test]
    fn malformed_streams() {
        let t = TokenGrid::new(1, 1, 1, 3, vec![5]).unwrap();
        let good = pack(&t, 4, 4).unwrap();
        assert!(unpack(&good[..HEADER_LEN]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(unpack(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(unpack(&bad).is_err());
        let mut bad = good.clone();
        *bad.last_mut().unwrap() |= 1;
        assert!(unpack(&bad).is_err());
        let mut bad = good;
        bad.push(0);
        assert!(unpack(&bad).is_err());
    }

    #[test]
    fn oversized_tokens_are_rejected() {
        let t = TokenGrid {
            h: 1,
            w: 1,
            g: 1,
            d_prime: 2,
            indices: vec![4],
        };
        assert!(pack(&t, 1, 1).is_err());
    }
}
