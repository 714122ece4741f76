//! Row-major run-length encoding of binary masks.
//!
//! Text form: `w h r0 r1 r2 ...` where runs alternate background, ink,
//! background, ... starting with background (so `r0` may be 0).

use crate::error::{Error, Result};
use crate::raster::BitMask;

pub fn runs(mask: &BitMask) -> Vec<usize> {
    let mut out = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &b in mask.bits() {
        if b == current {
            len += 1;
        } else {
            out.push(len);
            current = b;
            len = 1;
        }
    }
    out.push(len);
    out
}

pub fn encode(mask: &BitMask) -> String {
    let mut s = format!("{} {}", mask.width(), mask.height());
    for r in runs(mask) {
        s.push(' ');
        s.push_str(&r.to_string());
    }
    s
}

pub fn decode(text: &str) -> Result<BitMask> {
    let mut nums = text.split_whitespace().map(|t| {
        t.parse::<usize>()
            .map_err(|_| Error::parse(1, format!("bad run length {t:?}")))
    });
    let w = nums.next().ok_or_else(|| Error::parse(1, "missing width"))??;
    let h = nums.next().ok_or_else(|| Error::parse(1, "missing height"))??;
    let total = w * h;
    let mut bits = Vec::with_capacity(total);
    let mut value = false;
    for r in nums {
        let r = r?;
        if bits.len() + r > total {
            return Err(Error::parse(1, "runs exceed mask size"));
        }
        bits.extend(std::iter::repeat_n(value, r));
        value = !value;
    }
    if bits.len() != total {
        return Err(Error::parse(1, format!("runs cover {} of {} pixels", bits.len(), total)));
    }
    BitMask::from_bits(w, h, bits)
}
