use serde::{Deserialize, Serialize};

use super::vocab::{S0, S1};
use crate::error::{Error, Result};

/// Lengths of the four consecutive window segments A, B, C, D.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLens {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
}

impl SegmentLens {
    /// 512-token windows with a 32-token B segment.
    pub fn paper() -> Self {
        Self { a: 176, b: 32, c: 128, d: 176 }
    }

    pub fn desk() -> Self {
        Self { a: 44, b: 8, c: 32, d: 44 }
    }

    pub fn total(&self) -> usize {
        self.a + self.b + self.c + self.d
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaclmExample {
    /// `S0 A S1 D`
    pub hyper_input: Vec<usize>,
    /// Segment B.
    pub downstream_input: Vec<usize>,
    /// Segment C.
    pub target: Vec<usize>,
}

pub fn caclm_split(window: &[usize], lens: SegmentLens) -> Result<CaclmExample> {
    if window.len() != lens.total() {
        return Err(Error::Data(format!(
            "window has {} tokens, segments need {}",
            window.len(),
            lens.total()
        )));
    }
    let (a, rest) = window.split_at(lens.a);
    let (b, rest) = rest.split_at(lens.b);
    let (c, d) = rest.split_at(lens.c);
    let mut hyper_input = Vec::with_capacity(lens.a + lens.d + 2);
    hyper_input.push(S0);
    hyper_input.extend_from_slice(a);
    hyper_input.push(S1);
    hyper_input.extend_from_slice(d);
    Ok(CaclmExample {
        hyper_input,
        downstream_input: b.to_vec(),
        target: c.to_vec(),
    })
}
