//! Self-attention visibility masks.
//!
//! Three kinds are supported: the full mask used by the non-streaming
//! teacher, the chunk-wise streaming mask used by the student, and the
//! future-gap mask used by the auxiliary branch attention layer.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Full,
    ChunkStreaming {
        chunk: usize,
        left_context: usize,
        right_context: usize,
    },
    FutureGap {
        gap: usize,
    },
    /// Built from an explicit matrix.
    Custom,
}

/// Boolean `T x T` visibility matrix; `visible(t, k)` means query frame `t`
/// may attend key frame `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    visible: Vec<bool>,
    kind: MaskKind,
}

impl AttentionMask {
    pub fn full(size: usize) -> Result<Self> {
        check_size(size)?;
        Ok(Self {
            size,
            visible: vec![true; size * size],
            kind: MaskKind::Full,
        })
    }

    /// Chunk-wise streaming mask. Frame `t` belongs to chunk `t / chunk` and
    /// sees its whole chunk plus `left_context` frames before the chunk start.
    /// Right context is not supported.
    pub fn chunk_streaming(
        size: usize,
        chunk: usize,
        left_context: usize,
        right_context: usize,
    ) -> Result<Self> {
        check_size(size)?;
        if chunk == 0 {
            return Err(Error::InvalidArgument("chunk size must be at least 1".into()));
        }
        if right_context != 0 {
            return Err(Error::Unsupported(format!(
                "right context {right_context}; only RC = 0 streaming masks are implemented"
            )));
        }
        let mut visible = vec![false; size * size];
        for t in 0..size {
            let (lo, hi) = chunk_window(t, size, chunk, left_context);
            for k in lo..=hi {
                visible[t * size + k] = true;
            }
        }
        Ok(Self {
            size,
            visible,
            kind: MaskKind::ChunkStreaming {
                chunk,
                left_context,
                right_context,
            },
        })
    }

    /// Frame `t` sees `0..=t` and `t + gap + 1..size`; the `gap` frames right
    /// after `t` are hidden.
    pub fn future_gap(size: usize, gap: usize) -> Result<Self> {
        check_size(size)?;
        let mut visible = vec![false; size * size];
        for t in 0..size {
            for k in 0..size {
                visible[t * size + k] = k <= t || k > t + gap;
            }
        }
        Ok(Self {
            size,
            visible,
            kind: MaskKind::FutureGap { gap },
        })
    }

    /// Builds a mask from an explicit visibility matrix. Every row needs at
    /// least one visible entry.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let size = rows.len();
        check_size(size)?;
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::InvalidArgument("mask must be square".into()));
        }
        let mask = Self {
            size,
            visible: rows.concat(),
            kind: MaskKind::Full,
        };
        if let Some(row) = (0..size).find(|&t| mask.row(t).iter().all(|v| !v)) {
            return Err(Error::FullyMaskedRow { row });
        }
        let kind = if mask.visible.iter().all(|&v| v) {
            MaskKind::Full
        } else {
            MaskKind::Custom
        };
        Ok(Self { kind, ..mask })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn is_visible(&self, query: usize, key: usize) -> bool {
        self.visible[query * self.size + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.visible[query * self.size..(query + 1) * self.size]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.visible
    }

    /// Rows of `0`/`1` characters, one line per query frame.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in 0..self.size {
            let line: String = self
                .row(t)
                .iter()
                .map(|&v| if v { '1' } else { '0' })
                .collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 {
        return Err(Error::InvalidArgument("mask size must be at least 1".into()));
    }
    Ok(())
}

/// Inclusive `[lo, hi]` key range visible to frame `t` under the chunk mask.
pub fn chunk_window(t: usize, size: usize, chunk: usize, left_context: usize) -> (usize, usize) {
    let start = chunk * (t / chunk);
    let lo = start.saturating_sub(left_context);
    let hi = (start + chunk - 1).min(size - 1);
    (lo, hi)
}

/// Last frame of the chunk containing `t`, clipped to the sequence.
pub fn chunk_end(t: usize, size: usize, chunk: usize) -> usize {
    (chunk * (t / chunk) + chunk - 1).min(size - 1)
}

pub fn chunk_start(t: usize, chunk: usize) -> usize {
    chunk * (t / chunk)
}
