//! Token vocabulary, fixed-pattern output templates, and conversion between
//! numeric trajectories and token sequences.
//!
//! A waypoint renders as `[±DD.F,±DD.F]` and the sequence ends with `;`.
//! Brackets, separators, decimal points and the terminator are formatting;
//! signs and digits carry the plan.

mod sequence;
mod template;
mod vocab;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sequence::TokenSequence;
pub use template::{
    build_template, CoordinateSlot, FixedPatternTemplate, SlotKind, TemplateSpec, WaypointSlots,
};
pub use vocab::{SymbolClass, TokenId, Vocabulary, INSTRUCTION_WORDS, MASK_SYMBOL, PAD_SYMBOL};

/// Waypoint spacing in seconds.
pub const WAYPOINT_DT: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("invalid template: waypoints={waypoints}, int_digits={int_digits}, frac_digits={frac_digits} (all must be >= 1)")]
    InvalidTemplate {
        waypoints: usize,
        int_digits: usize,
        frac_digits: usize,
    },
    #[error("coordinate {value} does not fit {int_digits} integer digits")]
    Overflow { value: f64, int_digits: usize },
    #[error("trajectory has {got} waypoints, template expects {expected}")]
    WaypointCount { expected: usize, got: usize },
    #[error("malformed sequence at position {position}: {reason}")]
    MalformedSequence { position: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    /// Meters forward.
    pub x: f64,
    /// Meters lateral, positive to the left.
    pub y: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Waypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Waypoints at uniform spacing `dt`, the first one at `t = dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Waypoint>) -> Self {
        Self {
            waypoints,
            dt: WAYPOINT_DT,
        }
    }

    pub fn zeros(count: usize) -> Self {
        Self::new(vec![Waypoint::new(0.0, 0.0); count])
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Timestamp of waypoint `k`.
    pub fn time_of(&self, k: usize) -> f64 {
        (k + 1) as f64 * self.dt
    }
}

/// A vocabulary and a template, bundled for encode/decode.
#[derive(Debug, Clone)]
pub struct Codec {
    vocab: Arc<Vocabulary>,
    template: FixedPatternTemplate,
}

impl Codec {
    pub fn new(spec: TemplateSpec) -> Self {
        Self::with_vocab(Arc::new(Vocabulary::standard()), spec)
    }

    pub fn with_vocab(vocab: Arc<Vocabulary>, spec: TemplateSpec) -> Self {
        let template = FixedPatternTemplate::new(spec, &vocab);
        Self { vocab, template }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn shared_vocab(&self) -> Arc<Vocabulary> {
        Arc::clone(&self.vocab)
    }

    pub fn template(&self) -> &FixedPatternTemplate {
        &self.template
    }

    pub fn spec(&self) -> TemplateSpec {
        self.template.spec()
    }

    pub fn fresh_masked(&self) -> TokenSequence {
        TokenSequence::fresh_masked(&self.template, &self.vocab)
    }

    /// Fully unmasked sequence for `traj`, rounded half away from zero to
    /// `frac_digits`.
    pub fn encode(&self, traj: &Trajectory) -> Result<TokenSequence, CodecError> {
        let tpl = &self.template;
        let spec = tpl.spec();
        if traj.len() != tpl.waypoint_count() {
            return Err(CodecError::WaypointCount {
                expected: tpl.waypoint_count(),
                got: traj.len(),
            });
        }
        let mut ids: Vec<TokenId> = (0..tpl.len())
            .map(|pos| tpl.formatting_at(pos).unwrap_or(self.vocab.mask_id()))
            .collect();
        for (wp, slots) in traj.waypoints.iter().zip(tpl.slot_layout()) {
            self.write_coordinate(&mut ids, &slots.x, wp.x, spec)?;
            self.write_coordinate(&mut ids, &slots.y, wp.y, spec)?;
        }
        Ok(TokenSequence::from_ids(ids, self.vocab.mask_id()))
    }

    fn write_coordinate(
        &self,
        ids: &mut [TokenId],
        slot: &CoordinateSlot,
        value: f64,
        spec: TemplateSpec,
    ) -> Result<(), CodecError> {
        let overflow = CodecError::Overflow {
            value,
            int_digits: spec.int_digits,
        };
        if !value.is_finite() {
            return Err(overflow);
        }
        let scale = 10f64.powi(spec.frac_digits as i32);
        let limit = 10u64.pow((spec.int_digits + spec.frac_digits) as u32);
        // f64::round rounds half away from zero.
        let units = (value.abs() * scale).round();
        if units >= limit as f64 {
            return Err(overflow);
        }
        let mut units = units as u64;
        ids[slot.sign] = self.vocab.sign(value < 0.0 && units != 0);
        for &pos in slot.frac_digits.iter().rev().chain(slot.int_digits.iter().rev()) {
            ids[pos] = self.vocab.digit((units % 10) as u8);
            units /= 10;
        }
        Ok(())
    }

    /// Inverse of [`Codec::encode`].
    pub fn decode(&self, seq: &TokenSequence) -> Result<Trajectory, CodecError> {
        let tpl = &self.template;
        if seq.len() != tpl.len() {
            return Err(CodecError::MalformedSequence {
                position: seq.len().min(tpl.len()),
                reason: format!("length {} != template length {}", seq.len(), tpl.len()),
            });
        }
        for (pos, &id) in seq.ids().iter().enumerate() {
            if let Some(expected) = tpl.formatting_at(pos) {
                if id != expected {
                    return Err(self.malformed(pos, id, "formatting token"));
                }
            }
        }
        let waypoints = tpl
            .slot_layout()
            .iter()
            .map(|slots| {
                Ok(Waypoint::new(
                    self.read_coordinate(seq, &slots.x)?,
                    self.read_coordinate(seq, &slots.y)?,
                ))
            })
            .collect::<Result<Vec<_>, CodecError>>()?;
        Ok(Trajectory::new(waypoints))
    }

    /// Parses the rendered form produced by [`TokenSequence::render`], one
    /// character per position with `_` for a mask.
    pub fn parse(&self, text: &str) -> Result<TokenSequence, CodecError> {
        let mask = self.vocab.mask_id();
        let ids = text
            .chars()
            .enumerate()
            .map(|(pos, ch)| {
                if ch == '_' {
                    return Ok(mask);
                }
                let mut buf = [0u8; 4];
                self.vocab
                    .id(ch.encode_utf8(&mut buf))
                    .ok_or_else(|| CodecError::MalformedSequence {
                        position: pos,
                        reason: format!("unknown symbol {ch:?}"),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let seq = TokenSequence::from_ids(ids, mask);
        if seq.len() != self.template.len() {
            return Err(CodecError::MalformedSequence {
                position: seq.len().min(self.template.len()),
                reason: format!("length {} != template length {}", seq.len(), self.template.len()),
            });
        }
        Ok(seq)
    }

    fn read_coordinate(&self, seq: &TokenSequence, slot: &CoordinateSlot) -> Result<f64, CodecError> {
        let ids = seq.ids();
        let negative = match self.vocab.class(ids[slot.sign]) {
            Some(SymbolClass::Sign(neg)) => neg,
            _ => return Err(self.malformed(slot.sign, ids[slot.sign], "sign")),
        };
        let mut units: u64 = 0;
        for &pos in slot.int_digits.iter().chain(&slot.frac_digits) {
            match self.vocab.class(ids[pos]) {
                Some(SymbolClass::Digit(d)) => units = units * 10 + d as u64,
                _ => return Err(self.malformed(pos, ids[pos], "digit")),
            }
        }
        let value = units as f64 / 10f64.powi(slot.frac_digits.len() as i32);
        Ok(if negative { -value } else { value })
    }

    fn malformed(&self, position: usize, id: TokenId, wanted: &str) -> CodecError {
        let got = self.vocab.symbol(id).unwrap_or("<out of range>");
        CodecError::MalformedSequence {
            position,
            reason: format!("expected {wanted}, found {got:?}"),
        }
    }
}
