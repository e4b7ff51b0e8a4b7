use std::fmt;

use serde::{Deserialize, Serialize};

use super::vocab::{
    TokenId, Vocabulary, CLOSE_SYMBOL, OPEN_SYMBOL, POINT_SYMBOL, SEPARATOR_SYMBOL,
    TERMINATOR_SYMBOL,
};
use super::CodecError;

/// Serializable description of an output template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub waypoints: usize,
    pub int_digits: usize,
    pub frac_digits: usize,
    /// When false every position is maskable, formatting included.
    pub fixed_pattern: bool,
}

impl TemplateSpec {
    pub fn new(waypoints: usize, int_digits: usize, frac_digits: usize) -> Result<Self, CodecError> {
        if waypoints == 0 || int_digits == 0 || frac_digits == 0 {
            return Err(CodecError::InvalidTemplate {
                waypoints,
                int_digits,
                frac_digits,
            });
        }
        // 10^(D+F) must fit the integer scratch used by encode.
        if int_digits + frac_digits > 15 {
            return Err(CodecError::InvalidTemplate {
                waypoints,
                int_digits,
                frac_digits,
            });
        }
        Ok(Self {
            waypoints,
            int_digits,
            frac_digits,
            fixed_pattern: true,
        })
    }

    pub fn with_fixed_pattern(mut self, on: bool) -> Self {
        self.fixed_pattern = on;
        self
    }

    /// Six waypoints, two integer digits, one fractional digit.
    pub fn driving() -> Self {
        Self::new(6, 2, 1).expect("static template")
    }

    /// Single waypoint (the chosen parking spot).
    pub fn parking() -> Self {
        Self::new(1, 2, 1).expect("static template")
    }

    /// Tokens in one coordinate slot: sign, integer digits, point, fraction.
    pub fn coordinate_width(&self) -> usize {
        self.int_digits + self.frac_digits + 2
    }

    /// Total sequence length: `[x,y]` per waypoint plus the terminator.
    pub fn length(&self) -> usize {
        self.waypoints * (2 * self.coordinate_width() + 3) + 1
    }
}

/// What a given template position must hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Punct(TokenId),
    Sign,
    IntDigit,
    Point,
    FracDigit,
}

/// Positions of one coordinate's tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordinateSlot {
    pub sign: usize,
    pub int_digits: Vec<usize>,
    pub point: usize,
    pub frac_digits: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaypointSlots {
    pub x: CoordinateSlot,
    pub y: CoordinateSlot,
}

/// Partition of the output positions into frozen formatting and maskable
/// action slots.
#[derive(Debug, Clone)]
pub struct FixedPatternTemplate {
    spec: TemplateSpec,
    layout: Vec<SlotKind>,
    /// Token expected at each position when it carries formatting.
    skeleton: Vec<Option<TokenId>>,
    frozen: Vec<(usize, TokenId)>,
    free: Vec<usize>,
    is_frozen: Vec<bool>,
    slots: Vec<WaypointSlots>,
}

impl FixedPatternTemplate {
    pub fn new(spec: TemplateSpec, vocab: &Vocabulary) -> Self {
        let punct = |s: &str| vocab.id(s).expect("template punctuation in vocabulary");
        let open = punct(OPEN_SYMBOL);
        let sep = punct(SEPARATOR_SYMBOL);
        let close = punct(CLOSE_SYMBOL);
        let term = punct(TERMINATOR_SYMBOL);
        let point = punct(POINT_SYMBOL);

        let mut layout = Vec::with_capacity(spec.length());
        let mut slots = Vec::with_capacity(spec.waypoints);
        let coordinate = |layout: &mut Vec<SlotKind>| {
            let sign = layout.len();
            layout.push(SlotKind::Sign);
            let int_digits = (0..spec.int_digits)
                .map(|_| {
                    layout.push(SlotKind::IntDigit);
                    layout.len() - 1
                })
                .collect();
            let point = layout.len();
            layout.push(SlotKind::Point);
            let frac_digits = (0..spec.frac_digits)
                .map(|_| {
                    layout.push(SlotKind::FracDigit);
                    layout.len() - 1
                })
                .collect();
            CoordinateSlot {
                sign,
                int_digits,
                point,
                frac_digits,
            }
        };
        for _ in 0..spec.waypoints {
            layout.push(SlotKind::Punct(open));
            let x = coordinate(&mut layout);
            layout.push(SlotKind::Punct(sep));
            let y = coordinate(&mut layout);
            layout.push(SlotKind::Punct(close));
            slots.push(WaypointSlots { x, y });
        }
        layout.push(SlotKind::Punct(term));
        debug_assert_eq!(layout.len(), spec.length());

        let skeleton: Vec<Option<TokenId>> = layout
            .iter()
            .map(|k| match k {
                SlotKind::Punct(id) => Some(*id),
                SlotKind::Point => Some(point),
                _ => None,
            })
            .collect();
        let is_frozen: Vec<bool> = skeleton
            .iter()
            .map(|s| spec.fixed_pattern && s.is_some())
            .collect();
        let frozen = skeleton
            .iter()
            .enumerate()
            .filter(|(i, _)| is_frozen[*i])
            .map(|(i, s)| (i, s.expect("frozen positions carry formatting")))
            .collect();
        let free = (0..layout.len()).filter(|&i| !is_frozen[i]).collect();

        Self {
            spec,
            layout,
            skeleton,
            frozen,
            free,
            is_frozen,
            slots,
        }
    }

    pub fn spec(&self) -> TemplateSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn layout(&self) -> &[SlotKind] {
        &self.layout
    }

    /// Formatting token expected at `pos`, whether or not it is frozen.
    pub fn formatting_at(&self, pos: usize) -> Option<TokenId> {
        self.skeleton[pos]
    }

    pub fn frozen_positions(&self) -> &[(usize, TokenId)] {
        &self.frozen
    }

    pub fn free_positions(&self) -> &[usize] {
        &self.free
    }

    pub fn is_frozen(&self, pos: usize) -> bool {
        self.is_frozen[pos]
    }

    pub fn slot_layout(&self) -> &[WaypointSlots] {
        &self.slots
    }

    pub fn waypoint_count(&self) -> usize {
        self.spec.waypoints
    }
}

/// Convenience constructor over the standard vocabulary.
pub fn build_template(
    waypoint_count: usize,
    (int_digits, frac_digits): (usize, usize),
    vocab: &Vocabulary,
) -> Result<FixedPatternTemplate, CodecError> {
    let spec = TemplateSpec::new(waypoint_count, int_digits, frac_digits)?;
    Ok(FixedPatternTemplate::new(spec, vocab))
}

impl fmt::Display for TemplateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "waypoints = {}", self.waypoints)?;
        writeln!(f, "int_digits = {}", self.int_digits)?;
        writeln!(f, "frac_digits = {}", self.frac_digits)?;
        writeln!(f, "fixed_pattern = {}", self.fixed_pattern)
    }
}
