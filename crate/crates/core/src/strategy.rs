//! Admissible feedback dividend-rate rules.
//!
//! Every rule is time-independent and piecewise constant in the surplus. The
//! pieces are left-open, right-closed intervals `(c_{i-1}, c_i]`, so a barrier
//! at `x̃` pays nothing at `x = x̃` itself.

use std::io::Read;

use thiserror::Error;

use crate::model::ModelParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("rate {rate} outside [0, {d_bar}]")]
    RateOutOfRange { rate: f64, d_bar: f64 },
    #[error("barrier level must be finite and ≥ 0, got {0}")]
    BadLevel(f64),
    #[error("tabulated strategy needs at least one knot")]
    EmptyTable,
    #[error("knots must be finite and strictly increasing (row {0})")]
    UnsortedKnots(usize),
    #[error("surplus {x} beyond last knot {last} and no extrapolation rate declared")]
    TabulatedOutOfRange { x: f64, last: f64 },
    #[error("csv header must be `x,rate`, found `{0}`")]
    BadHeader(String),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Rule<T> {
    Barrier { level: T },
    Constant { rate: T },
    Zero,
    Tabulated { knots: Vec<T>, rates: Vec<T>, tail: Option<T> },
}

/// A dividend-rate rule with every rate in `[0, d̄]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy<T> {
    rule: Rule<T>,
    d_bar: T,
}

/// Variant tag, mostly for reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Barrier,
    Constant,
    Zero,
    Tabulated,
}

fn check_rate<T: Scalar>(rate: T, d_bar: T) -> Result<T, StrategyError> {
    if rate.is_finite() && rate >= T::zero() && rate <= d_bar {
        Ok(rate)
    } else {
        Err(StrategyError::RateOutOfRange { rate: rate.as_f64(), d_bar: d_bar.as_f64() })
    }
}

impl<T: Scalar> Strategy<T> {
    /// Pay nothing up to and including `level`, `d̄` above it.
    pub fn barrier(p: &ModelParams<T>, level: T) -> Result<Self, StrategyError> {
        if !level.is_finite() || level < T::zero() {
            return Err(StrategyError::BadLevel(level.as_f64()));
        }
        Ok(Self { rule: Rule::Barrier { level }, d_bar: p.d_bar() })
    }

    pub fn constant(p: &ModelParams<T>, rate: T) -> Result<Self, StrategyError> {
        let rate = check_rate(rate, p.d_bar())?;
        Ok(Self { rule: Rule::Constant { rate }, d_bar: p.d_bar() })
    }

    pub fn max_rate(p: &ModelParams<T>) -> Self {
        Self { rule: Rule::Constant { rate: p.d_bar() }, d_bar: p.d_bar() }
    }

    pub fn zero(p: &ModelParams<T>) -> Self {
        Self { rule: Rule::Zero, d_bar: p.d_bar() }
    }

    /// Step table: `rates[0]` applies for `x ≤ knots[0]`, `rates[i]` on
    /// `(knots[i-1], knots[i]]`, and `tail` (if any) beyond the last knot.
    pub fn tabulated(
        p: &ModelParams<T>,
        knots: Vec<T>,
        rates: Vec<T>,
        tail: Option<T>,
    ) -> Result<Self, StrategyError> {
        if knots.is_empty() || knots.len() != rates.len() {
            return Err(StrategyError::EmptyTable);
        }
        for (i, k) in knots.iter().enumerate() {
            if !k.is_finite() || (i > 0 && *k <= knots[i - 1]) {
                return Err(StrategyError::UnsortedKnots(i));
            }
        }
        for r in rates.iter().chain(tail.iter()) {
            check_rate(*r, p.d_bar())?;
        }
        Ok(Self { rule: Rule::Tabulated { knots, rates, tail }, d_bar: p.d_bar() })
    }

    /// Reads a two-column `x,rate` CSV with a header row.
    pub fn from_csv<R: Read>(p: &ModelParams<T>, reader: R, tail: Option<T>) -> Result<Self, StrategyError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| StrategyError::Csv(e.to_string()))?.clone();
        if header.len() != 2 || &header[0] != "x" || &header[1] != "rate" {
            return Err(StrategyError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
        }
        let mut knots = Vec::new();
        let mut rates = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| StrategyError::Csv(e.to_string()))?;
            let parse = |s: &str| {
                s.parse::<f64>().map(T::lit).map_err(|e| StrategyError::Csv(format!("`{s}`: {e}")))
            };
            knots.push(parse(&row[0])?);
            rates.push(parse(&row[1])?);
        }
        Self::tabulated(p, knots, rates, tail)
    }

    pub fn kind(&self) -> StrategyKind {
        match self.rule {
            Rule::Barrier { .. } => StrategyKind::Barrier,
            Rule::Constant { .. } => StrategyKind::Constant,
            Rule::Zero => StrategyKind::Zero,
            Rule::Tabulated { .. } => StrategyKind::Tabulated,
        }
    }

    pub fn d_bar(&self) -> T {
        self.d_bar
    }

    pub fn barrier_level(&self) -> Option<T> {
        match self.rule {
            Rule::Barrier { level } => Some(level),
            _ => None,
        }
    }

    /// `Some(c)` when the rule pays `c` at every surplus level.
    pub fn uniform_rate(&self) -> Option<T> {
        match &self.rule {
            Rule::Constant { rate } => Some(*rate),
            Rule::Zero => Some(T::zero()),
            _ => None,
        }
    }

    pub fn dividend_rate(&self, x: T) -> Result<T, StrategyError> {
        match &self.rule {
            Rule::Barrier { level } => Ok(if x <= *level { T::zero() } else { self.d_bar }),
            Rule::Constant { rate } => Ok(*rate),
            Rule::Zero => Ok(T::zero()),
            Rule::Tabulated { knots, rates, tail } => {
                let i = knots.partition_point(|k| *k < x);
                if i < knots.len() {
                    Ok(rates[i])
                } else {
                    tail.ok_or(StrategyError::TabulatedOutOfRange {
                        x: x.as_f64(),
                        last: knots[knots.len() - 1].as_f64(),
                    })
                }
            }
        }
    }

    /// Rate paid for large surplus, if the rule defines one.
    pub fn far_field_rate(&self) -> Option<T> {
        match &self.rule {
            Rule::Barrier { .. } => Some(self.d_bar),
            Rule::Constant { rate } => Some(*rate),
            Rule::Zero => Some(T::zero()),
            Rule::Tabulated { tail, .. } => *tail,
        }
    }

    /// The rule as a sorted list of jump points and per-piece rates.
    pub fn partition(&self) -> Result<Partition<T>, StrategyError> {
        match &self.rule {
            Rule::Barrier { level } => Ok(Partition { cuts: vec![*level], rates: vec![T::zero(), self.d_bar] }),
            Rule::Constant { rate } => Ok(Partition::uniform(*rate)),
            Rule::Zero => Ok(Partition::uniform(T::zero())),
            Rule::Tabulated { knots, rates, tail } => {
                let tail = tail.ok_or(StrategyError::TabulatedOutOfRange {
                    x: f64::INFINITY,
                    last: knots[knots.len() - 1].as_f64(),
                })?;
                let mut cuts = Vec::new();
                let mut out = vec![rates[0]];
                let all_rates = rates.iter().skip(1).chain(std::iter::once(&tail));
                for (k, r) in knots.iter().zip(all_rates) {
                    if *r != out[out.len() - 1] {
                        cuts.push(*k);
                        out.push(*r);
                    }
                }
                Ok(Partition { cuts, rates: out })
            }
        }
    }
}

/// Piecewise-constant rate map. Piece `i` covers `(cuts[i-1], cuts[i]]`, with
/// the first piece unbounded below and the last unbounded above.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition<T> {
    cuts: Vec<T>,
    rates: Vec<T>,
}

/// A discontinuity of the rate map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump<T> {
    pub at: T,
    pub below: T,
    pub above: T,
}

impl<T: Scalar> Partition<T> {
    pub fn uniform(rate: T) -> Self {
        Self { cuts: Vec::new(), rates: vec![rate] }
    }

    #[inline]
    pub fn piece(&self, x: T) -> usize {
        match self.cuts.len() {
            0 => 0,
            1 => usize::from(x > self.cuts[0]),
            _ => self.cuts.partition_point(|c| *c < x),
        }
    }

    #[inline]
    pub fn rate_of(&self, piece: usize) -> T {
        self.rates[piece]
    }

    #[inline]
    pub fn rate(&self, x: T) -> T {
        self.rates[self.piece(x)]
    }

    /// `(lower, upper)` cut around a piece; `None` means unbounded.
    #[inline]
    pub fn bounds(&self, piece: usize) -> (Option<T>, Option<T>) {
        let lo = if piece == 0 { None } else { Some(self.cuts[piece - 1]) };
        (lo, self.cuts.get(piece).copied())
    }

    pub fn jumps(&self) -> Vec<Jump<T>> {
        self.cuts
            .iter()
            .enumerate()
            .map(|(i, c)| Jump { at: *c, below: self.rates[i], above: self.rates[i + 1] })
            .collect()
    }

    pub fn is_uniform(&self) -> bool {
        self.cuts.is_empty()
    }
}
