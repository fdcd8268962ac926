//! Byte-budget rate control over the anchor hierarchy.
//!
//! Anchor levels give a discrete set of measured rates. A target budget is
//! located between two anchors and the gaussian count is interpolated
//! linearly in exact integer arithmetic; the extra gaussians beyond the lower
//! anchor are the top of the next context's importance ranking. Hitting an
//! anchor rate exactly reproduces that anchor's bitstream byte for byte.

use crate::codec::{encode_subset, QuantSpec, ANCHOR_INTERPOLATED};
use crate::error::{invalid, RateError, Result};
use crate::hierarchy::{AnchorHierarchy, ScoreMode};
use crate::image::ImageBuffer;
use crate::importance::{rank_descending, ScoreTable};
use crate::loss::LossConfig;
use crate::splat::{GaussianSet, RenderConfig};

/// Measured anchor rates: gaussian count and encoded size per level.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    counts: Vec<u64>,
    rates: Vec<u64>,
}

impl RateTable {
    pub fn new(counts: Vec<u64>, rates: Vec<u64>) -> Result<Self> {
        if counts.is_empty() || counts.len() != rates.len() {
            return Err(invalid!(
                "rate table needs matching non-empty counts and rates, got {} and {}",
                counts.len(),
                rates.len()
            ));
        }
        if !counts.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid!("rate table counts must be strictly ascending"));
        }
        if !rates.windows(2).all(|w| w[0] <= w[1]) {
            return Err(invalid!("rate table rates must be non-decreasing"));
        }
        Ok(Self { counts, rates })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Gaussian count at 1-based level `l`.
    pub fn count(&self, l: usize) -> u64 {
        self.counts[l - 1]
    }

    /// Encoded bytes at 1-based level `l`.
    pub fn rate(&self, l: usize) -> u64 {
        self.rates[l - 1]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn rates(&self) -> &[u64] {
        &self.rates
    }

    pub fn min_rate(&self) -> u64 {
        self.rates[0]
    }

    pub fn max_rate(&self) -> u64 {
        *self.rates.last().unwrap()
    }

    /// Little-endian records: u8 level count, then (u64 count, u64 rate) each.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + 16 * self.len());
        out.push(self.len() as u8);
        for (c, r) in self.counts.iter().zip(&self.rates) {
            out.extend_from_slice(&c.to_le_bytes());
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(invalid!("rate table payload is empty"));
        }
        let n = bytes[0] as usize;
        if bytes.len() != 1 + 16 * n {
            return Err(invalid!(
                "rate table payload of {} bytes does not hold {n} levels",
                bytes.len()
            ));
        }
        let mut counts = Vec::with_capacity(n);
        let mut rates = Vec::with_capacity(n);
        for rec in bytes[1..].chunks_exact(16) {
            counts.push(u64::from_le_bytes(rec[0..8].try_into().unwrap()));
            rates.push(u64::from_le_bytes(rec[8..16].try_into().unwrap()));
        }
        Self::new(counts, rates)
    }
}

/// Encodes every anchor level and records its exact size.
pub fn anchor_rates(
    set: &GaussianSet,
    hierarchy: &AnchorHierarchy,
    spec: &QuantSpec,
) -> Result<RateTable> {
    let mut counts = Vec::with_capacity(hierarchy.num_levels());
    let mut rates = Vec::with_capacity(hierarchy.num_levels());
    for l in 1..=hierarchy.num_levels() {
        let level = hierarchy.level(l)?;
        counts.push(level.len() as u64);
        rates.push(encode_subset(set, level, spec, l as u8)?.len() as u64);
    }
    RateTable::new(counts, rates)
}

/// Where a target budget falls in the anchor ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorLocation {
    /// 1-based level whose rate is the largest not exceeding the target
    /// (after clamping).
    pub level: usize,
    /// Target was below the minimum rate and was clamped up to it.
    pub clamped_below: bool,
    /// Target was above the maximum rate and was clamped down to it.
    pub clamped_above: bool,
}

/// Finds the anchor pair bracketing `target_bytes`. Budgets above the top
/// anchor clamp to it; budgets below the bottom anchor are an error unless
/// `clamp_below` opts into the minimum rate.
pub fn locate_anchor(
    table: &RateTable,
    target_bytes: u64,
    clamp_below: bool,
) -> Result<AnchorLocation, RateError> {
    if table.is_empty() {
        return Err(RateError::EmptyTable);
    }
    if target_bytes < table.min_rate() {
        if !clamp_below {
            return Err(RateError::BelowMinimum { target: target_bytes, min: table.min_rate() });
        }
        return Ok(AnchorLocation { level: 1, clamped_below: true, clamped_above: false });
    }
    if target_bytes >= table.max_rate() {
        return Ok(AnchorLocation {
            level: table.len(),
            clamped_below: false,
            clamped_above: target_bytes > table.max_rate(),
        });
    }
    let level = table.rates.partition_point(|&r| r <= target_bytes);
    Ok(AnchorLocation { level, clamped_below: false, clamped_above: false })
}

/// Interpolates the gaussian count for a budget between anchors `level` and
/// `level + 1`, rounding half up, entirely in integer arithmetic.
pub fn target_count(table: &RateTable, level: usize, target_bytes: u64) -> Result<u64, RateError> {
    if table.is_empty() {
        return Err(RateError::EmptyTable);
    }
    assert!(level >= 1 && level < table.len(), "interpolation needs an upper anchor");
    let (r0, r1) = (table.rate(level), table.rate(level + 1));
    let (n0, n1) = (table.count(level), table.count(level + 1));
    if r0 == r1 {
        return Err(RateError::DegenerateTable { level, next: level + 1, rate: r0 });
    }
    let t = target_bytes.clamp(r0, r1);
    let numer = (t - r0) as u128 * (n1 - n0) as u128;
    let denom = (r1 - r0) as u128;
    let extra = (2 * numer + denom) / (2 * denom);
    Ok(n0 + extra as u64)
}

/// Top `budget` indices of the context ranking, returned sorted ascending
/// for direct use as an encode subset.
pub fn select_delta(scores: &ScoreTable, budget: usize) -> Result<Vec<u32>, RateError> {
    if budget > scores.len() {
        return Err(RateError::BudgetExceedsContext { budget, available: scores.len() });
    }
    let mut chosen: Vec<u32> = rank_descending(scores)[..budget].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Options for rate-targeted encoding.
#[derive(Debug, Clone, Copy, Default)]
pub struct RateControlOpts {
    /// Accept budgets below the minimum anchor rate by clamping to it.
    pub clamp_below: bool,
    /// After encoding, adjust the delta budget by one gaussian if that moves
    /// the achieved size to the correct side of the target.
    pub one_step_correction: bool,
}

/// What a rate-targeted encode actually produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeReport {
    pub target_bytes: u64,
    pub achieved_bytes: u64,
    /// Lower anchor of the pair used.
    pub anchor_level: usize,
    pub gaussian_count: u64,
    pub clamped_below: bool,
    pub clamped_above: bool,
    /// The one-step correction re-encode was applied.
    pub corrected: bool,
}

/// Binds a scene, its hierarchy, pinned quantization, and measured rates
/// into a rate-targeted encoder. Context rankings come from the hierarchy's
/// cache; the target image is only needed for rankings not yet cached.
pub struct RateController<'a> {
    set: &'a GaussianSet,
    hierarchy: &'a AnchorHierarchy,
    spec: &'a QuantSpec,
    table: &'a RateTable,
    render_cfg: RenderConfig,
    loss_cfg: LossConfig,
    target_image: Option<&'a ImageBuffer>,
    opts: RateControlOpts,
}

impl<'a> RateController<'a> {
    pub fn new(
        set: &'a GaussianSet,
        hierarchy: &'a AnchorHierarchy,
        spec: &'a QuantSpec,
        table: &'a RateTable,
        render_cfg: RenderConfig,
        loss_cfg: LossConfig,
        target_image: Option<&'a ImageBuffer>,
        opts: RateControlOpts,
    ) -> Result<Self> {
        if table.len() != hierarchy.num_levels() {
            return Err(invalid!(
                "rate table has {} levels but the hierarchy has {}",
                table.len(),
                hierarchy.num_levels()
            ));
        }
        for l in 1..=hierarchy.num_levels() {
            let have = hierarchy.level(l)?.len() as u64;
            if table.count(l) != have {
                return Err(invalid!(
                    "rate table count {} at level {l} does not match hierarchy level size {have}",
                    table.count(l)
                ));
            }
        }
        if set.len() as u32 != hierarchy.total() {
            return Err(invalid!(
                "set has {} gaussians but the hierarchy was built over {}",
                set.len(),
                hierarchy.total()
            ));
        }
        Ok(Self { set, hierarchy, spec, table, render_cfg, loss_cfg, target_image, opts })
    }

    fn context_ranking(&self, level: usize, mode: ScoreMode) -> Result<std::sync::Arc<ScoreTable>> {
        match self.target_image {
            Some(target) => self.hierarchy.context_scores(
                level,
                mode,
                self.set,
                target,
                &self.render_cfg,
                &self.loss_cfg,
            ),
            None => self.hierarchy.cached_table(level, mode).ok_or_else(|| {
                invalid!(
                    "context scores for level {level} ({mode}) are not cached and no target \
                     image is available to compute them"
                )
            }),
        }
    }

    fn encode_with_budget(
        &self,
        level: usize,
        budget: usize,
        mode: ScoreMode,
    ) -> Result<(Vec<u8>, u64)> {
        let base = self.hierarchy.level(level)?;
        if budget == 0 {
            let bytes = encode_subset(self.set, base, self.spec, level as u8)?;
            let count = base.len() as u64;
            return Ok((bytes, count));
        }
        let ranking = self.context_ranking(level + 1, mode)?;
        let delta = select_delta(&ranking, budget)?;
        let mut subset = Vec::with_capacity(base.len() + delta.len());
        subset.extend_from_slice(base);
        subset.extend_from_slice(&delta);
        subset.sort_unstable();
        let count = subset.len() as u64;
        let bytes = encode_subset(self.set, &subset, self.spec, ANCHOR_INTERPOLATED)?;
        Ok((bytes, count))
    }

    /// Encodes the scene at the given byte budget.
    pub fn encode_at_rate(
        &self,
        target_bytes: u64,
        mode: ScoreMode,
    ) -> Result<(Vec<u8>, EncodeReport)> {
        let loc = locate_anchor(self.table, target_bytes, self.opts.clamp_below)?;
        let (mut budget, context_size) = if loc.level == self.table.len() || loc.clamped_below {
            (0usize, 0usize)
        } else {
            let count = target_count(self.table, loc.level, target_bytes)?;
            let budget = (count - self.table.count(loc.level)) as usize;
            (budget, self.hierarchy.context(loc.level + 1)?.len())
        };

        let (mut bytes, mut count) = self.encode_with_budget(loc.level, budget, mode)?;
        let mut corrected = false;
        if self.opts.one_step_correction {
            let achieved = bytes.len() as u64;
            if achieved > target_bytes && budget > 0 {
                budget -= 1;
                (bytes, count) = self.encode_with_budget(loc.level, budget, mode)?;
                corrected = true;
            } else if achieved < target_bytes && budget < context_size {
                let (try_bytes, try_count) =
                    self.encode_with_budget(loc.level, budget + 1, mode)?;
                if try_bytes.len() as u64 <= target_bytes {
                    bytes = try_bytes;
                    count = try_count;
                    corrected = true;
                }
            }
        }

        let report = EncodeReport {
            target_bytes,
            achieved_bytes: bytes.len() as u64,
            anchor_level: loc.level,
            gaussian_count: count,
            clamped_below: loc.clamped_below,
            clamped_above: loc.clamped_above,
            corrected,
        };
        Ok((bytes, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> RateTable {
        RateTable::new(vec![102, 205, 310, 400], vec![5000, 9800, 15000, 20000]).unwrap()
    }

    #[test]
    fn table_validation() {
        assert!(RateTable::new(vec![], vec![]).is_err());
        assert!(RateTable::new(vec![10, 10], vec![1, 2]).is_err());
        assert!(RateTable::new(vec![10, 20], vec![5, 4]).is_err());
        assert!(RateTable::new(vec![10, 20], vec![5, 5]).is_ok());
        assert!(RateTable::new(vec![10], vec![1, 2]).is_err());
    }

    #[test]
    fn locating_anchors() {
        let t = table();
        assert_eq!(
            locate_anchor(&t, 5000, false).unwrap(),
            AnchorLocation { level: 1, clamped_below: false, clamped_above: false }
        );
        assert_eq!(locate_anchor(&t, 9799, false).unwrap().level, 1);
        assert_eq!(locate_anchor(&t, 9800, false).unwrap().level, 2);
        assert_eq!(locate_anchor(&t, 19999, false).unwrap().level, 3);
        let top = locate_anchor(&t, 20000, false).unwrap();
        assert_eq!((top.level, top.clamped_above), (4, false));
        let above = locate_anchor(&t, 90000, false).unwrap();
        assert_eq!((above.level, above.clamped_above), (4, true));
        assert!(matches!(
            locate_anchor(&t, 4999, false),
            Err(RateError::BelowMinimum { target: 4999, min: 5000 })
        ));
        let clamped = locate_anchor(&t, 10, true).unwrap();
        assert_eq!((clamped.level, clamped.clamped_below), (1, true));
    }

    #[test]
    fn interpolated_count_rounds_half_up() {
        let t = table();
        // (7400 - 5000) * (205 - 102) / (9800 - 5000) = 51.5, half up to 52.
        assert_eq!(target_count(&t, 1, 7400).unwrap(), 154);
        // Endpoints are exact.
        assert_eq!(target_count(&t, 1, 5000).unwrap(), 102);
        assert_eq!(target_count(&t, 1, 9800).unwrap(), 205);
    }

    #[test]
    fn degenerate_pair_is_an_error() {
        let t = RateTable::new(vec![10, 20], vec![777, 777]).unwrap();
        assert!(matches!(
            target_count(&t, 1, 777),
            Err(RateError::DegenerateTable { level: 1, next: 2, rate: 777 })
        ));
    }

    #[test]
    fn interpolation_never_overflows_wide_tables() {
        let t = RateTable::new(vec![1, u32::MAX as u64], vec![100, u64::MAX / 2]).unwrap();
        let mid = target_count(&t, 1, u64::MAX / 4).unwrap();
        assert!(mid >= 1 && mid <= u32::MAX as u64);
    }

    #[test]
    fn delta_selection_takes_top_scores() {
        let scores = ScoreTable::new(vec![4, 9, 13, 20], vec![0.1, 5.0, 0.1, 2.0]).unwrap();
        assert_eq!(select_delta(&scores, 0).unwrap(), Vec::<u32>::new());
        assert_eq!(select_delta(&scores, 2).unwrap(), vec![9, 20]);
        // Tie between indices 4 and 13 breaks to the lower index.
        assert_eq!(select_delta(&scores, 3).unwrap(), vec![4, 9, 20]);
        assert!(matches!(
            select_delta(&scores, 5),
            Err(RateError::BudgetExceedsContext { budget: 5, available: 4 })
        ));
    }

    #[test]
    fn rate_table_round_trip() {
        let t = table();
        let back = RateTable::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
        assert!(RateTable::from_bytes(&t.to_bytes()[..9]).is_err());
    }

    mod properties {
        use super::*;
        use num_bigint::BigUint;
        use proptest::prelude::*;

        /// Arbitrary-precision restatement: round(numer / denom) half up,
        /// computed through explicit quotient and remainder.
        fn oracle_count(n0: u64, n1: u64, r0: u64, r1: u64, t: u64) -> u64 {
            let numer = BigUint::from(t - r0) * BigUint::from(n1 - n0);
            let denom = BigUint::from(r1 - r0);
            let q = &numer / &denom;
            let rem = &numer % &denom;
            let extra = if rem * 2u32 >= denom { q + 1u32 } else { q };
            n0 + u64::try_from(extra).unwrap()
        }

        fn bracket() -> impl Strategy<Value = (u64, u64, u64, u64, u64)> {
            (0u64..u32::MAX as u64, 1u64..u32::MAX as u64, any::<u64>(), 1u64..=u64::MAX / 2)
                .prop_flat_map(|(n0, dn, r0, dr)| {
                    let r0 = r0.min(u64::MAX - dr);
                    ((r0..=r0 + dr), Just((n0, n0 + dn, r0, r0 + dr)))
                })
                .prop_map(|(t, (n0, n1, r0, r1))| (n0, n1, r0, r1, t))
        }

        proptest! {
            #[test]
            fn interpolation_matches_bignum_oracle((n0, n1, r0, r1, t) in bracket()) {
                let table = RateTable::new(vec![n0, n1], vec![r0, r1]).unwrap();
                prop_assert_eq!(target_count(&table, 1, t).unwrap(), oracle_count(n0, n1, r0, r1, t));
            }

            #[test]
            fn interpolation_is_monotonic((n0, n1, r0, r1, t) in bracket()) {
                let table = RateTable::new(vec![n0, n1], vec![r0, r1]).unwrap();
                let at = target_count(&table, 1, t).unwrap();
                prop_assert!(at >= n0 && at <= n1);
                if t < r1 {
                    prop_assert!(target_count(&table, 1, t + 1).unwrap() >= at);
                }
            }
        }
    }
}
