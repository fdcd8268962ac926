//! Nested detail levels and per-level scoring contexts.
//!
//! One global importance pass ranks every gaussian; level `l` is the top
//! `ceil(f_l * N)` of that ranking and context `C_l` holds the gaussians
//! entering at level `l`, so the contexts partition the full set. Context
//! scores (the ranking used for rate interpolation between adjacent levels)
//! are computed lazily, at most once per `(level, mode)`, and cached.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{invalid, Result};
use crate::image::ImageBuffer;
use crate::importance::{rank_descending, score_gaussians, ScoreTable};
use crate::loss::LossConfig;
use crate::splat::{GaussianSet, RenderConfig};
use crate::train::all_indices;

/// Cumulative level fractions, ascending, ending at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSpec {
    fractions: Vec<f64>,
}

impl Default for LevelSpec {
    fn default() -> Self {
        Self { fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0] }
    }
}

impl LevelSpec {
    pub fn new(fractions: Vec<f64>) -> Result<Self> {
        if fractions.is_empty() {
            return Err(invalid!("level spec needs at least one fraction"));
        }
        for w in fractions.windows(2) {
            if !(w[0] < w[1]) {
                return Err(invalid!("level fractions must be strictly ascending"));
            }
        }
        let first = fractions[0];
        let last = *fractions.last().unwrap();
        if !(first > 0.0) || last != 1.0 {
            return Err(invalid!("level fractions must lie in (0, 1] and end at exactly 1"));
        }
        Ok(Self { fractions })
    }

    /// `levels` equally spaced fractions ending at 1.
    pub fn uniform(levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(invalid!("level spec needs at least one fraction"));
        }
        Self::new((1..=levels).map(|i| i as f64 / levels as f64).collect())
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn len(&self) -> usize {
        self.fractions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fractions.is_empty()
    }
}

/// Which subset is rendered while scoring a context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ScoreMode {
    /// Render exactly the context's level.
    Local = 0,
    /// Render the full set.
    Global = 1,
}

impl ScoreMode {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ScoreMode::Local),
            1 => Ok(ScoreMode::Global),
            _ => Err(invalid!("unknown score mode tag {v}")),
        }
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreMode::Local => write!(f, "local"),
            ScoreMode::Global => write!(f, "global"),
        }
    }
}

/// Rounds `frac * n` up while forgiving float representation error in
/// fractions like 0.2 whose product should be an exact integer.
fn level_size(frac: f64, n: usize) -> usize {
    let s = frac * n as f64;
    let r = s.round();
    if (s - r).abs() < 1e-7 {
        r as usize
    } else {
        s.ceil() as usize
    }
}

/// Importance-nested levels with lazily cached context scores.
#[derive(Debug)]
pub struct AnchorHierarchy {
    fractions: Vec<f64>,
    /// `levels[k]` is G_{k+1}, sorted ascending.
    levels: Vec<Vec<u32>>,
    /// `contexts[k]` is C_{k+1} = G_{k+1} \ G_k, sorted ascending.
    contexts: Vec<Vec<u32>>,
    total: u32,
    cache: RwLock<HashMap<(u8, ScoreMode), Arc<ScoreTable>>>,
    /// Context scoring passes performed (including the build's global pass).
    passes: AtomicU64,
}

impl AnchorHierarchy {
    /// Number of levels L.
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    /// Gaussian count of the full set the hierarchy was built over.
    pub fn total(&self) -> u32 {
        self.total
    }

    /// Level `l` (1-based), sorted ascending.
    pub fn level(&self, l: usize) -> Result<&[u32]> {
        self.check_level(l)?;
        Ok(&self.levels[l - 1])
    }

    /// Context `C_l` (1-based), sorted ascending.
    pub fn context(&self, l: usize) -> Result<&[u32]> {
        self.check_level(l)?;
        Ok(&self.contexts[l - 1])
    }

    fn check_level(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.levels.len() {
            return Err(invalid!("level {l} out of range 1..={}", self.levels.len()));
        }
        Ok(())
    }

    /// Total scoring passes this hierarchy has performed.
    pub fn scoring_passes(&self) -> u64 {
        self.passes.load(Ordering::SeqCst)
    }

    /// Builds a hierarchy from explicit disjoint contexts. The union must be
    /// exactly `0..total`.
    pub fn from_contexts(contexts: Vec<Vec<u32>>, total: u32) -> Result<Self> {
        if contexts.is_empty() {
            return Err(invalid!("hierarchy needs at least one context"));
        }
        let mut seen = vec![false; total as usize];
        let mut covered = 0usize;
        for (k, ctx) in contexts.iter().enumerate() {
            if ctx.is_empty() {
                return Err(invalid!("context {} is empty", k + 1));
            }
            if !ctx.windows(2).all(|w| w[0] < w[1]) {
                return Err(invalid!("context {} is not strictly ascending", k + 1));
            }
            for &i in ctx {
                if i >= total {
                    return Err(invalid!("context index {i} out of range for {total} gaussians"));
                }
                if seen[i as usize] {
                    return Err(invalid!("gaussian {i} appears in more than one context"));
                }
                seen[i as usize] = true;
                covered += 1;
            }
        }
        if covered != total as usize {
            return Err(invalid!(
                "contexts cover {covered} of {total} gaussians; the top level must be the full set"
            ));
        }
        let mut levels: Vec<Vec<u32>> = Vec::with_capacity(contexts.len());
        let mut acc: Vec<u32> = Vec::new();
        for ctx in &contexts {
            acc.extend_from_slice(ctx);
            acc.sort_unstable();
            levels.push(acc.clone());
        }
        let fractions = levels.iter().map(|l| l.len() as f64 / total as f64).collect();
        Ok(Self {
            fractions,
            levels,
            contexts,
            total,
            cache: RwLock::new(HashMap::new()),
            passes: AtomicU64::new(0),
        })
    }

    /// [`from_contexts`](Self::from_contexts) keeping the original level
    /// fractions instead of recomputing them from the context sizes.
    pub fn from_parts(fractions: Vec<f64>, contexts: Vec<Vec<u32>>, total: u32) -> Result<Self> {
        let spec = LevelSpec::new(fractions)?;
        if spec.fractions().len() != contexts.len() {
            return Err(invalid!(
                "{} fractions do not match {} contexts",
                spec.fractions().len(),
                contexts.len()
            ));
        }
        let mut hierarchy = Self::from_contexts(contexts, total)?;
        hierarchy.fractions = spec.fractions().to_vec();
        Ok(hierarchy)
    }

    /// Scores context `C_level` (level 2..=L), rendering either that level
    /// alone or the full set. Results are cached; repeated calls for the same
    /// key perform no further scoring work.
    pub fn context_scores(
        &self,
        level: usize,
        mode: ScoreMode,
        set: &GaussianSet,
        target: &ImageBuffer,
        render_cfg: &RenderConfig,
        loss_cfg: &LossConfig,
    ) -> Result<Arc<ScoreTable>> {
        if level < 2 || level > self.num_levels() {
            return Err(invalid!(
                "context scores exist for levels 2..={}, got {level}",
                self.num_levels()
            ));
        }
        if set.len() as u32 != self.total {
            return Err(invalid!(
                "set has {} gaussians but the hierarchy was built over {}",
                set.len(),
                self.total
            ));
        }
        let key = (level as u8, mode);
        if let Some(hit) = self.cache.read().expect("score cache poisoned").get(&key) {
            return Ok(Arc::clone(hit));
        }
        // Compute under the write lock: concurrent misses for any key are
        // serialized and each table is computed exactly once.
        let mut cache = self.cache.write().expect("score cache poisoned");
        if let Some(hit) = cache.get(&key) {
            return Ok(Arc::clone(hit));
        }
        let render_indices = match mode {
            ScoreMode::Local => &self.levels[level - 1],
            ScoreMode::Global => &self.levels[self.num_levels() - 1],
        };
        let table = score_gaussians(
            set,
            render_indices,
            &self.contexts[level - 1],
            target,
            render_cfg,
            loss_cfg,
        )?;
        self.passes.fetch_add(1, Ordering::SeqCst);
        let table = Arc::new(table);
        cache.insert(key, Arc::clone(&table));
        Ok(table)
    }

    /// Returns an already computed table without triggering any scoring.
    pub fn cached_table(&self, level: usize, mode: ScoreMode) -> Option<Arc<ScoreTable>> {
        self.cache
            .read()
            .expect("score cache poisoned")
            .get(&(level as u8, mode))
            .map(Arc::clone)
    }

    /// Cached tables sorted by key, for serialization.
    pub fn cached_tables(&self) -> Vec<(u8, ScoreMode, Arc<ScoreTable>)> {
        let cache = self.cache.read().expect("score cache poisoned");
        let mut out: Vec<_> = cache
            .iter()
            .map(|(&(l, m), t)| (l, m, Arc::clone(t)))
            .collect();
        out.sort_by_key(|&(l, m, _)| (l, m as u8));
        out
    }

    /// Installs a previously computed table, e.g. when loading a checkpoint.
    /// Preloaded tables do not count as scoring passes.
    pub fn preload_table(&self, level: u8, mode: ScoreMode, table: ScoreTable) -> Result<()> {
        if (level as usize) < 2 || level as usize > self.num_levels() {
            return Err(invalid!("preloaded table level {level} out of range"));
        }
        if table.scope() != self.contexts[level as usize - 1].as_slice() {
            return Err(invalid!("preloaded table scope does not match context {level}"));
        }
        self.cache
            .write()
            .expect("score cache poisoned")
            .insert((level, mode), Arc::new(table));
        Ok(())
    }
}

impl Clone for AnchorHierarchy {
    fn clone(&self) -> Self {
        Self {
            fractions: self.fractions.clone(),
            levels: self.levels.clone(),
            contexts: self.contexts.clone(),
            total: self.total,
            cache: RwLock::new(self.cache.read().expect("score cache poisoned").clone()),
            passes: AtomicU64::new(self.passes.load(Ordering::SeqCst)),
        }
    }
}

impl PartialEq for AnchorHierarchy {
    /// Structural equality; the score cache and pass counter are transient.
    fn eq(&self, other: &Self) -> bool {
        self.fractions == other.fractions
            && self.levels == other.levels
            && self.contexts == other.contexts
            && self.total == other.total
    }
}

/// Ranks the full set in one scoring pass and slices it into nested levels.
pub fn build_hierarchy(
    set: &GaussianSet,
    spec: &LevelSpec,
    target: &ImageBuffer,
    render_cfg: &RenderConfig,
    loss_cfg: &LossConfig,
) -> Result<AnchorHierarchy> {
    let n = set.len();
    if n == 0 {
        return Err(invalid!("cannot build a hierarchy over an empty set"));
    }
    let sizes: Vec<usize> = spec.fractions().iter().map(|&f| level_size(f, n)).collect();
    for (k, w) in sizes.windows(2).enumerate() {
        if w[0] >= w[1] {
            return Err(invalid!(
                "context {} would be empty: levels {} and {} both round to {} of {n} gaussians",
                k + 2,
                k + 1,
                k + 2,
                w[0]
            ));
        }
    }
    if sizes[0] == 0 {
        return Err(invalid!("level 1 would be empty with {n} gaussians"));
    }

    let all = all_indices(n);
    let table = score_gaussians(set, &all, &all, target, render_cfg, loss_cfg)?;
    let ranked = rank_descending(&table);

    let mut contexts = Vec::with_capacity(sizes.len());
    let mut prev = 0usize;
    for &s in &sizes {
        let mut ctx: Vec<u32> = ranked[prev..s].to_vec();
        ctx.sort_unstable();
        contexts.push(ctx);
        prev = s;
    }
    let hierarchy = AnchorHierarchy::from_contexts(contexts, n as u32)?;
    hierarchy.passes.store(1, Ordering::SeqCst);
    Ok(hierarchy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian2D;

    fn scene(n: usize) -> (GaussianSet, ImageBuffer) {
        let gs = (0..n).map(|k| Gaussian2D {
            pos: [3.0 + 2.1 * (k % 7) as f64, 3.0 + 2.7 * (k / 7) as f64],
            log_scale: [1.6_f64.ln(), 1.2_f64.ln()],
            rotation: 0.17 * k as f64,
            opacity_logit: 0.2 + 0.05 * (k % 5) as f64,
            color: [0.15 + 0.04 * (k % 19) as f64, 0.7 - 0.03 * (k % 11) as f64, 0.45],
            depth_key: (k % 6) as f64,
        });
        let set = GaussianSet::from_gaussians(20, 14, gs).unwrap();
        let target = ImageBuffer::from_fn(20, 14, |x, y| {
            [0.1 + 0.04 * x as f64, 0.9 - 0.05 * y as f64, 0.3 + 0.02 * (x + y) as f64]
        })
        .unwrap();
        (set, target)
    }

    fn build(n: usize) -> (GaussianSet, ImageBuffer, AnchorHierarchy) {
        let (set, target) = scene(n);
        let h = build_hierarchy(
            &set,
            &LevelSpec::default(),
            &target,
            &RenderConfig::default(),
            &LossConfig::default(),
        )
        .unwrap();
        (set, target, h)
    }

    #[test]
    fn level_spec_validation() {
        assert!(LevelSpec::new(vec![]).is_err());
        assert!(LevelSpec::new(vec![0.5, 0.5, 1.0]).is_err());
        assert!(LevelSpec::new(vec![0.0, 1.0]).is_err());
        assert!(LevelSpec::new(vec![0.5, 0.9]).is_err());
        assert!(LevelSpec::new(vec![1.0]).is_ok());
        assert_eq!(LevelSpec::uniform(4).unwrap().fractions(), &[0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn levels_are_nested_and_sized() {
        let (_, _, h) = build(25);
        assert_eq!(h.num_levels(), 5);
        let mut prev: &[u32] = &[];
        for (k, want) in [5usize, 10, 15, 20, 25].iter().enumerate() {
            let level = h.level(k + 1).unwrap();
            assert_eq!(level.len(), *want);
            assert!(level.windows(2).all(|w| w[0] < w[1]));
            assert!(prev.iter().all(|i| level.binary_search(i).is_ok()), "levels must nest");
            prev = level;
        }
        assert_eq!(h.level(5).unwrap(), all_indices(25));
    }

    #[test]
    fn contexts_partition_the_set() {
        let (_, _, h) = build(23);
        let mut seen = vec![false; 23];
        for l in 1..=h.num_levels() {
            for &i in h.context(l).unwrap() {
                assert!(!seen[i as usize]);
                seen[i as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn level_sizes_survive_fraction_rounding() {
        // 0.2 * 10 is 2.0000000000000004 in binary; a bare ceil would give 3.
        assert_eq!(level_size(0.2, 10), 2);
        assert_eq!(level_size(1.0, 7), 7);
        assert_eq!(level_size(0.3, 7), 3);
        assert_eq!(level_size(0.5, 5), 3);
    }

    #[test]
    fn too_few_gaussians_for_distinct_levels() {
        let (set, target) = scene(3);
        let err = build_hierarchy(
            &set,
            &LevelSpec::default(),
            &target,
            &RenderConfig::default(),
            &LossConfig::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn context_scores_cached_once_per_key() {
        let (set, target, h) = build(25);
        let rc = RenderConfig::default();
        let lc = LossConfig::default();
        assert_eq!(h.scoring_passes(), 1);
        let a = h.context_scores(3, ScoreMode::Local, &set, &target, &rc, &lc).unwrap();
        assert_eq!(h.scoring_passes(), 2);
        for _ in 0..10 {
            let b = h.context_scores(3, ScoreMode::Local, &set, &target, &rc, &lc).unwrap();
            assert!(Arc::ptr_eq(&a, &b));
        }
        assert_eq!(h.scoring_passes(), 2);
        h.context_scores(3, ScoreMode::Global, &set, &target, &rc, &lc).unwrap();
        assert_eq!(h.scoring_passes(), 3);
        assert_eq!(h.cached_tables().len(), 2);
    }

    #[test]
    fn local_and_global_modes_render_different_subsets() {
        let (set, target, h) = build(25);
        let rc = RenderConfig::default();
        let lc = LossConfig::default();
        let local = h.context_scores(2, ScoreMode::Local, &set, &target, &rc, &lc).unwrap();
        let global = h.context_scores(2, ScoreMode::Global, &set, &target, &rc, &lc).unwrap();
        assert_eq!(local.scope(), global.scope());
        assert_ne!(local.scores(), global.scores());
    }

    #[test]
    fn context_score_scope_is_the_context() {
        let (set, target, h) = build(25);
        let t = h
            .context_scores(
                4,
                ScoreMode::Local,
                &set,
                &target,
                &RenderConfig::default(),
                &LossConfig::default(),
            )
            .unwrap();
        assert_eq!(t.scope(), h.context(4).unwrap());
    }

    #[test]
    fn occluded_gaussian_scores_higher_in_local_mode() {
        // Gaussian 1 is hidden behind an opaque occluder (gaussian 2) in the
        // full set, but level 2 does not include the occluder, so the local
        // render sees gaussian 1 and its gradient survives.
        let gs = [
            // C_1: off in a corner, always visible.
            Gaussian2D {
                pos: [3.0, 3.0],
                log_scale: [0.0, 0.0],
                rotation: 0.0,
                opacity_logit: 0.5,
                color: [0.9, 0.1, 0.1],
                depth_key: 0.0,
            },
            // C_2: the gaussian under test.
            Gaussian2D {
                pos: [12.0, 8.0],
                log_scale: [0.3, 0.3],
                rotation: 0.0,
                opacity_logit: 1.0,
                color: [0.1, 0.9, 0.1],
                depth_key: 2.0,
            },
            // C_3: near-opaque occluder in front of gaussian 1, wide enough
            // to blanket its whole footprint.
            Gaussian2D {
                pos: [12.0, 8.0],
                log_scale: [3.0, 3.0],
                rotation: 0.0,
                opacity_logit: 9.0,
                color: [0.1, 0.1, 0.9],
                depth_key: 1.0,
            },
        ];
        let set = GaussianSet::from_gaussians(16, 16, gs).unwrap();
        let target = ImageBuffer::filled(16, 16, [0.0, 0.0, 0.0]).unwrap();
        let h = AnchorHierarchy::from_contexts(vec![vec![0], vec![1], vec![2]], 3).unwrap();
        let rc = RenderConfig::default();
        let lc = LossConfig::default();
        let local = h.context_scores(2, ScoreMode::Local, &set, &target, &rc, &lc).unwrap();
        let global = h.context_scores(2, ScoreMode::Global, &set, &target, &rc, &lc).unwrap();
        let (sl, sg) = (local.get(1).unwrap(), global.get(1).unwrap());
        assert!(
            sl > 10.0 * sg,
            "occluded gaussian should score much higher locally: local {sl}, global {sg}"
        );
    }

    #[test]
    fn from_contexts_validation() {
        assert!(AnchorHierarchy::from_contexts(vec![vec![0], vec![1, 2]], 3).is_ok());
        // Overlap.
        assert!(AnchorHierarchy::from_contexts(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        // Gap: union must be the full set.
        assert!(AnchorHierarchy::from_contexts(vec![vec![0], vec![2]], 3).is_err());
        // Empty context.
        assert!(AnchorHierarchy::from_contexts(vec![vec![0, 1, 2], vec![]], 3).is_err());
        // Out of range.
        assert!(AnchorHierarchy::from_contexts(vec![vec![0, 3]], 3).is_err());
    }

    #[test]
    fn level_one_has_no_context_scores() {
        let (set, target, h) = build(25);
        assert!(h
            .context_scores(
                1,
                ScoreMode::Local,
                &set,
                &target,
                &RenderConfig::default(),
                &LossConfig::default()
            )
            .is_err());
    }
}
