//! Model checkpoints: the full-precision scene plus everything the rate
//! pipeline has computed so far, in the same container as bitstreams.
//!
//! The payload holds every attribute plane as raw f32 followed by tagged
//! sections for the hierarchy, the pinned quantization, the measured rate
//! table, and any cached context score tables. A loaded checkpoint can
//! therefore serve encode-at-rate requests without a target image or any
//! new gradient work.

use crate::codec::{
    open_container, parse_header, seal_container, EntropyBackend, Header, PlaneQuant, QuantSpec,
    DEFAULT_BACKEND, FLAG_CHECKPOINT, VERSION,
};
use crate::error::{invalid, CodecError, Result};
use crate::hierarchy::{AnchorHierarchy, ScoreMode};
use crate::importance::ScoreTable;
use crate::rate::RateTable;
use crate::splat::{GaussianSet, Plane, PLANE_COUNT};

/// Plane bit marker for raw f32 storage.
const BITS_RAW_F32: u8 = 32;

const TAG_HIERARCHY: u8 = 1;
const TAG_QUANT: u8 = 2;
const TAG_RATES: u8 = 3;
const TAG_SCORES: u8 = 4;

/// A trained scene together with the optional artifacts of the rate
/// pipeline. Plane values are stored in f32; call
/// [`GaussianSet::round_to_f32`] before saving if the in-memory set must
/// stay bit-identical to what a load returns.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub set: GaussianSet,
    pub hierarchy: Option<AnchorHierarchy>,
    pub quant: Option<QuantSpec>,
    pub rates: Option<RateTable>,
}

impl Checkpoint {
    pub fn new(set: GaussianSet) -> Self {
        Self { set, hierarchy: None, quant: None, rates: None }
    }

    fn check(&self) -> Result<()> {
        if self.set.is_empty() {
            return Err(invalid!("cannot checkpoint an empty scene"));
        }
        if !self.set.is_finite() {
            return Err(invalid!("cannot checkpoint a scene with non-finite parameters"));
        }
        if let Some(h) = &self.hierarchy {
            if h.total() as usize != self.set.len() {
                return Err(invalid!(
                    "hierarchy was built over {} gaussians but the scene has {}",
                    h.total(),
                    self.set.len()
                ));
            }
        }
        if let Some(r) = &self.rates {
            if self.hierarchy.is_none() {
                return Err(invalid!("a rate table without its hierarchy is meaningless"));
            }
            if self.quant.is_none() {
                return Err(invalid!("a rate table without its quantization is meaningless"));
            }
            let h = self.hierarchy.as_ref().unwrap();
            if r.len() != h.num_levels() {
                return Err(invalid!(
                    "rate table has {} levels but the hierarchy has {}",
                    r.len(),
                    h.num_levels()
                ));
            }
        }
        Ok(())
    }

    /// Serializes the checkpoint with the default entropy backend.
    pub fn save(&self) -> Result<Vec<u8>> {
        self.save_with(&DEFAULT_BACKEND)
    }

    pub fn save_with(&self, backend: &dyn EntropyBackend) -> Result<Vec<u8>> {
        self.check()?;
        let n = self.set.len();
        let mut payload = Vec::with_capacity(PLANE_COUNT * n * 4);
        let mut plane_meta = [PlaneQuant { bits: BITS_RAW_F32, min: 0.0, max: 0.0 }; PLANE_COUNT];
        for (k, plane) in Plane::ALL.iter().enumerate() {
            let values = self.set.plane(*plane);
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &v in values {
                let v = v as f32;
                lo = lo.min(v);
                hi = hi.max(v);
                payload.extend_from_slice(&v.to_le_bytes());
            }
            plane_meta[k].min = lo;
            plane_meta[k].max = hi;
        }

        let mut sections: Vec<(u8, Vec<u8>)> = Vec::new();
        if let Some(h) = &self.hierarchy {
            sections.push((TAG_HIERARCHY, hierarchy_bytes(h)));
        }
        if let Some(q) = &self.quant {
            sections.push((TAG_QUANT, quant_bytes(q)));
        }
        if let Some(r) = &self.rates {
            sections.push((TAG_RATES, r.to_bytes()));
        }
        if let Some(h) = &self.hierarchy {
            let cached = h.cached_tables();
            if !cached.is_empty() {
                sections.push((TAG_SCORES, scores_bytes(&cached)));
            }
        }
        payload.push(sections.len() as u8);
        for (tag, body) in sections {
            payload.push(tag);
            payload.extend_from_slice(&(body.len() as u64).to_le_bytes());
            payload.extend_from_slice(&body);
        }

        let header = Header {
            version: VERSION,
            flags: FLAG_CHECKPOINT,
            canvas_width: self.set.canvas_width(),
            canvas_height: self.set.canvas_height(),
            count: n as u32,
            anchor_level: 0,
            planes: plane_meta,
            raw_len: payload.len() as u64,
            stored_len: 0,
        };
        seal_container(header, payload, backend)
    }

    /// Parses a checkpoint container with the default entropy backend.
    pub fn load(bytes: &[u8]) -> Result<Self> {
        Self::load_with(bytes, &DEFAULT_BACKEND)
    }

    pub fn load_with(bytes: &[u8], backend: &dyn EntropyBackend) -> Result<Self> {
        let header = parse_header(bytes)?;
        if !header.is_checkpoint() {
            return Err(invalid!("container holds a quantized bitstream, not a checkpoint"));
        }
        let raw = open_container(&header, bytes, backend)?;
        let count = header.count as usize;
        let mut rd = Reader::new(&raw);

        let mut set = GaussianSet::new(header.canvas_width, header.canvas_height)
            .map_err(|_| CodecError::Corrupt("zero canvas dimension".into()))?;
        let mut planes_values: [Vec<f64>; PLANE_COUNT] = Default::default();
        for (k, pv) in planes_values.iter_mut().enumerate() {
            if header.planes[k].bits != BITS_RAW_F32 {
                return Err(CodecError::Corrupt(format!(
                    "checkpoint plane {k} has bit depth {}, expected {BITS_RAW_F32}",
                    header.planes[k].bits
                ))
                .into());
            }
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                values.push(rd.f32()? as f64);
            }
            *pv = values;
        }
        for i in 0..count {
            set.push(crate::splat::Gaussian2D {
                pos: [planes_values[0][i], planes_values[1][i]],
                log_scale: [planes_values[2][i], planes_values[3][i]],
                rotation: planes_values[4][i],
                opacity_logit: planes_values[5][i],
                color: [planes_values[6][i], planes_values[7][i], planes_values[8][i]],
                depth_key: planes_values[9][i],
            });
        }

        let mut out = Checkpoint::new(set);
        let section_count = rd.u8()?;
        for _ in 0..section_count {
            let tag = rd.u8()?;
            let len = rd.u64()? as usize;
            let body = rd.bytes(len)?;
            match tag {
                TAG_HIERARCHY => out.hierarchy = Some(hierarchy_from_bytes(body, count as u32)?),
                TAG_QUANT => out.quant = Some(quant_from_bytes(body)?),
                TAG_RATES => out.rates = Some(RateTable::from_bytes(body)?),
                TAG_SCORES => {
                    let hierarchy = out.hierarchy.as_ref().ok_or_else(|| {
                        invalid!("score tables appear before the hierarchy section")
                    })?;
                    preload_scores(hierarchy, body)?;
                }
                _ => return Err(invalid!("unknown checkpoint section tag {tag}")),
            }
        }
        if !rd.done() {
            return Err(CodecError::Corrupt(format!(
                "{} trailing bytes after the last checkpoint section",
                rd.remaining()
            ))
            .into());
        }
        out.check()?;
        Ok(out)
    }
}

fn hierarchy_bytes(h: &AnchorHierarchy) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(h.num_levels() as u8);
    for &f in h.fractions() {
        out.extend_from_slice(&f.to_le_bytes());
    }
    for l in 1..=h.num_levels() {
        let ctx = h.context(l).expect("level within num_levels");
        out.extend_from_slice(&(ctx.len() as u32).to_le_bytes());
        for &i in ctx {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    out
}

fn hierarchy_from_bytes(bytes: &[u8], total: u32) -> Result<AnchorHierarchy> {
    let mut rd = Reader::new(bytes);
    let levels = rd.u8()? as usize;
    let mut fractions = Vec::with_capacity(levels);
    for _ in 0..levels {
        fractions.push(rd.f64()?);
    }
    let mut contexts = Vec::with_capacity(levels);
    for _ in 0..levels {
        let n = rd.u32()? as usize;
        let mut ctx = Vec::with_capacity(n);
        for _ in 0..n {
            ctx.push(rd.u32()?);
        }
        contexts.push(ctx);
    }
    if !rd.done() {
        return Err(invalid!("trailing bytes in hierarchy section"));
    }
    AnchorHierarchy::from_parts(fractions, contexts, total)
}

fn quant_bytes(q: &QuantSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(PLANE_COUNT * 9);
    for pq in &q.planes {
        out.push(pq.bits);
        out.extend_from_slice(&pq.min.to_le_bytes());
        out.extend_from_slice(&pq.max.to_le_bytes());
    }
    out
}

fn quant_from_bytes(bytes: &[u8]) -> Result<QuantSpec> {
    if bytes.len() != PLANE_COUNT * 9 {
        return Err(invalid!(
            "quantization section is {} bytes, expected {}",
            bytes.len(),
            PLANE_COUNT * 9
        ));
    }
    let mut planes = [PlaneQuant { bits: 0, min: 0.0, max: 0.0 }; PLANE_COUNT];
    for (pq, rec) in planes.iter_mut().zip(bytes.chunks_exact(9)) {
        *pq = PlaneQuant {
            bits: rec[0],
            min: f32::from_le_bytes(rec[1..5].try_into().unwrap()),
            max: f32::from_le_bytes(rec[5..9].try_into().unwrap()),
        };
    }
    Ok(QuantSpec { planes })
}

fn scores_bytes(cached: &[(u8, ScoreMode, std::sync::Arc<ScoreTable>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(cached.len() as u16).to_le_bytes());
    for (level, mode, table) in cached {
        out.push(*level);
        out.push(*mode as u8);
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        out.extend_from_slice(&table.to_bytes());
    }
    out
}

fn preload_scores(hierarchy: &AnchorHierarchy, bytes: &[u8]) -> Result<()> {
    let mut rd = Reader::new(bytes);
    let tables = rd.u16()?;
    for _ in 0..tables {
        let level = rd.u8()?;
        let mode = ScoreMode::from_u8(rd.u8()?)?;
        let records = rd.u32()? as usize;
        let table = ScoreTable::from_bytes(rd.bytes(records * 12)?)?;
        hierarchy.preload_table(level, mode, table)?;
    }
    if !rd.done() {
        return Err(invalid!("trailing bytes in score table section"));
    }
    Ok(())
}

/// Bounds-checked little-endian cursor over a checkpoint payload.
struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.at.checked_add(n).unwrap_or(usize::MAX);
        if end > self.bytes.len() {
            return Err(CodecError::Truncated { needed: end, available: self.bytes.len() });
        }
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}
