//! Quantization and the serialized scene container.
//!
//! Attributes are quantized per plane with uniform min-max scalar
//! quantization (round half up), packed LSB-first into per-plane bit arrays,
//! and entropy coded. The container is self-describing: a fixed 132-byte
//! header carries the canvas, gaussian count, anchor level, per-plane bit
//! depths and ranges, payload lengths, and a header CRC. The same container
//! (with a flag bit) stores full-precision checkpoints.
//!
//! Entropy coding sits behind a trait so the quantized representation is not
//! tied to one coder; the shipped backend is LZMA with a pinned parameter
//! profile, chosen because its output is produced by pure integer/range
//! arithmetic and is therefore byte-identical across platforms.

use std::io::{Read, Write};

use lzma_rust2::{LzmaOptions, LzmaReader, LzmaWriter};

use crate::error::{invalid, CodecError, Error, Result};
use crate::splat::{GaussianSet, Plane, PLANE_COUNT};

pub const MAGIC: [u8; 4] = *b"RAVS";
pub const VERSION: u16 = 1;
/// Header flag: payload is entropy coded.
pub const FLAG_COMPRESSED: u16 = 1 << 0;
/// Header flag: payload is full-precision checkpoint planes plus sections.
pub const FLAG_CHECKPOINT: u16 = 1 << 1;
/// Anchor level byte for bitstreams between anchors.
pub const ANCHOR_INTERPOLATED: u8 = 255;
/// Fixed header size in bytes; the CRC covers everything before it.
pub const HEADER_LEN: usize = 132;
const CRC_OFFSET: usize = HEADER_LEN - 4;

/// Requested bit depth per plane for quantized encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantDepths {
    pub bits: [u8; PLANE_COUNT],
}

impl Default for QuantDepths {
    /// Positions and depth keys get 16 bits, shape parameters 12, opacity and
    /// color 8.
    fn default() -> Self {
        Self { bits: [16, 16, 12, 12, 12, 8, 8, 8, 8, 16] }
    }
}

/// Quantization of one plane: bit depth and the value range it spans.
/// `bits == 0` marks a constant plane that stores no payload bits and
/// dequantizes to `min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneQuant {
    pub bits: u8,
    pub min: f32,
    pub max: f32,
}

impl PlaneQuant {
    fn levels(&self) -> u32 {
        if self.bits == 0 {
            0
        } else if self.bits == 32 {
            u32::MAX
        } else {
            (1u32 << self.bits) - 1
        }
    }
}

/// Per-plane quantization parameters pinned for a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSpec {
    pub planes: [PlaneQuant; PLANE_COUNT],
}

impl QuantSpec {
    /// Pins ranges from the values the given subset actually takes. Planes
    /// whose min and max coincide become constant planes (`bits == 0`).
    pub fn from_subset(set: &GaussianSet, indices: &[u32], depths: &QuantDepths) -> Result<Self> {
        set.check_subset(indices)?;
        if indices.is_empty() {
            return Err(CodecError::EmptySubset.into());
        }
        for &b in &depths.bits {
            if b == 0 || b > 16 {
                return Err(CodecError::InvalidSpec(format!(
                    "requested bit depth {b} outside 1..=16"
                ))
                .into());
            }
        }
        let mut planes = [PlaneQuant { bits: 0, min: 0.0, max: 0.0 }; PLANE_COUNT];
        for (k, plane) in Plane::ALL.iter().enumerate() {
            let values = set.plane(*plane);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &i in indices {
                let v = values[i as usize];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let (lo, hi) = (lo as f32, hi as f32);
            planes[k] = if lo == hi {
                PlaneQuant { bits: 0, min: lo, max: lo }
            } else {
                PlaneQuant { bits: depths.bits[k], min: lo, max: hi }
            };
        }
        Ok(Self { planes })
    }

    pub fn plane(&self, p: Plane) -> &PlaneQuant {
        &self.planes[p.index()]
    }
}

/// Maps a value onto the plane's uniform grid: clamp into range, scale to
/// `[0, 2^bits - 1]`, round half up.
pub fn quantize(value: f64, pq: &PlaneQuant) -> u32 {
    if pq.bits == 0 {
        return 0;
    }
    let (min, max) = (pq.min as f64, pq.max as f64);
    let t = ((value - min) / (max - min)).clamp(0.0, 1.0);
    (t * pq.levels() as f64 + 0.5).floor() as u32
}

/// Inverse of [`quantize`] up to grid resolution.
pub fn dequantize(code: u32, pq: &PlaneQuant) -> Result<f64, CodecError> {
    if pq.bits == 0 {
        if code != 0 {
            return Err(CodecError::CodeOutOfRange { code, bits: 0 });
        }
        return Ok(pq.min as f64);
    }
    let levels = pq.levels();
    if code > levels {
        return Err(CodecError::CodeOutOfRange { code, bits: pq.bits });
    }
    let (min, max) = (pq.min as f64, pq.max as f64);
    Ok(min + (code as f64 / levels as f64) * (max - min))
}

/// Appends `codes` of `bits` each, LSB first, then pads to a byte boundary.
pub(crate) fn pack_codes(codes: &[u32], bits: u8, out: &mut Vec<u8>) {
    debug_assert!(bits >= 1 && bits <= 32);
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    for &c in codes {
        acc |= (c as u64) << filled;
        filled += bits as u32;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
}

/// Reads `count` codes of `bits` each from a byte-aligned plane.
pub(crate) fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u32>, CodecError> {
    let needed = plane_bytes(bits, count);
    if bytes.len() < needed {
        return Err(CodecError::Truncated { needed, available: bytes.len() });
    }
    let mask = if bits == 32 { u64::MAX } else { (1u64 << bits) - 1 };
    let mut codes = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    let mut next = 0usize;
    for _ in 0..count {
        while filled < bits as u32 {
            acc |= (bytes[next] as u64) << filled;
            next += 1;
            filled += 8;
        }
        codes.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits as u32;
    }
    Ok(codes)
}

/// Bytes one packed plane occupies.
pub(crate) fn plane_bytes(bits: u8, count: usize) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Entropy coding backend for container payloads.
pub trait EntropyBackend: Send + Sync {
    fn compress(&self, raw: &[u8]) -> std::io::Result<Vec<u8>>;
    fn decompress(&self, data: &[u8], raw_len: usize) -> std::io::Result<Vec<u8>>;
}

/// LZMA with a pinned profile: lc=3, lp=0, pb=2, normal mode, BT4 match
/// finder at maximum nice length, 8 MiB dictionary, raw stream (no .lzma
/// header, no end marker; the container records both lengths).
#[derive(Debug, Default, Clone, Copy)]
pub struct LzmaBackend;

const LZMA_LC: u32 = 3;
const LZMA_LP: u32 = 0;
const LZMA_PB: u32 = 2;
const LZMA_DICT_SIZE: u32 = LzmaOptions::DICT_SIZE_DEFAULT;

fn lzma_options() -> LzmaOptions {
    let mut opts = LzmaOptions::with_preset(9);
    opts.dict_size = LZMA_DICT_SIZE;
    opts
}

impl EntropyBackend for LzmaBackend {
    fn compress(&self, raw: &[u8]) -> std::io::Result<Vec<u8>> {
        let mut writer = LzmaWriter::new_no_header(Vec::new(), &lzma_options(), false)?;
        writer.write_all(raw)?;
        writer.finish()
    }

    fn decompress(&self, data: &[u8], raw_len: usize) -> std::io::Result<Vec<u8>> {
        let mut reader = LzmaReader::new(
            data,
            raw_len as u64,
            LZMA_LC,
            LZMA_LP,
            LZMA_PB,
            LZMA_DICT_SIZE,
            None,
        )?;
        let mut out = Vec::with_capacity(raw_len);
        reader.read_to_end(&mut out)?;
        Ok(out)
    }
}

/// The default backend used by the plain `encode`/`decode` entry points.
pub const DEFAULT_BACKEND: LzmaBackend = LzmaBackend;

/// Parsed container header.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub version: u16,
    pub flags: u16,
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub count: u32,
    pub anchor_level: u8,
    pub planes: [PlaneQuant; PLANE_COUNT],
    pub raw_len: u64,
    pub stored_len: u64,
}

impl Header {
    pub fn is_checkpoint(&self) -> bool {
        self.flags & FLAG_CHECKPOINT != 0
    }

    pub fn is_compressed(&self) -> bool {
        self.flags & FLAG_COMPRESSED != 0
    }
}

pub(crate) fn write_header(h: &Header) -> [u8; HEADER_LEN] {
    let mut out = [0u8; HEADER_LEN];
    out[0..4].copy_from_slice(&MAGIC);
    out[4..6].copy_from_slice(&h.version.to_le_bytes());
    out[6..8].copy_from_slice(&h.flags.to_le_bytes());
    out[8..12].copy_from_slice(&h.canvas_width.to_le_bytes());
    out[12..16].copy_from_slice(&h.canvas_height.to_le_bytes());
    out[16..20].copy_from_slice(&h.count.to_le_bytes());
    out[20] = h.anchor_level;
    out[21] = PLANE_COUNT as u8;
    for (k, pq) in h.planes.iter().enumerate() {
        let at = 22 + 9 * k;
        out[at] = pq.bits;
        out[at + 1..at + 5].copy_from_slice(&pq.min.to_le_bytes());
        out[at + 5..at + 9].copy_from_slice(&pq.max.to_le_bytes());
    }
    out[112..120].copy_from_slice(&h.raw_len.to_le_bytes());
    out[120..128].copy_from_slice(&h.stored_len.to_le_bytes());
    let crc = crc32fast::hash(&out[..CRC_OFFSET]);
    out[CRC_OFFSET..HEADER_LEN].copy_from_slice(&crc.to_le_bytes());
    out
}

/// Parses and validates the fixed header, including its CRC.
pub fn parse_header(bytes: &[u8]) -> Result<Header, CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated { needed: HEADER_LEN, available: bytes.len() });
    }
    if bytes[0..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let stored = u32::from_le_bytes(bytes[CRC_OFFSET..HEADER_LEN].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..CRC_OFFSET]);
    if stored != computed {
        return Err(CodecError::CrcMismatch { stored, computed });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    if bytes[21] as usize != PLANE_COUNT {
        return Err(CodecError::Corrupt(format!(
            "expected {PLANE_COUNT} planes, header says {}",
            bytes[21]
        )));
    }
    let mut planes = [PlaneQuant { bits: 0, min: 0.0, max: 0.0 }; PLANE_COUNT];
    for (k, pq) in planes.iter_mut().enumerate() {
        let at = 22 + 9 * k;
        *pq = PlaneQuant {
            bits: bytes[at],
            min: f32::from_le_bytes(bytes[at + 1..at + 5].try_into().unwrap()),
            max: f32::from_le_bytes(bytes[at + 5..at + 9].try_into().unwrap()),
        };
    }
    Ok(Header {
        version,
        flags: u16::from_le_bytes(bytes[6..8].try_into().unwrap()),
        canvas_width: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
        canvas_height: u32::from_le_bytes(bytes[12..16].try_into().unwrap()),
        count: u32::from_le_bytes(bytes[16..20].try_into().unwrap()),
        anchor_level: bytes[20],
        planes,
        raw_len: u64::from_le_bytes(bytes[112..120].try_into().unwrap()),
        stored_len: u64::from_le_bytes(bytes[120..128].try_into().unwrap()),
    })
}

/// Assembles a container around a raw payload, entropy coding it when that
/// actually saves bytes.
pub(crate) fn seal_container(
    mut header: Header,
    raw_payload: Vec<u8>,
    backend: &dyn EntropyBackend,
) -> Result<Vec<u8>> {
    let compressed = backend.compress(&raw_payload)?;
    let (payload, compressed_flag) = if compressed.len() < raw_payload.len() {
        (compressed, true)
    } else {
        (raw_payload, false)
    };
    if compressed_flag {
        header.flags |= FLAG_COMPRESSED;
    } else {
        header.flags &= !FLAG_COMPRESSED;
    }
    header.stored_len = payload.len() as u64;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&write_header(&header));
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Extracts and (if needed) decodes the raw payload behind a parsed header.
pub(crate) fn open_container(
    header: &Header,
    bytes: &[u8],
    backend: &dyn EntropyBackend,
) -> Result<Vec<u8>, CodecError> {
    let total = HEADER_LEN + header.stored_len as usize;
    if bytes.len() < total {
        return Err(CodecError::Truncated { needed: total, available: bytes.len() });
    }
    let stored = &bytes[HEADER_LEN..total];
    let raw = if header.is_compressed() {
        backend
            .decompress(stored, header.raw_len as usize)
            .map_err(|e| CodecError::Corrupt(format!("entropy decode failed: {e}")))?
    } else {
        stored.to_vec()
    };
    if raw.len() != header.raw_len as usize {
        return Err(CodecError::Corrupt(format!(
            "payload expanded to {} bytes, header says {}",
            raw.len(),
            header.raw_len
        )));
    }
    Ok(raw)
}

/// A decoded quantized bitstream.
#[derive(Debug, Clone)]
pub struct Decoded {
    /// The subset as a standalone scene, in ascending original-index order.
    pub set: GaussianSet,
    pub quant: QuantSpec,
    pub anchor_level: u8,
}

/// Encodes the chosen subset with pinned quantization, using the default
/// entropy backend.
pub fn encode_subset(
    set: &GaussianSet,
    indices: &[u32],
    spec: &QuantSpec,
    anchor_level: u8,
) -> Result<Vec<u8>> {
    encode_subset_with(set, indices, spec, anchor_level, &DEFAULT_BACKEND)
}

/// [`encode_subset`] with an explicit entropy backend.
pub fn encode_subset_with(
    set: &GaussianSet,
    indices: &[u32],
    spec: &QuantSpec,
    anchor_level: u8,
    backend: &dyn EntropyBackend,
) -> Result<Vec<u8>> {
    set.check_subset(indices)?;
    if indices.is_empty() {
        return Err(CodecError::EmptySubset.into());
    }
    let mut raw = Vec::new();
    let mut codes = Vec::with_capacity(indices.len());
    for (k, plane) in Plane::ALL.iter().enumerate() {
        let pq = &spec.planes[k];
        if pq.bits == 0 {
            continue;
        }
        let values = set.plane(*plane);
        codes.clear();
        codes.extend(indices.iter().map(|&i| quantize(values[i as usize], pq)));
        pack_codes(&codes, pq.bits, &mut raw);
    }
    let header = Header {
        version: VERSION,
        flags: 0,
        canvas_width: set.canvas_width(),
        canvas_height: set.canvas_height(),
        count: indices.len() as u32,
        anchor_level,
        planes: spec.planes,
        raw_len: raw.len() as u64,
        stored_len: 0,
    };
    seal_container(header, raw, backend)
}

/// Decodes a quantized bitstream with the default backend.
pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    decode_with(bytes, &DEFAULT_BACKEND)
}

/// [`decode`] with an explicit entropy backend.
pub fn decode_with(bytes: &[u8], backend: &dyn EntropyBackend) -> Result<Decoded> {
    let header = parse_header(bytes)?;
    if header.is_checkpoint() {
        return Err(invalid!("container holds a checkpoint, not a quantized bitstream"));
    }
    let raw = open_container(&header, bytes, backend)?;
    let count = header.count as usize;
    let mut at = 0usize;
    let mut set = GaussianSet::new(header.canvas_width, header.canvas_height)
        .map_err(|_| CodecError::Corrupt("zero canvas dimension".into()))?;
    let mut planes_values: [Vec<f64>; PLANE_COUNT] = Default::default();
    for (k, pv) in planes_values.iter_mut().enumerate() {
        let pq = &header.planes[k];
        if pq.bits == 0 {
            *pv = vec![pq.min as f64; count];
            continue;
        }
        let len = plane_bytes(pq.bits, count);
        let codes = unpack_codes(&raw[at.min(raw.len())..], pq.bits, count)?;
        at += len;
        let mut values = Vec::with_capacity(count);
        for code in codes {
            values.push(dequantize(code, pq)?);
        }
        *pv = values;
    }
    if at != raw.len() {
        return Err(CodecError::Corrupt(format!(
            "payload has {} bytes but planes occupy {at}",
            raw.len()
        ))
        .into());
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
    Ok(Decoded { set, quant: QuantSpec { planes: header.planes }, anchor_level: header.anchor_level })
}

/// Exact size in bytes of the container [`encode_subset`] would produce.
pub fn measure_rate(set: &GaussianSet, indices: &[u32], spec: &QuantSpec) -> Result<u64> {
    Ok(encode_subset(set, indices, spec, ANCHOR_INTERPOLATED)?.len() as u64)
}

/// Applies quantize-dequantize to the listed gaussians in place, leaving all
/// others untouched. This is the value set a decoder will reconstruct.
pub fn quantize_in_place(set: &mut GaussianSet, indices: &[u32], spec: &QuantSpec) -> Result<()> {
    set.check_subset(indices)?;
    for (k, plane) in Plane::ALL.iter().enumerate() {
        let pq = &spec.planes[k];
        let values = set.plane_mut(*plane);
        for &i in indices {
            let v = values[i as usize];
            values[i as usize] = dequantize(quantize(v, pq), pq)?;
        }
    }
    Ok(())
}
