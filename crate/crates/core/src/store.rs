//! On-disk container for cache blobs and weights, binary16 encoding, and the
//! load-latency benchmark.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `XCC1` |
//! | 2 | version |
//! | 1 | kind (0 KV, 1 JITKV, 2 XC, 3 weights) |
//! | 1 | dtype (0 f32, 1 f16) |
//! | 1 | rank |
//! | 8·rank | dims |
//! | 8 | geometry digest |
//! | 8 | payload length |
//! | payload | row-major scalars |
//! | 8 | FNV-1a of everything above |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"XCC1";
pub const VERSION: u16 = 1;
const TRAILER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContainerKind {
    Kv = 0,
    JitKv = 1,
    Xc = 2,
    Weights = 3,
}

impl ContainerKind {
    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Self::Kv,
            1 => Self::JitKv,
            2 => Self::Xc,
            3 => Self::Weights,
            _ => return Err(Error::Format(format!("unknown strategy code {c}"))),
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Kv => "KV",
            Self::JitKv => "JITKV",
            Self::Xc => "XC",
            Self::Weights => "weights",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[default]
    F32 = 0,
    F16 = 1,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F16),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f16" => Ok(Dtype::F16),
            _ => Err(Error::Config(format!("unknown dtype {s:?} (expected f32 or f16)"))),
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn geometry_digest(canonical: &[u8]) -> [u8; 8] {
    fnv1a64(canonical).to_le_bytes()
}

/// IEEE-754 binary16, round to nearest even.
pub fn f16_encode(x: f32) -> u16 {
    let b = x.to_bits();
    let sign = ((b >> 16) & 0x8000) as u16;
    let exp = ((b >> 23) & 0xff) as i32;
    let man = b & 0x007f_ffff;
    if exp == 0xff {
        let nan = if man != 0 { 0x0200 | (man >> 13) as u16 } else { 0 };
        return sign | 0x7c00 | nan;
    }
    let e = exp - 127 + 15;
    if e >= 0x1f {
        return sign | 0x7c00;
    }
    if e <= 0 {
        if e < -10 {
            return sign;
        }
        let m = man | 0x0080_0000;
        let shift = (14 - e) as u32;
        let half = 1u32 << (shift - 1);
        let rem = m & ((1u32 << shift) - 1);
        let mut r = m >> shift;
        if rem > half || (rem == half && r & 1 == 1) {
            r += 1;
        }
        return sign | r as u16;
    }
    let mut r = ((e as u32) << 10) | (man >> 13);
    let rem = man & 0x1fff;
    if rem > 0x1000 || (rem == 0x1000 && r & 1 == 1) {
        r += 1;
    }
    sign | r as u16
}

pub fn f16_decode(h: u16) -> f32 {
    let sign = ((h as u32) & 0x8000) << 16;
    let exp = ((h >> 10) & 0x1f) as u32;
    let man = (h & 0x03ff) as u32;
    match exp {
        0 => {
            let v = man as f32 * 2f32.powi(-24);
            f32::from_bits(sign | v.to_bits())
        }
        0x1f => f32::from_bits(sign | 0x7f80_0000 | (man << 13)),
        _ => f32::from_bits(sign | ((exp + 112) << 23) | (man << 13)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheFileHeader {
    pub version: u16,
    pub kind: ContainerKind,
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    pub digest: [u8; 8],
    pub payload_len: u64,
}

impl CacheFileHeader {
    pub fn new(kind: ContainerKind, dtype: Dtype, dims: &[usize], digest: [u8; 8]) -> Result<Self> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("unsupported rank {}", dims.len())));
        }
        let dims: Vec<u64> = dims.iter().map(|d| *d as u64).collect();
        let payload_len = payload_len(&dims, dtype)?;
        Ok(Self {
            version: VERSION,
            kind,
            dtype,
            dims,
            digest,
            payload_len,
        })
    }

    pub fn encoded_len(rank: usize) -> usize {
        4 + 2 + 1 + 1 + 1 + 8 * rank + 8 + 8
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.dims.len()));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.kind as u8);
        out.push(self.dtype as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    /// Parses a header from the front of `bytes`, returning it with its length.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || Error::Corrupt(format!("header truncated at {} bytes", bytes.len()));
        if bytes.len() < 9 {
            return Err(short());
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = ContainerKind::from_code(bytes[6])?;
        let dtype = Dtype::from_code(bytes[7])?;
        let rank = bytes[8] as usize;
        if rank == 0 {
            return Err(Error::Format("rank 0".into()));
        }
        let len = Self::encoded_len(rank);
        if bytes.len() < len {
            return Err(short());
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let dims: Vec<u64> = (0..rank).map(|i| u64_at(9 + 8 * i)).collect();
        let off = 9 + 8 * rank;
        let digest: [u8; 8] = bytes[off..off + 8].try_into().expect("8 bytes");
        let stated = u64_at(off + 8);
        let expected = payload_len(&dims, dtype)?;
        if stated != expected {
            return Err(Error::Format(format!(
                "payload length {stated} disagrees with dims {dims:?} ({expected})"
            )));
        }
        Ok((
            Self {
                version,
                kind,
                dtype,
                dims,
                digest,
                payload_len: stated,
            },
            len,
        ))
    }
}

fn payload_len(dims: &[u64], dtype: Dtype) -> Result<u64> {
    dims.iter()
        .try_fold(dtype.size() as u64, |acc, d| acc.checked_mul(*d))
        .filter(|n| *n <= isize::MAX as u64)
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))
}

/// Decoded container: header plus scalars widened to f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: CacheFileHeader,
    pub data: Vec<f32>,
}

pub fn encode_container(header: &CacheFileHeader, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != header.numel() {
        return Err(Error::Format(format!(
            "{} scalars for dims {:?}",
            data.len(),
            header.dims
        )));
    }
    let mut out = header.encode();
    out.reserve(header.payload_len as usize + TRAILER);
    match header.dtype {
        Dtype::F32 => data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Dtype::F16 => data.iter().for_each(|x| out.extend_from_slice(&f16_encode(*x).to_le_bytes())),
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Decodes one container from the front of `bytes`; returns it and the
/// number of bytes consumed.
pub fn decode_container(bytes: &[u8]) -> Result<(Container, usize)> {
    let (header, hlen) = CacheFileHeader::decode(bytes)?;
    let plen = header.payload_len as usize;
    let end = hlen + plen;
    if bytes.len() < end + TRAILER {
        return Err(Error::Corrupt(format!(
            "payload truncated: need {} bytes, have {}",
            end + TRAILER,
            bytes.len()
        )));
    }
    let stored = u64::from_le_bytes(bytes[end..end + TRAILER].try_into().expect("8 bytes"));
    if stored != fnv1a64(&bytes[..end]) {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let payload = &bytes[hlen..end];
    let data = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => payload
            .chunks_exact(2)
            .map(|c| f16_decode(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
    };
    Ok((Container { header, data }, end + TRAILER))
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Returns the number of bytes written.
pub fn save_container(path: &Path, header: &CacheFileHeader, data: &[f32]) -> Result<u64> {
    let bytes = encode_container(header, data)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_container(path: &Path) -> Result<Container> {
    let bytes = read_file(path)?;
    let (c, used) = decode_container(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(c)
}

/// Several containers back to back in one file.
pub fn save_bundle(path: &Path, parts: &[(CacheFileHeader, &[f32])]) -> Result<u64> {
    let mut bytes = Vec::new();
    for (h, d) in parts {
        bytes.extend(encode_container(h, d)?);
    }
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_bundle(path: &Path) -> Result<Vec<Container>> {
    decode_bundle(&read_file(path)?)
}

pub fn decode_bundle(mut bytes: &[u8]) -> Result<Vec<Container>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (c, used) = decode_container(bytes)?;
        out.push(c);
        bytes = &bytes[used..];
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub label: String,
    pub samples: usize,
    pub discarded: usize,
    pub mean_s: f64,
    pub ci95_s: f64,
    pub bytes: u64,
}

impl LoadStats {
    pub const CSV_HEADER: &'static str = "strategy,T,bytes,mean_s,ci95_s";

    pub fn csv_row(&self, t: usize) -> String {
        format!("{},{},{},{:.6e},{:.6e}", self.label, t, self.bytes, self.mean_s, self.ci95_s)
    }
}

/// Mean and Student-t 95% half-width of `times` after dropping the first
/// `discard` entries.
pub fn summarize(times: &[f64], discard: usize) -> Result<(f64, f64)> {
    if times.len() <= discard {
        return Err(Error::Config(format!(
            "{} samples do not exceed {discard} discarded",
            times.len()
        )));
    }
    let kept = &times[discard..];
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    if kept.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = kept.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::Numeric(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * (var / n).sqrt()))
}

/// Times full read-and-decode of each file `reps` times; the first `discard`
/// timings of each file are dropped. Page-cache state is not controlled.
pub fn bench_load(paths: &[PathBuf], reps: usize, discard: usize) -> Result<Vec<LoadStats>> {
    if reps <= discard {
        return Err(Error::Config(format!("reps {reps} must exceed discard {discard}")));
    }
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let mut times = Vec::with_capacity(reps);
        let mut bytes = 0;
        let mut label = String::new();
        for _ in 0..reps {
            let start = Instant::now();
            let c = load_container(path)?;
            times.push(start.elapsed().as_secs_f64());
            bytes = c.header.payload_len;
            label = c.header.kind.label().to_string();
            std::hint::black_box(&c.data);
        }
        let (mean_s, ci95_s) = summarize(&times, discard)?;
        out.push(LoadStats {
            label,
            samples: reps,
            discarded: discard,
            mean_s,
            ci95_s,
            bytes,
        });
    }
    Ok(out)
}
