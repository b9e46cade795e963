//! Cache load timing and attention operation counts.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::{cached_attention_macs, uncached_attention_macs, CacheStrategy};
use crate::decoder::{decode_step, forward_full, DecoderConfig, DecoderWeights};
use crate::error::{Error, Result};
use crate::store::{self, geometry_digest, CacheFileHeader, Dtype, LoadStats};
use crate::tensor::kernels;

/// Shape of the synthetic caches timed by [`bench_load_table`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadGeometry {
    pub n_layers: usize,
    pub hidden: usize,
    pub batch: usize,
    pub dtype: Dtype,
}

impl LoadGeometry {
    /// 32 layers, hidden 1024, batch 8, f16.
    pub fn standard() -> Self {
        Self {
            n_layers: 32,
            hidden: 1024,
            batch: 8,
            dtype: Dtype::F16,
        }
    }

    /// Container dims of one batch of caches of `t` tokens. XC states are
    /// `hidden` wide.
    pub fn dims(&self, strategy: CacheStrategy, t: usize) -> Vec<usize> {
        let (b, l, h) = (self.batch, self.n_layers, self.hidden);
        match strategy {
            CacheStrategy::Kv => vec![b, l, 2, t, h],
            CacheStrategy::JitKv => vec![b, l, t, h],
            CacheStrategy::Xc => vec![b, t, h],
        }
    }
}

pub const DEFAULT_LENGTHS: [usize; 4] = [1024, 2048, 4096, 8192];

#[derive(Clone, Debug, PartialEq)]
pub struct LoadBlob {
    pub strategy: CacheStrategy,
    pub t: usize,
    pub path: PathBuf,
    pub payload_bytes: u64,
    pub file_bytes: u64,
}

/// Writes one random cache file per strategy and length into `dir`,
/// named `{strategy}_{t}.xcc`.
pub fn write_load_blobs(dir: &Path, g: &LoadGeometry, lengths: &[usize], seed: u64) -> Result<Vec<LoadBlob>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let digest = geometry_digest(format!("bench:{}:{}", g.n_layers, g.hidden).as_bytes());
    let mut out = Vec::new();
    for strategy in CacheStrategy::ALL {
        for &t in lengths {
            let dims = g.dims(strategy, t);
            let header = CacheFileHeader::new(strategy.kind(), g.dtype, &dims, digest)?;
            let data: Vec<f32> = (0..header.numel()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let path = dir.join(format!("{}_{t}.xcc", strategy.to_string().to_lowercase()));
            let file_bytes = store::save_container(&path, &header, &data)?;
            out.push(LoadBlob {
                strategy,
                t,
                path,
                payload_bytes: header.payload_len,
                file_bytes,
            });
        }
    }
    Ok(out)
}

/// Finds `{strategy}_{t}.xcc` files in `dir`, sorted by strategy then length.
pub fn find_load_blobs(dir: &Path) -> Result<Vec<LoadBlob>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(stem) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".xcc")) else {
            continue;
        };
        let Some((s, t)) = stem.rsplit_once('_') else { continue };
        let (Ok(strategy), Ok(t)) = (s.parse::<CacheStrategy>(), t.parse::<usize>()) else {
            continue;
        };
        let file_bytes = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        let mut head = Vec::new();
        std::fs::File::open(&path)
            .and_then(|f| f.take(4096).read_to_end(&mut head))
            .map_err(|e| Error::io(&path, e))?;
        let header = CacheFileHeader::decode(&head)?.0;
        out.push(LoadBlob {
            strategy,
            t,
            path,
            payload_bytes: header.payload_len,
            file_bytes,
        });
    }
    out.sort_by_key(|b| (CacheStrategy::ALL.iter().position(|s| *s == b.strategy), b.t));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadRow {
    pub strategy: CacheStrategy,
    pub t: usize,
    pub stats: LoadStats,
}

pub fn bench_load_table(blobs: &[LoadBlob], reps: usize, discard: usize) -> Result<Vec<LoadRow>> {
    let paths: Vec<PathBuf> = blobs.iter().map(|b| b.path.clone()).collect();
    let stats = store::bench_load(&paths, reps, discard)?;
    Ok(blobs
        .iter()
        .zip(stats)
        .map(|(b, mut s)| {
            s.label = b.strategy.to_string();
            LoadRow {
                strategy: b.strategy,
                t: b.t,
                stats: s,
            }
        })
        .collect())
}

pub fn load_csv(rows: &[LoadRow]) -> String {
    let mut out = format!("{}\n", LoadStats::CSV_HEADER);
    for r in rows {
        out.push_str(&r.stats.csv_row(r.t));
        out.push('\n');
    }
    out
}

/// Strategies as rows, lengths as columns, cells `mean ± ci95` in seconds.
pub fn load_table(rows: &[LoadRow]) -> String {
    let mut lengths: Vec<usize> = rows.iter().map(|r| r.t).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut out = format!("{:<8}", "");
    for t in &lengths {
        out.push_str(&format!("{:>24}", t));
    }
    out.push('\n');
    for s in CacheStrategy::ALL {
        if !rows.iter().any(|r| r.strategy == s) {
            continue;
        }
        out.push_str(&format!("{:<8}", s.to_string()));
        for t in &lengths {
            let cell = rows
                .iter()
                .find(|r| r.strategy == s && r.t == *t)
                .map(|r| format!("{:.3e} ± {:.1e}", r.stats.mean_s, r.stats.ci95_s))
                .unwrap_or_default();
            out.push_str(&format!("{cell:>24}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnRow {
    pub t_ctx: usize,
    pub n_new: usize,
    pub uncached_macs: u64,
    pub cached_macs: u64,
    pub uncached_expected: u64,
    pub cached_expected: u64,
    pub uncached_s: f64,
    pub cached_s: f64,
}

impl AttnRow {
    pub const CSV_HEADER: &'static str =
        "context,new_tokens,uncached_macs,cached_macs,uncached_expected,cached_expected,uncached_s,cached_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6e},{:.6e}",
            self.t_ctx,
            self.n_new,
            self.uncached_macs,
            self.cached_macs,
            self.uncached_expected,
            self.cached_expected,
            self.uncached_s,
            self.cached_s
        )
    }
}

/// A small decoder whose window fits `max_seq` tokens, for counting.
pub fn counting_decoder(max_seq: usize) -> DecoderConfig {
    DecoderConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        head_dim: 8,
        vocab_size: 32,
        max_seq,
        rope_theta: 10000.0,
        mlp_hidden: 32,
        norm_eps: 1e-5,
    }
}

/// Counts attention multiply-accumulates of processing `t + n_new` tokens
/// from scratch versus decoding `n_new` tokens against a cached context of
/// `t` tokens.
pub fn attention_cost(cfg: &DecoderConfig, lengths: &[usize], n_new: usize, seed: u64) -> Result<Vec<AttnRow>> {
    let max_t = lengths.iter().max().copied().unwrap_or(0) + n_new;
    if max_t > cfg.max_seq {
        return Err(Error::Length {
            len: max_t,
            max: cfg.max_seq,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DecoderWeights::init(cfg, &mut rng)?;
    let mut out = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let tokens: Vec<usize> = (0..t + n_new).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();

        kernels::reset_attention_macs();
        let start = Instant::now();
        std::hint::black_box(forward_full(&w, cfg, &tokens)?);
        let uncached_s = start.elapsed().as_secs_f64();
        let uncached_macs = kernels::attention_macs();

        let mut kv = forward_full(&w, cfg, &tokens[..t])?.kv;
        kernels::reset_attention_macs();
        let start = Instant::now();
        for &tok in &tokens[t..] {
            std::hint::black_box(decode_step(&w, cfg, tok, &mut kv)?);
        }
        let cached_s = start.elapsed().as_secs_f64();
        let cached_macs = kernels::attention_macs();

        out.push(AttnRow {
            t_ctx: t,
            n_new,
            uncached_macs,
            cached_macs,
            uncached_expected: uncached_attention_macs(cfg, t + n_new),
            cached_expected: cached_attention_macs(cfg, t, n_new),
            uncached_s,
            cached_s,
        });
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| *v <= 0.0) {
        return Err(Error::Contract("slope needs at least two positive points".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("slope needs distinct lengths".into()));
    }
    Ok(sxy / sxx)
}
