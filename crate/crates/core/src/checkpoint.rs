//! Binary model file.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! "CNXK"  u32 version  u32 header_len
//! header: u32 pair_count, then per pair u32 key_len, key, u32 value_len, value
//! u64 mask_bytes  u64 param_count  u64 norm_count  u64 optimizer_count
//! mask bitmaps     one per learned group conv, groups × inputs bits, LSB first, byte padded
//! parameters       f32 × param_count, declaration order, pruned entries omitted
//! norm statistics  f32 × norm_count, running mean then variance per batch norm
//! optimizer        f32 × optimizer_count, velocities laid out like the parameters
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::arch::{build, LayerGraph, ModelSpec};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::train::Sgd;

pub const MAGIC: [u8; 4] = *b"CNXK";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;
const COUNTS: usize = 32;

/// Everything stored next to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub norm: Normalization,
    pub class_counts: Vec<usize>,
    /// Epochs completed.
    pub epoch: usize,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            norm: Normalization::default(),
            class_counts: Vec::new(),
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub graph: LayerGraph,
    pub meta: CheckpointMeta,
    pub optimizer: Option<Sgd>,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn mask_bytes(graph: &LayerGraph) -> Vec<u8> {
    let mut out = Vec::new();
    for st in graph.lgc_states() {
        let bits: Vec<bool> = st.mask.iter().flatten().copied().collect();
        for chunk in bits.chunks(8) {
            out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &k)| b | (u8::from(k) << i)));
        }
    }
    out
}

fn header_pairs(graph: &LayerGraph, meta: &CheckpointMeta, optimizer: Option<&Sgd>) -> Vec<(String, String)> {
    let mut pairs = graph.spec.to_pairs();
    let stage = graph.lgc_states().iter().map(|s| s.stage_index).max().unwrap_or(0);
    pairs.extend([
        ("norm_mean".into(), join(&meta.norm.mean)),
        ("norm_std".into(), join(&meta.norm.std)),
        ("class_counts".into(), join(&meta.class_counts)),
        ("epoch".into(), meta.epoch.to_string()),
        ("condense_stage".into(), stage.to_string()),
    ]);
    if let Some(opt) = optimizer {
        pairs.push(("momentum".into(), opt.momentum.to_string()));
        pairs.push(("weight_decay".into(), opt.weight_decay.to_string()));
    }
    pairs
}

/// Serializes the model; optimizer velocities are included when given.
pub fn save_checkpoint(graph: &LayerGraph, meta: &CheckpointMeta, optimizer: Option<&Sgd>) -> Vec<u8> {
    let mut header = Vec::new();
    let pairs = header_pairs(graph, meta, optimizer);
    push_u32(&mut header, pairs.len() as u32);
    for (k, v) in &pairs {
        push_str(&mut header, k);
        push_str(&mut header, v);
    }

    let masks = mask_bytes(graph);
    let params: Vec<f32> = graph
        .params()
        .iter()
        .flat_map(|p| {
            p.value
                .data()
                .iter()
                .enumerate()
                .filter(|(i, _)| p.is_kept(*i))
                .map(|(_, &v)| v)
        })
        .collect();
    let norms: Vec<f32> = graph
        .norms()
        .iter()
        .flat_map(|n| n.running.mean.iter().chain(&n.running.var).copied())
        .collect();
    let velocities: Vec<f32> = match optimizer {
        Some(opt) if !opt.velocities().is_empty() => graph
            .params()
            .iter()
            .zip(opt.velocities())
            .flat_map(|(p, v)| v.iter().enumerate().filter(|(i, _)| p.is_kept(*i)).map(|(_, &x)| x))
            .collect(),
        _ => Vec::new(),
    };

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + COUNTS + masks.len() + 4 * (params.len() + norms.len() + velocities.len()) + 4);
    out.extend_from_slice(&MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    for n in [masks.len(), params.len(), norms.len(), velocities.len()] {
        push_u64(&mut out, n as u64);
    }
    out.extend_from_slice(&masks);
    for v in params.iter().chain(&norms).chain(&velocities) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    push_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("field of {n} bytes runs past the header"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            message: "header string is not UTF-8".into(),
        })
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn header_value<'p>(pairs: &'p [(String, String)], key: &str) -> Option<&'p str> {
    pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn bad_header(key: &str) -> Error {
    Error::Format {
        offset: PREAMBLE as u64,
        message: format!("header field `{key}` missing or malformed"),
    }
}

fn parse_floats<const N: usize>(pairs: &[(String, String)], key: &str) -> Result<[f32; N]> {
    let v: Vec<f32> = header_value(pairs, key)
        .ok_or_else(|| bad_header(key))?
        .split(',')
        .map(|s| s.parse().map_err(|_| bad_header(key)))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|_| bad_header(key))
}

fn parse_usize(pairs: &[(String, String)], key: &str) -> Result<usize> {
    header_value(pairs, key)
        .ok_or_else(|| bad_header(key))?
        .parse()
        .map_err(|_| bad_header(key))
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let actual = bytes.len() as u64;
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated {
            expected: PREAMBLE as u64,
            actual,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(Error::BadMagic { found });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as u64;
    let fixed = PREAMBLE as u64 + header_len + COUNTS as u64;
    if actual < fixed + 4 {
        return Err(Error::Truncated {
            expected: fixed + 4,
            actual,
        });
    }
    let counts_at = (PREAMBLE as u64 + header_len) as usize;
    let count = |i: usize| u64::from_le_bytes(bytes[counts_at + 8 * i..counts_at + 8 * i + 8].try_into().expect("8 bytes"));
    let (n_mask, n_param, n_norm, n_opt) = (count(0), count(1), count(2), count(3));
    let expected = [n_mask, 4 * n_param, 4 * n_norm, 4 * n_opt, 4]
        .iter()
        .try_fold(fixed, |acc, &v| acc.checked_add(v))
        .ok_or_else(|| Error::Format {
            offset: counts_at as u64,
            message: "section sizes overflow".into(),
        })?;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format {
            offset: expected,
            message: format!("{} unexpected trailing bytes", actual - expected),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader {
        bytes: &body[..counts_at],
        pos: PREAMBLE,
    };
    let n_pairs = r.u32()?;
    let mut pairs = Vec::new();
    for _ in 0..n_pairs {
        let k = r.string()?;
        let v = r.string()?;
        pairs.push((k, v));
    }
    let spec_keys = ["variant", "stages", "growth", "groups", "condensation_factor", "p", "classes", "init_channels", "bottleneck", "input"];
    let spec_pairs: Vec<(String, String)> = pairs.iter().filter(|(k, _)| spec_keys.contains(&k.as_str())).cloned().collect();
    let spec = ModelSpec::from_pairs(&spec_pairs).map_err(|e| Error::Format {
        offset: PREAMBLE as u64,
        message: format!("stored model description is invalid: {e}"),
    })?;
    let meta = CheckpointMeta {
        norm: Normalization {
            mean: parse_floats(&pairs, "norm_mean")?,
            std: parse_floats(&pairs, "norm_std")?,
        },
        class_counts: match header_value(&pairs, "class_counts") {
            Some("") | None => Vec::new(),
            Some(v) => v
                .split(',')
                .map(|s| s.parse().map_err(|_| bad_header("class_counts")))
                .collect::<Result<_>>()?,
        },
        epoch: parse_usize(&pairs, "epoch")?,
    };
    let stage = parse_usize(&pairs, "condense_stage")?;

    let mut graph = build(&spec, 0)?;
    let mut r = Reader {
        bytes: body,
        pos: counts_at + COUNTS,
    };
    let section_err = |what: &str, stored: u64, want: u64| Error::Format {
        offset: counts_at as u64,
        message: format!("{what}: file holds {stored}, model needs {want}"),
    };

    let want_mask: usize = graph.lgc_states().iter().map(|s| (s.groups * s.in_channels).div_ceil(8)).sum();
    if n_mask != want_mask as u64 {
        return Err(section_err("mask bytes", n_mask, want_mask as u64));
    }
    let masks = r.take(want_mask)?;
    let mut at = 0;
    for b in graph.blocks_mut() {
        let st = &mut b.lgc.state;
        let bits = st.groups * st.in_channels;
        let flags: Vec<bool> = (0..bits).map(|j| masks[at + j / 8] >> (j % 8) & 1 == 1).collect();
        at += bits.div_ceil(8);
        for (g, row) in flags.chunks_exact(st.in_channels).enumerate() {
            st.mask[g] = row.to_vec();
        }
        st.stage_index = stage;
        b.lgc.weight.mask = (!st.is_full()).then(|| st.weight_mask());
    }

    let want_params: usize = graph.param_count();
    if n_param != want_params as u64 {
        return Err(section_err("parameters", n_param, want_params as u64));
    }
    let flat = r.f32s(want_params)?;
    scatter_kept(&mut graph, &flat, |p| p.value.data_mut());

    let want_norm: usize = graph.norms().iter().map(|n| 2 * n.channels()).sum();
    if n_norm != want_norm as u64 {
        return Err(section_err("batch-norm statistics", n_norm, want_norm as u64));
    }
    let stats = r.f32s(want_norm)?;
    let mut at = 0;
    for n in graph.norms_mut() {
        let c = n.channels();
        n.running.mean.copy_from_slice(&stats[at..at + c]);
        n.running.var.copy_from_slice(&stats[at + c..at + 2 * c]);
        at += 2 * c;
    }

    let optimizer = if n_opt == 0 {
        None
    } else {
        if n_opt != want_params as u64 {
            return Err(section_err("optimizer state", n_opt, want_params as u64));
        }
        let flat = r.f32s(want_params)?;
        let mut velocity: Vec<Vec<f32>> = graph.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let mut it = flat.into_iter();
        for (p, v) in graph.params().iter().zip(&mut velocity) {
            for (i, slot) in v.iter_mut().enumerate() {
                if p.is_kept(i) {
                    *slot = it.next().expect("count checked");
                }
            }
        }
        let num = |k: &str| header_value(&pairs, k).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad_header(k));
        let mut opt = Sgd::new(num("momentum")?, num("weight_decay")?);
        opt.set_velocities(velocity);
        Some(opt)
    };
    Ok(Checkpoint { graph, meta, optimizer })
}

fn scatter_kept(graph: &mut LayerGraph, flat: &[f32], target: impl Fn(&mut crate::param::Param) -> &mut [f32]) {
    let mut it = flat.iter().copied();
    for p in graph.params_mut() {
        let mask = p.mask.clone();
        for (i, slot) in target(p).iter_mut().enumerate() {
            *slot = if mask.as_ref().is_none_or(|m| m[i]) {
                it.next().expect("count checked")
            } else {
                0.0
            };
        }
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, graph: &LayerGraph, meta: &CheckpointMeta, optimizer: Option<&Sgd>) -> Result<u64> {
    let bytes = save_checkpoint(graph, meta, optimizer);
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    load_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Variant;

    fn toy() -> LayerGraph {
        let spec = ModelSpec {
            stages: vec![(2, 4)],
            input_shape: (3, 8, 8),
            ..ModelSpec::cifar(Variant::CondenseNeXt)
        };
        let mut g = build(&spec, 11).unwrap();
        g.condense(1).unwrap();
        g
    }

    #[test]
    fn round_trip_restores_everything() {
        let g = toy();
        let meta = CheckpointMeta {
            class_counts: vec![3; 10],
            epoch: 7,
            ..Default::default()
        };
        let back = load_checkpoint(&save_checkpoint(&g, &meta, None)).unwrap();
        assert_eq!(back.graph, g);
        assert_eq!(back.meta, meta);
        assert!(back.optimizer.is_none());
    }

    #[test]
    fn load_errors_are_distinct() {
        let bytes = save_checkpoint(&toy(), &CheckpointMeta::default(), None);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_checkpoint(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(load_checkpoint(&bad), Err(Error::UnsupportedVersion(9))));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 20] ^= 0x40;
        assert!(matches!(load_checkpoint(&bad), Err(Error::Checksum { .. })));
        match load_checkpoint(&bytes[..n - 9]) {
            Err(Error::Truncated { expected, actual }) => assert_eq!((expected, actual), (n as u64, n as u64 - 9)),
            other => panic!("{other:?}"),
        }
    }
}
