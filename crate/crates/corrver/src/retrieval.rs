//! Retrieval pipeline: quantized feature store, global ranking, and
//! verification re-ranking with score fusion.
//!
//! The store keeps, per image id, a unit-norm global descriptor and the
//! reduced feature pyramid, by default as 8-bit affine-quantized levels.
//! Global ranking sorts the whole database by descriptor cosine;
//! `rerank_topk` rescores the first k candidates with the correlation
//! verifier and re-orders that prefix by the fused score
//! `s_g + alpha * s_r`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::correlation::{
    assemble_cross_scale, build_pyramid, reduce_scalewise, FeatureMap, FeaturePyramid,
    ReducerWeights,
};
use crate::encoder::{encoder_forward, similarity_from_logit, EncoderWeights};
use crate::error::{Error, Result};
use crate::ops::l2_normalize;
use crate::tensor::io::{read_stored, save_stored, StoredTensor};
use crate::tensor::{QuantizedTensor, Tensor};
use crate::training::global_descriptor;

/// Affine 8-bit quantization over the whole tensor: `scale = (max - min) / 255`,
/// `zero_point = min`, `code = round((x - min) / scale)`. Constant tensors
/// store scale 1 and all-zero codes, which makes their round trip exact.
pub fn quantize(x: &Tensor) -> Result<QuantizedTensor> {
    if !x.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("quantize input".into()));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in x.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let (scale, zero) = if hi > lo { ((hi - lo) / 255.0, lo) } else { (1.0, lo) };
    let codes = x
        .data()
        .iter()
        .map(|&v| ((v - zero) / scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    QuantizedTensor::new(x.shape(), codes, scale, zero)
}

/// Inverse of [`quantize`]: `code * scale + zero_point` per element. The
/// result deviates from the original by at most `scale / 2` per element.
pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    let data = q.codes.iter().map(|&c| c as f32 * q.scale + q.zero_point).collect();
    Tensor::new(&q.shape, data)
}

/// Stored artifacts for one image: the unit-norm global descriptor plus the
/// reduced pyramid levels (quantized or float).
#[derive(Debug, Clone)]
pub struct StoreEntry {
    pub descriptor: Tensor,
    pub levels: Vec<StoredTensor>,
}

impl StoreEntry {
    /// The stored levels as float maps, dequantizing where needed.
    pub fn pyramid(&self) -> Result<FeaturePyramid> {
        let mut maps = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let t = match level {
                StoredTensor::F32(t) => t.clone(),
                StoredTensor::QuantU8(q) => dequantize(q)?,
            };
            maps.push(FeatureMap::new(t)?);
        }
        FeaturePyramid::from_levels(maps)
    }
}

/// Id-keyed collection of descriptors and reduced pyramids. All descriptors
/// share one dimension and are unit-norm; all entries hold the same number
/// of pyramid levels with the same channel count.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    entries: BTreeMap<u64, StoreEntry>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: u64) -> Option<&StoreEntry> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &StoreEntry)> {
        self.entries.iter().map(|(id, e)| (*id, e))
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    pub fn descriptor_dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.descriptor.len())
    }

    pub fn num_levels(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.levels.len())
    }

    /// Total payload bytes of the stored pyramid levels (codes for
    /// quantized levels, raw floats otherwise); headers excluded.
    pub fn level_payload_bytes(&self) -> usize {
        self.entries.values().flat_map(|e| &e.levels).map(StoredTensor::payload_bytes).sum()
    }

    /// Adds an entry, L2-normalizing the descriptor first. Rejects
    /// duplicate ids and anything inconsistent with entries already stored.
    pub fn insert(&mut self, id: u64, descriptor: Tensor, levels: Vec<StoredTensor>) -> Result<()> {
        if descriptor.rank() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "descriptor must be rank 1, got {:?}",
                descriptor.shape()
            )));
        }
        let (d, degenerate) = l2_normalize(&descriptor);
        if degenerate {
            return Err(Error::DegenerateShape("zero descriptor cannot be normalized".into()));
        }
        self.insert_raw(id, d, levels)
    }

    /// `insert` minus the normalization; used when loading descriptors that
    /// are unit-norm already, so their bytes survive a round trip.
    fn insert_raw(&mut self, id: u64, descriptor: Tensor, levels: Vec<StoredTensor>) -> Result<()> {
        if self.entries.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("duplicate store id {id}")));
        }
        if levels.is_empty() {
            return Err(Error::InvalidArgument("an entry needs at least one pyramid level".into()));
        }
        for level in &levels {
            if level.shape().len() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "pyramid level must be [c, h, w], got {:?}",
                    level.shape()
                )));
            }
        }
        let channels = levels[0].shape()[0];
        if levels.iter().any(|l| l.shape()[0] != channels) {
            return Err(Error::ShapeMismatch("pyramid levels disagree on channels".into()));
        }
        if let Some(first) = self.entries.values().next() {
            if first.descriptor.len() != descriptor.len() {
                return Err(Error::ShapeMismatch(format!(
                    "descriptor dim {} differs from the store's {}",
                    descriptor.len(),
                    first.descriptor.len()
                )));
            }
            if first.levels.len() != levels.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} pyramid levels differ from the store's {}",
                    levels.len(),
                    first.levels.len()
                )));
            }
            if first.levels[0].shape()[0] != channels {
                return Err(Error::ShapeMismatch(format!(
                    "level channels {} differ from the store's {}",
                    channels,
                    first.levels[0].shape()[0]
                )));
            }
        }
        self.entries.insert(id, StoreEntry { descriptor, levels });
        Ok(())
    }

    /// Persists the store into a directory: `manifest.txt` plus
    /// `<id>.desc.cvt` and `<id>.lvl<k>.cvt` per entry. Deterministic:
    /// entries are written in ascending id order.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let first = self
            .entries
            .values()
            .next()
            .ok_or_else(|| Error::InvalidArgument("cannot export an empty store".into()))?;
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str(&format!("descriptor_dim = {}\n", first.descriptor.len()));
        manifest.push_str(&format!("num_levels = {}\n", first.levels.len()));
        manifest.push_str(&format!("entries = {}\n", self.entries.len()));
        for id in self.entries.keys() {
            manifest.push_str(&format!("entry = {id}\n"));
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        for (id, e) in &self.entries {
            save_stored(&dir.join(format!("{id}.desc.cvt")), &StoredTensor::F32(e.descriptor.clone()))?;
            for (k, level) in e.levels.iter().enumerate() {
                save_stored(&dir.join(format!("{id}.lvl{k}.cvt")), level)?;
            }
        }
        Ok(())
    }

    /// Loads a directory written by [`FeatureStore::save`], validating the
    /// manifest against the files it names.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.txt");
        let mname = mpath.display().to_string();
        let text = fs::read_to_string(&mpath)
            .map_err(|e| Error::Format { file: mname.clone(), reason: format!("cannot read: {e}") })?;
        let mut descriptor_dim = None;
        let mut num_levels = None;
        let mut declared = None;
        let mut ids: Vec<u64> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Format { file: mname.clone(), reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let parsed = value
                .parse::<u64>()
                .map_err(|_| bad(format!("line {}: cannot parse {value}", lineno + 1)));
            match key {
                "descriptor_dim" => descriptor_dim = Some(parsed? as usize),
                "num_levels" => num_levels = Some(parsed? as usize),
                "entries" => declared = Some(parsed? as usize),
                "entry" => ids.push(parsed?),
                other => return Err(bad(format!("line {}: unknown key {other}", lineno + 1))),
            }
        }
        let fmt = |reason: &str| Error::Format { file: mname.clone(), reason: reason.to_string() };
        let dim = descriptor_dim.ok_or_else(|| fmt("missing descriptor_dim"))?;
        let num_levels = num_levels.ok_or_else(|| fmt("missing num_levels"))?;
        let declared = declared.ok_or_else(|| fmt("missing entries count"))?;
        if ids.len() != declared {
            return Err(fmt(&format!("{} entry lines but entries = {declared}", ids.len())));
        }
        if num_levels == 0 {
            return Err(fmt("num_levels must be positive"));
        }
        let mut store = Self::new();
        for id in ids {
            let dpath = dir.join(format!("{id}.desc.cvt"));
            let dname = dpath.display().to_string();
            let descriptor = match read_stored_file(&dpath)? {
                StoredTensor::F32(t) => t,
                StoredTensor::QuantU8(_) => {
                    return Err(Error::Format {
                        file: dname,
                        reason: "descriptors must be float".into(),
                    })
                }
            };
            if descriptor.rank() != 1 || descriptor.len() != dim {
                return Err(Error::Format {
                    file: dname,
                    reason: format!("descriptor dim drift vs manifest: {:?}", descriptor.shape()),
                });
            }
            if (descriptor.norm() - 1.0).abs() > 1e-3 {
                return Err(Error::Format { file: dname, reason: "descriptor is not unit-norm".into() });
            }
            let mut levels = Vec::with_capacity(num_levels);
            for k in 0..num_levels {
                levels.push(read_stored_file(&dir.join(format!("{id}.lvl{k}.cvt")))?);
            }
            store.insert_raw(id, descriptor, levels)?;
        }
        Ok(store)
    }
}

fn read_stored_file(path: &Path) -> Result<StoredTensor> {
    let name = path.display().to_string();
    let bytes = fs::read(path)
        .map_err(|e| Error::Format { file: name.clone(), reason: format!("cannot read: {e}") })?;
    read_stored(&mut bytes.as_slice(), &name)
}

/// One scored candidate. `s_r` is present exactly for entries that went
/// through verification; everywhere else `s_fused` equals `s_g`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankEntry {
    pub id: u64,
    pub s_g: f32,
    pub s_r: Option<f32>,
    pub s_fused: f32,
}

/// A query's candidate list, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: u64,
    pub entries: Vec<RankEntry>,
}

/// Descending fused score, ties broken by ascending id. Scores are finite
/// here (descriptors are unit-norm, similarities live in (0, 1)), so the
/// comparison is total in practice.
fn sort_ranked(entries: &mut [RankEntry]) {
    entries.sort_by(|a, b| {
        b.s_fused
            .partial_cmp(&a.s_fused)
            .unwrap_or(Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
}

/// Ranks every stored id against the query's stored descriptor by cosine
/// (unit-norm dot), best first, ties broken by ascending id. The query
/// itself ranks like any other entry.
pub fn global_rank(query_id: u64, store: &FeatureStore) -> Result<RankedList> {
    let q = store
        .entry(query_id)
        .ok_or_else(|| Error::MissingEntry(format!("query {query_id} not in store")))?;
    global_rank_external(query_id, &q.descriptor, store)
}

/// [`global_rank`] for a descriptor that is not stored; `query_id` only
/// labels the output.
pub fn global_rank_external(query_id: u64, d_q: &Tensor, store: &FeatureStore) -> Result<RankedList> {
    if store.is_empty() {
        return Err(Error::InvalidArgument("cannot rank against an empty store".into()));
    }
    if d_q.rank() != 1 || Some(d_q.len()) != store.descriptor_dim() {
        return Err(Error::ShapeMismatch(format!(
            "query descriptor {:?} vs store dim {:?}",
            d_q.shape(),
            store.descriptor_dim()
        )));
    }
    let mut entries = Vec::with_capacity(store.len());
    for (id, e) in store.iter() {
        let s = d_q.dot(&e.descriptor)?;
        entries.push(RankEntry { id, s_g: s, s_r: None, s_fused: s });
    }
    sort_ranked(&mut entries);
    Ok(RankedList { query_id, entries })
}

/// Rescores the first `k` candidates with the verifier and re-orders that
/// prefix by `s_g + alpha * s_r`. Entries beyond `k` keep their incoming
/// order and always trail the prefix; the output holds exactly the input
/// ids.
pub fn rerank_topk(
    query_id: u64,
    rl: &RankedList,
    k: usize,
    w: &EncoderWeights,
    alpha: f32,
    store: &FeatureStore,
) -> Result<RankedList> {
    if k > rl.entries.len() {
        return Err(Error::InvalidArgument(format!(
            "rerank k = {k} exceeds the candidate list ({})",
            rl.entries.len()
        )));
    }
    let missing = |id: u64| Error::MissingEntry(format!("no stored pyramid for id {id}"));
    let pq = store.entry(query_id).ok_or_else(|| missing(query_id))?.pyramid()?;
    let mut entries = Vec::with_capacity(rl.entries.len());
    for e in &rl.entries[..k] {
        let cand = store.entry(e.id).ok_or_else(|| missing(e.id))?;
        let logit = encoder_forward(&assemble_cross_scale(&pq, &cand.pyramid()?)?, w)?;
        let s_r = similarity_from_logit(&logit);
        entries.push(RankEntry { id: e.id, s_g: e.s_g, s_r: Some(s_r), s_fused: e.s_g + alpha * s_r });
    }
    sort_ranked(&mut entries);
    for e in &rl.entries[k..] {
        entries.push(RankEntry { id: e.id, s_g: e.s_g, s_r: None, s_fused: e.s_g });
    }
    Ok(RankedList { query_id, entries })
}

/// Mean average precision over per-query rankings. Average precision sums
/// precision at each relevant hit within the cutoff and divides by
/// `min(#relevant, cutoff)`, so a perfect prefix scores 1.
pub fn eval_map(
    rankings: &[RankedList],
    relevance: &BTreeMap<u64, BTreeSet<u64>>,
    cutoff: Option<usize>,
) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::InvalidArgument("no rankings to evaluate".into()));
    }
    if cutoff == Some(0) {
        return Err(Error::InvalidArgument("cutoff must be positive".into()));
    }
    let mut total = 0.0f64;
    for rl in rankings {
        let rel = relevance
            .get(&rl.query_id)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| {
                Error::InvalidArgument(format!("query {} has an empty relevance set", rl.query_id))
            })?;
        let limit = cutoff.unwrap_or(rl.entries.len()).min(rl.entries.len());
        let denom = rel.len().min(cutoff.unwrap_or(rel.len()));
        let mut hits = 0usize;
        let mut ap = 0.0f64;
        for (i, e) in rl.entries[..limit].iter().enumerate() {
            if rel.contains(&e.id) {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        total += ap / denom as f64;
    }
    Ok(total / rankings.len() as f64)
}

/// Reads a feature dump and fills the store. The manifest declares
/// `channels`, `height`, and `width`, then one `<id> = <path>` line per
/// map (paths relative to the manifest, maps in the float tensor format).
/// Each map gets a GeM descriptor (normalized on insert) and a reduced
/// pyramid; levels are 8-bit quantized unless `quantize_levels` is false,
/// which keeps floats for comparison runs.
pub fn ingest(
    manifest: &Path,
    reducers: &ReducerWeights,
    quantize_levels: bool,
    store: &mut FeatureStore,
) -> Result<()> {
    let mname = manifest.display().to_string();
    let text = fs::read_to_string(manifest)
        .map_err(|e| Error::Format { file: mname.clone(), reason: format!("cannot read: {e}") })?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut dims: BTreeMap<&str, usize> = BTreeMap::new();
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Format { file: mname.clone(), reason };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected key = value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if let Ok(id) = key.parse::<u64>() {
            files.push((id, dir.join(value)));
        } else if matches!(key, "channels" | "height" | "width") {
            let v = value
                .parse::<usize>()
                .map_err(|_| bad(format!("line {}: cannot parse {value}", lineno + 1)))?;
            dims.insert(key, v);
        } else {
            return Err(bad(format!("line {}: unknown key {key}", lineno + 1)));
        }
    }
    let dim = |k: &str| {
        dims.get(k)
            .copied()
            .ok_or_else(|| Error::Format { file: mname.clone(), reason: format!("missing {k}") })
    };
    let (c, h, w) = (dim("channels")?, dim("height")?, dim("width")?);
    for (id, path) in files {
        let fname = path.display().to_string();
        let t = match read_stored_file(&path)? {
            StoredTensor::F32(t) => t,
            StoredTensor::QuantU8(_) => {
                return Err(Error::Format {
                    file: fname,
                    reason: "expected a float feature map".into(),
                })
            }
        };
        if t.shape() != [c, h, w] {
            return Err(Error::Format {
                file: fname,
                reason: format!("dimension drift vs manifest: {:?} vs [{c}, {h}, {w}]", t.shape()),
            });
        }
        let map = FeatureMap::new(t)?;
        let descriptor = global_descriptor(&map)?;
        let reduced = reduce_scalewise(&build_pyramid(&map, reducers.num_levels())?, reducers)?;
        let levels = reduced
            .levels()
            .iter()
            .map(|l| {
                Ok(if quantize_levels {
                    StoredTensor::QuantU8(quantize(l.data())?)
                } else {
                    StoredTensor::F32(l.data().clone())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        store.insert(id, descriptor, levels)?;
    }
    Ok(())
}

/// Writes ranking blocks as CSV: a `# query = <id>` line, the column
/// header, then one row per entry with 1-based ranks. Scores carry six
/// decimal digits; `s_r` is empty outside the verified prefix. Blocks of
/// several queries can share a file.
pub fn write_rankings<W: Write>(out: &mut W, lists: &[RankedList]) -> Result<()> {
    for rl in lists {
        writeln!(out, "# query = {}", rl.query_id)?;
        writeln!(out, "rank,id,s_g,s_r,s_fused")?;
        for (i, e) in rl.entries.iter().enumerate() {
            let s_r = e.s_r.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(out, "{},{},{:.6},{},{:.6}", i + 1, e.id, e.s_g, s_r, e.s_fused)?;
        }
    }
    Ok(())
}

/// Parses the format written by [`write_rankings`]. Unknown comment lines
/// are skipped; rows before the first `# query` line are an error.
pub fn read_rankings<R: BufRead>(input: R, name: &str) -> Result<Vec<RankedList>> {
    let bad = |lineno: usize, reason: String| Error::Format {
        file: name.to_string(),
        reason: format!("line {lineno}: {reason}"),
    };
    let mut lists: Vec<RankedList> = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(id) = comment.trim().strip_prefix("query =") {
                let id = id
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| bad(lineno, format!("cannot parse query id {id}")))?;
                lists.push(RankedList { query_id: id, entries: Vec::new() });
            }
            continue;
        }
        if line == "rank,id,s_g,s_r,s_fused" {
            continue;
        }
        let current = lists
            .last_mut()
            .ok_or_else(|| bad(lineno, "row before any # query line".into()))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(lineno, format!("expected 5 fields, got {}", fields.len())));
        }
        let id = fields[1]
            .parse::<u64>()
            .map_err(|_| bad(lineno, format!("cannot parse id {}", fields[1])))?;
        let num = |s: &str| {
            s.parse::<f32>().map_err(|_| bad(lineno, format!("cannot parse score {s}")))
        };
        let s_r = if fields[3].is_empty() { None } else { Some(num(fields[3])?) };
        current.entries.push(RankEntry {
            id,
            s_g: num(fields[2])?,
            s_r,
            s_fused: num(fields[4])?,
        });
    }
    Ok(lists)
}

pub fn save_rankings(path: &Path, lists: &[RankedList]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_rankings(&mut out, lists)?;
    out.flush()?;
    Ok(())
}

pub fn load_rankings(path: &Path) -> Result<Vec<RankedList>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Format { file: path.display().to_string(), reason: format!("cannot read: {e}") })?;
    read_rankings(BufReader::new(file), &path.display().to_string())
}

/// Writes relevance as `query_id,relevant_id` rows under a header line,
/// queries ascending.
pub fn write_truth<W: Write>(out: &mut W, truth: &BTreeMap<u64, BTreeSet<u64>>) -> Result<()> {
    writeln!(out, "query_id,relevant_id")?;
    for (q, rels) in truth {
        for r in rels {
            writeln!(out, "{q},{r}")?;
        }
    }
    Ok(())
}

/// Parses the format written by [`write_truth`].
pub fn read_truth<R: BufRead>(input: R, name: &str) -> Result<BTreeMap<u64, BTreeSet<u64>>> {
    let bad = |lineno: usize, reason: String| Error::Format {
        file: name.to_string(),
        reason: format!("line {lineno}: {reason}"),
    };
    let mut truth: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "query_id,relevant_id" {
            continue;
        }
        let (q, r) = line
            .split_once(',')
            .ok_or_else(|| bad(lineno, "expected query_id,relevant_id".into()))?;
        let parse = |s: &str| {
            s.trim().parse::<u64>().map_err(|_| bad(lineno, format!("cannot parse id {s}")))
        };
        truth.entry(parse(q)?).or_default().insert(parse(r)?);
    }
    Ok(truth)
}

pub fn save_truth(path: &Path, truth: &BTreeMap<u64, BTreeSet<u64>>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_truth(&mut out, truth)?;
    out.flush()?;
    Ok(())
}

pub fn load_truth(path: &Path) -> Result<BTreeMap<u64, BTreeSet<u64>>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Format { file: path.display().to_string(), reason: format!("cannot read: {e}") })?;
    read_truth(BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, EncoderConfig};
    use crate::tensor::io::save_tensor;
    use crate::training::{generate_toy_dataset, ToyGenConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_endpoints_and_constants() {
        // Endpoints land exactly on codes 0 and 255.
        let x = Tensor::new(&[2], vec![0.0, 127.5]).unwrap();
        let q = quantize(&x).unwrap();
        assert_eq!(q.scale, 0.5);
        assert_eq!(q.zero_point, 0.0);
        assert_eq!(q.codes, vec![0, 255]);
        assert_eq!(dequantize(&q).unwrap().data(), x.data());

        let c = Tensor::new(&[5], vec![3.25; 5]).unwrap();
        let q = quantize(&c).unwrap();
        assert_eq!(q.scale, 1.0);
        assert_eq!(q.zero_point, 3.25);
        assert!(q.codes.iter().all(|&b| b == 0));
        assert_eq!(dequantize(&q).unwrap().data(), c.data());
    }

    #[test]
    fn quantize_error_bound_and_payload() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data: Vec<f32> = (0..1000).map(|_| rng.random_range(-3.0..7.0f32)).collect();
        let x = Tensor::new(&[10, 10, 10], data).unwrap();
        let q = quantize(&x).unwrap();
        let back = dequantize(&q).unwrap();
        let worst = x
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= q.scale / 2.0 + 1e-6, "worst error {worst} vs scale {}", q.scale);

        let quantized = StoredTensor::QuantU8(q);
        let float = StoredTensor::F32(x);
        assert_eq!(quantized.payload_bytes(), 1000);
        assert_eq!(float.payload_bytes(), 4 * quantized.payload_bytes());
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let x = Tensor::new(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(quantize(&x), Err(Error::NonFinite(_))));
    }

    fn axis_descriptor(dim: usize, axis: usize) -> Tensor {
        let mut d = vec![0.0f32; dim];
        d[axis] = 1.0;
        Tensor::new(&[dim], d).unwrap()
    }

    fn dummy_levels() -> Vec<StoredTensor> {
        let t = Tensor::new(&[2, 4, 4], vec![0.5; 32]).unwrap();
        vec![StoredTensor::QuantU8(quantize(&t).unwrap())]
    }

    #[test]
    fn global_rank_orders_and_breaks_ties() {
        let mut store = FeatureStore::new();
        store.insert(0, axis_descriptor(3, 0), dummy_levels()).unwrap();
        store.insert(1, axis_descriptor(3, 0), dummy_levels()).unwrap();
        store.insert(3, axis_descriptor(3, 1), dummy_levels()).unwrap();
        store.insert(2, axis_descriptor(3, 2), dummy_levels()).unwrap();

        let rl = global_rank(0, &store).unwrap();
        let ids: Vec<u64> = rl.entries.iter().map(|e| e.id).collect();
        // The query's own entry and its duplicate tie at 1.0 and resolve by
        // id; the two orthogonal entries tie at 0.0 likewise.
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(rl.entries[0].s_g, 1.0);
        assert!(rl.entries.iter().all(|e| e.s_r.is_none() && e.s_fused == e.s_g));
    }

    #[test]
    fn global_rank_matches_selection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = FeatureStore::new();
        for id in 0..1000u64 {
            let d: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0f32)).collect();
            store.insert(id, Tensor::new(&[8], d).unwrap(), dummy_levels()).unwrap();
        }
        let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let (q, _) = l2_normalize(&Tensor::new(&[8], q).unwrap());
        let rl = global_rank_external(9999, &q, &store).unwrap();

        // O(n^2) selection: repeatedly pull the best remaining candidate.
        let mut pool: Vec<(u64, f32)> =
            store.iter().map(|(id, e)| (id, q.dot(&e.descriptor).unwrap())).collect();
        let mut expect = Vec::new();
        while !pool.is_empty() {
            let mut best = 0;
            for i in 1..pool.len() {
                let (bid, bs) = pool[best];
                let (id, s) = pool[i];
                if s > bs || (s == bs && id < bid) {
                    best = i;
                }
            }
            expect.push(pool.remove(best).0);
        }
        let got: Vec<u64> = rl.entries.iter().map(|e| e.id).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn global_rank_rejects_dim_mismatch() {
        let mut store = FeatureStore::new();
        store.insert(0, axis_descriptor(3, 0), dummy_levels()).unwrap();
        let q = axis_descriptor(4, 0);
        assert!(matches!(global_rank_external(1, &q, &store), Err(Error::ShapeMismatch(_))));
    }

    fn test_weights() -> EncoderWeights {
        let cfg = EncoderConfig {
            num_scales: 2,
            in_channels: 16,
            reduced_channels: 4,
            block_channel_plan: vec![4, 6],
            convs_per_block: 2,
            mlp_hidden: 8,
            norm_groups: 2,
        };
        init_encoder(&cfg, 5).unwrap()
    }

    /// Writes a tiny toy dump to `dir` and ingests it. Returns the store.
    fn toy_store(dir: &Path, w: &EncoderWeights, quantize_levels: bool) -> FeatureStore {
        let ds = generate_toy_dataset(&ToyGenConfig {
            num_classes: 4,
            samples_per_class: 2,
            ..ToyGenConfig::default()
        })
        .unwrap();
        let maps = dir.join("maps");
        fs::create_dir_all(&maps).unwrap();
        let mut manifest = String::from("channels = 16\nheight = 5\nwidth = 5\n");
        for s in &ds.samples {
            let rel = format!("maps/{}.cvt", s.id);
            save_tensor(&dir.join(&rel), s.map.data()).unwrap();
            manifest.push_str(&format!("{} = {}\n", s.id, rel));
        }
        let mpath = dir.join("dump.txt");
        fs::write(&mpath, manifest).unwrap();
        let mut store = FeatureStore::new();
        ingest(&mpath, &w.reducers, quantize_levels, &mut store).unwrap();
        store
    }

    #[test]
    fn rerank_fuses_prefix_and_keeps_tail_order() {
        let dir = tempfile::tempdir().unwrap();
        let w = test_weights();
        let store = toy_store(dir.path(), &w, true);
        let query = store.ids().next().unwrap();
        let rl = global_rank(query, &store).unwrap();
        let k = 4;
        let out = rerank_topk(query, &rl, k, &w, 0.5, &store).unwrap();

        assert_eq!(out.entries.len(), rl.entries.len());
        let mut got: Vec<u64> = out.entries.iter().map(|e| e.id).collect();
        let mut want: Vec<u64> = rl.entries.iter().map(|e| e.id).collect();
        let tail_got = got.split_off(k);
        let tail_want = want.split_off(k);
        assert_eq!(tail_got, tail_want, "tail must keep the global order");
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want, "prefix must keep its membership");

        for (i, e) in out.entries.iter().enumerate() {
            if i < k {
                let s_r = e.s_r.expect("prefix entries carry s_r");
                assert!((e.s_fused - (e.s_g + 0.5 * s_r)).abs() < 1e-6);
                assert!(s_r > 0.0 && s_r < 1.0);
                if i > 0 {
                    assert!(out.entries[i - 1].s_fused >= e.s_fused);
                }
            } else {
                assert!(e.s_r.is_none());
                assert_eq!(e.s_fused, e.s_g);
            }
        }

        // Adding a constant to every fused score must not change the order.
        let mut shifted = out.entries.clone();
        for e in &mut shifted {
            e.s_fused += 5.0;
        }
        sort_ranked(&mut shifted[..k]);
        let shifted_ids: Vec<u64> = shifted.iter().map(|e| e.id).collect();
        let out_ids: Vec<u64> = out.entries.iter().map(|e| e.id).collect();
        assert_eq!(shifted_ids, out_ids);

        // alpha = 0 degenerates to the global order on the prefix.
        let same = rerank_topk(query, &rl, k, &w, 0.0, &store).unwrap();
        let same_ids: Vec<u64> = same.entries.iter().map(|e| e.id).collect();
        let rl_ids: Vec<u64> = rl.entries.iter().map(|e| e.id).collect();
        assert_eq!(same_ids, rl_ids);
    }

    #[test]
    fn rerank_missing_candidate_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let w = test_weights();
        let store = toy_store(dir.path(), &w, true);
        let query = store.ids().next().unwrap();
        let mut rl = global_rank(query, &store).unwrap();
        rl.entries[1].id = 999_999;
        let err = rerank_topk(query, &rl, 3, &w, 0.5, &store).unwrap_err();
        match err {
            Error::MissingEntry(msg) => assert!(msg.contains("999999"), "{msg}"),
            other => panic!("expected MissingEntry, got {other}"),
        }
        let err = rerank_topk(query, &rl, rl.entries.len() + 1, &w, 0.5, &store).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    fn ranking_of(query_id: u64, ids: &[u64]) -> RankedList {
        let entries = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let s = 1.0 - i as f32 * 0.01;
                RankEntry { id, s_g: s, s_r: None, s_fused: s }
            })
            .collect();
        RankedList { query_id, entries }
    }

    #[test]
    fn eval_map_frozen_oracles() {
        let mut truth = BTreeMap::new();
        truth.insert(1u64, BTreeSet::from([10u64]));
        let rl = ranking_of(1, &[10, 11, 12]);
        assert_eq!(eval_map(&[rl], &truth, None).unwrap(), 1.0);

        // Hits at ranks 1 and 3: AP = (1/1 + 2/3) / 2.
        let mut truth = BTreeMap::new();
        truth.insert(1u64, BTreeSet::from([10u64, 12]));
        let rl = ranking_of(1, &[10, 11, 12, 13, 14]);
        let ap = eval_map(&[rl.clone()], &truth, None).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12, "{ap}");
        assert!((ap - 0.8333333333333333).abs() < 1e-12);

        // The only relevant item sits outside the cutoff.
        let ids: Vec<u64> = (0..101).map(|i| 500 + i).collect();
        let mut truth = BTreeMap::new();
        truth.insert(2u64, BTreeSet::from([600u64])); // rank 101
        let rl = ranking_of(2, &ids);
        assert_eq!(eval_map(&[rl], &truth, Some(100)).unwrap(), 0.0);

        // Cutoff caps the normalizer: 3 relevant, cutoff 2, perfect prefix.
        let mut truth = BTreeMap::new();
        truth.insert(3u64, BTreeSet::from([20u64, 21, 22]));
        let rl = ranking_of(3, &[20, 21, 22, 23]);
        assert_eq!(eval_map(&[rl], &truth, Some(2)).unwrap(), 1.0);

        // Empty or missing relevance is an error.
        let rl = ranking_of(4, &[1, 2]);
        assert!(eval_map(&[rl.clone()], &BTreeMap::new(), None).is_err());
        let mut truth = BTreeMap::new();
        truth.insert(4u64, BTreeSet::new());
        assert!(eval_map(&[rl], &truth, None).is_err());
    }

    #[test]
    fn eval_map_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for trial in 0..6 {
            let queries = rng.random_range(1..=50usize);
            let items = rng.random_range(5..=200usize);
            let cutoff = match trial % 3 {
                0 => None,
                1 => Some(rng.random_range(1..=items)),
                _ => Some(100),
            };
            let mut rankings = Vec::new();
            let mut truth: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
            for q in 0..queries as u64 {
                let mut ids: Vec<u64> = (0..items as u64).collect();
                for i in (1..ids.len()).rev() {
                    ids.swap(i, rng.random_range(0..=i));
                }
                let nrel = rng.random_range(1..=20.min(items));
                let rel: BTreeSet<u64> =
                    (0..nrel).map(|_| ids[rng.random_range(0..ids.len())]).collect();
                truth.insert(q, rel);
                rankings.push(ranking_of(q, &ids));
            }
            let got = eval_map(&rankings, &truth, cutoff).unwrap();

            // Independent AP: recompute precision at each position from
            // scratch instead of carrying a running hit count.
            let mut want = 0.0f64;
            for rl in &rankings {
                let rel = &truth[&rl.query_id];
                let limit = cutoff.unwrap_or(rl.entries.len()).min(rl.entries.len());
                let mut ap = 0.0f64;
                for i in 0..limit {
                    if rel.contains(&rl.entries[i].id) {
                        let hits =
                            rl.entries[..=i].iter().filter(|e| rel.contains(&e.id)).count();
                        ap += hits as f64 / (i + 1) as f64;
                    }
                }
                want += ap / rel.len().min(cutoff.unwrap_or(rel.len())) as f64;
            }
            want /= rankings.len() as f64;
            assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn store_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let w = test_weights();
        let store = toy_store(dir.path(), &w, true);
        assert_eq!(store.len(), 8);
        assert_eq!(store.num_levels(), Some(2));
        for (_, e) in store.iter() {
            assert!((e.descriptor.norm() - 1.0).abs() < 1e-6);
        }

        let a = dir.path().join("store_a");
        let b = dir.path().join("store_b");
        store.save(&a).unwrap();
        let loaded = FeatureStore::load(&a).unwrap();
        loaded.save(&b).unwrap();

        let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
        assert!(manifest.contains("entries = 8"), "{manifest}");
        let mut names: Vec<String> = fs::read_dir(&a)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names.len(), 1 + 8 * 3);
        for name in names {
            let x = fs::read(a.join(&name)).unwrap();
            let y = fs::read(b.join(&name)).unwrap();
            assert_eq!(x, y, "{name} drifted across a save/load/save cycle");
        }
    }

    #[test]
    fn insert_normalizes_and_validates() {
        let mut store = FeatureStore::new();
        let d = Tensor::new(&[3], vec![2.0, 0.0, 0.0]).unwrap();
        store.insert(7, d, dummy_levels()).unwrap();
        let stored = &store.entry(7).unwrap().descriptor;
        assert!((stored.norm() - 1.0).abs() < 1e-6);
        assert_eq!(stored.data()[0], 1.0);

        let dup = store.insert(7, axis_descriptor(3, 1), dummy_levels());
        assert!(matches!(dup, Err(Error::InvalidArgument(_))));
        let zero = store.insert(8, Tensor::zeros(&[3]).unwrap(), dummy_levels());
        assert!(matches!(zero, Err(Error::DegenerateShape(_))));
        let wrong_dim = store.insert(9, axis_descriptor(4, 0), dummy_levels());
        assert!(matches!(wrong_dim, Err(Error::ShapeMismatch(_))));
        let mut two_levels = dummy_levels();
        two_levels.extend(dummy_levels());
        let wrong_levels = store.insert(10, axis_descriptor(3, 0), two_levels);
        assert!(matches!(wrong_levels, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn ingest_dimension_drift_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let w = test_weights();
        let bad = Tensor::new(&[3, 5, 5], vec![0.5; 75]).unwrap();
        fs::create_dir_all(dir.path().join("maps")).unwrap();
        save_tensor(&dir.path().join("maps/9.cvt"), &bad).unwrap();
        let manifest = "channels = 16\nheight = 5\nwidth = 5\n9 = maps/9.cvt\n";
        let mpath = dir.path().join("dump.txt");
        fs::write(&mpath, manifest).unwrap();
        let mut store = FeatureStore::new();
        let err = ingest(&mpath, &w.reducers, true, &mut store).unwrap_err();
        match err {
            Error::Format { file, reason } => {
                assert!(file.contains("9.cvt"), "{file}");
                assert!(reason.contains("drift"), "{reason}");
            }
            other => panic!("expected Format, got {other}"),
        }
    }

    #[test]
    fn float_levels_skip_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let w = test_weights();
        let qstore = toy_store(dir.path(), &w, true);
        let fdir = tempfile::tempdir().unwrap();
        let fstore = toy_store(fdir.path(), &w, false);
        assert_eq!(fstore.level_payload_bytes(), 4 * qstore.level_payload_bytes());
        for (id, fe) in fstore.iter() {
            let qe = qstore.entry(id).unwrap();
            for (fl, ql) in fe.levels.iter().zip(&qe.levels) {
                let (f, q) = match (fl, ql) {
                    (StoredTensor::F32(f), StoredTensor::QuantU8(q)) => (f, q),
                    other => panic!("unexpected level kinds: {other:?}"),
                };
                let back = dequantize(q).unwrap();
                for (a, b) in f.data().iter().zip(back.data()) {
                    assert!((a - b).abs() <= q.scale / 2.0 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn rankings_csv_round_trips() {
        let lists = vec![
            RankedList {
                query_id: 3,
                entries: vec![
                    RankEntry { id: 8, s_g: 0.8, s_r: Some(0.6), s_fused: 1.1 },
                    RankEntry { id: 2, s_g: 0.75, s_r: Some(0.25), s_fused: 0.875 },
                    RankEntry { id: 5, s_g: 0.5, s_r: None, s_fused: 0.5 },
                ],
            },
            RankedList {
                query_id: 9,
                entries: vec![RankEntry { id: 1, s_g: -0.125, s_r: None, s_fused: -0.125 }],
            },
        ];
        let mut buf = Vec::new();
        write_rankings(&mut buf, &lists).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# query = 3\nrank,id,s_g,s_r,s_fused\n1,8,0.800000,0.600000,1.100000\n"));
        assert!(text.contains("3,5,0.500000,,0.500000\n"));

        let back = read_rankings(buf.as_slice(), "mem").unwrap();
        assert_eq!(back.len(), 2);
        for (orig, parsed) in lists.iter().zip(&back) {
            assert_eq!(orig.query_id, parsed.query_id);
            assert_eq!(orig.entries.len(), parsed.entries.len());
            for (a, b) in orig.entries.iter().zip(&parsed.entries) {
                assert_eq!(a.id, b.id);
                assert!((a.s_g - b.s_g).abs() < 1e-6);
                assert_eq!(a.s_r.is_some(), b.s_r.is_some());
                assert!((a.s_fused - b.s_fused).abs() < 1e-6);
            }
        }

        let err = read_rankings("1,2,0.5,,0.5\n".as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn truth_csv_round_trips() {
        let mut truth: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        truth.insert(1, BTreeSet::from([4u64, 2, 9]));
        truth.insert(6, BTreeSet::from([6u64]));
        let mut buf = Vec::new();
        write_truth(&mut buf, &truth).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "query_id,relevant_id\n1,2\n1,4\n1,9\n6,6\n");
        let back = read_truth(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, truth);
    }
}
