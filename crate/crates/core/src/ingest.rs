//! Interaction and feature loading, k-core filtering and the per-user
//! 8:1:1 split.
//!
//! File formats:
//!
//! * interactions: UTF-8 TSV, `user<TAB>item[<TAB>extra...]`, `#` comments.
//! * features (MMF1): `b"MMF1"`, `u32` rows, `u32` cols (little-endian),
//!   then `rows * cols` little-endian `f32`, row-major. Row `r` belongs to
//!   the item named on the line `r<TAB>token` of the sidecar file
//!   (`<stem>.tsv` next to the `.mmf` file).
//! * split: `train.tsv`, `valid.tsv`, `test.tsv` with `user_idx<TAB>item_idx`
//!   and `maps.tsv` with `user|item<TAB>index<TAB>token`.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MMF_MAGIC: &[u8; 4] = b"MMF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Modality::Visual => 0,
            Modality::Textual => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Modality::Visual),
            1 => Some(Modality::Textual),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" | "v" => Ok(Modality::Visual),
            "textual" | "t" => Ok(Modality::Textual),
            other => Err(Error::InvalidArgument(format!("unknown modality {other:?}"))),
        }
    }
}

/// Deduplicated `(user, item)` token pairs in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawInteractions {
    pub records: Vec<(String, String)>,
}

impl RawInteractions {
    pub fn from_pairs<I, U, T>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (U, T)>,
        U: Into<String>,
        T: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut records = Vec::new();
        for (u, i) in pairs {
            let pair = (u.into(), i.into());
            if seen.insert(pair.clone()) {
                records.push(pair);
            }
        }
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.records.iter().map(|(u, _)| u).collect::<HashSet<_>>().len()
    }

    pub fn n_items(&self) -> usize {
        self.records.iter().map(|(_, i)| i).collect::<HashSet<_>>().len()
    }
}

/// Token ↔ contiguous index map. Indices follow sorted token order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut sorted: Vec<String> = tokens.into_iter().map(str::to_owned).collect();
        sorted.sort();
        sorted.dedup();
        Self::from_ordered(sorted)
    }

    fn from_ordered(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<(u32, u32)>,
    pub valid: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    pub user_map: IdMap,
    pub item_map: IdMap,
}

impl SplitDataset {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    /// Per-user sorted item lists for the given pairs.
    pub fn group_by_user(&self, pairs: &[(u32, u32)]) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.n_users];
        for &(u, i) in pairs {
            out[u as usize].push(i);
        }
        for items in &mut out {
            items.sort_unstable();
        }
        out
    }

    pub fn train_by_user(&self) -> Vec<Vec<u32>> {
        self.group_by_user(&self.train)
    }

    pub fn valid_by_user(&self) -> Vec<Vec<u32>> {
        self.group_by_user(&self.valid)
    }

    pub fn test_by_user(&self) -> Vec<Vec<u32>> {
        self.group_by_user(&self.test)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, pairs) in [("train.tsv", &self.train), ("valid.tsv", &self.valid), ("test.tsv", &self.test)] {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            for (u, i) in pairs {
                writeln!(w, "{u}\t{i}")?;
            }
            w.flush()?;
        }
        let mut w = BufWriter::new(File::create(dir.join("maps.tsv"))?);
        for (kind, map) in [("user", &self.user_map), ("item", &self.item_map)] {
            for (idx, token) in map.tokens().iter().enumerate() {
                writeln!(w, "{kind}\t{idx}\t{token}")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let maps_path = dir.join("maps.tsv");
        let mut users = Vec::new();
        let mut items = Vec::new();
        for (line_no, line) in read_lines(&maps_path)? {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 {
                return Err(Error::MalformedLine(line_no));
            }
            let idx: usize = cols[1].parse().map_err(|_| Error::MalformedLine(line_no))?;
            let target = match cols[0] {
                "user" => &mut users,
                "item" => &mut items,
                _ => return Err(Error::MalformedLine(line_no)),
            };
            if idx != target.len() {
                return Err(Error::MalformedLine(line_no));
            }
            target.push(cols[2].to_owned());
        }
        let user_map = IdMap::from_ordered(users);
        let item_map = IdMap::from_ordered(items);
        let (n_users, n_items) = (user_map.len(), item_map.len());
        let read_pairs = |name: &str| -> Result<Vec<(u32, u32)>> {
            let mut out = Vec::new();
            for (line_no, line) in read_lines(&dir.join(name))? {
                let mut cols = line.split('\t');
                let (Some(u), Some(i)) = (cols.next(), cols.next()) else {
                    return Err(Error::MalformedLine(line_no));
                };
                let u: u32 = u.parse().map_err(|_| Error::MalformedLine(line_no))?;
                let i: u32 = i.parse().map_err(|_| Error::MalformedLine(line_no))?;
                if u as usize >= n_users || i as usize >= n_items {
                    return Err(Error::MalformedLine(line_no));
                }
                out.push((u, i));
            }
            Ok(out)
        };
        Ok(Self {
            n_users,
            n_items,
            train: read_pairs("train.tsv")?,
            valid: read_pairs("valid.tsv")?,
            test: read_pairs("test.tsv")?,
            user_map,
            item_map,
        })
    }
}

/// Raw item features for one modality, rows in item-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    pub values: Array2<f32>,
}

impl FeatureMatrix {
    pub fn n_items(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }
}

/// Non-empty, non-comment lines with 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((i + 1, trimmed.to_owned()));
    }
    Ok(out)
}

pub fn load_interactions(path: &Path) -> Result<RawInteractions> {
    let mut pairs = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let mut cols = line.split('\t');
        match (cols.next(), cols.next()) {
            (Some(u), Some(i)) if !u.is_empty() && !i.is_empty() => {
                pairs.push((u.to_owned(), i.to_owned()))
            }
            _ => return Err(Error::MalformedLine(line_no)),
        }
    }
    Ok(RawInteractions::from_pairs(pairs))
}

pub fn write_interactions(path: &Path, raw: &RawInteractions) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (u, i) in &raw.records {
        writeln!(w, "{u}\t{i}")?;
    }
    w.flush()?;
    Ok(())
}

/// Drops users and items with fewer than `k` interactions until every
/// survivor has at least `k`. The result is the unique maximal k-core.
pub fn apply_k_core(raw: &RawInteractions, k: usize) -> Result<RawInteractions> {
    if k == 0 {
        return Err(Error::InvalidArgument("k-core k must be >= 1".into()));
    }
    let user_ids = IdMap::from_tokens(raw.records.iter().map(|(u, _)| u.as_str()));
    let item_ids = IdMap::from_tokens(raw.records.iter().map(|(_, i)| i.as_str()));
    let edges: Vec<(usize, usize)> = raw
        .records
        .iter()
        .map(|(u, i)| (user_ids.get(u).unwrap(), item_ids.get(i).unwrap()))
        .collect();

    let mut user_edges = vec![Vec::new(); user_ids.len()];
    let mut item_edges = vec![Vec::new(); item_ids.len()];
    for (e, &(u, i)) in edges.iter().enumerate() {
        user_edges[u].push(e);
        item_edges[i].push(e);
    }
    let mut user_deg: Vec<usize> = user_edges.iter().map(Vec::len).collect();
    let mut item_deg: Vec<usize> = item_edges.iter().map(Vec::len).collect();
    let mut alive = vec![true; edges.len()];
    let mut user_gone = vec![false; user_ids.len()];
    let mut item_gone = vec![false; item_ids.len()];

    // Worklist of (is_user, node) whose degree fell below k.
    let mut queue: Vec<(bool, usize)> = Vec::new();
    queue.extend((0..user_deg.len()).filter(|&u| user_deg[u] < k).map(|u| (true, u)));
    queue.extend((0..item_deg.len()).filter(|&i| item_deg[i] < k).map(|i| (false, i)));
    while let Some((is_user, node)) = queue.pop() {
        let (gone, incident) = if is_user {
            (&mut user_gone[node], &user_edges[node])
        } else {
            (&mut item_gone[node], &item_edges[node])
        };
        if *gone {
            continue;
        }
        *gone = true;
        for &e in incident {
            if !alive[e] {
                continue;
            }
            alive[e] = false;
            let (u, i) = edges[e];
            if is_user {
                item_deg[i] -= 1;
                if item_deg[i] < k && !item_gone[i] {
                    queue.push((false, i));
                }
            } else {
                user_deg[u] -= 1;
                if user_deg[u] < k && !user_gone[u] {
                    queue.push((true, u));
                }
            }
        }
    }

    let records: Vec<_> = raw
        .records
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(r, _)| r.clone())
        .collect();
    if records.is_empty() {
        return Err(Error::EmptyCore);
    }
    Ok(RawInteractions { records })
}

/// Per-user seeded shuffle; `floor(n/10)` to test, `floor(n/10)` to valid,
/// the remainder to train.
pub fn build_split(raw: &RawInteractions, seed: u64) -> Result<SplitDataset> {
    if raw.is_empty() {
        return Err(Error::EmptyCore);
    }
    let user_map = IdMap::from_tokens(raw.records.iter().map(|(u, _)| u.as_str()));
    let item_map = IdMap::from_tokens(raw.records.iter().map(|(_, i)| i.as_str()));
    let mut per_user: Vec<Vec<u32>> = vec![Vec::new(); user_map.len()];
    for (u, i) in &raw.records {
        per_user[user_map.get(u).unwrap()].push(item_map.get(i).unwrap() as u32);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (u, items) in per_user.iter_mut().enumerate() {
        items.sort_unstable();
        items.shuffle(&mut rng);
        let n_hold = items.len() / 10;
        let u = u as u32;
        test.extend(items[..n_hold].iter().map(|&i| (u, i)));
        valid.extend(items[n_hold..2 * n_hold].iter().map(|&i| (u, i)));
        train.extend(items[2 * n_hold..].iter().map(|&i| (u, i)));
    }
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();

    Ok(SplitDataset {
        n_users: user_map.len(),
        n_items: item_map.len(),
        train,
        valid,
        test,
        user_map,
        item_map,
    })
}

/// Sidecar path holding `index<TAB>token` lines for an MMF1 file.
pub fn feature_sidecar(path: &Path) -> PathBuf {
    path.with_extension("tsv")
}

/// Writes an MMF1 file plus its sidecar. `tokens[r]` names row `r`.
pub fn write_features(path: &Path, values: &Array2<f32>, tokens: &[String]) -> Result<()> {
    crate::error::ensure_dim(values.nrows(), tokens.len())?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MMF_MAGIC)?;
    w.write_all(&(values.nrows() as u32).to_le_bytes())?;
    w.write_all(&(values.ncols() as u32).to_le_bytes())?;
    for v in values.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let mut s = BufWriter::new(File::create(feature_sidecar(path))?);
    for (r, t) in tokens.iter().enumerate() {
        writeln!(s, "{r}\t{t}")?;
    }
    s.flush()?;
    Ok(())
}

pub fn load_features(path: &Path, item_map: &IdMap, modality: Modality) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != MMF_MAGIC {
        return Err(Error::BadMagic { expected: "MMF1" });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::DimensionMismatch {
            expected: rows * cols * 4,
            found: payload.len(),
        });
    }

    let sidecar = read_lines(&feature_sidecar(path))?;
    if sidecar.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            found: sidecar.len(),
        });
    }
    let mut row_of_item: Vec<Option<usize>> = vec![None; item_map.len()];
    for (line_no, line) in sidecar {
        let mut parts = line.split('\t');
        let (Some(r), Some(tok)) = (parts.next(), parts.next()) else {
            return Err(Error::MalformedLine(line_no));
        };
        let r: usize = r.parse().map_err(|_| Error::MalformedLine(line_no))?;
        if r >= rows {
            return Err(Error::MalformedLine(line_no));
        }
        if let Some(idx) = item_map.get(tok) {
            row_of_item[idx] = Some(r);
        }
    }

    let mut values = Array2::<f32>::zeros((item_map.len(), cols));
    for (item, src) in row_of_item.iter().enumerate() {
        let src = src.ok_or_else(|| Error::MissingItemRow(item_map.token(item).to_owned()))?;
        for c in 0..cols {
            let off = (src * cols + c) * 4;
            let v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { row: src, col: c });
            }
            values[[item, c]] = v;
        }
    }
    Ok(FeatureMatrix { modality, values })
}
