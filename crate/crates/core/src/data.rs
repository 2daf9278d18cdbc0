//! Interaction logs, user filtering, leave-last-two-out splits, negative
//! sampling and training batches.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One user–item event with its per-user chronological position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub value: f64,
    pub order: usize,
}

/// Field separator of a delimited interaction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Separator(String);

impl Separator {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for Separator {
    fn default() -> Self {
        Separator("\t".to_string())
    }
}

impl FromStr for Separator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let sep = match s {
            "tab" | "\\t" | "\t" => "\t",
            "comma" | "," => ",",
            "::" | "double-colon" => "::",
            other if !other.is_empty() => other,
            _ => return Err(Error::config("empty separator")),
        };
        Ok(Separator(sep.to_string()))
    }
}

impl TryFrom<String> for Separator {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Separator> for String {
    fn from(s: Separator) -> String {
        match s.0.as_str() {
            "\t" => "tab".to_string(),
            _ => s.0,
        }
    }
}

impl fmt::Display for Separator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from(self.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FileFormat {
    /// `user, item, value[, timestamp]` per line.
    #[default]
    DelimitedTriples,
}

/// A loaded interaction log over dense ids, with the raw-id tables needed to map
/// back.
///
/// Interactions are stored grouped by user (ascending) and, within a user, by
/// `order`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl InteractionLog {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Builds a log from dense-id interactions, sorting by (user, order).
    pub fn from_dense(
        mut interactions: Vec<Interaction>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        for it in &interactions {
            if it.user >= user_ids.len() || it.item >= item_ids.len() {
                return Err(Error::Lookup(format!(
                    "interaction ({}, {}) outside id space {}x{}",
                    it.user,
                    it.item,
                    user_ids.len(),
                    item_ids.len()
                )));
            }
        }
        interactions.sort_by_key(|it| (it.user, it.order));
        Ok(InteractionLog {
            interactions,
            user_ids,
            item_ids,
        })
    }

    /// Per-user slices, indexed by dense user id.
    pub fn by_user(&self) -> Vec<&[Interaction]> {
        let mut out = vec![&self.interactions[0..0]; self.n_users()];
        let mut start = 0;
        while start < self.interactions.len() {
            let u = self.interactions[start].user;
            let mut end = start;
            while end < self.interactions.len() && self.interactions[end].user == u {
                end += 1;
            }
            out[u] = &self.interactions[start..end];
            start = end;
        }
        out
    }

    pub fn user_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_users()];
        for it in &self.interactions {
            counts[it.user] += 1;
        }
        counts
    }
}

struct RawRecord {
    user: String,
    item: String,
    value: f64,
    timestamp: Option<f64>,
}

fn parse_line(path: &Path, line_no: usize, line: &str, sep: &Separator) -> Result<RawRecord> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    let fields: Vec<&str> = line.split(sep.as_str()).map(str::trim).collect();
    if fields.len() < 3 || fields.len() > 4 {
        return Err(err(format!(
            "expected 3 or 4 fields (user, item, value[, timestamp]), found {}",
            fields.len()
        )));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err(err("empty user or item id".to_string()));
    }
    let value: f64 = fields[2]
        .parse()
        .map_err(|_| err(format!("non-numeric value field {:?}", fields[2])))?;
    if !value.is_finite() {
        return Err(err(format!("non-finite value {:?}", fields[2])));
    }
    let timestamp = match fields.get(3) {
        Some(ts) => Some(
            ts.parse::<f64>()
                .map_err(|_| err(format!("non-numeric timestamp field {:?}", ts)))?,
        ),
        None => None,
    };
    Ok(RawRecord {
        user: fields[0].to_string(),
        item: fields[1].to_string(),
        value,
        timestamp,
    })
}

/// Reads a delimited interaction file.
///
/// Ids are remapped to dense integers in order of first appearance. Within a
/// user, interactions are ordered by timestamp when the file has a timestamp
/// column (ties keep file order), otherwise by file order. Blank lines and
/// lines starting with `#` are skipped.
pub fn load_interactions(
    path: &Path,
    format: FileFormat,
    sep: &Separator,
) -> Result<InteractionLog> {
    let FileFormat::DelimitedTriples = format;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    // (user, item, value, timestamp, file position)
    let mut rows: Vec<(usize, usize, f64, Option<f64>, usize)> = Vec::new();
    let mut has_ts: Option<bool> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec = parse_line(path, idx + 1, trimmed, sep)?;
        match has_ts {
            None => has_ts = Some(rec.timestamp.is_some()),
            Some(h) if h != rec.timestamp.is_some() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: "timestamp column present on some lines but not others".to_string(),
                })
            }
            _ => {}
        }
        let next_u = user_ids.len();
        let u = *user_index.entry(rec.user.clone()).or_insert_with(|| {
            user_ids.push(rec.user.clone());
            next_u
        });
        let next_i = item_ids.len();
        let i = *item_index.entry(rec.item.clone()).or_insert_with(|| {
            item_ids.push(rec.item.clone());
            next_i
        });
        let pos = rows.len();
        rows.push((u, i, rec.value, rec.timestamp, pos));
    }

    rows.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| match (a.3, b.3) {
            (Some(x), Some(y)) => x.total_cmp(&y).then(a.4.cmp(&b.4)),
            _ => a.4.cmp(&b.4),
        })
    });
    let mut interactions = Vec::with_capacity(rows.len());
    let mut last_user = usize::MAX;
    let mut order = 0;
    for (u, i, value, _, _) in rows {
        if u != last_user {
            last_user = u;
            order = 0;
        }
        interactions.push(Interaction {
            user: u,
            item: i,
            value,
            order,
        });
        order += 1;
    }
    Ok(InteractionLog {
        interactions,
        user_ids,
        item_ids,
    })
}

/// Keeps users whose interaction count lies in `[min_n, max_n]`, drops items left
/// without interactions, and re-densifies both id spaces (ascending old id).
pub fn filter_users(log: &InteractionLog, min_n: usize, max_n: usize) -> Result<InteractionLog> {
    if min_n < 1 || max_n <= min_n {
        return Err(Error::config(format!(
            "filter bounds must satisfy 1 <= min_n < max_n, got [{}, {}]",
            min_n, max_n
        )));
    }
    let counts = log.user_counts();
    let mut user_map = vec![usize::MAX; log.n_users()];
    let mut user_ids = Vec::new();
    for (u, &c) in counts.iter().enumerate() {
        if c >= min_n && c <= max_n {
            user_map[u] = user_ids.len();
            user_ids.push(log.user_ids[u].clone());
        }
    }
    let mut item_used = vec![false; log.n_items()];
    for it in &log.interactions {
        if user_map[it.user] != usize::MAX {
            item_used[it.item] = true;
        }
    }
    let mut item_map = vec![usize::MAX; log.n_items()];
    let mut item_ids = Vec::new();
    for (i, &used) in item_used.iter().enumerate() {
        if used {
            item_map[i] = item_ids.len();
            item_ids.push(log.item_ids[i].clone());
        }
    }
    let interactions = log
        .interactions
        .iter()
        .filter(|it| user_map[it.user] != usize::MAX)
        .map(|it| Interaction {
            user: user_map[it.user],
            item: item_map[it.item],
            ..*it
        })
        .collect();
    InteractionLog::from_dense(interactions, user_ids, item_ids)
}

/// Per-user train / validation / test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<Vec<usize>>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    known: Vec<Vec<usize>>,
}

impl SplitDataset {
    pub fn new(
        n_users: usize,
        n_items: usize,
        train: Vec<Vec<usize>>,
        val: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        if train.len() != n_users || val.len() != n_users || test.len() != n_users {
            return Err(Error::config(format!(
                "split lists must have one entry per user ({}): train {}, val {}, test {}",
                n_users,
                train.len(),
                val.len(),
                test.len()
            )));
        }
        let mut known = Vec::with_capacity(n_users);
        for u in 0..n_users {
            let mut k: Vec<usize> = train[u].clone();
            k.push(val[u]);
            k.push(test[u]);
            if let Some(&bad) = k.iter().find(|&&i| i >= n_items) {
                return Err(Error::Lookup(format!(
                    "item {} of user {} outside catalog of {}",
                    bad, u, n_items
                )));
            }
            k.sort_unstable();
            k.dedup();
            known.push(k);
        }
        Ok(SplitDataset {
            n_users,
            n_items,
            train,
            val,
            test,
            known,
        })
    }

    /// Every item the user interacted with (train ∪ val ∪ test), sorted.
    pub fn known_items(&self, user: usize) -> &[usize] {
        &self.known[user]
    }

    pub fn is_known(&self, user: usize, item: usize) -> bool {
        self.known[user].binary_search(&item).is_ok()
    }

    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
            .collect()
    }

    pub fn n_train(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    /// Number of train-list occurrences of each item.
    pub fn item_train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_items];
        for items in &self.train {
            for &i in items {
                counts[i] += 1;
            }
        }
        counts
    }
}

/// Leave-last-two-out: per user, the last interaction is the test item, the
/// second-to-last the validation item, the rest train.
pub fn leave_last_split(log: &InteractionLog) -> Result<SplitDataset> {
    let mut train = Vec::with_capacity(log.n_users());
    let mut val = Vec::with_capacity(log.n_users());
    let mut test = Vec::with_capacity(log.n_users());
    for (u, seq) in log.by_user().into_iter().enumerate() {
        if seq.len() < 3 {
            return Err(Error::Split {
                user: log.user_ids[u].clone(),
                count: seq.len(),
            });
        }
        let n = seq.len();
        train.push(seq[..n - 2].iter().map(|it| it.item).collect());
        val.push(seq[n - 2].item);
        test.push(seq[n - 1].item);
    }
    SplitDataset::new(log.n_users(), log.n_items(), train, val, test)
}

/// Draws `k` distinct items the user never interacted with, uniformly.
pub fn sample_negatives<R: Rng + ?Sized>(
    user: usize,
    k: usize,
    split: &SplitDataset,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let known = split.known_items(user);
    let available = split.n_items - known.len();
    if available < k {
        return Err(Error::Sampling {
            user,
            available,
            requested: k,
        });
    }
    Ok(sample_excluding(known, split.n_items, k, rng))
}

/// Uniform draw of `k` distinct items from `0..n_items` minus the sorted
/// `excluded` list. The caller guarantees enough candidates.
pub fn sample_excluding<R: Rng + ?Sized>(
    excluded: &[usize],
    n_items: usize,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let available = n_items - excluded.len();
    debug_assert!(available >= k);
    if k == 0 {
        return Vec::new();
    }
    if available >= 2 * k {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let i = rng.random_range(0..n_items);
            if excluded.binary_search(&i).is_err() && !out.contains(&i) {
                out.push(i);
            }
        }
        out
    } else {
        let complement: Vec<usize> = (0..n_items)
            .filter(|i| excluded.binary_search(i).is_err())
            .collect();
        rand::seq::index::sample(rng, complement.len(), k)
            .into_iter()
            .map(|j| complement[j])
            .collect()
    }
}

/// Parallel arrays of (user, item, label) with labels in {-1, +1}.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn with_capacity(n: usize) -> Self {
        Batch {
            users: Vec::with_capacity(n),
            items: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, user: usize, item: usize, label: f64) {
        debug_assert!(label == 1.0 || label == -1.0);
        self.users.push(user);
        self.items.push(item);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.users
            .iter()
            .zip(&self.items)
            .zip(&self.labels)
            .map(|((&u, &i), &y)| (u, i, y))
    }
}

/// One epoch of batches: the train positives are shuffled once, each followed by
/// `negs_per_pos` freshly sampled negatives, and the resulting pair sequence is
/// cut into chunks of `batch_size` pairs (the last chunk may be short).
pub fn make_batches<R: Rng + ?Sized>(
    split: &SplitDataset,
    batch_size: usize,
    negs_per_pos: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut positives = split.train_pairs();
    positives.shuffle(rng);
    let total = positives.len() * (1 + negs_per_pos);
    let mut batches = Vec::with_capacity(total.div_ceil(batch_size));
    let mut current = Batch::with_capacity(batch_size);
    let emit = |b: &mut Batch, batches: &mut Vec<Batch>| {
        if b.len() == batch_size {
            batches.push(std::mem::replace(b, Batch::with_capacity(batch_size)));
        }
    };
    for (u, i) in positives {
        current.push(u, i, 1.0);
        emit(&mut current, &mut batches);
        for neg in sample_negatives(u, negs_per_pos, split, rng)? {
            current.push(u, neg, -1.0);
            emit(&mut current, &mut batches);
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Writes `train.tsv`, `val.tsv`, `test.tsv` (dense `user item value order`) and
/// `remap.tsv` (`kind dense raw`).
pub fn write_prepared(dir: &Path, log: &InteractionLog, split: &SplitDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let open = |name: &str| -> Result<BufWriter<fs::File>> {
        let p = dir.join(name);
        Ok(BufWriter::new(
            fs::File::create(&p).map_err(|e| Error::io(&p, e))?,
        ))
    };
    let mut train = open("train.tsv")?;
    let mut val = open("val.tsv")?;
    let mut test = open("test.tsv")?;
    for seq in log.by_user() {
        let n = seq.len();
        for (pos, it) in seq.iter().enumerate() {
            let w = if pos + 1 == n {
                &mut test
            } else if pos + 2 == n {
                &mut val
            } else {
                &mut train
            };
            writeln!(w, "{}\t{}\t{}\t{}", it.user, it.item, it.value, it.order)
                .map_err(|e| Error::io(dir, e))?;
        }
    }
    debug_assert_eq!(log.n_users(), split.n_users);
    let mut remap = open("remap.tsv")?;
    for (i, raw) in log.user_ids.iter().enumerate() {
        writeln!(remap, "user\t{}\t{}", i, raw).map_err(|e| Error::io(dir, e))?;
    }
    for (i, raw) in log.item_ids.iter().enumerate() {
        writeln!(remap, "item\t{}\t{}", i, raw).map_err(|e| Error::io(dir, e))?;
    }
    for mut w in [train, val, test, remap] {
        w.flush().map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Reads a directory written by [`write_prepared`] back into the log and split.
pub fn read_prepared(dir: &Path) -> Result<(InteractionLog, SplitDataset)> {
    let remap_path = dir.join("remap.tsv");
    let text = fs::read_to_string(&remap_path).map_err(|e| Error::io(&remap_path, e))?;
    let mut user_ids: Vec<Option<String>> = Vec::new();
    let mut item_ids: Vec<Option<String>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, '\t').collect();
        let bad = |msg: &str| Error::Parse {
            path: remap_path.clone(),
            line: ln + 1,
            msg: msg.to_string(),
        };
        if parts.len() != 3 {
            return Err(bad("expected `kind dense raw`"));
        }
        let idx: usize = parts[1].parse().map_err(|_| bad("bad dense id"))?;
        let table = match parts[0] {
            "user" => &mut user_ids,
            "item" => &mut item_ids,
            _ => return Err(bad("kind must be user or item")),
        };
        if table.len() <= idx {
            table.resize(idx + 1, None);
        }
        table[idx] = Some(parts[2].to_string());
    }
    let collect = |t: Vec<Option<String>>, what: &str| -> Result<Vec<String>> {
        t.into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| Error::Lookup(format!("remap table missing {} id {}", what, i)))
            })
            .collect()
    };
    let user_ids = collect(user_ids, "user")?;
    let item_ids = collect(item_ids, "item")?;

    let mut interactions = Vec::new();
    for name in ["train.tsv", "val.tsv", "test.tsv"] {
        let p = dir.join(name);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: p.clone(),
                line: ln + 1,
                msg,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            let num = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| bad(format!("bad integer {:?}", s)))
            };
            interactions.push(Interaction {
                user: num(f[0])?,
                item: num(f[1])?,
                value: f[2]
                    .parse()
                    .map_err(|_| bad(format!("bad value {:?}", f[2])))?,
                order: num(f[3])?,
            });
        }
    }
    let log = InteractionLog::from_dense(interactions, user_ids, item_ids)?;
    let split = leave_last_split(&log)?;
    Ok((log, split))
}
