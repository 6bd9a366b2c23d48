//! Interaction logs, the binary user-item matrix, seeded splits and corpus
//! statistics.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::{stream_rng, Error, Result};

/// Layout of an interaction log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    /// `user item` per line, anything after the second token ignored.
    Pairs,
    /// `user item rating [timestamp]`; the rating must parse but is binarized.
    Triples,
}

impl std::str::FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs" => Ok(LogFormat::Pairs),
            "triples" => Ok(LogFormat::Triples),
            other => Err(Error::InvalidArgument(format!("unknown log format `{other}`"))),
        }
    }
}

impl fmt::Display for LogFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogFormat::Pairs => "pairs",
            LogFormat::Triples => "triples",
        })
    }
}

/// Sparse binary M x N interaction matrix.
///
/// Rows hold sorted, de-duplicated item indices. `n_base_items` marks how
/// many leading columns are original items; columns past it are injected
/// pseudo-items and never enter an evaluation candidate set.
#[derive(Debug, Clone)]
pub struct InteractionMatrix {
    n_users: usize,
    n_items: usize,
    n_base_items: usize,
    rows: Vec<Vec<usize>>,
    nnz: usize,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl PartialEq for InteractionMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.n_users == other.n_users
            && self.n_items == other.n_items
            && self.n_base_items == other.n_base_items
            && self.rows == other.rows
    }
}

impl InteractionMatrix {
    /// Builds a matrix from (user, item) pairs, collapsing duplicates.
    pub fn from_pairs<I>(n_users: usize, n_items: usize, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut rows = vec![Vec::new(); n_users];
        for (u, i) in pairs {
            if u >= n_users || i >= n_items {
                return Err(Error::OutOfRange(format!(
                    "entry ({u}, {i}) outside a {n_users}x{n_items} matrix"
                )));
            }
            rows[u].push(i);
        }
        Ok(Self::from_unsorted_rows(n_items, rows))
    }

    /// Builds a matrix from per-user item lists. Items must be `< n_items`.
    pub fn from_rows(n_items: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(bad) = rows.iter().flatten().find(|&&i| i >= n_items) {
            return Err(Error::OutOfRange(format!("item {bad} >= {n_items}")));
        }
        Ok(Self::from_unsorted_rows(n_items, rows))
    }

    fn from_unsorted_rows(n_items: usize, mut rows: Vec<Vec<usize>>) -> Self {
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
        }
        let nnz = rows.iter().map(Vec::len).sum();
        Self {
            n_users: rows.len(),
            n_items,
            n_base_items: n_items,
            rows,
            nnz,
            user_ids: Vec::new(),
            item_ids: Vec::new(),
        }
    }

    /// Empty matrix of the given shape.
    pub fn empty(n_users: usize, n_items: usize) -> Self {
        Self::from_unsorted_rows(n_items, vec![Vec::new(); n_users])
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Number of leading columns that are original (non-injected) items.
    pub fn n_base_items(&self) -> usize {
        self.n_base_items
    }

    pub fn with_base_items(mut self, n_base_items: usize) -> Result<Self> {
        if n_base_items > self.n_items {
            return Err(Error::InvalidArgument(format!(
                "n_base_items {n_base_items} exceeds {} columns",
                self.n_items
            )));
        }
        self.n_base_items = n_base_items;
        Ok(self)
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn row(&self, user: usize) -> &[usize] {
        &self.rows[user]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.rows
            .get(user)
            .is_some_and(|row| row.binary_search(&item).is_ok())
    }

    /// All entries in (user, item) lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.iter().map(move |&i| (u, i)))
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_items];
        for (_, i) in self.iter() {
            deg[i] += 1;
        }
        deg
    }

    /// User lists per item (the transpose).
    pub fn columns(&self) -> Vec<Vec<usize>> {
        let mut cols = vec![Vec::new(); self.n_items];
        for (u, i) in self.iter() {
            cols[i].push(u);
        }
        cols
    }

    pub fn density(&self) -> f64 {
        let cells = self.n_users * self.n_items;
        if cells == 0 {
            0.0
        } else {
            self.nnz as f64 / cells as f64
        }
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.density()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.n_users, self.n_items));
        for (u, i) in self.iter() {
            dense[[u, i]] = 1.0;
        }
        dense
    }

    /// Entries of `self` that are not in `other` (shapes may differ).
    pub fn difference_count(&self, other: &InteractionMatrix) -> usize {
        self.iter().filter(|&(u, i)| !other.contains(u, i)).count()
    }

    /// Drops users and items without interactions, keeping relative order.
    pub fn compact(&self) -> InteractionMatrix {
        let item_deg = self.item_degrees();
        let mut item_map = vec![usize::MAX; self.n_items];
        let mut item_ids = Vec::new();
        for (i, &d) in item_deg.iter().enumerate() {
            if d > 0 {
                item_map[i] = item_ids.len();
                item_ids.push(self.item_id(i));
            }
        }
        let mut rows = Vec::new();
        let mut user_ids = Vec::new();
        for (u, row) in self.rows.iter().enumerate() {
            if !row.is_empty() {
                rows.push(row.iter().map(|&i| item_map[i]).collect());
                user_ids.push(self.user_id(u));
            }
        }
        let mut out = Self::from_unsorted_rows(item_ids.len(), rows);
        out.user_ids = user_ids;
        out.item_ids = item_ids;
        out
    }

    /// External id of a user, falling back to its dense index.
    pub fn user_id(&self, user: usize) -> String {
        self.user_ids
            .get(user)
            .cloned()
            .unwrap_or_else(|| user.to_string())
    }

    pub fn item_id(&self, item: usize) -> String {
        self.item_ids
            .get(item)
            .cloned()
            .unwrap_or_else(|| item.to_string())
    }

    /// Uniformly subsamples `target` entries, then compacts away users and
    /// items left without interactions.
    pub fn drop_to(&self, target: usize, seed: u64) -> Result<InteractionMatrix> {
        if target > self.nnz {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {target} of {} interactions",
                self.nnz
            )));
        }
        let entries: Vec<(usize, usize)> = self.iter().collect();
        let mut rng = stream_rng(seed, 0xd809);
        let mut picked = index::sample(&mut rng, entries.len(), target).into_vec();
        picked.sort_unstable();
        let mut kept = Self::from_pairs(
            self.n_users,
            self.n_items,
            picked.into_iter().map(|k| entries[k]),
        )?;
        kept.user_ids = self.user_ids.clone();
        kept.item_ids = self.item_ids.clone();
        Ok(kept.compact())
    }

    /// Writes the sparse coordinate format: a `M N` header (with
    /// `n_base_items=K` appended when some columns are injected) followed by
    /// one `u i` edge per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        write!(out, "{} {}", self.n_users, self.n_items)?;
        if self.n_base_items != self.n_items {
            write!(out, " n_base_items={}", self.n_base_items)?;
        }
        writeln!(out)?;
        for (u, i) in self.iter() {
            writeln!(out, "{u} {i}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the format written by [`InteractionMatrix::save`].
    pub fn load(path: &Path) -> Result<InteractionMatrix> {
        let text = fs::read_to_string(path)?;
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| perr(1, "missing `M N` header".into()))?;
        let mut tokens = header.split_whitespace();
        let mut dim = |name: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| perr(1, format!("bad header: missing {name}")))
        };
        let n_users = dim("M")?;
        let n_items = dim("N")?;
        let mut n_base = n_items;
        for extra in tokens {
            match extra.split_once('=') {
                Some(("n_base_items", v)) => {
                    n_base = v
                        .parse()
                        .map_err(|_| perr(1, format!("bad n_base_items `{v}`")))?;
                }
                _ => return Err(perr(1, format!("unknown header token `{extra}`"))),
            }
        }
        let mut pairs = Vec::new();
        for (ln, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut t = line.split_whitespace().map(str::parse::<usize>);
            match (t.next(), t.next(), t.next()) {
                (Some(Ok(u)), Some(Ok(i)), None) => pairs.push((u, i)),
                _ => return Err(perr(ln + 1, format!("expected `u i`, got `{line}`"))),
            }
        }
        Self::from_pairs(n_users, n_items, pairs)?.with_base_items(n_base)
    }
}

/// Reads a raw interaction log, assigning dense indices in first-appearance
/// order. Lines starting with `#` and blank lines are skipped.
pub fn load_interactions(path: &Path, format: LogFormat) -> Result<InteractionMatrix> {
    let text = fs::read_to_string(path)?;
    parse_interactions(&text, format, path)
}

pub(crate) fn parse_interactions(
    text: &str,
    format: LogFormat,
    path: &Path,
) -> Result<InteractionMatrix> {
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut pairs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let needed = match format {
            LogFormat::Pairs => 2,
            LogFormat::Triples => 3,
        };
        if tokens.len() < needed {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                msg: format!("expected at least {needed} fields, found {}", tokens.len()),
            });
        }
        if format == LogFormat::Triples && tokens[2].parse::<f64>().is_err() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                msg: format!("rating `{}` is not numeric", tokens[2]),
            });
        }
        let u = *users.entry(tokens[0].to_string()).or_insert_with(|| {
            user_ids.push(tokens[0].to_string());
            user_ids.len() - 1
        });
        let i = *items.entry(tokens[1].to_string()).or_insert_with(|| {
            item_ids.push(tokens[1].to_string());
            item_ids.len() - 1
        });
        pairs.push((u, i));
    }
    if pairs.is_empty() {
        return Err(Error::Empty(PathBuf::from(path)));
    }
    let mut x = InteractionMatrix::from_pairs(user_ids.len(), item_ids.len(), pairs)?;
    x.user_ids = user_ids;
    x.item_ids = item_ids;
    Ok(x)
}

/// Per-user holdout split parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub holdout_fraction: f64,
    pub seed: u64,
    pub min_train_per_user: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.2,
            seed: 0,
            min_train_per_user: 1,
        }
    }
}

/// Number of held-out interactions for a user of the given degree.
pub fn holdout_count(degree: usize, spec: &SplitSpec) -> usize {
    if degree < 2 {
        return 0;
    }
    let wanted = (spec.holdout_fraction * degree as f64).round() as usize;
    let max_holdout = degree.saturating_sub(spec.min_train_per_user.max(1));
    wanted.min(max_holdout)
}

/// Seeded per-user random holdout. Users are visited in index order and each
/// row is shuffled with one shared generator, so the result depends only on
/// the matrix and the seed.
pub fn split(x: &InteractionMatrix, spec: &SplitSpec) -> Result<(InteractionMatrix, InteractionMatrix)> {
    if !(spec.holdout_fraction > 0.0 && spec.holdout_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction {} not in (0, 1)",
            spec.holdout_fraction
        )));
    }
    let mut rng = stream_rng(spec.seed, 0x5b11);
    let mut train_rows = Vec::with_capacity(x.n_users());
    let mut test_rows = Vec::with_capacity(x.n_users());
    for row in x.rows() {
        let n_test = holdout_count(row.len(), spec);
        let mut shuffled = row.clone();
        shuffled.shuffle(&mut rng);
        let train = shuffled.split_off(n_test);
        test_rows.push(shuffled);
        train_rows.push(train);
    }
    let mut train = InteractionMatrix::from_rows(x.n_items(), train_rows)?;
    let mut test = InteractionMatrix::from_rows(x.n_items(), test_rows)?;
    for m in [&mut train, &mut test] {
        m.user_ids = x.user_ids.clone();
        m.item_ids = x.item_ids.clone();
        m.n_base_items = x.n_base_items;
    }
    Ok((train, test))
}

/// Corpus statistics as reported in dataset tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    /// Fraction of empty cells, rounded to four decimals.
    pub sparsity: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "users={} items={} interactions={} sparsity={:.2}%",
            self.n_users,
            self.n_items,
            self.n_interactions,
            self.sparsity * 100.0
        )
    }
}

pub fn stats(x: &InteractionMatrix) -> DatasetStats {
    let cells = x.n_users() * x.n_items();
    let sparsity = if cells == 0 {
        1.0
    } else {
        1.0 - x.nnz() as f64 / cells as f64
    };
    DatasetStats {
        n_users: x.n_users(),
        n_items: x.n_items(),
        n_interactions: x.nnz(),
        sparsity: (sparsity * 1e4).round() / 1e4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str, format: LogFormat) -> Result<InteractionMatrix> {
        parse_interactions(text, format, Path::new("mem"))
    }

    #[test]
    fn duplicate_lines_collapse() {
        let x = parse("a\tx\na\tx\n", LogFormat::Pairs).unwrap();
        assert_eq!((x.n_users(), x.n_items(), x.nnz()), (1, 1, 1));
    }

    #[test]
    fn first_appearance_order_and_comments() {
        let x = parse("# header\nb\tq\t5\na\tp\t3\t99\nb\tp\t1\n", LogFormat::Triples).unwrap();
        assert_eq!(x.user_ids, vec!["b", "a"]);
        assert_eq!(x.item_ids, vec!["q", "p"]);
        assert_eq!(x.iter().collect::<Vec<_>>(), vec![(0, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("a x\nlonely\n", LogFormat::Pairs).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        let err = parse("a x notanumber\n", LogFormat::Triples).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(parse("# only\n\n", LogFormat::Pairs), Err(Error::Empty(_))));
    }

    #[test]
    fn holdout_arithmetic() {
        let spec = SplitSpec::default();
        assert_eq!(holdout_count(10, &spec), 2);
        assert_eq!(holdout_count(1, &spec), 0);
        assert_eq!(holdout_count(2, &spec), 0);
        assert_eq!(holdout_count(3, &spec), 1);
        let strict = SplitSpec {
            min_train_per_user: 9,
            ..spec
        };
        assert_eq!(holdout_count(10, &strict), 1);
    }

    #[test]
    fn split_counts_and_determinism() {
        let x = InteractionMatrix::from_rows(20, vec![(0..10).collect(), vec![3]]).unwrap();
        let spec = SplitSpec::default();
        let (train, test) = split(&x, &spec).unwrap();
        assert_eq!((train.row(0).len(), test.row(0).len()), (8, 2));
        assert_eq!((train.row(1).len(), test.row(1).len()), (1, 0));
        let again = split(&x, &spec).unwrap();
        assert_eq!(train, again.0);
        assert_eq!(test, again.1);
    }

    #[test]
    fn stats_edge_cases() {
        assert_eq!(stats(&InteractionMatrix::empty(5, 5)).sparsity, 1.0);
        let full = InteractionMatrix::from_pairs(2, 2, [(0, 0), (0, 1), (1, 0), (1, 1)]).unwrap();
        assert_eq!(stats(&full).sparsity, 0.0);
    }

    #[test]
    fn drop_to_hits_target() {
        let x = InteractionMatrix::from_rows(30, (0..20).map(|u| (u..u + 10).collect()).collect())
            .unwrap();
        let d = x.drop_to(57, 3).unwrap();
        assert_eq!(d.nnz(), 57);
        assert!(d.item_degrees().iter().all(|&c| c > 0));
        assert!(d.user_degrees().iter().all(|&c| c > 0));
        assert_eq!(d, x.drop_to(57, 3).unwrap());
    }

    #[test]
    fn coordinate_file_keeps_base_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aug.coo");
        let x = InteractionMatrix::from_pairs(2, 5, [(0, 1), (1, 4)])
            .unwrap()
            .with_base_items(3)
            .unwrap();
        x.save(&path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("2 5 n_base_items=3\n"));
        assert_eq!(InteractionMatrix::load(&path).unwrap(), x);
    }

    fn arb_matrix() -> impl Strategy<Value = InteractionMatrix> {
        (1usize..12, 1usize..12).prop_flat_map(|(m, n)| {
            proptest::collection::vec((0..m, 0..n), 0..60)
                .prop_map(move |pairs| InteractionMatrix::from_pairs(m, n, pairs).unwrap())
        })
    }

    proptest! {
        #[test]
        fn split_is_a_partition(x in arb_matrix(), seed in 0u64..1000) {
            let spec = SplitSpec { seed, ..SplitSpec::default() };
            let (train, test) = split(&x, &spec).unwrap();
            prop_assert_eq!(train.nnz() + test.nnz(), x.nnz());
            prop_assert_eq!(train.difference_count(&x), 0);
            prop_assert_eq!(test.difference_count(&x), 0);
            prop_assert_eq!(test.difference_count(&train), test.nnz());
            for u in 0..x.n_users() {
                if !x.row(u).is_empty() {
                    prop_assert!(!train.row(u).is_empty());
                }
            }
        }

        #[test]
        fn sparsity_matches_enumeration(x in arb_matrix()) {
            let mut filled = 0usize;
            for u in 0..x.n_users() {
                for i in 0..x.n_items() {
                    if x.contains(u, i) { filled += 1; }
                }
            }
            let cells = (x.n_users() * x.n_items()) as f64;
            let brute = ((1.0 - filled as f64 / cells) * 1e4).round() / 1e4;
            prop_assert_eq!(stats(&x).sparsity, brute);
        }

        #[test]
        fn save_load_roundtrip(x in arb_matrix()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.coo");
            x.save(&path).unwrap();
            prop_assert_eq!(InteractionMatrix::load(&path).unwrap(), x);
        }
    }
}
