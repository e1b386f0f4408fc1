//! Interaction corpora: synthetic latent-factor generation, delimited file
//! ingestion, the per-user temporal split and example construction.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranking::{Rating, TargetRanking};
use crate::template::{target_ranking, CandidateSlate, HistorySequence, Item, TieBreak};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("infeasible corpus: {0}")]
    Infeasible(String),
    #[error("item {0} not in catalog")]
    UnknownItem(u64),
    #[error("example record: {0}")]
    Record(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub rating: Rating,
    pub timestamp: u64,
}

pub type Catalog = BTreeMap<u64, Item>;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub actions_per_user: usize,
    pub latent_dim: usize,
    pub noise_std: f64,
    /// Multiplier on the user/item cosine before rounding to a rating.
    pub rating_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 2000,
            n_items: 1000,
            actions_per_user: 40,
            latent_dim: 8,
            noise_std: 0.3,
            rating_scale: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub interactions: Vec<Interaction>,
    pub catalog: Catalog,
}

const TITLE_FIRST: &[&str] = &[
    "Amber", "Broken", "Crimson", "Distant", "Electric", "Fallen", "Golden", "Hidden", "Iron", "Jade", "Kind",
    "Lost", "Midnight", "Northern", "Open", "Paper", "Quiet", "Restless", "Silent", "Tender", "Urban", "Velvet",
    "Wild", "Young",
];
const TITLE_SECOND: &[&str] = &[
    "Arrow", "Bridge", "Canyon", "Dream", "Echo", "Frontier", "Garden", "Harbor", "Island", "Journey", "Kingdom",
    "Lantern", "Mirror", "Night", "Orchard", "Promise", "River", "Signal", "Tide", "Valley", "Winter", "Zone",
];
/// Genre pairs keyed by latent dimension: `(positive side, negative side)`.
const GENRES: &[(&str, &str)] = &[
    ("Action", "Drama"),
    ("Comedy", "Thriller"),
    ("Sci-Fi", "Romance"),
    ("Animation", "Documentary"),
    ("Adventure", "Crime"),
    ("Fantasy", "War"),
    ("Musical", "Horror"),
    ("Mystery", "Western"),
];

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Latent-factor corpus: ratings are `round(3 + scale * cos(u, v) + noise)`
/// clamped to 1..=5. Genres reveal the signs of strong latent coordinates.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Corpus, DataError> {
    if cfg.n_users == 0 || cfg.actions_per_user == 0 || cfg.latent_dim == 0 {
        return Err(DataError::Infeasible("users, actions and latent dim must be positive".into()));
    }
    if cfg.n_items < cfg.actions_per_user {
        return Err(DataError::Infeasible(format!(
            "{} items cannot supply {} distinct actions per user",
            cfg.n_items, cfg.actions_per_user
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| DataError::Infeasible(e.to_string()))?;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..cfg.latent_dim).map(|_| StandardNormal.sample(rng)).collect();
        normalize(&mut v);
        v
    };

    let mut catalog = Catalog::new();
    let mut item_vecs = Vec::with_capacity(cfg.n_items);
    // genre threshold on unit vectors scales with dimension
    let threshold = 0.8 / (cfg.latent_dim as f64).sqrt();
    for id in 0..cfg.n_items {
        let v = draw(&mut rng);
        let title = format!(
            "{} {}",
            TITLE_FIRST[rng.random_range(0..TITLE_FIRST.len())],
            TITLE_SECOND[rng.random_range(0..TITLE_SECOND.len())]
        );
        let mut genres = Vec::new();
        for (d, x) in v.iter().enumerate() {
            let (pos, neg) = GENRES[d % GENRES.len()];
            if *x > threshold {
                genres.push(pos.to_string());
            } else if *x < -threshold {
                genres.push(neg.to_string());
            }
        }
        let item_id = id as u64 + 1;
        catalog.insert(
            item_id,
            Item {
                item_id,
                title,
                attributes: genres,
            },
        );
        item_vecs.push(v);
    }

    let mut interactions = Vec::with_capacity(cfg.n_users * cfg.actions_per_user);
    for u in 0..cfg.n_users {
        let uv = draw(&mut rng);
        let mut ts: u64 = 978_300_000 + rng.random_range(0..86_400);
        for idx in sample(&mut rng, cfg.n_items, cfg.actions_per_user).into_iter() {
            let cos: f64 = uv.iter().zip(&item_vecs[idx]).map(|(a, b)| a * b).sum();
            let raw = 3.0 + cfg.rating_scale * cos + noise.sample(&mut rng);
            let rating = Rating::new(raw.round().clamp(1.0, 5.0) as i64).expect("clamped");
            ts += rng.random_range(1..3_600);
            interactions.push(Interaction {
                user_id: u as u64 + 1,
                item_id: idx as u64 + 1,
                rating,
                timestamp: ts,
            });
        }
    }
    Ok(Corpus {
        interactions,
        catalog,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MalformedPolicy {
    /// Record the problem and keep going.
    #[default]
    Skip,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadOptions {
    pub delimiter: String,
    pub policy: MalformedPolicy,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            delimiter: "::".to_string(),
            policy: MalformedPolicy::Skip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub issues: Vec<LineIssue>,
}

fn parse_u64(field: &str, name: &str) -> Result<u64, String> {
    field.trim().parse().map_err(|_| format!("bad {name} '{field}'"))
}

pub fn parse_interaction(line: &str, delimiter: &str) -> Result<Interaction, String> {
    let fields: Vec<&str> = line.split(delimiter).collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let rating = fields[2]
        .trim()
        .parse::<i64>()
        .map_err(|_| format!("bad rating '{}'", fields[2]))
        .and_then(|r| Rating::new(r).map_err(|e| e.to_string()))?;
    Ok(Interaction {
        user_id: parse_u64(fields[0], "user id")?,
        item_id: parse_u64(fields[1], "item id")?,
        rating,
        timestamp: parse_u64(fields[3], "timestamp")?,
    })
}

pub fn parse_item(line: &str, delimiter: &str) -> Result<Item, String> {
    let fields: Vec<&str> = line.split(delimiter).collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 fields, found {}", fields.len()));
    }
    let attributes = if fields[2].is_empty() {
        Vec::new()
    } else {
        fields[2].split('|').map(str::to_string).collect()
    };
    Item::new(parse_u64(fields[0], "item id")?, fields[1], attributes).map_err(|e| e.to_string())
}

fn load_lines<T>(path: &Path, opts: &LoadOptions, parse: impl Fn(&str, &str) -> Result<T, String>) -> Result<Loaded<T>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf).map_err(io_err)? == 0 {
            break;
        }
        line_no += 1;
        // public MovieLens dumps are Latin-1; keep them readable
        let text = String::from_utf8_lossy(&buf);
        let line = text.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        match parse(line, &opts.delimiter) {
            Ok(r) => records.push(r),
            Err(message) => match opts.policy {
                MalformedPolicy::Abort => return Err(DataError::Parse { line: line_no, message }),
                MalformedPolicy::Skip => issues.push(LineIssue { line: line_no, message }),
            },
        }
    }
    Ok(Loaded { records, issues })
}

/// `user::item::rating::timestamp` per line.
pub fn load_interactions(path: &Path, opts: &LoadOptions) -> Result<Loaded<Interaction>, DataError> {
    load_lines(path, opts, parse_interaction)
}

/// `item::title::genre|genre` per line.
pub fn load_items(path: &Path, opts: &LoadOptions) -> Result<Loaded<Item>, DataError> {
    load_lines(path, opts, parse_item)
}

pub fn catalog_from(items: Vec<Item>) -> Catalog {
    items.into_iter().map(|i| (i.item_id, i)).collect()
}

fn write_file(path: &Path, body: &str) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(body.as_bytes()).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_interactions(path: &Path, interactions: &[Interaction], delimiter: &str) -> Result<(), DataError> {
    let mut body = String::new();
    for i in interactions {
        body.push_str(&format!(
            "{u}{d}{it}{d}{r}{d}{t}\n",
            u = i.user_id,
            it = i.item_id,
            r = i.rating.value(),
            t = i.timestamp,
            d = delimiter
        ));
    }
    write_file(path, &body)
}

pub fn write_items(path: &Path, catalog: &Catalog, delimiter: &str) -> Result<(), DataError> {
    let mut body = String::new();
    for item in catalog.values() {
        body.push_str(&format!(
            "{}{d}{}{d}{}\n",
            item.item_id,
            item.title,
            item.attributes.join("|"),
            d = delimiter
        ));
    }
    write_file(path, &body)
}

/// One user's actions in temporal order with split boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user_id: u64,
    pub actions: Vec<Interaction>,
    /// Actions `[0, train_end)` form the training pool.
    pub train_end: usize,
    /// Actions `[train_end, valid_end)` are the validation slate, the rest the test slate.
    pub valid_end: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub users: Vec<UserSequence>,
    pub dropped_users: usize,
}

/// Per user: last `m` actions for test, the `m` before for validation, the
/// remainder for training. Users with fewer than `2m + history_len` actions
/// are dropped. Timestamp ties are broken by item id.
pub fn split_user_sequences(interactions: &[Interaction], m: usize, history_len: usize) -> DatasetSplit {
    let mut by_user: BTreeMap<u64, Vec<Interaction>> = BTreeMap::new();
    for i in interactions {
        by_user.entry(i.user_id).or_default().push(*i);
    }
    let mut split = DatasetSplit::default();
    for (user_id, mut actions) in by_user {
        if actions.len() < 2 * m + history_len {
            split.dropped_users += 1;
            continue;
        }
        actions.sort_by_key(|a| (a.timestamp, a.item_id));
        let n = actions.len();
        split.users.push(UserSequence {
            user_id,
            actions,
            train_end: n - 2 * m,
            valid_end: n - m,
        });
    }
    split
}

/// A single ranking instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user_id: u64,
    pub history: HistorySequence,
    pub slate: CandidateSlate,
    pub target: TargetRanking,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExampleSets {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExampleOptions {
    pub m: usize,
    pub history_len: usize,
    /// Step between consecutive training windows.
    pub window_stride: usize,
    pub tie_break: TieBreak,
}

fn make_example(
    user_id: u64,
    actions: &[Interaction],
    slate_start: usize,
    opts: &ExampleOptions,
    catalog: &Catalog,
) -> Result<Example, DataError> {
    let lookup = |id: u64| catalog.get(&id).cloned().ok_or(DataError::UnknownItem(id));
    let history = actions[slate_start - opts.history_len..slate_start]
        .iter()
        .map(|a| Ok((lookup(a.item_id)?, a.rating)))
        .collect::<Result<Vec<_>, DataError>>()?;
    let window = &actions[slate_start..slate_start + opts.m];
    let items = window.iter().map(|a| lookup(a.item_id)).collect::<Result<Vec<_>, _>>()?;
    let ratings = window.iter().map(|a| a.rating).collect();
    let slate = CandidateSlate::new(items, Some(ratings)).map_err(|e| DataError::Infeasible(e.to_string()))?;
    let target = target_ranking(&slate, opts.tie_break).map_err(|e| DataError::Infeasible(e.to_string()))?;
    Ok(Example {
        user_id,
        history: HistorySequence::new(history),
        slate,
        target,
    })
}

/// Test and validation examples take the `history_len` actions immediately
/// before their slate. Training examples are sliding windows inside the
/// training pool.
pub fn build_examples(split: &DatasetSplit, catalog: &Catalog, opts: &ExampleOptions) -> Result<ExampleSets, DataError> {
    if opts.m == 0 || opts.window_stride == 0 {
        return Err(DataError::Infeasible("m and window stride must be positive".into()));
    }
    let mut sets = ExampleSets::default();
    for user in &split.users {
        let mut start = opts.history_len;
        while start + opts.m <= user.train_end {
            sets.train.push(make_example(user.user_id, &user.actions, start, opts, catalog)?);
            start += opts.window_stride;
        }
        sets.valid.push(make_example(user.user_id, &user.actions, user.train_end, opts, catalog)?);
        sets.test.push(make_example(user.user_id, &user.actions, user.valid_end, opts, catalog)?);
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub item_id: u64,
    pub rating: Rating,
}

/// Line-delimited canonical form of an [`Example`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub user_id: u64,
    pub history: Vec<EntryRecord>,
    pub slate: Vec<EntryRecord>,
    pub target: Vec<usize>,
}

impl ExampleRecord {
    pub fn from_example(ex: &Example) -> Self {
        let slate_ratings = ex.slate.ratings.clone().unwrap_or_default();
        ExampleRecord {
            user_id: ex.user_id,
            history: ex
                .history
                .entries
                .iter()
                .map(|(i, r)| EntryRecord {
                    item_id: i.item_id,
                    rating: *r,
                })
                .collect(),
            slate: ex
                .slate
                .items
                .iter()
                .zip(slate_ratings)
                .map(|(i, r)| EntryRecord {
                    item_id: i.item_id,
                    rating: r,
                })
                .collect(),
            target: ex.target.order().to_vec(),
        }
    }

    pub fn to_example(&self, catalog: &Catalog) -> Result<Example, DataError> {
        let lookup = |id: u64| catalog.get(&id).cloned().ok_or(DataError::UnknownItem(id));
        let history = self
            .history
            .iter()
            .map(|e| Ok((lookup(e.item_id)?, e.rating)))
            .collect::<Result<Vec<_>, DataError>>()?;
        let items = self.slate.iter().map(|e| lookup(e.item_id)).collect::<Result<Vec<_>, _>>()?;
        let ratings = self.slate.iter().map(|e| e.rating).collect();
        let slate = CandidateSlate::new(items, Some(ratings)).map_err(|e| DataError::Record(e.to_string()))?;
        let target = TargetRanking::new(self.target.clone()).map_err(|e| DataError::Record(e.to_string()))?;
        if target.len() != slate.len() {
            return Err(DataError::Record("target length differs from slate".into()));
        }
        Ok(Example {
            user_id: self.user_id,
            history: HistorySequence::new(history),
            slate,
            target,
        })
    }
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<(), DataError> {
    let mut body = String::new();
    for ex in examples {
        body.push_str(&serde_json::to_string(&ExampleRecord::from_example(ex)).expect("record serializes"));
        body.push('\n');
    }
    write_file(path, &body)
}

pub fn read_example_records(path: &Path) -> Result<Vec<ExampleRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Parse {
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
