//! Ratings ingestion, logistic matrix-factorization pretraining and factor files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::harness::scenario::PreferenceData;
use crate::models::{Feature, ParamVec};

/// One binary rating after thresholding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    /// `+1` or `−1`.
    pub value: f64,
}

/// Binary ratings with dense user and item indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RatingsTable {
    pub ratings: Vec<Rating>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

/// Users with fewer ratings than this are dropped at load.
pub const MIN_RATINGS_PER_USER: usize = 10;

/// Stars at or above this become `+1`, the rest `−1`.
pub const POSITIVE_THRESHOLD: f64 = 4.0;

impl RatingsTable {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    /// Builds a table from raw `(user, item, stars)` triples.
    ///
    /// Stars must lie in `[1, 5]`; duplicate `(user, item)` pairs are
    /// rejected; users with fewer than `min_ratings` ratings are dropped.
    pub fn from_raw<I>(triples: I, min_ratings: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, f64)>,
    {
        let mut seen = HashSet::new();
        let mut per_user: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for (i, (user, item, stars)) in triples.into_iter().enumerate() {
            if !(1.0..=5.0).contains(&stars) {
                return Err(Error::invalid(format!("record {}: rating {stars} outside 1..5", i + 1)));
            }
            if !seen.insert((user.clone(), item.clone())) {
                return Err(Error::invalid(format!("record {}: duplicate rating of {item:?} by {user:?}", i + 1)));
            }
            if !per_user.contains_key(&user) {
                order.push(user.clone());
            }
            let value = if stars >= POSITIVE_THRESHOLD { 1.0 } else { -1.0 };
            per_user.entry(user).or_default().push((item, value));
        }
        let mut table = RatingsTable::default();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        for user in order {
            let entries = &per_user[&user];
            if entries.len() < min_ratings {
                continue;
            }
            let u = table.user_ids.len();
            table.user_ids.push(user.clone());
            for (item, value) in entries {
                let next = item_index.len();
                let b = *item_index.entry(item.clone()).or_insert_with(|| {
                    table.item_ids.push(item.clone());
                    next
                });
                table.ratings.push(Rating {
                    user: u,
                    item: b,
                    value: *value,
                });
            }
        }
        Ok(table)
    }
}

/// Reads a `user_id,item_id,rating` CSV with raw 1–5 stars.
pub fn load_ratings_csv(path: &Path, min_ratings: usize) -> Result<RatingsTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(file, path, min_ratings)
}

pub fn parse_ratings<R: Read>(reader: R, path: &Path, min_ratings: usize) -> Result<RatingsTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let expected = ["user_id", "item_id", "rating"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(1, format!("expected header {}", expected.join(","))));
    }
    let mut triples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, got {}", rec.len())));
        }
        let stars: f64 = rec[2].parse().map_err(|_| parse_err(line, format!("bad rating {:?}", &rec[2])))?;
        if !(1.0..=5.0).contains(&stars) {
            return Err(parse_err(line, format!("rating {stars} outside 1..5")));
        }
        triples.push((rec[0].to_string(), rec[1].to_string(), stars));
    }
    RatingsTable::from_raw(triples, min_ratings).map_err(|e| match e {
        Error::InvalidArgument(m) => parse_err(0, m),
        other => other,
    })
}

/// Writes raw star triples as a ratings CSV.
pub fn write_ratings_csv(path: &Path, triples: &[(String, String, u8)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "user_id,item_id,rating").map_err(io)?;
    for (u, b, r) in triples {
        writeln!(w, "{u},{b},{r}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// SGD settings for [`pretrain_mf`].
#[derive(Clone, Debug, PartialEq)]
pub struct MfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub init_scale: f64,
    /// Fraction of ratings held out for the diagnostic log-loss.
    pub holdout: f64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            dim: 5,
            epochs: 60,
            learning_rate: 0.05,
            l2: 0.01,
            init_scale: 0.1,
            holdout: 0.1,
        }
    }
}

/// Learned factors and training diagnostics.
#[derive(Clone, Debug)]
pub struct MfResult {
    pub user_factors: Vec<ParamVec>,
    pub item_factors: Vec<Feature>,
    /// Mean training log-loss after each epoch.
    pub train_loss: Vec<f64>,
    pub heldout_log_loss: f64,
}

fn log_loss(r: f64, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let z = -r * u.dot(v);
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Fits `p(R | φ_u, φ_b) = σ(R φ_uᵀ φ_b)` by SGD over the observed ratings.
pub fn pretrain_mf(table: &RatingsTable, cfg: &MfConfig, rng: &mut dyn RngCore) -> Result<MfResult> {
    if table.is_empty() {
        return Err(Error::invalid("cannot pretrain on an empty ratings table"));
    }
    if cfg.dim == 0 || cfg.epochs == 0 || !(cfg.learning_rate > 0.0) || !(cfg.l2 >= 0.0) {
        return Err(Error::invalid("invalid factorization settings"));
    }
    let init = Normal::new(0.0, cfg.init_scale).map_err(|e| Error::invalid(e.to_string()))?;
    let mut users: Vec<DVector<f64>> =
        (0..table.n_users()).map(|_| DVector::from_fn(cfg.dim, |_, _| init.sample(&mut *rng))).collect();
    let mut items: Vec<DVector<f64>> =
        (0..table.n_items()).map(|_| DVector::from_fn(cfg.dim, |_, _| init.sample(&mut *rng))).collect();

    let mut order: Vec<usize> = (0..table.len()).collect();
    order.shuffle(rng);
    let n_hold = ((table.len() as f64) * cfg.holdout.clamp(0.0, 0.5)).floor() as usize;
    let (held, train) = order.split_at(n_hold);
    let mut train = train.to_vec();

    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        train.shuffle(rng);
        for &i in &train {
            let Rating { user, item, value } = table.ratings[i];
            let z = value * users[user].dot(&items[item]);
            // d/dz log(1 + e^{−z}) = −σ(−z)
            let coeff = -value / (1.0 + z.exp());
            let gu = &items[item] * coeff + &users[user] * cfg.l2;
            let gb = &users[user] * coeff + &items[item] * cfg.l2;
            users[user] -= gu * cfg.learning_rate;
            items[item] -= gb * cfg.learning_rate;
        }
        let loss = train
            .iter()
            .map(|&i| {
                let r = table.ratings[i];
                log_loss(r.value, &users[r.user], &items[r.item])
            })
            .sum::<f64>()
            / train.len().max(1) as f64;
        train_loss.push(loss);
    }
    let heldout_log_loss = if held.is_empty() {
        f64::NAN
    } else {
        held.iter()
            .map(|&i| {
                let r = table.ratings[i];
                log_loss(r.value, &users[r.user], &items[r.item])
            })
            .sum::<f64>()
            / held.len() as f64
    };
    Ok(MfResult {
        user_factors: users.into_iter().map(ParamVec::new).collect(),
        item_factors: items.into_iter().map(Feature::new).collect(),
        train_loss,
        heldout_log_loss,
    })
}

/// Ground-truth factors and the star ratings drawn from them.
#[derive(Clone, Debug)]
pub struct SyntheticRatings {
    pub triples: Vec<(String, String, u8)>,
    pub user_factors: Vec<DVector<f64>>,
    pub item_factors: Vec<DVector<f64>>,
}

/// Draws latent factors, observes each (user, item) pair with probability
/// `density` (at least `min_per_user` per user), and maps binary draws from
/// the logistic model to stars: `+1 → 4 or 5`, `−1 → 1, 2 or 3`.
pub fn generate_ratings(
    n_users: usize,
    n_items: usize,
    dim: usize,
    density: f64,
    min_per_user: usize,
    factor_scale: f64,
    rng: &mut dyn RngCore,
) -> Result<SyntheticRatings> {
    if n_users == 0 || n_items == 0 || dim == 0 || min_per_user > n_items || !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid("invalid synthetic ratings settings"));
    }
    let normal = Normal::new(0.0, factor_scale).map_err(|e| Error::invalid(e.to_string()))?;
    let users: Vec<DVector<f64>> =
        (0..n_users).map(|_| DVector::from_fn(dim, |_, _| normal.sample(&mut *rng))).collect();
    let items: Vec<DVector<f64>> =
        (0..n_items).map(|_| DVector::from_fn(dim, |_, _| normal.sample(&mut *rng))).collect();
    let mut triples = Vec::new();
    let mut all_items: Vec<usize> = (0..n_items).collect();
    for (u, fu) in users.iter().enumerate() {
        let mut chosen: Vec<usize> = (0..n_items).filter(|_| rng.random::<f64>() < density).collect();
        if chosen.len() < min_per_user {
            all_items.shuffle(rng);
            chosen = all_items[..min_per_user].to_vec();
            chosen.sort_unstable();
        }
        for b in chosen {
            let p = 1.0 / (1.0 + (-fu.dot(&items[b])).exp());
            let stars = if rng.random::<f64>() < p {
                rng.random_range(4..=5)
            } else {
                rng.random_range(1..=3)
            };
            triples.push((format!("u{u}"), format!("b{b}"), stars));
        }
    }
    Ok(SyntheticRatings {
        triples,
        user_factors: users,
        item_factors: items,
    })
}

/// Contents of a factor file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FactorFile {
    pub users: Vec<(String, ParamVec)>,
    pub items: Vec<(String, Feature)>,
}

/// Writes `entity_kind,entity_id,v1..vd` rows, users first.
pub fn write_factors(path: &Path, factors: &FactorFile) -> Result<()> {
    let dim = factors
        .users
        .first()
        .map(|(_, v)| v.dim())
        .or_else(|| factors.items.first().map(|(_, v)| v.dim()))
        .ok_or_else(|| Error::invalid("no factors to write"))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut header = vec!["entity_kind".to_string(), "entity_id".to_string()];
    header.extend((1..=dim).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(csv_err)?;
    let rows = factors
        .users
        .iter()
        .map(|(id, v)| ("user", id, v.as_vector()))
        .chain(factors.items.iter().map(|(id, v)| ("item", id, v.as_vector())));
    for (kind, id, v) in rows {
        if v.len() != dim {
            return Err(Error::SizeMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        let mut rec = vec![kind.to_string(), id.clone()];
        rec.extend(v.iter().map(|x| format!("{x:e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_factors(path: &Path) -> Result<FactorFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let dim = headers.len().saturating_sub(2);
    let ok_header = headers.len() >= 3
        && &headers[0] == "entity_kind"
        && &headers[1] == "entity_id"
        && (1..=dim).all(|i| headers[i + 1] == format!("v{i}"));
    if !ok_header {
        return Err(parse_err(1, "expected header entity_kind,entity_id,v1..vd".into()));
    }
    let mut out = FactorFile::default();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != dim + 2 {
            return Err(parse_err(line, format!("expected {} fields, got {}", dim + 2, rec.len())));
        }
        let values = (2..rec.len())
            .map(|j| rec[j].parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| parse_err(line, "non-numeric factor entry".into()))?;
        let id = rec[1].to_string();
        match &rec[0] {
            "user" => out.users.push((id, ParamVec::from_slice(&values))),
            "item" => out.items.push((id, Feature::from_slice(&values))),
            other => return Err(parse_err(line, format!("unknown entity kind {other:?}"))),
        }
    }
    Ok(out)
}

impl FactorFile {
    pub fn from_training(table: &RatingsTable, fit: &MfResult) -> Self {
        FactorFile {
            users: table.user_ids.iter().cloned().zip(fit.user_factors.iter().cloned()).collect(),
            items: table.item_ids.iter().cloned().zip(fit.item_factors.iter().cloned()).collect(),
        }
    }
}

/// Settings for the generated ratings behind the synthetic preference scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub density: f64,
    pub factor_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 300,
            n_items: 800,
            dim: 5,
            density: 0.08,
            factor_scale: 0.8,
        }
    }
}

/// Generates ratings, pretrains factors on them and packages the result.
pub fn synthetic_preference_data(spec: &SyntheticSpec, seed: u64) -> Result<(PreferenceData, MfResult)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = generate_ratings(
        spec.n_users,
        spec.n_items,
        spec.dim,
        spec.density,
        MIN_RATINGS_PER_USER,
        spec.factor_scale,
        &mut rng,
    )?;
    let table = RatingsTable::from_raw(
        raw.triples.into_iter().map(|(u, b, r)| (u, b, f64::from(r))),
        MIN_RATINGS_PER_USER,
    )?;
    let cfg = MfConfig {
        dim: spec.dim,
        ..MfConfig::default()
    };
    let fit = pretrain_mf(&table, &cfg, &mut rng)?;
    let data = PreferenceData::new(fit.item_factors.clone(), fit.user_factors.clone())?;
    Ok((data, fit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(rows: &[(&str, &str, f64)]) -> Vec<(String, String, f64)> {
        rows.iter().map(|(u, b, r)| (u.to_string(), b.to_string(), *r)).collect()
    }

    #[test]
    fn thresholding_and_user_filter() {
        let mut rows: Vec<(String, String, f64)> = (0..10).map(|i| ("a".into(), format!("i{i}"), (i % 5 + 1) as f64)).collect();
        rows.push(("b".into(), "i0".into(), 5.0));
        let t = RatingsTable::from_raw(rows, 10).unwrap();
        assert_eq!(t.user_ids, vec!["a".to_string()]);
        let positives = t.ratings.iter().filter(|r| r.value == 1.0).count();
        assert_eq!(positives, 4);
    }

    #[test]
    fn rejects_duplicates_and_out_of_range() {
        assert!(RatingsTable::from_raw(raw(&[("a", "x", 3.0), ("a", "x", 4.0)]), 1).is_err());
        assert!(RatingsTable::from_raw(raw(&[("a", "x", 6.0)]), 1).is_err());
        assert!(RatingsTable::from_raw(raw(&[("a", "x", 0.0)]), 1).is_err());
    }

    #[test]
    fn single_positive_rating_drives_score_up() {
        let t = RatingsTable::from_raw(raw(&[("u", "b", 5.0)]), 1).unwrap();
        let cfg = MfConfig {
            holdout: 0.0,
            epochs: 50,
            ..MfConfig::default()
        };
        let fit = pretrain_mf(&t, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(fit.user_factors[0].dot(fit.item_factors[0].as_vector()) > 0.0);
    }
}
