//! Rating ingestion, ID relabeling, train/test splits and synthetic data.
//!
//! Input files are UTF-8 text with one `user<TAB>item<TAB>rating` line per
//! rating. User and item tokens are arbitrary strings; they are mapped onto
//! dense indices through a seeded random permutation so contiguous index
//! ranges hold a random subset of users/items.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{ChainState, RatingTuple};

/// Bijection between original tokens and dense internal indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    to_internal: HashMap<String, usize>,
    to_original: Vec<String>,
}

impl IdMap {
    /// `original[k]` becomes internal index `k`.
    pub fn from_originals(original: Vec<String>) -> Result<Self> {
        let mut to_internal = HashMap::with_capacity(original.len());
        for (k, tok) in original.iter().enumerate() {
            if to_internal.insert(tok.clone(), k).is_some() {
                return Err(Error::arg(format!("duplicate id token {tok:?}")));
            }
        }
        Ok(IdMap {
            to_internal,
            to_original: original,
        })
    }

    /// Tokens `"0"`, `"1"`, ... mapped onto themselves.
    pub fn identity(n: usize) -> Self {
        IdMap::from_originals((0..n).map(|k| k.to_string()).collect()).expect("distinct tokens")
    }

    pub fn internal(&self, original: &str) -> Option<usize> {
        self.to_internal.get(original).copied()
    }

    pub fn original(&self, internal: usize) -> Option<&str> {
        self.to_original.get(internal).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.to_original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_original.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<RatingTuple>,
    pub test: Vec<RatingTuple>,
    pub n_users: usize,
    pub n_items: usize,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads a rating file; every tuple lands in `train` until split.
pub fn load_ratings(path: impl AsRef<Path>, seed: u64) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    parse_ratings(BufReader::new(file), seed)
}

/// Parses tab-separated ratings. Blank lines are skipped; duplicates kept.
pub fn parse_ratings<R: BufRead>(reader: R, seed: u64) -> Result<Dataset> {
    let mut raw: Vec<(String, String, f64)> = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let rating: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("rating {:?} is not a number", fields[2]),
        })?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("rating {:?} is not finite", fields[2]),
            });
        }
        let (u, i) = (fields[0].trim(), fields[1].trim());
        if u.is_empty() || i.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty user or item token".into(),
            });
        }
        raw.push((u.to_string(), i.to_string(), rating));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user_ids = relabel(raw.iter().map(|r| r.0.as_str()), &mut rng)?;
    let item_ids = relabel(raw.iter().map(|r| r.1.as_str()), &mut rng)?;
    let train = raw
        .iter()
        .map(|(u, i, r)| {
            RatingTuple::new(
                user_ids.internal(u).unwrap(),
                item_ids.internal(i).unwrap(),
                *r,
            )
        })
        .collect();
    Ok(Dataset {
        train,
        test: Vec::new(),
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        user_ids,
        item_ids,
    })
}

fn relabel<'a>(tokens: impl Iterator<Item = &'a str>, rng: &mut ChaCha8Rng) -> Result<IdMap> {
    let mut seen = HashMap::new();
    let mut order = Vec::new();
    for tok in tokens {
        if !seen.contains_key(tok) {
            seen.insert(tok, ());
            order.push(tok.to_string());
        }
    }
    order.shuffle(rng);
    IdMap::from_originals(order)
}

/// Pools train and test and draws a fresh uniform split with
/// `round(test_fraction · N)` test tuples.
pub fn split_train_test(data: Dataset, test_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::arg(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut all = data.train;
    all.extend(data.test);
    let n = all.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; n];
    for k in index::sample(&mut rng, n, n_test) {
        is_test[k] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n - n_test), Vec::with_capacity(n_test));
    for (t, flag) in all.into_iter().zip(is_test) {
        if flag {
            test.push(t);
        } else {
            train.push(t);
        }
    }
    Ok(Dataset {
        train,
        test,
        ..data
    })
}

/// Parameters of a synthetic low-rank dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub dim_true: usize,
    pub noise_sd: f64,
    pub density: f64,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_users: 200,
            n_items: 200,
            dim_true: 5,
            noise_sd: 0.5,
            density: 0.05,
            seed: 1,
            test_fraction: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn cell_count(&self) -> usize {
        (self.density * self.n_users as f64 * self.n_items as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.dim_true == 0 {
            return Err(Error::arg("synthetic sizes must be positive"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::arg("noise_sd must be finite and non-negative"));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::arg(format!(
                "density {} outside (0, 1]",
                self.density
            )));
        }
        if self.cell_count() < 1 {
            return Err(Error::arg("density too small: no cells would be observed"));
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return Err(Error::arg(format!(
                "test fraction {} outside [0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    /// Generating parameters; precisions are unused.
    pub truth: ChainState,
}

/// Draws true factors and biases from `N(0, 1/D_true)`, picks distinct cells
/// uniformly at the requested density and adds `N(0, noise_sd²)` noise.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = 1.0 / (spec.dim_true as f64).sqrt();
    let mut truth = ChainState::new(spec.n_users, spec.n_items, spec.dim_true, 1.0);
    let draw = |rng: &mut ChaCha8Rng| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    };
    for x in truth.u.as_mut_slice() {
        *x = draw(&mut rng);
    }
    for x in truth.v.as_mut_slice() {
        *x = draw(&mut rng);
    }
    for x in truth.a.iter_mut().chain(truth.b.iter_mut()) {
        *x = draw(&mut rng);
    }
    let cells = index::sample(&mut rng, spec.n_users * spec.n_items, spec.cell_count());
    let tuples: Vec<RatingTuple> = cells
        .into_iter()
        .map(|c| {
            let (i, j) = (c / spec.n_items, c % spec.n_items);
            let e: f64 = StandardNormal.sample(&mut rng);
            RatingTuple::new(i, j, truth.predict_unchecked(i, j) + spec.noise_sd * e)
        })
        .collect();
    let mut dataset = Dataset {
        train: tuples,
        test: Vec::new(),
        n_users: spec.n_users,
        n_items: spec.n_items,
        user_ids: IdMap::identity(spec.n_users),
        item_ids: IdMap::identity(spec.n_items),
    };
    if spec.test_fraction > 0.0 {
        dataset = split_train_test(dataset, spec.test_fraction, spec.seed ^ 0x5eed)?;
    }
    Ok(SynthData { dataset, truth })
}

/// Writes tuples in the input format, translating indices back to tokens.
pub fn write_ratings(
    path: impl AsRef<Path>,
    tuples: &[RatingTuple],
    users: &IdMap,
    items: &IdMap,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    for t in tuples {
        let u = users.original(t.user).ok_or(Error::Index {
            what: "user",
            index: t.user,
            bound: users.len(),
        })?;
        let i = items.original(t.item).ok_or(Error::Index {
            what: "item",
            index: t.item,
            bound: items.len(),
        })?;
        writeln!(w, "{u}\t{i}\t{}", t.rating)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `U`, `V`, `a`, `b` as row-major text, each preceded by a
/// `# name rows cols` line.
pub fn write_truth(path: impl AsRef<Path>, truth: &ChainState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    let matrix = |w: &mut BufWriter<File>,
                  name: &str,
                  rows: usize,
                  cols: usize,
                  data: &[f64]|
     -> Result<()> {
        writeln!(w, "# {name} {rows} {cols}")?;
        for r in 0..rows {
            let line: Vec<String> = data[r * cols..(r + 1) * cols]
                .iter()
                .map(|x| x.to_string())
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    };
    let d = truth.dim();
    matrix(&mut w, "U", truth.n_users(), d, truth.u.as_slice())?;
    matrix(&mut w, "V", truth.n_items(), d, truth.v.as_slice())?;
    matrix(&mut w, "a", truth.n_users(), 1, &truth.a)?;
    matrix(&mut w, "b", truth.n_items(), 1, &truth.b)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::state_rmse;
    use proptest::prelude::*;

    #[test]
    fn empty_input() {
        let d = parse_ratings(&b""[..], 1).unwrap();
        assert!(d.is_empty());
        assert_eq!((d.n_users, d.n_items), (0, 0));
    }

    #[test]
    fn t1_file() {
        let d = parse_ratings(&b"u1\ti1\t5\nu1\ti2\t3\nu2\ti1\t4\n"[..], 9).unwrap();
        assert_eq!((d.train.len(), d.n_users, d.n_items), (3, 2, 2));
        for (t, (u, i, r)) in
            d.train
                .iter()
                .zip([("u1", "i1", 5.0), ("u1", "i2", 3.0), ("u2", "i1", 4.0)])
        {
            assert_eq!(d.user_ids.original(t.user), Some(u));
            assert_eq!(d.item_ids.original(t.item), Some(i));
            assert_eq!(t.rating, r);
        }
    }

    #[test]
    fn duplicates_are_kept() {
        let d = parse_ratings(&b"a\tb\t1\na\tb\t2\n"[..], 0).unwrap();
        assert_eq!(d.train.len(), 2);
        assert_eq!((d.n_users, d.n_items), (1, 1));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_ratings(&b"a\tb\t1\na\tb\n"[..], 0) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_ratings(&b"a\tb\t1\n\nc\td\tfive\n"[..], 0) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_ratings(&b"a\tb\tNaN\n"[..], 0).is_err());
    }

    #[test]
    fn split_counts() {
        let data = Dataset {
            train: (0..10).map(|k| RatingTuple::new(k, 0, k as f64)).collect(),
            test: vec![],
            n_users: 10,
            n_items: 1,
            user_ids: IdMap::identity(10),
            item_ids: IdMap::identity(1),
        };
        let s = split_train_test(data.clone(), 0.2, 4).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        assert_eq!(s, split_train_test(data.clone(), 0.2, 4).unwrap());
        assert!(split_train_test(data.clone(), 0.0, 4).is_err());
        assert!(split_train_test(data, 1.0, 4).is_err());
    }

    #[test]
    fn noiseless_full_synth_is_exact() {
        let spec = SynthSpec {
            n_users: 8,
            n_items: 6,
            noise_sd: 0.0,
            density: 1.0,
            test_fraction: 0.0,
            ..SynthSpec::default()
        };
        let s = synth_generate(&spec).unwrap();
        assert_eq!(s.dataset.train.len(), 48);
        assert_eq!(state_rmse(&s.truth, &s.dataset.train), 0.0);
        let again = synth_generate(&spec).unwrap();
        assert_eq!(s.dataset, again.dataset);
    }

    #[test]
    fn synth_cells_are_distinct() {
        let s = synth_generate(&SynthSpec::default()).unwrap();
        let mut cells: Vec<(usize, usize)> = s
            .dataset
            .train
            .iter()
            .chain(&s.dataset.test)
            .map(|t| (t.user, t.item))
            .collect();
        let n = cells.len();
        assert_eq!(n, 2000);
        cells.sort_unstable();
        cells.dedup();
        assert_eq!(cells.len(), n);
        assert_eq!(s.dataset.test.len(), 400);
    }

    #[test]
    fn synth_rating_variance() {
        let spec = SynthSpec {
            n_users: 400,
            n_items: 500,
            density: 0.5,
            test_fraction: 0.0,
            seed: 11,
            ..SynthSpec::default()
        };
        let s = synth_generate(&spec).unwrap();
        let t = &s.dataset.train;
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
        };
        let ratings: Vec<f64> = t.iter().map(|x| x.rating).collect();
        let preds: Vec<f64> = t
            .iter()
            .map(|x| s.truth.predict(x.user, x.item).unwrap())
            .collect();
        let expected = var(&preds) + spec.noise_sd * spec.noise_sd;
        assert!((var(&ratings) / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn dump_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_generate(&SynthSpec {
            n_users: 10,
            n_items: 10,
            density: 0.5,
            ..SynthSpec::default()
        })
        .unwrap();
        let path = dir.path().join("r.tsv");
        write_ratings(
            &path,
            &s.dataset.train,
            &s.dataset.user_ids,
            &s.dataset.item_ids,
        )
        .unwrap();
        write_truth(dir.path().join("r.truth"), &s.truth).unwrap();
        let back = load_ratings(&path, 3).unwrap();
        assert_eq!(back.train.len(), s.dataset.train.len());
        for (a, b) in back.train.iter().zip(&s.dataset.train) {
            assert_eq!(
                back.user_ids.original(a.user),
                s.dataset.user_ids.original(b.user)
            );
            assert_eq!(a.rating, b.rating);
        }
        let truth = std::fs::read_to_string(dir.path().join("r.truth")).unwrap();
        assert!(truth.starts_with("# U 10 5\n"));
    }

    proptest! {
        #[test]
        fn relabel_is_a_bijection(tokens in proptest::collection::vec("[a-z]{1,4}", 1..30), seed in any::<u64>()) {
            let text: String = tokens.iter().map(|t| format!("{t}\tx\t1\n")).collect();
            let d = parse_ratings(text.as_bytes(), seed).unwrap();
            for tok in &tokens {
                let k = d.user_ids.internal(tok).unwrap();
                prop_assert_eq!(d.user_ids.original(k), Some(tok.as_str()));
                prop_assert!(k < d.n_users);
            }
            for k in 0..d.n_users {
                prop_assert_eq!(d.user_ids.internal(d.user_ids.original(k).unwrap()), Some(k));
            }
        }

        #[test]
        fn split_is_a_partition(n in 1usize..200, frac in 0.01f64..0.99, seed in any::<u64>()) {
            let data = Dataset {
                train: (0..n).map(|k| RatingTuple::new(k, 0, k as f64)).collect(),
                test: vec![],
                n_users: n,
                n_items: 1,
                user_ids: IdMap::identity(n),
                item_ids: IdMap::identity(1),
            };
            let s = split_train_test(data, frac, seed).unwrap();
            prop_assert_eq!(s.test.len(), (frac * n as f64).round() as usize);
            let mut ids: Vec<usize> = s.train.iter().chain(&s.test).map(|t| t.user).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
        }
    }
}
