use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::rng::{splitmix64, Rng};
use crate::types::{NaturalisticDistribution, SystemUnderTest, TestState};

/// `(train, validation, test)` sizes for the 3:1:1 split.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = 3 * n / 5;
    let val = n / 5;
    (train, val, n - train - val)
}

/// Offline data labeled by a surrogate agent, split 3:1:1.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub train: Dataset,
    pub validation: Dataset,
    /// Held out; used to estimate failure rates and precision.
    pub test: Dataset,
}

/// `n` draws from `p` labeled by one test of `sam` each, split by sorting
/// the row indices on a keyed hash.
pub fn generate_offline_dataset<S, P>(sam: &S, p: &P, n: usize, rng: &mut Rng) -> Result<OfflineDataset>
where
    S: SystemUnderTest + ?Sized,
    P: NaturalisticDistribution + ?Sized,
{
    if n < 10 {
        return Err(invalid("offline dataset needs at least 10 states"));
    }
    if sam.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: sam.dim(),
        });
    }
    let all = label_states(sam, p, n, rng)?;
    let key: u64 = rng.random();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (splitmix64(key ^ i as u64), i));
    let (tr, va, _) = split_sizes(n);
    let mut parts = [order[..tr].to_vec(), order[tr..tr + va].to_vec(), order[tr + va..].to_vec()];
    parts.iter_mut().for_each(|p| p.sort_unstable());
    Ok(OfflineDataset {
        train: all.subset(&parts[0]),
        validation: all.subset(&parts[1]),
        test: all.subset(&parts[2]),
    })
}

fn label_states<S, P>(sut: &S, p: &P, n: usize, rng: &mut Rng) -> Result<Dataset>
where
    S: SystemUnderTest + ?Sized,
    P: NaturalisticDistribution + ?Sized,
{
    let d = p.dim();
    let mut flat = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let s = p.sample(rng);
        labels.push(sut.run_test(&s, 1, rng).failed);
        flat.extend(s.into_inner());
    }
    let x = Array2::from_shape_vec((n, d), flat).map_err(|e| invalid(e.to_string()))?;
    Dataset::new(x, labels)
}

/// States drawn from `p`, labeled by the target agent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationDataset {
    pub data: Dataset,
    pub manifest: EvalManifest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    /// Hash identifying the target agent and distribution.
    pub spec_hash: String,
    pub seed: u64,
    pub n: usize,
    pub positives: usize,
    pub dim: usize,
}

impl EvaluationDataset {
    pub fn generate<S, P>(sut: &S, p: &P, n: usize, spec_hash: &str, seed: u64, rng: &mut Rng) -> Result<Self>
    where
        S: SystemUnderTest + ?Sized,
        P: NaturalisticDistribution + ?Sized,
    {
        if n == 0 {
            return Err(Error::Empty("evaluation dataset"));
        }
        let data = label_states(sut, p, n, rng)?;
        let manifest = EvalManifest {
            spec_hash: spec_hash.to_string(),
            seed,
            n,
            positives: data.positives(),
            dim: data.dim(),
        };
        Ok(Self { data, manifest })
    }

    pub fn states(&self) -> Vec<TestState> {
        self.data.states()
    }

    pub fn labels(&self) -> &[bool] {
        self.data.labels()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.data.positive_fraction()
    }

    /// Write `path` as CSV (`s_0..s_{d-1},label`) and the manifest next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_dataset_csv(&self.data, path)?;
        fs::write(
            manifest_path(path),
            serde_json::to_string_pretty(&self.manifest)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_dataset_csv(path)?;
        let manifest: EvalManifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
        if manifest.n != data.len() || manifest.positives != data.positives() || manifest.dim != data.dim() {
            return Err(Error::Format(format!(
                "{} does not match its manifest",
                path.display()
            )));
        }
        Ok(Self { data, manifest })
    }
}

/// `data.csv` -> `data.manifest.json`.
pub fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("manifest.json")
}

pub fn write_dataset_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.dim()).map(|i| format!("s_{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, &y) in data.x().rows().into_iter().zip(data.labels()) {
        let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
        rec.push(if y { "1" } else { "0" }.into());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let d = header.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
        Error::Format(format!("{}: header needs s_0.. and label", path.display()))
    })?;
    for (i, h) in header.iter().enumerate() {
        let want = if i == d { "label".to_string() } else { format!("s_{i}") };
        if h != want {
            return Err(Error::Format(format!("{}: column {i} is {h:?}, expected {want:?}", path.display())));
        }
    }
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for v in rec.iter().take(d) {
            flat.push(v.parse::<f64>().map_err(|e| Error::Format(format!("{v:?}: {e}")))?);
        }
        labels.push(match &rec[d] {
            "1" => true,
            "0" => false,
            other => return Err(Error::Format(format!("label must be 0 or 1, got {other:?}"))),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("dataset rows"));
    }
    let x = Array2::from_shape_vec((labels.len(), d), flat).map_err(|e| Error::Format(e.to_string()))?;
    Dataset::new(x, labels)
}
