//! Multi-center datasets: synthetic generation with per-center domain shift,
//! patient-grouped splitting, center rotation for k-fold experiments, and CSV
//! import/export.
//!
//! Every center shares one latent problem: two unit-variance Gaussian classes
//! separated along a fixed direction. A center sees that problem through its
//! own affine transform (a rotation plus a translation) and additive noise,
//! and has its own patient count, tiles per patient and positive fraction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};

/// Patient-level split fractions for train / validation / test.
pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [0.5, 0.1, 0.4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// 1 = positive (tumor analogue), 0 = negative.
    pub label: u8,
    pub patient_id: String,
    pub center_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("expected train, val or test, got `{other}`")),
        }
    }
}

/// One center's samples and the split of each of its patients.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub center_id: String,
    pub samples: Vec<Sample>,
    /// patient_id → split. Empty until the center is split.
    pub splits: BTreeMap<String, Split>,
}

impl ClientDataset {
    pub fn new(center_id: impl Into<String>, samples: Vec<Sample>) -> Self {
        Self {
            center_id: center_id.into(),
            samples,
            splits: BTreeMap::new(),
        }
    }

    /// Distinct patients in order of first appearance.
    pub fn patients(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.patient_id.as_str()))
            .map(|s| s.patient_id.as_str())
            .collect()
    }

    pub fn n_patients(&self) -> usize {
        self.patients().len()
    }

    /// Total number of samples (N_i when counting all data of a center).
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn is_split(&self) -> bool {
        !self.splits.is_empty()
    }

    /// Samples belonging to patients assigned to `split`.
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| self.splits.get(&s.patient_id) == Some(&split))
            .collect()
    }

    pub fn all(&self) -> Vec<&Sample> {
        self.samples.iter().collect()
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let pos = self.samples.iter().filter(|s| s.label == 1).count();
        (self.samples.len() - pos, pos)
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }
}

/// Inclusive range used by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T: PartialOrd + Copy> Range<T> {
    pub fn new(min: T, max: T) -> Self {
        Self { min, max }
    }

    fn is_valid(&self) -> bool {
        self.min <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Maximum rotation angle (radians) in each coordinate plane.
    pub rotation_scale: f64,
    /// Maximum absolute translation per coordinate.
    pub bias_scale: f64,
    /// Standard deviation of additive per-feature noise.
    pub noise_sigma: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            rotation_scale: 0.0,
            bias_scale: 0.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_centers: usize,
    pub input_dim: usize,
    pub patients_per_center: Range<usize>,
    pub tiles_per_patient: Range<usize>,
    pub class_pos_fraction: Range<f64>,
    /// Distance between the two latent class means.
    pub class_separation: f64,
    pub domain_shift: DomainShift,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_centers == 0 || self.input_dim == 0 {
            return err("n_centers and input_dim must be positive");
        }
        if !self.patients_per_center.is_valid() || self.patients_per_center.min < 3 {
            return err("patients_per_center must be a nonempty range with min >= 3");
        }
        if !self.tiles_per_patient.is_valid() || self.tiles_per_patient.min == 0 {
            return err("tiles_per_patient must be a nonempty range with min >= 1");
        }
        let f = self.class_pos_fraction;
        if !f.is_valid() || f.min <= 0.0 || f.max >= 1.0 {
            return err("class_pos_fraction must be a nonempty range inside (0, 1)");
        }
        let s = self.domain_shift;
        let finite_nonneg = [
            self.class_separation,
            s.rotation_scale,
            s.bias_scale,
            s.noise_sigma,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0);
        if !finite_nonneg {
            return err("class_separation and domain_shift entries must be finite and >= 0");
        }
        Ok(())
    }
}

/// Identifier of the `i`-th synthetic center.
pub fn center_name(i: usize) -> String {
    format!("C{i:02}")
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Apply Givens rotations in planes (0,1), (1,2), ... with the given angles.
fn rotate(x: &mut [f64], angles: &[f64]) {
    for (k, &theta) in angles.iter().enumerate() {
        if theta == 0.0 {
            continue;
        }
        let (s, c) = theta.sin_cos();
        let (a, b) = (x[k], x[k + 1]);
        x[k] = c * a - s * b;
        x[k + 1] = s * a + c * b;
    }
}

/// Generate every center of a synthetic federation, already split 50/10/40 by
/// patient. A pure function of `cfg`.
pub fn generate_federation(cfg: &SynthConfig) -> Result<BTreeMap<String, ClientDataset>> {
    cfg.validate()?;
    let d = cfg.input_dim;

    let mut shared = RngStream::server(cfg.seed, 0, Purpose::Generate).rng();
    let mut direction: Vec<f64> = (0..d).map(|_| standard_normal(&mut shared)).collect();
    let norm = direction
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    direction.iter_mut().for_each(|v| *v /= norm);
    let half_gap = 0.5 * cfg.class_separation;

    let mut out = BTreeMap::new();
    for c in 0..cfg.n_centers {
        let center_id = center_name(c);
        let mut rng = RngStream::new(cfg.seed, 0, c as u64, Purpose::Generate).rng();
        let n_patients =
            rng.random_range(cfg.patients_per_center.min..=cfg.patients_per_center.max);
        let pos_fraction =
            rng.random_range(cfg.class_pos_fraction.min..=cfg.class_pos_fraction.max);
        // Unit draws scaled afterwards, so the shift knobs never change which
        // latent points are generated.
        let angles: Vec<f64> = (0..d.saturating_sub(1))
            .map(|_| cfg.domain_shift.rotation_scale * rng.random_range(-1.0..=1.0))
            .collect();
        let offset: Vec<f64> = (0..d)
            .map(|_| cfg.domain_shift.bias_scale * rng.random_range(-1.0..=1.0))
            .collect();

        let mut samples = Vec::new();
        for p in 0..n_patients {
            let patient_id = format!("{center_id}-P{p:03}");
            let tiles = rng.random_range(cfg.tiles_per_patient.min..=cfg.tiles_per_patient.max);
            for _ in 0..tiles {
                let label = u8::from(rng.random::<f64>() < pos_fraction);
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let mut x: Vec<f64> = direction
                    .iter()
                    .map(|u| sign * half_gap * u + standard_normal(&mut rng))
                    .collect();
                rotate(&mut x, &angles);
                for (xi, bi) in x.iter_mut().zip(&offset) {
                    *xi += bi + cfg.domain_shift.noise_sigma * standard_normal(&mut rng);
                }
                samples.push(Sample {
                    features: x,
                    label,
                    patient_id: patient_id.clone(),
                    center_id: center_id.clone(),
                });
            }
        }
        let ds = ClientDataset::new(center_id.clone(), samples);
        let split_stream = RngStream::new(cfg.seed, 0, c as u64, Purpose::Split);
        let ds = split_patients(&ds, DEFAULT_SPLIT_FRACTIONS, split_stream)?;
        out.insert(center_id, ds);
    }
    Ok(out)
}

/// Patient counts per split by the largest-remainder method, then topped up so
/// that every split has at least one patient when `n >= 3`.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut remaining = n - counts.iter().sum::<usize>().min(n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    if n >= 3 {
        for i in 0..3 {
            if counts[i] == 0 {
                let donor = (0..3)
                    .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                    .unwrap();
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Randomly assign whole patients to train / val / test at `fractions`.
pub fn split_patients(
    ds: &ClientDataset,
    fractions: [f64; 3],
    stream: RngStream,
) -> Result<ClientDataset> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0)
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let mut patients: Vec<String> = ds.patients().into_iter().map(str::to_owned).collect();
    if patients.len() < 3 {
        return Err(Error::Data(format!(
            "center {} has {} patients; at least 3 are needed to split",
            ds.center_id,
            patients.len()
        )));
    }
    patients.shuffle(&mut stream.rng());
    let counts = split_counts(patients.len(), fractions);

    let mut splits = BTreeMap::new();
    let mut it = patients.into_iter();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for p in it.by_ref().take(count) {
            splits.insert(p, split);
        }
    }
    Ok(ClientDataset {
        center_id: ds.center_id.clone(),
        samples: ds.samples.clone(),
        splits,
    })
}

/// Which centers train and which only test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederationLayout {
    pub training_centers: Vec<String>,
    pub independent_centers: Vec<String>,
}

impl FederationLayout {
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<_> = self.training_centers.iter().collect();
        if train.len() != self.training_centers.len() {
            return Err(Error::Config("duplicate training center".into()));
        }
        if let Some(c) = self.independent_centers.iter().find(|c| train.contains(c)) {
            return Err(Error::Config(format!(
                "center {c} is both a training and an independent center"
            )));
        }
        if self.training_centers.len() < 2 {
            return Err(Error::Config(
                "a federation needs at least 2 training centers".into(),
            ));
        }
        Ok(())
    }

    /// Random division of `centers` into `n_training` training centers and the
    /// rest independent. Both lists come back sorted.
    pub fn random(centers: &[String], n_training: usize, stream: RngStream) -> Result<Self> {
        if n_training > centers.len() {
            return Err(Error::Config(format!(
                "asked for {n_training} training centers out of {}",
                centers.len()
            )));
        }
        let mut shuffled = centers.to_vec();
        shuffled.shuffle(&mut stream.rng());
        let mut training_centers = shuffled[..n_training].to_vec();
        let mut independent_centers = shuffled[n_training..].to_vec();
        training_centers.sort();
        independent_centers.sort();
        let layout = Self {
            training_centers,
            independent_centers,
        };
        layout.validate()?;
        Ok(layout)
    }
}

/// Split `centers` into `k` near-equal groups; layout `j` holds group `j` out
/// as independent centers and trains on the rest.
pub fn kfold_center_rotation(
    centers: &[String],
    k: usize,
    stream: RngStream,
) -> Result<Vec<FederationLayout>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if k > centers.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the number of centers ({})",
            centers.len()
        )));
    }
    let mut shuffled = centers.to_vec();
    shuffled.shuffle(&mut stream.rng());
    let base = shuffled.len() / k;
    let extra = shuffled.len() % k;
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for j in 0..k {
        let size = base + usize::from(j < extra);
        groups.push(shuffled[start..start + size].to_vec());
        start += size;
    }
    Ok((0..k)
        .map(|j| {
            let mut independent_centers = groups[j].clone();
            let mut training_centers: Vec<String> = groups
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .flat_map(|(_, g)| g.iter().cloned())
                .collect();
            independent_centers.sort();
            training_centers.sort();
            FederationLayout {
                training_centers,
                independent_centers,
            }
        })
        .collect())
}

/// Write datasets in the federation CSV layout:
/// `center_id,patient_id,split,label,f0,...,f{d-1}`.
pub fn write_csv_federation(datasets: &BTreeMap<String, ClientDataset>, path: &Path) -> Result<()> {
    let dim = datasets
        .values()
        .find_map(ClientDataset::input_dim)
        .ok_or_else(|| Error::Data("no samples to export".into()))?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["center_id", "patient_id", "split", "label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for ds in datasets.values() {
        for s in &ds.samples {
            if s.features.len() != dim {
                return Err(Error::Data(format!(
                    "center {} has samples of differing dimension",
                    ds.center_id
                )));
            }
            let split = ds.splits.get(&s.patient_id).map_or("", |sp| sp.as_str());
            let mut row = vec![
                ds.center_id.clone(),
                s.patient_id.clone(),
                split.to_string(),
                s.label.to_string(),
            ];
            row.extend(s.features.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a federation CSV. Centers whose rows carry no split are split by
/// patient using `seed`; centers must be either fully split or not at all.
pub fn load_csv_federation(path: &Path, seed: u64) -> Result<BTreeMap<String, ClientDataset>> {
    let schema = |row: usize, column: &str, message: String| Error::Schema {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h == name);

    let mut columns = HashMap::new();
    for name in ["center_id", "patient_id", "label"] {
        let idx = find(name).ok_or_else(|| schema(1, name, "required column is missing".into()))?;
        columns.insert(name, idx);
    }
    let split_col = find("split");
    let mut feature_cols = Vec::new();
    while let Some(idx) = find(&format!("f{}", feature_cols.len())) {
        feature_cols.push(idx);
    }
    if feature_cols.is_empty() {
        return Err(schema(1, "f0", "no feature columns".into()));
    }
    for (i, h) in header.iter().enumerate() {
        let known =
            columns.values().any(|&c| c == i) || split_col == Some(i) || feature_cols.contains(&i);
        if !known {
            return Err(schema(1, h, "unexpected column".into()));
        }
    }

    let mut samples: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    let mut splits: BTreeMap<String, BTreeMap<String, Option<Split>>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let get = |idx: usize| record.get(idx).unwrap_or("");
        let center_id = get(columns["center_id"]).to_string();
        let patient_id = get(columns["patient_id"]).to_string();
        if center_id.is_empty() {
            return Err(schema(line, "center_id", "empty value".into()));
        }
        if patient_id.is_empty() {
            return Err(schema(line, "patient_id", "empty value".into()));
        }
        let label = match get(columns["label"]) {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(schema(
                    line,
                    "label",
                    format!("expected 0 or 1, got `{other}`"),
                ))
            }
        };
        let split = match split_col.map(get) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<Split>().map_err(|m| schema(line, "split", m))?),
        };
        let features = feature_cols
            .iter()
            .enumerate()
            .map(|(j, &idx)| {
                let col = format!("f{j}");
                let v: f64 = get(idx)
                    .parse()
                    .map_err(|_| schema(line, &col, format!("not a number: `{}`", get(idx))))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(schema(line, &col, "non-finite value".into()))
                }
            })
            .collect::<Result<Vec<f64>>>()?;

        let patient_splits = splits.entry(center_id.clone()).or_default();
        match patient_splits.get(&patient_id) {
            Some(prev) if *prev != split => {
                return Err(schema(
                    line,
                    "split",
                    format!("patient {patient_id} appears in more than one split"),
                ))
            }
            _ => {
                patient_splits.insert(patient_id.clone(), split);
            }
        }
        samples.entry(center_id.clone()).or_default().push(Sample {
            features,
            label,
            patient_id,
            center_id,
        });
    }

    let mut out = BTreeMap::new();
    for (index, (center_id, center_samples)) in samples.into_iter().enumerate() {
        let patient_splits = &splits[&center_id];
        let assigned = patient_splits.values().filter(|s| s.is_some()).count();
        let ds = ClientDataset::new(center_id.clone(), center_samples);
        let ds = if assigned == patient_splits.len() {
            ClientDataset {
                splits: patient_splits
                    .iter()
                    .map(|(p, s)| (p.clone(), s.expect("all assigned")))
                    .collect(),
                ..ds
            }
        } else if assigned == 0 {
            let stream = RngStream::new(seed, 0, index as u64, Purpose::Split);
            split_patients(&ds, DEFAULT_SPLIT_FRACTIONS, stream)?
        } else {
            return Err(Error::Data(format!(
                "{}: center {center_id} has split values for only some patients",
                path.display()
            )));
        };
        out.insert(center_id, ds);
    }
    Ok(out)
}
