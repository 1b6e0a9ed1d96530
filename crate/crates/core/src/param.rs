//! Parameter sets, dropout masks and the arithmetic that aggregation is built
//! from.
//!
//! A [`ParameterSet`] stores every trainable value of a model as flat per-layer
//! arrays in declaration order. The flat index inside a layer is the index that
//! aggregation works with, so "the same parameter in another client's model"
//! is always `(layer position, flat index)`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Weight,
    Bias,
}

/// One named tensor of a model, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTensor {
    pub layer_id: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl LayerTensor {
    pub fn new(
        layer_id: impl Into<String>,
        kind: LayerKind,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let t = Self {
            layer_id: layer_id.into(),
            kind,
            shape,
            values,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(Error::Data(format!(
                "layer {} has invalid shape {:?}",
                self.layer_id, self.shape
            )));
        }
        let expected: usize = self.shape.iter().product();
        if expected != self.values.len() {
            return Err(Error::Data(format!(
                "layer {}: shape {:?} holds {} values, got {}",
                self.layer_id,
                self.shape,
                expected,
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("layer {}", self.layer_id)));
        }
        Ok(())
    }

    fn same_layout(&self, other: &LayerTensor) -> bool {
        self.layer_id == other.layer_id && self.kind == other.kind && self.shape == other.shape
    }
}

/// All parameters of one model: the unit exchanged between server and clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    layers: Vec<LayerTensor>,
}

impl ParameterSet {
    pub fn new(layers: Vec<LayerTensor>) -> Result<Self> {
        for l in &layers {
            l.validate()?;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerTensor] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &LayerTensor {
        &self.layers[index]
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerTensor] {
        &mut self.layers
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same layer ids, kinds and shapes, in the same order.
    pub fn is_congruent(&self, other: &ParameterSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_layout(b))
    }

    pub fn check_congruent(&self, other: &ParameterSet) -> Result<()> {
        if self.is_congruent(other) {
            return Ok(());
        }
        let describe = |p: &ParameterSet| {
            p.layers
                .iter()
                .map(|l| format!("{}:{:?}{:?}", l.layer_id, l.kind, l.shape))
                .collect::<Vec<_>>()
                .join(",")
        };
        Err(Error::Congruence(format!(
            "[{}] vs [{}]",
            describe(self),
            describe(other)
        )))
    }

    /// Congruent copy with every value set to zero.
    pub fn new_zeroed(&self) -> ParameterSet {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerTensor {
                layer_id: l.layer_id.clone(),
                kind: l.kind,
                shape: l.shape.clone(),
                values: vec![0.0; l.values.len()],
            })
            .collect();
        ParameterSet { layers }
    }

    /// Elementwise `self + a * x`.
    pub fn axpy(&self, a: f64, x: &ParameterSet) -> Result<ParameterSet> {
        let mut out = self.clone();
        out.axpy_assign(a, x)?;
        Ok(out)
    }

    /// In-place `self += a * x`.
    pub fn axpy_assign(&mut self, a: f64, x: &ParameterSet) -> Result<()> {
        if !a.is_finite() {
            return Err(Error::Numeric(format!("axpy coefficient {a}")));
        }
        self.check_congruent(x)?;
        for (acc, xl) in self.layers.iter_mut().zip(&x.layers) {
            for (v, &xv) in acc.values.iter_mut().zip(&xl.values) {
                *v += a * xv;
            }
        }
        self.ensure_finite("axpy")
    }

    /// Elementwise `a * self`.
    pub fn scaled(&self, a: f64) -> Result<ParameterSet> {
        let mut out = self.clone();
        for l in &mut out.layers {
            for v in &mut l.values {
                *v *= a;
            }
        }
        out.ensure_finite("scale")?;
        Ok(out)
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for l in &self.layers {
            if l.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("{context} (layer {})", l.layer_id)));
            }
        }
        Ok(())
    }

    /// All values concatenated in layer order.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.values.iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten): same layout as `self`, values
    /// taken from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParameterSet> {
        let total: usize = self.layers.iter().map(|l| l.values.len()).sum();
        if flat.len() != total {
            return Err(Error::Congruence(format!(
                "{} values for a model with {total} parameters",
                flat.len()
            )));
        }
        let mut offset = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let values = flat[offset..offset + l.values.len()].to_vec();
                offset += values.len();
                LayerTensor::new(l.layer_id.clone(), l.kind, l.shape.clone(), values)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParameterSet { layers })
    }

    /// Euclidean distance over every parameter.
    pub fn l2_distance(&self, other: &ParameterSet) -> Result<f64> {
        self.check_congruent(other)?;
        let sq: f64 = self
            .layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.values.iter().zip(&b.values))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(sq.sqrt())
    }

    /// Wrapping sum of the IEEE-754 bit patterns of every value. Any change to
    /// any bit of any parameter changes the checksum with high probability.
    pub fn checksum(&self) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| l.values.iter())
            .fold(0u64, |acc, v| acc.wrapping_add(v.to_bits()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<ParameterSet> {
        let raw: ParameterSet = serde_json::from_str(s)?;
        ParameterSet::new(raw.layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(&ParameterFile {
            checksum: self.checksum(),
            layers: &self.layers,
        })?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParameterSet> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: OwnedParameterFile = serde_json::from_str(&text)?;
        let params = ParameterSet::new(file.layers)?;
        if params.checksum() != file.checksum {
            return Err(Error::Data(format!(
                "{}: checksum mismatch (stored {}, computed {})",
                path.display(),
                file.checksum,
                params.checksum()
            )));
        }
        Ok(params)
    }
}

#[derive(Serialize)]
struct ParameterFile<'a> {
    checksum: u64,
    layers: &'a [LayerTensor],
}

#[derive(Deserialize)]
struct OwnedParameterFile {
    checksum: u64,
    layers: Vec<LayerTensor>,
}

/// Per-parameter survival flags, congruent to a [`ParameterSet`].
/// `true` means the parameter is kept for aggregation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask {
    layers: Vec<Vec<bool>>,
}

impl DropoutMask {
    /// Mask that keeps every parameter of `template`.
    pub fn all_true(template: &ParameterSet) -> Self {
        Self {
            layers: template
                .layers
                .iter()
                .map(|l| vec![true; l.values.len()])
                .collect(),
        }
    }

    /// Build a mask from explicit flags; must match the layer sizes of `template`.
    pub fn from_layers(template: &ParameterSet, layers: Vec<Vec<bool>>) -> Result<Self> {
        let ok = layers.len() == template.layers.len()
            && layers
                .iter()
                .zip(&template.layers)
                .all(|(m, l)| m.len() == l.values.len());
        if !ok {
            return Err(Error::Congruence(
                "mask layout does not match parameter set".into(),
            ));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn is_congruent(&self, template: &ParameterSet) -> bool {
        self.layers.len() == template.layers.len()
            && self
                .layers
                .iter()
                .zip(&template.layers)
                .all(|(m, l)| m.len() == l.values.len())
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_kept(&self) -> usize {
        self.layers.iter().flatten().filter(|&&b| b).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.count_kept() as f64 / self.len() as f64
    }
}

pub fn check_rate(name: &str, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "{name} must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Draw one dropout mask covering every parameter of `template`, biases and
/// first/last layers included. Each entry is `u > fdr` with `u` uniform on
/// `[0, 1)`, so it survives with probability `1 - fdr`.
pub fn draw_mask(template: &ParameterSet, fdr: f64, stream: RngStream) -> Result<DropoutMask> {
    check_rate("fdr", fdr)?;
    let mut rng = stream.rng();
    let layers = template
        .layers
        .iter()
        .map(|l| {
            (0..l.values.len())
                .map(|_| rng.random::<f64>() > fdr)
                .collect()
        })
        .collect();
    Ok(DropoutMask { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use proptest::prelude::*;

    fn single(values: Vec<f64>) -> ParameterSet {
        let n = values.len();
        ParameterSet::new(vec![LayerTensor::new(
            "fc",
            LayerKind::Weight,
            vec![n],
            values,
        )
        .unwrap()])
        .unwrap()
    }

    fn wb(w: Vec<f64>, b: Vec<f64>) -> ParameterSet {
        let (nw, nb) = (w.len(), b.len());
        ParameterSet::new(vec![
            LayerTensor::new("fc", LayerKind::Weight, vec![nw], w).unwrap(),
            LayerTensor::new("fc", LayerKind::Bias, vec![nb], b).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn shape_must_match_value_count() {
        assert!(LayerTensor::new("a", LayerKind::Weight, vec![2, 2], vec![0.0; 3]).is_err());
        assert!(LayerTensor::new("a", LayerKind::Weight, vec![2, 0], vec![]).is_err());
        assert!(LayerTensor::new("a", LayerKind::Weight, vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn zeroed() {
        assert_eq!(
            single(vec![2.0, -1.0]).new_zeroed().flatten(),
            vec![0.0, 0.0]
        );

        let p = ParameterSet::new(vec![
            LayerTensor::new(
                "fc",
                LayerKind::Weight,
                vec![2, 2],
                vec![1.0, 2.0, 3.0, 4.0],
            )
            .unwrap(),
            LayerTensor::new("fc", LayerKind::Bias, vec![2], vec![5.0, 6.0]).unwrap(),
        ])
        .unwrap();
        let z = p.new_zeroed();
        assert!(z.is_congruent(&p));
        assert_eq!(z.layer(0).shape, vec![2, 2]);
        assert_eq!(z.layer(1).shape, vec![2]);
        assert!(z.flatten().iter().all(|&v| v == 0.0));
        assert!(z.new_zeroed().is_congruent(&p));
    }

    #[test]
    fn axpy_examples() {
        let r = single(vec![0.0, 0.0])
            .axpy(0.5, &single(vec![2.0, 4.0]))
            .unwrap();
        assert_eq!(r.flatten(), vec![1.0, 2.0]);
        let r = single(vec![1.0, 1.0])
            .axpy(0.0, &single(vec![9.0, 9.0]))
            .unwrap();
        assert_eq!(r.flatten(), vec![1.0, 1.0]);
        let r = single(vec![1.0, -1.0])
            .axpy(-1.0, &single(vec![1.0, -1.0]))
            .unwrap();
        assert_eq!(r.flatten(), vec![0.0, 0.0]);
    }

    #[test]
    fn axpy_rejects_mismatch_and_overflow() {
        let a = single(vec![0.0, 0.0]);
        assert!(matches!(
            a.axpy(1.0, &single(vec![1.0, 2.0, 3.0])),
            Err(Error::Congruence(_))
        ));
        assert!(matches!(
            a.axpy(1.0, &wb(vec![1.0, 2.0], vec![0.0])),
            Err(Error::Congruence(_))
        ));
        assert!(matches!(
            single(vec![f64::MAX]).axpy(f64::MAX, &single(vec![f64::MAX])),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(a.axpy(f64::NAN, &a), Err(Error::Numeric(_))));
    }

    #[test]
    fn distance_and_flatten() {
        let x = wb(vec![1.0, 2.0], vec![3.0]);
        assert_eq!(x.l2_distance(&x).unwrap(), 0.0);
        assert_eq!(x.flatten(), vec![1.0, 2.0, 3.0]);
        let d = single(vec![3.0, 0.0])
            .l2_distance(&single(vec![0.0, 4.0]))
            .unwrap();
        assert_eq!(d, 5.0);
        assert!(x.l2_distance(&single(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn checksum_sensitive_to_single_bit() {
        let a = single(vec![1.0, 2.0]);
        let b = single(vec![1.0, f64::from_bits(2.0f64.to_bits() + 1)]);
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum(), a.clone().checksum());
    }

    #[test]
    fn json_round_trip_and_file_checksum() {
        let p = wb(vec![0.1, -2.5e-7], vec![3.0]);
        assert_eq!(ParameterSet::from_json(&p.to_json().unwrap()).unwrap(), p);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        p.save(&path).unwrap();
        assert_eq!(ParameterSet::load(&path).unwrap(), p);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("3.0", "4.0")).unwrap();
        assert!(ParameterSet::load(&path).is_err());
    }

    #[test]
    fn mask_rate_bounds() {
        let p = single(vec![0.0; 4]);
        let s = RngStream::new(0, 0, 0, Purpose::Mask);
        assert!(matches!(draw_mask(&p, 1.0, s), Err(Error::Config(_))));
        assert!(matches!(draw_mask(&p, -0.1, s), Err(Error::Config(_))));
        assert!(draw_mask(&p, 0.999, s).is_ok());
    }

    #[test]
    fn mask_fdr_zero_keeps_everything() {
        let p = single(vec![0.0; 1_000_000]);
        let m = draw_mask(&p, 0.0, RngStream::new(5, 1, 2, Purpose::Mask)).unwrap();
        assert!(m.kept_fraction() >= 1.0 - 1e-9);
    }

    #[test]
    fn mask_rate_matches_fdr() {
        let p = single(vec![0.0; 1_000_000]);
        let m = draw_mask(&p, 0.3, RngStream::new(11, 0, 0, Purpose::Mask)).unwrap();
        let frac = m.kept_fraction();
        assert!((frac - 0.7).abs() <= 0.002, "{frac}");
    }

    #[test]
    fn mask_covers_biases_and_is_deterministic() {
        let p = wb(vec![0.0; 500], vec![0.0; 500]);
        let s = RngStream::new(3, 4, 5, Purpose::Mask);
        let a = draw_mask(&p, 0.5, s).unwrap();
        let b = draw_mask(&p, 0.5, s).unwrap();
        assert_eq!(a, b);
        assert!(a.is_congruent(&p));
        let bias_kept = a.layers()[1].iter().filter(|&&k| k).count();
        assert!(bias_kept > 0 && bias_kept < 500);
    }

    #[test]
    fn mask_mean_within_four_sigma() {
        let m = 20_000usize;
        let p = single(vec![0.0; m]);
        for (i, fdr) in [0.01, 0.1, 0.25, 0.3, 0.4, 0.5, 0.75, 0.9, 0.99]
            .into_iter()
            .enumerate()
        {
            for seed in 0..4u64 {
                let s = RngStream::new(seed, i as u64, 0, Purpose::Mask);
                let mask = draw_mask(&p, fdr, s).unwrap();
                let bound = 4.0 * (fdr * (1.0 - fdr) / m as f64).sqrt();
                assert!(
                    (mask.kept_fraction() - (1.0 - fdr)).abs() <= bound,
                    "fdr {fdr} seed {seed}"
                );
            }
        }
    }

    fn pair_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..32).prop_flat_map(|n| {
            (
                prop::collection::vec(-1e3f64..1e3, n),
                prop::collection::vec(-1e3f64..1e3, n),
                prop::collection::vec(-1e3f64..1e3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn axpy_is_linear_in_the_coefficient(
            (z, x, _) in pair_strategy(),
            a in -10.0f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let z = single(z);
            let x = single(x);
            let two_steps = z.axpy(a, &x).unwrap().axpy(b, &x).unwrap();
            let one_step = z.axpy(a + b, &x).unwrap();
            for (u, v) in two_steps.flatten().iter().zip(one_step.flatten()) {
                let scale = u.abs().max(v.abs()).max(1.0);
                prop_assert!((u - v).abs() <= 1e-12 * scale, "{u} vs {v}");
            }
        }

        #[test]
        fn distance_is_symmetric((a, b, _) in pair_strategy()) {
            let (a, b) = (single(a), single(b));
            prop_assert_eq!(a.l2_distance(&b).unwrap(), b.l2_distance(&a).unwrap());
        }
    }
}
