//! Named parameter storage and the frozen/adapter/head partition.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::hash::Fnv64;
use crate::tensor::{Element, TensorData};

/// Ordered map from parameter name to value. Iteration follows insertion
/// order, which keeps optimizer updates and checkpoint layout deterministic.
#[derive(Debug, Clone)]
pub struct ParamSet<E: Element> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<TensorData<E>>,
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), index: HashMap::new(), values: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: TensorData<E>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&TensorData<E>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorData<E>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn expect(&self, name: &str) -> &TensorData<E> {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData<E>)> {
        self.names.iter().map(move |n| (n.as_str(), &self.values[self.index[n]]))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Content hash over a subset of parameters, in sorted name order.
    /// Identical bytes in, identical hash out; used to assert that frozen
    /// parameters survive a training run untouched.
    pub fn checksum_of(&self, names: &BTreeSet<String>) -> u64 {
        let mut h = Fnv64::new();
        for name in names {
            let t = self.expect(name);
            h.update(name.as_bytes());
            let mut bytes = Vec::with_capacity(t.numel() * E::DTYPE.byte_width());
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            h.update(&bytes);
        }
        h.finish()
    }

    /// Shapes in insertion order, for counting without values.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.iter().map(|(n, v)| (n.to_string(), v.shape().to_vec())).collect()
    }
}

/// Disjoint split of all model parameters into frozen pretrained weights,
/// trainable adapter weights and the trainable task head.
#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub theta_p: BTreeSet<String>,
    pub theta_a: BTreeSet<String>,
    pub phi: BTreeSet<String>,
}

impl Partition {
    /// Checks the three sets are pairwise disjoint and jointly cover `names`.
    pub fn validate<'a>(&self, names: impl Iterator<Item = &'a str>) -> Result<()> {
        for (a, b, la, lb) in [
            (&self.theta_p, &self.theta_a, "theta_p", "theta_a"),
            (&self.theta_p, &self.phi, "theta_p", "phi"),
            (&self.theta_a, &self.phi, "theta_a", "phi"),
        ] {
            if let Some(n) = a.intersection(b).next() {
                return Err(Error::Partition(format!("{n:?} appears in both {la} and {lb}")));
            }
        }
        for n in names {
            if !self.theta_p.contains(n) && !self.theta_a.contains(n) && !self.phi.contains(n) {
                return Err(Error::Partition(format!("{n:?} not assigned to any set")));
            }
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.theta_a.contains(name) || self.phi.contains(name)
    }
}

/// Tuned-parameter counts for the encoder and head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCounts {
    pub theta_p: usize,
    pub theta_a: usize,
    pub phi: usize,
}

impl ParamCounts {
    /// Fraction of trainable encoder parameters; the head is excluded.
    pub fn tuned_fraction(&self) -> f64 {
        self.theta_a as f64 / (self.theta_p + self.theta_a) as f64
    }
}

/// Counts parameters per partition set from a shape listing.
pub fn count_parameters(shapes: &[(String, Vec<usize>)], partition: &Partition) -> Result<ParamCounts> {
    partition.validate(shapes.iter().map(|(n, _)| n.as_str()))?;
    let mut counts = ParamCounts { theta_p: 0, theta_a: 0, phi: 0 };
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        if partition.theta_p.contains(name) {
            counts.theta_p += n;
        } else if partition.theta_a.contains(name) {
            counts.theta_a += n;
        } else {
            counts.phi += n;
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overlapping_partition_is_rejected() {
        let p = Partition { theta_p: set(&["w"]), theta_a: set(&["w"]), phi: set(&[]) };
        assert!(matches!(p.validate(["w"].into_iter()), Err(Error::Partition(_))));
    }

    #[test]
    fn uncovered_name_is_rejected() {
        let p = Partition { theta_p: set(&["w"]), theta_a: set(&[]), phi: set(&[]) };
        assert!(p.validate(["w", "v"].into_iter()).is_err());
    }

    #[test]
    fn counting_and_fraction() {
        let shapes = vec![
            ("w".to_string(), vec![10, 10]),
            ("a".to_string(), vec![5]),
            ("h".to_string(), vec![3]),
        ];
        let p = Partition { theta_p: set(&["w"]), theta_a: set(&["a"]), phi: set(&["h"]) };
        let c = count_parameters(&shapes, &p).unwrap();
        assert_eq!((c.theta_p, c.theta_a, c.phi), (100, 5, 3));
        assert!((c.tuned_fraction() - 5.0 / 105.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_checksum_is_stable_and_sensitive() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("w", TensorData::full(vec![2, 2], 1.5));
        ps.insert("b", TensorData::zeros(vec![2]));
        let names = set(&["w", "b"]);
        let h1 = ps.checksum_of(&names);
        assert_eq!(h1, ps.checksum_of(&names));
        ps.get_mut("w").unwrap().data_mut()[0] = 1.5000001;
        assert_ne!(h1, ps.checksum_of(&names));
    }
}
