//! Experimental protocols: which normals train which model, and which test
//! sets each model is scored on.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Result, SirError};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    /// One normal per domain, pooled into one training set for one model.
    OneShotUniversal,
    /// Every normal of every domain, one model.
    FullShotUniversal,
    /// `k` normals per domain, one model.
    KShotUniversal { k: usize },
    /// One normal per domain, one model per domain.
    OneShotSpecialized,
    /// All normals of a domain, one model per domain.
    FullShotSpecialized,
}

impl Protocol {
    pub fn is_universal(self) -> bool {
        matches!(
            self,
            Protocol::OneShotUniversal | Protocol::FullShotUniversal | Protocol::KShotUniversal { .. }
        )
    }

    /// Normals drawn per domain, `None` meaning all of them.
    fn shots(self) -> Option<usize> {
        match self {
            Protocol::OneShotUniversal | Protocol::OneShotSpecialized => Some(1),
            Protocol::KShotUniversal { k } => Some(k),
            Protocol::FullShotUniversal | Protocol::FullShotSpecialized => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            Protocol::OneShotUniversal => "one_shot_universal".into(),
            Protocol::FullShotUniversal => "full_shot_universal".into(),
            Protocol::KShotUniversal { k } => format!("{k}_shot_universal"),
            Protocol::OneShotSpecialized => "one_shot_specialized".into(),
            Protocol::FullShotSpecialized => "full_shot_specialized".into(),
        }
    }
}

/// A training image reference (resolved path).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub domain: String,
    pub path: PathBuf,
}

/// Resolved test lists of one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainTest {
    pub domain: String,
    pub normal: Vec<PathBuf>,
    pub anomalous: Vec<PathBuf>,
}

/// One model's worth of work: its training set and the test sets it is
/// evaluated on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSplit {
    /// `"universal"` or the domain name of a specialized model.
    pub name: String,
    pub train: Vec<SampleRef>,
    pub tests: Vec<DomainTest>,
}

fn select(m: &DatasetManifest, shots: Option<usize>, rng: &mut impl rand::Rng) -> Result<Vec<SampleRef>> {
    if m.train_normal.is_empty() {
        return Err(SirError::Config(format!("domain {}: no training normals", m.domain)));
    }
    let mut paths = m.train_normal.clone();
    paths.sort();
    let chosen = match shots {
        None => paths,
        Some(k) => {
            if k > paths.len() {
                return Err(SirError::Config(format!(
                    "domain {}: {k} shots requested but only {} training normals",
                    m.domain,
                    paths.len()
                )));
            }
            paths.shuffle(rng);
            paths.truncate(k);
            paths
        }
    };
    Ok(chosen
        .into_iter()
        .map(|p| SampleRef {
            domain: m.domain.clone(),
            path: m.resolve(&p),
        })
        .collect())
}

fn test_of(m: &DatasetManifest) -> DomainTest {
    DomainTest {
        domain: m.domain.clone(),
        normal: m.test_normal.iter().map(|p| m.resolve(p)).collect(),
        anomalous: m.test_anomalous.iter().map(|p| m.resolve(p)).collect(),
    }
}

/// Assembles the training and test sets of a protocol.
///
/// Few-shot selection sorts each domain's training normals, shuffles them
/// with the seed's selection stream (domains in manifest order) and keeps
/// the first `k`.
pub fn build_protocol(manifests: &[DatasetManifest], protocol: Protocol, seed: u64) -> Result<Vec<ProtocolSplit>> {
    if manifests.is_empty() {
        return Err(SirError::Config("protocol needs at least one manifest".into()));
    }
    let mut rng = rng::stream(seed, rng::SELECTION);
    let mut per_domain = Vec::with_capacity(manifests.len());
    for m in manifests {
        m.validate()?;
        per_domain.push(select(m, protocol.shots(), &mut rng)?);
    }
    let splits = if protocol.is_universal() {
        vec![ProtocolSplit {
            name: "universal".into(),
            train: per_domain.into_iter().flatten().collect(),
            tests: manifests.iter().map(test_of).collect(),
        }]
    } else {
        manifests
            .iter()
            .zip(per_domain)
            .map(|(m, train)| ProtocolSplit {
                name: m.domain.clone(),
                train,
                tests: vec![test_of(m)],
            })
            .collect()
    };
    for split in &splits {
        for t in &split.tests {
            if split.train.iter().any(|s| t.anomalous.contains(&s.path)) {
                return Err(SirError::Config(format!(
                    "split {}: an anomalous test image is in the training set",
                    split.name
                )));
            }
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(domain: &str, n_train: usize) -> DatasetManifest {
        DatasetManifest {
            domain: domain.into(),
            train_normal: (0..n_train).map(|i| format!("{domain}/train_{i:02}.pgm").into()).collect(),
            test_normal: vec![format!("{domain}/tn.pgm").into()],
            test_anomalous: vec![format!("{domain}/ta.pgm").into()],
            base_dir: PathBuf::new(),
        }
    }

    #[test]
    fn one_shot_universal_pools_one_per_domain() {
        let ms: Vec<_> = (0..9).map(|i| manifest(&format!("d{i}"), 20)).collect();
        let splits = build_protocol(&ms, Protocol::OneShotUniversal, 3).unwrap();
        assert_eq!(splits.len(), 1);
        assert_eq!(splits[0].train.len(), 9);
        assert_eq!(splits[0].tests.len(), 9);
    }

    #[test]
    fn full_shot_specialized_takes_everything() {
        let ms = vec![manifest("a", 12)];
        let splits = build_protocol(&ms, Protocol::FullShotSpecialized, 3).unwrap();
        assert_eq!(splits.len(), 1);
        assert_eq!(splits[0].train.len(), 12);
        assert_eq!(splits[0].name, "a");
    }

    #[test]
    fn selection_is_seeded() {
        let ms: Vec<_> = (0..3).map(|i| manifest(&format!("d{i}"), 30)).collect();
        for p in [Protocol::OneShotUniversal, Protocol::KShotUniversal { k: 5 }, Protocol::OneShotSpecialized] {
            assert_eq!(build_protocol(&ms, p, 11).unwrap(), build_protocol(&ms, p, 11).unwrap());
        }
        let a = build_protocol(&ms, Protocol::KShotUniversal { k: 5 }, 11).unwrap();
        let b = build_protocol(&ms, Protocol::KShotUniversal { k: 5 }, 12).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn selection_ignores_manifest_listing_order() {
        let mut m = manifest("a", 10);
        let a = build_protocol(&[m.clone()], Protocol::OneShotUniversal, 5).unwrap();
        m.train_normal.reverse();
        let b = build_protocol(&[m], Protocol::OneShotUniversal, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_training_list_names_the_domain() {
        let ms = vec![manifest("a", 2), manifest("lonely", 0)];
        match build_protocol(&ms, Protocol::OneShotUniversal, 0) {
            Err(SirError::Config(msg)) => assert!(msg.contains("lonely")),
            other => panic!("{other:?}"),
        }
    }
}
