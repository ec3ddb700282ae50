//! One low-rank adaptation per partition subset.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{
    self, base_model_bytes, train_adaptation, BaseModel, LoraConfig, LowRankAdaptation, TrainConfig,
};
use crate::partition::Partition;
use crate::seed;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Stream index separating factor initialization from the shuffle order.
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Partition method tag, `"single"` for the one-adaptation baseline.
    pub method: String,
    /// Seed used for adaptation `k`.
    pub seeds: Vec<u64>,
    /// Digest of the training settings, identical for every method trained
    /// with the same settings.
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationSet {
    base: BaseModel,
    adaptations: Vec<LowRankAdaptation>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    k: usize,
    rank: usize,
    alpha: f64,
    base_digest: String,
    provenance: Provenance,
    files: Vec<String>,
}

impl AdaptationSet {
    pub fn new(
        base: BaseModel,
        adaptations: Vec<LowRankAdaptation>,
        provenance: Provenance,
    ) -> Result<Self> {
        let first = adaptations
            .first()
            .ok_or_else(|| Error::Config("an adaptation set needs K >= 1".into()))?;
        for (k, a) in adaptations.iter().enumerate() {
            if a.rank() != first.rank() {
                return Err(Error::Input(format!(
                    "adaptation {k} has rank {}, expected {}",
                    a.rank(),
                    first.rank()
                )));
            }
            LowRankAdaptation::from_parts(&base, a.rank(), a.alpha(), a.factors().clone())
                .map_err(|e| e.context(format!("adaptation {k}")))?;
        }
        if provenance.seeds.len() != adaptations.len() {
            return Err(Error::Input(format!(
                "provenance lists {} seeds for {} adaptations",
                provenance.seeds.len(),
                adaptations.len()
            )));
        }
        Ok(AdaptationSet {
            base,
            adaptations,
            provenance,
        })
    }

    pub fn k(&self) -> usize {
        self.adaptations.len()
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    pub fn adaptations(&self) -> &[LowRankAdaptation] {
        &self.adaptations
    }

    pub fn adaptation(&self, k: usize) -> &LowRankAdaptation {
        &self.adaptations[k]
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Writes `adapt_k.bin` for every adaptation and the manifest.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(self.k());
        for (k, a) in self.adaptations.iter().enumerate() {
            let name = format!("adapt_{k}.bin");
            model::write_adaptation(&dir.join(&name), a)?;
            files.push(name);
        }
        let first = &self.adaptations[0];
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            k: self.k(),
            rank: first.rank(),
            alpha: first.alpha(),
            base_digest: digest_bytes(&base_model_bytes(&self.base)),
            provenance: self.provenance.clone(),
            files,
        };
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path, base: BaseModel) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |message: String| Error::Version {
            path: path.clone(),
            message,
        };
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| bad(format!("unreadable manifest: {e}")))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(bad(format!(
                "manifest version {}, expected {MANIFEST_VERSION}",
                manifest.format_version
            )));
        }
        if manifest.base_digest != digest_bytes(&base_model_bytes(&base)) {
            return Err(bad(
                "adaptations were trained on a different base model".into()
            ));
        }
        if manifest.files.len() != manifest.k {
            return Err(bad(format!(
                "manifest lists {} files for K = {}",
                manifest.files.len(),
                manifest.k
            )));
        }
        let adaptations = manifest
            .files
            .iter()
            .map(|f| model::read_adaptation(&dir.join(f), &base))
            .collect::<Result<Vec<_>>>()?;
        AdaptationSet::new(base, adaptations, manifest.provenance)
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of any serializable settings, via their canonical JSON form.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    digest_bytes(
        serde_json::to_string(value)
            .expect("config serializes")
            .as_bytes(),
    )
}

#[derive(Serialize)]
struct TrainingSettings<'a> {
    train: &'a TrainConfig,
    lora: &'a LoraConfig,
    seed: u64,
}

/// Trains adaptation `k` on subset `k` only, with seed `seed + k`. The
/// `seed` field of `config` is ignored in favor of the per-subset seed.
pub fn train_adaptations(
    base: &BaseModel,
    corpus: &Corpus,
    partition: &Partition,
    config: &TrainConfig,
    lora: &LoraConfig,
    seed_value: u64,
) -> Result<AdaptationSet> {
    if partition.len() != corpus.len() {
        return Err(Error::Size(format!(
            "partition covers {} examples, corpus has {}",
            partition.len(),
            corpus.len()
        )));
    }
    config.validate()?;
    let subsets = partition.subsets();
    let empty: Vec<String> = subsets
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_empty())
        .map(|(k, _)| k.to_string())
        .collect();
    if !empty.is_empty() {
        return Err(Error::Config(format!(
            "partition {:?} leaves subsets {} empty",
            partition.method(),
            empty.join(", ")
        )));
    }
    let seeds: Vec<u64> = (0..partition.k() as u64)
        .map(|k| seed_value.wrapping_add(k))
        .collect();
    let adaptations = subsets
        .par_iter()
        .zip(&seeds)
        .enumerate()
        .map(|(k, (members, &s))| {
            let data = corpus.subset(members);
            let init = LowRankAdaptation::init(base, lora, seed::derive(s, &[INIT_STREAM]))?;
            let cfg = TrainConfig {
                seed: s,
                ..config.clone()
            };
            let out = train_adaptation(base, &init, &data, &cfg)
                .map_err(|e| e.context(format!("subset {k}")))?;
            log::info!(
                "adaptation {k}: {} examples, loss {:.4} -> {:.4}",
                data.len(),
                out.initial_loss,
                out.final_loss
            );
            Ok(out.trained)
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance = Provenance {
        method: partition.method().to_string(),
        seeds,
        config_digest: config_digest(&TrainingSettings {
            train: config,
            lora,
            seed: seed_value,
        }),
    };
    AdaptationSet::new(base.clone(), adaptations, provenance)
}

/// One adaptation over the whole corpus.
pub fn train_single(
    base: &BaseModel,
    corpus: &Corpus,
    config: &TrainConfig,
    lora: &LoraConfig,
    seed_value: u64,
) -> Result<AdaptationSet> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot train on an empty corpus".into()));
    }
    train_adaptations(
        base,
        corpus,
        &Partition::single(corpus.len()),
        config,
        lora,
        seed_value,
    )
}

/// `K` untrained adaptations (zero update), mainly for tests and baselines.
pub fn zero_update_set(
    base: &BaseModel,
    k: usize,
    lora: &LoraConfig,
    seed_value: u64,
) -> Result<AdaptationSet> {
    let seeds: Vec<u64> = (0..k as u64).map(|i| seed_value.wrapping_add(i)).collect();
    let adaptations = seeds
        .iter()
        .map(|&s| LowRankAdaptation::init(base, lora, seed::derive(s, &[INIT_STREAM])))
        .collect::<Result<Vec<_>>>()?;
    let provenance = Provenance {
        method: "zero".into(),
        seeds,
        config_digest: config_digest(lora),
    };
    AdaptationSet::new(base.clone(), adaptations, provenance)
}
