//! Whole-federation snapshots, in memory and on disk.
//!
//! On disk a checkpoint is a directory holding `manifest.json`, optional
//! `prototypes.json`, and one `<name>.json` shape manifest plus `<name>.bin`
//! little-endian f64 payload per parameter set.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalMode;
use crate::model::{
    deserialize_params, hash_params, serialize_params, Branch, Discriminator, ParamBlob, ParamEntry, ParamSet,
    TwoBranchModel, WeightGenerator,
};
use crate::numcore::Tensor;
use crate::prototype::PrototypeSet;
use crate::seed;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub round: usize,
    pub metric: f64,
    pub server_global: Branch,
    pub generator: WeightGenerator,
    pub prototypes: Option<PrototypeSet>,
    pub client_ids: Vec<u32>,
    pub clients: Vec<(TwoBranchModel, Discriminator, WeightGenerator)>,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub round: usize,
    pub metric: f64,
    pub params_hash: String,
    pub eval_mode: EvalMode,
    pub num_classes: usize,
    pub channels: usize,
    pub client_ids: Vec<u32>,
    pub has_prototypes: bool,
}

/// Hash over the server branch, weight generator and every client's branches
/// and discriminator, in client order.
pub(crate) fn federation_hash<'a>(
    server_global: &Branch,
    generator: &WeightGenerator,
    clients: impl Iterator<Item = (&'a TwoBranchModel, &'a Discriminator)>,
) -> String {
    let mut sets: Vec<&dyn ParamSet> = vec![server_global, generator];
    for (m, d) in clients {
        sets.push(&m.global);
        sets.push(&m.local);
        sets.push(d);
    }
    hash_params(&sets)
}

fn write_blob(dir: &Path, stem: &str, blob: &ParamBlob) -> Result<()> {
    fs::write(dir.join(format!("{stem}.json")), &blob.manifest)?;
    fs::write(dir.join(format!("{stem}.bin")), &blob.payload)?;
    Ok(())
}

fn read_blob(dir: &Path, stem: &str) -> Result<ParamBlob> {
    let manifest = fs::read_to_string(dir.join(format!("{stem}.json")))?;
    let payload = fs::read(dir.join(format!("{stem}.bin")))?;
    Ok(ParamBlob { manifest, payload })
}

fn tensor_blob(t: &Tensor) -> ParamBlob {
    let manifest = serde_json::to_string(&[ParamEntry { name: "weight".into(), shape: t.shape().to_vec() }])
        .expect("manifest serializes");
    ParamBlob { manifest, payload: t.data().iter().flat_map(|v| v.to_le_bytes()).collect() }
}

fn blob_tensor(blob: &ParamBlob) -> Result<Tensor> {
    let entries = blob.entries()?;
    let [e] = entries.as_slice() else {
        return Err(Error::Format(format!("expected one tensor, manifest lists {}", entries.len())));
    };
    let mut t = Tensor::new(e.shape.clone(), blob.values()?).map_err(|e| Error::Format(e.to_string()))?;
    t.set_requires_grad(false);
    Ok(t)
}

impl Checkpoint {
    pub fn manifest(&self, eval_mode: EvalMode) -> CheckpointManifest {
        CheckpointManifest {
            round: self.round,
            metric: self.metric,
            params_hash: self.hash.clone(),
            eval_mode,
            num_classes: self.server_global.head.classes(),
            channels: self.server_global.extractor.channels(),
            client_ids: self.client_ids.clone(),
            has_prototypes: self.prototypes.is_some(),
        }
    }

    pub fn save(&self, dir: &Path, eval_mode: EvalMode) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_blob(dir, "server_global", &serialize_params(&self.server_global))?;
        write_blob(dir, "server_generator", &serialize_params(&self.generator))?;
        for (id, (m, d, g)) in self.client_ids.iter().zip(&self.clients) {
            write_blob(dir, &format!("client{id}_global"), &serialize_params(&m.global))?;
            write_blob(dir, &format!("client{id}_local"), &serialize_params(&m.local))?;
            write_blob(dir, &format!("client{id}_disc"), &serialize_params(d))?;
            write_blob(dir, &format!("client{id}_generator"), &serialize_params(g))?;
            if let Some(k) = &m.prototype_conv {
                write_blob(dir, &format!("client{id}_prototype_conv"), &tensor_blob(k))?;
            }
        }
        if let Some(p) = &self.prototypes {
            fs::write(dir.join("prototypes.json"), serde_json::to_string_pretty(p)?)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest(eval_mode))?)?;
        Ok(())
    }
}

/// Loads a checkpoint directory and checks its parameter hash.
pub fn read_checkpoint(dir: &Path) -> Result<(Checkpoint, CheckpointManifest)> {
    let m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    // shapes come from the manifest; the values are overwritten below
    let mut rng = seed::rng(&[0]);
    let mut server_global = Branch::new(m.channels, m.num_classes, &mut rng);
    deserialize_params(&mut server_global, &read_blob(dir, "server_global")?)?;
    let mut generator = WeightGenerator::new(m.channels, &mut rng);
    deserialize_params(&mut generator, &read_blob(dir, "server_generator")?)?;
    let mut clients = Vec::new();
    for id in &m.client_ids {
        let mut model = TwoBranchModel::new(m.channels, m.num_classes, &mut rng);
        deserialize_params(&mut model.global, &read_blob(dir, &format!("client{id}_global"))?)?;
        deserialize_params(&mut model.local, &read_blob(dir, &format!("client{id}_local"))?)?;
        let conv = format!("client{id}_prototype_conv");
        if dir.join(format!("{conv}.bin")).exists() {
            model.prototype_conv = Some(blob_tensor(&read_blob(dir, &conv)?)?);
        }
        let mut disc = Discriminator::new(m.num_classes, &mut rng);
        deserialize_params(&mut disc, &read_blob(dir, &format!("client{id}_disc"))?)?;
        let mut g = WeightGenerator::new(m.channels, &mut rng);
        deserialize_params(&mut g, &read_blob(dir, &format!("client{id}_generator"))?)?;
        clients.push((model, disc, g));
    }
    let prototypes = if m.has_prototypes {
        Some(serde_json::from_str(&fs::read_to_string(dir.join("prototypes.json"))?)?)
    } else {
        None
    };
    let hash = federation_hash(&server_global, &generator, clients.iter().map(|(m, d, _)| (m, d)));
    if hash != m.params_hash {
        return Err(Error::Format(format!("checkpoint {} hash mismatch", dir.display())));
    }
    let ck = Checkpoint {
        round: m.round,
        metric: m.metric,
        server_global,
        generator,
        prototypes,
        client_ids: m.client_ids.clone(),
        clients,
        hash,
    };
    Ok((ck, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkpoint() -> Checkpoint {
        let mut rng = seed::rng(&[42]);
        let (k, c) = (4, 3);
        let server_global = Branch::new(k, c, &mut rng);
        let generator = WeightGenerator::new(k, &mut rng);
        let clients: Vec<_> = (0..2)
            .map(|_| {
                let mut m = TwoBranchModel::new(k, c, &mut rng);
                m.prototype_conv = Some(Tensor::randn(&[c, k, 1, 1], 1.0, &mut rng));
                (m, Discriminator::new(c, &mut rng), WeightGenerator::new(k, &mut rng))
            })
            .collect();
        let hash = federation_hash(&server_global, &generator, clients.iter().map(|(m, d, _)| (m, d)));
        Checkpoint { round: 7, metric: 0.5, server_global, generator, prototypes: None, client_ids: vec![0, 3], clients, hash }
    }

    #[test]
    fn save_and_read_round_trip() {
        let ck = checkpoint();
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path(), EvalMode::Fused).unwrap();
        let (back, m) = read_checkpoint(dir.path()).unwrap();
        assert_eq!(m, ck.manifest(EvalMode::Fused));
        assert_eq!(back.hash, ck.hash);
        assert_eq!(back.client_ids, vec![0, 3]);
        for ((a, _, ga), (b, _, gb)) in ck.clients.iter().zip(&back.clients) {
            assert_eq!(serialize_params(&a.local), serialize_params(&b.local));
            assert_eq!(serialize_params(ga), serialize_params(gb));
            assert_eq!(a.prototype_conv.as_ref().unwrap().data(), b.prototype_conv.as_ref().unwrap().data());
        }
    }

    #[test]
    fn tampered_blob_fails_the_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        checkpoint().save(dir.path(), EvalMode::Fused).unwrap();
        let bin = dir.path().join("client3_local.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(read_checkpoint(dir.path()), Err(Error::Format(_))));
    }
}
