//! Closed-form communication cost of a run, from architecture sizes and
//! exemplar counts alone.

use std::collections::BTreeSet;

use segfed::exemplar::{stratum_size, HEADER_BYTES};
use segfed::federation::Simulation;
use segfed::model::{manifest_of, ParamSet};
use segfed::synthdata::FederatedData;

/// Exemplars the protocol uploads: per client and class, `ceil(ratio * n)` of
/// the `n` train images containing that class.
pub fn expected_exemplars(d: &FederatedData, include_background: bool, ratio: f64) -> usize {
    let c = d.num_classes;
    d.clients
        .iter()
        .map(|cl| {
            let mut per_class = vec![0usize; c];
            for im in &cl.train {
                let present: BTreeSet<u8> = im.mask.data.iter().copied().collect();
                for k in present {
                    if k != 0 || include_background {
                        per_class[k as usize] += 1;
                    }
                }
            }
            per_class.iter().map(|&n| stratum_size(n, ratio)).sum::<usize>()
        })
        .sum()
}

/// `(extractor, head, generator)` parameter counts for `k` channels and `c` classes.
pub fn params_numel(k: usize, c: usize) -> (usize, usize, usize) {
    let extractor = (3 * 9 * k + k) + 2 * (k * 9 * k + k);
    let head = c * k + c;
    let generator = (k * 2 * k + 2 * k) + (2 * k * k + k);
    (extractor, head, generator)
}

pub fn manifest_len(set: &dyn ParamSet) -> usize {
    serde_json::to_string(&manifest_of(set)).unwrap().len()
}

fn prototype_bytes(classes: &[u8], k: usize) -> usize {
    let entries: Vec<String> = classes.iter().map(|c| format!("{{\"class_id\":{c},\"p\":{k}}}")).collect();
    format!("[{}]", entries.join(",")).len() + 8 * classes.len() * k
}

/// Compares every ledger row with the closed form. `exemplars` is the count
/// from [`expected_exemplars`] (0 when nothing is uploaded), `image_hw` the
/// image height times width, and `proto_classes` the classes that own a
/// prototype when prototypes are on.
pub fn check_ledger(
    sim: &Simulation,
    exemplars: usize,
    image_hw: usize,
    proto_classes: Option<&[u8]>,
) -> Result<(), String> {
    let k = sim.cfg.model.channels;
    let c = sim.num_classes;
    let (ext, head, gen) = params_numel(k, c);
    let global = &sim.server.global;
    let branch = manifest_len(global) + 8 * (ext + head);
    let down_each = match proto_classes {
        Some(classes) => {
            manifest_len(&global.head) + 8 * head + prototype_bytes(classes, k) + manifest_len(&sim.server.generator) + 8 * gen
        }
        None => branch,
    };
    let r0 = &sim.ledger[0];
    let up0 = (exemplars * (HEADER_BYTES + 8 * 3 * image_hw)) as u64;
    if r0.exemplars_uploaded != exemplars || r0.bytes_up != up0 || r0.bytes_down != 0 {
        return Err(format!(
            "round 0: {} exemplars / {} bytes up / {} down, expected {exemplars} / {up0} / 0",
            r0.exemplars_uploaded, r0.bytes_up, r0.bytes_down
        ));
    }
    for r in &sim.ledger[1..] {
        let up = (r.succeeded.len() * branch) as u64;
        let down = (r.selected.len() * down_each) as u64;
        if r.exemplars_uploaded != 0 || r.bytes_up != up || r.bytes_down != down {
            return Err(format!(
                "round {}: up {} down {}, expected {up} {down}",
                r.round, r.bytes_up, r.bytes_down
            ));
        }
    }
    Ok(())
}
