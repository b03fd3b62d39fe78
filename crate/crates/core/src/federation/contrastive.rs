//! Anchor/positive/negative sampling over exemplar pools.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::exemplar::ClassExemplar;
use crate::losses::info_nce;
use crate::model::Extractor;
use crate::numcore::{GradTape, Var};
use crate::prototype::embed_vectors;

pub const MAX_POSITIVES: usize = 4;
pub const MAX_NEGATIVES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Up to `anchors` triplets. Positives share the anchor's class (and, with
/// `cross_client`, come from other clients); negatives have another class.
/// Nothing from the anchor's own image is ever used.
pub fn sample_triplets<R: Rng + ?Sized>(
    pool: &[&ClassExemplar],
    anchors: usize,
    cross_client: bool,
    rng: &mut R,
) -> Vec<Triplet> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::new();
    for a in order {
        if out.len() == anchors {
            break;
        }
        let ea = pool[a];
        let same_image = |e: &ClassExemplar| e.client_id == ea.client_id && e.image_id == ea.image_id;
        let mut pos: Vec<usize> = (0..pool.len())
            .filter(|&i| {
                let e = pool[i];
                i != a && e.class_id == ea.class_id && !same_image(e) && (!cross_client || e.client_id != ea.client_id)
            })
            .collect();
        if pos.is_empty() {
            continue;
        }
        let mut neg: Vec<usize> =
            (0..pool.len()).filter(|&i| pool[i].class_id != ea.class_id && !same_image(pool[i])).collect();
        pos.partial_shuffle(rng, MAX_POSITIVES);
        pos.truncate(MAX_POSITIVES);
        neg.partial_shuffle(rng, MAX_NEGATIVES);
        neg.truncate(MAX_NEGATIVES);
        out.push(Triplet { anchor: a, positives: pos, negatives: neg });
    }
    out
}

/// Mean InfoNCE over `triplets`, embedding each distinct exemplar once.
/// Returns `None` for an empty triplet list.
pub fn contrastive_loss<'t>(
    tape: &'t GradTape,
    extractor: &Extractor,
    pool: &[&ClassExemplar],
    triplets: &[Triplet],
    tau: f64,
) -> Result<Option<Var<'t>>> {
    if triplets.is_empty() {
        return Ok(None);
    }
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    for t in triplets {
        for &i in std::iter::once(&t.anchor).chain(&t.positives).chain(&t.negatives) {
            let next = rows.len();
            rows.entry(i).or_insert(next);
        }
    }
    let mut members = vec![pool[0]; rows.len()];
    for (&i, &r) in &rows {
        members[r] = pool[i];
    }
    let emb = embed_vectors(tape, extractor, &members)?;
    let mut total: Option<Var<'t>> = None;
    for t in triplets {
        let a = emb.select_rows(&[rows[&t.anchor]])?;
        let p = emb.select_rows(&t.positives.iter().map(|i| rows[i]).collect::<Vec<_>>())?;
        let n = if t.negatives.is_empty() {
            None
        } else {
            Some(emb.select_rows(&t.negatives.iter().map(|i| rows[i]).collect::<Vec<_>>())?)
        };
        let l = info_nce(a, p, n, tau)?;
        total = Some(match total {
            Some(acc) => acc.add(l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::contract("no triplet produced a loss"))?;
    Ok(Some(total.scale(1.0 / triplets.len() as f64)?))
}
