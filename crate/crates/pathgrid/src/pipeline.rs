//! Batch decoding and evaluation over record files.

use pathgrid_core::corpus::{CorpusRecord, SplitTag};
use pathgrid_core::decoder::{decode, DecodeConfig};
use pathgrid_core::evaluator::{EvalAccumulator, EvalReport};
use pathgrid_core::model::PathModel;
use rayon::prelude::*;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Decode every record from its own start cell and context. The outputs keep
/// the record metadata, so predictions and gold share one schema.
pub fn decode_records(model: &PathModel, records: &[CorpusRecord], cfg: &DecodeConfig) -> Result<Vec<CorpusRecord>> {
    records
        .par_iter()
        .map(|r| {
            let d = decode(model, r.trajectory.start(), &r.context, &r.workspace, cfg)?;
            Ok(CorpusRecord {
                trajectory: d.trajectory,
                ..r.clone()
            })
        })
        .collect()
}

/// Pair each prediction with the gold record of the same seed. Gold may hold
/// more records than were decoded; every prediction needs a partner.
pub fn evaluate_records(pred: &[CorpusRecord], gold: &[CorpusRecord]) -> Result<EvalReport> {
    let mut by_seed = BTreeMap::new();
    for (i, g) in gold.iter().enumerate() {
        if by_seed.insert(g.seed, g).is_some() {
            return Err(Error::Mismatch(format!("gold record {} repeats seed {}", i + 1, g.seed)));
        }
    }
    let mut acc = EvalAccumulator::new();
    for (i, p) in pred.iter().enumerate() {
        let g = by_seed
            .get(&p.seed)
            .ok_or_else(|| Error::Mismatch(format!("prediction {} has seed {} with no gold record", i + 1, p.seed)))?;
        if p.workspace != g.workspace {
            return Err(Error::Mismatch(format!("prediction {} and its gold record differ in workspace", i + 1)));
        }
        acc.add(p.trajectory.points(), g.trajectory.points(), &g.workspace);
    }
    Ok(acc.report())
}

pub fn with_split(records: &[CorpusRecord], tag: SplitTag) -> Vec<CorpusRecord> {
    records.iter().filter(|r| r.split_tag == tag).cloned().collect()
}
