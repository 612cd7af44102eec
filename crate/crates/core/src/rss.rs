//! Re-randomise and shuffle service. Holds no keys and keeps nothing between
//! jobs.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::SchemeParams;
use crate::error::{Error, ErrorCode, Result};
use crate::model::{EncryptedRecord, Party, RecordId};

fn err(code: ErrorCode, detail: impl Into<String>) -> Error {
    Error::protocol(Party::Rss, code, detail)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffleJob {
    /// Searched records in id-list order.
    pub ercds: Vec<(RecordId, EncryptedRecord)>,
    pub il_prime: Vec<RecordId>,
    pub nn: Vec<(RecordId, Vec<u8>)>,
}

/// Moves `ercds[i]` to position `il_prime[i]` and XORs it with the mask for
/// that position. The output is sorted by id so its order carries nothing
/// about the permutation.
pub fn shuffle(job: ShuffleJob, params: &SchemeParams) -> Result<Vec<(RecordId, EncryptedRecord)>> {
    let n = job.il_prime.len();
    if job.ercds.len() != n || job.nn.len() != n {
        return Err(err(
            ErrorCode::SizeMismatch,
            format!("{} records, {} positions, {} masks", job.ercds.len(), n, job.nn.len()),
        ));
    }
    let targets: BTreeSet<RecordId> = job.il_prime.iter().copied().collect();
    let sources: BTreeSet<RecordId> = job.ercds.iter().map(|(id, _)| *id).collect();
    let masks: BTreeMap<RecordId, Vec<u8>> = job.nn.into_iter().collect();
    if targets.len() != n || sources != targets || masks.len() != n || !masks.keys().eq(targets.iter()) {
        return Err(err(ErrorCode::Malformed, "record, position and mask id sets differ"));
    }
    let len = params.record_len();
    if job.ercds.iter().any(|(_, r)| r.as_bytes().len() != len) || masks.values().any(|m| m.len() != len) {
        return Err(err(ErrorCode::Malformed, "record or mask has wrong length"));
    }

    let mut out: Vec<(RecordId, EncryptedRecord)> = job
        .ercds
        .into_iter()
        .zip(&job.il_prime)
        .map(|((_, mut rec), dst)| {
            rec.xor_with(&masks[dst]);
            (*dst, rec)
        })
        .collect();
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}
