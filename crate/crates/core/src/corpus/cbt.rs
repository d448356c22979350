//! Children's Book Test plain-text layout.
//!
//! Each sample is 21 numbered lines followed by a blank line. Lines 1-20 are
//! the document; line 21 is `21 <query>\t<answer>\t\t<c1|c2|...>` with the
//! blank written as `XXXXX`.

use super::{dedup_candidates, Casing, ClozeSample, DatasetSplit, PLACEHOLDER};
use crate::error::{DgrError, Result};

pub const CBT_MARKER: &str = "XXXXX";
pub const CBT_DOC_LINES: usize = 20;
pub const CBT_CANDIDATES: usize = 10;

fn parse_err(sample: usize, reason: impl Into<String>) -> DgrError {
    DgrError::Parse {
        sample,
        reason: reason.into(),
    }
}

/// Strips the leading line number, checking it equals `expected`.
fn strip_number(line: &str, expected: usize, sample: usize) -> Result<&str> {
    let (num, rest) = line.split_once(' ').unwrap_or((line, ""));
    match num.parse::<usize>() {
        Ok(n) if n == expected => Ok(rest),
        _ => Err(parse_err(
            sample,
            format!("expected line number {expected}, found {num:?}"),
        )),
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_string)
}

fn parse_block(lines: &[&str], ordinal: usize, name: &str, casing: Casing) -> Result<ClozeSample> {
    if lines.len() != CBT_DOC_LINES + 1 {
        return Err(parse_err(
            ordinal,
            format!("expected {} lines, found {}", CBT_DOC_LINES + 1, lines.len()),
        ));
    }
    let mut document = Vec::new();
    for (i, line) in lines[..CBT_DOC_LINES].iter().enumerate() {
        document.extend(tokens(strip_number(line, i + 1, ordinal)?));
    }
    let last = strip_number(lines[CBT_DOC_LINES], CBT_DOC_LINES + 1, ordinal)?;
    let fields: Vec<&str> = last.split('\t').filter(|f| !f.trim().is_empty()).collect();
    let [query, answer, cands] = fields[..] else {
        return Err(parse_err(
            ordinal,
            format!(
                "query line needs query, answer and candidates fields, found {}",
                fields.len()
            ),
        ));
    };
    let query: Vec<String> = tokens(query)
        .map(|t| if t == CBT_MARKER { PLACEHOLDER.to_string() } else { t })
        .collect();
    if !query.iter().any(|t| t == PLACEHOLDER) {
        return Err(parse_err(ordinal, format!("query has no {CBT_MARKER} blank")));
    }
    let raw: Vec<String> = cands.split('|').map(|c| c.trim().to_string()).collect();
    if raw.len() != CBT_CANDIDATES {
        return Err(parse_err(
            ordinal,
            format!("expected {CBT_CANDIDATES} candidates, found {}", raw.len()),
        ));
    }
    let candidates = dedup_candidates(raw, &format!("{name} sample {ordinal}"));
    let sample = ClozeSample::new(
        format!("{name}-{ordinal}"),
        document,
        query,
        candidates,
        Some(answer.trim().to_string()),
    )
    .and_then(|s| s.with_casing(casing))
    .map_err(|reason| parse_err(ordinal, reason))?;
    Ok(sample)
}

/// Parses a CBT split file. Sample ordinals in errors are 1-based.
pub fn parse_cbt(text: &str, name: &str, casing: Casing) -> Result<DatasetSplit> {
    let mut samples = Vec::new();
    let mut block: Vec<&str> = Vec::new();
    let flush = |block: &mut Vec<&str>, samples: &mut Vec<ClozeSample>| -> Result<()> {
        if !block.is_empty() {
            let ordinal = samples.len() + 1;
            samples.push(parse_block(block, ordinal, name, casing)?);
            block.clear();
        }
        Ok(())
    };
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut block, &mut samples)?;
        } else {
            block.push(line);
        }
    }
    flush(&mut block, &mut samples)?;
    if samples.is_empty() {
        log::warn!("{name}: no samples found");
    } else {
        log::info!("{name}: parsed {} samples", samples.len());
    }
    Ok(DatasetSplit::new(name, samples))
}
