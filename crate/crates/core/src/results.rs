//! Results CSV: one row per seed × round × worker × split × output.
//!
//! Columns, in order: `seed,round,worker,split,output_index,bfr,kappa,global_stable,flag`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ranksum_test, RoundRecord, Split};

pub const HEADER: [&str; 9] = [
    "seed",
    "round",
    "worker",
    "split",
    "output_index",
    "bfr",
    "kappa",
    "global_stable",
    "flag",
];

fn flag_of(rec: &RoundRecord, worker: usize) -> String {
    let w = &rec.workers[worker];
    let mut flags = Vec::new();
    if rec.alignment_failure.is_some() {
        flags.push("alignment_failed");
    }
    if w.overflow {
        flags.push("overflow");
    }
    if w.ill_conditioned {
        flags.push("ill_conditioned");
    }
    if w.stalled {
        flags.push("stalled");
    }
    if flags.is_empty() {
        "ok".into()
    } else {
        flags.join("|")
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Appends the rows of one seed's records.
pub fn write_rows<W: Write>(wtr: &mut csv::Writer<W>, seed: u64, records: &[RoundRecord]) -> Result<()> {
    for rec in records {
        let stable = rec.global_stable.map(|s| s.to_string()).unwrap_or_default();
        for (i, w) in rec.workers.iter().enumerate() {
            let kappa = w.kappa.map(fmt_f64).unwrap_or_default();
            let flag = flag_of(rec, i);
            let splits = std::iter::once((Split::Train, &w.train_bfr))
                .chain(w.test_bfr.as_ref().map(|t| (Split::Test, t)));
            for (split, values) in splits {
                for (p, b) in values.iter().enumerate() {
                    wtr.write_record([
                        seed.to_string(),
                        rec.round.to_string(),
                        i.to_string(),
                        split.as_str().to_string(),
                        p.to_string(),
                        fmt_f64(*b),
                        kappa.clone(),
                        stable.clone(),
                        flag.clone(),
                    ])?;
                }
            }
        }
    }
    Ok(())
}

pub fn write_results<W: Write>(writer: W, runs: &[(u64, Vec<RoundRecord>)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(HEADER)?;
    for (seed, records) in runs {
        write_rows(&mut wtr, *seed, records)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub round: usize,
    pub worker: usize,
    pub split: Split,
    pub output_index: usize,
    pub bfr: f64,
    pub kappa: Option<f64>,
    pub global_stable: Option<bool>,
    pub flag: String,
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, line: usize) -> Result<&'a str> {
    rec.get(idx).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing column `{}`", HEADER[idx]),
    })
}

fn parse<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad {name} `{s}`"),
    })
}

pub fn read_results<R: Read>(reader: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Schema(format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let split = match field(&rec, 3, line)? {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown split `{other}`"),
                })
            }
        };
        let kappa = match field(&rec, 6, line)? {
            "" => None,
            s => Some(parse(s, "kappa", line)?),
        };
        let global_stable = match field(&rec, 7, line)? {
            "" => None,
            s => Some(parse(s, "global_stable", line)?),
        };
        rows.push(ResultRow {
            seed: parse(field(&rec, 0, line)?, "seed", line)?,
            round: parse(field(&rec, 1, line)?, "round", line)?,
            worker: parse(field(&rec, 2, line)?, "worker", line)?,
            split,
            output_index: parse(field(&rec, 4, line)?, "output_index", line)?,
            bfr: parse(field(&rec, 5, line)?, "bfr", line)?,
            kappa,
            global_stable,
            flag: field(&rec, 8, line)?.to_string(),
        });
    }
    Ok(rows)
}

/// Final-round view of one seed.
#[derive(Clone, Debug)]
struct SeedFinal {
    excluded: bool,
    /// split → per-output worker-mean BFR
    channel_means: BTreeMap<&'static str, Vec<f64>>,
}

fn final_rounds(rows: &[ResultRow]) -> Result<(usize, BTreeMap<u64, SeedFinal>)> {
    let mut last_round: BTreeMap<u64, usize> = BTreeMap::new();
    for r in rows {
        let e = last_round.entry(r.seed).or_insert(r.round);
        *e = (*e).max(r.round);
    }
    let ny = rows.iter().map(|r| r.output_index + 1).max().unwrap_or(0);
    // (seed, split) → per-output (sum, count)
    let mut acc: BTreeMap<(u64, &'static str), Vec<(f64, usize)>> = BTreeMap::new();
    let mut unstable: BTreeMap<u64, bool> = BTreeMap::new();
    let mut failed: BTreeMap<u64, bool> = BTreeMap::new();
    for r in rows.iter().filter(|r| last_round[&r.seed] == r.round) {
        let slot = acc
            .entry((r.seed, r.split.as_str()))
            .or_insert_with(|| vec![(0.0, 0); ny]);
        slot[r.output_index].0 += r.bfr;
        slot[r.output_index].1 += 1;
        *unstable.entry(r.seed).or_default() |= r.global_stable == Some(false);
        *failed.entry(r.seed).or_default() |= r.flag.contains("alignment_failed");
    }
    let mut out: BTreeMap<u64, SeedFinal> = BTreeMap::new();
    for ((seed, split), sums) in acc {
        if sums.iter().any(|(_, n)| *n == 0) {
            return Err(Error::Schema(format!("seed {seed} is missing outputs on split {split}")));
        }
        let means: Vec<f64> = sums.iter().map(|(s, n)| s / *n as f64).collect();
        let entry = out.entry(seed).or_insert_with(|| SeedFinal {
            excluded: unstable[&seed] || failed[&seed],
            channel_means: BTreeMap::new(),
        });
        if means.iter().any(|b| !(*b >= 0.0)) {
            entry.excluded = true;
        }
        entry.channel_means.insert(split, means);
    }
    Ok((ny, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitComparison {
    pub split: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub outputs: usize,
    pub excluded_a: Vec<u64>,
    pub excluded_b: Vec<u64>,
    pub splits: Vec<SplitComparison>,
}

/// Rank-sum comparison of final-round BFR, one score per surviving seed
/// (mean over workers and output channels), per split.
pub fn compare(a: &[ResultRow], b: &[ResultRow]) -> Result<ComparisonReport> {
    let (ny_a, fin_a) = final_rounds(a)?;
    let (ny_b, fin_b) = final_rounds(b)?;
    if ny_a != ny_b {
        return Err(Error::Schema(format!("output counts differ: {ny_a} vs {ny_b}")));
    }
    let scores = |fin: &BTreeMap<u64, SeedFinal>, split: &str| -> Vec<f64> {
        fin.values()
            .filter(|s| !s.excluded)
            .filter_map(|s| s.channel_means.get(split))
            .map(|m| m.iter().sum::<f64>() / m.len() as f64)
            .collect()
    };
    let mut splits = Vec::new();
    for split in [Split::Train, Split::Test] {
        let name = split.as_str();
        let in_a = fin_a.values().any(|s| s.channel_means.contains_key(name));
        let in_b = fin_b.values().any(|s| s.channel_means.contains_key(name));
        if in_a != in_b {
            return Err(Error::Schema(format!("split `{name}` present in only one file")));
        }
        if !in_a {
            continue;
        }
        let sa = scores(&fin_a, name);
        let sb = scores(&fin_b, name);
        if sa.is_empty() || sb.is_empty() {
            return Err(Error::Empty(format!("split `{name}` has no surviving seeds in one file")));
        }
        splits.push(SplitComparison {
            split: name.to_string(),
            n_a: sa.len(),
            n_b: sb.len(),
            mean_a: sa.iter().sum::<f64>() / sa.len() as f64,
            mean_b: sb.iter().sum::<f64>() / sb.len() as f64,
            p_value: ranksum_test(&sa, &sb)?,
        });
    }
    if splits.is_empty() {
        return Err(Error::Empty("no rows to compare".into()));
    }
    let excluded = |fin: &BTreeMap<u64, SeedFinal>| fin.iter().filter(|(_, s)| s.excluded).map(|(k, _)| *k).collect();
    Ok(ComparisonReport {
        outputs: ny_a,
        excluded_a: excluded(&fin_a),
        excluded_b: excluded(&fin_b),
        splits,
    })
}
