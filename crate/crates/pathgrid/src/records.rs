//! Line-delimited JSON corpus files, one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use pathgrid_core::corpus::{CorpusRecord, SplitTag, Trajectory};
use pathgrid_core::lattice::Workspace;
use pathgrid_core::taskgrid::{TaskContext, TaskGraph};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct LineOut<'a> {
    schema_version: u32,
    workspace: &'a Workspace,
    task_graph: &'a TaskGraph,
    context: &'a TaskContext,
    points: &'a Trajectory,
    seed: u64,
    split_tag: SplitTag,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LineIn {
    schema_version: u32,
    workspace: Workspace,
    task_graph: TaskGraph,
    context: TaskContext,
    points: Trajectory,
    seed: u64,
    split_tag: SplitTag,
}

pub fn to_line(r: &CorpusRecord) -> String {
    serde_json::to_string(&LineOut {
        schema_version: SCHEMA_VERSION,
        workspace: &r.workspace,
        task_graph: &r.task_graph,
        context: &r.context,
        points: &r.trajectory,
        seed: r.seed,
        split_tag: r.split_tag,
    })
    .expect("records always serialize")
}

/// Parse one line; `line` and `path` only decorate errors.
pub fn from_line(text: &str, path: &Path, line: usize) -> Result<CorpusRecord> {
    let v: LineIn = serde_json::from_str(text).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    })?;
    if v.schema_version != SCHEMA_VERSION {
        return Err(Error::Record {
            path: path.to_path_buf(),
            line,
            msg: format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", v.schema_version),
        });
    }
    Ok(CorpusRecord {
        workspace: v.workspace,
        task_graph: v.task_graph,
        context: v.context,
        trajectory: v.points,
        seed: v.seed,
        split_tag: v.split_tag,
    })
}

pub fn write_records(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        writeln!(w, "{}", to_line(r)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_records(path: &Path) -> Result<Vec<CorpusRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_line(&line, path, i + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pathgrid_core::corpus::{generate_corpus, GenerationConfig};
    use pathgrid_core::lattice::CellBox;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_lossless() {
        let cfg = GenerationConfig {
            bounds: CellBox::centered(5, 5, 3).unwrap(),
            obstacle_density: 0.1,
            count: 20,
            ..GenerationConfig::default()
        };
        let recs = generate_corpus(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_records(&p, &recs).unwrap();
        assert_eq!(read_records(&p).unwrap(), recs);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 20);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = first.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        for k in ["schema_version", "workspace", "task_graph", "context", "points", "seed", "split_tag"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert!(first["points"][0].is_array());
    }

    #[test]
    fn errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let cfg = GenerationConfig {
            count: 2,
            ..GenerationConfig::default()
        };
        let recs = generate_corpus(&cfg, 1).unwrap();
        let good = to_line(&recs[0]);
        let old = good.replacen("\"schema_version\":1", "\"schema_version\":9", 1);
        std::fs::write(&p, format!("{good}\n{{not json\n")).unwrap();
        let e = read_records(&p).unwrap_err();
        assert!(matches!(e, Error::Record { line: 2, .. }), "{e}");
        std::fs::write(&p, format!("{good}\n\n{old}\n")).unwrap();
        let e = read_records(&p).unwrap_err();
        assert!(matches!(e, Error::Record { line: 3, .. }), "{e}");
        assert!(e.to_string().contains("schema_version 9"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn any_generated_record_survives_a_line(seed in any::<u64>(), index in 0usize..50, density in 0.0f64..0.2) {
            let cfg = GenerationConfig {
                bounds: CellBox::centered(5, 4, 3).unwrap(),
                obstacle_density: density,
                ..GenerationConfig::default()
            };
            let r = pathgrid_core::corpus::generate_record(&cfg, seed, index).unwrap();
            let line = to_line(&r);
            prop_assert!(!line.contains('\n'));
            prop_assert_eq!(from_line(&line, Path::new("p"), 1).unwrap(), r);
        }
    }
}
