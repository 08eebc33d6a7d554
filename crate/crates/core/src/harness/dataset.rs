//! JSONL datasets, one `{tokens, meta}` record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::StarGraphData;
use super::HarnessError;
use crate::stargraph::{generate_graph, tokenize, StarGraph, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub tokens: Vec<usize>,
    pub meta: serde_json::Value,
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| HarnessError::from_io(e, path))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| HarnessError::from_io(e, path))?;
    }
    w.flush().map_err(|e| HarnessError::from_io(e, path))?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>, HarnessError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn graph_record(g: &StarGraph, v: &Vocab) -> Record {
    Record {
        tokens: tokenize(g, v),
        meta: serde_json::json!({ "degree": g.d, "path_len": g.l, "start": g.start, "goal": g.goal, "path": g.path }),
    }
}

/// Train and eval graphs drawn from a stream that depends only on the seed
/// and the data parameters, so every model kind sees the same data.
#[derive(Debug, Clone, PartialEq)]
pub struct StarGraphSplit {
    pub vocab: Vocab,
    pub train: Vec<StarGraph>,
    pub eval: Vec<StarGraph>,
}

const DATA_STREAM: u64 = 0x57a7_9a4f;

pub fn stargraph_split(data: &StarGraphData, seed: u64) -> Result<StarGraphSplit, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    let gen = |rng: &mut ChaCha8Rng, n: usize| {
        (0..n).map(|_| generate_graph(data.degree, data.path_len, data.n_nodes, rng)).collect::<Result<Vec<_>, _>>()
    };
    let train = gen(&mut rng, data.n_train)?;
    let eval = gen(&mut rng, data.n_eval)?;
    Ok(StarGraphSplit { vocab: Vocab::new(data.n_nodes), train, eval })
}
