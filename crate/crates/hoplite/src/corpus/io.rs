//! Line-oriented JSON corpus files and the corpus manifest.

use super::{Corpus, CorpusConfig, QAExample};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_dev_adversarial: usize,
}

/// Write one example per line.
pub fn save_examples(examples: &[QAExample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for example in examples {
        serde_json::to_writer(&mut w, example)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a JSONL examples file; parse failures name the offending line.
pub fn load_examples(path: &Path) -> Result<Vec<QAExample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let example: QAExample = serde_json::from_str(&line).map_err(|e| Error::CorpusParse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(example);
    }
    Ok(out)
}

/// Save train/dev/adversarial splits plus the manifest into a directory.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_examples(&corpus.train, &dir.join("train.jsonl"))?;
    save_examples(&corpus.dev, &dir.join("dev.jsonl"))?;
    save_examples(&corpus.dev_adversarial, &dir.join("dev_adversarial.jsonl"))?;
    let manifest = CorpusManifest {
        config: corpus.config.clone(),
        n_train: corpus.train.len(),
        n_dev: corpus.dev.len(),
        n_dev_adversarial: corpus.dev_adversarial.len(),
    };
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Load a corpus directory written by [`save_corpus`]. The world is not
/// persisted; training and evaluation only need the example files.
pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<QAExample>, Vec<QAExample>, Vec<QAExample>)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: CorpusManifest = serde_json::from_reader(BufReader::new(
        File::open(&manifest_path).map_err(|e| {
            Error::Corpus(format!("cannot open {}: {e}", manifest_path.display()))
        })?,
    ))?;
    let train = load_examples(&dir.join("train.jsonl"))?;
    let dev = load_examples(&dir.join("dev.jsonl"))?;
    let adv_path = dir.join("dev_adversarial.jsonl");
    let dev_adversarial = if adv_path.exists() {
        load_examples(&adv_path)?
    } else {
        Vec::new()
    };
    Ok((manifest, train, dev, dev_adversarial))
}
