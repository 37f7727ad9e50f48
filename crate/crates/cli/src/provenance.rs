//! Config hash and seed stamped into every output file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use voltadapt::seeds;
use voltadapt::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    /// Hashes the command name, the canonical configuration and any extra
    /// `key=value` facts (parameter hashes, effective flags).
    pub fn new(command: &str, canonical_config: &str, seed: u64, extra: &[String]) -> Self {
        let mut text = format!("command={command}\nseed={seed}\n{canonical_config}\n");
        for line in extra {
            text.push_str(line);
            text.push('\n');
        }
        Provenance {
            config_hash: seeds::fingerprint(text.as_bytes()),
            seed,
        }
    }

    /// `#`-comment lines for CSV and TOML outputs.
    pub fn header(&self) -> String {
        format!("# config_hash={}\n# seed={}\n", self.config_hash, self.seed)
    }

    /// Creates `path` and writes the comment header.
    pub fn create(&self, path: &Path) -> Result<BufWriter<File>> {
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(self.header().as_bytes()).map_err(io)?;
        Ok(w)
    }

    /// Writes `body` after the comment header.
    pub fn write(&self, path: &Path, body: &str) -> Result<()> {
        let mut w = self.create(path)?;
        w.write_all(body.as_bytes())
            .and_then(|()| w.flush())
            .map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(seeds::fingerprint(&bytes))
}
