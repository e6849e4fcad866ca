use std::path::{Path, PathBuf};

use crate::CliError;

/// Result files of one run. Every file has a single writer; names are
/// recorded for the manifest.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn files(&self) -> Vec<String> {
        let mut f = self.files.clone();
        f.sort();
        f
    }
}

/// CSV text with a header row. Reals use the shortest round-trip form.
pub fn csv_string<I, R>(header: &[&str], rows: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Numerical(iw_core::Error::from(e));
    wtr.write_record(header).map_err(err)?;
    for r in rows {
        wtr.write_record(r).map_err(err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
