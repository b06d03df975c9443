//! Dataset acquisition from an HTTP(S) mirror or a local directory.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use log::info;

use qnn_core::container::write_atomic;
use qnn_core::datasets::{verify_checksums, DatasetKind, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use qnn_core::{Error, Result};

const FILES: [&str; 4] = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS];
const MAX_DOWNLOAD: u64 = 128 << 20;

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Format(format!("gzip: {e}")))?;
    Ok(out)
}

fn is_url(source: &str) -> bool {
    source.starts_with("http://") || source.starts_with("https://")
}

fn download(url: &str) -> Result<Option<Vec<u8>>> {
    match ureq::get(url).call() {
        Ok(resp) => {
            let mut buf = Vec::new();
            resp.into_reader().take(MAX_DOWNLOAD).read_to_end(&mut buf)?;
            Ok(Some(buf))
        }
        Err(ureq::Error::Status(404, _)) => Ok(None),
        Err(e) => Err(Error::Io(std::io::Error::other(format!("{url}: {e}")))),
    }
}

/// Raw or gzipped bytes of `name` from `source`; gzip is tried first.
fn obtain(source: &str, name: &str) -> Result<Vec<u8>> {
    let gz = format!("{name}.gz");
    if is_url(source) {
        let base = source.trim_end_matches('/');
        if let Some(b) = download(&format!("{base}/{gz}"))? {
            return gunzip(&b);
        }
        return download(&format!("{base}/{name}"))?
            .ok_or_else(|| Error::Io(std::io::Error::other(format!("{base}/{name}: not found"))));
    }
    let dir = Path::new(source);
    if dir.join(&gz).is_file() {
        return gunzip(&fs::read(dir.join(gz))?);
    }
    Ok(fs::read(dir.join(name))?)
}

/// Places the four IDX files under `root/<dataset>` and verifies them.
/// Without a source, files already present are verified only.
pub fn fetch(kind: DatasetKind, source: Option<&str>, root: &Path, manifest: Option<&str>) -> Result<PathBuf> {
    if kind == DatasetKind::Synthetic {
        return Err(Error::Argument("the synthetic dataset is generated, not fetched".into()));
    }
    let dir = root.join(kind.dir_name());
    fs::create_dir_all(&dir)?;
    if let Some(source) = source {
        for name in FILES {
            let bytes = obtain(source, name)?;
            info!("{name}: {} bytes", bytes.len());
            write_atomic(&dir.join(name), &bytes)?;
        }
    }
    match manifest {
        Some(m) => verify_checksums(&dir, m)?,
        None => log::warn!("no checksum manifest for {kind}; files not verified"),
    }
    Ok(dir)
}
