//! Directory-backed object store.
//!
//! Each bucket is a directory directly under the store root and object keys
//! map to relative file paths. Writes land in `<root>/.tmp` first and are
//! renamed into place, so readers never observe a partial object.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const URI_SCHEME: &str = "store://";
pub const HASH_ALGORITHM: &str = "sha256";
const TMP_DIR: &str = ".tmp";
const GIB: u64 = 1 << 30;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid bucket name '{0}' (expected [a-z0-9-]{{3,63}})")]
    InvalidBucket(String),
    #[error("invalid object key '{0}'")]
    InvalidKey(String),
    #[error("invalid store uri '{0}'")]
    InvalidUri(String),
    #[error("no such bucket '{0}'")]
    NoSuchBucket(String),
    #[error("no such object {0}")]
    NoSuchObject(StoreUri),
    #[error("no objects under {0}")]
    NoSuchPrefix(StoreUri),
    #[error("staging needs {needed} bytes but the disk holds {capacity} bytes")]
    DiskFull { needed: u64, capacity: u64 },
    #[error("bucket '{0}' already exists")]
    BucketExists(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: io::Error,
    },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> StoreError {
    let context = context.into();
    move |source| StoreError::Io { context, source }
}

pub fn valid_bucket(name: &str) -> bool {
    (3..=63).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

/// Keys are relative, slash-separated and free of `.`/`..` segments.
/// An empty key denotes the whole bucket when used as a prefix.
pub fn valid_key(key: &str) -> bool {
    if key.is_empty() {
        return true;
    }
    let key = key.strip_suffix('/').unwrap_or(key);
    !key.starts_with('/')
        && !key.contains('\\')
        && !key.contains('\0')
        && key
            .split('/')
            .all(|seg| !seg.is_empty() && seg != "." && seg != "..")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StoreUri {
    bucket: String,
    key: String,
}

impl StoreUri {
    pub fn new(bucket: impl Into<String>, key: impl Into<String>) -> Result<Self, StoreError> {
        let bucket = bucket.into();
        let key = key.into();
        if !valid_bucket(&bucket) {
            return Err(StoreError::InvalidBucket(bucket));
        }
        if !valid_key(&key) {
            return Err(StoreError::InvalidKey(key));
        }
        Ok(Self { bucket, key })
    }

    pub fn bucket(&self) -> &str {
        &self.bucket
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    /// Append a relative path to this URI's key.
    pub fn join(&self, rel: &str) -> Result<Self, StoreError> {
        let key = match self.key.trim_end_matches('/') {
            "" => rel.to_string(),
            base => format!("{base}/{rel}"),
        };
        Self::new(self.bucket.clone(), key)
    }

    fn prefix_dir(&self) -> &str {
        self.key.trim_end_matches('/')
    }
}

impl fmt::Display for StoreUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{URI_SCHEME}{}/{}", self.bucket, self.key)
    }
}

impl FromStr for StoreUri {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s
            .strip_prefix(URI_SCHEME)
            .ok_or_else(|| StoreError::InvalidUri(s.to_string()))?;
        let (bucket, key) = rest.split_once('/').unwrap_or((rest, ""));
        Self::new(bucket, key)
    }
}

impl TryFrom<String> for StoreUri {
    type Error = StoreError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<StoreUri> for String {
    fn from(u: StoreUri) -> String {
        u.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub size: u64,
    /// Hex digest of the stored bytes; see [`HASH_ALGORITHM`].
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingEntry {
    pub source: StoreUri,
    pub destination: PathBuf,
    pub size: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingManifest {
    pub entries: Vec<StagingEntry>,
}

impl StagingManifest {
    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.size).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyReport {
    pub copied: usize,
    pub skipped: usize,
}

/// Whether a no-clobber put wrote the object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Written,
    AlreadyExists,
}

#[derive(Debug, Clone)]
pub struct ObjectStore {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ObjectStore {
    /// Open (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join(TMP_DIR)).map_err(io_err(format!("creating {}", root.display())))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn bucket_dir(&self, bucket: &str) -> PathBuf {
        self.root.join(bucket)
    }

    fn object_path(&self, uri: &StoreUri) -> PathBuf {
        let mut p = self.bucket_dir(uri.bucket());
        for seg in uri.key().split('/').filter(|s| !s.is_empty()) {
            p.push(seg);
        }
        p
    }

    fn require_bucket(&self, bucket: &str) -> Result<PathBuf, StoreError> {
        let dir = self.bucket_dir(bucket);
        if dir.is_dir() {
            Ok(dir)
        } else {
            Err(StoreError::NoSuchBucket(bucket.to_string()))
        }
    }

    pub fn create_bucket(&self, bucket: &str) -> Result<(), StoreError> {
        if !valid_bucket(bucket) {
            return Err(StoreError::InvalidBucket(bucket.to_string()));
        }
        let dir = self.bucket_dir(bucket);
        match fs::create_dir(&dir) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(StoreError::BucketExists(bucket.to_string()))
            }
            Err(e) => Err(io_err(format!("creating bucket {bucket}"))(e)),
        }
    }

    pub fn bucket_exists(&self, bucket: &str) -> bool {
        valid_bucket(bucket) && self.bucket_dir(bucket).is_dir()
    }

    pub fn remove_bucket(&self, bucket: &str) -> Result<(), StoreError> {
        let dir = self.require_bucket(bucket)?;
        fs::remove_dir_all(&dir).map_err(io_err(format!("removing bucket {bucket}")))
    }

    fn write_temp(&self, bytes: &[u8]) -> Result<PathBuf, StoreError> {
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .root
            .join(TMP_DIR)
            .join(format!("{}-{n}", std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(io_err("creating temp object"))?;
        f.write_all(bytes).map_err(io_err("writing temp object"))?;
        f.sync_all().map_err(io_err("syncing temp object"))?;
        Ok(tmp)
    }

    fn prepare_parent(&self, uri: &StoreUri) -> Result<PathBuf, StoreError> {
        self.require_bucket(uri.bucket())?;
        if uri.key().is_empty() || uri.key().ends_with('/') {
            return Err(StoreError::InvalidKey(uri.key().to_string()));
        }
        let path = self.object_path(uri);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
        }
        Ok(path)
    }

    /// Write an object, replacing any existing one.
    pub fn put(&self, uri: &StoreUri, bytes: &[u8]) -> Result<ObjectMeta, StoreError> {
        let path = self.prepare_parent(uri)?;
        let tmp = self.write_temp(bytes)?;
        fs::rename(&tmp, &path).map_err(io_err(format!("publishing {uri}")))?;
        Ok(ObjectMeta {
            size: bytes.len() as u64,
            hash: hash_bytes(bytes),
        })
    }

    /// Write an object only if none exists at `uri`. The check and the
    /// publish are a single atomic link.
    pub fn put_no_clobber(&self, uri: &StoreUri, bytes: &[u8]) -> Result<PutOutcome, StoreError> {
        let path = self.prepare_parent(uri)?;
        if path.exists() {
            return Ok(PutOutcome::AlreadyExists);
        }
        let tmp = self.write_temp(bytes)?;
        let res = fs::hard_link(&tmp, &path);
        let _ = fs::remove_file(&tmp);
        match res {
            Ok(()) => Ok(PutOutcome::Written),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Ok(PutOutcome::AlreadyExists),
            Err(e) => Err(io_err(format!("publishing {uri}"))(e)),
        }
    }

    /// Upload a local file.
    pub fn put_file(&self, uri: &StoreUri, src: &Path) -> Result<ObjectMeta, StoreError> {
        let bytes = fs::read(src).map_err(io_err(format!("reading {}", src.display())))?;
        self.put(uri, &bytes)
    }

    pub fn get(&self, uri: &StoreUri) -> Result<Vec<u8>, StoreError> {
        self.require_bucket(uri.bucket())?;
        let path = self.object_path(uri);
        if !path.is_file() {
            return Err(StoreError::NoSuchObject(uri.clone()));
        }
        fs::read(&path).map_err(io_err(format!("reading {uri}")))
    }

    pub fn head(&self, uri: &StoreUri) -> Result<ObjectMeta, StoreError> {
        let bytes = self.get(uri)?;
        Ok(ObjectMeta {
            size: bytes.len() as u64,
            hash: hash_bytes(&bytes),
        })
    }

    pub fn exists(&self, uri: &StoreUri) -> bool {
        self.object_path(uri).is_file()
    }

    /// Objects under `prefix` (treated as a directory), sorted by key, with
    /// their sizes.
    pub fn list(&self, prefix: &StoreUri) -> Result<Vec<(StoreUri, u64)>, StoreError> {
        let bucket_dir = self.require_bucket(prefix.bucket())?;
        let base = self.object_path(prefix);
        if base.is_file() {
            let size = fs::metadata(&base).map_err(io_err(format!("stat {prefix}")))?.len();
            return Ok(vec![(prefix.clone(), size)]);
        }
        if !base.is_dir() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in WalkDir::new(&base).follow_links(false).sort_by_file_name() {
            let entry = entry.map_err(|e| StoreError::Io {
                context: format!("listing {prefix}"),
                source: e.into(),
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry
                .path()
                .strip_prefix(&bucket_dir)
                .expect("walk stays inside bucket");
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            let size = entry.metadata().map(|m| m.len()).unwrap_or(0);
            out.push((StoreUri::new(prefix.bucket(), key)?, size));
        }
        Ok(out)
    }

    /// Copy every object under `ref_root` beneath `task_disk/reference/`,
    /// preserving relative layout. Fails before copying anything if the
    /// total would exceed `capacity_bytes`.
    pub fn stage_references(
        &self,
        ref_root: &StoreUri,
        task_disk: &Path,
        capacity_bytes: u64,
    ) -> Result<StagingManifest, StoreError> {
        let objects = self.list(ref_root)?;
        if objects.is_empty() {
            return Err(StoreError::NoSuchPrefix(ref_root.clone()));
        }
        let needed: u64 = objects.iter().map(|(_, s)| s).sum();
        if needed > capacity_bytes {
            return Err(StoreError::DiskFull {
                needed,
                capacity: capacity_bytes,
            });
        }
        let dest_root = task_disk.join("reference");
        let mut entries = Vec::with_capacity(objects.len());
        for (uri, size) in objects {
            let rel = relative_key(ref_root, &uri);
            let dest = dest_root.join(&rel);
            // keys are validated, so this only trips on a logic error
            assert!(dest.starts_with(&dest_root), "staging escaped task disk");
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
            }
            fs::copy(self.object_path(&uri), &dest)
                .map_err(io_err(format!("staging {uri}")))?;
            entries.push(StagingEntry {
                source: uri,
                destination: Path::new("reference").join(rel),
                size,
            });
        }
        Ok(StagingManifest { entries })
    }

    /// Recursive copy of every object under `src` into `dst`, never
    /// overwriting a file that already exists there.
    pub fn copy_no_clobber(&self, src: &StoreUri, dst: &Path) -> Result<CopyReport, StoreError> {
        fs::create_dir_all(dst).map_err(io_err(format!("creating {}", dst.display())))?;
        let mut report = CopyReport::default();
        for (uri, _) in self.list(src)? {
            let dest = dst.join(relative_key(src, &uri));
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
            }
            let mut out = match fs::OpenOptions::new().write(true).create_new(true).open(&dest) {
                Ok(f) => f,
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    report.skipped += 1;
                    continue;
                }
                Err(e) => return Err(io_err(format!("creating {}", dest.display()))(e)),
            };
            let mut input = fs::File::open(self.object_path(&uri)).map_err(io_err(format!("reading {uri}")))?;
            io::copy(&mut input, &mut out).map_err(io_err(format!("copying {uri}")))?;
            report.copied += 1;
        }
        Ok(report)
    }
}

/// Bytes in `disk_gb` binary gigabytes.
pub fn disk_capacity_bytes(disk_gb: u32) -> u64 {
    u64::from(disk_gb) * GIB
}

/// Path of `uri` relative to the directory `prefix`.
fn relative_key(prefix: &StoreUri, uri: &StoreUri) -> PathBuf {
    let base = prefix.prefix_dir();
    let rel = if uri.key() == base {
        // prefix named a single object
        uri.key().rsplit('/').next().unwrap_or(uri.key())
    } else if base.is_empty() {
        uri.key()
    } else {
        uri.key()
            .strip_prefix(base)
            .and_then(|r| r.strip_prefix('/'))
            .unwrap_or(uri.key())
    };
    rel.split('/').collect()
}
