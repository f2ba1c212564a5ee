//! Golden wire frames: deterministic reference messages, a hashed manifest,
//! and verification of a fixture directory against both.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Pose2D};
use crate::protocol::{decode_message, encode_message, MessageHeader, MessageKind, SparseEntry, SparseFeatureMessage};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub file: String,
    pub sha256: String,
    pub length: usize,
    pub sender: u8,
    pub kind: String,
    pub channels: u16,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub grid: GridSpec,
    pub fixtures: Vec<FixtureEntry>,
}

pub fn fixture_grid() -> GridSpec {
    GridSpec::centered(32, 16.0).expect("static grid")
}

fn header(sender: u8, kind: MessageKind, pose: Pose2D) -> MessageHeader {
    MessageHeader {
        sender,
        round: 0,
        kind,
        pose,
    }
}

/// The reference messages, named by fixture file.
pub fn golden_messages() -> Vec<(&'static str, SparseFeatureMessage)> {
    let pattern = |row: u16, col: u16, c: u16| -> Vec<f32> {
        (0..c)
            .map(|k| (row as f32 - col as f32) * 0.25 + k as f32 * 0.5 + 1.0)
            .collect()
    };
    let diag: Vec<SparseEntry> = (0..32u16)
        .step_by(3)
        .map(|i| SparseEntry {
            row: i,
            col: 31 - i,
            features: pattern(i, 31 - i, 8),
        })
        .collect();
    let block: Vec<SparseEntry> = (10..13u16)
        .flat_map(|r| (4..7u16).map(move |c| (r, c)))
        .map(|(r, c)| SparseEntry {
            row: r,
            col: c,
            features: pattern(r, c, 3),
        })
        .collect();
    let extremes = vec![
        SparseEntry {
            row: 0,
            col: 0,
            features: vec![f32::MIN_POSITIVE, -0.0, f32::MAX, -1.5],
        },
        SparseEntry {
            row: 31,
            col: 31,
            features: vec![0.0, f32::MIN, 1e-30, 3.25],
        },
    ];
    let build = |h, c, e| SparseFeatureMessage::new(h, c, e).expect("valid golden message");
    vec![
        (
            "empty_m.bin",
            build(header(1, MessageKind::M, Pose2D::identity()), 8, vec![]),
        ),
        (
            "diagonal_m.bin",
            build(header(2, MessageKind::M, Pose2D::new(12.5, -3.75, 0.5)), 8, diag),
        ),
        (
            "block_g.bin",
            build(header(3, MessageKind::G, Pose2D::new(-7.0, 20.0, -2.5)), 3, block),
        ),
        (
            "extremes_g.bin",
            build(
                header(255, MessageKind::G, Pose2D::new(0.0, 0.0, -std::f64::consts::PI)),
                4,
                extremes,
            ),
        ),
    ]
}

fn kind_name(k: MessageKind) -> &'static str {
    match k {
        MessageKind::M => "M",
        MessageKind::G => "G",
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes every golden frame and the manifest into `dir`.
pub fn write_fixtures(dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut fixtures = Vec::new();
    for (name, msg) in golden_messages() {
        let bytes = encode_message(&msg);
        let path = dir.join(name);
        std::fs::write(&path, &bytes).map_err(io_err(&path))?;
        fixtures.push(FixtureEntry {
            file: name.to_string(),
            sha256: sha256_hex(&bytes),
            length: bytes.len(),
            sender: msg.sender(),
            kind: kind_name(msg.kind()).to_string(),
            channels: msg.channels(),
            entries: msg.entries().len(),
        });
    }
    let manifest = Manifest {
        grid: fixture_grid(),
        fixtures,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    json.push(b'\n');
    std::fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureReport {
    pub file: String,
    pub ok: bool,
    pub detail: String,
}

fn check_one(dir: &Path, grid: &GridSpec, f: &FixtureEntry) -> std::result::Result<String, String> {
    let path = dir.join(&f.file);
    let bytes = std::fs::read(&path).map_err(|e| format!("read failed: {e}"))?;
    let hash = sha256_hex(&bytes);
    if hash != f.sha256 {
        return Err(format!("sha256 {hash} != manifest {}", f.sha256));
    }
    if bytes.len() != f.length {
        return Err(format!("length {} != manifest {}", bytes.len(), f.length));
    }
    let msg = decode_message(&bytes, grid).map_err(|e| format!("decode failed: {e}"))?;
    if encode_message(&msg) != bytes {
        return Err("re-encoding differs from file".into());
    }
    if msg.sender() != f.sender
        || kind_name(msg.kind()) != f.kind
        || msg.channels() != f.channels
        || msg.entries().len() != f.entries
    {
        return Err("decoded header disagrees with manifest".into());
    }
    if let Some((_, golden)) = golden_messages().into_iter().find(|(n, _)| *n == f.file) {
        if golden != msg {
            return Err("decoded message differs from the reference message".into());
        }
    }
    Ok(format!("{} bytes, {} entries", bytes.len(), msg.entries().len()))
}

/// Checks every fixture listed in `dir/manifest.json`.
pub fn verify_fixtures(dir: &Path) -> Result<Vec<FixtureReport>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(manifest
        .fixtures
        .iter()
        .map(|f| {
            let (ok, detail) = match check_one(dir, &manifest.grid, f) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            FixtureReport {
                file: f.file.clone(),
                ok,
                detail,
            }
        })
        .collect())
}
