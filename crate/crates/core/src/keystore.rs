//! Owner secrets and their persistence.
//!
//! A keystore file is UTF-8 JSON. Permutation keys are stored as index
//! arrays; in multi-user mode the orthogonal frame `B` travels as
//! base64-encoded little-endian f64 column-major-free row-major data, and
//! noise parameters ride along so extraction needs nothing but this file
//! and the reference model.

use crate::error::{Error, Result};
use crate::keys::{OrthoKey, PermKey};
use crate::matrix::Matrix;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::path::Path;

/// A single owner's secret material.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleUserKey {
    /// Rows of the embedding matrix used to build the invariant matrix.
    pub invariant_positions: Vec<usize>,
    /// Rows carrying watermark values; disjoint from the invariant rows.
    pub watermark_positions: Vec<usize>,
    /// Per-watermark-position permutation keys (length `l`).
    pub row_perms: Vec<PermKey>,
    /// Per-invariant-row permutation keys (length `t`).
    pub invariant_perms: Vec<PermKey>,
    pub scale_wm: f64,
    pub t: usize,
    pub l: usize,
    /// Root seed the insertion ran from; extraction derives its null
    /// sampling streams from it.
    pub seed: u64,
}

impl SingleUserKey {
    /// Structural checks: list lengths, disjointness, distinctness, and
    /// agreement of every permutation length with `d`.
    pub fn validate(&self, s: usize, d: usize) -> Result<()> {
        if self.invariant_positions.len() != self.t || self.invariant_perms.len() != self.t {
            return Err(Error::InvalidArgument(
                "invariant list lengths do not match t".into(),
            ));
        }
        if self.watermark_positions.len() != self.l || self.row_perms.len() != self.l {
            return Err(Error::InvalidArgument(
                "watermark list lengths do not match l".into(),
            ));
        }
        let mut seen = HashSet::new();
        for &p in self.invariant_positions.iter().chain(&self.watermark_positions) {
            if p >= s {
                return Err(Error::InvalidArgument(format!(
                    "position {p} out of range for vocabulary {s}"
                )));
            }
            if !seen.insert(p) {
                return Err(Error::InvalidArgument(format!(
                    "position {p} repeats across the invariant and watermark lists"
                )));
            }
        }
        if self.row_perms.iter().chain(&self.invariant_perms).any(|p| p.len() != d) {
            return Err(Error::InvalidArgument(
                "permutation key length does not match embedding dimension".into(),
            ));
        }
        if !(self.scale_wm > 0.0) {
            return Err(Error::InvalidArgument("scale_wm must be positive".into()));
        }
        Ok(())
    }
}

/// One user's key in the multi-user scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct UserKey {
    pub user_id: String,
    pub key: SingleUserKey,
    /// Seed of the per-user noise draw at insertion time.
    pub noise_seed: u64,
    pub num_noise: usize,
}

/// Shared multi-user state: the orthogonal frame, the shared invariant
/// rows, noise parameters, and every registered user key.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiUserContext {
    pub b: OrthoKey,
    pub invariant_positions: Vec<usize>,
    pub num_noise: usize,
    /// Standard deviation of all base embedding entries; the planted noise
    /// amplitude.
    pub sigma_e: f64,
    pub users: Vec<UserKey>,
}

impl MultiUserContext {
    pub fn add_user(&mut self, user: UserKey) -> Result<()> {
        if self.users.iter().any(|u| u.user_id == user.user_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate user id {}",
                user.user_id
            )));
        }
        self.users.push(user);
        Ok(())
    }

    pub fn user(&self, user_id: &str) -> Option<&UserKey> {
        self.users.iter().find(|u| u.user_id == user_id)
    }
}

/// Persisted key material for either mode.
#[derive(Debug, Clone, PartialEq)]
pub enum KeyStore {
    Single {
        s: usize,
        d: usize,
        key: SingleUserKey,
    },
    Multi {
        s: usize,
        d: usize,
        ctx: MultiUserContext,
    },
}

#[derive(Serialize, Deserialize)]
struct KeystoreFile {
    version: u32,
    mode: String,
    s: usize,
    d: usize,
    t: usize,
    l: usize,
    scale_wm: f64,
    #[serde(rename = "L_M")]
    l_m: Vec<usize>,
    keys: Vec<KeyEntry>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_noise: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_e: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct KeyEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    user_id: Option<String>,
    #[serde(rename = "L_W")]
    l_w: Vec<usize>,
    #[serde(rename = "L_P1")]
    l_p1: Vec<Vec<usize>>,
    #[serde(rename = "L_P2")]
    l_p2: Vec<Vec<usize>>,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_seed: Option<u64>,
}

const KEYSTORE_VERSION: u32 = 1;

fn encode_matrix(m: &Matrix) -> String {
    let mut bytes = Vec::with_capacity(8 * m.data().len());
    for &v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_matrix(encoded: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = BASE64
        .decode(encoded)
        .map_err(|e| Error::FormatError(format!("bad base64 in keystore: {e}")))?;
    if bytes.len() != 8 * rows * cols {
        return Err(Error::FormatError(format!(
            "orthogonal frame has {} bytes, expected {}",
            bytes.len(),
            8 * rows * cols
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn key_to_entry(key: &SingleUserKey, user: Option<&UserKey>) -> KeyEntry {
    KeyEntry {
        user_id: user.map(|u| u.user_id.clone()),
        l_w: key.watermark_positions.clone(),
        l_p1: key.row_perms.iter().map(|p| p.map().to_vec()).collect(),
        l_p2: key.invariant_perms.iter().map(|p| p.map().to_vec()).collect(),
        seed: key.seed,
        noise_seed: user.map(|u| u.noise_seed),
    }
}

fn entry_to_key(
    entry: &KeyEntry,
    l_m: &[usize],
    scale_wm: f64,
    t: usize,
    l: usize,
    s: usize,
    d: usize,
) -> Result<SingleUserKey> {
    let perms = |lists: &[Vec<usize>]| -> Result<Vec<PermKey>> {
        lists.iter().map(|m| PermKey::from_map(m.clone())).collect()
    };
    let key = SingleUserKey {
        invariant_positions: l_m.to_vec(),
        watermark_positions: entry.l_w.clone(),
        row_perms: perms(&entry.l_p1)?,
        invariant_perms: perms(&entry.l_p2)?,
        scale_wm,
        t,
        l,
        seed: entry.seed,
    };
    key.validate(s, d)
        .map_err(|e| Error::FormatError(format!("invalid key in keystore: {e}")))?;
    Ok(key)
}

pub fn save_keystore(store: &KeyStore, path: &Path) -> Result<()> {
    let file = match store {
        KeyStore::Single { s, d, key } => {
            key.validate(*s, *d)?;
            KeystoreFile {
                version: KEYSTORE_VERSION,
                mode: "single".into(),
                s: *s,
                d: *d,
                t: key.t,
                l: key.l,
                scale_wm: key.scale_wm,
                l_m: key.invariant_positions.clone(),
                keys: vec![key_to_entry(key, None)],
                b: None,
                num_noise: None,
                sigma_e: None,
            }
        }
        KeyStore::Multi { s, d, ctx } => {
            if ctx.users.is_empty() {
                return Err(Error::InvalidArgument(
                    "multi-user keystore needs at least one user".into(),
                ));
            }
            let mut ids = HashSet::new();
            for user in &ctx.users {
                if !ids.insert(user.user_id.as_str()) {
                    return Err(Error::FormatError(format!(
                        "duplicate user id {}",
                        user.user_id
                    )));
                }
                user.key.validate(*s, *d)?;
                if user.key.invariant_positions != ctx.invariant_positions {
                    return Err(Error::InvalidArgument(format!(
                        "user {} does not share the context invariant rows",
                        user.user_id
                    )));
                }
            }
            let first = &ctx.users[0].key;
            KeystoreFile {
                version: KEYSTORE_VERSION,
                mode: "multi".into(),
                s: *s,
                d: *d,
                t: first.t,
                l: first.l,
                scale_wm: first.scale_wm,
                l_m: ctx.invariant_positions.clone(),
                keys: ctx
                    .users
                    .iter()
                    .map(|u| key_to_entry(&u.key, Some(u)))
                    .collect(),
                b: Some(encode_matrix(&ctx.b.b)),
                num_noise: Some(ctx.num_noise),
                sigma_e: Some(ctx.sigma_e),
            }
        }
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::FormatError(format!("keystore serialization failed: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_keystore(path: &Path) -> Result<KeyStore> {
    let raw = fs::read(path)?;
    let file: KeystoreFile = serde_json::from_slice(&raw)
        .map_err(|e| Error::FormatError(format!("bad keystore {}: {e}", path.display())))?;
    if file.version != KEYSTORE_VERSION {
        return Err(Error::FormatError(format!(
            "unsupported keystore version {}",
            file.version
        )));
    }
    match file.mode.as_str() {
        "single" => {
            if file.keys.len() != 1 {
                return Err(Error::FormatError(format!(
                    "single-mode keystore holds {} keys",
                    file.keys.len()
                )));
            }
            let key = entry_to_key(
                &file.keys[0],
                &file.l_m,
                file.scale_wm,
                file.t,
                file.l,
                file.s,
                file.d,
            )?;
            Ok(KeyStore::Single {
                s: file.s,
                d: file.d,
                key,
            })
        }
        "multi" => {
            let b64 = file
                .b
                .as_deref()
                .ok_or_else(|| Error::FormatError("multi-mode keystore missing B".into()))?;
            let b = OrthoKey {
                b: decode_matrix(b64, file.d, file.d)?,
            };
            let num_noise = file
                .num_noise
                .ok_or_else(|| Error::FormatError("multi-mode keystore missing num_noise".into()))?;
            let sigma_e = file
                .sigma_e
                .ok_or_else(|| Error::FormatError("multi-mode keystore missing sigma_e".into()))?;
            let mut ids = HashSet::new();
            let mut users = Vec::with_capacity(file.keys.len());
            for entry in &file.keys {
                let user_id = entry
                    .user_id
                    .clone()
                    .ok_or_else(|| Error::FormatError("multi-mode key entry missing user_id".into()))?;
                if !ids.insert(user_id.clone()) {
                    return Err(Error::FormatError(format!("duplicate user id {user_id}")));
                }
                let key = entry_to_key(
                    entry,
                    &file.l_m,
                    file.scale_wm,
                    file.t,
                    file.l,
                    file.s,
                    file.d,
                )?;
                users.push(UserKey {
                    user_id,
                    key,
                    noise_seed: entry.noise_seed.ok_or_else(|| {
                        Error::FormatError("multi-mode key entry missing noise_seed".into())
                    })?,
                    num_noise,
                });
            }
            Ok(KeyStore::Multi {
                s: file.s,
                d: file.d,
                ctx: MultiUserContext {
                    b,
                    invariant_positions: file.l_m,
                    num_noise,
                    sigma_e,
                    users,
                },
            })
        }
        other => Err(Error::FormatError(format!("unknown keystore mode {other}"))),
    }
}
