use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use super::AbortReason;
use crate::crypto::{
    hash, hmac_sha256, hmac_sha256_verify, AuthTag, BackendRegistry, CanonicalMessage,
    CryptoError, Digest, KeyMaterial,
};
use crate::protocol::{proof_digest, PoSXRequest};

/// How the Secure World remembers the latest authentic state of each slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum StorageMode {
    /// 32-byte SHA-256 commitment per slot.
    #[default]
    Digest,
    /// The whole state value, compared byte for byte.
    FullValue,
    /// Nothing but a per-slot epoch; the Non-Secure World keeps a MAC tag.
    OutsourcedMac,
}

impl StorageMode {
    pub const ALL: [StorageMode; 3] = [
        StorageMode::Digest,
        StorageMode::FullValue,
        StorageMode::OutsourcedMac,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StorageMode::Digest => "digest",
            StorageMode::FullValue => "full_value",
            StorageMode::OutsourcedMac => "outsourced_mac",
        }
    }
}

impl fmt::Display for StorageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StorageMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StorageMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown storage mode `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Commitment {
    Digest(Digest),
    Value(Vec<u8>),
}

/// Secure gate invoked without an active protocol instance.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("secure gate called outside an active instance")]
pub struct GateRejected;

/// Result of an accepted `set_state`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetStateReceipt {
    /// MAC handed back to the Non-Secure World in outsourced mode.
    pub outsourced_tag: Option<Vec<u8>>,
}

/// The protected half of the device. Nothing outside this module can read
/// the keys or write the counter, commitments or flags directly.
pub struct SecureWorld {
    pub(super) sk_dev: KeyMaterial,
    pk_vrf: KeyMaterial,
    registry: Arc<BackendRegistry>,
    state_mac_key: Vec<u8>,
    storage_mode: StorageMode,
    c: u64,
    s_sec: BTreeMap<String, Commitment>,
    epochs: BTreeMap<String, u64>,
    exec: bool,
    state_checked: bool,
    state_used: bool,
}

impl fmt::Debug for SecureWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecureWorld")
            .field("storage_mode", &self.storage_mode)
            .field("c", &self.c)
            .field("slots", &self.s_sec.keys().collect::<Vec<_>>())
            .field("exec", &self.exec)
            .field("state_checked", &self.state_checked)
            .field("state_used", &self.state_used)
            .finish_non_exhaustive()
    }
}

/// Snapshot of the three instance flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Flags {
    pub exec: bool,
    pub state_checked: bool,
    pub state_used: bool,
}

impl SecureWorld {
    pub(super) fn new(
        sk_dev: KeyMaterial,
        pk_vrf: KeyMaterial,
        registry: Arc<BackendRegistry>,
        storage_mode: StorageMode,
    ) -> Result<Self, CryptoError> {
        let secret = sk_dev
            .secret_part()
            .ok_or_else(|| CryptoError::MissingSecret(sk_dev.scheme().to_owned()))?;
        registry.get(sk_dev.scheme())?;
        let state_mac_key = hmac_sha256(secret, b"posx/state-mac-key");
        Ok(Self {
            sk_dev,
            pk_vrf: pk_vrf.public_only(),
            registry,
            state_mac_key,
            storage_mode,
            c: 0,
            s_sec: BTreeMap::new(),
            epochs: BTreeMap::new(),
            exec: false,
            state_checked: false,
            state_used: false,
        })
    }

    pub fn counter(&self) -> u64 {
        self.c
    }

    pub fn public_key(&self) -> KeyMaterial {
        self.sk_dev.public_only()
    }

    pub fn exec(&self) -> bool {
        self.exec
    }

    pub fn flags(&self) -> Flags {
        Flags {
            exec: self.exec,
            state_checked: self.state_checked,
            state_used: self.state_used,
        }
    }

    pub fn storage_mode(&self) -> StorageMode {
        self.storage_mode
    }

    pub fn commitment(&self, slot: &str) -> Option<&Commitment> {
        self.s_sec.get(slot)
    }

    pub fn epoch(&self, slot: &str) -> u64 {
        self.epochs.get(slot).copied().unwrap_or(0)
    }

    /// Request checks in order: freshness, authenticity, re-entrancy.
    /// Mutates nothing.
    pub(super) fn admit(&self, request: &PoSXRequest) -> Result<(), AbortReason> {
        if request.c_vrf <= self.c {
            return Err(AbortReason::BadCounter);
        }
        if !self
            .registry
            .verify(&self.pk_vrf, &request.sigma_vrf, &request.digest())
        {
            return Err(AbortReason::BadRequestTag);
        }
        if self.exec {
            return Err(AbortReason::AlreadyExecuting);
        }
        Ok(())
    }

    pub(super) fn begin(&mut self, c_vrf: u64) {
        debug_assert!(c_vrf > self.c);
        self.c = c_vrf;
        self.exec = true;
        self.state_checked = false;
        self.state_used = false;
    }

    pub(super) fn state_guard_violated(&self) -> bool {
        self.exec && self.state_used && !self.state_checked
    }

    pub(super) fn prove(&self, h: &Digest, output: &[u8]) -> Result<AuthTag, CryptoError> {
        self.registry.sign(&self.sk_dev, &proof_digest(h, output))
    }

    pub(super) fn reset_flags(&mut self) {
        self.exec = false;
        self.state_checked = false;
        self.state_used = false;
    }

    fn mac_message(slot: &str, s: &[u8], epoch: u64) -> Vec<u8> {
        CanonicalMessage::new()
            .field("f", slot)
            .field("s", s)
            .field_u64("epoch", epoch)
            .encode()
    }

    fn matches_commitment(&self, slot: &str, s: &[u8], tag: Option<&[u8]>) -> bool {
        match self.storage_mode {
            StorageMode::Digest => match self.s_sec.get(slot) {
                Some(Commitment::Digest(d)) => *d == hash(s),
                Some(Commitment::Value(_)) => false,
                None => s.is_empty(),
            },
            StorageMode::FullValue => match self.s_sec.get(slot) {
                Some(Commitment::Value(v)) => v.as_slice() == s,
                Some(Commitment::Digest(_)) => false,
                None => s.is_empty(),
            },
            StorageMode::OutsourcedMac => match self.epoch(slot) {
                0 => s.is_empty(),
                epoch => tag.is_some_and(|t| {
                    hmac_sha256_verify(
                        &self.state_mac_key,
                        &Self::mac_message(slot, s, epoch),
                        t,
                    )
                }),
            },
        }
    }

    /// Sets `state_used`, then `state_checked` to whether `s` matches the
    /// latest commitment for `slot`. `tag` is the Non-Secure copy of the
    /// outsourced MAC and is ignored in the other modes.
    pub fn check_state(
        &mut self,
        slot: &str,
        s: &[u8],
        tag: Option<&[u8]>,
    ) -> Result<bool, GateRejected> {
        if !self.exec {
            return Err(GateRejected);
        }
        self.state_used = true;
        self.state_checked = self.matches_commitment(slot, s, tag);
        Ok(self.state_checked)
    }

    /// Commits `s` for `slot` when the current instance has checked its state.
    /// Returns `Ok(None)` when the guard refuses the update.
    pub fn set_state(&mut self, slot: &str, s: &[u8]) -> Result<Option<SetStateReceipt>, GateRejected> {
        if !self.exec {
            return Err(GateRejected);
        }
        if !self.state_checked {
            return Ok(None);
        }
        let outsourced_tag = match self.storage_mode {
            StorageMode::Digest => {
                self.s_sec
                    .insert(slot.to_owned(), Commitment::Digest(hash(s)));
                None
            }
            StorageMode::FullValue => {
                self.s_sec
                    .insert(slot.to_owned(), Commitment::Value(s.to_vec()));
                None
            }
            StorageMode::OutsourcedMac => {
                let epoch = self.epoch(slot) + 1;
                self.epochs.insert(slot.to_owned(), epoch);
                Some(hmac_sha256(
                    &self.state_mac_key,
                    &Self::mac_message(slot, s, epoch),
                ))
            }
        };
        Ok(Some(SetStateReceipt { outsourced_tag }))
    }
}
