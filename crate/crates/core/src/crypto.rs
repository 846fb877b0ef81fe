//! Canonical encoding, hashing and the pluggable authenticator backends.
//!
//! Every multi-field digest in the protocol is `hash(encode_canonical(fields))`.
//! Backends are addressed by a string identifier; `"mac"` (HMAC-SHA256) and
//! `"sig"` (Ed25519) are always registered, further schemes can be added to a
//! [`BackendRegistry`] at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;

pub const MAC_SCHEME: &str = "mac";
pub const SIG_SCHEME: &str = "sig";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("unknown authenticator scheme `{0}`")]
    UnknownScheme(String),
    #[error("key for scheme `{0}` has no secret part")]
    MissingSecret(String),
    #[error("malformed key material for scheme `{scheme}`: {reason}")]
    MalformedKey { scheme: String, reason: &'static str },
}

/// A SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; DIGEST_LEN]>::try_from(bytes).ok().map(Digest)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl AsRef<[u8]> for Digest {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// An ordered list of labelled octet strings with an injective byte encoding.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CanonicalMessage {
    fields: Vec<(String, Vec<u8>)>,
}

impl CanonicalMessage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(mut self, label: impl Into<String>, value: impl AsRef<[u8]>) -> Self {
        self.push(label, value);
        self
    }

    pub fn field_u64(self, label: impl Into<String>, value: u64) -> Self {
        self.field(label, value.to_le_bytes())
    }

    pub fn push(&mut self, label: impl Into<String>, value: impl AsRef<[u8]>) {
        self.fields.push((label.into(), value.as_ref().to_vec()));
    }

    pub fn fields(&self) -> &[(String, Vec<u8>)] {
        &self.fields
    }

    pub fn get(&self, label: &str) -> Option<&[u8]> {
        self.fields
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, v)| v.as_slice())
    }

    /// `[u32 LE label len ‖ label ‖ u64 LE value len ‖ value]` per field, in order.
    pub fn encode(&self) -> Vec<u8> {
        let total: usize = self
            .fields
            .iter()
            .map(|(l, v)| 12 + l.len() + v.len())
            .sum();
        let mut out = Vec::with_capacity(total);
        for (label, value) in &self.fields {
            out.extend_from_slice(&(label.len() as u32).to_le_bytes());
            out.extend_from_slice(label.as_bytes());
            out.extend_from_slice(&(value.len() as u64).to_le_bytes());
            out.extend_from_slice(value);
        }
        out
    }

    /// Inverse of [`encode`](Self::encode). Returns `None` on truncated input,
    /// trailing bytes or non-UTF-8 labels.
    pub fn decode(mut bytes: &[u8]) -> Option<Self> {
        let mut fields = Vec::new();
        while !bytes.is_empty() {
            let (len, rest) = bytes.split_first_chunk::<4>()?;
            let len = u32::from_le_bytes(*len) as usize;
            if rest.len() < len {
                return None;
            }
            let (label, rest) = rest.split_at(len);
            let label = std::str::from_utf8(label).ok()?.to_owned();
            let (vlen, rest) = rest.split_first_chunk::<8>()?;
            let vlen = usize::try_from(u64::from_le_bytes(*vlen)).ok()?;
            if rest.len() < vlen {
                return None;
            }
            let (value, rest) = rest.split_at(vlen);
            fields.push((label, value.to_vec()));
            bytes = rest;
        }
        Some(Self { fields })
    }

    pub fn digest(&self) -> Digest {
        hash(&self.encode())
    }
}

pub fn encode_canonical(msg: &CanonicalMessage) -> Vec<u8> {
    msg.encode()
}

/// An authenticator produced by [`sign`]; carries the scheme that made it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthTag {
    pub scheme: String,
    pub bytes: Vec<u8>,
}

/// A key pair (or shared key) for one backend. The secret part is never
/// printed and is dropped by [`KeyMaterial::public_only`].
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    scheme: String,
    secret: Option<Vec<u8>>,
    public: Vec<u8>,
}

impl KeyMaterial {
    pub fn new(scheme: impl Into<String>, secret: Option<Vec<u8>>, public: Vec<u8>) -> Self {
        Self {
            scheme: scheme.into(),
            secret,
            public,
        }
    }

    pub fn scheme(&self) -> &str {
        &self.scheme
    }

    pub fn public_part(&self) -> &[u8] {
        &self.public
    }

    pub fn secret_part(&self) -> Option<&[u8]> {
        self.secret.as_deref()
    }

    pub fn public_only(&self) -> KeyMaterial {
        KeyMaterial {
            scheme: self.scheme.clone(),
            secret: None,
            public: self.public.clone(),
        }
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("scheme", &self.scheme)
            .field("secret", &self.secret.as_ref().map(|_| "<redacted>"))
            .field("public", &hex::encode(&self.public))
            .finish()
    }
}

/// One authenticator scheme over 32-byte digests.
pub trait AuthBackend: Send + Sync {
    fn id(&self) -> &str;

    fn generate(&self, rng: &mut dyn RngCore) -> KeyMaterial;

    fn sign(&self, secret: &[u8], digest: &Digest) -> Result<Vec<u8>, CryptoError>;

    fn verify(&self, public: &[u8], tag: &[u8], digest: &Digest) -> bool;
}

/// HMAC-SHA256; the public part equals the secret part.
#[derive(Debug, Default, Clone, Copy)]
pub struct MacBackend;

impl AuthBackend for MacBackend {
    fn id(&self) -> &str {
        MAC_SCHEME
    }

    fn generate(&self, rng: &mut dyn RngCore) -> KeyMaterial {
        let mut key = vec![0u8; 32];
        rng.fill_bytes(&mut key);
        KeyMaterial::new(MAC_SCHEME, Some(key.clone()), key)
    }

    fn sign(&self, secret: &[u8], digest: &Digest) -> Result<Vec<u8>, CryptoError> {
        Ok(hmac_sha256(secret, digest.as_ref()))
    }

    fn verify(&self, public: &[u8], tag: &[u8], digest: &Digest) -> bool {
        let mut mac = HmacSha256::new_from_slice(public).expect("hmac accepts any key length");
        mac.update(digest.as_ref());
        // constant-time comparison
        mac.verify_slice(tag).is_ok()
    }
}

/// Ed25519 signatures over the digest bytes.
#[derive(Debug, Default, Clone, Copy)]
pub struct SigBackend;

impl AuthBackend for SigBackend {
    fn id(&self) -> &str {
        SIG_SCHEME
    }

    fn generate(&self, rng: &mut dyn RngCore) -> KeyMaterial {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let sk = SigningKey::from_bytes(&seed);
        KeyMaterial::new(
            SIG_SCHEME,
            Some(seed.to_vec()),
            sk.verifying_key().to_bytes().to_vec(),
        )
    }

    fn sign(&self, secret: &[u8], digest: &Digest) -> Result<Vec<u8>, CryptoError> {
        let seed: [u8; 32] = secret.try_into().map_err(|_| CryptoError::MalformedKey {
            scheme: SIG_SCHEME.into(),
            reason: "secret must be 32 bytes",
        })?;
        let sk = SigningKey::from_bytes(&seed);
        Ok(sk.sign(digest.as_ref()).to_bytes().to_vec())
    }

    fn verify(&self, public: &[u8], tag: &[u8], digest: &Digest) -> bool {
        let Ok(pk) = <[u8; 32]>::try_from(public) else {
            return false;
        };
        let Ok(vk) = VerifyingKey::from_bytes(&pk) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(tag) else {
            return false;
        };
        vk.verify(digest.as_ref(), &sig).is_ok()
    }
}

pub fn hmac_sha256(key: &[u8], data: &[u8]) -> Vec<u8> {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().to_vec()
}

pub fn hmac_sha256_verify(key: &[u8], data: &[u8], tag: &[u8]) -> bool {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    mac.verify_slice(tag).is_ok()
}

/// Backends by identifier.
#[derive(Clone)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn AuthBackend>>,
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.backends.keys()).finish()
    }
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut reg = Self {
            backends: BTreeMap::new(),
        };
        reg.register(Arc::new(MacBackend));
        reg.register(Arc::new(SigBackend));
        reg
    }
}

impl BackendRegistry {
    /// Adds or replaces a backend under its own identifier.
    pub fn register(&mut self, backend: Arc<dyn AuthBackend>) {
        self.backends.insert(backend.id().to_owned(), backend);
    }

    pub fn get(&self, scheme: &str) -> Result<&Arc<dyn AuthBackend>, CryptoError> {
        self.backends
            .get(scheme)
            .ok_or_else(|| CryptoError::UnknownScheme(scheme.to_owned()))
    }

    pub fn schemes(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    pub fn generate(&self, scheme: &str, rng: &mut dyn RngCore) -> Result<KeyMaterial, CryptoError> {
        Ok(self.get(scheme)?.generate(rng))
    }

    pub fn sign(&self, key: &KeyMaterial, digest: &Digest) -> Result<AuthTag, CryptoError> {
        let backend = self.get(&key.scheme)?;
        let secret = key
            .secret_part()
            .ok_or_else(|| CryptoError::MissingSecret(key.scheme.clone()))?;
        Ok(AuthTag {
            scheme: key.scheme.clone(),
            bytes: backend.sign(secret, digest)?,
        })
    }

    pub fn verify(&self, key: &KeyMaterial, tag: &AuthTag, digest: &Digest) -> bool {
        if key.scheme != tag.scheme {
            return false;
        }
        match self.get(&key.scheme) {
            Ok(backend) => backend.verify(&key.public, &tag.bytes, digest),
            Err(_) => false,
        }
    }
}

/// The process-wide registry holding the built-in backends.
pub fn default_registry() -> &'static BackendRegistry {
    static REGISTRY: OnceLock<BackendRegistry> = OnceLock::new();
    REGISTRY.get_or_init(BackendRegistry::default)
}

pub fn sign(key: &KeyMaterial, digest: &Digest) -> Result<AuthTag, CryptoError> {
    default_registry().sign(key, digest)
}

pub fn verify(key: &KeyMaterial, tag: &AuthTag, digest: &Digest) -> bool {
    default_registry().verify(key, tag, digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn keys(rng: &mut ChaCha20Rng) -> Vec<KeyMaterial> {
        vec![MacBackend.generate(rng), SigBackend.generate(rng)]
    }

    #[test]
    fn empty_message_encodes_to_nothing() {
        assert!(CanonicalMessage::new().encode().is_empty());
    }

    #[test]
    fn single_field_layout() {
        let enc = CanonicalMessage::new().field("c", [0x01]).encode();
        let mut expected = vec![1, 0, 0, 0, b'c'];
        expected.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0, 0x01]);
        assert_eq!(enc, expected);
    }

    #[test]
    fn swapped_two_field_orders_differ() {
        // every pair of distinct (label, value) fields over a small 1-byte alphabet
        let alphabet = [b'a', b'b', 0u8, 0xff];
        for &l1 in &alphabet {
            for &v1 in &alphabet {
                for &l2 in &alphabet {
                    for &v2 in &alphabet {
                        if (l1, v1) == (l2, v2) {
                            continue;
                        }
                        let lab = |b: u8| String::from_utf8_lossy(&[b]).into_owned();
                        let ab = CanonicalMessage::new()
                            .field(lab(l1), [v1])
                            .field(lab(l2), [v2]);
                        let ba = CanonicalMessage::new()
                            .field(lab(l2), [v2])
                            .field(lab(l1), [v1]);
                        if ab.fields() != ba.fields() {
                            assert_ne!(ab.encode(), ba.encode());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn decode_inverts_encode_and_rejects_garbage() {
        let msg = CanonicalMessage::new()
            .field("pmem", vec![0xffu8; 40])
            .field("", [])
            .field_u64("c", 9);
        assert_eq!(CanonicalMessage::decode(&msg.encode()), Some(msg.clone()));
        let mut enc = msg.encode();
        enc.pop();
        assert_eq!(CanonicalMessage::decode(&enc), None);
    }

    #[test]
    fn sha256_empty_vector() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_ne!(hash(hash(b"").as_ref()), hash(b""));
    }

    #[test]
    fn single_bit_differences_change_digest() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..100 {
            let len = rng.gen_range(1..64);
            let mut a = vec![0u8; len];
            rng.fill_bytes(&mut a);
            let mut b = a.clone();
            let bit = rng.gen_range(0..len * 8);
            b[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(hash(&a), hash(&b));
        }
    }

    #[test]
    fn sign_verify_round_trip_per_backend() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let d = hash(b"request");
        for key in keys(&mut rng) {
            let tag = sign(&key, &d).unwrap();
            assert!(verify(&key.public_only(), &tag, &d));
            assert!(!verify(&key.public_only(), &tag, &hash(b"other")));
            let mut short = tag.clone();
            short.bytes.pop();
            assert!(!verify(&key, &short, &d));
        }
    }

    #[test]
    fn cross_backend_verification_fails() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let d = hash(b"x");
        let ks = keys(&mut rng);
        let mac_tag = sign(&ks[0], &d).unwrap();
        let sig_tag = sign(&ks[1], &d).unwrap();
        assert!(!verify(&ks[1], &mac_tag, &d));
        assert!(!verify(&ks[0], &sig_tag, &d));
        // same bytes relabelled as the other scheme are still rejected
        let relabelled = AuthTag {
            scheme: SIG_SCHEME.into(),
            bytes: mac_tag.bytes.clone(),
        };
        assert!(!verify(&ks[1], &relabelled, &d));
    }

    #[test]
    fn random_forgeries_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let d = hash(b"target");
        for key in keys(&mut rng) {
            let len = sign(&key, &d).unwrap().bytes.len();
            for _ in 0..1000 {
                let mut bytes = vec![0u8; len];
                rng.fill_bytes(&mut bytes);
                let forged = AuthTag {
                    scheme: key.scheme().into(),
                    bytes,
                };
                assert!(!verify(&key, &forged, &d));
            }
        }
    }

    #[test]
    fn single_bit_flips_of_digest_or_tag_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for key in keys(&mut rng) {
            for _ in 0..100 {
                let mut raw = [0u8; 32];
                rng.fill_bytes(&mut raw);
                let d = Digest(raw);
                let tag = sign(&key, &d).unwrap();

                let mut d2 = d;
                let bit = rng.gen_range(0..256);
                d2.0[bit / 8] ^= 1 << (bit % 8);
                assert!(!verify(&key, &tag, &d2));

                let mut t2 = tag.clone();
                let bit = rng.gen_range(0..t2.bytes.len() * 8);
                t2.bytes[bit / 8] ^= 1 << (bit % 8);
                assert!(!verify(&key, &t2, &d));
            }
        }
    }

    #[test]
    fn mac_signing_is_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let key = MacBackend.generate(&mut rng);
        let d = hash(b"d");
        assert_eq!(sign(&key, &d).unwrap(), sign(&key, &d).unwrap());
    }

    #[test]
    fn unknown_scheme_and_missing_secret() {
        let d = hash(b"");
        let bogus = KeyMaterial::new("pq", Some(vec![1]), vec![1]);
        assert_eq!(
            sign(&bogus, &d),
            Err(CryptoError::UnknownScheme("pq".into()))
        );
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let pk = SigBackend.generate(&mut rng).public_only();
        assert!(matches!(sign(&pk, &d), Err(CryptoError::MissingSecret(_))));
    }

    #[test]
    fn debug_output_redacts_secret() {
        let key = KeyMaterial::new(MAC_SCHEME, Some(vec![0xab; 4]), vec![0xcd; 4]);
        let s = format!("{key:?}");
        assert!(s.contains("redacted"));
        assert!(!s.contains("abababab"));
    }

    #[test]
    fn registry_accepts_extension_backend() {
        struct Xor;
        impl AuthBackend for Xor {
            fn id(&self) -> &str {
                "xor"
            }
            fn generate(&self, _rng: &mut dyn RngCore) -> KeyMaterial {
                KeyMaterial::new("xor", Some(vec![0x5a]), vec![0x5a])
            }
            fn sign(&self, secret: &[u8], digest: &Digest) -> Result<Vec<u8>, CryptoError> {
                Ok(digest.0.iter().map(|b| b ^ secret[0]).collect())
            }
            fn verify(&self, public: &[u8], tag: &[u8], digest: &Digest) -> bool {
                self.sign(public, digest).map(|t| t == tag).unwrap_or(false)
            }
        }
        let mut reg = BackendRegistry::default();
        reg.register(Arc::new(Xor));
        assert_eq!(reg.schemes().collect::<Vec<_>>(), ["mac", "sig", "xor"]);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let key = reg.generate("xor", &mut rng).unwrap();
        let d = hash(b"ext");
        let tag = reg.sign(&key, &d).unwrap();
        assert!(reg.verify(&key, &tag, &d));
    }
}
