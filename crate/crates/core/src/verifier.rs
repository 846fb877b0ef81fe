//! The remote verifier: request issuance, proof validation and binary
//! inspection.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::crypto::{BackendRegistry, CryptoError, KeyMaterial};
use crate::device::BehaviorMeta;
use crate::protocol::{measurement, proof_digest, request_digest, PoSXRequest, PoSXResponse};

pub type DeviceId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifierError {
    #[error("device {0} is not registered")]
    UnknownDevice(DeviceId),
    #[error("function `{f_id}` is not expected on device {device}")]
    UnknownFunction { device: DeviceId, f_id: String },
    #[error("challenge counter exhausted")]
    CounterOverflow,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// What the verifier expects a function binary to look like.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpectedFunction {
    pub meta: BehaviorMeta,
    pub stateful: bool,
}

impl ExpectedFunction {
    /// Stateful functions need all three behaviors; stateless ones only
    /// need to keep interrupts disabled.
    pub fn adheres(&self) -> bool {
        let m = self.meta;
        if self.stateful {
            m.checkstate_first && m.setstate_last && m.no_interrupt_enable
        } else {
            m.no_interrupt_enable
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeviceRecord {
    pub pk_dev: KeyMaterial,
    pub pmem_expected: Vec<u8>,
    pub expected: BTreeMap<String, ExpectedFunction>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FailureCause {
    NoResponse,
    BadProof,
    BadBinaryMetadata,
}

impl FailureCause {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureCause::NoResponse => "no_response",
            FailureCause::BadProof => "bad_proof",
            FailureCause::BadBinaryMetadata => "bad_binary_metadata",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            FailureCause::NoResponse,
            FailureCause::BadProof,
            FailureCause::BadBinaryMetadata,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
    }
}

/// `Accept` is ⊤; `Reject` is ⊥ together with its cause.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Accept,
    Reject(FailureCause),
}

impl Verdict {
    pub fn is_accept(self) -> bool {
        matches!(self, Verdict::Accept)
    }

    pub fn failure_cause(self) -> Option<FailureCause> {
        match self {
            Verdict::Accept => None,
            Verdict::Reject(c) => Some(c),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Accept => f.write_str("accept"),
            Verdict::Reject(c) => write!(f, "reject:{}", c.as_str()),
        }
    }
}

pub struct VerifierState {
    sk_vrf: KeyMaterial,
    registry: Arc<BackendRegistry>,
    devices: BTreeMap<DeviceId, DeviceRecord>,
    c_vrf: u64,
}

impl fmt::Debug for VerifierState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VerifierState")
            .field("scheme", &self.sk_vrf.scheme())
            .field("devices", &self.devices.keys().collect::<Vec<_>>())
            .field("c_vrf", &self.c_vrf)
            .finish()
    }
}

impl VerifierState {
    pub fn new(sk_vrf: KeyMaterial, registry: Arc<BackendRegistry>) -> Result<Self, VerifierError> {
        registry.get(sk_vrf.scheme())?;
        if sk_vrf.secret_part().is_none() {
            return Err(CryptoError::MissingSecret(sk_vrf.scheme().to_owned()).into());
        }
        Ok(Self {
            sk_vrf,
            registry,
            devices: BTreeMap::new(),
            c_vrf: 0,
        })
    }

    /// Key devices use to authenticate requests. Under the MAC backend this
    /// is the shared secret.
    pub fn pk_vrf(&self) -> KeyMaterial {
        self.sk_vrf.public_only()
    }

    pub fn counter(&self) -> u64 {
        self.c_vrf
    }

    pub fn register_device(&mut self, id: DeviceId, record: DeviceRecord) {
        self.devices.insert(id, record);
    }

    pub fn device(&self, id: DeviceId) -> Option<&DeviceRecord> {
        self.devices.get(&id)
    }

    pub fn make_request(
        &mut self,
        device: DeviceId,
        f_id: &str,
        input: &[u8],
    ) -> Result<PoSXRequest, VerifierError> {
        let record = self
            .devices
            .get(&device)
            .ok_or(VerifierError::UnknownDevice(device))?;
        if !record.expected.contains_key(f_id) {
            return Err(VerifierError::UnknownFunction {
                device,
                f_id: f_id.to_owned(),
            });
        }
        let c_vrf = self
            .c_vrf
            .checked_add(1)
            .ok_or(VerifierError::CounterOverflow)?;
        let sigma_vrf = self
            .registry
            .sign(&self.sk_vrf, &request_digest(f_id, input, c_vrf))?;
        self.c_vrf = c_vrf;
        Ok(PoSXRequest {
            f_id: f_id.to_owned(),
            input: input.to_vec(),
            c_vrf,
            sigma_vrf,
        })
    }

    #[cfg(test)]
    pub(crate) fn set_counter(&mut self, c: u64) {
        self.c_vrf = c;
    }

    pub fn inspect_binary(&self, device: DeviceId, f_id: &str) -> bool {
        self.devices
            .get(&device)
            .and_then(|r| r.expected.get(f_id))
            .is_some_and(ExpectedFunction::adheres)
    }

    /// Checks σ against the expected program image, then the binary's
    /// declared behaviors. `None` means nothing came back.
    pub fn validate_posx(
        &self,
        device: DeviceId,
        request: &PoSXRequest,
        response: Option<&PoSXResponse>,
    ) -> Verdict {
        let Some(response) = response else {
            return Verdict::Reject(FailureCause::NoResponse);
        };
        let Some(record) = self.devices.get(&device) else {
            return Verdict::Reject(FailureCause::BadProof);
        };
        if !validate_proof(
            &self.registry,
            &record.pk_dev,
            &record.pmem_expected,
            request,
            response,
        ) {
            return Verdict::Reject(FailureCause::BadProof);
        }
        if !self.inspect_binary(device, &request.f_id) {
            return Verdict::Reject(FailureCause::BadBinaryMetadata);
        }
        Verdict::Accept
    }
}

/// The signature half of validation, usable offline with just the key and
/// the expected image.
pub fn validate_proof(
    registry: &BackendRegistry,
    pk_dev: &KeyMaterial,
    pmem_expected: &[u8],
    request: &PoSXRequest,
    response: &PoSXResponse,
) -> bool {
    let h = measurement(pmem_expected, &request.f_id, &request.input, request.c_vrf);
    registry.verify(pk_dev, &response.sigma, &proof_digest(&h, &response.output))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn verifier(scheme: &str) -> VerifierState {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let registry = Arc::new(BackendRegistry::default());
        let sk = registry.generate(scheme, &mut rng).unwrap();
        let pk_dev = registry.generate(scheme, &mut rng).unwrap().public_only();
        let mut v = VerifierState::new(sk, registry).unwrap();
        let mut expected = BTreeMap::new();
        expected.insert(
            "f".to_owned(),
            ExpectedFunction {
                meta: BehaviorMeta::COMPLIANT,
                stateful: true,
            },
        );
        expected.insert(
            "pure".to_owned(),
            ExpectedFunction {
                meta: BehaviorMeta::STATELESS,
                stateful: false,
            },
        );
        expected.insert(
            "irq".to_owned(),
            ExpectedFunction {
                meta: BehaviorMeta {
                    no_interrupt_enable: false,
                    ..BehaviorMeta::COMPLIANT
                },
                stateful: true,
            },
        );
        v.register_device(
            0,
            DeviceRecord {
                pk_dev,
                pmem_expected: vec![0xff; 64],
                expected,
            },
        );
        v
    }

    #[test]
    fn counters_strictly_increase_and_requests_self_verify() {
        for scheme in ["mac", "sig"] {
            let mut v = verifier(scheme);
            let a = v.make_request(0, "f", b"x").unwrap();
            let b = v.make_request(0, "f", b"x").unwrap();
            assert!(b.c_vrf > a.c_vrf);
            assert!(v.registry.verify(&v.pk_vrf(), &a.sigma_vrf, &a.digest()));
        }
    }

    #[test]
    fn unregistered_function_or_device_is_an_error() {
        let mut v = verifier("mac");
        assert!(matches!(
            v.make_request(0, "nope", b""),
            Err(VerifierError::UnknownFunction { .. })
        ));
        assert_eq!(
            v.make_request(9, "f", b""),
            Err(VerifierError::UnknownDevice(9))
        );
        assert_eq!(v.counter(), 0);
    }

    #[test]
    fn counter_overflow_is_hard_error() {
        let mut v = verifier("sig");
        v.set_counter(u64::MAX);
        assert_eq!(
            v.make_request(0, "f", b""),
            Err(VerifierError::CounterOverflow)
        );
        assert_eq!(v.counter(), u64::MAX);
    }

    #[test]
    fn inspection_rules() {
        let v = verifier("mac");
        assert!(v.inspect_binary(0, "f"));
        assert!(v.inspect_binary(0, "pure"));
        assert!(!v.inspect_binary(0, "irq"));
        assert!(!v.inspect_binary(0, "missing"));
    }

    #[test]
    fn missing_response_is_no_response() {
        let mut v = verifier("mac");
        let req = v.make_request(0, "f", b"").unwrap();
        assert_eq!(
            v.validate_posx(0, &req, None),
            Verdict::Reject(FailureCause::NoResponse)
        );
    }
}
