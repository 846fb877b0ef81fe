//! Wire messages and the digests both sides agree on.

use crate::crypto::{hash, AuthTag, CanonicalMessage, Digest};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoSXRequest {
    pub f_id: String,
    pub input: Vec<u8>,
    pub c_vrf: u64,
    pub sigma_vrf: AuthTag,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoSXResponse {
    pub output: Vec<u8>,
    pub sigma: AuthTag,
}

/// Digest authenticated by the verifier's request tag.
pub fn request_digest(f_id: &str, input: &[u8], c_vrf: u64) -> Digest {
    CanonicalMessage::new()
        .field("f", f_id)
        .field("i", input)
        .field_u64("c", c_vrf)
        .digest()
}

/// `h`: the measurement of program memory together with the request parameters.
pub fn measurement(pmem: &[u8], f_id: &str, input: &[u8], c_vrf: u64) -> Digest {
    CanonicalMessage::new()
        .field("pmem", pmem)
        .field("f", f_id)
        .field("i", input)
        .field_u64("c", c_vrf)
        .digest()
}

/// Digest covered by the device proof: the measurement extended with the output.
pub fn proof_digest(h: &Digest, output: &[u8]) -> Digest {
    CanonicalMessage::new()
        .field("h", h)
        .field("o", output)
        .digest()
}

impl PoSXRequest {
    pub fn digest(&self) -> Digest {
        request_digest(&self.f_id, &self.input, self.c_vrf)
    }
}

/// Commitment of the empty state, the value every state slot starts from.
pub fn empty_state_digest() -> Digest {
    hash(&[])
}
