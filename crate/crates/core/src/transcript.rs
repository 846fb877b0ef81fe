//! Hash-chained run transcripts.
//!
//! One record per line: `<tag> <hex>`, where the hex is the lowercase
//! canonical encoding of the record fields followed by a `link` field.
//! `link = hash(prev_link ‖ tag ‖ body)` with an all-zero link before the
//! first record, so any byte change anywhere breaks every later link.
//! Response records repeat the request parameters so each proof can be
//! rechecked offline from the expected image and the device key.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::apps::Phase;
use crate::crypto::{AuthTag, BackendRegistry, CanonicalMessage, Digest, KeyMaterial, DIGEST_LEN};
use crate::device::{AbortReason, DeviceEvent};
use crate::protocol::{PoSXRequest, PoSXResponse};
use crate::verifier::{validate_proof, DeviceId, Verdict};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: hash chain broken")]
    BrokenChain { line: usize },
    #[error("line {line}: no key for device {device}")]
    MissingKey { line: usize, device: DeviceId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RecordKind {
    Request,
    Tamper,
    Transition,
    Response,
    NoResponse,
    Verdict,
}

impl RecordKind {
    pub const ALL: [RecordKind; 6] = [
        RecordKind::Request,
        RecordKind::Tamper,
        RecordKind::Transition,
        RecordKind::Response,
        RecordKind::NoResponse,
        RecordKind::Verdict,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            RecordKind::Request => "request",
            RecordKind::Tamper => "tamper",
            RecordKind::Transition => "transition",
            RecordKind::Response => "response",
            RecordKind::NoResponse => "no_response",
            RecordKind::Verdict => "verdict",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub kind: RecordKind,
    pub phase: Phase,
    pub device: DeviceId,
    /// Position within the device's own history.
    pub seq: u64,
    pub body: CanonicalMessage,
}

fn request_fields(msg: CanonicalMessage, req: &PoSXRequest) -> CanonicalMessage {
    msg.field("f", &req.f_id)
        .field("i", &req.input)
        .field_u64("c", req.c_vrf)
}

impl Record {
    pub fn request(phase: Phase, device: DeviceId, seq: u64, req: &PoSXRequest) -> Self {
        let body = request_fields(CanonicalMessage::new(), req)
            .field("sigma_scheme", &req.sigma_vrf.scheme)
            .field("sigma_vrf", &req.sigma_vrf.bytes);
        Self::new(RecordKind::Request, phase, device, seq, body)
    }

    pub fn tamper(phase: Phase, device: DeviceId, seq: u64, target: &str, detail: &str) -> Self {
        let body = CanonicalMessage::new()
            .field("target", target)
            .field("detail", detail);
        Self::new(RecordKind::Tamper, phase, device, seq, body)
    }

    pub fn transition(phase: Phase, device: DeviceId, seq: u64, event: &DeviceEvent) -> Self {
        let body = CanonicalMessage::new().field("event", describe_event(event));
        Self::new(RecordKind::Transition, phase, device, seq, body)
    }

    /// `req` is the request the verifier issued; the proof is checked against it.
    pub fn response(
        phase: Phase,
        device: DeviceId,
        seq: u64,
        req: &PoSXRequest,
        resp: &PoSXResponse,
    ) -> Self {
        let body = request_fields(CanonicalMessage::new(), req)
            .field("o", &resp.output)
            .field("scheme", &resp.sigma.scheme)
            .field("sigma", &resp.sigma.bytes);
        Self::new(RecordKind::Response, phase, device, seq, body)
    }

    pub fn no_response(
        phase: Phase,
        device: DeviceId,
        seq: u64,
        req: &PoSXRequest,
        reason: &str,
    ) -> Self {
        let body = request_fields(CanonicalMessage::new(), req).field("reason", reason);
        Self::new(RecordKind::NoResponse, phase, device, seq, body)
    }

    pub fn verdict(
        phase: Phase,
        device: DeviceId,
        seq: u64,
        c_vrf: u64,
        verdict: Verdict,
        abort: Option<AbortReason>,
    ) -> Self {
        let body = CanonicalMessage::new()
            .field_u64("c", c_vrf)
            .field("verdict", verdict.to_string())
            .field("abort", abort.map_or("", AbortReason::as_str));
        Self::new(RecordKind::Verdict, phase, device, seq, body)
    }

    fn new(kind: RecordKind, phase: Phase, device: DeviceId, seq: u64, body: CanonicalMessage) -> Self {
        Self {
            kind,
            phase,
            device,
            seq,
            body,
        }
    }

    /// Header plus body, without the link.
    fn unlinked(&self) -> CanonicalMessage {
        let mut msg = CanonicalMessage::new()
            .field("phase", self.phase.as_str())
            .field_u64("device", self.device as u64)
            .field_u64("seq", self.seq);
        for (label, value) in self.body.fields() {
            msg.push(label.clone(), value);
        }
        msg
    }
}

fn describe_event(event: &DeviceEvent) -> String {
    match event {
        DeviceEvent::Begin { f_id, c } => format!("begin f={f_id} c={c}"),
        DeviceEvent::CheckState { slot, ok } => format!("check_state slot={slot} ok={ok}"),
        DeviceEvent::SetState { slot, accepted } => {
            format!("set_state slot={slot} accepted={accepted}")
        }
        DeviceEvent::EventSuppressed(kind) => format!("event_suppressed {kind}"),
        DeviceEvent::EventDelivered(kind) => format!("event_delivered {kind}"),
        DeviceEvent::Abort(reason) => format!("abort {}", reason.as_str()),
        DeviceEvent::Complete => "complete".to_owned(),
    }
}

fn chain(prev: &Digest, tag: &str, body: &[u8]) -> Digest {
    CanonicalMessage::new()
        .field("prev", prev)
        .field("tag", tag)
        .field("body", body)
        .digest()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    records: Vec<Record>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Puts records in canonical order: phase, device, then sequence number.
    pub fn sort_canonical(&mut self) {
        self.records.sort_by_key(|r| (r.phase, r.device, r.seq));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut link = Digest([0; DIGEST_LEN]);
        for r in &self.records {
            let tag = r.kind.tag();
            let mut msg = r.unlinked();
            link = chain(&link, tag, &msg.encode());
            msg.push("link", link);
            out.push_str(tag);
            out.push(' ');
            out.push_str(&hex::encode(msg.encode()));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// A transcript line after its link has been checked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedRecord {
    pub line: usize,
    pub kind: RecordKind,
    pub phase: Phase,
    pub device: DeviceId,
    pub seq: u64,
    /// All fields except `link`.
    pub body: CanonicalMessage,
}

impl ParsedRecord {
    pub fn text(&self, label: &str) -> Option<&str> {
        std::str::from_utf8(self.body.get(label)?).ok()
    }

    pub fn u64(&self, label: &str) -> Option<u64> {
        Some(u64::from_le_bytes(self.body.get(label)?.try_into().ok()?))
    }

    /// The issued request and the received response of a `response` record.
    pub fn exchange(&self) -> Option<(PoSXRequest, PoSXResponse)> {
        if self.kind != RecordKind::Response {
            return None;
        }
        let scheme = self.text("scheme")?.to_owned();
        let request = PoSXRequest {
            f_id: self.text("f")?.to_owned(),
            input: self.body.get("i")?.to_vec(),
            c_vrf: self.u64("c")?,
            // not carried; only the device proof is rechecked
            sigma_vrf: AuthTag {
                scheme: scheme.clone(),
                bytes: Vec::new(),
            },
        };
        let response = PoSXResponse {
            output: self.body.get("o")?.to_vec(),
            sigma: AuthTag {
                scheme,
                bytes: self.body.get("sigma")?.to_vec(),
            },
        };
        Some((request, response))
    }
}

/// Parses a transcript and checks its hash chain and encoding.
pub fn parse_transcript(text: &str) -> Result<Vec<ParsedRecord>, TranscriptError> {
    let mut out = Vec::new();
    let mut link = Digest([0; DIGEST_LEN]);
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let bad = |reason: &str| TranscriptError::Malformed {
            line,
            reason: reason.to_owned(),
        };
        let (tag, hex_body) = raw.split_once(' ').ok_or_else(|| bad("expected `<tag> <hex>`"))?;
        let kind = RecordKind::parse(tag).ok_or_else(|| bad("unknown record tag"))?;
        if hex_body.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(bad("hex must be lowercase"));
        }
        let bytes = hex::decode(hex_body).map_err(|e| bad(&e.to_string()))?;
        let msg = CanonicalMessage::decode(&bytes).ok_or_else(|| bad("not a canonical message"))?;
        let fields = msg.fields();
        let Some(((last_label, last_value), head)) = fields.split_last() else {
            return Err(bad("empty record"));
        };
        if last_label != "link" {
            return Err(bad("record must end with its link"));
        }
        let mut unlinked = CanonicalMessage::new();
        for (label, value) in head {
            unlinked.push(label.clone(), value);
        }
        let expect = chain(&link, tag, &unlinked.encode());
        if last_value.as_slice() != expect.as_ref() {
            return Err(TranscriptError::BrokenChain { line });
        }
        link = expect;

        let header = |label: &str| unlinked.get(label).ok_or_else(|| bad("missing header field"));
        let phase = std::str::from_utf8(header("phase")?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad phase"))?;
        let int = |label: &str| -> Result<u64, TranscriptError> {
            Ok(u64::from_le_bytes(
                header(label)?.try_into().map_err(|_| bad("bad integer field"))?,
            ))
        };
        let device = usize::try_from(int("device")?).map_err(|_| bad("device id too large"))?;
        let seq = int("seq")?;
        let mut body = CanonicalMessage::new();
        for (label, value) in head.iter().skip(3) {
            body.push(label.clone(), value);
        }
        out.push(ParsedRecord {
            line,
            kind,
            phase,
            device,
            seq,
            body,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProofCheck {
    pub line: usize,
    pub device: DeviceId,
    pub c_vrf: u64,
    pub valid: bool,
}

/// Rechecks σ of every response record against `pmem_expected` and the
/// device keys.
pub fn verify_transcript(
    text: &str,
    registry: &BackendRegistry,
    pmem_expected: &[u8],
    keys: &BTreeMap<DeviceId, KeyMaterial>,
) -> Result<Vec<ProofCheck>, TranscriptError> {
    let mut checks = Vec::new();
    for rec in parse_transcript(text)? {
        if rec.kind != RecordKind::Response {
            continue;
        }
        let (req, resp) = rec.exchange().ok_or_else(|| TranscriptError::Malformed {
            line: rec.line,
            reason: "incomplete response record".into(),
        })?;
        let key = keys.get(&rec.device).ok_or(TranscriptError::MissingKey {
            line: rec.line,
            device: rec.device,
        })?;
        checks.push(ProofCheck {
            line: rec.line,
            device: rec.device,
            c_vrf: req.c_vrf,
            valid: validate_proof(registry, key, pmem_expected, &req, &resp),
        });
    }
    Ok(checks)
}

/// Key file: one `<device> <scheme> <hex public key>` line per device.
pub fn parse_key_file(text: &str) -> Result<BTreeMap<DeviceId, KeyMaterial>, TranscriptError> {
    let mut keys = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| TranscriptError::Malformed {
            line,
            reason: reason.to_owned(),
        };
        let parts: Vec<&str> = raw.split_whitespace().collect();
        let [device, scheme, public] = parts.as_slice() else {
            return Err(bad("expected `<device> <scheme> <hex>`"));
        };
        let device = device.parse().map_err(|_| bad("bad device id"))?;
        let public = hex::decode(public).map_err(|e| bad(&e.to_string()))?;
        keys.insert(device, KeyMaterial::new(*scheme, None, public));
    }
    Ok(keys)
}

pub fn format_key_file(keys: &BTreeMap<DeviceId, KeyMaterial>) -> String {
    keys.iter()
        .map(|(d, k)| format!("{d} {} {}\n", k.scheme(), hex::encode(k.public_part())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;

    fn sample() -> Transcript {
        let req = PoSXRequest {
            f_id: "f".into(),
            input: vec![1, 2],
            c_vrf: 3,
            sigma_vrf: AuthTag {
                scheme: "mac".into(),
                bytes: vec![9; 32],
            },
        };
        let resp = PoSXResponse {
            output: vec![7],
            sigma: AuthTag {
                scheme: "mac".into(),
                bytes: vec![8; 32],
            },
        };
        let mut t = Transcript::new();
        t.push(Record::verdict(Phase::Collect, 0, 3, 3, Verdict::Accept, None));
        t.push(Record::request(Phase::Setup, 1, 0, &req));
        t.push(Record::request(Phase::Setup, 0, 0, &req));
        t.push(Record::transition(Phase::Setup, 0, 1, &DeviceEvent::Complete));
        t.push(Record::response(Phase::Setup, 0, 2, &req, &resp));
        t.sort_canonical();
        t
    }

    #[test]
    fn canonical_order_and_round_trip() {
        let t = sample();
        let order: Vec<_> = t.records().iter().map(|r| (r.phase, r.device, r.seq)).collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);

        let parsed = parse_transcript(&t.to_text()).unwrap();
        assert_eq!(parsed.len(), t.len());
        for (p, r) in parsed.iter().zip(t.records()) {
            assert_eq!((p.kind, p.phase, p.device, p.seq), (r.kind, r.phase, r.device, r.seq));
            assert_eq!(p.body, r.body);
        }
        let (req, resp) = parsed[2].exchange().unwrap();
        assert_eq!((req.c_vrf, resp.output), (3, vec![7]));
    }

    #[test]
    fn every_single_byte_mutation_is_caught() {
        let text = sample().to_text();
        let bytes = text.as_bytes();
        for pos in 0..bytes.len() {
            for replacement in [b'0', b'f', b'x', b'A'] {
                if bytes[pos] == replacement {
                    continue;
                }
                let mut m = bytes.to_vec();
                m[pos] = replacement;
                let m = String::from_utf8(m).unwrap();
                assert!(parse_transcript(&m).is_err(), "mutation at {pos} accepted");
            }
        }
    }

    #[test]
    fn dropped_or_reordered_lines_break_the_chain() {
        let text = sample().to_text();
        let lines: Vec<&str> = text.lines().collect();
        let dropped = lines[1..].join("\n");
        assert!(parse_transcript(&dropped).is_err());
        let mut swapped = lines.clone();
        swapped.swap(1, 2);
        assert!(matches!(
            parse_transcript(&swapped.join("\n")),
            Err(TranscriptError::BrokenChain { .. })
        ));
    }

    #[test]
    fn key_file_round_trip() {
        let mut keys = BTreeMap::new();
        keys.insert(2, KeyMaterial::new("sig", None, hash(b"a").as_ref().to_vec()));
        keys.insert(0, KeyMaterial::new("mac", None, vec![1, 2, 3]));
        assert_eq!(parse_key_file(&format_key_file(&keys)).unwrap(), keys);
        assert!(parse_key_file("0 mac zz").is_err());
        assert!(parse_key_file("0 mac").is_err());
    }
}
