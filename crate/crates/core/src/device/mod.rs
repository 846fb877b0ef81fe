//! The prover: a Non-Secure World holding program memory and registered
//! functions, and a Secure World running `Execute`, `CheckState` and
//! `SetState`.
//!
//! Isolation is enforced by visibility. The Secure World is private to this
//! module; Non-Secure code (function bodies, the harness, adversaries) can
//! only reach it through [`Device::execute`] and the gates exposed on
//! [`ExecutionContext`] and [`Device::check_state`]/[`Device::set_state`],
//! which refuse to act outside an active instance.

mod function;
mod secure;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use function::{Behavior, BehaviorMeta, ExecutionContext, FunctionBinary, FunctionFault};
pub use secure::{Commitment, Flags, GateRejected, SecureWorld, SetStateReceipt, StorageMode};

use crate::crypto::{BackendRegistry, CryptoError, Digest, KeyMaterial};
use crate::protocol::{measurement, PoSXRequest, PoSXResponse};
use crate::rng::{DeviceStreams, StreamRng};

pub const DEFAULT_PMEM_SIZE: usize = 32 * 1024;
pub const PMEM_FILL: u8 = 0xFF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AbortReason {
    BadCounter,
    BadRequestTag,
    AlreadyExecuting,
    StateCheckFailed,
    FunctionFault,
}

impl AbortReason {
    pub fn as_str(self) -> &'static str {
        match self {
            AbortReason::BadCounter => "bad_counter",
            AbortReason::BadRequestTag => "bad_request_tag",
            AbortReason::AlreadyExecuting => "already_executing",
            AbortReason::StateCheckFailed => "state_check_failed",
            AbortReason::FunctionFault => "function_fault",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            AbortReason::BadCounter,
            AbortReason::BadRequestTag,
            AbortReason::AlreadyExecuting,
            AbortReason::StateCheckFailed,
            AbortReason::FunctionFault,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Either a response or the reason no proof was produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExecutionOutcome {
    Response(PoSXResponse),
    Aborted(AbortReason),
}

impl ExecutionOutcome {
    pub fn response(&self) -> Option<&PoSXResponse> {
        match self {
            ExecutionOutcome::Response(r) => Some(r),
            ExecutionOutcome::Aborted(_) => None,
        }
    }

    pub fn abort_reason(&self) -> Option<AbortReason> {
        match self {
            ExecutionOutcome::Response(_) => None,
            ExecutionOutcome::Aborted(r) => Some(*r),
        }
    }
}

/// Overwrite `bytes` at `offset`, growing the target with zeros if needed.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BytePatch {
    pub offset: usize,
    pub bytes: Vec<u8>,
}

impl BytePatch {
    pub fn new(offset: usize, bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            offset,
            bytes: bytes.into(),
        }
    }

    pub fn apply(&self, target: &mut Vec<u8>) {
        let end = self.offset + self.bytes.len();
        if target.len() < end {
            target.resize(end, 0);
        }
        target[self.offset..end].copy_from_slice(&self.bytes);
    }

    /// Like [`apply`](Self::apply) but never grows the target; bytes past the
    /// end are dropped.
    pub fn apply_in_place(&self, target: &mut [u8]) {
        for (i, b) in self.bytes.iter().enumerate() {
            if let Some(slot) = target.get_mut(self.offset + i) {
                *slot = *b;
            }
        }
    }
}

/// Asynchronous events reaching the device (interrupts, DMA, a compromised
/// Non-Secure task). Delivery mutates Non-Secure memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AsyncEvent {
    Tick,
    PatchPmem(BytePatch),
    PatchState { slot: String, patch: BytePatch },
}

impl AsyncEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            AsyncEvent::Tick => "tick",
            AsyncEvent::PatchPmem(_) => "patch_pmem",
            AsyncEvent::PatchState { .. } => "patch_state",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeliveryReport {
    Delivered,
    /// Held back because the atomic window was open; delivered when it closes.
    Suppressed,
}

/// Device-side transitions, in the order they happened.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DeviceEvent {
    Begin { f_id: String, c: u64 },
    CheckState { slot: String, ok: bool },
    SetState { slot: String, accepted: bool },
    EventSuppressed(&'static str),
    EventDelivered(&'static str),
    Abort(AbortReason),
    Complete,
}

/// Source of raw sensor readings for function bodies.
pub trait Sensor: Send {
    fn read(&mut self, rng: &mut StreamRng) -> Vec<u8>;
}

/// Returns an empty reading.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSensor;

impl Sensor for NullSensor {
    fn read(&mut self, _rng: &mut StreamRng) -> Vec<u8> {
        Vec::new()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistrationError {
    #[error("function `{0}` is already registered")]
    Duplicate(String),
    #[error("range {offset}..{end} exceeds program memory of {size} bytes")]
    OutOfRange { offset: usize, end: usize, size: usize },
    #[error("range {offset}..{end} overlaps function `{other}`")]
    Overlap { offset: usize, end: usize, other: String },
}

pub struct NonSecureWorld {
    pmem: Vec<u8>,
    layout: BTreeMap<String, (usize, usize)>,
    functions: BTreeMap<String, FunctionBinary>,
    pub(crate) state_store: BTreeMap<String, Vec<u8>>,
    pub(crate) state_tags: BTreeMap<String, Vec<u8>>,
    sensor: Box<dyn Sensor>,
    streams: DeviceStreams,
}

impl fmt::Debug for NonSecureWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonSecureWorld")
            .field("pmem_len", &self.pmem.len())
            .field("layout", &self.layout)
            .field("state_slots", &self.state_store.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl NonSecureWorld {
    pub fn new(pmem_size: usize, sensor: Box<dyn Sensor>, streams: DeviceStreams) -> Self {
        Self {
            pmem: vec![PMEM_FILL; pmem_size],
            layout: BTreeMap::new(),
            functions: BTreeMap::new(),
            state_store: BTreeMap::new(),
            state_tags: BTreeMap::new(),
            sensor,
            streams,
        }
    }

    pub fn pmem(&self) -> &[u8] {
        &self.pmem
    }

    pub fn layout(&self) -> &BTreeMap<String, (usize, usize)> {
        &self.layout
    }

    pub fn function(&self, f_id: &str) -> Option<&FunctionBinary> {
        self.functions.get(f_id)
    }

    pub fn functions(&self) -> impl Iterator<Item = &FunctionBinary> {
        self.functions.values()
    }

    pub fn state(&self, slot: &str) -> &[u8] {
        self.state_store.get(slot).map_or(&[], Vec::as_slice)
    }

    pub fn register_function(
        &mut self,
        fb: FunctionBinary,
        offset: usize,
    ) -> Result<(), RegistrationError> {
        if self.functions.contains_key(&fb.id) {
            return Err(RegistrationError::Duplicate(fb.id));
        }
        let end = offset
            .checked_add(fb.code.len())
            .filter(|&e| e <= self.pmem.len())
            .ok_or(RegistrationError::OutOfRange {
                offset,
                end: offset.saturating_add(fb.code.len()),
                size: self.pmem.len(),
            })?;
        for (other, &(o, len)) in &self.layout {
            if offset < o + len && o < end {
                return Err(RegistrationError::Overlap {
                    offset,
                    end,
                    other: other.clone(),
                });
            }
        }
        self.pmem[offset..end].copy_from_slice(&fb.code);
        self.layout.insert(fb.id.clone(), (offset, fb.code.len()));
        self.functions.insert(fb.id.clone(), fb);
        Ok(())
    }

    fn deliver(&mut self, event: &AsyncEvent) {
        match event {
            AsyncEvent::Tick => {}
            AsyncEvent::PatchPmem(patch) => patch.apply_in_place(&mut self.pmem),
            AsyncEvent::PatchState { slot, patch } => {
                patch.apply(self.state_store.entry(slot.clone()).or_default())
            }
        }
    }
}

pub struct DeviceConfig {
    pub sk_dev: KeyMaterial,
    pub pk_vrf: KeyMaterial,
    pub storage_mode: StorageMode,
    pub pmem_size: usize,
    pub registry: Arc<BackendRegistry>,
    pub sensor: Box<dyn Sensor>,
    pub streams: DeviceStreams,
}

impl DeviceConfig {
    pub fn new(sk_dev: KeyMaterial, pk_vrf: KeyMaterial, streams: DeviceStreams) -> Self {
        Self {
            sk_dev,
            pk_vrf,
            storage_mode: StorageMode::default(),
            pmem_size: DEFAULT_PMEM_SIZE,
            registry: Arc::new(BackendRegistry::default()),
            sensor: Box::new(NullSensor),
            streams,
        }
    }
}

/// One emulated prover.
pub struct Device {
    secure: SecureWorld,
    nsw: NonSecureWorld,
    log: Vec<DeviceEvent>,
    pending: Vec<AsyncEvent>,
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device")
            .field("secure", &self.secure)
            .field("nsw", &self.nsw)
            .finish_non_exhaustive()
    }
}

impl Device {
    pub fn new(cfg: DeviceConfig) -> Result<Self, CryptoError> {
        Ok(Self {
            secure: SecureWorld::new(cfg.sk_dev, cfg.pk_vrf, cfg.registry, cfg.storage_mode)?,
            nsw: NonSecureWorld::new(cfg.pmem_size, cfg.sensor, cfg.streams),
            log: Vec::new(),
            pending: Vec::new(),
        })
    }

    pub fn secure(&self) -> &SecureWorld {
        &self.secure
    }

    pub fn nsw(&self) -> &NonSecureWorld {
        &self.nsw
    }

    pub fn counter(&self) -> u64 {
        self.secure.counter()
    }

    pub fn flags(&self) -> Flags {
        self.secure.flags()
    }

    pub fn public_key(&self) -> KeyMaterial {
        self.secure.public_key()
    }

    pub fn register_function(
        &mut self,
        fb: FunctionBinary,
        offset: usize,
    ) -> Result<(), RegistrationError> {
        self.nsw.register_function(fb, offset)
    }

    pub fn measure_pmem(&self, f_id: &str, input: &[u8], c_vrf: u64) -> Digest {
        measurement(self.nsw.pmem(), f_id, input, c_vrf)
    }

    /// Drains the transition log accumulated since the last call.
    pub fn take_log(&mut self) -> Vec<DeviceEvent> {
        std::mem::take(&mut self.log)
    }

    /// Non-Secure call into `CheckState`. Outside an instance this is refused.
    pub fn check_state(&mut self, f_id: &str, s: &[u8]) -> Result<bool, GateRejected> {
        let slot = self.slot_of(f_id);
        let tag = self.nsw.state_tags.get(&slot).cloned();
        self.secure.check_state(&slot, s, tag.as_deref())
    }

    /// Non-Secure call into `SetState`. Outside an instance this is refused.
    pub fn set_state(&mut self, f_id: &str, s: &[u8]) -> Result<bool, GateRejected> {
        let slot = self.slot_of(f_id);
        Ok(self.secure.set_state(&slot, s)?.is_some())
    }

    fn slot_of(&self, f_id: &str) -> String {
        self.nsw
            .function(f_id)
            .map_or_else(|| f_id.to_owned(), |fb| fb.slot().to_owned())
    }

    pub fn inject_async_event(&mut self, event: AsyncEvent) -> DeliveryReport {
        Self::defer_or_deliver(
            self.secure.exec(),
            &mut self.nsw,
            &mut self.log,
            &mut self.pending,
            event,
        )
    }

    fn defer_or_deliver(
        in_window: bool,
        nsw: &mut NonSecureWorld,
        log: &mut Vec<DeviceEvent>,
        pending: &mut Vec<AsyncEvent>,
        event: AsyncEvent,
    ) -> DeliveryReport {
        if in_window {
            log.push(DeviceEvent::EventSuppressed(event.kind()));
            pending.push(event);
            DeliveryReport::Suppressed
        } else {
            log.push(DeviceEvent::EventDelivered(event.kind()));
            nsw.deliver(&event);
            DeliveryReport::Delivered
        }
    }

    /// `Execute`: admit the request, open the atomic window, measure, run
    /// the function, enforce the state guard, and prove.
    pub fn execute(&mut self, request: &PoSXRequest) -> ExecutionOutcome {
        if let Err(reason) = self.secure.admit(request) {
            self.log.push(DeviceEvent::Abort(reason));
            return ExecutionOutcome::Aborted(reason);
        }
        let Some(fb) = self.nsw.function(&request.f_id) else {
            self.log.push(DeviceEvent::Abort(AbortReason::FunctionFault));
            return ExecutionOutcome::Aborted(AbortReason::FunctionFault);
        };
        let behavior = Arc::clone(&fb.behavior);
        let slot = fb.slot().to_owned();

        self.secure.begin(request.c_vrf);
        self.log.push(DeviceEvent::Begin {
            f_id: request.f_id.clone(),
            c: request.c_vrf,
        });
        let h = measurement(self.nsw.pmem(), &request.f_id, &request.input, request.c_vrf);

        let result = {
            let mut ctx = ExecutionContext {
                secure: &mut self.secure,
                nsw: &mut self.nsw,
                log: &mut self.log,
                pending: &mut self.pending,
                f_id: &request.f_id,
                slot: &slot,
                input: &request.input,
            };
            behavior(&mut ctx)
        };

        // a body that chokes on tampered state still reports the failed check
        let outcome = match result {
            _ if self.secure.state_guard_violated() => {
                ExecutionOutcome::Aborted(AbortReason::StateCheckFailed)
            }
            Err(_) => ExecutionOutcome::Aborted(AbortReason::FunctionFault),
            Ok(output) => match self.secure.prove(&h, &output) {
                Ok(sigma) => ExecutionOutcome::Response(PoSXResponse { output, sigma }),
                Err(_) => ExecutionOutcome::Aborted(AbortReason::FunctionFault),
            },
        };
        match &outcome {
            ExecutionOutcome::Response(_) => self.log.push(DeviceEvent::Complete),
            ExecutionOutcome::Aborted(r) => self.log.push(DeviceEvent::Abort(*r)),
        }
        self.secure.reset_flags();
        // window closed: deferred interrupts fire now
        for event in std::mem::take(&mut self.pending) {
            self.log.push(DeviceEvent::EventDelivered(event.kind()));
            self.nsw.deliver(&event);
        }
        outcome
    }
}
