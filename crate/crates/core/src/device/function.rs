use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use super::{AbortReason, AsyncEvent, DeliveryReport, Device, ExecutionOutcome, NonSecureWorld};
use crate::device::secure::SecureWorld;
use crate::device::DeviceEvent;
use crate::protocol::PoSXRequest;
use crate::rng::DeviceStreams;

/// Declared behaviors of a function binary.
///
/// `checkstate_first`: the body validates its state before using it.
/// `setstate_last`: the body commits its state after its last state write.
/// `no_interrupt_enable`: the body never re-enables interrupts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct BehaviorMeta {
    pub checkstate_first: bool,
    pub setstate_last: bool,
    pub no_interrupt_enable: bool,
}

impl BehaviorMeta {
    pub const COMPLIANT: BehaviorMeta = BehaviorMeta {
        checkstate_first: true,
        setstate_last: true,
        no_interrupt_enable: true,
    };

    pub const STATELESS: BehaviorMeta = BehaviorMeta {
        checkstate_first: false,
        setstate_last: false,
        no_interrupt_enable: true,
    };

    pub fn to_byte(self) -> u8 {
        u8::from(self.checkstate_first)
            | u8::from(self.setstate_last) << 1
            | u8::from(self.no_interrupt_enable) << 2
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("function fault: {0}")]
pub struct FunctionFault(pub String);

impl FunctionFault {
    pub fn new(msg: impl fmt::Display) -> Self {
        Self(msg.to_string())
    }
}

pub type Behavior =
    Arc<dyn Fn(&mut ExecutionContext<'_>) -> Result<Vec<u8>, FunctionFault> + Send + Sync>;

/// A Non-Secure World function: the bytes placed in program memory plus the
/// callback that stands in for executing them.
#[derive(Clone)]
pub struct FunctionBinary {
    pub id: String,
    pub code: Vec<u8>,
    pub meta: BehaviorMeta,
    /// State slot reached through `check_state`/`set_state`; `None` for
    /// stateless functions. Functions that share one piece of state (an
    /// initializer and its consumers) name the same slot.
    pub state_slot: Option<String>,
    pub behavior: Behavior,
}

impl fmt::Debug for FunctionBinary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FunctionBinary")
            .field("id", &self.id)
            .field("code_len", &self.code.len())
            .field("meta", &self.meta)
            .field("state_slot", &self.state_slot)
            .finish_non_exhaustive()
    }
}

impl FunctionBinary {
    pub fn new<F>(
        id: impl Into<String>,
        code: Vec<u8>,
        meta: BehaviorMeta,
        state_slot: Option<String>,
        behavior: F,
    ) -> Self
    where
        F: Fn(&mut ExecutionContext<'_>) -> Result<Vec<u8>, FunctionFault> + Send + Sync + 'static,
    {
        Self {
            id: id.into(),
            code,
            meta,
            state_slot,
            behavior: Arc::new(behavior),
        }
    }

    pub fn is_stateful(&self) -> bool {
        self.state_slot.is_some()
    }

    /// The slot the secure gates operate on for this function.
    pub fn slot(&self) -> &str {
        self.state_slot.as_deref().unwrap_or(&self.id)
    }
}

/// What a running function body can reach: its input, Non-Secure memory and
/// peripherals, and the two secure gates. There is no other path into the
/// Secure World.
pub struct ExecutionContext<'a> {
    pub(super) secure: &'a mut SecureWorld,
    pub(super) nsw: &'a mut NonSecureWorld,
    pub(super) log: &'a mut Vec<DeviceEvent>,
    pub(super) pending: &'a mut Vec<AsyncEvent>,
    pub(super) f_id: &'a str,
    pub(super) slot: &'a str,
    pub(super) input: &'a [u8],
}

impl ExecutionContext<'_> {
    pub fn input(&self) -> &[u8] {
        self.input
    }

    pub fn function_id(&self) -> &str {
        self.f_id
    }

    /// Current Non-Secure copy of this function's state (empty if never written).
    pub fn read_state(&self) -> Vec<u8> {
        self.nsw.state(self.slot).to_vec()
    }

    pub fn write_state(&mut self, s: Vec<u8>) {
        self.nsw.state_store.insert(self.slot.to_owned(), s);
    }

    pub fn check_state(&mut self, s: &[u8]) -> bool {
        let tag = self.nsw.state_tags.get(self.slot).cloned();
        let ok = self
            .secure
            .check_state(self.slot, s, tag.as_deref())
            .unwrap_or(false);
        self.log.push(DeviceEvent::CheckState {
            slot: self.slot.to_owned(),
            ok,
        });
        ok
    }

    pub fn set_state(&mut self, s: &[u8]) -> bool {
        let result = self.secure.set_state(self.slot, s);
        let accepted = match result {
            Ok(Some(receipt)) => {
                if let Some(tag) = receipt.outsourced_tag {
                    self.nsw.state_tags.insert(self.slot.to_owned(), tag);
                }
                true
            }
            Ok(None) | Err(_) => false,
        };
        self.log.push(DeviceEvent::SetState {
            slot: self.slot.to_owned(),
            accepted,
        });
        accepted
    }

    pub fn streams(&mut self) -> &mut DeviceStreams {
        &mut self.nsw.streams
    }

    /// Reads the attached sensor using the device's sensor stream.
    pub fn read_sensor(&mut self) -> Vec<u8> {
        let nsw = &mut *self.nsw;
        nsw.sensor.read(&mut nsw.streams.sensor)
    }

    /// An interrupt raised while the function runs. Always deferred: the
    /// atomic window is open.
    pub fn raise_event(&mut self, event: AsyncEvent) -> DeliveryReport {
        Device::defer_or_deliver(self.secure.exec(), self.nsw, self.log, self.pending, event)
    }

    /// Re-enters `Execute` from inside the running function.
    pub fn execute(&mut self, request: &PoSXRequest) -> ExecutionOutcome {
        // admission cannot succeed while exec is set; the outer instance keeps its flags
        let reason = self
            .secure
            .admit(request)
            .err()
            .unwrap_or(AbortReason::AlreadyExecuting);
        self.log.push(DeviceEvent::Abort(reason));
        ExecutionOutcome::Aborted(reason)
    }
}
