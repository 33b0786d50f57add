//! Clients for the external model roles the pipeline depends on.
//!
//! Every role is served by something implementing [`Backend`]: an HTTP
//! endpoint ([`http::HttpBackend`]) or one of the deterministic mocks in
//! [`mock`]. [`Backends`] holds one slot per role and applies the retry
//! policy, the in-flight bound, and the reply contract of the role.

pub mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MediaType;

pub use mock::{mock_script, MockInfiller, MockInpainter, MockSegmenter, MockVlm, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    ObjectExtractor,
    Segmenter,
    Inpainter,
    Infiller,
    Judge,
    Subject,
}

impl BackendRole {
    pub const ALL: [BackendRole; 6] = [
        BackendRole::ObjectExtractor,
        BackendRole::Segmenter,
        BackendRole::Inpainter,
        BackendRole::Infiller,
        BackendRole::Judge,
        BackendRole::Subject,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendRole::ObjectExtractor => "object_extractor",
            BackendRole::Segmenter => "segmenter",
            BackendRole::Inpainter => "inpainter",
            BackendRole::Infiller => "infiller",
            BackendRole::Judge => "judge",
            BackendRole::Subject => "subject",
        }
    }

    /// Roles whose replies must carry an image.
    pub fn returns_image(self) -> bool {
        matches!(
            self,
            BackendRole::Segmenter | BackendRole::Inpainter | BackendRole::Infiller
        )
    }
}

impl fmt::Display for BackendRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub bytes: Vec<u8>,
    pub media: MediaType,
    /// Store id, for co-located backends that read the store directly.
    pub store_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Evaluation temperature used for every text role unless overridden.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub role: BackendRole,
    pub system: Option<String>,
    pub prompt: String,
    pub images: Vec<ImageInput>,
    /// Single-channel PNG.
    pub mask: Option<Vec<u8>>,
    pub params: GenerationParams,
    /// Caller-side correlation key (usually a sample id); never sent over the wire.
    pub key: Option<String>,
}

impl BackendRequest {
    pub fn new(role: BackendRole, prompt: impl Into<String>) -> Self {
        BackendRequest {
            role,
            system: None,
            prompt: prompt.into(),
            images: Vec::new(),
            mask: None,
            params: GenerationParams::default(),
            key: None,
        }
    }

    pub fn system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }

    pub fn image(mut self, image: ImageInput) -> Self {
        self.images.push(image);
        self
    }

    pub fn mask(mut self, png: Vec<u8>) -> Self {
        self.mask = Some(png);
        self
    }

    pub fn key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }
}

/// What a backend hands back before the registry checks it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawReply {
    pub text: Option<String>,
    pub image: Option<Vec<u8>>,
}

impl RawReply {
    pub fn text(t: impl Into<String>) -> Self {
        RawReply {
            text: Some(t.into()),
            image: None,
        }
    }

    pub fn image(bytes: Vec<u8>) -> Self {
        RawReply {
            text: None,
            image: Some(bytes),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: Option<String>,
    pub image: Option<Vec<u8>>,
    pub latency_ms: u64,
    pub backend: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallError {
    /// Worth retrying: transport failure, timeout, 5xx, 429.
    #[error("transient: {0}")]
    Transient(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("no backend configured for role {0}")]
    NotConfigured(BackendRole),
    #[error("{role} backend unavailable after {attempts} attempts: {last_error}")]
    Unavailable {
        role: BackendRole,
        attempts: u32,
        last_error: String,
    },
    #[error("{role} backend protocol error: {detail}")]
    Protocol { role: BackendRole, detail: String },
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn call(&self, req: &BackendRequest) -> Result<RawReply, CallError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 200,
            max_delay_ms: 10_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before attempt `attempt + 1`, doubling from the base.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Counting semaphore bounding in-flight calls.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
    peak: AtomicU64,
    cap: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(cap: usize) -> Self {
        let cap = cap.max(1);
        Limiter {
            free: Mutex::new(cap),
            cv: Condvar::new(),
            peak: AtomicU64::new(0),
            cap,
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        let in_flight = (self.cap - *free) as u64;
        self.peak.fetch_max(in_flight, Ordering::Relaxed);
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().expect("limiter lock");
        *free += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotConfig {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for SlotConfig {
    fn default() -> Self {
        SlotConfig {
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

struct Slot {
    backend: Arc<dyn Backend>,
    limiter: Limiter,
    retry: RetryPolicy,
    calls: AtomicU64,
    attempts: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleStats {
    pub calls: u64,
    pub attempts: u64,
    pub peak_in_flight: u64,
}

/// One configured backend per role.
#[derive(Default)]
pub struct Backends {
    slots: BTreeMap<BackendRole, Slot>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(self.slots.iter().map(|(r, s)| (r, s.backend.name())))
            .finish()
    }
}

impl Backends {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(
        mut self,
        role: BackendRole,
        backend: impl Backend + 'static,
        config: SlotConfig,
    ) -> Self {
        self.insert(role, Arc::new(backend), config);
        self
    }

    pub fn insert(&mut self, role: BackendRole, backend: Arc<dyn Backend>, config: SlotConfig) {
        self.slots.insert(
            role,
            Slot {
                backend,
                limiter: Limiter::new(config.max_in_flight),
                retry: config.retry,
                calls: AtomicU64::new(0),
                attempts: AtomicU64::new(0),
            },
        );
    }

    pub fn is_configured(&self, role: BackendRole) -> bool {
        self.slots.contains_key(&role)
    }

    pub fn require(&self, roles: &[BackendRole]) -> Result<(), BackendError> {
        match roles.iter().find(|r| !self.is_configured(**r)) {
            Some(r) => Err(BackendError::NotConfigured(*r)),
            None => Ok(()),
        }
    }

    pub fn name(&self, role: BackendRole) -> Option<&str> {
        self.slots.get(&role).map(|s| s.backend.name())
    }

    pub fn stats(&self) -> BTreeMap<BackendRole, RoleStats> {
        self.slots
            .iter()
            .map(|(r, s)| {
                (
                    *r,
                    RoleStats {
                        calls: s.calls.load(Ordering::Relaxed),
                        attempts: s.attempts.load(Ordering::Relaxed),
                        peak_in_flight: s.limiter.peak.load(Ordering::Relaxed),
                    },
                )
            })
            .collect()
    }

    /// Call the backend for `role`, retrying transient failures with
    /// exponential backoff and checking the role's reply contract.
    pub fn call(&self, role: BackendRole, mut req: BackendRequest) -> Result<BackendReply, BackendError> {
        let slot = self.slots.get(&role).ok_or(BackendError::NotConfigured(role))?;
        req.role = role;
        slot.calls.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let max_attempts = slot.retry.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                std::thread::sleep(slot.retry.delay(attempt - 1));
            }
            slot.attempts.fetch_add(1, Ordering::Relaxed);
            let result = {
                let _permit = slot.limiter.acquire();
                slot.backend.call(&req)
            };
            match result {
                Ok(raw) => {
                    check_contract(role, &raw)?;
                    return Ok(BackendReply {
                        text: raw.text,
                        image: raw.image,
                        latency_ms: started.elapsed().as_millis() as u64,
                        backend: slot.backend.name().to_string(),
                        attempts: attempt,
                    });
                }
                Err(CallError::Transient(e)) => {
                    log::warn!(
                        "{role} call via {} failed (attempt {attempt}/{max_attempts}): {e}",
                        slot.backend.name()
                    );
                    last_error = e;
                }
                Err(CallError::Protocol(detail)) => {
                    return Err(BackendError::Protocol { role, detail })
                }
            }
        }
        Err(BackendError::Unavailable {
            role,
            attempts: max_attempts,
            last_error,
        })
    }
}

/// Every role served by the deterministic mocks.
pub fn mock_suite(seed: u64) -> Backends {
    let cfg = || SlotConfig {
        max_in_flight: 8,
        retry: RetryPolicy::no_delay(3),
    };
    let vlm = Arc::new(MockVlm::new("mock-vlm", seed));
    let mut b = Backends::new()
        .with(BackendRole::Segmenter, MockSegmenter::default(), cfg())
        .with(BackendRole::Inpainter, MockInpainter::default(), cfg())
        .with(BackendRole::Infiller, MockInfiller::new("mock-infiller"), cfg());
    for role in [BackendRole::ObjectExtractor, BackendRole::Judge, BackendRole::Subject] {
        b.insert(role, vlm.clone(), cfg());
    }
    b
}

fn check_contract(role: BackendRole, raw: &RawReply) -> Result<(), BackendError> {
    let fail = |detail: &str| {
        Err(BackendError::Protocol {
            role,
            detail: detail.to_string(),
        })
    };
    if raw.text.is_none() && raw.image.is_none() {
        return fail("reply carries neither text nor image");
    }
    if role.returns_image() && raw.image.is_none() {
        return fail("reply is missing the image");
    }
    if !role.returns_image() && raw.text.is_none() {
        return fail("reply is missing the text");
    }
    Ok(())
}
