//! Session-isolated snapshot storage.
//!
//! Every sid owns an optional initial snapshot, a current snapshot, a set of
//! uploaded files and a last-access timestamp. Writes to one session are
//! serialized behind that session's mutex; different sessions never share a
//! lock beyond the brief map lookup.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state_document::{StateId, StateValue};

pub const DEFAULT_TTL: Duration = Duration::from_secs(3600);
pub const DEFAULT_UPLOAD_QUOTA: usize = 64 * 1024 * 1024;
const MAX_SID_LEN: usize = 128;
const MAX_UPLOAD_NAME_LEN: usize = 255;

const URL_COMPONENT: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.').remove(b'~');

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("invalid sid {0:?}: expected 1-128 characters from [A-Za-z0-9_-]")]
    InvalidSid(String),
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("action {0} requires a state payload")]
    MissingPayload(InjectionAction),
    #[error("action {0} does not accept a state payload")]
    UnexpectedPayload(InjectionAction),
    #[error("invalid upload name {0:?}")]
    InvalidUploadName(String),
    #[error("upload quota exceeded: {required} bytes needed, quota is {quota}")]
    QuotaExceeded { required: usize, quota: usize },
}

/// A point on the store's monotonic clock, measured from an arbitrary origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(Duration);

impl Timestamp {
    pub fn from_secs(secs: u64) -> Self {
        Timestamp(Duration::from_secs(secs))
    }

    pub fn from_duration(d: Duration) -> Self {
        Timestamp(d)
    }

    pub fn elapsed_since(self, earlier: Timestamp) -> Duration {
        self.0.saturating_sub(earlier.0)
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Wall-clock time based on [`Instant`].
#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.origin.elapsed())
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock {
    nanos: AtomicU64,
}

impl ManualClock {
    pub fn at(secs: u64) -> Self {
        let clock = ManualClock::default();
        clock.set(Timestamp::from_secs(secs));
        clock
    }

    pub fn set(&self, t: Timestamp) {
        self.nanos.store(t.0.as_nanos() as u64, Ordering::SeqCst);
    }

    pub fn advance(&self, by: Duration) {
        self.nanos.fetch_add(by.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(Duration::from_nanos(self.nanos.load(Ordering::SeqCst)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct SessionId(String);

impl SessionId {
    pub fn new(sid: impl Into<String>) -> Result<Self, StoreError> {
        let sid = sid.into();
        let valid = !sid.is_empty()
            && sid.len() <= MAX_SID_LEN
            && sid.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
        if valid {
            Ok(SessionId(sid))
        } else {
            Err(StoreError::InvalidSid(sid))
        }
    }

    /// A fresh v4 UUID sid.
    pub fn generate() -> Self {
        SessionId(uuid::Uuid::new_v4().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for SessionId {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SessionId::new(s)
    }
}

impl<'de> Deserialize<'de> for SessionId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        SessionId::new(raw).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionAction {
    Set,
    SetCurrent,
    Merge,
    Reset,
}

impl InjectionAction {
    pub fn as_str(self) -> &'static str {
        match self {
            InjectionAction::Set => "set",
            InjectionAction::SetCurrent => "set_current",
            InjectionAction::Merge => "merge",
            InjectionAction::Reset => "reset",
        }
    }

    pub fn requires_payload(self) -> bool {
        !matches!(self, InjectionAction::Reset)
    }
}

impl FromStr for InjectionAction {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "set" => Ok(InjectionAction::Set),
            "set_current" => Ok(InjectionAction::SetCurrent),
            "merge" => Ok(InjectionAction::Merge),
            "reset" => Ok(InjectionAction::Reset),
            other => Err(StoreError::UnknownAction(other.to_owned())),
        }
    }
}

impl fmt::Display for InjectionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Upload {
    pub content: Vec<u8>,
    pub media_type: String,
}

impl Upload {
    pub fn size(&self) -> usize {
        self.content.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadRef {
    pub name: String,
    pub url: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActionOutcome {
    pub success: bool,
    pub sid: SessionId,
    pub state_id: StateId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub sid: SessionId,
    pub initial_snapshot: Option<StateValue>,
    pub current_snapshot: StateValue,
    pub uploads: BTreeMap<String, Upload>,
    pub last_access: Timestamp,
    pub seed_ref: StateId,
    pub has_custom_state: bool,
    retired: bool,
}

impl Session {
    fn fresh(sid: SessionId, seed: &StateValue, seed_ref: &StateId, now: Timestamp) -> Self {
        Session {
            sid,
            initial_snapshot: None,
            current_snapshot: seed.clone(),
            uploads: BTreeMap::new(),
            last_access: now,
            seed_ref: seed_ref.clone(),
            has_custom_state: false,
            retired: false,
        }
    }

    pub fn upload_bytes(&self) -> usize {
        self.uploads.values().map(Upload::size).sum()
    }

    /// The snapshot a diff starts from: the initial snapshot if one was set, else the seed.
    pub fn baseline<'a>(&'a self, seed: &'a StateValue) -> &'a StateValue {
        self.initial_snapshot.as_ref().unwrap_or(seed)
    }
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub ttl: Duration,
    pub upload_quota: usize,
    pub seed: StateValue,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig { ttl: DEFAULT_TTL, upload_quota: DEFAULT_UPLOAD_QUOTA, seed: StateValue::empty_record() }
    }
}

type SessionSlot = Arc<Mutex<Session>>;

#[derive(Debug)]
pub struct SessionStore {
    config: StoreConfig,
    seed_ref: StateId,
    sessions: RwLock<HashMap<SessionId, SessionSlot>>,
}

impl Default for SessionStore {
    fn default() -> Self {
        SessionStore::new(StoreConfig::default())
    }
}

impl SessionStore {
    pub fn new(config: StoreConfig) -> Self {
        let seed_ref = config.seed.digest();
        SessionStore { config, seed_ref, sessions: RwLock::new(HashMap::new()) }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn seed(&self) -> &StateValue {
        &self.config.seed
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, sid: &SessionId) -> bool {
        self.sessions.read().unwrap().contains_key(sid)
    }

    pub fn sids(&self) -> Vec<SessionId> {
        let mut sids: Vec<_> = self.sessions.read().unwrap().keys().cloned().collect();
        sids.sort();
        sids
    }

    fn is_expired(&self, session: &Session, now: Timestamp) -> bool {
        now.elapsed_since(session.last_access) > self.config.ttl
    }

    /// Runs `f` with exclusive access to the session for `sid`, creating it
    /// (or replacing an expired one) first and refreshing its last access.
    fn with_session<T>(&self, sid: &SessionId, now: Timestamp, f: impl FnOnce(&mut Session) -> T) -> T {
        loop {
            let slot = self.sessions.read().unwrap().get(sid).cloned();
            let slot = match slot {
                Some(slot) => slot,
                None => {
                    let mut map = self.sessions.write().unwrap();
                    map.entry(sid.clone())
                        .or_insert_with(|| {
                            Arc::new(Mutex::new(Session::fresh(sid.clone(), &self.config.seed, &self.seed_ref, now)))
                        })
                        .clone()
                }
            };
            let mut session = slot.lock().unwrap();
            if session.retired {
                // Collected between lookup and lock; look up again.
                continue;
            }
            if self.is_expired(&session, now) {
                *session = Session::fresh(sid.clone(), &self.config.seed, &self.seed_ref, now);
            }
            if now > session.last_access {
                session.last_access = now;
            }
            return f(&mut session);
        }
    }

    /// Returns a copy of the session, creating it from the seed on first touch.
    pub fn get_or_create(&self, sid: &SessionId, now: Timestamp) -> Session {
        self.with_session(sid, now, |s| s.clone())
    }

    pub fn apply_action(
        &self,
        sid: &SessionId,
        action: InjectionAction,
        state: Option<StateValue>,
        now: Timestamp,
    ) -> Result<ActionOutcome, StoreError> {
        match (action.requires_payload(), &state) {
            (true, None) => return Err(StoreError::MissingPayload(action)),
            (false, Some(_)) => return Err(StoreError::UnexpectedPayload(action)),
            _ => {}
        }
        let state_id = self.with_session(sid, now, |session| {
            match (action, state) {
                (InjectionAction::Set, Some(state)) => {
                    session.current_snapshot = state.clone();
                    session.initial_snapshot = Some(state);
                    session.has_custom_state = true;
                }
                (InjectionAction::SetCurrent, Some(state)) => {
                    session.current_snapshot = state;
                    session.has_custom_state = true;
                }
                (InjectionAction::Merge, Some(state)) => {
                    session.current_snapshot = session.current_snapshot.deep_merge(&state);
                    session.has_custom_state = true;
                }
                (InjectionAction::Reset, None) => {
                    session.initial_snapshot = None;
                    session.current_snapshot = self.config.seed.clone();
                    session.uploads.clear();
                    session.has_custom_state = false;
                }
                _ => unreachable!("payload arity checked above"),
            }
            session.current_snapshot.digest()
        });
        Ok(ActionOutcome { success: true, sid: sid.clone(), state_id })
    }

    pub fn store_upload(
        &self,
        sid: &SessionId,
        name: &str,
        content: Vec<u8>,
        media_type: &str,
        now: Timestamp,
    ) -> Result<UploadRef, StoreError> {
        validate_upload_name(name)?;
        let quota = self.config.upload_quota;
        self.with_session(sid, now, |session| {
            let replaced = session.uploads.get(name).map_or(0, Upload::size);
            let required = session.upload_bytes() - replaced + content.len();
            if required > quota {
                return Err(StoreError::QuotaExceeded { required, quota });
            }
            let size = content.len();
            session.uploads.insert(name.to_owned(), Upload { content, media_type: media_type.to_owned() });
            Ok(UploadRef { name: name.to_owned(), url: upload_url(sid, name), size })
        })
    }

    /// Looks up an upload without creating the session.
    pub fn fetch_upload(&self, sid: &SessionId, name: &str, now: Timestamp) -> Option<Upload> {
        if !self.contains(sid) {
            return None;
        }
        self.with_session(sid, now, |session| session.uploads.get(name).cloned())
    }

    /// Removes every session idle for longer than the TTL and returns how many went.
    pub fn gc_expired(&self, now: Timestamp) -> usize {
        let mut map = self.sessions.write().unwrap();
        let before = map.len();
        map.retain(|_, slot| {
            // A session locked by a request is live by definition.
            let Ok(mut session) = slot.try_lock() else {
                return true;
            };
            if self.is_expired(&session, now) {
                session.retired = true;
                session.uploads.clear();
                false
            } else {
                true
            }
        });
        before - map.len()
    }
}

/// Same-origin URL serving an upload, scoped by the sid query parameter.
pub fn upload_url(sid: &SessionId, name: &str) -> String {
    format!("/files/{}?sid={}", utf8_percent_encode(name, URL_COMPONENT), sid)
}

pub fn validate_upload_name(name: &str) -> Result<(), StoreError> {
    let bad = name.is_empty()
        || name.len() > MAX_UPLOAD_NAME_LEN
        || name == "."
        || name == ".."
        || name.contains(['/', '\\'])
        || name.chars().any(char::is_control);
    if bad {
        Err(StoreError::InvalidUploadName(name.to_owned()))
    } else {
        Ok(())
    }
}
