use thiserror::Error;

use crate::kvstore::{Identity, Store};
use crate::orchestrator::records::{request_key, ResponseRecord};
use crate::orchestrator::{RequestRecord, Verb};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InvokeError {
    #[error("no capacity")]
    NoCapacity,
    #[error("permission denied")]
    PermissionDenied,
    #[error("not running")]
    NotRunning,
    #[error("not halting")]
    NotHalting,
    #[error("retry")]
    Retry,
    #[error("request outstanding")]
    InvocationPending,
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("{0}")]
    Other(String),
}

impl InvokeError {
    /// Maps an error response message back to its variant.
    pub fn from_message(msg: &str) -> Self {
        match msg {
            "no capacity" => InvokeError::NoCapacity,
            "permission denied" => InvokeError::PermissionDenied,
            "not running" => InvokeError::NotRunning,
            "not halting" => InvokeError::NotHalting,
            "retry" => InvokeError::Retry,
            "request outstanding" => InvokeError::InvocationPending,
            m => match m.strip_prefix("malformed request: ") {
                Some(rest) => InvokeError::Malformed(rest.to_string()),
                None => InvokeError::Other(m.to_string()),
            },
        }
    }
}

pub type InvokeResponse = Result<(), InvokeError>;

pub type Handler<T> = Box<dyn FnOnce(InvokeResponse) -> T + Send>;

/// One instance's view of the orchestrator: writes requests under its own
/// request key and dispatches the response to the waiting handler. At most
/// one invocation is outstanding.
pub struct ScaleClient<T> {
    name: String,
    identity: Identity,
    pending: Option<(Verb, Handler<T>)>,
}

impl<T> std::fmt::Debug for ScaleClient<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScaleClient")
            .field("name", &self.name)
            .field("pending", &self.pending.as_ref().map(|p| p.0))
            .finish()
    }
}

impl<T> ScaleClient<T> {
    pub fn new(name: &str) -> Self {
        ScaleClient {
            name: name.to_string(),
            identity: Identity::instance(name),
            pending: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pending(&self) -> Option<Verb> {
        self.pending.as_ref().map(|p| p.0)
    }

    /// Writes a request into the local store. Fails without writing if an
    /// invocation is already outstanding.
    pub fn invoke(
        &mut self,
        store: &mut Store,
        verb: Verb,
        target: &str,
        handler: Handler<T>,
    ) -> Result<(), InvokeError> {
        if self.pending.is_some() {
            return Err(InvokeError::InvocationPending);
        }
        let value = RequestRecord::local(verb, target).encode();
        store
            .put(request_key(&self.name), value, &self.identity)
            .map_err(|_| InvokeError::PermissionDenied)?;
        self.pending = Some((verb, handler));
        Ok(())
    }

    pub fn replicate(&mut self, store: &mut Store, service: &str, h: Handler<T>) -> Result<(), InvokeError> {
        self.invoke(store, Verb::Replicate, service, h)
    }

    pub fn halt(&mut self, store: &mut Store, h: Handler<T>) -> Result<(), InvokeError> {
        let name = self.name.clone();
        self.invoke(store, Verb::Halt, &name, h)
    }

    pub fn die(&mut self, store: &mut Store, h: Handler<T>) -> Result<(), InvokeError> {
        let name = self.name.clone();
        self.invoke(store, Verb::Die, &name, h)
    }

    /// Hands a value seen on the response key to the waiting handler.
    /// Responses with no invocation outstanding are dropped.
    pub fn deliver(&mut self, value: &str) -> Option<T> {
        let resp = match ResponseRecord::decode(value) {
            Some(ResponseRecord::Success) => Ok(()),
            Some(ResponseRecord::Error(msg)) => Err(InvokeError::from_message(&msg)),
            None => Err(InvokeError::Malformed(value.to_string())),
        };
        if resp == Err(InvokeError::InvocationPending) {
            // Refusal of a duplicate; the original is still in progress.
            return None;
        }
        let (_, handler) = self.pending.take()?;
        Some(handler(resp))
    }
}
