//! Unit-test helpers: a role-routed scripted provider and a live gateway
//! wrapper around it.

use crate::gateway::{AgentRole, CassetteStore, Gateway, GatewayMode, PromptRequest, Provider, ProviderError};
use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

type Reply = Result<String, ProviderError>;

/// Provider that serves scripted replies per agent role, capturing every
/// request for assertions. Panics when a role's script runs dry, which in
/// a test means the code under test made an unexpected call.
#[derive(Default)]
pub struct ScriptedProvider {
    queues: Mutex<HashMap<AgentRole, VecDeque<Reply>>>,
    pub requests: Mutex<Vec<PromptRequest>>,
}

impl ScriptedProvider {
    pub fn new() -> Arc<Self> {
        Arc::new(ScriptedProvider::default())
    }

    pub fn push(self: &Arc<Self>, role: AgentRole, text: impl Into<String>) -> Arc<Self> {
        self.queues.lock().unwrap().entry(role).or_default().push_back(Ok(text.into()));
        Arc::clone(self)
    }

    /// Number of completed calls issued under `role`.
    pub fn calls(&self, role: AgentRole) -> usize {
        self.requests_for(role).len()
    }

    /// Snapshot of the requests issued under `role`, in call order.
    pub fn requests_for(&self, role: AgentRole) -> Vec<PromptRequest> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.agent_role == role)
            .cloned()
            .collect()
    }
}

impl Provider for ScriptedProvider {
    fn provider_id(&self) -> String {
        "test:scripted".to_string()
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, ProviderError> {
        self.requests.lock().unwrap().push(request.clone());
        self.queues
            .lock()
            .unwrap()
            .get_mut(&request.agent_role)
            .and_then(VecDeque::pop_front)
            .unwrap_or_else(|| panic!("script exhausted for role {}", request.agent_role))
    }
}

/// Live-mode gateway over a scripted provider. Live mode never touches the
/// cassette store, so the store may point anywhere.
pub fn scripted_gateway(provider: Arc<ScriptedProvider>) -> Gateway {
    Gateway::new(GatewayMode::Live, CassetteStore::new("/nonexistent"), Some(provider))
        .expect("live gateway with provider")
}
