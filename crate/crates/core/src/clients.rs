//! Generic HTTP text-completion seam.
//!
//! Live generator/judge APIs stay out of scope; this client exists so the
//! pipeline has a real boundary to plug one into. It POSTs the request text
//! and returns the response body. Endpoint and credentials come from
//! environment variables and are never read by the offline stubs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{var} is not set; the http client needs an endpoint")]
    MissingEndpoint { var: String },
    #[error("http request to {endpoint} failed: {detail}")]
    Request { endpoint: String, detail: String },
}

/// Blocking plain-text completion client.
#[derive(Debug, Clone)]
pub struct HttpTextClient {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpTextClient {
    pub fn new(endpoint: impl Into<String>, token: Option<String>) -> Self {
        HttpTextClient {
            endpoint: endpoint.into(),
            token,
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs(30))
                .build(),
        }
    }

    /// Read `DESKTUNE_<PURPOSE>_ENDPOINT` (required) and
    /// `DESKTUNE_<PURPOSE>_TOKEN` (optional), e.g. purpose `GEN` or `JUDGE`.
    pub fn from_env(purpose: &str) -> Result<Self, ClientError> {
        let var = format!("DESKTUNE_{purpose}_ENDPOINT");
        let endpoint =
            std::env::var(&var).map_err(|_| ClientError::MissingEndpoint { var: var.clone() })?;
        let token = std::env::var(format!("DESKTUNE_{purpose}_TOKEN")).ok();
        Ok(HttpTextClient::new(endpoint, token))
    }

    pub fn complete(&self, request: &str) -> Result<String, ClientError> {
        let mut call = self
            .agent
            .post(&self.endpoint)
            .set("content-type", "text/plain; charset=utf-8");
        if let Some(token) = &self.token {
            call = call.set("authorization", &format!("Bearer {token}"));
        }
        call.send_string(request)
            .map_err(|e| ClientError::Request {
                endpoint: self.endpoint.clone(),
                detail: e.to_string(),
            })?
            .into_string()
            .map_err(|e| ClientError::Request {
                endpoint: self.endpoint.clone(),
                detail: e.to_string(),
            })
    }
}
