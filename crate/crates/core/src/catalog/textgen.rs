//! Text-generation clients used for description reconstruction and prompt
//! expansion.
//!
//! Callers build a [`TextGenRequest`] (`template_id` plus variables); clients
//! return text. Any failure puts the caller in degraded mode, where the input
//! text passes through unchanged.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::strategy::{options, StrategyTable};

pub const DESCRIBE_TEMPLATE: &str = "describe_model";
pub const EXPAND_TEMPLATE: &str = "expand_prompt";

/// Sample prompts included in a description request.
pub const MAX_DESCRIPTION_PROMPTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextGenRequest {
    pub template_id: String,
    pub variables: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextGenResponse {
    pub text: String,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("text generation unavailable: {0}")]
    Unavailable(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{template}` needs variable `{variable}`")]
    MissingVariable { template: String, variable: String },
}

pub trait TextGenClient: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, request: &TextGenRequest) -> Result<String, ClientError>;
}

fn var<'a>(req: &'a TextGenRequest, name: &str) -> Result<&'a str, ClientError> {
    req.variables.get(name).map(String::as_str).ok_or_else(|| ClientError::MissingVariable {
        template: req.template_id.clone(),
        variable: name.to_string(),
    })
}

/// Renders a request into the prompt text a language model would receive.
pub fn render_template(req: &TextGenRequest) -> Result<String, ClientError> {
    match req.template_id.as_str() {
        DESCRIBE_TEMPLATE => {
            let mut out = format!(
                "Rewrite the description of the text-to-image model \"{}\" so that it covers the styles and subjects its sample images show.\n\nOriginal description:\n{}\n\nSample prompts:\n",
                var(req, "name")?,
                var(req, "description")?,
            );
            for p in var(req, "sample_prompts")?.lines() {
                out.push_str("- ");
                out.push_str(p);
                out.push('\n');
            }
            out.push_str("\nDescription:");
            Ok(out)
        }
        EXPAND_TEMPLATE => Ok(format!(
            "Turn a short image request into a detailed text-to-image prompt.\n\n\
             Short: a cat\n\
             Detailed: a fluffy cat sitting on a sunlit windowsill, soft morning light, shallow depth of field, highly detailed\n\n\
             Short: a castle\n\
             Detailed: an ancient stone castle on a cliff above a stormy sea, dramatic clouds, epic fantasy illustration\n\n\
             Short: {}\n\
             Detailed:",
            var(req, "prompt")?
        )),
        other => Err(ClientError::UnknownTemplate(other.to_string())),
    }
}

/// Returns the rendered template itself.
#[derive(Debug, Default, Clone)]
pub struct EchoClient;

impl TextGenClient for EchoClient {
    fn name(&self) -> &str {
        "echo"
    }

    fn generate(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        render_template(request)
    }
}

/// Always unavailable; forces degraded mode.
#[derive(Debug, Default, Clone)]
pub struct OfflineClient;

impl TextGenClient for OfflineClient {
    fn name(&self) -> &str {
        "offline"
    }

    fn generate(&self, _request: &TextGenRequest) -> Result<String, ClientError> {
        Err(ClientError::Unavailable("offline client".into()))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteTextGenOptions {
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    10_000
}

/// JSON over HTTP: POST `{template_id, variables}`, expect `{text}`.
pub struct RemoteTextGen {
    url: String,
    agent: ureq::Agent,
}

impl RemoteTextGen {
    pub fn new(opts: RemoteTextGenOptions) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(opts.timeout_ms)))
            .build()
            .into();
        RemoteTextGen { url: opts.url, agent }
    }
}

impl TextGenClient for RemoteTextGen {
    fn name(&self) -> &str {
        "remote"
    }

    fn generate(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        let resp: TextGenResponse = self
            .agent
            .post(&self.url)
            .send_json(request)
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| ClientError::Unavailable(e.to_string()))?;
        Ok(resp.text)
    }
}

pub fn text_clients() -> StrategyTable<Box<dyn TextGenClient>> {
    let mut t: StrategyTable<Box<dyn TextGenClient>> = StrategyTable::new("text-generation");
    t.register("echo", |_| Ok(Box::new(EchoClient)))
        .register("offline", |_| Ok(Box::new(OfflineClient)))
        .register("remote", |v| {
            let opts: RemoteTextGenOptions = options("remote", v)?;
            Ok(Box::new(RemoteTextGen::new(opts)) as Box<dyn TextGenClient>)
        });
    t
}

/// Sends `request`, falling back to `fallback` when the client fails.
pub(crate) fn generate_or(client: &dyn TextGenClient, request: &TextGenRequest, fallback: &str) -> String {
    match client.generate(request) {
        Ok(text) => text,
        Err(e) => {
            log::warn!("{} client failed for `{}`, keeping input: {e}", client.name(), request.template_id);
            fallback.to_string()
        }
    }
}

pub fn expand_request(short: &str) -> TextGenRequest {
    TextGenRequest {
        template_id: EXPAND_TEMPLATE.into(),
        variables: BTreeMap::from([("prompt".to_string(), short.to_string())]),
    }
}

/// Expands a concise prompt into a detailed one; degraded mode returns the
/// input unchanged.
pub fn expand_prompt(short: &str, client: &dyn TextGenClient) -> String {
    generate_or(client, &expand_request(short), short)
}
