//! Backend for chat-completions style HTTP services.
//!
//! * `POST {base}/chat/completions` for generation (`logprobs`/`top_logprobs`).
//! * `POST {base}/completions` with `echo: true, max_tokens: 0` for forced decoding.
//! * `POST {base}/hidden_states` for activations (see `docs/hidden_states_api.md`).

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, Candidate, GeneratedToken, GenerationRequest, GenerationResult, HiddenStates};
use crate::error::{Error, Result};

fn default_api_key_env() -> String {
    "CLAIMCHECK_API_KEY".into()
}
fn default_timeout() -> u64 {
    60
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_true")]
    pub logprobs: bool,
    #[serde(default = "default_true")]
    pub completion_scoring: bool,
    #[serde(default)]
    pub hidden_states: bool,
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: default_api_key_env(),
            timeout_secs: default_timeout(),
            logprobs: true,
            completion_scoring: true,
            hidden_states: false,
            vocab_size: None,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    name: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        HttpBackend {
            name: format!("http:{}", config.model),
            config,
            api_key,
            agent,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<String> {
        let mut req = self.agent.post(&self.url(path));
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| Error::Backend {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Error::Backend {
            attempts: 1,
            message: e.to_string(),
        })?;
        if !(200..300).contains(&status) {
            let excerpt: String = text.chars().take(500).collect();
            return Err(Error::Http {
                status,
                body: excerpt,
            });
        }
        Ok(text)
    }

    fn decode<T: for<'de> Deserialize<'de>>(&self, what: &str, text: &str) -> Result<T> {
        serde_json::from_str(text)
            .map_err(|e| Error::Generation(format!("malformed {what} response: {e}")))
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    #[serde(default)]
    content: Option<Vec<ChatTokenLogprob>>,
}

#[derive(Deserialize)]
struct ChatTokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<Candidate>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    logprobs: Option<CompletionLogprobs>,
}

#[derive(Deserialize)]
struct CompletionLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<BTreeMap<String, f64>>>>,
    text_offset: Vec<usize>,
}

#[derive(Deserialize)]
struct HiddenStatesResponse {
    layers: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    embedding_layer: Option<Vec<Vec<f64>>>,
}

fn sorted(mut c: Vec<Candidate>) -> Vec<Candidate> {
    c.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    c
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn chat(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        let mut body = json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if self.config.logprobs {
            body["logprobs"] = json!(true);
            if request.top_logprobs > 0 {
                body["top_logprobs"] = json!(request.top_logprobs);
            }
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        let text = self.post("chat/completions", body)?;
        let resp: ChatResponse = self.decode("chat", &text)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Generation("chat response has no choices".into()))?;
        let tokens = choice
            .logprobs
            .and_then(|l| l.content)
            .unwrap_or_default()
            .into_iter()
            .map(|t| GeneratedToken {
                token: t.token,
                logprob: t.logprob.min(0.0),
                top_candidates: sorted(t.top_logprobs),
            })
            .collect();
        Ok(GenerationResult {
            text: choice.message.content.unwrap_or_default(),
            tokens,
        })
    }

    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
        top_logprobs: u32,
    ) -> Result<Vec<GeneratedToken>> {
        if !self.config.completion_scoring {
            return Err(Error::Capability {
                backend: self.name.clone(),
                capability: "completion scoring".into(),
                hint: "set completion_scoring = true for servers with an echo endpoint".into(),
            });
        }
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{context}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": top_logprobs.max(1),
            "temperature": 0.0,
        });
        let text = self.post("completions", body)?;
        let resp: CompletionResponse = self.decode("completion", &text)?;
        let lp = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| Error::Generation("completion response has no logprobs".into()))?;
        let context_chars = context.chars().count();
        let mut out = Vec::new();
        for (i, token) in lp.tokens.iter().enumerate() {
            if lp.text_offset.get(i).copied().unwrap_or(0) < context_chars {
                continue;
            }
            let Some(Some(logprob)) = lp.token_logprobs.get(i) else {
                continue;
            };
            let top = lp
                .top_logprobs
                .as_ref()
                .and_then(|v| v.get(i).cloned().flatten())
                .unwrap_or_default()
                .into_iter()
                .map(|(token, logprob)| Candidate { token, logprob })
                .collect();
            out.push(GeneratedToken {
                token: token.clone(),
                logprob: logprob.min(0.0),
                top_candidates: sorted(top),
            });
        }
        Ok(out)
    }

    fn hidden_states(&self, text: &str) -> Result<HiddenStates> {
        if !self.config.hidden_states {
            return Err(Error::Capability {
                backend: self.name.clone(),
                capability: "hidden states".into(),
                hint: "chat-only services cannot expose activations; use the mock backend or a \
                       server implementing the hidden_states extension"
                    .into(),
            });
        }
        let body = json!({
            "model": self.config.model,
            "input": text,
            "include_embedding_layer": true,
        });
        let text = self.post("hidden_states", body)?;
        let resp: HiddenStatesResponse = self.decode("hidden_states", &text)?;
        Ok(HiddenStates {
            layers: resp.layers,
            embedding_layer: resp.embedding_layer,
        })
    }

    fn supports_logprobs(&self) -> bool {
        self.config.logprobs
    }

    fn vocab_size(&self) -> Option<usize> {
        self.config.vocab_size
    }
}
