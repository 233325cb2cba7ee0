//! Client for an OpenAI-compatible chat-completions endpoint.
//!
//! Per-class probabilities come from the log-scores of the first answer
//! token restricted to one verbalizer per class. Requests use temperature
//! zero and a single output token. Transports are pluggable so recorded
//! request/response pairs can be replayed offline.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::Predictor;
use crate::error::{Error, Result};
use crate::types::{ClassSpace, ProbVector, SampleView};
use crate::util;

/// Probability assigned to a verbalizer absent from the returned candidates.
pub const VERBALIZER_FLOOR: f64 = 1e-6;

pub const DEFAULT_SYSTEM_PROMPT: &str =
    "Classify the input into one of the classes {classes}. Reply with exactly one word from: {verbalizers}.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    /// One answer token per class, in class order.
    pub verbalizers: Vec<String>,
    pub system_prompt: String,
    pub top_logprobs: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key_env: "MMDEBIAS_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
            verbalizers: Vec::new(),
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
            top_logprobs: 20,
        }
    }
}

impl RemoteConfig {
    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Moves one JSON request to the endpoint. `Error::Backend` is retried,
/// everything else is final.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, body: &Value) -> Result<Value>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            api_key: std::env::var(&cfg.api_key_env)
                .ok()
                .filter(|k| !k.is_empty()),
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, url: &str, body: &Value) -> Result<Value> {
        let mut req = self
            .agent
            .post(url)
            .header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Error::Backend(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Backend(format!("{url}: reading body: {e}")))?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| Error::Protocol {
                message: format!("response is not JSON: {e}"),
                payload: text,
            }),
            408 | 429 | 500..=599 => Err(Error::Backend(format!("{url}: status {status}"))),
            _ => Err(Error::Protocol {
                message: format!("status {status}"),
                payload: text,
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Exchange {
    key: String,
    request: Value,
    response: Value,
}

fn request_key(body: &Value) -> String {
    util::digest_hex(&[body.to_string().as_bytes()])
}

/// Serves responses from a recorded fixture file; never touches the network.
pub struct ReplayTransport {
    responses: HashMap<String, Value>,
}

impl ReplayTransport {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut responses = HashMap::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Exchange = serde_json::from_str(&line)?;
            responses.insert(ex.key, ex.response);
        }
        Ok(Self { responses })
    }
}

impl Transport for ReplayTransport {
    fn post(&self, _url: &str, body: &Value) -> Result<Value> {
        let key = request_key(body);
        self.responses
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Backend(format!("no recorded response for request {key}")))
    }
}

/// Forwards to another transport and appends each exchange to a fixture file.
pub struct RecordingTransport<T> {
    inner: T,
    out: Mutex<File>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, path: &Path) -> Result<Self> {
        let out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner,
            out: Mutex::new(out),
        })
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn post(&self, url: &str, body: &Value) -> Result<Value> {
        let response = self.inner.post(url, body)?;
        let ex = Exchange {
            key: request_key(body),
            request: body.clone(),
            response: response.clone(),
        };
        let mut line = serde_json::to_string(&ex)?;
        line.push('\n');
        let mut f = self.out.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes())
            .map_err(|e| Error::io(PathBuf::from("<recording>"), e))?;
        Ok(response)
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemotePredictor {
    id: String,
    classes: ClassSpace,
    cfg: RemoteConfig,
    prompt_version: String,
    transport: Box<dyn Transport>,
    slots: Semaphore,
}

impl RemotePredictor {
    pub fn new(
        classes: ClassSpace,
        cfg: RemoteConfig,
        transport: Box<dyn Transport>,
    ) -> Result<Self> {
        if cfg.verbalizers.len() != classes.k() {
            return Err(Error::Config(format!(
                "{} verbalizers for {} classes",
                cfg.verbalizers.len(),
                classes.k()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = cfg.verbalizers.iter().find(|v| !seen.insert(v.trim())) {
            return Err(Error::Config(format!("duplicate verbalizer `{dup}`")));
        }
        let prompt_version = util::fingerprint(&(&cfg.system_prompt, &cfg.verbalizers, &cfg.model));
        Ok(Self {
            id: format!("remote:{}@{}", cfg.model, cfg.base_url),
            classes,
            slots: Semaphore::new(cfg.max_in_flight),
            prompt_version,
            cfg,
            transport,
        })
    }

    pub fn http(classes: ClassSpace, cfg: RemoteConfig) -> Result<Self> {
        let t = HttpTransport::new(&cfg);
        Self::new(classes, cfg, Box::new(t))
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn system_prompt(&self) -> String {
        self.cfg
            .system_prompt
            .replace("{classes}", &self.classes.labels().join(", "))
            .replace("{verbalizers}", &self.cfg.verbalizers.join(", "))
    }

    pub fn request_body(&self, view: &SampleView<'_>) -> Result<Value> {
        let mut parts = Vec::new();
        if let Some(text) = view.text() {
            parts.push(json!({"type": "text", "text": text}));
        }
        if let Some(path) = view.image() {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let mime = match path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
            {
                Some(e) if e == "jpg" || e == "jpeg" => "image/jpeg",
                _ => "image/png",
            };
            let data = base64::engine::general_purpose::STANDARD.encode(bytes);
            parts.push(json!({"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{data}")}}));
        }
        if parts.is_empty() {
            return Err(Error::Domain(format!(
                "view of `{}` has neither text nor image",
                view.base().id
            )));
        }
        Ok(json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": self.system_prompt()},
                {"role": "user", "content": parts},
            ],
            "temperature": 0,
            "max_tokens": 1,
            "logprobs": true,
            "top_logprobs": self.cfg.top_logprobs,
        }))
    }

    fn send(&self, body: &Value) -> Result<Value> {
        let url = self.cfg.endpoint();
        let _permit = self.slots.acquire();
        let mut attempt = 0;
        loop {
            match self.transport.post(&url, body) {
                Err(Error::Backend(msg)) if attempt < self.cfg.max_retries => {
                    let wait = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("{msg}; retrying in {wait} ms");
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(Error::Backend(msg)) => {
                    return Err(Error::Backend(format!("{msg} (after {} retries)", attempt)))
                }
                other => return other,
            }
        }
    }
}

/// Maps a chat-completions payload to class probabilities.
pub fn verbalizer_probabilities(payload: &Value, verbalizers: &[String]) -> Result<ProbVector> {
    let protocol = |message: &str| Error::Protocol {
        message: message.to_string(),
        payload: payload.to_string(),
    };
    let candidates = payload
        .pointer("/choices/0/logprobs/content/0/top_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| protocol("missing first-token top_logprobs"))?;
    let mut mass = vec![0.0f64; verbalizers.len()];
    let mut found = vec![false; verbalizers.len()];
    for cand in candidates {
        let (Some(token), Some(lp)) = (
            cand.get("token").and_then(Value::as_str),
            cand.get("logprob").and_then(Value::as_f64),
        ) else {
            return Err(protocol("malformed top_logprobs entry"));
        };
        if let Some(k) = verbalizers.iter().position(|v| v.trim() == token.trim()) {
            mass[k] += lp.exp();
            found[k] = true;
        }
    }
    if !found.iter().any(|&f| f) {
        return Err(protocol("no verbalizer among the returned candidates"));
    }
    for (m, f) in mass.iter_mut().zip(&found) {
        if !f {
            *m = VERBALIZER_FLOOR;
        }
    }
    let z: f64 = mass.iter().sum();
    ProbVector::probabilities(mass.into_iter().map(|m| m / z).collect())
}

impl Predictor for RemotePredictor {
    fn id(&self) -> &str {
        &self.id
    }

    fn class_space(&self) -> &ClassSpace {
        &self.classes
    }

    fn prompt_version(&self) -> &str {
        &self.prompt_version
    }

    fn predict(&self, view: &SampleView<'_>) -> Result<ProbVector> {
        let body = self.request_body(view)?;
        let payload = self.send(&body)?;
        verbalizer_probabilities(&payload, &self.cfg.verbalizers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Sample;
    use std::io::Read;
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn payload(cands: &[(&str, f64)]) -> Value {
        let top: Vec<Value> = cands
            .iter()
            .map(|(t, l)| json!({"token": t, "logprob": l}))
            .collect();
        json!({"choices": [{"logprobs": {"content": [{"token": cands[0].0, "logprob": cands[0].1, "top_logprobs": top}]}}]})
    }

    fn verbs() -> Vec<String> {
        vec!["Yes".into(), "No".into()]
    }

    #[test]
    fn two_verbalizers_renormalize() {
        let p = verbalizer_probabilities(
            &payload(&[("Yes", -0.1), ("No", -2.4), ("Maybe", -3.0)]),
            &verbs(),
        )
        .unwrap();
        let (a, b) = ((-0.1f64).exp(), (-2.4f64).exp());
        assert!((p.scores()[0] - a / (a + b)).abs() < 1e-12);
        assert!((p.scores()[0] - 0.909).abs() < 1e-3);
    }

    #[test]
    fn missing_verbalizer_is_floored() {
        let p =
            verbalizer_probabilities(&payload(&[("Yes", -0.5), ("Hmm", -1.0)]), &verbs()).unwrap();
        let a = (-0.5f64).exp();
        assert!((p.scores()[1] - VERBALIZER_FLOOR / (a + VERBALIZER_FLOOR)).abs() < 1e-15);
        assert!((p.scores().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_verbalizer_is_a_protocol_error_with_payload() {
        let err = verbalizer_probabilities(&payload(&[("Hmm", -0.5)]), &verbs()).unwrap_err();
        match err {
            Error::Protocol { payload, .. } => assert!(payload.contains("Hmm")),
            e => panic!("{e:?}"),
        }
        assert!(verbalizer_probabilities(&json!({"choices": []}), &verbs()).is_err());
    }

    struct Canned {
        fail_first: usize,
        calls: AtomicUsize,
    }

    impl Transport for Canned {
        fn post(&self, _url: &str, _body: &Value) -> Result<Value> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(Error::Backend("down".into()));
            }
            Ok(payload(&[("No", -0.2), ("Yes", -1.9)]))
        }
    }

    fn cfg() -> RemoteConfig {
        RemoteConfig {
            verbalizers: verbs(),
            backoff_ms: 1,
            max_retries: 2,
            ..Default::default()
        }
    }

    #[test]
    fn retries_then_gives_up() {
        let classes = ClassSpace::new(["yes", "no"]).unwrap();
        let s = Sample::new("a", "hello", None, None).unwrap();
        let ok = RemotePredictor::new(
            classes.clone(),
            cfg(),
            Box::new(Canned {
                fail_first: 2,
                calls: AtomicUsize::new(0),
            }),
        )
        .unwrap();
        assert_eq!(
            ok.predict(&SampleView::original(&s))
                .unwrap()
                .arg_top()
                .unwrap(),
            1
        );
        let bad = RemotePredictor::new(
            classes,
            cfg(),
            Box::new(Canned {
                fail_first: 3,
                calls: AtomicUsize::new(0),
            }),
        )
        .unwrap();
        assert!(matches!(
            bad.predict(&SampleView::original(&s)),
            Err(Error::Backend(_))
        ));
    }

    #[test]
    fn record_then_replay_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let fixture = dir.path().join("fixture.jsonl");
        let classes = ClassSpace::new(["yes", "no"]).unwrap();
        let s = Sample::new("a", "hello", None, None).unwrap();
        let rec = RecordingTransport::new(
            Canned {
                fail_first: 0,
                calls: AtomicUsize::new(0),
            },
            &fixture,
        )
        .unwrap();
        let live = RemotePredictor::new(classes.clone(), cfg(), Box::new(rec)).unwrap();
        let a = live.predict(&SampleView::original(&s)).unwrap();
        let replay = RemotePredictor::new(
            classes.clone(),
            cfg(),
            Box::new(ReplayTransport::open(&fixture).unwrap()),
        )
        .unwrap();
        let b = replay.predict(&SampleView::original(&s)).unwrap();
        let c = replay.predict(&SampleView::original(&s)).unwrap();
        let bits = |p: &ProbVector| p.scores().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(bits(&b), bits(&c));
        let other = Sample::new("b", "different", None, None).unwrap();
        assert!(matches!(
            replay.predict(&SampleView::original(&other)),
            Err(Error::Backend(_))
        ));
    }

    #[test]
    fn http_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(String::new()));
        let seen2 = seen.clone();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf).to_string();
                if let Some(end) = text.find("\r\n\r\n") {
                    let len: usize = text[..end]
                        .lines()
                        .find_map(|l| {
                            l.to_ascii_lowercase()
                                .strip_prefix("content-length:")
                                .map(|v| v.trim().parse().unwrap())
                        })
                        .unwrap_or(0);
                    if buf.len() >= end + 4 + len {
                        *seen2.lock().unwrap() = text;
                        break;
                    }
                }
            }
            let body = payload(&[("Yes", -0.1), ("No", -2.4)]).to_string();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
        });
        let cfg = RemoteConfig {
            base_url: format!("http://{addr}/v1"),
            api_key_env: "MMDEBIAS_TEST_UNSET_KEY".into(),
            ..cfg()
        };
        let p = RemotePredictor::http(ClassSpace::new(["yes", "no"]).unwrap(), cfg).unwrap();
        let s = Sample::new("a", "is this sarcastic", None, None).unwrap();
        let out = p.predict(&SampleView::original(&s)).unwrap();
        server.join().unwrap();
        assert!((out.scores()[0] - 0.909).abs() < 1e-3);
        let req = seen.lock().unwrap().clone();
        assert!(req.starts_with("POST /v1/chat/completions"));
        let body: Value = serde_json::from_str(&req[req.find("\r\n\r\n").unwrap() + 4..]).unwrap();
        assert_eq!(body["temperature"], json!(0));
        assert_eq!(body["logprobs"], json!(true));
        assert_eq!(body["max_tokens"], json!(1));
    }

    #[test]
    fn verbalizer_count_must_match() {
        let c = RemoteConfig {
            verbalizers: vec!["Yes".into()],
            ..Default::default()
        };
        assert!(matches!(
            RemotePredictor::new(
                ClassSpace::new(["a", "b"]).unwrap(),
                c,
                Box::new(ReplayTransport {
                    responses: HashMap::new()
                })
            ),
            Err(Error::Config(_))
        ));
    }
}
