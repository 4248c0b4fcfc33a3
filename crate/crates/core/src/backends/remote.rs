//! HTTP clients for remotely hosted services.
//!
//! Each service is a single endpoint accepting `POST` with the JSON request
//! document and answering with the JSON response document. Requests are
//! validated locally before any network call. Each endpoint enforces its
//! own concurrency cap and minimum spacing between requests.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::prompts;
use super::{
    ClassifyRequest, ClassifyResponse, Classifier, EditSelector, GroundRequest, GroundResponse, Grounder, ImagePayload,
    InpaintRequest, InpaintResponse, Inpainter, SelectorQuery, SelectorRequest, SelectorResponse, ServiceContracts,
    ServiceError, SourceImages,
};
use crate::editplan::{ConceptAnnotation, Edit};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub min_interval_ms: u64,
}

fn default_concurrency() -> usize {
    4
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            max_concurrency: default_concurrency(),
            min_interval_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageEncoding {
    #[default]
    Path,
    Base64,
}

/// Which instruction text accompanies classification requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierPrompt {
    Driving,
    Scene,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub classifier: EndpointConfig,
    pub grounder: EndpointConfig,
    pub inpainter: EndpointConfig,
    #[serde(default)]
    pub selector: Option<EndpointConfig>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    pub image_dir: PathBuf,
    #[serde(default)]
    pub image_encoding: ImageEncoding,
    #[serde(default)]
    pub classifier_prompt: Option<ClassifierPrompt>,
}

fn default_timeout() -> u64 {
    120
}

/// Counting gate with a minimum interval between admissions.
#[derive(Debug)]
struct Gate {
    max: usize,
    min_interval: Duration,
    state: Mutex<(usize, Option<Instant>)>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(max: usize, min_interval: Duration) -> Self {
        Self {
            max: max.max(1),
            min_interval,
            state: Mutex::new((0, None)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut state = self.state.lock().expect("gate lock");
        loop {
            if state.0 < self.max {
                let now = Instant::now();
                match state.1 {
                    Some(last) if now < last + self.min_interval => {
                        let wait = last + self.min_interval - now;
                        state = self.freed.wait_timeout(state, wait).expect("gate lock").0;
                        continue;
                    }
                    _ => {
                        state.0 += 1;
                        state.1 = Some(now);
                        return Permit(self);
                    }
                }
            }
            state = self.freed.wait(state).expect("gate lock");
        }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut state = self.0.state.lock().expect("gate lock");
        state.0 -= 1;
        self.0.freed.notify_all();
    }
}

#[derive(Debug)]
pub struct Endpoint {
    url: String,
    agent: ureq::Agent,
    token: Option<String>,
    gate: Gate,
}

impl Endpoint {
    pub fn new(config: &EndpointConfig, token: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: config.url.clone(),
            agent,
            token,
            gate: Gate::new(config.max_concurrency, Duration::from_millis(config.min_interval_ms)),
        }
    }

    pub fn post<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp, ServiceError> {
        let _permit = self.gate.acquire();
        let mut request = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| ServiceError::Unavailable(format!("{}: {e}", self.url)))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(ServiceError::Unavailable(format!("{} answered {status}", self.url)));
        }
        if status >= 400 {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Err(ServiceError::Protocol(format!("{} answered {status}: {detail}", self.url)));
        }
        response
            .body_mut()
            .read_json::<Resp>()
            .map_err(|e| ServiceError::Protocol(format!("{}: malformed response: {e}", self.url)))
    }
}

pub struct RemoteClassifier {
    endpoint: Endpoint,
    prompt: Option<ClassifierPrompt>,
}

impl Classifier for RemoteClassifier {
    fn classify(&self, request: &ClassifyRequest) -> Result<ClassifyResponse, ServiceError> {
        request.validate()?;
        let mut request = request.clone();
        if request.prompt.is_none() {
            request.prompt = self.prompt.map(|style| {
                let template = match style {
                    ClassifierPrompt::Driving => prompts::CLASSIFY_DRIVING,
                    ClassifierPrompt::Scene => prompts::CLASSIFY_SCENE,
                };
                prompts::classification(template, &request.labels)
            });
        }
        self.endpoint.post(&request)
    }
}

pub struct RemoteGrounder(pub Endpoint);

impl Grounder for RemoteGrounder {
    fn ground(&self, request: &GroundRequest) -> Result<GroundResponse, ServiceError> {
        request.validate()?;
        self.0.post(request)
    }
}

pub struct RemoteInpainter(pub Endpoint);

impl Inpainter for RemoteInpainter {
    fn inpaint(&self, request: &InpaintRequest, _edit: &Edit) -> Result<InpaintResponse, ServiceError> {
        request.validate()?;
        self.0.post(request)
    }
}

pub struct RemoteSelector(pub Endpoint);

impl EditSelector for RemoteSelector {
    fn complete(&self, request: &SelectorRequest, _query: &SelectorQuery) -> Result<SelectorResponse, ServiceError> {
        request.validate()?;
        self.0.post(request)
    }
}

/// Source images stored as `<dir>/<image_id>.<ext>`.
#[derive(Debug, Clone)]
pub struct DirectoryImages {
    pub dir: PathBuf,
    pub encoding: ImageEncoding,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "webp"];

impl DirectoryImages {
    fn locate(&self, image_id: &str) -> Option<PathBuf> {
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| self.dir.join(format!("{image_id}.{ext}")))
            .find(|p| p.is_file())
    }
}

impl SourceImages for DirectoryImages {
    fn source_image(&self, annotation: &ConceptAnnotation) -> Result<ImagePayload, ServiceError> {
        let path = self.locate(&annotation.image_id).ok_or_else(|| {
            ServiceError::Protocol(format!("no image for `{}` in {}", annotation.image_id, self.dir.display()))
        })?;
        match self.encoding {
            ImageEncoding::Path => Ok(ImagePayload::Path(path.display().to_string())),
            ImageEncoding::Base64 => std::fs::read(&path)
                .map(|bytes| ImagePayload::Base64(base64::engine::general_purpose::STANDARD.encode(bytes)))
                .map_err(|e| ServiceError::Protocol(format!("cannot read {}: {e}", path.display()))),
        }
    }
}

impl RemoteConfig {
    /// Builds shared clients. The token, when configured, is read from the
    /// environment once.
    pub fn contracts(&self, base_dir: &Path) -> Result<ServiceContracts, ServiceError> {
        let token = match &self.token_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| ServiceError::Schema(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let timeout = Duration::from_secs(self.timeout_secs);
        let endpoint = |cfg: &EndpointConfig| Endpoint::new(cfg, token.clone(), timeout);
        let image_dir = if self.image_dir.is_absolute() {
            self.image_dir.clone()
        } else {
            base_dir.join(&self.image_dir)
        };
        Ok(ServiceContracts {
            classifier: Arc::new(RemoteClassifier {
                endpoint: endpoint(&self.classifier),
                prompt: self.classifier_prompt,
            }),
            grounder: Arc::new(RemoteGrounder(endpoint(&self.grounder))),
            inpainter: Arc::new(RemoteInpainter(endpoint(&self.inpainter))),
            selector: self
                .selector
                .as_ref()
                .map(|cfg| Arc::new(RemoteSelector(endpoint(cfg))) as Arc<dyn EditSelector>),
            images: Arc::new(DirectoryImages {
                dir: image_dir,
                encoding: self.image_encoding,
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// Serves `replies` in order, one connection each, and returns the raw
    /// request heads and bodies it saw.
    fn serve(replies: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<(String, String)>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/svc", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                }
                let mut payload = vec![0u8; length];
                reader.read_exact(&mut payload).unwrap();
                seen.push((head, String::from_utf8(payload).unwrap()));
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (url, handle)
    }

    #[test]
    fn classifier_posts_document_with_prompt_and_token() {
        let (url, server) = serve(vec![(200, r#"{"label":"stop"}"#.into())]);
        let classifier = RemoteClassifier {
            endpoint: Endpoint::new(&EndpointConfig::new(url), Some("secret".into()), Duration::from_secs(5)),
            prompt: Some(ClassifierPrompt::Scene),
        };
        let request = ClassifyRequest {
            image: ImagePayload::Path("/data/a.png".into()),
            labels: vec!["stop".into(), "move".into()],
            prompt: None,
        };
        let response = classifier.classify(&request).unwrap();
        assert_eq!(response, ClassifyResponse::Label { label: "stop".into() });
        let seen = server.join().unwrap();
        assert!(seen[0].0.to_ascii_lowercase().contains("authorization: bearer secret"));
        let sent: ClassifyRequest = serde_json::from_str(&seen[0].1).unwrap();
        assert_eq!(sent.labels, request.labels);
        assert!(sent.prompt.unwrap().contains("['stop', 'move']"));
    }

    #[test]
    fn server_errors_are_retryable_client_errors_are_not() {
        let (url, server) = serve(vec![(503, "{}".into()), (400, r#"{"error":"bad"}"#.into())]);
        let grounder = RemoteGrounder(Endpoint::new(&EndpointConfig::new(url), None, Duration::from_secs(5)));
        let request = GroundRequest::new(ImagePayload::Path("a.png".into()), "car", &Default::default());
        assert!(matches!(grounder.ground(&request), Err(ServiceError::Unavailable(_))));
        assert!(matches!(grounder.ground(&request), Err(ServiceError::Protocol(_))));
        server.join().unwrap();
    }

    #[test]
    fn invalid_requests_never_reach_the_network() {
        // nothing listens here; a network attempt would be Unavailable
        let grounder = RemoteGrounder(Endpoint::new(
            &EndpointConfig::new("http://127.0.0.1:9/svc"),
            None,
            Duration::from_secs(1),
        ));
        let mut request = GroundRequest::new(ImagePayload::Path("a.png".into()), "car", &Default::default());
        request.query.clear();
        assert!(matches!(grounder.ground(&request), Err(ServiceError::Schema(_))));
    }

    #[test]
    fn directory_images_by_path_and_base64() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("img1.jpg"), b"jpeg-bytes").unwrap();
        let ann = ConceptAnnotation::new("img1", "stop", vec![]);
        let by_path = DirectoryImages { dir: dir.path().into(), encoding: ImageEncoding::Path };
        assert!(matches!(by_path.source_image(&ann).unwrap(), ImagePayload::Path(p) if p.ends_with("img1.jpg")));
        let inline = DirectoryImages { dir: dir.path().into(), encoding: ImageEncoding::Base64 };
        let payload = inline.source_image(&ann).unwrap();
        assert_eq!(super::super::content_ref(&payload).unwrap(), super::super::ImageRef::of_bytes(b"jpeg-bytes"));
        assert!(by_path.source_image(&ConceptAnnotation::new("nope", "stop", vec![])).is_err());
    }

    #[test]
    fn gate_spaces_requests() {
        let gate = Gate::new(1, Duration::from_millis(30));
        let start = Instant::now();
        drop(gate.acquire());
        drop(gate.acquire());
        drop(gate.acquire());
        assert!(start.elapsed() >= Duration::from_millis(60));
    }
}
