//! Service contracts for the edit loop and their wire documents.
//!
//! Every service is reached through a request/response pair of JSON
//! documents. The in-process mocks in [`mock`] and the HTTP clients in
//! [`remote`] implement the same traits over the same documents.

pub mod mock;
pub mod prompts;
pub mod remote;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::concept::ConceptId;
use crate::editplan::{ConceptAnnotation, Edit};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    /// Transport failure or refusal; worth retrying.
    #[error("service unavailable: {0}")]
    Unavailable(String),
    /// A request failed local validation before being sent.
    #[error("schema violation: {0}")]
    Schema(String),
    /// The service answered with something that does not fit the contract.
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl ServiceError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ServiceError::Unavailable(_))
    }
}

/// Retry budget for a single service call. Only retryable errors are
/// retried; the delay doubles after each failed attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay_ms: 500 }
    }
}

impl RetryPolicy {
    pub fn call<T>(&self, mut f: impl FnMut() -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        let attempts = self.attempts.max(1);
        let mut attempt = 1;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt < attempts => {
                    let delay = self.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                    if delay > 0 {
                        std::thread::sleep(std::time::Duration::from_millis(delay));
                    }
                    tracing::debug!(attempt, error = %e, "retrying service call");
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Content-addressed image identifier, `sha256:<hex>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(String);

impl ImageRef {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        ImageRef(format!("sha256:{}", hex::encode(Sha256::digest(bytes))))
    }

    /// Hash of several byte strings, each length-prefixed so the split
    /// points are unambiguous.
    pub fn of_parts(parts: &[&[u8]]) -> Self {
        let mut hasher = Sha256::new();
        for part in parts {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part);
        }
        ImageRef(format!("sha256:{}", hex::encode(hasher.finalize())))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// How an image travels inside a request or response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImagePayload {
    Path(String),
    Base64(String),
    /// Opaque reference understood by the in-process mocks.
    Ref(ImageRef),
}

/// Content address of a payload: the hash of its decoded bytes.
pub fn content_ref(payload: &ImagePayload) -> Result<ImageRef, ServiceError> {
    match payload {
        ImagePayload::Ref(r) => Ok(r.clone()),
        ImagePayload::Base64(data) => base64::engine::general_purpose::STANDARD
            .decode(data.as_bytes())
            .map(|bytes| ImageRef::of_bytes(&bytes))
            .map_err(|e| ServiceError::Protocol(format!("invalid base64 image: {e}"))),
        ImagePayload::Path(path) => std::fs::read(path)
            .map(|bytes| ImageRef::of_bytes(&bytes))
            .map_err(|e| ServiceError::Protocol(format!("cannot read image {path}: {e}"))),
    }
}

fn require(cond: bool, message: impl FnOnce() -> String) -> Result<(), ServiceError> {
    if cond {
        Ok(())
    } else {
        Err(ServiceError::Schema(message()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub image: ImagePayload,
    pub labels: Vec<String>,
    /// Instruction text for language-model classifiers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

impl ClassifyRequest {
    pub fn validate(&self) -> Result<(), ServiceError> {
        require(!self.labels.is_empty(), || "labels must not be empty".into())?;
        require(self.labels.iter().all(|l| !l.trim().is_empty()), || "labels must be non-blank".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassifyResponse {
    Label { label: String },
    Scores { scores: BTreeMap<String, f64> },
}

/// Detection and mask settings for the grounding service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingParams {
    pub confidence_threshold: f64,
    pub box_expand_px: u32,
    pub mask_blur_px: u32,
}

impl Default for GroundingParams {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.3,
            box_expand_px: 35,
            mask_blur_px: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundRequest {
    pub image: ImagePayload,
    pub query: String,
    pub confidence_threshold: f64,
    pub box_expand_px: u32,
    pub mask_blur_px: u32,
}

impl GroundRequest {
    pub fn new(image: ImagePayload, query: impl Into<String>, params: &GroundingParams) -> Self {
        Self {
            image,
            query: query.into(),
            confidence_threshold: params.confidence_threshold,
            box_expand_px: params.box_expand_px,
            mask_blur_px: params.mask_blur_px,
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        require(!self.query.trim().is_empty(), || "grounding query must not be empty".into())?;
        require((0.0..=1.0).contains(&self.confidence_threshold), || {
            format!("confidence_threshold {} outside [0, 1]", self.confidence_threshold)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundResponse {
    pub boxes: Vec<BoundingBox>,
    pub mask: ImagePayload,
}

/// Diffusion inpainting settings.
///
/// `negative_prompt` ships with a generic default; `hires_fix` is passed
/// through untouched to the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintParams {
    pub negative_prompt: String,
    pub guidance_scale: f64,
    pub denoise: f64,
    pub steps: u32,
    pub sampler: String,
    pub hires_fix: bool,
}

pub const DEFAULT_NEGATIVE_PROMPT: &str = "blurry, distorted, deformed, low quality, artifacts, watermark, text";

impl Default for InpaintParams {
    fn default() -> Self {
        Self {
            negative_prompt: DEFAULT_NEGATIVE_PROMPT.into(),
            guidance_scale: 10.0,
            denoise: 1.0,
            steps: 40,
            sampler: "DPM++ 2M SDE".into(),
            hires_fix: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub image: ImagePayload,
    pub mask: ImagePayload,
    pub prompt: String,
    pub negative_prompt: String,
    pub guidance_scale: f64,
    pub denoise: f64,
    pub steps: u32,
    pub sampler: String,
    pub seed: u64,
    pub hires_fix: bool,
}

impl InpaintRequest {
    pub fn new(image: ImagePayload, mask: ImagePayload, prompt: impl Into<String>, params: &InpaintParams, seed: u64) -> Self {
        Self {
            image,
            mask,
            prompt: prompt.into(),
            negative_prompt: params.negative_prompt.clone(),
            guidance_scale: params.guidance_scale,
            denoise: params.denoise,
            steps: params.steps,
            sampler: params.sampler.clone(),
            seed,
            hires_fix: params.hires_fix,
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        require(!self.prompt.trim().is_empty(), || "inpaint prompt must not be empty".into())?;
        require(self.guidance_scale > 0.0, || format!("guidance_scale {} must be positive", self.guidance_scale))?;
        require((0.0..=1.0).contains(&self.denoise), || format!("denoise {} outside [0, 1]", self.denoise))?;
        require(self.steps >= 1, || "steps must be at least 1".into())?;
        require(!self.sampler.trim().is_empty(), || "sampler must be named".into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub image: ImagePayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorRequest {
    pub image: ImagePayload,
    pub prompt: String,
}

impl SelectorRequest {
    pub fn validate(&self) -> Result<(), ServiceError> {
        require(!self.prompt.trim().is_empty(), || "selector prompt must not be empty".into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorResponse {
    pub text: String,
}

/// What a selector prompt is asking, in structured form. Rendered into
/// [`SelectorRequest::prompt`]; also handed to in-process selectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectorQuery {
    NextEdit {
        objects: Vec<ConceptId>,
        add: Vec<ConceptId>,
        remove: Vec<ConceptId>,
        remaining: Vec<Edit>,
    },
    Anchor { object: ConceptId },
    Backdrop { object: ConceptId },
}

impl SelectorQuery {
    pub fn next_edit(current: &ConceptAnnotation, remaining: &[Edit]) -> Self {
        let mut add: Vec<ConceptId> = remaining.iter().filter_map(|e| e.target.clone()).collect();
        let mut remove: Vec<ConceptId> = remaining.iter().filter_map(|e| e.source.clone()).collect();
        add.sort();
        add.dedup();
        remove.sort();
        remove.dedup();
        let mut objects = current.concepts.clone();
        objects.dedup();
        SelectorQuery::NextEdit {
            objects,
            add,
            remove,
            remaining: remaining.to_vec(),
        }
    }

    pub fn render(&self) -> String {
        match self {
            SelectorQuery::NextEdit { objects, add, remove, .. } => prompts::next_edit(objects, add, remove),
            SelectorQuery::Anchor { object } => prompts::add_anchor(object),
            SelectorQuery::Backdrop { object } => prompts::remove_backdrop(object),
        }
    }
}

pub trait Classifier: Send + Sync {
    fn classify(&self, request: &ClassifyRequest) -> Result<ClassifyResponse, ServiceError>;
}

pub trait Grounder: Send + Sync {
    fn ground(&self, request: &GroundRequest) -> Result<GroundResponse, ServiceError>;
}

pub trait Inpainter: Send + Sync {
    /// `edit` is in-process context only; remote services see the request.
    fn inpaint(&self, request: &InpaintRequest, edit: &Edit) -> Result<InpaintResponse, ServiceError>;
}

pub trait EditSelector: Send + Sync {
    /// `query` is the structured form of `request.prompt`.
    fn complete(&self, request: &SelectorRequest, query: &SelectorQuery) -> Result<SelectorResponse, ServiceError>;
}

/// Supplies the starting image for an annotated source.
pub trait SourceImages: Send + Sync {
    fn source_image(&self, annotation: &ConceptAnnotation) -> Result<ImagePayload, ServiceError>;
}

/// The set of services one run talks to.
#[derive(Clone)]
pub struct ServiceContracts {
    pub classifier: Arc<dyn Classifier>,
    pub grounder: Arc<dyn Grounder>,
    pub inpainter: Arc<dyn Inpainter>,
    pub selector: Option<Arc<dyn EditSelector>>,
    pub images: Arc<dyn SourceImages>,
}
