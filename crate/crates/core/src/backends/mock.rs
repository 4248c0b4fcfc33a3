//! Deterministic in-process services.
//!
//! Images are symbolic: every image reference maps to the concept
//! annotation it depicts, held in a shared [`MockWorld`]. The editor mutates
//! annotations exactly per edit and the classifier evaluates concept rules
//! against them.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompts::display_name;
use super::{
    BoundingBox, ClassifyRequest, ClassifyResponse, Classifier, EditSelector, GroundRequest, GroundResponse, Grounder,
    ImagePayload, ImageRef, InpaintRequest, InpaintResponse, Inpainter, SelectorQuery, SelectorRequest,
    SelectorResponse, ServiceContracts, ServiceError, SourceImages,
};
use crate::concept::ConceptId;
use crate::editplan::{apply_edits, ConceptAnnotation, Edit, EditKind};

/// Shared map from image reference to the scene it depicts.
#[derive(Debug, Default)]
pub struct MockWorld {
    scenes: Mutex<HashMap<ImageRef, ConceptAnnotation>>,
}

impl MockWorld {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register(&self, image: ImageRef, scene: ConceptAnnotation) {
        self.scenes.lock().expect("world lock").insert(image, scene);
    }

    pub fn scene(&self, payload: &ImagePayload) -> Result<ConceptAnnotation, ServiceError> {
        let ImagePayload::Ref(image) = payload else {
            return Err(ServiceError::Schema("mock services only accept image references".into()));
        };
        self.scenes
            .lock()
            .expect("world lock")
            .get(image)
            .cloned()
            .ok_or_else(|| ServiceError::Protocol(format!("unknown image {image}")))
    }
}

impl SourceImages for MockWorld {
    fn source_image(&self, annotation: &ConceptAnnotation) -> Result<ImagePayload, ServiceError> {
        let canonical = serde_json::to_vec(annotation).expect("annotation serializes");
        let image = ImageRef::of_parts(&[b"source", &canonical]);
        self.register(image.clone(), annotation.clone());
        Ok(ImagePayload::Ref(image))
    }
}

/// Concept-presence condition evaluated against a scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Always,
    Present(ConceptId),
    Absent(ConceptId),
    AtLeast { concept: ConceptId, count: usize },
    All(Vec<Predicate>),
    Any(Vec<Predicate>),
    Not(Box<Predicate>),
}

impl Predicate {
    pub fn holds(&self, scene: &ConceptAnnotation) -> bool {
        match self {
            Predicate::Always => true,
            Predicate::Present(c) => scene.contains(c),
            Predicate::Absent(c) => !scene.contains(c),
            Predicate::AtLeast { concept, count } => scene.count(concept) >= *count,
            Predicate::All(ps) => ps.iter().all(|p| p.holds(scene)),
            Predicate::Any(ps) => ps.iter().any(|p| p.holds(scene)),
            Predicate::Not(p) => !p.holds(scene),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub when: Predicate,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockOutput {
    /// `{label}` responses, like a language-model classifier.
    #[default]
    Label,
    /// One-hot `{scores}` responses, like a logit classifier.
    Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockClassifierConfig {
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub output: MockOutput,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MockConfigError {
    #[error("classifier rules must end with an `always` default rule")]
    MissingDefaultRule,
    #[error("{name} must lie in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
}

fn check_probability(name: &'static str, value: f64) -> Result<(), MockConfigError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(MockConfigError::Probability { name, value })
    }
}

impl MockClassifierConfig {
    pub fn validate(&self) -> Result<(), MockConfigError> {
        if !matches!(self.rules.last(), Some(Rule { when: Predicate::Always, .. })) {
            return Err(MockConfigError::MissingDefaultRule);
        }
        check_probability("noise", self.noise)
    }
}

/// Rule-based classifier with optional seeded label noise.
#[derive(Debug)]
pub struct MockClassifier {
    config: MockClassifierConfig,
    rng: Mutex<ChaCha8Rng>,
    world: Arc<MockWorld>,
}

impl MockClassifier {
    pub fn new(config: MockClassifierConfig, seed: u64, world: Arc<MockWorld>) -> Result<Self, MockConfigError> {
        config.validate()?;
        Ok(Self {
            config,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            world,
        })
    }

    /// First matching rule's label; with noise, replaced by a uniformly
    /// drawn label from `labels` with probability `noise`.
    pub fn classify_scene(&self, scene: &ConceptAnnotation, labels: &[String]) -> String {
        let label = self
            .config
            .rules
            .iter()
            .find(|r| r.when.holds(scene))
            .map(|r| r.label.clone())
            .expect("validated rules end with a default");
        if self.config.noise > 0.0 && !labels.is_empty() {
            let mut rng = self.rng.lock().expect("rng lock");
            if rng.random::<f64>() < self.config.noise {
                return labels[rng.random_range(0..labels.len())].clone();
            }
        }
        label
    }
}

impl Classifier for MockClassifier {
    fn classify(&self, request: &ClassifyRequest) -> Result<ClassifyResponse, ServiceError> {
        request.validate()?;
        let scene = self.world.scene(&request.image)?;
        let label = self.classify_scene(&scene, &request.labels);
        Ok(match self.config.output {
            MockOutput::Label => ClassifyResponse::Label { label },
            MockOutput::Scores => {
                let scores: BTreeMap<String, f64> = request
                    .labels
                    .iter()
                    .map(|l| (l.clone(), if l.eq_ignore_ascii_case(&label) { 1.0 } else { 0.0 }))
                    .collect();
                ClassifyResponse::Scores { scores }
            }
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockEditorConfig {
    #[serde(default)]
    pub failure_rate: f64,
}

/// Symbolic grounder and inpainter.
#[derive(Debug)]
pub struct MockEditor {
    failure_rate: f64,
    seed: u64,
    rng: Mutex<ChaCha8Rng>,
    world: Arc<MockWorld>,
}

impl MockEditor {
    pub fn new(config: &MockEditorConfig, seed: u64, world: Arc<MockWorld>) -> Result<Self, MockConfigError> {
        check_probability("failure_rate", config.failure_rate)?;
        Ok(Self {
            failure_rate: config.failure_rate,
            seed,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            world,
        })
    }
}

impl Grounder for MockEditor {
    fn ground(&self, request: &GroundRequest) -> Result<GroundResponse, ServiceError> {
        request.validate()?;
        let scene = self.world.scene(&request.image)?;
        let found = ConceptId::new(&request.query).is_ok_and(|c| scene.contains(&c));
        let boxes = if found {
            vec![BoundingBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0, score: 1.0 }]
        } else {
            Vec::new()
        };
        let ImagePayload::Ref(image) = &request.image else { unreachable!("scene lookup accepted the payload") };
        let mask = ImageRef::of_parts(&[b"mask", image.as_str().as_bytes(), request.query.as_bytes()]);
        Ok(GroundResponse { boxes, mask: ImagePayload::Ref(mask) })
    }
}

impl Inpainter for MockEditor {
    fn inpaint(&self, request: &InpaintRequest, edit: &Edit) -> Result<InpaintResponse, ServiceError> {
        request.validate()?;
        let prior = self.world.scene(&request.image)?;
        let succeeded = self.failure_rate == 0.0 || self.rng.lock().expect("rng lock").random::<f64>() >= self.failure_rate;
        let next = if succeeded {
            apply_edits(&prior, std::slice::from_ref(edit)).unwrap_or(prior)
        } else {
            prior
        };
        let ImagePayload::Ref(image) = &request.image else { unreachable!("scene lookup accepted the payload") };
        let edit_bytes = serde_json::to_vec(edit).expect("edit serializes");
        let produced = ImageRef::of_parts(&[image.as_str().as_bytes(), &edit_bytes, &self.seed.to_le_bytes()]);
        self.world.register(produced.clone(), next);
        Ok(InpaintResponse { image: ImagePayload::Ref(produced) })
    }
}

/// Selector that replays canned answers or follows a fixed preference.
#[derive(Debug)]
pub enum ScriptedSelector {
    /// Answers are consumed in order; an exhausted script is unavailable.
    Script(Mutex<VecDeque<String>>),
    /// Prefers a substitution, then a deletion, then an insertion; within a
    /// kind the smallest edit wins. Context questions get `background`.
    Heuristic,
}

impl ScriptedSelector {
    pub fn script<I: IntoIterator<Item = S>, S: Into<String>>(answers: I) -> Self {
        ScriptedSelector::Script(Mutex::new(answers.into_iter().map(Into::into).collect()))
    }

    pub fn heuristic_choice(remaining: &[Edit]) -> Option<&Edit> {
        [EditKind::Substitute, EditKind::Delete, EditKind::Insert]
            .iter()
            .find_map(|kind| remaining.iter().filter(|e| e.kind == *kind).min())
    }
}

/// Renders an edit as the bracketed triple a selector would answer with.
pub fn triple_for(edit: &Edit, context: &str) -> String {
    let name = |c: &Option<ConceptId>| c.as_ref().map(display_name).unwrap_or_default();
    match edit.kind {
        EditKind::Insert => format!("[\"add\", \"{}\", \"{}\"]", name(&edit.target), context),
        EditKind::Delete => format!("[\"remove\", \"{}\", \"{}\"]", name(&edit.source), context),
        EditKind::Substitute => format!("[\"replace\", \"{}\", \"{}\"]", name(&edit.source), name(&edit.target)),
    }
}

impl EditSelector for ScriptedSelector {
    fn complete(&self, request: &SelectorRequest, query: &SelectorQuery) -> Result<SelectorResponse, ServiceError> {
        request.validate()?;
        match self {
            ScriptedSelector::Script(answers) => answers
                .lock()
                .expect("script lock")
                .pop_front()
                .map(|text| SelectorResponse { text })
                .ok_or_else(|| ServiceError::Unavailable("selector script exhausted".into())),
            ScriptedSelector::Heuristic => {
                let text = match query {
                    SelectorQuery::NextEdit { objects, remove, remaining, .. } => {
                        let edit = Self::heuristic_choice(remaining)
                            .ok_or_else(|| ServiceError::Protocol("no edits offered".into()))?;
                        let anchor = objects
                            .iter()
                            .find(|o| !remove.contains(o))
                            .map(display_name)
                            .unwrap_or_else(|| "background".into());
                        let context = if edit.kind == EditKind::Insert { anchor } else { "background".into() };
                        triple_for(edit, &context)
                    }
                    SelectorQuery::Anchor { .. } | SelectorQuery::Backdrop { .. } => "background".into(),
                };
                Ok(SelectorResponse { text })
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockSelectorConfig {
    /// Canned answers; the heuristic selector is used when absent.
    #[serde(default)]
    pub script: Option<Vec<String>>,
}

/// Everything needed to assemble a full mock service set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    pub classifier: MockClassifierConfig,
    #[serde(default)]
    pub editor: MockEditorConfig,
    #[serde(default)]
    pub selector: MockSelectorConfig,
}

impl MockConfig {
    pub fn validate(&self) -> Result<(), MockConfigError> {
        self.classifier.validate()?;
        check_probability("failure_rate", self.editor.failure_rate)
    }

    /// Fresh services sharing one world, seeded from the run seed.
    pub fn contracts(&self, seed: u64) -> Result<ServiceContracts, MockConfigError> {
        let world = MockWorld::new();
        let classifier = MockClassifier::new(self.classifier.clone(), seed ^ 0x636c_6173_7369_6679, world.clone())?;
        let editor = Arc::new(MockEditor::new(&self.editor, seed ^ 0x6564_6974_6f72_0000, world.clone())?);
        let selector = match &self.selector.script {
            Some(answers) => ScriptedSelector::script(answers.clone()),
            None => ScriptedSelector::Heuristic,
        };
        Ok(ServiceContracts {
            classifier: Arc::new(classifier),
            grounder: editor.clone(),
            inpainter: editor,
            selector: Some(Arc::new(selector)),
            images: world,
        })
    }
}
