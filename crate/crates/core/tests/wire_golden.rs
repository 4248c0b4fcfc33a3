use std::path::Path;

use cfedit::backends::{
    ClassifyRequest, ClassifyResponse, GroundRequest, GroundResponse, GroundingParams, InpaintParams, InpaintRequest,
    InpaintResponse, SelectorRequest, SelectorResponse,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn golden(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

/// Parses the golden document, serializes it back, and compares both as
/// JSON values and as typed values.
fn round_trip<T: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug>(name: &str) -> T {
    let doc = golden(name);
    let typed: T = serde_json::from_value(doc.clone()).unwrap_or_else(|e| panic!("{name}: {e}"));
    let back = serde_json::to_value(&typed).unwrap();
    assert_eq!(back, doc, "{name} did not survive a round trip");
    let again: T = serde_json::from_value(back).unwrap();
    assert_eq!(again, typed);
    typed
}

#[test]
fn classifier_documents() {
    let req: ClassifyRequest = round_trip("classify_request.json");
    req.validate().unwrap();
    assert_eq!(round_trip::<ClassifyResponse>("classify_response_label.json"), ClassifyResponse::Label { label: "stop".into() });
    assert!(matches!(round_trip::<ClassifyResponse>("classify_response_scores.json"), ClassifyResponse::Scores { .. }));
}

#[test]
fn grounder_documents() {
    let req: GroundRequest = round_trip("ground_request.json");
    req.validate().unwrap();
    let resp: GroundResponse = round_trip("ground_response.json");
    assert_eq!(resp.boxes.len(), 1);
}

#[test]
fn inpainter_documents() {
    let req: InpaintRequest = round_trip("inpaint_request.json");
    req.validate().unwrap();
    round_trip::<InpaintResponse>("inpaint_response.json");
}

#[test]
fn selector_documents() {
    let req: SelectorRequest = round_trip("selector_request.json");
    req.validate().unwrap();
    round_trip::<SelectorResponse>("selector_response.json");
}

#[test]
fn defaults_match_golden() {
    assert_eq!(serde_json::to_value(GroundingParams::default()).unwrap(), golden("grounding_defaults.json"));
    assert_eq!(serde_json::to_value(InpaintParams::default()).unwrap(), golden("inpaint_defaults.json"));
    let d = InpaintParams::default();
    assert_eq!((d.guidance_scale, d.denoise, d.steps), (10.0, 1.0, 40));
    let g = GroundingParams::default();
    assert_eq!((g.confidence_threshold, g.box_expand_px, g.mask_blur_px), (0.3, 35, 10));
}

#[test]
fn requests_built_from_defaults_match_golden_fields() {
    let req: GroundRequest = serde_json::from_value(golden("ground_request.json")).unwrap();
    assert_eq!(GroundRequest::new(req.image.clone(), "traffic light", &GroundingParams::default()), req);
    let req: InpaintRequest = serde_json::from_value(golden("inpaint_request.json")).unwrap();
    let built = InpaintRequest::new(req.image.clone(), req.mask.clone(), "road", &InpaintParams::default(), req.seed);
    assert_eq!(built, req);
}
