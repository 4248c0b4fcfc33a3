//! Prompt templates sent to language-model services.

use crate::concept::ConceptId;

/// Classification instructions for driving scenes.
pub const CLASSIFY_DRIVING: &str = "\
Classify each image in their appropriate class according to the driving situation they depict.
Valid class labels are {str_categories} and only these, depending on whether the car has to move or stop based on its surroundings.
You need to classify the images in one of these classes.
Pay attention to the semantics that define each class.
Return me only the label of the scene depicted and nothing else.";

/// Classification instructions for general scenes.
pub const CLASSIFY_SCENE: &str = "\
Classify each image in their appropriate class according to the scene they depict.
Valid classes are {str_categories} and only these, so you need to classify the images in one of these classes.
Pay attention to the semantics that define each class.
Return me only the label of the scene depicted and nothing else.";

/// Asks for the single next edit given the remaining add/remove lists.
pub const NEXT_EDIT: &str = "\
I want to remove some objects and add others. I would like you to find the best possible edit for the image, but I want only a single edit.
You can choose from the following options:
- Add an object from the \"Add\" list. In this case please give the answer in the format: [\"add\", \"added_object\", \"target where the added object will appear in front of\"]. Avoid positional description such as \"over\", \"next to\", \"above\" etc.
- Remove an object from the \"Remove\" list. In this case please give the answer in the format: [\"remove\", \"removed_object\", \"the object that is behind the object when it is removed e.g. wall, floor, background\"].
- Replace an object from the \"Remove\" list with one from the \"Add\" list. In this case please give the answer in the format: [\"replace\", \"removed_object\", \"added_object\"].
So, you need to decide whether to add, remove, or replace an object.
For example:
Object list: [couch, lamp, window]
Add list: [bed, curtain, blanket]
Remove list: [lamp, couch]

Step: Replace couch with bed.

Another valid step might be:
Step: [\"add\", \"curtain\", \"window\"].

However, the step [\"add\", \"blanket\", \"couch\"] is not a logical step because the couch is on the remove list. If we put the blanket on the couch, we would still have to remove the couch and thus the blanket as well.

Please respond with only a single step and make the most logical edit you can based on the image I have provided.

Object list: {objects}
Add list: {added_objs}
Remove list: {removed_objs}
Step:";

/// Asks what an inserted object should be placed in front of.
pub const ADD_ANCHOR: &str = "\
I want to add an object in the image. Please specify what is the object that is target where the added object will appear in front of. Avoid positional description such as \"over\", \"next to\", \"above\" etc.  Please respond with a single item, without any additional text.  I want to parse this answer automatically, so it is crucial to return only a single object without any explanation, or additional text!
For example:
Add: \"painting\"
Answer: \"wall\"
Add: \"pillow\"
Answer: \"bed\"
Add: {obj}
Answer:";

/// Asks what lies behind an object that is about to be removed.
pub const REMOVE_BACKDROP: &str = "\
I want to remove an object from the image. Please specify what is the object that is behind the object when it is removed e.g. wall, floor, background. Please respond with a single item, without any additional text.  I want to parse this answer automatically, so it is crucial to return only a single object without any explanation, or additional text!
For example:
Remove: \"painting\"
Answer: \"wall\"
Remove: \"pillow\"
Answer: \"bed\"
Remove: {obj}
Answer:";

/// Human-readable form of a concept token (`traffic_light` -> `traffic light`).
pub fn display_name(c: &ConceptId) -> String {
    c.as_str().replace('_', " ")
}

fn bracket_list(items: &[ConceptId]) -> String {
    let names: Vec<String> = items.iter().map(display_name).collect();
    format!("[{}]", names.join(", "))
}

/// Labels rendered as a bracketed list of single-quoted names.
pub fn categories(labels: &[String]) -> String {
    let quoted: Vec<String> = labels.iter().map(|l| format!("'{l}'")).collect();
    format!("[{}]", quoted.join(", "))
}

pub fn classification(template: &str, labels: &[String]) -> String {
    template.replace("{str_categories}", &categories(labels))
}

pub fn next_edit(objects: &[ConceptId], add: &[ConceptId], remove: &[ConceptId]) -> String {
    NEXT_EDIT
        .replace("{objects}", &bracket_list(objects))
        .replace("{added_objs}", &bracket_list(add))
        .replace("{removed_objs}", &bracket_list(remove))
}

pub fn add_anchor(object: &ConceptId) -> String {
    ADD_ANCHOR.replace("{obj}", &format!("\"{}\"", display_name(object)))
}

pub fn remove_backdrop(object: &ConceptId) -> String {
    REMOVE_BACKDROP.replace("{obj}", &format!("\"{}\"", display_name(object)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::concept;

    #[test]
    fn next_edit_interpolates_lists() {
        let text = next_edit(
            &[concept("couch"), concept("lamp"), concept("window")],
            &[concept("bed")],
            &[concept("couch"), concept("traffic_light")],
        );
        assert!(text.ends_with("Object list: [couch, lamp, window]\nAdd list: [bed]\nRemove list: [couch, traffic light]\nStep:"));
        assert!(!text.contains("{objects}"));
    }

    #[test]
    fn single_object_prompts() {
        assert!(add_anchor(&concept("pillow")).ends_with("Add: \"pillow\"\nAnswer:"));
        assert!(remove_backdrop(&concept("painting")).ends_with("Remove: \"painting\"\nAnswer:"));
    }

    #[test]
    fn categories_render_as_list() {
        let labels = vec!["move".to_string(), "stop".to_string()];
        let text = classification(CLASSIFY_DRIVING, &labels);
        assert!(text.contains("Valid class labels are ['move', 'stop'] and only these"));
    }
}
