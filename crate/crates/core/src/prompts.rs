//! Prompt templates, byte for byte.
//!
//! Placeholders are substituted verbatim: `CLASSNAME`, `FEATURENAME`, `N`,
//! `CUES_LIST`, `STRONGEST_CUE`, and in the in-context filters
//! `SPUR FEATURE` / `TARGET OBJECT`. Nothing else in the text changes.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub const EVAL_PROMPTS: [&str; 3] = [
    "Do you see a CLASSNAME in the image? Answer with 'Yes' or 'No'.",
    "Is there a CLASSNAME in the image? Answer with 'Yes' or 'No'.",
    "Determine whether there is a CLASSNAME in the image. Reply with 'Yes' or 'No'.",
];

pub const GUIDING_PROMPT: &str = "Do you see a CLASSNAME in the image? Describe all objects in the image. Pay attention to key details that confirm their presence. Be mindful of misleading background features, but do not ignore real objects. Finally, answer with 'Yes' or 'No'.";

pub const DUAL_DESCRIBE_PROMPT: &str = "Describe the most prominent objects in this image.";
pub const DUAL_ASK_PROMPT: &str = "Is there a CLASSNAME in the image? Answer with 'Yes' or 'No'.";

pub const SPURIOUS_LIST_PROMPT: &str = "Do you see a CLASSNAME in the image? Describe all objects in the image. Pay attention to key details that confirm their presence. Be mindful of misleading background features, but do not ignore real objects. For example, spurious cues like CUES_LIST may appear but are not directly related to the CLASSNAME. Focus on distinguishing the CLASSNAME from such irrelevant features. Finally, answer with 'Yes' or 'No'.";

pub const SPURIOUS_TOP_PROMPT: &str = "Is there a CLASSNAME in the image? Be aware that the presence or absence of a STRONGEST_CUE does not necessarily indicate the presence or absence of a CLASSNAME. Answer with 'Yes' or 'No'.";

pub const GENERATE_OBJECTS_OPENING: &str =
    "List N objects that commonly appear in images of a CLASSNAME.";
pub const GENERATE_BACKGROUND_OPENING: &str =
    "List N background elements that commonly appear in images of a CLASSNAME.";
pub const GENERATE_SUFFIX: &str = "The objects cannot be part of a CLASSNAME. List exactly one item on a every consecutive line, followed by a period and a one sentence explanation. The object must be physical and discernable in an image. The object name must be less than two words. Do not number the responses. Do not output anything else.";

pub const FILTER_EXIST_WITHOUT: &str = "Can a FEATURENAME exist without a CLASSNAME?";
pub const FILTER_PART_OF: &str = "Is a FEATURENAME part of a CLASSNAME?";
pub const FILTER_ALL_FEATURE_HAVE: &str = "Do all or almost all FEATURENAME have a CLASSNAME?";
pub const FILTER_ALL_CLASS_HAVE: &str = "Do all or almost all CLASSNAME have a FEATURENAME?";

pub const FILTER_DETECTABILITY: &str = "Determine whether the provided object or feature is visualizeable in an image.
An object is visualizeable in an image if the object has a physical presence, and it is always clear what pixels in the image comprise the specific object.
Be conservative when labeling a feature as not detectable; only do so if you are completely sure.
Respond with 'Yes' or 'No' only.

Here are some example responses:
'sunlight': No
'trail': Yes
'walk': No
'fluoride': No
'toothpaste': Yes
'algae': No
'water': Yes

Determine whether the following object or feature is visualizeable:

'SPUR FEATURE':";

pub const FILTER_VOCABULARY: &str = "Determine whether the meaning of the provided feature might be too difficult most people to understand without background context.
A feature is too difficult if the feature is too niche to a specific context, is very uncommon, or has an unusual spelling.
Be conservative in labelling a feature as too difficult; only do so when you are completely sure that most people would not know the correct meaning without additional information.
Respond with 'Yes' or 'No' only.

Here are some examples:
'saddle': No
'equine': Yes
'grille': Yes
'trunk': No
'liana': Yes
'vine': No

Determine whether the following feature is too difficult:

'SPUR FEATURE':";

pub const FILTER_SYNONYMS: &str = "Determine whether two objects provided are synonyms of each other, or instances of each other.
This is not asking whether the two objects are similar. Only answer 'Yes' if the two terms generally refer to the same object.
Respond with 'Yes' or 'No' only.

Here are some examples:
'car', 'vehicle': Yes
'truck', 'bumper': No
'surfboard', 'skimboard': Yes
'remote', 'game controller': Yes
'motorcycle', 'bike': Yes
'motorcycle', 'pedal': No
'cradle', 'rocker': Yes
'bed', 'sleeping mat': Yes
'laptop', 'tablet': No
'backpack', 'purse': No

Determine whether the following two objects are synonyms or instances of each other:

'SPUR FEATURE', 'TARGET OBJECT':";

pub const FILTER_SEPARABLE: &str = "Determine whether the two objects provided are inseparable from each other. Answer 'Yes' one of the objects is part of the other, or if they are nearly always found together.
This is not asking whether the two objects are similar or related. Only answer 'Yes' if most people could not distinguish between the two objects when shown an example, or whether it is almost impossible to find one object without the other.
Respond with 'Yes' or 'No' only.

Here are some examples:
'cell phone', 'screen': Yes
'ski', 'snowboard': No
'bed', 'nightlight': No
'oven', 'stove': Yes
'boat', 'anchor': Yes
'canoe', 'sail': No
'train', 'railroad': Yes
'train', 'traffic signal': No

Determine whether the following two objects are inseparable from each other:

'SPUR FEATURE', 'TARGET OBJECT':";

pub const FILTER_COMPOSITION: &str = "Determine whether the first object is part of the second object.
Respond with 'Yes' if the first object is frequently physically attached to the second object, refers to some component of the second object, or is a property of the second object.
This is not asking whether the two objects are similar or often seen together. Only answer 'Yes' if you generally cannot have the second object without the first object.
Respond with 'Yes' or 'No' only.

Here are some examples:
'power cord', 'hair dryer': Yes
'bookmark', 'book': No
'handlebar', 'bicycle': Yes
'label', 'wine bottle': Yes
'collar', 'dog': No
'drinking glass', 'wine bottle': No
'soil', 'plant pot': Yes
'rod', 'pull-up bar': Yes

Answer for the following object or term.

'SPUR FEATURE', 'TARGET OBJECT':";

pub const FILTER_CONFUSION: &str = "Determine whether an instance of the first object in a photograph could be easily confused as being the second object type.
This is not asking whether the two objects are similar or often seen together. Only answer 'Yes' if the two objects look so similar to each other that most people would not be able to tell the difference between them in an image when viewed from certain angles.
Respond with 'Yes' or 'No' only.

Here are some examples:
'knife', 'fork': Yes
'chopstick', 'fork': No
'balloon', 'kite': Yes
'airplane', 'kite': No
'parking space', 'parking meter': No
'parking space', 'parking lot': Yes
'coffee cup', 'cup', : Yes
'straw', 'cup': No
'juice', 'cider': Yes
'barrel', 'composter': Yes
'soil', 'mulch': Yes
'double bass', 'guitar': No

Answer for the following object or term.

'SPUR FEATURE', 'TARGET OBJECT':";

/// Replace every occurrence of each placeholder, longest placeholder first so
/// overlapping names cannot clobber each other.
pub fn fill(template: &str, subs: &[(&str, &str)]) -> String {
    let mut order: Vec<&(&str, &str)> = subs.iter().collect();
    order.sort_by_key(|(k, _)| core::cmp::Reverse(k.len()));
    // Substitute in one left-to-right pass so inserted values are never rescanned.
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while !rest.is_empty() {
        for (key, value) in &order {
            if let Some(after) = rest.strip_prefix(*key) {
                out.push_str(value);
                rest = after;
                continue 'outer;
            }
        }
        let ch = rest.chars().next().expect("non-empty");
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

pub fn eval_prompt(index: usize, class: &str) -> String {
    fill(EVAL_PROMPTS[index], &[("CLASSNAME", class)])
}

pub fn generation_prompt(objects: bool, n: usize, class: &str) -> String {
    let opening = if objects { GENERATE_OBJECTS_OPENING } else { GENERATE_BACKGROUND_OPENING };
    let n = n.to_string();
    let mut s = fill(opening, &[("N", &n), ("CLASSNAME", class)]);
    s.push(' ');
    s.push_str(&fill(GENERATE_SUFFIX, &[("CLASSNAME", class)]));
    s
}

/// Cue list rendering used by the spurious-list strategy.
pub fn cues_list(cues: &[String]) -> String {
    cues.join(", ")
}
