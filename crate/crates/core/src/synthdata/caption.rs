//! Template captions and the rule-based multi-view caption merge.
//!
//! All text is lowercase space-separated tokens with "." and "?" as their
//! own tokens, so captions round-trip through the word tokenizer.

use crate::error::{Error, Result};
use crate::synthdata::scene::{hue_rgb, SceneObject, SHAPES};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionStyle {
    Short,
    Descriptive,
}

pub fn size_word(obj: &SceneObject) -> &'static str {
    let extent = 2.0 * obj.boxv.half.iter().cloned().fold(0.0f32, f32::max);
    if extent < 0.9 {
        "small"
    } else if extent < 1.3 {
        "medium"
    } else {
        "large"
    }
}

pub fn position_phrase(obj: &SceneObject) -> String {
    let [x, y, _] = obj.boxv.center;
    if (x * x + y * y).sqrt() < 1.0 {
        "near the middle of the floor".to_string()
    } else {
        let dir = if y.abs() >= x.abs() {
            if y >= 0.0 { "north" } else { "south" }
        } else if x >= 0.0 {
            "east"
        } else {
            "west"
        };
        format!("toward the {dir} side of the floor")
    }
}

pub fn make_caption(obj: &SceneObject, style: CaptionStyle) -> String {
    match style {
        CaptionStyle::Short => format!("a {} {}", obj.hue, obj.shape.name()),
        CaptionStyle::Descriptive => format!(
            "this is a {hue} {shape} . it is {size} and sits {pos} . the {shape} looks {hue} from every side .",
            hue = obj.hue,
            shape = obj.shape.name(),
            size = size_word(obj),
            pos = position_phrase(obj),
        ),
    }
}

/// Captions for the 8 ring views plus one for the point cloud itself.
pub fn view_captions(obj: &SceneObject) -> Vec<String> {
    (0..9).map(|_| make_caption(obj, CaptionStyle::Short)).collect()
}

/// Color and shape words recovered from a caption, used for voting and for
/// checking captions against ground-truth attributes.
pub fn parse_attributes(caption: &str) -> (Option<String>, Option<String>) {
    let first_sentence: Vec<&str> = caption
        .split_whitespace()
        .take_while(|w| *w != ".")
        .collect();
    let color = first_sentence
        .iter()
        .find(|w| hue_rgb(w).is_some())
        .map(|w| w.to_string());
    let shape = first_sentence
        .iter()
        .rev()
        .find(|w| !matches!(**w, "a" | "an" | "the" | "is" | "this") && hue_rgb(w).is_none())
        .map(|w| w.to_string());
    (color, shape)
}

fn vote(values: Vec<Option<String>>) -> Vec<(String, usize)> {
    // counts in first-appearance order, then sorted by count descending
    let mut order: Vec<String> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for v in values.into_iter().flatten() {
        match order.iter().position(|o| *o == v) {
            Some(i) => counts[i] += 1,
            None => {
                order.push(v);
                counts.push(1);
            }
        }
    }
    let mut pairs: Vec<(String, usize)> = order.into_iter().zip(counts).collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1));
    pairs
}

/// Merges 8 view captions plus 1 point-cloud caption into one paragraph.
/// Attribute values backed by at least 5 of the 9 inputs form the main
/// sentence; the rest become "from some angles" clauses, ordered by votes.
pub fn merge_view_captions(captions: &[String]) -> Result<String> {
    if captions.len() != 9 {
        return Err(Error::InvalidValue(format!(
            "caption merge needs 9 inputs, got {}",
            captions.len()
        )));
    }
    let parsed: Vec<(Option<String>, Option<String>)> =
        captions.iter().map(|c| parse_attributes(c)).collect();
    let colors = vote(parsed.iter().map(|p| p.0.clone()).collect());
    let shapes = vote(parsed.iter().map(|p| p.1.clone()).collect());
    let main_color = colors.first().filter(|(_, n)| *n >= 5).map(|(w, _)| w.clone());
    let main_shape = shapes.first().filter(|(_, n)| *n >= 5).map(|(w, _)| w.clone());
    let mut sentences: Vec<String> = Vec::new();
    match (&main_color, &main_shape) {
        (Some(c), Some(s)) => sentences.push(format!("this object is a {c} {s} .")),
        (Some(c), None) => sentences.push(format!("this object is {c} .")),
        (None, Some(s)) => sentences.push(format!("this object is a {s} .")),
        (None, None) => sentences.push("this object is hard to pin down .".to_string()),
    }
    let mut minority: Vec<(String, usize, bool)> = Vec::new();
    for (w, n) in &colors {
        if main_color.as_deref() != Some(w) {
            minority.push((w.clone(), *n, true));
        }
    }
    for (w, n) in &shapes {
        if main_shape.as_deref() != Some(w) {
            minority.push((w.clone(), *n, false));
        }
    }
    minority.sort_by(|a, b| b.1.cmp(&a.1));
    for (w, _, is_color) in minority {
        if is_color {
            sentences.push(format!("from some angles it looks {w} ."));
        } else {
            sentences.push(format!("from some angles it looks like a {w} ."));
        }
    }
    Ok(sentences.join(" "))
}

/// Closed word list of the caption and instruction grammar. The tokenizer
/// vocabulary is built from this, so new templates must register words here.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = vec![
        ".", "?", "a", "an", "the", "this", "that", "it", "is", "are", "and", "of", "in",
        "on", "at", "to", "from", "with", "object", "objects", "scene", "floor", "side",
        "middle", "center", "near", "far", "toward", "sits", "looks", "like", "every",
        "some", "angles", "angle", "hard", "pin", "down", "north", "south", "east",
        "west", "small", "medium", "large", "size", "color", "shape", "what", "where",
        "how", "many", "which", "describe", "briefly", "generate", "image", "picture",
        "render", "make", "turn", "paint", "recolor", "brighten", "brightness",
        "darken", "darker", "lighter", "erase", "remove", "delete", "clear", "region",
        "top", "bottom", "left", "right", "one", "two", "three", "four", "five", "six",
        "seven", "eight", "box", "there", "located",
    ];
    for s in SHAPES {
        words.push(s.name());
        // plural forms for counting answers
    }
    words.extend(["cubes", "spheres", "cones", "cylinders"]);
    for (h, _) in crate::synthdata::scene::HUES {
        words.push(h);
    }
    words
}
