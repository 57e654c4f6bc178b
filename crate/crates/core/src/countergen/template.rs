//! Deterministic caption rewriting used when no language model is configured
//! or when a model's output fails validation.
//!
//! * insertion appends `with a(n) X[, a(n) Y] and a(n) Z` before the final
//!   punctuation mark;
//! * removal deletes the object's noun phrase (determiners, numerals and
//!   colour words directly in front of it) plus one dangling connector;
//! * alteration swaps one noun, colour or number word through a fixed table,
//!   or inserts an attribute adjective after an article.

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "some", "one", "two", "three", "four", "five", "several", "many", "his",
    "her", "their", "its", "this", "that", "these", "those",
];

const CONNECTORS: &[&str] = &[
    "and", "or", "with", "on", "in", "near", "at", "by", "under", "beside", "behind", "of",
];

const NOUN_SWAPS: &[(&str, &str)] = &[
    ("man", "woman"),
    ("men", "women"),
    ("boy", "girl"),
    ("dog", "cat"),
    ("car", "truck"),
    ("table", "chair"),
    ("cup", "bowl"),
    ("horse", "cow"),
    ("bus", "train"),
    ("bicycle", "motorcycle"),
    ("pizza", "cake"),
    ("fork", "knife"),
    ("laptop", "book"),
    ("bench", "sofa"),
];

const COLOR_SWAPS: &[(&str, &str)] = &[
    ("red", "blue"),
    ("white", "black"),
    ("green", "yellow"),
    ("brown", "gray"),
    ("orange", "purple"),
];

const NUMBER_SWAPS: &[(&str, &str)] = &[("two", "three"), ("four", "five")];

const ADJECTIVES: &[&str] = &["small", "large", "wooden", "broken", "tall", "dirty", "shiny"];

#[derive(Debug, Clone)]
struct Word {
    lead: String,
    core: String,
    trail: String,
}

impl Word {
    fn lower(&self) -> String {
        self.core.to_lowercase()
    }

    fn render(&self) -> String {
        format!("{}{}{}", self.lead, self.core, self.trail)
    }
}

fn split_words(text: &str) -> Vec<Word> {
    text.split_whitespace()
        .map(|raw| {
            let start = raw.find(|c: char| c.is_alphanumeric()).unwrap_or(raw.len());
            let end = raw
                .rfind(|c: char| c.is_alphanumeric())
                .map(|i| i + raw[i..].chars().next().map_or(1, char::len_utf8))
                .unwrap_or(start)
                .max(start);
            Word {
                lead: raw[..start].to_owned(),
                core: raw[start..end].to_owned(),
                trail: raw[end..].to_owned(),
            }
        })
        .collect()
}

fn join_words<'a>(words: impl IntoIterator<Item = &'a Word>) -> String {
    words
        .into_iter()
        .map(Word::render)
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_surface_match(word: &str, target: &str, last: bool) -> bool {
    word == target
        || (last
            && (word.strip_suffix('s') == Some(target) || word.strip_suffix("es") == Some(target)))
}

/// Word spans `[start, end)` where `object` occurs (case-insensitive, last
/// token may carry a plural `s`/`es`).
fn find_spans(words: &[Word], object: &str) -> Vec<(usize, usize)> {
    let target: Vec<String> = object.split_whitespace().map(str::to_lowercase).collect();
    if target.is_empty() || words.len() < target.len() {
        return Vec::new();
    }
    let lowered: Vec<String> = words.iter().map(Word::lower).collect();
    (0..=words.len() - target.len())
        .filter(|&s| {
            target
                .iter()
                .enumerate()
                .all(|(k, t)| is_surface_match(&lowered[s + k], t, k + 1 == target.len()))
        })
        .map(|s| (s, s + target.len()))
        .collect()
}

/// Whether `text` mentions `object` as a whole word (plural allowed).
pub fn contains_object(text: &str, object: &str) -> bool {
    !find_spans(&split_words(text), object).is_empty()
}

pub fn indefinite_article(noun: &str) -> &'static str {
    match noun.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn split_terminal(text: &str) -> (&str, &str) {
    let trimmed = text.trim_end();
    let body = trimmed.trim_end_matches(['.', '!', '?']);
    (body.trim_end(), &trimmed[body.len()..])
}

/// `"a dog runs in a park."` + `[cat]` → `"a dog runs in a park with a cat."`
pub fn insert_objects(caption: &str, objects: &[String]) -> String {
    let phrases: Vec<String> = objects
        .iter()
        .map(|o| format!("{} {o}", indefinite_article(o)))
        .collect();
    let list = match phrases.as_slice() {
        [] => return caption.to_owned(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    };
    let (body, punct) = split_terminal(caption);
    format!("{body} with {list}{punct}")
}

fn capitalize_like(original: &str, word: &str) -> String {
    if original.chars().next().is_some_and(char::is_uppercase) {
        let mut chars = word.chars();
        match chars.next() {
            Some(c) => c.to_uppercase().chain(chars).collect(),
            None => String::new(),
        }
    } else {
        word.to_owned()
    }
}

/// Delete every mention of `objects` together with its determiners and one
/// dangling connector. Returns the caption unchanged when nothing matched.
pub fn remove_objects(caption: &str, objects: &[String]) -> String {
    let words = split_words(caption);
    let n = words.len();
    let mut removed = vec![false; n];
    let lower: Vec<String> = words.iter().map(Word::lower).collect();
    for obj in objects {
        for (start, end) in find_spans(&words, obj) {
            if removed[start..end].iter().any(|&r| r) {
                continue;
            }
            let mut s = start;
            while s > 0
                && !removed[s - 1]
                && words[s - 1].trail.is_empty()
                && (DETERMINERS.contains(&lower[s - 1].as_str())
                    || is_color(&lower[s - 1]))
            {
                s -= 1;
            }
            removed[s..end].iter_mut().for_each(|r| *r = true);
            let prev = (0..s).rev().find(|&i| !removed[i]);
            let next = (end..n).find(|&i| !removed[i]);
            match prev {
                Some(p) if CONNECTORS.contains(&lower[p].as_str()) && words[p].trail.is_empty() => {
                    removed[p] = true;
                }
                _ => {
                    if let Some(q) = next {
                        if matches!(lower[q].as_str(), "and" | "or") {
                            removed[q] = true;
                        }
                    }
                }
            }
        }
    }
    if !removed.iter().any(|&r| r) {
        return caption.to_owned();
    }
    let mut out: Vec<Word> = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if removed[i] {
            // keep sentence punctuation that hung off a removed word
            if !w.trail.is_empty() {
                if let Some(last) = out.last_mut() {
                    if last.trail.is_empty() {
                        last.trail = w.trail.clone();
                    }
                }
            }
        } else {
            out.push(w.clone());
        }
    }
    if let (Some(first), Some(orig)) = (out.first_mut(), words.first()) {
        if removed[0] {
            first.core = capitalize_like(&orig.core, &first.core);
        }
    }
    join_words(&out)
}

fn is_color(word: &str) -> bool {
    COLOR_SWAPS.iter().any(|&(a, b)| a == word || b == word)
}

fn swap_in(table: &[(&str, &str)], word: &str) -> Option<String> {
    table.iter().find_map(|&(a, b)| {
        if a == word {
            Some(b.to_owned())
        } else if b == word {
            Some(a.to_owned())
        } else {
            None
        }
    })
}

fn substitute(word: &str) -> Option<String> {
    swap_in(NOUN_SWAPS, word)
        .or_else(|| swap_in(COLOR_SWAPS, word))
        .or_else(|| swap_in(NUMBER_SWAPS, word))
        .or_else(|| {
            let stem = word.strip_suffix('s')?;
            swap_in(NOUN_SWAPS, stem).map(|r| format!("{r}s"))
        })
}

/// All alterations of `caption`, in a fixed order. Words belonging to
/// `protected` objects are never touched, and no candidate may mention a
/// `forbidden` object.
pub fn alter_candidates(caption: &str, protected: &[String], forbidden: &[String]) -> Vec<String> {
    let words = split_words(caption);
    let mut locked = vec![false; words.len()];
    for obj in protected {
        for (s, e) in find_spans(&words, obj) {
            locked[s..e].iter_mut().for_each(|l| *l = true);
        }
    }
    let mut out: Vec<String> = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if locked[i] {
            continue;
        }
        if let Some(rep) = substitute(&w.lower()) {
            let mut edited = words.clone();
            edited[i].core = capitalize_like(&w.core, &rep);
            out.push(join_words(&edited));
        }
    }
    for (i, w) in words.iter().enumerate() {
        let lw = w.lower();
        if !(lw == "a" || lw == "the") || !w.trail.is_empty() || i + 1 >= words.len() {
            continue;
        }
        let next = words[i + 1].lower();
        for adj in ADJECTIVES.iter().filter(|&&a| a != next) {
            let mut edited = words.clone();
            edited.insert(
                i + 1,
                Word {
                    lead: String::new(),
                    core: (*adj).to_owned(),
                    trail: String::new(),
                },
            );
            out.push(join_words(&edited));
        }
    }
    if out.is_empty() && !words.is_empty() {
        let first = &words[0];
        for adj in ADJECTIVES {
            let mut edited = words.clone();
            edited[0].core = first.core.to_lowercase();
            let lead = std::mem::take(&mut edited[0].lead);
            edited.insert(
                0,
                Word {
                    lead,
                    core: capitalize_like(&first.core, adj),
                    trail: String::new(),
                },
            );
            out.push(join_words(&edited));
        }
    }
    let mut seen = std::collections::HashSet::new();
    out.retain(|c| {
        c != caption && !forbidden.iter().any(|f| contains_object(c, f)) && seen.insert(c.clone())
    });
    out
}
