use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ADD_PROMPT: &str = "Given a sentence {caption}, generate a new sentence and includes each object from the list {objects}. Make the changes to the original sentence as minimal as possible. Ensure that the new sentence is coherent, natural, semantically smooth and free of grammatical errors.";

const REMOVE_OBJECT_PROMPT: &str = "Given a sentence {caption}, generate a new sentence and remove each object from list {objects} to make the semantics of the sentence different. Ensure that the new sentence is coherent, natural, semantically smooth and free of grammatical errors.";

const ALTER_OBJECT_PROMPT: &str = "Given a sentence {caption}, choose to modify the objects, colors, attributes, etc., within the sentence to make the semantics of the sentence different. Make the changes to the original sentence as minimal as possible. Ensure that the new sentence is coherent, natural, semantically smooth and free of grammatical errors.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    Add,
    RemoveObject,
    AlterObject,
}

impl PromptTemplate {
    pub fn text(self) -> &'static str {
        match self {
            PromptTemplate::Add => ADD_PROMPT,
            PromptTemplate::RemoveObject => REMOVE_OBJECT_PROMPT,
            PromptTemplate::AlterObject => ALTER_OBJECT_PROMPT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRequest {
    pub template: PromptTemplate,
    pub caption: String,
    pub objects: Vec<String>,
    pub rendered: String,
}

/// Render one of the rewriting prompts. Objects are substituted as a
/// bracketed, comma-separated list: `[cat, car]`.
pub fn render_prompt(template: PromptTemplate, caption: &str, objects: &[String]) -> Result<PromptRequest> {
    match template {
        PromptTemplate::Add | PromptTemplate::RemoveObject if objects.is_empty() => {
            return Err(Error::validation(format!(
                "{template:?} prompt needs at least one object"
            )));
        }
        PromptTemplate::AlterObject if !objects.is_empty() => {
            return Err(Error::validation("alter prompt takes no objects"));
        }
        _ => {}
    }
    let list = format!("[{}]", objects.join(", "));
    let rendered = template
        .text()
        .replace("{caption}", caption)
        .replace("{objects}", &list);
    Ok(PromptRequest {
        template,
        caption: caption.to_owned(),
        objects: objects.to_vec(),
        rendered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_prompt_renders_verbatim() {
        let req = render_prompt(PromptTemplate::Add, "a dog runs", &["cat".into()]).unwrap();
        assert!(req.rendered.contains("includes each object from the list"));
        assert_eq!(
            req.rendered,
            "Given a sentence a dog runs, generate a new sentence and includes each object from \
             the list [cat]. Make the changes to the original sentence as minimal as possible. \
             Ensure that the new sentence is coherent, natural, semantically smooth and free of \
             grammatical errors."
        );
    }

    #[test]
    fn remove_prompt_lists_objects() {
        let req = render_prompt(
            PromptTemplate::RemoveObject,
            "a dog and a cat sit.",
            &["cat".into(), "dog".into()],
        )
        .unwrap();
        assert!(req.rendered.contains("remove each object from list [cat, dog]"));
    }

    #[test]
    fn alter_prompt_has_no_objects() {
        let req = render_prompt(PromptTemplate::AlterObject, "a red car.", &[]).unwrap();
        assert!(req.rendered.contains("modify the objects, colors, attributes"));
        assert!(req.rendered.starts_with("Given a sentence a red car., choose"));
    }

    #[test]
    fn missing_objects_rejected() {
        assert!(render_prompt(PromptTemplate::Add, "a dog runs", &[]).is_err());
        assert!(render_prompt(PromptTemplate::RemoveObject, "a dog runs", &[]).is_err());
    }
}
