//! Context prompt rendering.
//!
//! Template `ctx-prompt-v1`, byte for byte:
//!
//! ```text
//! {instruction}
//! <hotwords> {h1}, {h2}, … </hotwords>        only when a bundle is given
//! <summary> {summary} </summary>              only when the bundle has one
//! ```
//!
//! Lines are joined with `\n`. An empty hotword list renders as
//! `<hotwords> </hotwords>`, so "no bundle" and "empty bundle" stay
//! distinguishable. Terms are already free of `,`, `<` and `>`, which makes
//! the sections unambiguous to parse back. The distractor count is
//! metadata and is not rendered.

use serde::{Deserialize, Serialize};

use super::bundle::ContextBundle;
use crate::error::{Error, Result};

pub const TEMPLATE_ID: &str = "ctx-prompt-v1";
pub const HOTWORDS_OPEN: &str = "<hotwords>";
pub const HOTWORDS_CLOSE: &str = "</hotwords>";
pub const SUMMARY_OPEN: &str = "<summary>";
pub const SUMMARY_CLOSE: &str = "</summary>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub id: String,
    pub instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            id: TEMPLATE_ID.to_owned(),
            instruction: "transcribe the audio".to_owned(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.id != TEMPLATE_ID {
            return Err(Error::Config(format!(
                "unsupported prompt template `{}` (this build renders `{TEMPLATE_ID}`)",
                self.id
            )));
        }
        Ok(())
    }

    pub fn render(&self, bundle: Option<&ContextBundle>) -> String {
        render_prompt(&self.instruction, bundle)
    }

    /// Fixed words every rendering can contain besides the context terms.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = self.instruction.split_whitespace().map(str::to_owned).collect();
        v.extend([HOTWORDS_OPEN, HOTWORDS_CLOSE, SUMMARY_OPEN, SUMMARY_CLOSE, ","].map(String::from));
        v
    }
}

pub fn render_prompt(instruction: &str, bundle: Option<&ContextBundle>) -> String {
    let mut out = instruction.to_owned();
    if let Some(b) = bundle {
        out.push('\n');
        out.push_str(HOTWORDS_OPEN);
        if !b.hotwords().is_empty() {
            out.push(' ');
            out.push_str(&b.hotwords().join(", "));
        }
        out.push(' ');
        out.push_str(HOTWORDS_CLOSE);
        if let Some(s) = b.summary() {
            out.push('\n');
            out.push_str(SUMMARY_OPEN);
            out.push(' ');
            out.push_str(s);
            out.push(' ');
            out.push_str(SUMMARY_CLOSE);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn absent_bundle_is_the_instruction() {
        assert_eq!(render_prompt("transcribe", None), "transcribe");
    }

    #[test]
    fn exact_bytes() {
        let b = ContextBundle::new(["alpha", "beta"], Some("a talk"));
        assert_eq!(
            render_prompt("transcribe", Some(&b)),
            "transcribe\n<hotwords> alpha, beta </hotwords>\n<summary> a talk </summary>"
        );
        let empty = ContextBundle::new(Vec::<String>::new(), None);
        assert_eq!(render_prompt("t", Some(&empty)), "t\n<hotwords> </hotwords>");
    }

    #[test]
    fn order_matters() {
        let a = ContextBundle::new(["alpha", "beta"], None);
        let b = ContextBundle::new(["beta", "alpha"], None);
        assert_ne!(render_prompt("t", Some(&a)), render_prompt("t", Some(&b)));
        assert_eq!(render_prompt("t", Some(&a)), render_prompt("t", Some(&a)));
    }

    #[test]
    fn unknown_template_is_rejected() {
        let t = PromptTemplate { id: "v0".into(), ..PromptTemplate::default() };
        assert!(t.validate().is_err());
    }

    fn bundle() -> impl Strategy<Value = Option<ContextBundle>> {
        let term = "[a-z<>,]{1,5}( [a-z]{1,3})?";
        proptest::option::of((
            proptest::collection::vec(term, 0..4),
            proptest::option::of("[a-z ,<>]{0,12}"),
        ))
        .prop_map(|o| o.map(|(h, s)| ContextBundle::new(h, s.as_deref())))
    }

    proptest! {
        #[test]
        fn rendering_is_injective(a in bundle(), b in bundle()) {
            let same_content = match (&a, &b) {
                (Some(x), Some(y)) => x.hotwords() == y.hotwords() && x.summary() == y.summary(),
                (None, None) => true,
                _ => false,
            };
            let ra = render_prompt("transcribe the audio", a.as_ref());
            let rb = render_prompt("transcribe the audio", b.as_ref());
            prop_assert_eq!(same_content, ra == rb);
        }
    }
}
