//! Yes/No answer parsing shared by filtering and evaluation.

/// Parsed reply to a binary question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Answer {
    pub yes: bool,
    /// First token was literally "yes" or "no".
    pub binary: bool,
}

impl Answer {
    pub fn indicator(self) -> u8 {
        u8::from(self.yes)
    }
}

/// Lowercase, skip leading non-alphanumerics and compare the first
/// alphanumeric run against "yes". Anything else (refusals, hedges, empty
/// strings) is "not yes".
pub fn parse_yes_no(raw: &str) -> Answer {
    let start = raw.find(|c: char| c.is_alphanumeric());
    let Some(start) = start else {
        return Answer { yes: false, binary: false };
    };
    let rest = &raw[start..];
    let end = rest.find(|c: char| !c.is_alphanumeric()).unwrap_or(rest.len());
    let token = &rest[..end];
    let yes = token.eq_ignore_ascii_case("yes");
    let no = token.eq_ignore_ascii_case("no");
    Answer { yes, binary: yes || no }
}
