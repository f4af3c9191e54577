//! Grammar file format: one line per transcript, `recipe_id: a0 a1 a2 ...`
//! with integer ids; `#` starts a comment.

use watn_core::align::Grammar;
use watn_core::ActionId;

use crate::error::FormatError;

pub fn grammar_to_text(grammar: &Grammar) -> String {
    let mut out = String::from("# one line per transcript: recipe_id: a0 a1 a2 ...\n");
    for (recipe, transcripts) in grammar.iter() {
        for transcript in transcripts {
            out.push_str(&recipe.to_string());
            out.push(':');
            for action in transcript {
                out.push(' ');
                out.push_str(&action.to_string());
            }
            out.push('\n');
        }
    }
    out
}

pub fn parse_grammar(text: &str) -> Result<Grammar, FormatError> {
    let mut grammar = Grammar::new();
    for raw in text.lines() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: &str| FormatError::Parse {
            line: raw.to_string(),
            reason: reason.to_string(),
        };
        let (recipe_raw, actions_raw) =
            line.split_once(':').ok_or_else(|| parse_err("expected `recipe_id: a0 a1 ...`"))?;
        let recipe = recipe_raw
            .trim()
            .parse()
            .map_err(|_| parse_err("recipe id is not an integer"))?;
        let mut transcript = Vec::new();
        for token in actions_raw.split_whitespace() {
            let action: ActionId =
                token.parse().map_err(|_| parse_err("action id is not an integer"))?;
            transcript.push(action);
        }
        if transcript.is_empty() {
            return Err(parse_err("transcript has no actions"));
        }
        grammar.add(recipe, transcript);
    }
    Ok(grammar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut grammar = Grammar::new();
        grammar.add(0, vec![3, 1, 5]);
        grammar.add(2, vec![2, 4]);
        grammar.add(0, vec![1, 2, 3, 4]);
        let text = grammar_to_text(&grammar);
        assert_eq!(parse_grammar(&text).unwrap(), grammar);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "# header\n\n0: 1 2 3   # trailing comment\n   \n1: 4 5\n";
        let grammar = parse_grammar(text).unwrap();
        assert_eq!(grammar.transcripts_for(0), &[vec![1, 2, 3]]);
        assert_eq!(grammar.transcripts_for(1), &[vec![4, 5]]);
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(matches!(parse_grammar("0 1 2\n"), Err(FormatError::Parse { .. })));
        assert!(matches!(parse_grammar("x: 1 2\n"), Err(FormatError::Parse { .. })));
        assert!(matches!(parse_grammar("0: 1 frog\n"), Err(FormatError::Parse { .. })));
        assert!(matches!(parse_grammar("0:\n"), Err(FormatError::Parse { .. })));
    }
}
