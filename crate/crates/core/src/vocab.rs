//! The fixed prompt vocabulary: `[COLOR, SHAPE, BACKGROUND, STYLE]`.

use crate::error::{Error, Result};

pub const TOKENS: [&str; 19] = [
    "red", "green", "blue", "yellow", "white", "purple", "circle", "square", "triangle", "cross", "dark", "light",
    "noisy", "flat", "outline", "gradient", "dotted", "null_style", "NULL",
];

pub const SIZE: usize = TOKENS.len();
pub const PROMPT_LEN: usize = 4;
pub const NULL: usize = 18;

pub const COLORS: std::ops::Range<usize> = 0..6;
pub const SHAPES: std::ops::Range<usize> = 6..10;
pub const BACKGROUNDS: std::ops::Range<usize> = 10..13;
pub const STYLES: std::ops::Range<usize> = 13..18;

/// Prompt slot index of the style token.
pub const STYLE_SLOT: usize = 3;

/// RGB in `[−1, 1]` for each color token.
pub const COLOR_RGB: [[f32; 3]; 6] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, 1.0, 1.0],
    [0.6, -1.0, 1.0],
];

pub fn slot_range(slot: usize) -> std::ops::Range<usize> {
    match slot {
        0 => COLORS,
        1 => SHAPES,
        2 => BACKGROUNDS,
        _ => STYLES,
    }
}

pub fn token_id(name: &str) -> Result<usize> {
    TOKENS.iter().position(|&t| t == name).ok_or_else(|| Error::UnknownToken(name.to_string()))
}

pub fn token_name(id: usize) -> Result<&'static str> {
    TOKENS.get(id).copied().ok_or_else(|| Error::UnknownToken(id.to_string()))
}

/// The unconditional prompt.
pub fn null_prompt() -> [usize; PROMPT_LEN] {
    [NULL; PROMPT_LEN]
}

/// Checks length and that each token belongs to its slot (or is `NULL`).
pub fn validate_prompt(tokens: &[usize]) -> Result<()> {
    if tokens.len() != PROMPT_LEN {
        return Err(Error::InvalidArgument(format!("prompt needs {PROMPT_LEN} tokens, got {}", tokens.len())));
    }
    for (slot, &t) in tokens.iter().enumerate() {
        if t != NULL && !slot_range(slot).contains(&t) {
            let name = TOKENS.get(t).copied().unwrap_or("?");
            return Err(Error::UnknownToken(format!("{name} (id {t}) in slot {slot}")));
        }
    }
    Ok(())
}

pub fn parse_prompt<S: AsRef<str>>(words: &[S]) -> Result<Vec<usize>> {
    let ids = words.iter().map(|w| token_id(w.as_ref())).collect::<Result<Vec<_>>>()?;
    validate_prompt(&ids)?;
    Ok(ids)
}

pub fn prompt_names(tokens: &[usize]) -> Result<Vec<&'static str>> {
    tokens.iter().map(|&t| token_name(t)).collect()
}
