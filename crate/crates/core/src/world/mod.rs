//! The procedural prompt/scene universe and its deterministic proxy scorers.
//!
//! Prompts are token tuples (shape, brightness, background, detail); images
//! are small grayscale buffers. The aesthetic and consistency proxies stand in
//! for learned scorers and are fixed formulas so every result is reproducible.

mod image;
mod refine;
mod render;
mod score;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use image::ImageBuffer;
pub use refine::refine_prompt;
pub use render::{canonical_template, render_scene, shape_bbox, RenderParams};
pub use score::{aesthetic_proxy, aesthetic_score, consistency_proxy, image_cosine, ncc, ScoreCard};

macro_rules! token_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).expect("listed variant")
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::Prompt(format!("unknown {} token {s:?}", stringify!($name).to_lowercase())))
            }
        }
    };
}

token_enum!(Shape { Disk => "disk", Square => "square", Cross => "cross" });
token_enum!(Brightness { Dim => "dim", Bright => "bright" });
token_enum!(Background { Dark => "dark", Light => "light" });
token_enum!(Detail { None => "none", Halo => "halo", Border => "border" });

/// A structured prompt. The text rendering is a bijection with the tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptSpec {
    pub shape: Shape,
    pub brightness: Brightness,
    pub background: Background,
    pub detail: Detail,
}

/// Width of the one-hot prompt encoding fed to the denoiser.
pub const PROMPT_TOKENS: usize = 10;

impl PromptSpec {
    pub fn new(shape: Shape, brightness: Brightness, background: Background, detail: Detail) -> Self {
        Self {
            shape,
            brightness,
            background,
            detail,
        }
    }

    /// Every prompt in the universe, in a fixed order.
    pub fn all() -> Vec<PromptSpec> {
        let mut out = Vec::with_capacity(36);
        for &shape in Shape::ALL {
            for &brightness in Brightness::ALL {
                for &background in Background::ALL {
                    for &detail in Detail::ALL {
                        out.push(Self::new(shape, brightness, background, detail));
                    }
                }
            }
        }
        out
    }

    /// Position in [`PromptSpec::all`].
    pub fn ordinal(&self) -> usize {
        ((self.shape.index() * 2 + self.brightness.index()) * 2 + self.background.index()) * 3 + self.detail.index()
    }

    /// Indices of the active tokens in a `PROMPT_TOKENS`-wide one-hot layout.
    pub fn token_ids(&self) -> [usize; 4] {
        [
            self.shape.index(),
            3 + self.brightness.index(),
            5 + self.background.index(),
            7 + self.detail.index(),
        ]
    }

    pub fn with_brightness(mut self, b: Brightness) -> Self {
        self.brightness = b;
        self
    }

    pub fn with_background(mut self, b: Background) -> Self {
        self.background = b;
        self
    }

    pub fn with_detail(mut self, d: Detail) -> Self {
        self.detail = d;
        self
    }

    pub fn text(&self) -> String {
        let mut s = format!(
            "a {} {} on a {} background",
            self.brightness, self.shape, self.background
        );
        if self.detail != Detail::None {
            s.push_str(" with ");
            s.push_str(self.detail.as_str());
        }
        s
    }

    /// Parses free text by token matching. Shape, brightness and background
    /// words are required and must not conflict; a missing detail word means
    /// none.
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_ascii_lowercase())
            .collect();

        fn pick<T: Copy + FromStr + fmt::Display>(
            words: &[String],
            all: &[T],
            what: &str,
            optional: bool,
        ) -> Result<Option<T>> {
            let found: Vec<T> = words
                .iter()
                .filter_map(|w| all.iter().copied().find(|v| v.to_string() == *w))
                .collect();
            match found.as_slice() {
                [] if optional => Ok(None),
                [] => Err(Error::Prompt(format!("no {what} word found"))),
                [one] => Ok(Some(*one)),
                [first, rest @ ..] if rest.iter().all(|r| r.to_string() == first.to_string()) => Ok(Some(*first)),
                _ => Err(Error::Prompt(format!("conflicting {what} words"))),
            }
        }

        let shape = pick(&words, Shape::ALL, "shape", false)?.expect("required");
        let brightness = pick(&words, Brightness::ALL, "brightness", false)?.expect("required");
        let background = pick(&words, Background::ALL, "background", false)?.expect("required");
        let detail = pick(&words, &[Detail::Halo, Detail::Border], "detail", true)?.unwrap_or(Detail::None);
        Ok(Self::new(shape, brightness, background, detail))
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Uniform draw over all token combinations, deterministic per seed.
pub fn sample_prompt(seed: u64) -> PromptSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = PromptSpec::all();
    all[rng.random_range(0..all.len())]
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PromptLine {
    Tokens {
        shape: String,
        brightness: String,
        background: String,
        detail: String,
    },
    Text {
        text: String,
    },
}

/// Reads a JSONL prompt file: each line is either a token object or
/// `{"text": ...}`. Blank lines are skipped.
pub fn load_prompt_file(path: &Path) -> Result<Vec<PromptSpec>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut prompts = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::FormatLine {
            line: i + 1,
            message: m,
        };
        let parsed: PromptLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let spec = match parsed {
            PromptLine::Tokens {
                shape,
                brightness,
                background,
                detail,
            } => PromptSpec::new(
                shape.parse().map_err(|e: Error| bad(e.to_string()))?,
                brightness.parse().map_err(|e: Error| bad(e.to_string()))?,
                background.parse().map_err(|e: Error| bad(e.to_string()))?,
                detail.parse().map_err(|e: Error| bad(e.to_string()))?,
            ),
            PromptLine::Text { text } => PromptSpec::parse(&text).map_err(|e| bad(e.to_string()))?,
        };
        prompts.push(spec);
    }
    if prompts.is_empty() {
        return Err(Error::Prompt(format!("{} contains no prompts", path.display())));
    }
    Ok(prompts)
}
