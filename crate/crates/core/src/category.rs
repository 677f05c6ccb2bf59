use std::fmt;
use std::str::FromStr;

/// Per-query category. The discriminants are the class indices used by the
/// prediction head and the one-hot encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Bleed = 0,
    NonBleed = 1,
    Background = 2,
}

impl Category {
    pub const COUNT: usize = 3;
    /// Categories that describe an actual region.
    pub const OBJECTS: [Category; 2] = [Category::Bleed, Category::NonBleed];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Category::Bleed),
            1 => Some(Category::NonBleed),
            2 => Some(Category::Background),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Bleed => "bleed",
            Category::NonBleed => "non-bleed",
            Category::Background => "background",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bleed" => Ok(Category::Bleed),
            "non-bleed" => Ok(Category::NonBleed),
            "background" => Ok(Category::Background),
            _ => Err(format!("unknown category {s:?}")),
        }
    }
}

/// Frame-level label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameLabel {
    Bleeding,
    NonBleeding,
}

impl FrameLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameLabel::Bleeding => "bleeding",
            FrameLabel::NonBleeding => "non-bleeding",
        }
    }
}

impl fmt::Display for FrameLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
