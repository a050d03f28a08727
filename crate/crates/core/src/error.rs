use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("glyph image has no pixels above the binarization threshold")]
    EmptyGlyph,
    #[error("model state error: {0}")]
    ModelState(String),
    #[error("session incomplete, unanswered items: {0:?}")]
    IncompleteSession(Vec<String>),
    #[error("schema error at {pointer}: {detail}")]
    Schema { pointer: String, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// JSON pointer (RFC 6901) for a serde path; the root is `/`.
pub fn json_pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            serde_path_to_error::Segment::Seq { index } => out.push_str(&index.to_string()),
            serde_path_to_error::Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            serde_path_to_error::Segment::Enum { variant } => out.push_str(variant),
            serde_path_to_error::Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Deserializes JSON text, reporting failures as schema errors with a pointer.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Schema { pointer: json_pointer(e.path()), detail: e.inner().to_string() })
}

/// Same as [`parse_json`] for an already-parsed value.
pub fn from_json_value<T: serde::de::DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(value)
        .map_err(|e| Error::Schema { pointer: json_pointer(e.path()), detail: e.inner().to_string() })
}
