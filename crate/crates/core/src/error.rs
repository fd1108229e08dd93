use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ply parse error at {location}: {message}")]
    Ply { location: String, message: String },

    #[error("camera json: {0}")]
    CameraJson(String),

    #[error("invalid camera {id}: {message}")]
    Camera { id: String, message: String },

    #[error("image decode: {0}")]
    Image(String),

    #[error("mask size {mask_w}x{mask_h} does not match camera {cam_w}x{cam_h}")]
    MaskSize {
        mask_w: usize,
        mask_h: usize,
        cam_w: usize,
        cam_h: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
