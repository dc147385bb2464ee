//! Interactive play server: a browser client plays the human role over a
//! WebSocket JSON protocol while a checkpointed assistant acts on a fixed
//! tick.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{ClientMsg, ServerMsg};
pub use server::{Server, ServerConfig};
pub use session::{AssistantRuntime, Session, SessionConfig};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot listen on {0}: {1}")]
    Bind(String, #[source] std::io::Error),

    #[error(transparent)]
    Core(#[from] mbag::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("websocket handshake did not complete")]
    Handshake,

    #[error("websocket: {0}")]
    WebSocket(Box<tungstenite::Error>),
}

impl From<tungstenite::Error> for Error {
    fn from(e: tungstenite::Error) -> Self {
        Error::WebSocket(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
