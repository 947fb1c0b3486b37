//! Minimal stderr logger; the level comes from the `FEDTREND_LOG`
//! environment variable (`quiet`, `error`, `warn`, `info`, `debug`).

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Quiet,
    Error,
    Warn,
    Info,
    Debug,
}

static LEVEL: OnceLock<Level> = OnceLock::new();

pub fn level() -> Level {
    *LEVEL.get_or_init(|| {
        match std::env::var("FEDTREND_LOG")
            .unwrap_or_default()
            .to_ascii_lowercase()
            .as_str()
        {
            "quiet" | "off" => Level::Quiet,
            "error" => Level::Error,
            "info" => Level::Info,
            "debug" => Level::Debug,
            _ => Level::Warn,
        }
    })
}

pub fn error(msg: &str) {
    if level() >= Level::Error {
        eprintln!("error: {msg}");
    }
}

pub fn warn(msg: &str) {
    if level() >= Level::Warn {
        eprintln!("warn: {msg}");
    }
}

pub fn info(msg: &str) {
    if level() >= Level::Info {
        eprintln!("info: {msg}");
    }
}

pub fn debug(msg: &str) {
    if level() >= Level::Debug {
        eprintln!("debug: {msg}");
    }
}
