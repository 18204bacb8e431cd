//! Machine-readable event log: NDJSON lines to a file or stderr.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use crate::clock::{Clock, SystemClock};
use crate::timefmt;

pub struct EventLog {
    sink: Mutex<Sink>,
}

enum Sink {
    Stderr,
    File(std::fs::File),
    Quiet,
}

impl EventLog {
    pub fn stderr() -> EventLog {
        EventLog {
            sink: Mutex::new(Sink::Stderr),
        }
    }

    pub fn quiet() -> EventLog {
        EventLog {
            sink: Mutex::new(Sink::Quiet),
        }
    }

    pub fn file(path: &Path) -> std::io::Result<EventLog> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog {
            sink: Mutex::new(Sink::File(f)),
        })
    }

    pub fn log(&self, event: &str, fields: serde_json::Value) {
        let line = serde_json::json!({
            "ts": timefmt::format_epoch_millis(SystemClock.now_ms() as i64),
            "event": event,
            "fields": fields,
        });
        let mut sink = self.sink.lock().unwrap();
        match &mut *sink {
            Sink::Stderr => eprintln!("{line}"),
            Sink::File(f) => {
                let _ = writeln!(f, "{line}");
            }
            Sink::Quiet => {}
        }
    }
}
