//! Line-oriented TCP protocol: `LOAD`, `UNLOAD`, `SYNTH`, `STATS`, `QUIT`.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::Arc;

use crate::backbone::save_mels;

use super::{Registry, ServeError};

/// Response to one request line; `close` ends the connection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reply {
    pub text: Option<String>,
    pub close: bool,
}

impl Reply {
    fn ok(text: String) -> Self {
        Self {
            text: Some(text),
            close: false,
        }
    }

    fn err(e: &ServeError) -> Self {
        let msg = e.to_string().replace(['\n', '\r'], " ");
        Self::ok(format!("ERR {} {msg}", e.code()))
    }
}

fn parse_tokens(s: &str) -> Result<Vec<usize>, ServeError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| ServeError::Malformed(format!("bad token id `{t}`")))
        })
        .collect()
}

fn run(registry: &Registry, line: &str) -> Result<String, ServeError> {
    let mut words = line.split_whitespace();
    let cmd = words.next().unwrap_or("");
    let args: Vec<&str> = words.collect();
    match (cmd, args.as_slice()) {
        ("LOAD", [path]) => Ok(format!("OK {}", registry.load(Path::new(path))?)),
        ("UNLOAD", [label]) => registry.unload(label).map(|_| "OK".to_string()),
        ("SYNTH", [label, out, ids]) => {
            let tokens = parse_tokens(ids)?;
            let mel = registry.synth(label, &tokens)?;
            save_mels(&mel, Path::new(out))?;
            Ok(format!("OK {} {out}", mel.frames))
        }
        ("STATS", []) => {
            let s = registry.stats();
            Ok(format!(
                "OK residents={} loads={} evictions={} syntheses={} backbone_bytes={} total_bytes={}",
                s.residents, s.loads, s.evictions, s.syntheses, s.backbone_bytes, s.total_bytes
            ))
        }
        _ => Err(ServeError::Malformed(format!("unrecognized request `{}`", line.trim()))),
    }
}

pub fn handle_line(registry: &Registry, line: &str) -> Reply {
    if line.trim() == "QUIT" {
        return Reply { text: None, close: true };
    }
    match run(registry, line) {
        Ok(text) => Reply::ok(text),
        Err(e) => Reply::err(&e),
    }
}

pub fn handle_connection(registry: &Registry, stream: TcpStream) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_line(registry, &line);
        if let Some(text) = reply.text {
            writeln!(writer, "{text}")?;
            writer.flush()?;
        }
        if reply.close {
            break;
        }
    }
    Ok(())
}

/// Accepts connections until the listener fails, one thread per connection.
pub fn serve(registry: Arc<Registry>, listener: TcpListener) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let reg = Arc::clone(&registry);
        std::thread::spawn(move || {
            let _ = handle_connection(&reg, stream);
        });
    }
    Ok(())
}
