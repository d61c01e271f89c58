//! Byte transports for the JSON wire protocol: HTTP POST or a long-lived
//! subprocess speaking one JSON document per line on stdin/stdout.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use super::BackendError;

/// Where an external model lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Base URL; the route (`/answer`, `/embed`) is appended.
    Http(String),
    /// Program and arguments of a subprocess.
    Command(Vec<String>),
}

impl Endpoint {
    /// `http://…` / `https://…` are HTTP; anything else is a whitespace-split
    /// command line.
    pub fn parse(spec: &str) -> Result<Self, BackendError> {
        let spec = spec.trim();
        if spec.starts_with("http://") || spec.starts_with("https://") {
            return Ok(Endpoint::Http(spec.trim_end_matches('/').to_string()));
        }
        let parts: Vec<String> = spec.split_whitespace().map(str::to_string).collect();
        if parts.is_empty() {
            return Err(BackendError::InvalidRequest("empty endpoint".into()));
        }
        Ok(Endpoint::Command(parts))
    }
}

pub trait Transport: Send + Sync {
    /// Sends one JSON document and returns the peer's reply.
    fn exchange(&self, body: &str) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(200),
            timeout: Duration::from_secs(120),
        }
    }
}

impl RetryPolicy {
    /// Runs `op`, retrying transport failures with exponential backoff.
    /// Other error kinds return immediately.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match op() {
                Err(BackendError::Transport(_)) if attempt < self.attempts.max(1) => {
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, url: url.into() }
    }
}

impl Transport for HttpTransport {
    fn exchange(&self, body: &str) -> Result<String, BackendError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status.is_server_error() {
            return Err(BackendError::Transport(format!("HTTP {status}: {text}")));
        }
        Ok(text)
    }
}

struct ChildPipes {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A subprocess kept alive for the transport's lifetime. Exchanges are
/// serialized: one request line out, one response line back.
pub struct StdioTransport {
    pipes: Mutex<ChildPipes>,
}

impl StdioTransport {
    pub fn spawn(argv: &[String]) -> Result<Self, BackendError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| BackendError::InvalidRequest("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Transport(format!("spawning {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = BufReader::new(child.stdout.take().expect("piped"));
        Ok(Self {
            pipes: Mutex::new(ChildPipes { child, stdin, stdout }),
        })
    }
}

impl Transport for StdioTransport {
    fn exchange(&self, body: &str) -> Result<String, BackendError> {
        if body.contains('\n') {
            return Err(BackendError::InvalidRequest("request must be a single line".into()));
        }
        let mut pipes = self.pipes.lock().expect("stdio transport poisoned");
        let io = |e: std::io::Error| BackendError::Transport(e.to_string());
        writeln!(pipes.stdin, "{body}").map_err(io)?;
        pipes.stdin.flush().map_err(io)?;
        let mut line = String::new();
        let n = pipes.stdout.read_line(&mut line).map_err(io)?;
        if n == 0 {
            return Err(BackendError::Transport("subprocess closed its output".into()));
        }
        Ok(line.trim_end_matches(['\r', '\n']).to_string())
    }
}

impl Drop for StdioTransport {
    fn drop(&mut self) {
        if let Ok(pipes) = self.pipes.get_mut() {
            let _ = pipes.child.kill();
            let _ = pipes.child.wait();
        }
    }
}

/// Opens a transport; `route` is appended to HTTP base URLs.
pub fn connect(endpoint: &Endpoint, route: &str, timeout: Duration) -> Result<Box<dyn Transport>, BackendError> {
    match endpoint {
        Endpoint::Http(base) => {
            let url = if base.ends_with(route) {
                base.clone()
            } else {
                format!("{base}{route}")
            };
            Ok(Box::new(HttpTransport::new(url, timeout)))
        }
        Endpoint::Command(argv) => Ok(Box::new(StdioTransport::spawn(argv)?)),
    }
}

/// Server side of the stdio transport: answers each input line with one
/// output line until EOF.
pub fn serve_lines(
    input: impl BufRead,
    mut output: impl Write,
    mut handle: impl FnMut(&str) -> String,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle(&line);
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            Endpoint::parse("http://127.0.0.1:9000/").unwrap(),
            Endpoint::Http("http://127.0.0.1:9000".into())
        );
        assert_eq!(
            Endpoint::parse("python3 serve.py --port 1").unwrap(),
            Endpoint::Command(vec!["python3".into(), "serve.py".into(), "--port".into(), "1".into()])
        );
        assert!(Endpoint::parse("  ").is_err());
    }

    #[test]
    fn retries_only_transport_errors() {
        let policy = RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
            timeout: Duration::from_secs(1),
        };
        let calls = AtomicU32::new(0);
        let r: Result<(), _> = policy.run(|| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Transport("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        calls.store(0, Ordering::SeqCst);
        let r: Result<(), _> = policy.run(|| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Malformed("x".into()))
        });
        assert!(matches!(r, Err(BackendError::Malformed(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);

        calls.store(0, Ordering::SeqCst);
        let r = policy.run(|| {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                Err(BackendError::Transport("blip".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(r.unwrap(), 7);
    }

    #[test]
    fn serve_lines_answers_each_line() {
        let input = b"a\n\nb\n".as_slice();
        let mut out = Vec::new();
        serve_lines(input, &mut out, |l| l.to_uppercase()).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "A\nB\n");
    }

    #[test]
    fn stdio_transport_round_trips_through_cat() {
        let t = StdioTransport::spawn(&["cat".to_string()]).unwrap();
        assert_eq!(t.exchange(r#"{"x":1}"#).unwrap(), r#"{"x":1}"#);
        assert!(matches!(t.exchange("a\nb"), Err(BackendError::InvalidRequest(_))));
    }
}
