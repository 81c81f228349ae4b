//! Adapters for external model servers.
//!
//! Both speak the same message shape. A request is `{"template_id": .., "slots": {..}}` and a
//! reply is `{"text": ..}` or `{"error": ..}`. [`ProcessClient`] exchanges them as single
//! lines over a child process's stdin/stdout; [`HttpClient`] POSTs them to a URL.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Deserialize;

use super::{ClientError, ClientRequest, ClientResponse, LmClient};

#[derive(Deserialize)]
struct Reply {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

fn decode_reply(request: &ClientRequest, line: &str, started: Instant) -> Result<ClientResponse, ClientError> {
    let reply: Reply =
        serde_json::from_str(line.trim()).map_err(|e| ClientError::Transport(format!("bad reply line: {e}")))?;
    match (reply.text, reply.error) {
        (_, Some(err)) => Err(ClientError::BadRequest(err)),
        (Some(text), None) => {
            let mut response = ClientResponse::from_text(request, text);
            response.latency_ms = (started.elapsed().as_millis() as u64).max(1);
            Ok(response)
        }
        (None, None) => Err(ClientError::Transport("reply has neither `text` nor `error`".into())),
    }
}

struct Pipe {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// A long-running child process answering one request line with one reply line.
pub struct ProcessClient {
    command: Vec<String>,
    pipe: Mutex<Pipe>,
}

impl ProcessClient {
    /// Spawns `command` (program followed by arguments).
    pub fn spawn(command: &[String]) -> Result<Self, ClientError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| ClientError::Unavailable("empty adapter command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ClientError::Unavailable(format!("cannot start `{program}`: {e}")))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ProcessClient {
            command: command.to_vec(),
            pipe: Mutex::new(Pipe { child, stdin, stdout }),
        })
    }
}

impl LmClient for ProcessClient {
    fn fingerprint(&self) -> String {
        format!("exec:{}", self.command.join(" "))
    }

    fn send(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let started = Instant::now();
        let mut pipe = self
            .pipe
            .lock()
            .map_err(|_| ClientError::Unavailable("adapter poisoned".into()))?;
        let line = serde_json::to_string(request).expect("serializable");
        writeln!(pipe.stdin, "{line}")
            .and_then(|_| pipe.stdin.flush())
            .map_err(|e| ClientError::Unavailable(format!("adapter stdin closed: {e}")))?;
        let mut reply = String::new();
        let n = pipe
            .stdout
            .read_line(&mut reply)
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if n == 0 {
            return Err(ClientError::Unavailable("adapter exited".into()));
        }
        decode_reply(request, &reply, started)
    }
}

impl Drop for ProcessClient {
    fn drop(&mut self) {
        if let Ok(pipe) = self.pipe.get_mut() {
            let _ = pipe.child.kill();
            let _ = pipe.child.wait();
        }
    }
}

/// POSTs each request to a fixed URL.
pub struct HttpClient {
    url: String,
    agent: ureq::Agent,
    max_in_flight: usize,
}

impl HttpClient {
    pub fn new(url: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpClient {
            url: url.into(),
            agent,
            max_in_flight: max_in_flight.max(1),
        }
    }
}

impl LmClient for HttpClient {
    fn fingerprint(&self) -> String {
        format!("http:{}", self.url)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn send(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let started = Instant::now();
        let body = serde_json::to_string(request).expect("serializable");
        let mut response = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body.as_str())
            .map_err(|e| ClientError::Unavailable(format!("{}: {e}", self.url)))?;
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if status.is_server_error() {
            return Err(ClientError::Unavailable(format!("{}: HTTP {status}", self.url)));
        }
        if !status.is_success() {
            return Err(ClientError::BadRequest(format!("HTTP {status}: {text}")));
        }
        decode_reply(request, &text, started)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{caption_view, TemplateId};
    use super::*;

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    #[test]
    fn process_roundtrip() {
        let client = ProcessClient::spawn(&sh(r#"while read -r line; do echo '{"text":"a red mug"}'; done"#)).unwrap();
        assert_eq!(caption_view(&client, "crop.png").unwrap(), "a red mug");
        assert_eq!(caption_view(&client, "crop2.png").unwrap(), "a red mug");
    }

    #[test]
    fn process_error_reply_and_exit() {
        let client = ProcessClient::spawn(&sh(r#"read -r line; echo '{"error":"no such crop"}'"#)).unwrap();
        let req = ClientRequest::new(TemplateId::CaptionView).slot("crop_ref", "x");
        assert!(matches!(client.send(&req), Err(ClientError::BadRequest(m)) if m == "no such crop"));
        assert!(matches!(client.send(&req), Err(ClientError::Unavailable(_))));
    }

    #[test]
    fn missing_program_is_unavailable() {
        let err = ProcessClient::spawn(&["/nonexistent/adapter".to_string()])
            .err()
            .unwrap();
        assert!(matches!(err, ClientError::Unavailable(_)));
    }

    #[test]
    fn request_line_shape() {
        let req = ClientRequest::new(TemplateId::CaptionView).slot("crop_ref", "c.png");
        let v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&req).unwrap()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"template_id": "caption_view", "slots": {"crop_ref": "c.png"}})
        );
    }

    #[test]
    fn unreachable_http_is_unavailable() {
        let client = HttpClient::new("http://127.0.0.1:9/none", Duration::from_millis(500), 1);
        let req = ClientRequest::new(TemplateId::CaptionView).slot("crop_ref", "x");
        assert!(matches!(client.send(&req), Err(ClientError::Unavailable(_))));
    }
}
