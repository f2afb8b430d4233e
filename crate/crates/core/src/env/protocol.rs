//! Line-delimited JSON environment protocol over a child process's stdio.
//! The wire format is described in `docs/protocol.md`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, Observation, StepResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
pub enum Request {
    Reset,
    Step { action: usize },
    Close,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireObservation {
    pub shape: [usize; 3],
    pub data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs: Option<WireObservation>,
    #[serde(default)]
    pub reward: f64,
    #[serde(default)]
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_actions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Pixels are quantized to bytes: `round(v * 255)`, decoded as `b / 255`.
pub fn encode_observation(obs: &Observation) -> WireObservation {
    let bytes: Vec<u8> = obs
        .pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    WireObservation {
        shape: obs.shape,
        data: STANDARD.encode(bytes),
    }
}

pub fn decode_observation(wire: &WireObservation) -> Result<Observation, EnvError> {
    let bytes = STANDARD
        .decode(&wire.data)
        .map_err(|e| EnvError::Protocol(format!("bad base64 payload: {e}")))?;
    let expected: usize = wire.shape.iter().product();
    if bytes.len() != expected {
        return Err(EnvError::Protocol(format!(
            "payload has {} bytes, shape {:?} needs {expected}",
            bytes.len(),
            wire.shape
        )));
    }
    Ok(Observation {
        shape: wire.shape,
        pixels: bytes.iter().map(|b| *b as f32 / 255.0).collect(),
    })
}

/// Serves `env` until `close` or end of input.
pub fn serve<R: BufRead, W: Write>(env: &mut dyn Environment, input: R, mut output: W) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Err(e) => error_reply(format!("bad request: {e}")),
            Ok(Request::Close) => break,
            Ok(Request::Reset) => match env.reset() {
                Ok(obs) => Reply {
                    obs: Some(encode_observation(&obs)),
                    reward: 0.0,
                    done: false,
                    num_actions: Some(env.num_actions()),
                    error: None,
                },
                Err(e) => error_reply(e.to_string()),
            },
            Ok(Request::Step { action }) => match env.step(action) {
                Ok(r) => Reply {
                    obs: Some(encode_observation(&r.observation)),
                    reward: r.reward,
                    done: r.done,
                    num_actions: None,
                    error: None,
                },
                Err(e) => error_reply(e.to_string()),
            },
        };
        serde_json::to_writer(&mut output, &reply)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

fn error_reply(msg: String) -> Reply {
    Reply {
        obs: None,
        reward: 0.0,
        done: false,
        num_actions: None,
        error: Some(msg),
    }
}

/// Client side: an environment running in a child process.
pub struct ProtocolEnv {
    command: String,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    frame_skip: usize,
    num_actions: usize,
    shape: [usize; 3],
    pending: Option<Observation>,
    done: bool,
}

impl ProtocolEnv {
    /// Spawns the server and performs an initial reset to learn the action
    /// count and frame shape. Each `step` repeats the action `frame_skip`
    /// times, summing rewards and stopping early at episode end.
    pub fn spawn(program: &str, args: &[String], frame_skip: usize) -> Result<Self, EnvError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| EnvError::Protocol(format!("cannot spawn `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut env = ProtocolEnv {
            command: program.to_string(),
            child,
            stdin,
            stdout,
            frame_skip: frame_skip.max(1),
            num_actions: 0,
            shape: [0; 3],
            pending: None,
            done: true,
        };
        let reply = env.call(&Request::Reset)?;
        env.num_actions = reply
            .num_actions
            .ok_or_else(|| EnvError::Protocol("reset reply lacks num_actions".into()))?;
        let obs = env.reply_observation(&reply)?;
        env.shape = obs.shape;
        env.pending = Some(obs);
        env.done = false;
        Ok(env)
    }

    fn call(&mut self, req: &Request) -> Result<Reply, EnvError> {
        let io = |e: std::io::Error| EnvError::Protocol(format!("pipe to `{}`: {e}", self.command));
        let mut line = serde_json::to_string(req).expect("request serializes");
        line.push('\n');
        self.stdin.write_all(line.as_bytes()).map_err(io)?;
        self.stdin.flush().map_err(io)?;
        let mut buf = String::new();
        let n = self.stdout.read_line(&mut buf).map_err(io)?;
        if n == 0 {
            return Err(EnvError::Protocol(format!("`{}` closed its output", self.command)));
        }
        let reply: Reply = serde_json::from_str(&buf).map_err(|e| EnvError::Protocol(format!("bad reply: {e}")))?;
        if let Some(err) = reply.error {
            return Err(EnvError::Protocol(err));
        }
        Ok(reply)
    }

    fn reply_observation(&self, reply: &Reply) -> Result<Observation, EnvError> {
        let wire = reply
            .obs
            .as_ref()
            .ok_or_else(|| EnvError::Protocol("reply lacks obs".into()))?;
        decode_observation(wire)
    }
}

impl Environment for ProtocolEnv {
    fn name(&self) -> String {
        format!("protocol:{}", self.command)
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn frame_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn reset(&mut self) -> Result<Observation, EnvError> {
        self.done = false;
        if let Some(obs) = self.pending.take() {
            return Ok(obs);
        }
        let reply = self.call(&Request::Reset)?;
        self.reply_observation(&reply)
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if action >= self.num_actions {
            return Err(EnvError::InvalidAction {
                action,
                num_actions: self.num_actions,
            });
        }
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        self.pending = None;
        let mut reward = 0.0;
        let mut last = None;
        for _ in 0..self.frame_skip {
            let reply = self.call(&Request::Step { action })?;
            reward += reply.reward;
            let done = reply.done;
            last = Some(reply);
            if done {
                break;
            }
        }
        let reply = last.expect("frame_skip >= 1");
        self.done = reply.done;
        Ok(StepResult {
            observation: self.reply_observation(&reply)?,
            reward,
            done: reply.done,
        })
    }
}

impl Drop for ProtocolEnv {
    fn drop(&mut self) {
        if let Ok(mut line) = serde_json::to_string(&Request::Close) {
            line.push('\n');
            let _ = self.stdin.write_all(line.as_bytes());
            let _ = self.stdin.flush();
        }
        let _ = self.child.wait();
    }
}
