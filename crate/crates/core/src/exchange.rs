// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation-exchange protocol for hosts running in another process.
//!
//! Each message is one line of JSON. Messages that carry a float block
//! declare `rows`, `cols` and `bytes` and are followed by exactly `bytes`
//! bytes of little-endian `f32` values, row-major.
//!
//! ```text
//! HELLO                       -> HELLO {d_l, tokens, vocab}
//! RUN {input}                 -> ACT {block}
//! RANGES {input}              -> RANGES {ranges}
//! COMPLETE {block}            -> LOGITS {block}
//! VJP {v_c, v_b, block}       -> GRAD {block}
//! any failure                 -> ERROR {message}
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::host::{Activations, HostInput, HostModel, TokenRange};

const MAX_LINE: usize = 1 << 20;

/// Shape of a float block that follows a header line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub rows: usize,
    pub cols: usize,
    pub bytes: usize,
}

impl Frame {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bytes: rows * cols * 4,
        }
    }

    fn check(&self) -> Result<()> {
        if self.rows.checked_mul(self.cols).and_then(|n| n.checked_mul(4)) != Some(self.bytes) {
            return Err(Error::Protocol(format!(
                "frame {}x{} declares {} bytes",
                self.rows, self.cols, self.bytes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "UPPERCASE")]
pub enum Request {
    Hello,
    Run {
        input: HostInput,
    },
    Ranges {
        input: HostInput,
    },
    Complete {
        #[serde(flatten)]
        frame: Frame,
    },
    Vjp {
        v_c: usize,
        v_b: usize,
        #[serde(flatten)]
        frame: Frame,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "UPPERCASE")]
pub enum Reply {
    Hello {
        d_l: usize,
        tokens: usize,
        vocab: usize,
    },
    Act {
        #[serde(flatten)]
        frame: Frame,
    },
    Ranges {
        ranges: Vec<TokenRange>,
    },
    Logits {
        #[serde(flatten)]
        frame: Frame,
    },
    Grad {
        #[serde(flatten)]
        frame: Frame,
    },
    Error {
        message: String,
    },
}

fn transport(e: std::io::Error) -> Error {
    Error::Protocol(format!("transport failure: {e}"))
}

fn read_line(r: &mut impl BufRead) -> Result<Option<String>> {
    let mut line = String::new();
    let n = r
        .by_ref()
        .take(MAX_LINE as u64)
        .read_line(&mut line)
        .map_err(transport)?;
    if n == 0 {
        return Ok(None);
    }
    if !line.ends_with('\n') && n == MAX_LINE {
        return Err(Error::Protocol("header line too long".into()));
    }
    Ok(Some(line))
}

fn read_block(r: &mut impl Read, frame: &Frame) -> Result<Vec<f32>> {
    frame.check()?;
    let mut buf = vec![0u8; frame.bytes];
    r.read_exact(&mut buf).map_err(transport)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_msg<T: Serialize>(w: &mut impl Write, msg: &T, block: Option<&[f32]>) -> Result<()> {
    let mut line = serde_json::to_vec(msg)?;
    line.push(b'\n');
    w.write_all(&line).map_err(transport)?;
    if let Some(b) = block {
        let mut bytes = Vec::with_capacity(b.len() * 4);
        for v in b {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(transport)?;
    }
    w.flush().map_err(transport)
}

fn block_to_acts(frame: &Frame, data: Vec<f32>) -> Result<Activations> {
    Activations::new(frame.rows, frame.cols, data)
}

/// Answers requests from `reader` on `writer` until end of input.
///
/// `tokens` is reported in the HELLO reply as the host's image token count.
pub fn serve_exchange(
    host: &dyn HostModel,
    tokens: usize,
    mut reader: impl BufRead,
    mut writer: impl Write,
) -> Result<()> {
    while let Some(line) = read_line(&mut reader)? {
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                write_msg(
                    &mut writer,
                    &Reply::Error {
                        message: format!("bad request: {e}"),
                    },
                    None,
                )?;
                continue;
            }
        };
        let reply = match req {
            Request::Hello => Ok((
                Reply::Hello {
                    d_l: host.d_model(),
                    tokens,
                    vocab: host.vocab(),
                },
                None,
            )),
            Request::Run { input } => host.run(&input).map(|x| {
                (
                    Reply::Act {
                        frame: Frame::new(x.tokens, x.d_l),
                    },
                    Some(x.data),
                )
            }),
            Request::Ranges { input } => host.token_ranges(&input).map(|ranges| (Reply::Ranges { ranges }, None)),
            Request::Complete { frame } => {
                let data = read_block(&mut reader, &frame)?;
                block_to_acts(&frame, data).and_then(|x| host.complete(&x)).map(|u| {
                    let u: Vec<f32> = u.into_iter().map(|v| v as f32).collect();
                    (
                        Reply::Logits {
                            frame: Frame::new(1, u.len()),
                        },
                        Some(u),
                    )
                })
            }
            Request::Vjp { v_c, v_b, frame } => {
                let data = read_block(&mut reader, &frame)?;
                block_to_acts(&frame, data)
                    .and_then(|x| host.vjp(&x, v_c, v_b))
                    .map(|g| {
                        (
                            Reply::Grad {
                                frame: Frame::new(g.tokens, g.d_l),
                            },
                            Some(g.data),
                        )
                    })
            }
        };
        match reply {
            Ok((msg, block)) => write_msg(&mut writer, &msg, block.as_deref())?,
            Err(e) => write_msg(&mut writer, &Reply::Error { message: e.to_string() }, None)?,
        }
    }
    Ok(())
}

/// Accepts connections one after another and serves each until it closes.
pub fn serve_tcp(host: &dyn HostModel, tokens: usize, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream.map_err(transport)?;
        let reader = BufReader::new(stream.try_clone().map_err(transport)?);
        if let Err(e) = serve_exchange(host, tokens, reader, stream) {
            log::warn!("exchange connection ended: {e}");
        }
    }
    Ok(())
}

struct Channel {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
}

/// A [`HostModel`] backed by a remote process speaking the exchange
/// protocol.
pub struct ExchangeHost {
    channel: Mutex<Channel>,
    d_l: usize,
    tokens: usize,
    vocab: usize,
    child: Option<Mutex<Child>>,
}

impl ExchangeHost {
    /// Performs the HELLO handshake over an arbitrary byte channel.
    pub fn new(reader: Box<dyn BufRead + Send>, writer: Box<dyn Write + Send>) -> Result<Self> {
        let mut ch = Channel { reader, writer };
        write_msg(&mut ch.writer, &Request::Hello, None)?;
        let (d_l, tokens, vocab) = match read_reply(&mut ch.reader)? {
            Reply::Hello { d_l, tokens, vocab } => (d_l, tokens, vocab),
            other => return Err(unexpected("HELLO", &other)),
        };
        Ok(Self {
            channel: Mutex::new(ch),
            d_l,
            tokens,
            vocab,
            child: None,
        })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(transport)?;
        let reader = BufReader::new(stream.try_clone().map_err(transport)?);
        Self::new(Box::new(reader), Box::new(stream))
    }

    /// Spawns `cmd` and talks to it over its standard input and output.
    pub fn spawn(cmd: &mut Command) -> Result<Self> {
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(transport)?;
        let stdin = child.stdin.take().ok_or_else(|| Error::Protocol("no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| Error::Protocol("no stdout".into()))?;
        let mut host = Self::new(Box::new(BufReader::new(stdout)), Box::new(stdin))?;
        host.child = Some(Mutex::new(child));
        Ok(host)
    }

    /// Image token count announced by the remote host.
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    fn call(&self, req: &Request, block: Option<&[f32]>) -> Result<(Reply, Option<Vec<f32>>)> {
        let mut ch = self
            .channel
            .lock()
            .map_err(|_| Error::Protocol("channel poisoned".into()))?;
        write_msg(&mut ch.writer, req, block)?;
        let reply = read_reply(&mut ch.reader)?;
        let data = match &reply {
            Reply::Act { frame } | Reply::Logits { frame } | Reply::Grad { frame } => {
                Some(read_block(&mut ch.reader, frame)?)
            }
            Reply::Error { message } => return Err(Error::Protocol(format!("remote host: {message}"))),
            _ => None,
        };
        Ok((reply, data))
    }
}

impl Drop for ExchangeHost {
    fn drop(&mut self) {
        if let Some(c) = &self.child {
            if let Ok(mut c) = c.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

fn read_reply(r: &mut impl BufRead) -> Result<Reply> {
    let line = read_line(r)?.ok_or_else(|| Error::Protocol("remote host closed the channel".into()))?;
    serde_json::from_str(&line).map_err(|e| Error::Protocol(format!("bad reply {line:?}: {e}")))
}

fn unexpected(want: &str, got: &Reply) -> Error {
    Error::Protocol(format!("expected {want}, got {got:?}"))
}

impl HostModel for ExchangeHost {
    fn d_model(&self) -> usize {
        self.d_l
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn run(&self, input: &HostInput) -> Result<Activations> {
        match self.call(&Request::Run { input: input.clone() }, None)? {
            (Reply::Act { frame }, Some(data)) => block_to_acts(&frame, data),
            (other, _) => Err(unexpected("ACT", &other)),
        }
    }

    fn complete(&self, xhat: &Activations) -> Result<Vec<f64>> {
        let req = Request::Complete {
            frame: Frame::new(xhat.tokens, xhat.d_l),
        };
        match self.call(&req, Some(&xhat.data))? {
            (Reply::Logits { .. }, Some(data)) => Ok(data.into_iter().map(f64::from).collect()),
            (other, _) => Err(unexpected("LOGITS", &other)),
        }
    }

    fn vjp(&self, xhat: &Activations, v_c: usize, v_b: usize) -> Result<Activations> {
        let req = Request::Vjp {
            v_c,
            v_b,
            frame: Frame::new(xhat.tokens, xhat.d_l),
        };
        match self.call(&req, Some(&xhat.data))? {
            (Reply::Grad { frame }, Some(data)) => block_to_acts(&frame, data),
            (other, _) => Err(unexpected("GRAD", &other)),
        }
    }

    fn token_ranges(&self, input: &HostInput) -> Result<Vec<TokenRange>> {
        match self.call(&Request::Ranges { input: input.clone() }, None)? {
            (Reply::Ranges { ranges }, _) => Ok(ranges),
            (other, _) => Err(unexpected("RANGES", &other)),
        }
    }
}
