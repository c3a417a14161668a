//! HTTP endpoint hosted next to the agent.
//!
//! | route | effect |
//! |---|---|
//! | `GET /health` | [`HealthReport`] as JSON |
//! | `GET /notifications?from=N&follow=1` | sink lines from line `N`; with `follow=1` the response stays open and streams new lines as they are appended |
//! | `GET /topics` | topic names and next offsets |
//! | `POST /topics/<name>` | publishes each non-empty body line as one message; replies with the assigned offsets |

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Request, Response, Server};

use super::{Agent, HealthReport};
use crate::broker::{Broker, BrokerError};

pub struct Endpoint {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PublishReply {
    pub topic: String,
    pub offsets: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicInfo {
    pub name: String,
    pub next_offset: u64,
}

struct Ctx {
    broker: Arc<Broker>,
    agent: Option<Arc<Agent>>,
    sink_path: PathBuf,
    stop: Arc<AtomicBool>,
}

impl Endpoint {
    /// Binds `addr` (port 0 picks a free port) and serves until
    /// [`Endpoint::shutdown`].
    pub fn start(addr: &str, broker: Arc<Broker>, agent: Option<Arc<Agent>>, sink_path: PathBuf) -> io::Result<Endpoint> {
        let server = Server::http(addr).map_err(io::Error::other)?;
        let local = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("endpoint is not bound to an IP address"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let ctx = Arc::new(Ctx {
            broker,
            agent,
            sink_path,
            stop: stop.clone(),
        });
        let thread = std::thread::Builder::new().name("endpoint".into()).spawn(move || {
            while !ctx.stop.load(Ordering::SeqCst) {
                match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(req)) => {
                        let ctx = ctx.clone();
                        std::thread::spawn(move || handle(&ctx, req));
                    }
                    Ok(None) => {}
                    Err(e) => log::warn!("endpoint accept: {e}"),
                }
            }
        })?;
        Ok(Endpoint {
            addr: local,
            stop,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn json_header() -> Header {
    Header::from_bytes("Content-Type", "application/json").unwrap()
}

fn reply_json<T: Serialize>(req: Request, status: u16, body: &T) {
    let text = serde_json::to_string(body).unwrap_or_else(|_| "{}".into());
    let _ = req.respond(Response::from_string(text).with_status_code(status).with_header(json_header()));
}

fn reply_error(req: Request, status: u16, msg: &str) {
    reply_json(req, status, &serde_json::json!({ "error": msg }));
}

fn query_param<'a>(url: &'a str, key: &str) -> Option<&'a str> {
    let (_, q) = url.split_once('?')?;
    q.split('&').find_map(|kv| {
        let (k, v) = kv.split_once('=')?;
        (k == key).then_some(v)
    })
}

fn handle(ctx: &Ctx, mut req: Request) {
    let url = req.url().to_string();
    let path = url.split('?').next().unwrap_or("");
    match (req.method().clone(), path) {
        (Method::Get, "/health") => match &ctx.agent {
            Some(a) => reply_json(req, 200, &a.health()),
            None => reply_error(req, 503, "no agent running"),
        },
        (Method::Get, "/topics") => {
            let infos: Vec<TopicInfo> = ctx
                .broker
                .topics()
                .into_iter()
                .filter_map(|name| {
                    let next_offset = ctx.broker.next_offset(&name).ok()?;
                    Some(TopicInfo { name, next_offset })
                })
                .collect();
            reply_json(req, 200, &infos);
        }
        (Method::Get, "/notifications") => {
            let from = query_param(&url, "from").and_then(|v| v.parse().ok()).unwrap_or(0);
            let follow = query_param(&url, "follow").map_or(true, |v| v != "0");
            match TailReader::open(ctx.sink_path.clone(), from, follow, ctx.stop.clone()) {
                Ok(r) => {
                    let header = Header::from_bytes("Content-Type", "application/x-ndjson").unwrap();
                    let _ = req.respond(Response::new(200.into(), vec![header], r, None, None));
                }
                Err(e) => reply_error(req, 500, &e.to_string()),
            }
        }
        (Method::Post, p) if p.starts_with("/topics/") => {
            let topic = p["/topics/".len()..].to_string();
            let mut body = String::new();
            if req.as_reader().read_to_string(&mut body).is_err() {
                return reply_error(req, 400, "body is not UTF-8");
            }
            let lines: Vec<&[u8]> = body.lines().filter(|l| !l.trim().is_empty()).map(str::as_bytes).collect();
            if lines.is_empty() {
                return reply_error(req, 400, "empty body");
            }
            match ctx.broker.publish_batch(&topic, &lines) {
                Ok(offsets) => reply_json(req, 200, &PublishReply { topic, offsets }),
                Err(e @ BrokerError::UnknownTopic(_)) => reply_error(req, 404, &e.to_string()),
                Err(e @ BrokerError::Unavailable) => reply_error(req, 503, &e.to_string()),
                Err(e) => reply_error(req, 500, &e.to_string()),
            }
        }
        _ => reply_error(req, 404, "no such route"),
    }
}

/// Reads complete sink lines from line `from` on, optionally waiting for
/// more at end of file.
struct TailReader {
    reader: BufReader<File>,
    partial: String,
    out: Vec<u8>,
    pos: usize,
    follow: bool,
    stop: Arc<AtomicBool>,
}

impl TailReader {
    fn open(path: PathBuf, from: u64, follow: bool, stop: Arc<AtomicBool>) -> io::Result<TailReader> {
        let file = std::fs::OpenOptions::new().create(true).append(true).read(true).open(&path)?;
        let mut r = TailReader {
            reader: BufReader::new(file),
            partial: String::new(),
            out: Vec::new(),
            pos: 0,
            follow,
            stop,
        };
        let mut skipped = 0;
        while skipped < from {
            match r.next_line()? {
                Some(_) => skipped += 1,
                None if r.follow && !r.stop.load(Ordering::SeqCst) => std::thread::sleep(Duration::from_millis(20)),
                None => break,
            }
        }
        Ok(r)
    }

    fn next_line(&mut self) -> io::Result<Option<String>> {
        self.reader.read_line(&mut self.partial)?;
        if self.partial.ends_with('\n') {
            Ok(Some(std::mem::take(&mut self.partial)))
        } else {
            Ok(None)
        }
    }
}

impl Read for TailReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        while self.pos >= self.out.len() {
            match self.next_line()? {
                Some(line) => {
                    self.out = line.into_bytes();
                    self.pos = 0;
                }
                None => {
                    if !self.follow || self.stop.load(Ordering::SeqCst) {
                        return Ok(0);
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
            }
        }
        let n = buf.len().min(self.out.len() - self.pos);
        buf[..n].copy_from_slice(&self.out[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

/// Minimal client for a remote endpoint.
#[derive(Debug, Clone)]
pub struct EndpointClient {
    base: String,
    http: ureq::Agent,
}

impl EndpointClient {
    pub fn new(base: impl Into<String>) -> EndpointClient {
        let mut base = base.into();
        if !base.starts_with("http://") {
            base = format!("http://{base}");
        }
        EndpointClient {
            base: base.trim_end_matches('/').to_string(),
            http: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
        }
    }

    fn err(e: ureq::Error) -> io::Error {
        match e {
            ureq::Error::Status(code, r) => {
                io::Error::other(format!("HTTP {code}: {}", r.into_string().unwrap_or_default()))
            }
            other => io::Error::other(other.to_string()),
        }
    }

    pub fn health(&self) -> io::Result<HealthReport> {
        let r = self.http.get(&format!("{}/health", self.base)).call().map_err(Self::err)?;
        r.into_json()
    }

    pub fn topics(&self) -> io::Result<Vec<TopicInfo>> {
        let r = self.http.get(&format!("{}/topics", self.base)).call().map_err(Self::err)?;
        r.into_json()
    }

    /// Publishes rows as one request; each row becomes one message.
    pub fn publish(&self, topic: &str, rows: &[String]) -> io::Result<Vec<u64>> {
        let body = rows.join("\n");
        let r = self
            .http
            .post(&format!("{}/topics/{topic}", self.base))
            .send_string(&body)
            .map_err(Self::err)?;
        Ok(r.into_json::<PublishReply>()?.offsets)
    }

    /// Sink lines from `from` without following.
    pub fn notifications(&self, from: u64) -> io::Result<Vec<String>> {
        let r = self
            .http
            .get(&format!("{}/notifications?from={from}&follow=0", self.base))
            .call()
            .map_err(Self::err)?;
        Ok(r.into_string()?.lines().map(str::to_string).collect())
    }
}
