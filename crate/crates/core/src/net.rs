//! Store-and-forward distribution over an untrusted channel.
//!
//! The server is deliberately dumb: it stores and returns opaque package
//! bytes keyed by `(device_id, name)` and adds no authentication or
//! integrity of its own — it plays the untrusted network, and the sealed
//! package format is what makes tampering visible downstream.
//!
//! Wire protocol, all integers little-endian. Every message is a frame: a
//! 4-byte length prefix followed by that many body bytes, capped at 64 MiB.
//!
//! ```text
//! request  body: "ERQ1" || device_id (8) || name_len (2) || name (UTF-8)
//! response body: "ERS1" || status (1) || payload_len (4) || payload
//! status: 0 ok, 1 not_found, 2 bad_request
//! ```
//!
//! The store is a directory of `<device_id as 16 hex digits>_<name>.eric`
//! files. Names are restricted to `[A-Za-z0-9._-]`, at most 128 bytes, so
//! a request can never escape the store directory.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

/// Frame body cap: 64 MiB.
pub const FRAME_CAP: u32 = 1 << 26;
/// Longest accepted package name.
pub const NAME_CAP: usize = 128;

const REQUEST_TAG: &[u8; 4] = b"ERQ1";
const RESPONSE_TAG: &[u8; 4] = b"ERS1";
const REQUEST_FIXED_LEN: usize = 14;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("package not found")]
    NotFound,
    #[error("server rejected the request as malformed")]
    BadRequest,
    #[error("transport failure: {0}")]
    Transport(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok = 0,
    NotFound = 1,
    BadRequest = 2,
}

/// Read-only directory of sealed packages.
#[derive(Debug, Clone)]
pub struct PackageStore {
    root: PathBuf,
}

impl PackageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Store file name for a `(device_id, name)` key.
    pub fn file_name(device_id: u64, name: &str) -> String {
        format!("{device_id:016x}_{name}.eric")
    }

    pub fn path_for(&self, device_id: u64, name: &str) -> PathBuf {
        self.root.join(Self::file_name(device_id, name))
    }

    /// Whether a requested name is safe to map onto the filesystem.
    pub fn valid_name(name: &str) -> bool {
        !name.is_empty()
            && name.len() <= NAME_CAP
            && name
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
    }

    fn load(&self, device_id: u64, name: &str) -> std::io::Result<Option<Vec<u8>>> {
        match std::fs::read(self.path_for(device_id, name)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}

fn write_frame(stream: &mut TcpStream, body: &[u8]) -> std::io::Result<()> {
    debug_assert!(body.len() as u64 <= FRAME_CAP as u64);
    stream.write_all(&(body.len() as u32).to_le_bytes())?;
    stream.write_all(body)?;
    stream.flush()
}

/// Reads one frame. `Ok(None)` on clean end-of-stream before a length
/// prefix; an oversized length aborts the connection via `Err`.
fn read_frame(stream: &mut TcpStream) -> std::io::Result<Option<Vec<u8>>> {
    let mut len_bytes = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match stream.read(&mut len_bytes[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(len_bytes);
    if len > FRAME_CAP {
        return Err(std::io::Error::new(
            ErrorKind::InvalidData,
            "frame exceeds 64 MiB cap",
        ));
    }
    let mut body = vec![0u8; len as usize];
    stream.read_exact(&mut body)?;
    Ok(Some(body))
}

fn encode_response(status: Status, payload: &[u8]) -> Vec<u8> {
    let mut body = Vec::with_capacity(9 + payload.len());
    body.extend_from_slice(RESPONSE_TAG);
    body.push(status as u8);
    body.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    body.extend_from_slice(payload);
    body
}

/// Parses a request body into its `(device_id, name)` key.
fn parse_request(body: &[u8]) -> Option<(u64, &str)> {
    if body.len() < REQUEST_FIXED_LEN || &body[0..4] != REQUEST_TAG {
        return None;
    }
    let device_id = u64::from_le_bytes(body[4..12].try_into().expect("fixed slice"));
    let name_len = u16::from_le_bytes(body[12..14].try_into().expect("fixed slice")) as usize;
    if body.len() != REQUEST_FIXED_LEN + name_len {
        return None;
    }
    let name = std::str::from_utf8(&body[REQUEST_FIXED_LEN..]).ok()?;
    if !PackageStore::valid_name(name) {
        return None;
    }
    Some((device_id, name))
}

fn handle_connection(mut stream: TcpStream, store: Arc<PackageStore>) {
    while let Ok(Some(body)) = read_frame(&mut stream) {
        let response = match parse_request(&body) {
            None => encode_response(Status::BadRequest, &[]),
            Some((device_id, name)) => match store.load(device_id, name) {
                Ok(Some(bytes)) => encode_response(Status::Ok, &bytes),
                Ok(None) => encode_response(Status::NotFound, &[]),
                // Treat unreadable files as absent rather than tearing
                // down the connection.
                Err(_) => encode_response(Status::NotFound, &[]),
            },
        };
        if write_frame(&mut stream, &response).is_err() {
            break;
        }
    }
}

/// A running package server; dropping the handle leaves it serving until
/// [`shutdown`](Server::shutdown).
pub struct Server {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Stops accepting connections and joins the accept loop. Connections
    /// already being served drain on their own threads.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

/// Binds `address` and serves the store until shut down. Each connection
/// is handled on its own thread, so concurrent clients are independent.
pub fn serve(address: &str, store: PackageStore) -> Result<Server, NetError> {
    let listener = TcpListener::bind(address)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let store = Arc::new(store);

    let stop_flag = Arc::clone(&stop);
    let accept_thread = thread::spawn(move || {
        while !stop_flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let store = Arc::clone(&store);
                    thread::spawn(move || handle_connection(stream, store));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(_) => thread::sleep(Duration::from_millis(5)),
            }
        }
    });

    Ok(Server {
        local_addr,
        stop,
        accept_thread: Some(accept_thread),
    })
}

/// Fetches a package from a server. The returned bytes are exactly what
/// the store holds; nothing is validated here — that is the unsealing
/// side's job.
pub fn fetch(address: &str, device_id: u64, name: &str) -> Result<Vec<u8>, NetError> {
    if !PackageStore::valid_name(name) {
        return Err(NetError::Protocol(format!(
            "`{name}` is not a valid package name"
        )));
    }
    let addr = address
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| NetError::Protocol(format!("address `{address}` resolves to nothing")))?;
    let mut stream = TcpStream::connect(addr)?;

    let mut body = Vec::with_capacity(REQUEST_FIXED_LEN + name.len());
    body.extend_from_slice(REQUEST_TAG);
    body.extend_from_slice(&device_id.to_le_bytes());
    body.extend_from_slice(&(name.len() as u16).to_le_bytes());
    body.extend_from_slice(name.as_bytes());
    write_frame(&mut stream, &body)?;

    let response = read_frame(&mut stream)?
        .ok_or_else(|| NetError::Protocol("server closed before responding".into()))?;
    if response.len() < 9 || &response[0..4] != RESPONSE_TAG {
        return Err(NetError::Protocol("malformed response frame".into()));
    }
    let status = response[4];
    let payload_len = u32::from_le_bytes(response[5..9].try_into().expect("fixed slice")) as usize;
    if response.len() != 9 + payload_len {
        return Err(NetError::Protocol(
            "response payload length disagrees with frame".into(),
        ));
    }
    match status {
        0 => Ok(response[9..].to_vec()),
        1 => Err(NetError::NotFound),
        2 => Err(NetError::BadRequest),
        other => Err(NetError::Protocol(format!("unknown status byte {other}"))),
    }
}
