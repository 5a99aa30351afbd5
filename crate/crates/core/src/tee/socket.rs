//! Local-socket transport for the TEE.
//!
//! Frame: u32 LE length of what follows, a one-byte opcode, the payload.
//! Opcodes: 0x01 re-encrypt, 0x02 loss head, 0x03 attest, 0xFF error reply.
//! Ciphertext lists are a u32 LE count followed by wire-encoded ciphertexts.
//! A connection must attest before anything else; the attested party is
//! bound to the connection.

use std::io::{Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::{LossHeadOutput, TeeService};
use crate::backward::Reencrypt;
use crate::error::{Error, Result};
use crate::lhe::{Ciphertext, PublicKey};
use crate::packing::{FeatureMap, PackedTensor, TensorLayout};

pub const OP_REENCRYPT: u8 = 0x01;
pub const OP_LOSS_HEAD: u8 = 0x02;
pub const OP_ATTEST: u8 = 0x03;
pub const OP_ERROR: u8 = 0xFF;

const MAX_FRAME: usize = 1 << 30;
const NO_LEVEL: u32 = u32::MAX;

fn write_frame(w: &mut impl Write, op: u8, payload: &[u8]) -> Result<()> {
    let len = u32::try_from(payload.len() + 1).map_err(|_| Error::Format("frame too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&[op])?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// None on a clean end of stream.
fn read_frame(r: &mut impl Read) -> Result<Option<(u8, Vec<u8>)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(Error::Format(format!("frame length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let op = buf[0];
    buf.remove(0);
    Ok(Some((op, buf)))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.pos + k > self.buf.len() {
            return Err(Error::Format(format!("payload truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn cts(&mut self, pk: &PublicKey, count: usize) -> Result<Vec<Ciphertext>> {
        let one = 16 + 8 * pk.params().slot_count();
        (0..count).map(|_| Ok(pk.decode(self.take(one)?)?)).collect()
    }

    fn ct_list(&mut self, pk: &PublicKey) -> Result<Vec<Ciphertext>> {
        let count = self.u32()? as usize;
        self.cts(pk, count)
    }

    fn done(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

fn put_cts(out: &mut Vec<u8>, cts: &[Ciphertext]) {
    out.extend_from_slice(&(cts.len() as u32).to_le_bytes());
    for c in cts {
        c.write_to(out);
    }
}

fn layout_code(layout: &TensorLayout, slots: usize) -> Result<(u8, u32, u32)> {
    match layout {
        TensorLayout::Type1 { map, n } if *map == FeatureMap::contiguous(map.features(), slots / n) => {
            Ok((1, map.features() as u32, *n as u32))
        }
        TensorLayout::Type2 { features, n } => Ok((2, *features as u32, *n as u32)),
        other => Err(Error::Layout { expected: "fc output".into(), actual: other.tag().into() }),
    }
}

fn handle_request(tee: &TeeService, party: &mut Option<String>, op: u8, payload: &[u8]) -> Result<Vec<u8>> {
    let pk = tee.public_key();
    if op == OP_ATTEST {
        let name = std::str::from_utf8(payload).map_err(|_| Error::Format("party name is not UTF-8".into()))?;
        let key = tee.attest_and_provision(name);
        *party = Some(name.to_string());
        return Ok(key.to_bytes());
    }
    let who = party.as_deref().ok_or_else(|| Error::Tee("connection has not attested".into()))?;
    let mut cur = Cursor::new(payload);
    match op {
        OP_REENCRYPT => {
            let cts = cur.ct_list(&pk)?;
            cur.done()?;
            let fresh = tee.reencrypt_batch(who, &cts)?;
            let mut out = Vec::new();
            put_cts(&mut out, &fresh);
            Ok(out)
        }
        OP_LOSS_HEAD => {
            let classes = cur.u32()? as usize;
            let n = cur.u32()? as usize;
            let code = cur.u8()?;
            let level = cur.u32()?;
            let cts = cur.ct_list(&pk)?;
            let labels = cur.cts(&pk, 1)?.pop().expect("one label ciphertext");
            cur.done()?;
            if n == 0 || n > pk.params().slot_count() {
                return Err(Error::Format(format!("n = {n}")));
            }
            let layout = match code {
                1 => TensorLayout::Type1 { map: FeatureMap::contiguous(classes, pk.params().slot_count() / n), n },
                2 => TensorLayout::Type2 { features: classes, n },
                c => return Err(Error::Format(format!("layout code {c}"))),
            };
            let logits = PackedTensor::new(layout, cts)?;
            let level = (level != NO_LEVEL).then_some(level);
            let r = tee.loss_head(who, &logits, &labels, classes, level)?;
            let mut out = Vec::new();
            out.extend_from_slice(&r.loss.to_le_bytes());
            out.extend_from_slice(&(r.batch as u32).to_le_bytes());
            put_cts(&mut out, &r.grads.cts);
            Ok(out)
        }
        other => Err(Error::Format(format!("unknown opcode {other:#04x}"))),
    }
}

/// Serves one connection until the peer hangs up. Request errors are
/// reported in an error frame and the connection stays open.
pub fn serve_connection<S: Read + Write>(tee: &TeeService, mut stream: S) -> Result<()> {
    let mut party = None;
    while let Some((op, payload)) = read_frame(&mut stream)? {
        match handle_request(tee, &mut party, op, &payload) {
            Ok(out) => write_frame(&mut stream, op, &out)?,
            Err(e) => write_frame(&mut stream, OP_ERROR, e.to_string().as_bytes())?,
        }
    }
    Ok(())
}

/// Unix-socket listener; one thread per connection, requests serialized by
/// the service.
pub struct SocketServer {
    path: PathBuf,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl SocketServer {
    pub fn bind(tee: Arc<TeeService>, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let listener = UnixListener::bind(&path)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { break };
                let tee = tee.clone();
                std::thread::spawn(move || {
                    let _ = serve_connection(&tee, conn);
                });
            }
        });
        Ok(SocketServer { path, stop, thread: Some(thread) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for SocketServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop so it sees the flag
        let _ = UnixStream::connect(&self.path);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Client side of the socket protocol.
#[derive(Debug)]
pub struct TeeClient {
    stream: Mutex<UnixStream>,
    pk: PublicKey,
}

impl TeeClient {
    pub fn connect(path: impl AsRef<Path>, party: &str) -> Result<Self> {
        let mut stream = UnixStream::connect(path)?;
        write_frame(&mut stream, OP_ATTEST, party.as_bytes())?;
        let payload = Self::expect(&mut stream, OP_ATTEST)?;
        let pk = PublicKey::from_bytes(&payload)?;
        Ok(TeeClient { stream: Mutex::new(stream), pk })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    fn expect(stream: &mut UnixStream, op: u8) -> Result<Vec<u8>> {
        match read_frame(stream)? {
            Some((o, p)) if o == op => Ok(p),
            Some((OP_ERROR, p)) => Err(Error::Tee(String::from_utf8_lossy(&p).into_owned())),
            Some((o, _)) => Err(Error::Format(format!("unexpected reply opcode {o:#04x}"))),
            None => Err(Error::Tee("TEE closed the connection".into())),
        }
    }

    fn call(&self, op: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let mut s = self.stream.lock().unwrap_or_else(|e| e.into_inner());
        write_frame(&mut *s, op, payload)?;
        Self::expect(&mut s, op)
    }

    pub fn loss_head(&self, logits: &PackedTensor, labels: &Ciphertext, classes: usize, level: Option<u32>) -> Result<LossHeadOutput> {
        let (code, features, n) = layout_code(&logits.layout, self.pk.params().slot_count())?;
        if features as usize != classes {
            return Err(Error::Shape(format!("{features} outputs for {classes} classes")));
        }
        let mut p = Vec::new();
        p.extend_from_slice(&(classes as u32).to_le_bytes());
        p.extend_from_slice(&n.to_le_bytes());
        p.push(code);
        p.extend_from_slice(&level.unwrap_or(NO_LEVEL).to_le_bytes());
        put_cts(&mut p, &logits.cts);
        labels.write_to(&mut p);
        let reply = self.call(OP_LOSS_HEAD, &p)?;
        let mut cur = Cursor::new(&reply);
        let loss = cur.f64()?;
        let batch = cur.u32()? as usize;
        let cts = cur.ct_list(&self.pk)?;
        cur.done()?;
        Ok(LossHeadOutput { loss, batch, grads: PackedTensor::new(logits.layout.clone(), cts)? })
    }
}

impl Reencrypt for TeeClient {
    fn reencrypt_batch(&self, cts: &[Ciphertext]) -> Result<Vec<Ciphertext>> {
        let mut p = Vec::new();
        put_cts(&mut p, cts);
        let reply = self.call(OP_REENCRYPT, &p)?;
        let mut cur = Cursor::new(&reply);
        let out = cur.ct_list(&self.pk)?;
        cur.done()?;
        if out.len() != cts.len() {
            return Err(Error::Tee(format!("sent {} ciphertexts, got {} back", cts.len(), out.len())));
        }
        Ok(out)
    }
}
