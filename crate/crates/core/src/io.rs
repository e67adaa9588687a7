//! Ingestion and egress. Sources speak a length-prefixed frame protocol
//! (1-byte type, 4-byte little-endian length, payload; encrypted frames
//! carry a 12-byte nonce up front and a 16-byte tag at the end). Ingested
//! payloads move into the data plane without a copy on the trusted-direct
//! path; the via-OS path pays one extra full copy, which is counted.
//! Results leave encrypted and signed with the edge-cloud key.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use thiserror::Error;

use crate::dataplane::{Gate, GateError, OpaqueRef};
use crate::model::{EventLayout, Schema};

/// Static pre-shared keys; key exchange is out of scope.
pub const SOURCE_KEY: [u8; 16] = *b"source-edge-key!";
pub const EGRESS_KEY: [u8; 16] = *b"cloud-uplink-key";

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    Events,
    Watermark,
    End,
}

impl FrameType {
    fn code(self) -> u8 {
        match self {
            FrameType::Events => 0,
            FrameType::Watermark => 1,
            FrameType::End => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => FrameType::Events,
            1 => FrameType::Watermark,
            2 => FrameType::End,
            _ => return None,
        })
    }
}

/// A frame as it travels: payload is ciphertext when `encrypted`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub ftype: FrameType,
    pub payload: Vec<u8>,
    pub encrypted: bool,
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("AUTH_FAIL: frame authentication failed")]
    AuthFail,
    #[error("CORRUPT: {0}")]
    Corrupt(&'static str),
    #[error("gate: {0}")]
    Gate(#[from] GateError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn cipher(key: &[u8; 16]) -> Aes128Gcm {
    Aes128Gcm::new_from_slice(key).unwrap()
}

/// Encrypts plaintext into nonce || ciphertext || tag.
pub fn seal_payload(key: &[u8; 16], nonce_ctr: u64, plaintext: &[u8]) -> Vec<u8> {
    let mut nonce = [0u8; NONCE_LEN];
    nonce[..8].copy_from_slice(&nonce_ctr.to_le_bytes());
    let ct = cipher(key)
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: &[],
            },
        )
        .expect("aes-gcm encrypt");
    let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out
}

/// Inverse of [`seal_payload`].
pub fn open_payload(key: &[u8; 16], sealed: &[u8]) -> Result<Vec<u8>, IoError> {
    if sealed.len() < NONCE_LEN + TAG_LEN {
        return Err(IoError::Corrupt("sealed payload too short"));
    }
    let (nonce, ct) = sealed.split_at(NONCE_LEN);
    cipher(key)
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad: &[] })
        .map_err(|_| IoError::AuthFail)
}

impl Frame {
    pub fn events(payload: Vec<u8>) -> Frame {
        Frame {
            ftype: FrameType::Events,
            payload,
            encrypted: false,
        }
    }

    pub fn watermark(value: i64) -> Frame {
        Frame {
            ftype: FrameType::Watermark,
            payload: value.to_le_bytes().to_vec(),
            encrypted: false,
        }
    }

    pub fn end() -> Frame {
        Frame {
            ftype: FrameType::End,
            payload: Vec::new(),
            encrypted: false,
        }
    }

    /// Encrypts a cleartext frame with the source-edge key.
    pub fn into_encrypted(self, nonce_ctr: u64) -> Frame {
        assert!(!self.encrypted);
        Frame {
            ftype: self.ftype,
            payload: seal_payload(&SOURCE_KEY, nonce_ctr, &self.payload),
            encrypted: true,
        }
    }

    pub fn wire_size(&self) -> usize {
        5 + self.payload.len()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&[self.ftype.code()])?;
        w.write_all(&(self.payload.len() as u32).to_le_bytes())?;
        w.write_all(&self.payload)
    }

    /// Reads one frame; `encrypted` tells the reader how to interpret the
    /// payload (the run mode is configuration, not wire data).
    pub fn read_from<R: Read>(r: &mut R, encrypted: bool) -> Result<Option<Frame>, IoError> {
        let mut head = [0u8; 5];
        match r.read_exact(&mut head[..1]) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(IoError::Io(e)),
        }
        r.read_exact(&mut head[1..])?;
        let ftype = FrameType::from_code(head[0]).ok_or(IoError::Corrupt("bad frame type"))?;
        let len = u32::from_le_bytes(head[1..5].try_into().unwrap()) as usize;
        if len > 1 << 30 {
            return Err(IoError::Corrupt("oversized frame"));
        }
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        Ok(Some(Frame {
            ftype,
            payload,
            encrypted,
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestPath {
    TrustedDirect,
    ViaOs,
}

/// Outcome of ingesting one frame.
#[derive(Debug)]
pub enum Ingested {
    /// One sealed streaming array per `batch_size` events.
    Batches(Vec<(OpaqueRef, u64)>),
    Watermark {
        token: OpaqueRef,
        id: u64,
        value: i64,
    },
    End,
}

/// Trusted-IO endpoint in front of the gate.
pub struct IoGateway {
    path: IngestPath,
    decrypt_ingress: bool,
    encrypt_egress: bool,
    bytes_copied: AtomicU64,
    egress_nonce: AtomicU64,
}

impl IoGateway {
    pub fn new(path: IngestPath, decrypt_ingress: bool, encrypt_egress: bool) -> Self {
        IoGateway {
            path,
            decrypt_ingress,
            encrypt_egress,
            bytes_copied: AtomicU64::new(0),
            egress_nonce: AtomicU64::new(1),
        }
    }

    /// Extra bytes copied across the boundary by the via-OS path.
    pub fn bytes_copied(&self) -> u64 {
        self.bytes_copied.load(Ordering::Relaxed)
    }

    pub fn ingest_frame(
        &self,
        gate: &Gate,
        frame: Frame,
        layout: EventLayout,
        source: u8,
        batch_size: usize,
    ) -> Result<Ingested, IoError> {
        let mut payload = frame.payload;
        if self.path == IngestPath::ViaOs {
            // The untrusted OS receives the bytes and copies them across the
            // boundary into the data plane.
            payload = payload.clone();
            self.bytes_copied
                .fetch_add(payload.len() as u64, Ordering::Relaxed);
        }
        if frame.encrypted && self.decrypt_ingress {
            payload = open_payload(&SOURCE_KEY, &payload)?;
        } else if frame.encrypted {
            return Err(IoError::Corrupt("encrypted frame on a cleartext path"));
        }

        match frame.ftype {
            FrameType::Events => {
                let item = layout.item_size();
                if payload.len() % item != 0 {
                    return Err(IoError::Corrupt("events payload is not whole records"));
                }
                let mut out = Vec::new();
                if payload.is_empty() {
                    // An empty frame still yields one sealed, empty batch.
                    out.push(gate.ingest_events(&payload, layout, source)?);
                    return Ok(Ingested::Batches(out));
                }
                for chunk in payload.chunks(batch_size * item) {
                    out.push(gate.ingest_events(chunk, layout, source)?);
                }
                Ok(Ingested::Batches(out))
            }
            FrameType::Watermark => {
                if payload.len() != 8 {
                    return Err(IoError::Corrupt("watermark payload must be 8 bytes"));
                }
                let value = i64::from_le_bytes(payload.try_into().unwrap());
                let (token, id) = gate.ingest_watermark(value, source)?;
                Ok(Ingested::Watermark { token, id, value })
            }
            FrameType::End => Ok(Ingested::End),
        }
    }

    /// Externalizes one result: reads it out of the data plane, encrypts and
    /// tags it with the edge-cloud key, and leaves the egress audit record.
    pub fn egress_emit(&self, gate: &Gate, token: OpaqueRef) -> Result<EgressResult, IoError> {
        let (plain, schema, window, id) = gate.egress_take(token)?;
        let plain_len = plain.len();
        let (payload, encrypted) = if self.encrypt_egress {
            let n = self.egress_nonce.fetch_add(1, Ordering::Relaxed);
            (seal_payload(&EGRESS_KEY, n, &plain), true)
        } else {
            (plain, false)
        };
        Ok(EgressResult {
            frame: Frame {
                ftype: FrameType::Events,
                payload,
                encrypted,
            },
            schema,
            window,
            array_id: id,
            plain_len,
        })
    }
}

/// An externalized result frame plus its bookkeeping.
#[derive(Debug)]
pub struct EgressResult {
    pub frame: Frame,
    pub schema: Schema,
    pub window: Option<u64>,
    pub array_id: u64,
    pub plain_len: usize,
}

impl EgressResult {
    /// Cloud-consumer side: recover the plaintext payload.
    pub fn open(&self) -> Result<Vec<u8>, IoError> {
        if self.frame.encrypted {
            open_payload(&EGRESS_KEY, &self.frame.payload)
        } else {
            Ok(self.frame.payload.clone())
        }
    }
}
