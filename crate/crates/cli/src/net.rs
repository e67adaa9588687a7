//! TCP transport: frame ingestion over a socket (single source stream) and
//! log-block streaming to a listening verifier.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};

use streamgate_core::engine::FrameSource;
use streamgate_core::io::{Frame, FrameType};

/// Accepts one connection and serves its frames as source 0. One ingestion
/// connection is handled by one thread; multi-source pipelines use the
/// in-process generator.
pub struct TcpFrameSource {
    reader: BufReader<TcpStream>,
    encrypted: bool,
    done: bool,
}

impl TcpFrameSource {
    pub fn accept(listener: &TcpListener, encrypted: bool) -> std::io::Result<TcpFrameSource> {
        let (stream, _) = listener.accept()?;
        Ok(TcpFrameSource {
            reader: BufReader::new(stream),
            encrypted,
            done: false,
        })
    }
}

impl FrameSource for TcpFrameSource {
    fn next_frame(&mut self) -> Option<(u8, Frame)> {
        if self.done {
            return None;
        }
        match Frame::read_from(&mut self.reader, self.encrypted) {
            Ok(Some(frame)) => {
                if frame.ftype == FrameType::End {
                    self.done = true;
                }
                Some((0, frame))
            }
            Ok(None) => {
                self.done = true;
                // Connection closed without an end frame: synthesize one so
                // the run finishes as a partial report.
                Some((0, Frame::end()))
            }
            Err(_) => {
                self.done = true;
                None
            }
        }
    }
}

/// Connects to `addr` and pushes every frame of a single-source generator.
pub fn feed_frames(
    addr: &str,
    source: &mut dyn FrameSource,
) -> std::io::Result<(u64, u64)> {
    let stream = TcpStream::connect(addr)?;
    let mut w = BufWriter::new(stream);
    let mut frames = 0u64;
    let mut bytes = 0u64;
    while let Some((sid, frame)) = source.next_frame() {
        assert_eq!(sid, 0, "tcp feed supports a single source stream");
        frame.write_to(&mut w)?;
        frames += 1;
        bytes += frame.wire_size() as u64;
    }
    w.flush()?;
    Ok((frames, bytes))
}

/// Streams raw `.sbtlog` bytes (block envelopes) to a listening verifier.
pub fn send_log(addr: &str, log: &[u8]) -> std::io::Result<()> {
    let mut stream = TcpStream::connect(addr)?;
    stream.write_all(log)?;
    Ok(())
}

/// Accepts one connection and reads a block stream until EOF.
pub fn recv_log(listener: &TcpListener) -> std::io::Result<Vec<u8>> {
    let (mut stream, _) = listener.accept()?;
    let mut bytes = Vec::new();
    stream.read_to_end(&mut bytes)?;
    Ok(bytes)
}
