//! Durability: an append-only log of `<crc32 hex> <json>` lines and a
//! binary snapshot file.
//!
//! Snapshot layout (little-endian): `b"MBS1"`, `u32` format version,
//! `u64` frame count, then frames of `u32 len | u32 crc32 | len bytes` where
//! each payload is one JSON-encoded [`Op`] that recreates part of the state.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Op, StoreError, StoreState};

pub const SNAPSHOT_FILE: &str = "snapshot.mbs";
pub const WAL_FILE: &str = "wal.log";
const MAGIC: &[u8; 4] = b"MBS1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub snapshot_ops: usize,
    pub wal_ops: usize,
    /// Byte length of the log prefix that replayed cleanly.
    pub wal_valid_len: u64,
    pub warnings: Vec<String>,
}

pub(super) struct Wal {
    file: File,
    fsync: bool,
}

impl Wal {
    pub(super) fn open(path: &Path, valid_len: u64, fsync: bool) -> Result<Self, StoreError> {
        let file = OpenOptions::new().create(true).read(true).write(true).open(path)?;
        // Drop any torn tail so new entries start on a clean line.
        file.set_len(valid_len)?;
        let mut w = Wal { file, fsync };
        w.seek_end()?;
        Ok(w)
    }

    fn seek_end(&mut self) -> std::io::Result<()> {
        use std::io::Seek;
        self.file.seek(std::io::SeekFrom::End(0)).map(|_| ())
    }

    pub(super) fn append(&mut self, op: &Op) -> Result<(), StoreError> {
        self.file.write_all(encode_line(op).as_bytes())?;
        if self.fsync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    pub(super) fn reset(&mut self) -> Result<(), StoreError> {
        self.file.set_len(0)?;
        self.seek_end()?;
        if self.fsync {
            self.file.sync_all()?;
        }
        Ok(())
    }
}

pub(super) fn encode_line(op: &Op) -> String {
    let json = serde_json::to_string(op).expect("ops serialize");
    format!("{:08x} {json}\n", crc32fast::hash(json.as_bytes()))
}

fn corrupt(file: &str, offset: u64, message: impl Into<String>) -> StoreError {
    StoreError::Corrupt {
        file: file.to_string(),
        offset,
        message: message.into(),
    }
}

fn decode_line(line: &str) -> Result<Op, String> {
    let (crc, json) = line.split_once(' ').ok_or("missing checksum separator")?;
    let want = u32::from_str_radix(crc, 16).map_err(|_| format!("bad checksum field {crc:?}"))?;
    if crc.len() != 8 || crc32fast::hash(json.as_bytes()) != want {
        return Err("checksum mismatch".into());
    }
    serde_json::from_str(json).map_err(|e| e.to_string())
}

/// Replays a log. A damaged final entry (missing newline or bad checksum)
/// is treated as a torn write and dropped with a warning; damage before
/// the final entry is an error naming its offset.
pub(super) fn replay_wal(bytes: &[u8], apply: &mut dyn FnMut(Op), report: &mut RecoveryReport) -> Result<(), StoreError> {
    let mut offset = 0usize;
    while offset < bytes.len() {
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            report.warnings.push(format!(
                "{WAL_FILE}: truncated entry at byte offset {offset} ({} bytes) ignored",
                rest.len()
            ));
            break;
        };
        let is_last = offset + nl + 1 == bytes.len();
        let parsed = std::str::from_utf8(&rest[..nl])
            .map_err(|e| e.to_string())
            .and_then(decode_line);
        match parsed {
            Ok(op) => {
                apply(op);
                report.wal_ops += 1;
                offset += nl + 1;
            }
            Err(msg) if is_last => {
                report
                    .warnings
                    .push(format!("{WAL_FILE}: damaged final entry at byte offset {offset} ignored: {msg}"));
                break;
            }
            Err(msg) => return Err(corrupt(WAL_FILE, offset as u64, msg)),
        }
    }
    report.wal_valid_len = offset as u64;
    Ok(())
}

pub(super) fn recover(dir: &Path, apply: &mut dyn FnMut(Op)) -> Result<RecoveryReport, StoreError> {
    let mut report = RecoveryReport::default();
    let snap = dir.join(SNAPSHOT_FILE);
    if snap.exists() {
        report.snapshot_ops = read_snapshot(&snap, apply)?;
    }
    let wal = dir.join(WAL_FILE);
    if wal.exists() {
        let bytes = std::fs::read(&wal)?;
        replay_wal(&bytes, apply, &mut report)?;
    }
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    Ok(report)
}

/// The ops that rebuild `state` from empty.
pub(super) fn state_ops(state: &StoreState) -> Vec<Op> {
    let mut ops = Vec::new();
    if let Some(schema) = &state.schema {
        ops.push(Op::InstallSchema { schema: schema.clone() });
    }
    ops.extend(state.records.values().map(|r| Op::UpsertRecord { record: r.clone() }));
    ops.extend(state.events.values().map(|e| Op::PutEvent { event: e.clone() }));
    ops.extend(state.entities.values().map(|e| Op::PutEntity { entity: e.clone() }));
    ops.extend(state.keywords.values().map(|n| Op::KeywordLink {
        keyword: n.keyword.clone(),
        record_ids: n.linked_records.iter().cloned().collect(),
    }));
    ops.extend(state.timelines.values().map(|t| Op::PutTimeline { timeline: t.clone() }));
    ops.extend(state.queue.values().map(|t| Op::Enqueue { task: t.clone() }));
    ops.extend(state.extractions.iter().map(|id| Op::MarkExtraction { id: id.clone() }));
    ops.extend(state.sessions.iter().map(|(session, n)| Op::SessionProgress {
        session: session.clone(),
        messages: *n,
    }));
    ops.extend(state.reinforced.iter().map(|(id, at)| Op::Reinforce {
        record_id: id.clone(),
        at: *at,
    }));
    ops
}

pub(super) fn write_snapshot(path: &Path, state: &StoreState) -> Result<(), StoreError> {
    let ops = state_ops(state);
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(ops.len() as u64).to_le_bytes())?;
        for op in &ops {
            let payload = serde_json::to_vec(op).expect("ops serialize");
            w.write_all(&(payload.len() as u32).to_le_bytes())?;
            w.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
            w.write_all(&payload)?;
        }
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(super) fn read_snapshot(path: &Path, apply: &mut dyn FnMut(Op)) -> Result<usize, StoreError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_snapshot(&bytes, apply)
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize) -> Result<&'a [u8], StoreError> {
    bytes
        .get(at..at + n)
        .ok_or_else(|| corrupt(SNAPSHOT_FILE, at as u64, format!("unexpected end of file reading {n} bytes")))
}

pub(super) fn decode_snapshot(bytes: &[u8], apply: &mut dyn FnMut(Op)) -> Result<usize, StoreError> {
    if take(bytes, 0, 4)? != MAGIC {
        return Err(corrupt(SNAPSHOT_FILE, 0, "bad magic; expected MBS1"));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(SNAPSHOT_FILE, 4, format!("unsupported format version {version}")));
    }
    let count = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().expect("8 bytes"));
    let mut at = 16usize;
    for _ in 0..count {
        let frame = at;
        let len = u32::from_le_bytes(take(bytes, at, 4)?.try_into().expect("4 bytes")) as usize;
        let crc = u32::from_le_bytes(take(bytes, at + 4, 4)?.try_into().expect("4 bytes"));
        let payload = take(bytes, at + 8, len)?;
        if crc32fast::hash(payload) != crc {
            return Err(corrupt(SNAPSHOT_FILE, frame as u64, "frame checksum mismatch"));
        }
        let op: Op = serde_json::from_slice(payload)
            .map_err(|e| corrupt(SNAPSHOT_FILE, frame as u64, e.to_string()))?;
        apply(op);
        at += 8 + len;
    }
    if at != bytes.len() {
        return Err(corrupt(SNAPSHOT_FILE, at as u64, "trailing bytes after last frame"));
    }
    Ok(count as usize)
}
