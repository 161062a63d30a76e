//! Binary containers for epoch sets and model checkpoints.
//!
//! Both formats are little-endian throughout.
//!
//! Epoch set (`ADS3`, version 1):
//!
//! ```text
//! magic "ADS3" | u16 version | u32 n_trials | u16 n_channels | u32 n_samples | f32 fs
//! u8 label × n_trials
//! [u8; 8] space-padded ASCII name × n_channels
//! f32 sample × (n_trials · n_channels · n_samples), layout [trial][channel][sample]
//! ```
//!
//! Checkpoint (`ADSW`, version 1):
//!
//! ```text
//! magic "ADSW" | u16 version | u32 n_entries
//! per entry: u16 name_len | name bytes | u8 ndim | u32 dim × ndim | f32 value × prod(dims)
//! u32 n_meta | per pair: u16 key_len | key | u16 value_len | value
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const EPOCH_MAGIC: &[u8; 4] = b"ADS3";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADSW";
pub const FORMAT_VERSION: u16 = 1;
pub const N_CLASS: usize = 4;
pub const NAME_WIDTH: usize = 8;

const EPOCH_HEADER_LEN: usize = 4 + 2 + 4 + 2 + 4 + 4;

/// Labeled fixed-length multichannel epochs, samples in microvolts.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    pub n_trials: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub fs: f32,
    pub labels: Vec<u8>,
    pub channel_names: Vec<String>,
    /// `[trial][channel][sample]`
    pub data: Vec<f32>,
}

impl EpochSet {
    pub fn new(
        fs: f32,
        channel_names: Vec<String>,
        n_samples: usize,
        labels: Vec<u8>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let set = Self {
            n_trials: labels.len(),
            n_channels: channel_names.len(),
            n_samples,
            fs,
            labels,
            channel_names,
            data,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.n_trials {
            return Err(Error::Dimension(format!(
                "{} labels for {} trials",
                self.labels.len(),
                self.n_trials
            )));
        }
        if let Some((trial, &label)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= N_CLASS)
        {
            return Err(Error::Label {
                trial,
                label,
                n_class: N_CLASS,
            });
        }
        if self.channel_names.len() != self.n_channels {
            return Err(Error::Dimension(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.n_channels
            )));
        }
        let expected = self.n_trials * self.n_channels * self.n_samples;
        if self.data.len() != expected {
            return Err(Error::Dimension(format!(
                "data holds {} samples, expected {}",
                self.data.len(),
                expected
            )));
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling rate must be positive, got {}",
                self.fs
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.channel_names {
            if name.is_empty() || name.len() > NAME_WIDTH || !name.is_ascii() {
                return Err(Error::ChannelName(format!(
                    "{name:?} must be 1..={NAME_WIDTH} ASCII characters"
                )));
            }
            if name.contains(' ') {
                return Err(Error::ChannelName(format!("{name:?} contains a space")));
            }
            if !seen.insert(name.to_ascii_lowercase()) {
                return Err(Error::DuplicateChannel(name.clone()));
            }
        }
        Ok(())
    }

    pub fn trial_len(&self) -> usize {
        self.n_channels * self.n_samples
    }

    /// `[channel][sample]` block for one trial.
    pub fn trial(&self, trial: usize) -> &[f32] {
        let n = self.trial_len();
        &self.data[trial * n..(trial + 1) * n]
    }

    pub fn channel(&self, trial: usize, channel: usize) -> &[f32] {
        let start = (trial * self.n_channels + channel) * self.n_samples;
        &self.data[start..start + self.n_samples]
    }

    /// Case-insensitive channel lookup.
    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
    }

    /// Trial indices carrying `class`, in file order.
    pub fn class_trials(&self, class: u8) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let n_trials = u32::try_from(self.n_trials)
            .map_err(|_| Error::Dimension("n_trials exceeds u32".into()))?;
        let n_channels = u16::try_from(self.n_channels)
            .map_err(|_| Error::Dimension("n_channels exceeds u16".into()))?;
        let n_samples = u32::try_from(self.n_samples)
            .map_err(|_| Error::Dimension("n_samples exceeds u32".into()))?;

        let mut out = Vec::with_capacity(
            EPOCH_HEADER_LEN + self.n_trials + NAME_WIDTH * self.n_channels + 4 * self.data.len(),
        );
        out.extend_from_slice(EPOCH_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&n_trials.to_le_bytes());
        out.extend_from_slice(&n_channels.to_le_bytes());
        out.extend_from_slice(&n_samples.to_le_bytes());
        out.extend_from_slice(&self.fs.to_le_bytes());
        out.extend_from_slice(&self.labels);
        for name in &self.channel_names {
            let mut padded = [b' '; NAME_WIDTH];
            padded[..name.len()].copy_from_slice(name.as_bytes());
            out.extend_from_slice(&padded);
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "epoch set");
        r.magic(EPOCH_MAGIC)?;
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n_trials = r.u32()? as usize;
        let n_channels = r.u16()? as usize;
        let n_samples = r.u32()? as usize;
        let fs = r.f32()?;
        let labels = r.take(n_trials, "labels")?.to_vec();
        let mut channel_names = Vec::with_capacity(n_channels);
        for i in 0..n_channels {
            let raw = r.take(NAME_WIDTH, "channel names")?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::ChannelName(format!("channel {i} is not ASCII")))?
                .trim_end_matches(' ')
                .to_string();
            channel_names.push(name);
        }
        let n_values = n_trials
            .checked_mul(n_channels)
            .and_then(|v| v.checked_mul(n_samples))
            .ok_or_else(|| Error::Dimension("sample count overflows".into()))?;
        let data = r.f32_vec(n_values, "sample data")?;
        if r.remaining() != 0 {
            return Err(Error::Dimension(format!(
                "{} trailing bytes after sample data",
                r.remaining()
            )));
        }
        let set = Self {
            n_trials,
            n_channels,
            n_samples,
            fs,
            labels,
            channel_names,
            data,
        };
        set.validate()?;
        Ok(set)
    }
}

pub fn write_epochset(set: &EpochSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &set.encode()?)
}

pub fn read_epochset(path: impl AsRef<Path>) -> Result<EpochSet> {
    EpochSet::decode(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// Named tensors plus flat string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelCheckpoint {
    pub format_version: u16,
    pub entries: Vec<CheckpointEntry>,
    pub metadata: BTreeMap<String, String>,
}

impl ModelCheckpoint {
    pub fn new() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            ..Default::default()
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) {
        self.entries.push(CheckpointEntry {
            name: name.into(),
            dims,
            values,
        });
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(self.format_version));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Dimension(format!("duplicate entry {:?}", e.name)));
            }
            let n: usize = e.dims.iter().product();
            if n != e.values.len() {
                return Err(Error::Dimension(format!(
                    "entry {:?}: dims {:?} hold {} values, found {}",
                    e.name,
                    e.dims,
                    n,
                    e.values.len()
                )));
            }
            if e.dims.len() > u8::MAX as usize {
                return Err(Error::Dimension(format!("entry {:?}: too many dims", e.name)));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name)?;
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Dimension(format!("entry {:?}: dim exceeds u32", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let format_version = r.u16()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(format_version));
        }
        let n_entries = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n_entries.min(1 << 16));
        for _ in 0..n_entries {
            let name = r.string()?;
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Dimension(format!("entry {name:?}: size overflows")))?;
            let values = r.f32_vec(n, "entry values")?;
            entries.push(CheckpointEntry { name, dims, values });
        }
        let n_meta = r.u32()? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        if r.remaining() != 0 {
            return Err(Error::Dimension(format!(
                "{} trailing bytes after metadata",
                r.remaining()
            )));
        }
        let ckpt = Self {
            format_version,
            entries,
            metadata,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

pub fn write_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.encode()?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    ModelCheckpoint::decode(&fs::read(path)?)
}

/// Write through a temporary file in the destination directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Dimension(format!("string of {} bytes exceeds u16", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(format!(
                "{}: {field} needs {n} bytes at offset {}, {} left",
                self.what,
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, "u16")?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "u32")?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, "f32")?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Dimension(format!("{field}: length overflows")))?;
        let raw = self.take(len, field)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len, "string")?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Dimension("string is not valid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EpochSet {
        EpochSet::new(250.0, vec!["Fz".into(), "Oz".into()], 4, vec![0], vec![0.0; 8]).unwrap()
    }

    #[test]
    fn zero_epochset_layout() {
        let bytes = tiny().encode().unwrap();
        assert_eq!(bytes.len(), EPOCH_HEADER_LEN + 1 + 2 * NAME_WIDTH + 32);
        assert_eq!(&bytes[..4], b"ADS3");
        assert_eq!(&bytes[21..29], b"Fz      ");
        assert_eq!(EpochSet::decode(&bytes).unwrap(), tiny());
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = tiny().encode().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = EpochSet::decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = tiny().encode().unwrap();
        let err = EpochSet::decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");
    }

    #[test]
    fn label_out_of_range() {
        let mut bytes = tiny().encode().unwrap();
        bytes[EPOCH_HEADER_LEN] = 4;
        assert!(matches!(
            EpochSet::decode(&bytes).unwrap_err(),
            Error::Label { label: 4, .. }
        ));
    }

    #[test]
    fn data_length_mismatch() {
        let err = EpochSet::new(250.0, vec!["A".into()], 4, vec![0], vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn duplicate_channel_names_rejected() {
        let err =
            EpochSet::new(250.0, vec!["O1".into(), "o1".into()], 1, vec![], vec![]).unwrap_err();
        assert!(matches!(err, Error::DuplicateChannel(_)));
    }

    #[test]
    fn checkpoint_entry_mismatch() {
        let mut ck = ModelCheckpoint::new();
        ck.push("w", vec![2, 3], vec![0.0; 5]);
        assert!(matches!(ck.encode().unwrap_err(), Error::Dimension(_)));
    }

    #[test]
    fn checkpoint_unknown_version() {
        let mut bytes = ModelCheckpoint::new().encode().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            ModelCheckpoint::decode(&bytes).unwrap_err(),
            Error::UnsupportedVersion(9)
        ));
    }

    #[test]
    fn empty_checkpoint_round_trip() {
        let ck = ModelCheckpoint::new();
        assert_eq!(ModelCheckpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
    }
}
