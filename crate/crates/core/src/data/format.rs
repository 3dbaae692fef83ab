//! Binary feature files, manifests and vocabulary text files.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::data::sequence::{Dataset, FeatureSequence, ModalitySpec};
use crate::data::vocab::{build_vocabulary, ActionVocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"AFFT";
pub const FEATURE_VERSION: u32 = 1;

/// Writes a dataset and returns the byte offset of every sample record.
pub fn write_feature_file(path: &Path, dataset: &Dataset) -> Result<Vec<u64>> {
    let mut w = CountingWriter {
        inner: BufWriter::new(File::create(path)?),
        pos: 0,
    };
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(dataset.modalities.len() as u32).to_le_bytes())?;
    for m in &dataset.modalities {
        let name = m.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("modality name too long: {}", m.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(m.dim as u32).to_le_bytes())?;
    }
    w.write_all(&(dataset.samples.len() as u64).to_le_bytes())?;
    let mut offsets = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        offsets.push(w.pos);
        write_sample(&mut w, s)?;
    }
    w.inner.flush()?;
    Ok(offsets)
}

fn write_sample<W: Write>(w: &mut W, s: &FeatureSequence) -> Result<()> {
    let id = s.sample_id.as_bytes();
    w.write_all(&(id.len() as u32).to_le_bytes())?;
    w.write_all(id)?;
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(&s.next_label.to_le_bytes())?;
    match &s.frame_labels {
        Some(labels) => {
            w.write_all(&[1])?;
            for l in labels {
                w.write_all(&l.to_le_bytes())?;
            }
        }
        None => w.write_all(&[0])?,
    }
    for v in [s.tau_s, s.tau_a, s.tau_o] {
        w.write_all(&v.to_le_bytes())?;
    }
    for f in &s.features {
        let mut buf = Vec::with_capacity(f.numel() * 4);
        for v in f.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct CountingWriter<W> {
    inner: W,
    pos: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.pos += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b, what)?;
        Ok(b)
    }

    fn fill(&mut self, buf: &mut [u8], what: &'static str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Truncated { context: what },
            _ => Error::Io(e),
        })
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn string(&mut self, len: usize, what: &'static str) -> Result<String> {
        let mut buf = vec![0u8; len];
        self.fill(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))
    }

    fn header(&mut self) -> Result<(Vec<ModalitySpec>, u64)> {
        let magic = self.bytes::<4>("magic")?;
        if magic != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                expected: FEATURE_MAGIC,
                found: magic,
            });
        }
        let version = self.u32("version")?;
        if version != FEATURE_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FEATURE_VERSION,
            });
        }
        let m = self.u32("modality count")?;
        let mut modalities = Vec::with_capacity(m.min(1024) as usize);
        for _ in 0..m {
            let len = self.u16("modality name length")? as usize;
            let name = self.string(len, "modality name")?;
            let dim = self.u32("modality dim")? as usize;
            modalities.push(ModalitySpec::new(name, dim));
        }
        let count = self.u64("sample count")?;
        Ok((modalities, count))
    }

    fn sample(&mut self, modalities: &[ModalitySpec]) -> Result<FeatureSequence> {
        let id_len = self.u32("sample id length")? as usize;
        let sample_id = self.string(id_len, "sample id")?;
        let t = self.u32("sequence length")? as usize;
        let next_label = self.u32("next label")?;
        let frame_labels = match self.u8("label flag")? {
            0 => None,
            1 => {
                let mut l = Vec::with_capacity(t.min(1 << 16));
                for _ in 0..t {
                    l.push(self.u32("frame labels")?);
                }
                Some(l)
            }
            other => return Err(Error::Malformed(format!("label flag {other} in sample {sample_id}"))),
        };
        let tau_s = self.f64("tau_s")?;
        let tau_a = self.f64("tau_a")?;
        let tau_o = self.f64("tau_o")?;
        let mut features = Vec::with_capacity(modalities.len());
        for m in modalities {
            let n = t * m.dim;
            let mut raw = vec![0u8; n * 4];
            self.fill(&mut raw, "feature payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            features.push(Tensor::new(vec![t, m.dim], data)?);
        }
        Ok(FeatureSequence {
            sample_id,
            features,
            frame_labels,
            next_label,
            tau_s,
            tau_a,
            tau_o,
        })
    }
}

pub fn read_feature_file(path: &Path) -> Result<Dataset> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let (modalities, count) = r.header()?;
    let mut samples = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        samples.push(r.sample(&modalities)?);
    }
    Dataset::new(modalities, samples)
}

/// Reads the single sample stored at `offset`.
pub fn read_sample_at(path: &Path, offset: u64) -> Result<(Vec<ModalitySpec>, FeatureSequence)> {
    let mut file = BufReader::new(File::open(path)?);
    let (modalities, _) = Reader { inner: &mut file }.header()?;
    file.seek(SeekFrom::Start(offset))?;
    let sample = Reader { inner: &mut file }.sample(&modalities)?;
    sample.validate(&modalities, None)?;
    Ok((modalities, sample))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub offset: u64,
}

/// One tab-separated `id, path, offset` record per line.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        if e.id.contains(['\t', '\n']) {
            return Err(Error::Invalid(format!("sample id {:?} contains a tab or newline", e.id)));
        }
        writeln!(w, "{}\t{}\t{}", e.id, e.path.display(), e.offset)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split('\t');
        let (Some(id), Some(p), Some(off), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(Error::Malformed(format!("manifest line {}: expected 3 fields", n + 1)));
        };
        let offset = off
            .trim()
            .parse()
            .map_err(|_| Error::Malformed(format!("manifest line {}: bad offset {off:?}", n + 1)))?;
        out.push(ManifestEntry {
            id: id.to_string(),
            path: PathBuf::from(p),
            offset,
        });
    }
    Ok(out)
}

pub fn write_vocabulary_file(path: &Path, vocab: &ActionVocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (v, n) in vocab.pairs() {
        writeln!(w, "{v},{n}")?;
    }
    w.flush()?;
    Ok(())
}

/// Line number (0-based) is the action id.
pub fn read_vocabulary_file(path: &Path) -> Result<ActionVocabulary> {
    let r = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(v, n)| Some((v.trim().parse::<i64>().ok()?, n.trim().parse::<i64>().ok()?)));
        match parsed {
            Some(p) => pairs.push(p),
            None => return Err(Error::Malformed(format!("vocabulary line {}: {line:?}", n + 1))),
        }
    }
    let vocab = build_vocabulary(&pairs)?;
    if vocab.len() != pairs.len() {
        return Err(Error::Malformed("vocabulary file has duplicate pairs".into()));
    }
    Ok(vocab)
}
