//! Sharded sequential record storage.
//!
//! A dataset directory holds `shard_NNNNN.tgdp` container files and an
//! `index.tsv` listing `path<TAB>count` per shard (paths relative to the
//! directory). Readers stream shards sequentially through a bounded shuffle
//! buffer; workers own disjoint shard subsets.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::binmap::{BinMap, RecordEvent, RecordReader, RecordWriter, FORMAT_VERSION};
use crate::data::sample::AVSample;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, StreamRng};

pub const INDEX_FILE: &str = "index.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct ShardIndex {
    /// Directory the shard paths are relative to.
    pub root: PathBuf,
    pub shards: Vec<(PathBuf, usize)>,
    pub version: u16,
}

impl ShardIndex {
    pub fn total(&self) -> usize {
        self.shards.iter().map(|(_, n)| n).sum()
    }

    pub fn shard_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.shards[i].0)
    }

    /// Load `index.tsv` from a dataset directory (or the index file itself).
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(INDEX_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut shards = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (p, n) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("{}:{}: expected path<TAB>count", file.display(), i + 1))
            })?;
            let n = n.parse::<usize>().map_err(|_| {
                Error::Format(format!("{}:{}: bad count `{n}`", file.display(), i + 1))
            })?;
            shards.push((PathBuf::from(p), n));
        }
        Ok(Self {
            root,
            shards,
            version: FORMAT_VERSION,
        })
    }

    pub fn save(&self) -> Result<()> {
        let file = self.root.join(INDEX_FILE);
        let mut text = String::new();
        for (p, n) in &self.shards {
            text.push_str(&format!("{}\t{}\n", p.display(), n));
        }
        std::fs::write(&file, text).map_err(|e| Error::io(&file, e))
    }
}

fn shard_name(i: usize) -> String {
    format!("shard_{i:05}.tgdp")
}

/// Write binary maps into shards of at most `per_shard` records and save the index.
pub fn write_map_shards<I>(maps: I, out_dir: &Path, per_shard: usize) -> Result<ShardIndex>
where
    I: IntoIterator<Item = Result<BinMap>>,
{
    if per_shard == 0 {
        return Err(Error::InvalidArgument("samples_per_shard must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut index = ShardIndex {
        root: out_dir.to_path_buf(),
        shards: Vec::new(),
        version: FORMAT_VERSION,
    };
    let mut writer: Option<(PathBuf, RecordWriter<BufWriter<File>>)> = None;
    let close = |w: Option<(PathBuf, RecordWriter<BufWriter<File>>)>,
                 index: &mut ShardIndex|
     -> Result<()> {
        if let Some((path, w)) = w {
            let n = w.records();
            w.finish().map_err(|e| Error::io(&path, e))?;
            index.shards.push((PathBuf::from(path.file_name().unwrap()), n));
        }
        Ok(())
    };
    for map in maps {
        let map = map?;
        if writer.as_ref().is_some_and(|(_, w)| w.records() >= per_shard) {
            close(writer.take(), &mut index)?;
        }
        if writer.is_none() {
            let path = out_dir.join(shard_name(index.shards.len()));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let w = RecordWriter::new(BufWriter::new(file)).map_err(|e| Error::io(&path, e))?;
            writer = Some((path, w));
        }
        let (path, w) = writer.as_mut().unwrap();
        w.write_map(&map).map_err(|e| Error::io(path.as_path(), e))?;
    }
    close(writer.take(), &mut index)?;
    index.save()?;
    Ok(index)
}

pub fn write_shards<I>(samples: I, out_dir: &Path, per_shard: usize) -> Result<ShardIndex>
where
    I: IntoIterator<Item = AVSample>,
{
    write_map_shards(samples.into_iter().map(|s| Ok(s.to_map())), out_dir, per_shard)
}

#[derive(Debug, Clone, Copy)]
pub struct ReaderOptions {
    pub shuffle_buffer: usize,
    pub seed: u64,
    pub worker_id: usize,
    pub num_workers: usize,
}

impl Default for ReaderOptions {
    fn default() -> Self {
        Self {
            shuffle_buffer: 1,
            seed: 0,
            worker_id: 0,
            num_workers: 1,
        }
    }
}

/// Shards owned by `worker_id` out of `num_workers` (round-robin).
pub fn worker_shards(num_shards: usize, worker_id: usize, num_workers: usize) -> Vec<usize> {
    (0..num_shards)
        .filter(|i| i % num_workers.max(1) == worker_id)
        .collect()
}

/// A record that failed its checksum and was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptRecord {
    pub shard: PathBuf,
    pub index: usize,
}

/// Streams binary maps from a worker's shards through a bounded shuffle buffer.
pub struct ShardReader {
    index: ShardIndex,
    pending: VecDeque<usize>,
    current: Option<(PathBuf, RecordReader<BufReader<File>>)>,
    buffer: Vec<BinMap>,
    capacity: usize,
    rng: StreamRng,
    corrupt: Vec<CorruptRecord>,
    exhausted: bool,
}

pub fn open_reader(index: &ShardIndex, opts: ReaderOptions) -> Result<ShardReader> {
    if opts.num_workers == 0 || opts.worker_id >= opts.num_workers {
        return Err(Error::InvalidArgument(format!(
            "worker {} of {} is out of range",
            opts.worker_id, opts.num_workers
        )));
    }
    Ok(ShardReader {
        pending: worker_shards(index.shards.len(), opts.worker_id, opts.num_workers).into(),
        index: index.clone(),
        current: None,
        buffer: Vec::new(),
        capacity: opts.shuffle_buffer.max(1),
        rng: rng::stream(
            opts.seed,
            Purpose::ReaderShuffle,
            &[opts.worker_id as u64, opts.num_workers as u64],
        ),
        corrupt: Vec::new(),
        exhausted: false,
    })
}

impl ShardReader {
    /// Checksum failures seen so far.
    pub fn corrupt_records(&self) -> &[CorruptRecord] {
        &self.corrupt
    }

    /// Adapt the stream to decoded samples.
    pub fn samples(self) -> impl Iterator<Item = Result<AVSample>> {
        self.map(|m| m.and_then(|m| AVSample::from_map(&m)))
    }

    fn next_raw(&mut self) -> Result<Option<BinMap>> {
        loop {
            if self.current.is_none() {
                let Some(i) = self.pending.pop_front() else {
                    return Ok(None);
                };
                let path = self.index.shard_path(i);
                let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
                let reader = RecordReader::new(BufReader::new(file))
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                self.current = Some((path, reader));
            }
            let (path, reader) = self.current.as_mut().unwrap();
            match reader.next() {
                None => self.current = None,
                Some(Err(e)) => return Err(Error::Data(format!("{}: {e}", path.display()))),
                Some(Ok(RecordEvent::ChecksumMismatch { index })) => {
                    self.corrupt.push(CorruptRecord {
                        shard: path.clone(),
                        index,
                    });
                }
                Some(Ok(RecordEvent::Payload(p))) => return BinMap::decode(&p).map(Some),
            }
        }
    }
}

impl Iterator for ShardReader {
    type Item = Result<BinMap>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.exhausted && self.buffer.len() < self.capacity {
            match self.next_raw() {
                Ok(Some(m)) => self.buffer.push(m),
                Ok(None) => self.exhausted = true,
                Err(e) => {
                    self.exhausted = true;
                    return Some(Err(e));
                }
            }
        }
        if self.buffer.is_empty() {
            return None;
        }
        let j = if self.buffer.len() == 1 {
            0
        } else {
            self.rng.random_range(0..self.buffer.len())
        };
        Some(Ok(self.buffer.swap_remove(j)))
    }
}

/// Read every sample of a dataset in write order.
pub fn read_all(index: &ShardIndex) -> Result<Vec<AVSample>> {
    open_reader(index, ReaderOptions::default())?.samples().collect()
}
