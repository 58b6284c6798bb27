//! `POTF` feature archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header:  "POTF" | version u16 = 1 | flags u16 = 0 | record_count u64
//! record:  key_len u32 | key (UTF-8) | frame_count u32 |
//!          6 × (dim u32 | dim × f64)
//! ```
//!
//! Blocks follow the canonical slot order hof/sum, hof/gradient, hof/max,
//! hog/sum, hog/gradient, hog/max. Records are sorted by key and a shard set
//! partitions the sorted key space into contiguous ranges, so every pair
//! drawn from shards `i < j` is already in canonical `(a, b)` order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pooling::{PoTFeature, Slot};

pub const MAGIC: &[u8; 4] = b"POTF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveRecord {
    pub key: String,
    pub frame_count: u32,
    pub feature: PoTFeature,
}

impl ArchiveRecord {
    /// Encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        4 + self.key.len()
            + 4
            + self
                .feature
                .slots()
                .iter()
                .map(|v| 4 + 8 * v.len())
                .sum::<usize>()
    }
}

/// A written archive file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveShard {
    pub path: PathBuf,
    pub record_count: usize,
    pub shard_index: usize,
}

impl ArchiveShard {
    pub fn load(&self) -> Result<LoadedShard> {
        Ok(LoadedShard {
            shard_index: self.shard_index,
            records: read_archive(&self.path)?,
        })
    }
}

/// Shard contents held in memory for pair enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedShard {
    pub shard_index: usize,
    pub records: Vec<ArchiveRecord>,
}

/// File name of shard `index`: `features-00007.potf`.
pub fn shard_file_name(index: usize) -> String {
    format!("features-{index:05}.potf")
}

/// Parses a shard index back out of a shard file name.
pub fn parse_shard_file_name(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("features-")?.strip_suffix(".potf")?;
    if digits.len() != 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn check_sorted(records: &[ArchiveRecord]) -> Result<()> {
    for w in records.windows(2) {
        if w[0].key >= w[1].key {
            return Err(Error::UnsortedKeys(w[1].key.clone()));
        }
    }
    Ok(())
}

/// Serializes records (unique keys, ascending) into an in-memory archive.
pub fn encode_archive(records: &[ArchiveRecord]) -> Result<Vec<u8>> {
    check_sorted(records)?;
    let body: usize = records.iter().map(ArchiveRecord::encoded_len).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for rec in records {
        if rec.key.is_empty() {
            return Err(Error::InvalidParameter(
                "archive keys must be non-empty".into(),
            ));
        }
        let key_len = u32::try_from(rec.key.len())
            .map_err(|_| Error::InvalidParameter("archive key too long".into()))?;
        out.extend_from_slice(&key_len.to_le_bytes());
        out.extend_from_slice(rec.key.as_bytes());
        out.extend_from_slice(&rec.frame_count.to_le_bytes());
        for block in rec.feature.slots() {
            out.extend_from_slice(&(block.len() as u32).to_le_bytes());
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_archive(
    records: &[ArchiveRecord],
    path: &Path,
    shard_index: usize,
) -> Result<ArchiveShard> {
    let bytes = encode_archive(records)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))?;
    Ok(ArchiveShard {
        path: path.to_path_buf(),
        record_count: records.len(),
        shard_index,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decodes an archive, validating every record.
pub fn decode_archive(bytes: &[u8], path: &Path) -> Result<Vec<ArchiveRecord>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::NotAnArchive {
            path: path.to_path_buf(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let bad = |index: usize, msg: &str| Error::BadRecord {
        path: path.to_path_buf(),
        index,
        msg: msg.to_string(),
    };
    let mut cur = Cursor {
        bytes,
        pos: HEADER_LEN,
    };
    let mut records: Vec<ArchiveRecord> = Vec::with_capacity(count.min(1 << 16));
    let mut dims: Option<[usize; 6]> = None;
    for index in 0..count {
        let truncated = || bad(index, "truncated record");
        let key_len = cur.u32().ok_or_else(truncated)? as usize;
        let key = cur.take(key_len).ok_or_else(truncated)?;
        let key = std::str::from_utf8(key)
            .map_err(|_| bad(index, "key is not UTF-8"))?
            .to_string();
        if key.is_empty() {
            return Err(bad(index, "empty key"));
        }
        let frame_count = cur.u32().ok_or_else(truncated)?;
        let mut slots: [Vec<f64>; 6] = Default::default();
        for slot in &mut slots {
            let dim = cur.u32().ok_or_else(truncated)? as usize;
            let raw = cur
                .take(dim.checked_mul(8).ok_or_else(truncated)?)
                .ok_or_else(truncated)?;
            *slot = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
        }
        let these = slots.each_ref().map(Vec::len);
        match dims {
            None => dims = Some(these),
            Some(d) if d != these => {
                return Err(bad(index, "feature dimensions differ from earlier records"))
            }
            Some(_) => {}
        }
        let feature = PoTFeature::from_slots(slots).map_err(|e| bad(index, &e.to_string()))?;
        if let Some(prev) = records.last() {
            if prev.key >= key {
                return Err(bad(index, "keys not unique and ascending"));
            }
        }
        records.push(ArchiveRecord {
            key,
            frame_count,
            feature,
        });
    }
    if cur.pos != bytes.len() {
        return Err(bad(count, "trailing bytes after last record"));
    }
    Ok(records)
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes, path)
}

/// Sizes of `shard_count` contiguous shards over `n` records, larger first,
/// omitting empty shards.
pub fn shard_sizes(n: usize, shard_count: usize) -> Vec<usize> {
    let s = shard_count.max(1).min(n.max(1));
    if n == 0 {
        return Vec::new();
    }
    (0..s).map(|k| n / s + usize::from(k < n % s)).collect()
}

/// Writes sorted records into range-partitioned shard files under `dir`.
pub fn shard_records(
    records: &[ArchiveRecord],
    shard_count: usize,
    dir: &Path,
) -> Result<Vec<ArchiveShard>> {
    if shard_count == 0 {
        return Err(Error::InvalidParameter(
            "shard count must be at least 1".into(),
        ));
    }
    check_sorted(records)?;
    let mut out = Vec::new();
    let mut start = 0;
    for (index, size) in shard_sizes(records.len(), shard_count)
        .into_iter()
        .enumerate()
    {
        let path = dir.join(shard_file_name(index));
        out.push(write_archive(&records[start..start + size], &path, index)?);
        start += size;
    }
    Ok(out)
}

/// Finds the shard set `features-00000.potf ..` in `dir`, requiring dense
/// indices starting at zero.
pub fn discover_shards(dir: &Path) -> Result<Vec<ArchiveShard>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(index) = entry.file_name().to_str().and_then(parse_shard_file_name) {
            found.push((index, entry.path()));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::MissingInput(format!(
            "no feature shards (features-*.potf) in {}",
            dir.display()
        )));
    }
    for (expected, (index, _)) in found.iter().enumerate() {
        if *index != expected {
            return Err(Error::MissingInput(format!(
                "shard {} missing from {}",
                shard_file_name(expected),
                dir.display()
            )));
        }
    }
    found
        .into_iter()
        .map(|(shard_index, path)| {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
                return Err(Error::NotAnArchive { path });
            }
            let record_count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
            Ok(ArchiveShard {
                path,
                record_count,
                shard_index,
            })
        })
        .collect()
}

/// Pairs contributed by the shard-pair task `(a, b)`.
///
/// Distinct shards yield the full cross product; a shard paired with itself
/// yields only pairs with `key_a < key_b`. Outer loop over `a`, inner over
/// `b`.
pub fn cartesian_pairs<'a>(
    a: &'a LoadedShard,
    b: &'a LoadedShard,
) -> impl Iterator<Item = (&'a ArchiveRecord, &'a ArchiveRecord)> + 'a {
    assert!(
        a.shard_index <= b.shard_index,
        "shard pair ({}, {}) out of order",
        a.shard_index,
        b.shard_index
    );
    let same = a.shard_index == b.shard_index;
    a.records.iter().enumerate().flat_map(move |(i, ra)| {
        let inner = if same {
            &b.records[i + 1..]
        } else {
            &b.records[..]
        };
        inner.iter().map(move |rb| (ra, rb))
    })
}

/// Number of pairs [`cartesian_pairs`] yields for shards of the given sizes.
pub fn cartesian_pair_count(len_a: usize, len_b: usize, same: bool) -> u64 {
    if same {
        crate::similarity::pair_count(len_a as u64)
    } else {
        len_a as u64 * len_b as u64
    }
}

/// Per-slot block sizes, for checking archives against a configuration.
pub fn slot_dims(interval_count: usize) -> [usize; 6] {
    Slot::ALL.map(|s| s.dim(interval_count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::generate_pairs;
    use proptest::prelude::*;

    fn record(key: &str, k: usize, seed: f64) -> ArchiveRecord {
        let slots = Slot::ALL.map(|s| (0..s.dim(k)).map(|i| seed + i as f64 * 0.25).collect());
        ArchiveRecord {
            key: key.into(),
            frame_count: 30,
            feature: PoTFeature::from_slots(slots).unwrap(),
        }
    }

    #[test]
    fn empty_archive_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.potf");
        let shard = write_archive(&[], &path, 0).unwrap();
        assert_eq!(shard.record_count, 0);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(
            bytes,
            b"POTF\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00"
        );
        assert!(read_archive(&path).unwrap().is_empty());
    }

    #[test]
    fn single_record_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.potf");
        write_archive(&[record("v1", 7, 1.0)], &path, 0).unwrap();
        let expected = 16 + 4 + 2 + 4 + 6 * 4 + 8 * (1400 + 2800 + 1400) * 2;
        assert_eq!(expected, 89_650);
        assert_eq!(fs::metadata(&path).unwrap().len(), expected as u64);
    }

    #[test]
    fn two_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.potf");
        let recs = vec![record("a", 1, 0.5), record("b", 1, 2.0)];
        write_archive(&recs, &path, 3).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn write_rejects_bad_order() {
        let recs = [record("b", 1, 0.0), record("a", 1, 0.0)];
        assert!(matches!(encode_archive(&recs), Err(Error::UnsortedKeys(_))));
        let dup = [record("a", 1, 0.0), record("a", 1, 1.0)];
        assert!(encode_archive(&dup).is_err());
    }

    #[test]
    fn read_errors() {
        let p = Path::new("x.potf");
        let good = encode_archive(&[record("a", 1, 0.0), record("b", 1, 1.0)]).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = decode_archive(&bad_magic, p).unwrap_err();
        assert!(err.to_string().contains("not a feature archive"));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_archive(&bad_version, p),
            Err(Error::UnsupportedVersion { version: 2, .. })
        ));

        let truncated = &good[..good.len() - 5];
        assert!(matches!(
            decode_archive(truncated, p),
            Err(Error::BadRecord { index: 1, .. })
        ));

        let mixed = {
            let mut v = encode_archive(&[record("a", 1, 0.0)]).unwrap();
            let second = encode_archive(&[record("b", 2, 0.0)]).unwrap();
            v[8] = 2;
            v.extend_from_slice(&second[HEADER_LEN..]);
            v
        };
        let err = decode_archive(&mixed, p).unwrap_err();
        assert!(matches!(err, Error::BadRecord { index: 1, .. }), "{err}");
    }

    #[test]
    fn shard_partitioning() {
        assert_eq!(shard_sizes(10, 3), vec![4, 3, 3]);
        assert_eq!(shard_sizes(1, 1), vec![1]);
        assert_eq!(shard_sizes(2, 5), vec![1, 1]);
        assert!(shard_sizes(0, 3).is_empty());

        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..10)
            .map(|i| record(&format!("v{i:02}"), 1, i as f64))
            .collect();
        let shards = shard_records(&recs, 3, dir.path()).unwrap();
        assert_eq!(
            shards.iter().map(|s| s.record_count).collect::<Vec<_>>(),
            vec![4, 3, 3]
        );
        assert!(shards[2].path.ends_with("features-00002.potf"));
        assert_eq!(discover_shards(dir.path()).unwrap(), shards);

        fs::remove_file(&shards[1].path).unwrap();
        assert!(matches!(
            discover_shards(dir.path()),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn shard_names() {
        assert_eq!(shard_file_name(7), "features-00007.potf");
        assert_eq!(parse_shard_file_name("features-00007.potf"), Some(7));
        assert_eq!(parse_shard_file_name("features-7.potf"), None);
        assert_eq!(parse_shard_file_name("features-00007.potf.tmp"), None);
    }

    fn loaded(index: usize, keys: &[&str]) -> LoadedShard {
        LoadedShard {
            shard_index: index,
            records: keys.iter().map(|k| record(k, 1, 0.0)).collect(),
        }
    }

    fn keys_of<'a>(
        it: impl Iterator<Item = (&'a ArchiveRecord, &'a ArchiveRecord)>,
    ) -> Vec<(String, String)> {
        it.map(|(a, b)| (a.key.clone(), b.key.clone())).collect()
    }

    #[test]
    fn cartesian_enumeration() {
        let s = loaded(0, &["v1", "v2", "v3"]);
        assert_eq!(
            keys_of(cartesian_pairs(&s, &s)),
            [("v1", "v2"), ("v1", "v3"), ("v2", "v3")].map(|(a, b)| (a.into(), b.into()))
        );
        let a = loaded(0, &["v1", "v2"]);
        let b = loaded(1, &["v3"]);
        assert_eq!(
            keys_of(cartesian_pairs(&a, &b)),
            [("v1", "v3"), ("v2", "v3")].map(|(a, b)| (a.into(), b.into()))
        );
        let one = loaded(0, &["v"]);
        assert_eq!(cartesian_pairs(&one, &one).count(), 0);
    }

    #[test]
    fn shard_pair_tasks_cover_every_pair_once() {
        for n in 0..=20usize {
            let keys: Vec<String> = (0..n).map(|i| format!("k{i:02}")).collect();
            let brute: Vec<(String, String)> = generate_pairs(&keys)
                .unwrap()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect();
            for s in 1..=5 {
                let mut shards = Vec::new();
                let mut start = 0;
                for (idx, size) in shard_sizes(n, s).into_iter().enumerate() {
                    let ks: Vec<&str> = keys[start..start + size]
                        .iter()
                        .map(String::as_str)
                        .collect();
                    shards.push(loaded(idx, &ks));
                    start += size;
                }
                let mut got = Vec::new();
                for i in 0..shards.len() {
                    for j in i..shards.len() {
                        let pairs = keys_of(cartesian_pairs(&shards[i], &shards[j]));
                        assert_eq!(
                            pairs.len() as u64,
                            cartesian_pair_count(
                                shards[i].records.len(),
                                shards[j].records.len(),
                                i == j
                            )
                        );
                        assert!(pairs.iter().all(|(a, b)| a < b));
                        got.extend(pairs);
                    }
                }
                got.sort();
                assert_eq!(got, brute, "n={n} shards={s}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn round_trip_preserves_bit_patterns(
            bits in proptest::collection::vec(0u64..0x7ff0_0000_0000_0000, 200 * 4),
            frames in any::<u32>(),
        ) {
            // Any finite nonnegative double, subnormals included.
            let values: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let slots = [
                values[..200].to_vec(),
                values[200..600].to_vec(),
                values[600..800].to_vec(),
                values[..200].to_vec(),
                values[200..600].to_vec(),
                values[600..800].to_vec(),
            ];
            let rec = ArchiveRecord {
                key: "clip".into(),
                frame_count: frames,
                feature: PoTFeature::from_slots(slots).unwrap(),
            };
            let back = decode_archive(&encode_archive(std::slice::from_ref(&rec)).unwrap(), Path::new("p")).unwrap();
            for (x, y) in back[0].feature.slots().iter().flatten().zip(rec.feature.slots().iter().flatten()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(back[0].frame_count, frames);
        }
    }
}
