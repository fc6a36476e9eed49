use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::episode::{sample_episode, Episode, EpisodeConfig};
use super::house::{generate_house, GenConfig, HouseGraph, Split};
use super::world::Vocab;
use super::{EnvError, Result};

/// Version tag carried by every dataset record.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_houses: usize,
    pub val_unseen_houses: usize,
    pub train_episodes_per_house: usize,
    /// Fresh episodes drawn from the training houses.
    pub val_seen_episodes_per_house: usize,
    pub val_unseen_episodes_per_house: usize,
    pub house: GenConfig,
    pub episode: EpisodeConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_houses: 200,
            val_unseen_houses: 50,
            train_episodes_per_house: 10,
            val_seen_episodes_per_house: 1,
            val_unseen_episodes_per_house: 4,
            house: GenConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

/// SplitMix64 finalizer over `(seed, stream, index)`; gives every house and
/// episode an independent seed.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN_HOUSE: u64 = 1;
const STREAM_UNSEEN_HOUSE: u64 = 2;
const STREAM_TRAIN_EPISODE: u64 = 3;
const STREAM_SEEN_EPISODE: u64 = 4;
const STREAM_UNSEEN_EPISODE: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    seed: u64,
    config: DataConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: DataConfig,
    /// Train and val-unseen houses keyed by id; val-seen episodes reuse
    /// train houses.
    pub houses: BTreeMap<String, HouseGraph>,
    pub episodes: BTreeMap<Split, Vec<Episode>>,
}

impl Dataset {
    pub fn house(&self, id: &str) -> Result<&HouseGraph> {
        self.houses
            .get(id)
            .ok_or_else(|| EnvError::Corrupt(format!("episode refers to unknown house {id}")))
    }

    pub fn episodes(&self, split: Split) -> &[Episode] {
        self.episodes.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.config.house.num_room_types, self.config.house.num_object_classes)
    }

    fn houses_of(&self, split: Split) -> Vec<&HouseGraph> {
        self.houses.values().filter(|h| h.split == split).collect()
    }

    /// Write `meta.json`, `houses.{split}.jsonl` and `episodes.{split}.jsonl`;
    /// returns the paths written, in a fixed order.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let meta = dir.join("meta.json");
        let body = serde_json::to_string_pretty(&Record {
            schema: SCHEMA_VERSION,
            body: Meta {
                seed: self.seed,
                config: self.config.clone(),
            },
        })?;
        std::fs::write(&meta, body + "\n")?;
        written.push(meta);
        for split in [Split::Train, Split::ValUnseen] {
            let path = dir.join(format!("houses.{}.jsonl", split.name()));
            write_jsonl(&path, self.houses_of(split))?;
            written.push(path);
        }
        for split in [Split::Train, Split::ValSeen, Split::ValUnseen] {
            let path = dir.join(format!("episodes.{}.jsonl", split.name()));
            write_jsonl(&path, self.episodes(split))?;
            written.push(path);
        }
        Ok(written)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path)?;
        let meta: Record<Meta> = serde_json::from_str(&text).map_err(|e| EnvError::Parse {
            path: meta_path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        check_schema(meta.schema, &meta_path, 1)?;
        let mut houses = BTreeMap::new();
        for split in [Split::Train, Split::ValUnseen] {
            let path = dir.join(format!("houses.{}.jsonl", split.name()));
            for mut h in read_jsonl::<HouseGraph>(&path)? {
                h.rebuild_adjacency();
                h.validate(meta.body.config.house.max_degree)?;
                if houses.insert(h.id.clone(), h).is_some() {
                    return Err(EnvError::Corrupt(format!("duplicate house id in {}", path.display())));
                }
            }
        }
        let mut episodes = BTreeMap::new();
        for split in [Split::Train, Split::ValSeen, Split::ValUnseen] {
            let path = dir.join(format!("episodes.{}.jsonl", split.name()));
            let eps: Vec<Episode> = read_jsonl(&path)?;
            for e in &eps {
                let h = houses.get(&e.house_id).ok_or_else(|| {
                    EnvError::Corrupt(format!("episode {} refers to unknown house {}", e.id, e.house_id))
                })?;
                if e.start >= h.len() || e.goal >= h.len() || e.target_object >= h.nodes[e.goal].objects.len() {
                    return Err(EnvError::Corrupt(format!("episode {} indexes out of range", e.id)));
                }
            }
            episodes.insert(split, eps);
        }
        Ok(Self {
            seed: meta.body.seed,
            config: meta.body.config,
            houses,
            episodes,
        })
    }
}

fn sample_many(
    house: &HouseGraph,
    cfg: &DataConfig,
    vocab: &Vocab,
    seed: u64,
    stream: u64,
    house_index: usize,
    count: usize,
    split: Split,
    out: &mut Vec<Episode>,
) {
    for k in 0..count {
        let s = mix_seed(seed, stream, (house_index * 1000 + k) as u64);
        let id = format!("{}-{}-{k}", split.name(), house.id);
        // houses too small for the hop range contribute no episode
        if let Ok(ep) = sample_episode(house, &cfg.episode, vocab, s, &id, split) {
            out.push(ep);
        }
    }
}

/// Generate all splits. Pure function of `(cfg, seed)`.
pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.house.validate()?;
    let vocab = Vocab::new(cfg.house.num_room_types, cfg.house.num_object_classes);
    let mut houses = BTreeMap::new();
    let mut train = Vec::new();
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for i in 0..cfg.train_houses {
        let id = format!("train-{i:04}");
        let h = generate_house(&cfg.house, mix_seed(seed, STREAM_TRAIN_HOUSE, i as u64), &id, Split::Train)?;
        sample_many(&h, cfg, &vocab, seed, STREAM_TRAIN_EPISODE, i, cfg.train_episodes_per_house, Split::Train, &mut train);
        sample_many(&h, cfg, &vocab, seed, STREAM_SEEN_EPISODE, i, cfg.val_seen_episodes_per_house, Split::ValSeen, &mut seen);
        houses.insert(id, h);
    }
    for i in 0..cfg.val_unseen_houses {
        let id = format!("unseen-{i:04}");
        let h = generate_house(&cfg.house, mix_seed(seed, STREAM_UNSEEN_HOUSE, i as u64), &id, Split::ValUnseen)?;
        sample_many(&h, cfg, &vocab, seed, STREAM_UNSEEN_EPISODE, i, cfg.val_unseen_episodes_per_house, Split::ValUnseen, &mut unseen);
        houses.insert(id, h);
    }
    let episodes = BTreeMap::from([
        (Split::Train, train),
        (Split::ValSeen, seen),
        (Split::ValUnseen, unseen),
    ]);
    Ok(Dataset {
        seed,
        config: cfg.clone(),
        houses,
        episodes,
    })
}

#[derive(Serialize, Deserialize)]
struct Record<T> {
    schema: u32,
    #[serde(flatten)]
    body: T,
}

fn check_schema(found: u32, path: &Path, line: usize) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(EnvError::Parse {
            path: path.display().to_string(),
            line,
            message: format!("schema {found} unsupported (expected {SCHEMA_VERSION})"),
        });
    }
    Ok(())
}

/// One JSON object per line, each tagged with `"schema"`.
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for body in items {
        serde_json::to_writer(&mut w, &Record { schema: SCHEMA_VERSION, body })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record<T> = serde_json::from_str(&line).map_err(|e| EnvError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        check_schema(rec.schema, path, i + 1)?;
        out.push(rec.body);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            train_houses: 4,
            val_unseen_houses: 2,
            train_episodes_per_house: 3,
            val_seen_episodes_per_house: 1,
            val_unseen_episodes_per_house: 2,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_pure() {
        assert_eq!(generate_dataset(&small(), 5).unwrap(), generate_dataset(&small(), 5).unwrap());
        assert_ne!(generate_dataset(&small(), 5).unwrap(), generate_dataset(&small(), 6).unwrap());
    }

    #[test]
    fn splits_use_disjoint_houses() {
        let d = generate_dataset(&small(), 1).unwrap();
        for e in d.episodes(Split::ValUnseen) {
            assert_eq!(d.house(&e.house_id).unwrap().split, Split::ValUnseen);
        }
        for e in d.episodes(Split::ValSeen) {
            assert_eq!(d.house(&e.house_id).unwrap().split, Split::Train);
        }
    }

    #[test]
    fn round_trip_through_files() {
        let d = generate_dataset(&small(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = d.write_dir(dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        assert_eq!(Dataset::read_dir(dir.path()).unwrap(), d);
    }

    #[test]
    fn wrong_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "{\"schema\":9,\"a\":1}\n").unwrap();
        #[derive(Deserialize)]
        struct A {
            #[allow(dead_code)]
            a: u32,
        }
        assert!(matches!(read_jsonl::<A>(&p), Err(EnvError::Parse { line: 1, .. })));
    }
}
