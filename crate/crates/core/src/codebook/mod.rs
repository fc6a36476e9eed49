//! Room-type codebook and destination imagination.
//!
//! A codebook holds `S` representative feature vectors per room type, picked
//! by k-means from synthetic samples (room prototype + a mixture of the
//! room's typical objects + noise). Imagination draws five vectors for an
//! instruction's goal room and target object, conditioned on nothing else.

mod kmeans;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{mix_seed, parse_instruction, EnvError, Episode, InstructionTarget, Prototypes, Vocab};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamSet, Tensor, TensorError};

pub use kmeans::{kmeans, sq_dist, KMeans};

/// Vectors per imagination set.
pub const IMAGINATION_SIZE: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum CodebookError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cluster {cluster} is empty and no cluster can donate a point")]
    EmptyCluster { cluster: usize },
    #[error("codebook file: {0}")]
    Format(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CodebookError>;

/// Which room-type memory the layout head uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodebookKind {
    /// `S` k-means representatives of prototype+object samples per room.
    Visual,
    /// A single bare prototype per room.
    Textual,
    /// No codebook; a linear head predicts room types.
    Classifier,
}

impl CodebookKind {
    pub fn name(self) -> &'static str {
        match self {
            CodebookKind::Visual => "visual",
            CodebookKind::Textual => "textual",
            CodebookKind::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "visual" => Some(Self::Visual),
            "textual" => Some(Self::Textual),
            "classifier" => Some(Self::Classifier),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookConfig {
    pub samples: usize,
    pub entries_per_room: usize,
    pub sigma: f64,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            entries_per_room: 4,
            sigma: 0.3,
            seed: 0,
            max_iters: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub samples: usize,
    pub sigma: f64,
}

/// `K` rooms × `S` entries of dimension `d`; row `k*S + s` is entry `s` of
/// room `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub entries: Tensor,
    pub rooms: usize,
    pub per_room: usize,
    pub labels: Vec<String>,
    pub provenance: Provenance,
}

fn label_of(name: &str) -> String {
    name.replace(' ', "_")
}

impl Codebook {
    pub fn dim(&self) -> usize {
        self.entries.dims2().1
    }

    pub fn entry(&self, room: usize, s: usize) -> &[f64] {
        self.entries.row(room * self.per_room + s)
    }

    /// `K×d` matrix whose row `k` is the sum of room `k`'s entries.
    pub fn room_sums(&self) -> Tensor {
        let d = self.dim();
        let mut out = Tensor::zeros(&[self.rooms, d]);
        for k in 0..self.rooms {
            for s in 0..self.per_room {
                let e = self.entry(k, s).to_vec();
                for (o, x) in out.data_mut()[k * d..(k + 1) * d].iter_mut().zip(e) {
                    *o += x;
                }
            }
        }
        out
    }

    /// Room whose entries contain the nearest vector to `v`.
    pub fn nearest_room(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.rooms {
            for s in 0..self.per_room {
                let d = sq_dist(v, self.entry(k, s));
                if d < best.1 {
                    best = (k, d);
                }
            }
        }
        best.0
    }

    /// One bare prototype per room.
    pub fn textual(protos: &Prototypes, labels: &[&str]) -> Self {
        Self {
            entries: protos.rooms.clone(),
            rooms: protos.rooms.dims2().0,
            per_room: 1,
            labels: labels.iter().map(|l| label_of(l)).collect(),
            provenance: Provenance {
                seed: 0,
                samples: 1,
                sigma: 0.0,
            },
        }
    }

    /// Entries `room.<label>.<idx>` (each `1×d`) plus `meta.provenance`
    /// `[seed, samples, sigma]`, in the checkpoint container.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut params = ParamSet::new();
        for k in 0..self.rooms {
            for s in 0..self.per_room {
                params.insert(
                    format!("room.{}.{s}", self.labels[k]),
                    Tensor::new(vec![1, self.dim()], self.entry(k, s).to_vec())?,
                );
            }
        }
        params.insert(
            "meta.provenance".to_string(),
            Tensor::new(
                vec![1, 3],
                vec![self.provenance.seed as f64, self.provenance.samples as f64, self.provenance.sigma],
            )?,
        );
        write_checkpoint(w, &params)?;
        Ok(())
    }

    /// Rooms are ordered as in `room_names`.
    pub fn read<R: Read>(r: &mut R, room_names: &[&str]) -> Result<Self> {
        let params = read_checkpoint(r)?;
        let mut rows: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        let mut provenance = None;
        for (name, t) in params.iter() {
            if name == "meta.provenance" {
                let d = t.data();
                if d.len() != 3 {
                    return Err(CodebookError::Format("provenance must hold 3 values".into()));
                }
                provenance = Some(Provenance {
                    seed: d[0] as u64,
                    samples: d[1] as usize,
                    sigma: d[2],
                });
                continue;
            }
            let parts: Vec<&str> = name.split('.').collect();
            let [_, label, idx] = parts[..] else {
                return Err(CodebookError::Format(format!("unexpected entry `{name}`")));
            };
            if parts[0] != "room" {
                return Err(CodebookError::Format(format!("unexpected entry `{name}`")));
            }
            let room = room_names
                .iter()
                .position(|n| label_of(n) == label)
                .ok_or_else(|| CodebookError::Format(format!("unknown room label `{label}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| CodebookError::Format(format!("bad entry index in `{name}`")))?;
            rows.insert((room, idx), t.data().to_vec());
        }
        let rooms = room_names.len();
        let per_room = rows.len() / rooms.max(1);
        if per_room == 0 || rows.len() != rooms * per_room {
            return Err(CodebookError::Format(format!(
                "{} entries do not fill {rooms} rooms evenly",
                rows.len()
            )));
        }
        let mut data = Vec::new();
        for k in 0..rooms {
            for s in 0..per_room {
                let row = rows
                    .get(&(k, s))
                    .ok_or_else(|| CodebookError::Format(format!("missing entry for room {k} index {s}")))?;
                data.extend_from_slice(row);
            }
        }
        let dim = data.len() / (rooms * per_room);
        Ok(Self {
            entries: Tensor::new(vec![rooms * per_room, dim], data)?,
            rooms,
            per_room,
            labels: room_names.iter().map(|n| label_of(n)).collect(),
            provenance: provenance.ok_or_else(|| CodebookError::Format("missing meta.provenance".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, room_names: &[&str]) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f, room_names)
    }
}

/// Synthetic samples for one room: prototype + a non-empty random subset of
/// the typical objects + `N(0, sigma²)`.
pub fn room_samples(
    protos: &Prototypes,
    room: usize,
    typical: &[usize],
    count: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let noise = Normal::new(0.0, sigma).map_err(|e| CodebookError::Config(format!("sigma: {e}")))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = protos.room(room).to_vec();
        if !typical.is_empty() {
            let mut picked: Vec<usize> = typical.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
            if picked.is_empty() {
                picked.push(typical[rng.gen_range(0..typical.len())]);
            }
            for o in picked {
                for (a, x) in v.iter_mut().zip(protos.object(o)) {
                    *a += x;
                }
            }
        }
        for a in v.iter_mut() {
            *a += noise.sample(rng);
        }
        out.push(v);
    }
    Ok(out)
}

/// Select `per_room` representatives from each room's samples: cluster with
/// k-means and keep the member nearest each centroid.
pub fn select_representatives(
    samples: &[Vec<Vec<f64>>],
    per_room: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    samples
        .iter()
        .enumerate()
        .map(|(k, pts)| {
            let km = kmeans(pts, per_room, mix_seed(seed, 77, k as u64), max_iters)?;
            Ok(km.representatives(pts).into_iter().map(|i| pts[i].clone()).collect())
        })
        .collect()
}

/// Codebook from externally supplied per-room samples.
pub fn codebook_from_samples(
    samples: &[Vec<Vec<f64>>],
    labels: &[&str],
    cfg: &CodebookConfig,
) -> Result<Codebook> {
    if samples.len() != labels.len() {
        return Err(CodebookError::Config("one sample set per room label required".into()));
    }
    if cfg.entries_per_room == 0 || samples.iter().any(|s| s.len() < cfg.entries_per_room) {
        return Err(CodebookError::Config(format!(
            "need at least {} samples per room",
            cfg.entries_per_room.max(1)
        )));
    }
    let reps = select_representatives(samples, cfg.entries_per_room, cfg.seed, cfg.max_iters)?;
    let rows: Vec<Vec<f64>> = reps.into_iter().flatten().collect();
    Ok(Codebook {
        entries: Tensor::from_rows(&rows)?,
        rooms: labels.len(),
        per_room: cfg.entries_per_room,
        labels: labels.iter().map(|l| label_of(l)).collect(),
        provenance: Provenance {
            seed: cfg.seed,
            samples: samples[0].len(),
            sigma: cfg.sigma,
        },
    })
}

/// Build the visual codebook. Deterministic given `cfg.seed`.
pub fn build_room_codebook(
    protos: &Prototypes,
    typical: &[Vec<usize>],
    labels: &[&str],
    cfg: &CodebookConfig,
) -> Result<Codebook> {
    if cfg.entries_per_room > cfg.samples {
        return Err(CodebookError::Config(format!(
            "{} entries per room exceed {} samples",
            cfg.entries_per_room, cfg.samples
        )));
    }
    let samples = (0..labels.len())
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 31, k as u64));
            room_samples(protos, k, &typical[k], cfg.samples, cfg.sigma, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    codebook_from_samples(&samples, labels, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImaginationSet {
    pub episode_id: String,
    /// `IMAGINATION_SIZE` rows of dimension `d`.
    pub vectors: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Five draws of goal-room prototype + target-object prototype + noise.
/// Only the instruction-derived target is visible here.
pub fn imagine_destination(
    episode_id: &str,
    target: InstructionTarget,
    protos: &Prototypes,
    sigma: f64,
    seed: u64,
) -> Result<ImaginationSet> {
    let noise = Normal::new(0.0, sigma).map_err(|e| CodebookError::Config(format!("sigma: {e}")))?;
    if target.room_type >= protos.rooms.dims2().0 || target.object_class >= protos.objects.dims2().0 {
        return Err(CodebookError::Config("instruction target outside prototype table".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = protos
        .room(target.room_type)
        .iter()
        .zip(protos.object(target.object_class))
        .map(|(r, o)| r + o)
        .collect();
    let vectors = (0..IMAGINATION_SIZE)
        .map(|_| base.iter().map(|b| b + noise.sample(&mut rng)).collect())
        .collect();
    Ok(ImaginationSet {
        episode_id: episode_id.to_string(),
        vectors,
        seed,
    })
}

/// Stable 64-bit FNV-1a hash of an episode id.
pub fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Imagination for an episode, seeded by `(seed, episode id)`.
pub fn imagine_episode(
    episode: &Episode,
    vocab: &Vocab,
    protos: &Prototypes,
    sigma: f64,
    seed: u64,
) -> Result<ImaginationSet> {
    let target = parse_instruction(&episode.instruction, vocab)?;
    imagine_destination(&episode.id, target, protos, sigma, mix_seed(seed, 91, id_hash(&episode.id)))
}
