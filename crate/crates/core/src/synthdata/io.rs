use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaptionExample, Category, Example, PriorShiftSpec, Question, Scene, SceneObject, Split, SyntheticDataset, WorldSpec};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{CaptionInstance, VqaInstance};
use crate::text::Vocabulary;

pub const FEATURE_MAGIC: &[u8; 4] = b"VQAF";
pub const FEATURE_VERSION: u8 = 1;

/// Writes `[regions, dim]` feature maps as one little-endian f32 block.
pub fn write_features<'a>(path: &Path, features: impl ExactSizeIterator<Item = &'a Tensor>, regions: usize, dim: usize) -> Result<()> {
    let count = features.len();
    let mut out = Vec::with_capacity(17 + 4 * count * regions * dim);
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FEATURE_VERSION);
    for v in [count, regions, dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in features {
        if f.shape() != [regions, dim] {
            return Err(Error::format(path, format!("feature map of shape {:?}", f.shape())));
        }
        for &x in f.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 17 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "missing VQAF magic"));
    }
    if bytes[4] != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (count, regions, dim) = (word(0), word(1), word(2));
    let body = &bytes[17..];
    let per = regions * dim;
    if body.len() != 4 * count * per || per == 0 {
        return Err(Error::format(path, "payload length does not match header"));
    }
    body.chunks_exact(4 * per)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Tensor::matrix(regions, dim, data)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct QaRecord {
    image_id: u64,
    category: Category,
    question: Question,
    tokens: Vec<String>,
    objects: Vec<SceneObject>,
    answer: String,
    answers: Vec<(String, f64)>,
}

#[derive(Serialize, Deserialize)]
struct CaptionRecord {
    image_id: u64,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vocabulary,
    answers: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    world: WorldSpec,
    shift: PriorShiftSpec,
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

const CAPTIONS: &str = "captions";

impl SyntheticDataset {
    /// Writes `world.json`, `vocab.json`, and a `.jsonl` record file plus a
    /// `.vqaf` feature file per split (and for the caption pool when present).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(
            &dir.join("world.json"),
            &WorldFile {
                world: self.world.clone(),
                shift: self.shift.clone(),
            },
        )?;
        write_json(
            &dir.join("vocab.json"),
            &VocabFile {
                words: self.vocab.clone(),
                answers: self.answers.clone(),
            },
        )?;
        let (r, f) = (self.world.num_regions, self.world.feature_dim);
        for split in Split::ALL {
            let examples = self.split(split);
            write_jsonl(
                &dir.join(format!("{}.jsonl", split.name())),
                examples.iter().map(|e| QaRecord {
                    image_id: e.image_id,
                    category: e.category,
                    question: e.question,
                    tokens: self.vocab.decode(&e.instance.question).into_iter().map(String::from).collect(),
                    objects: e.scene.objects.clone(),
                    answer: self.answers[e.answer].clone(),
                    answers: e
                        .instance
                        .answer_scores
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| **s > 0.0)
                        .map(|(i, s)| (self.answers[i].clone(), *s))
                        .collect(),
                }),
            )?;
            write_features(&dir.join(format!("{}.vqaf", split.name())), examples.iter().map(|e| &e.instance.features), r, f)?;
        }
        if !self.captions.is_empty() {
            self.save_captions(dir)?;
        }
        Ok(())
    }

    pub fn save_captions(&self, dir: &Path) -> Result<()> {
        let (r, f) = (self.world.num_regions, self.world.feature_dim);
        write_jsonl(
            &dir.join(format!("{CAPTIONS}.jsonl")),
            self.captions.iter().map(|c| CaptionRecord {
                image_id: c.image_id,
                tokens: self.vocab.decode(&c.instance.caption).into_iter().map(String::from).collect(),
            }),
        )?;
        write_features(&dir.join(format!("{CAPTIONS}.vqaf")), self.captions.iter().map(|c| &c.instance.features), r, f)
    }

    /// Reads a directory written by [`SyntheticDataset::save`]. The caption
    /// pool is loaded when its files exist.
    pub fn load(dir: &Path) -> Result<Self> {
        let WorldFile { world, shift } = read_json(&dir.join("world.json"))?;
        let VocabFile { words: vocab, answers } = read_json(&dir.join("vocab.json"))?;
        let answer_index = |path: &Path, a: &str| {
            answers
                .iter()
                .position(|x| x == a)
                .ok_or_else(|| Error::format(path, format!("answer `{a}` not in vocabulary")))
        };
        let mut splits = Vec::new();
        for split in Split::ALL {
            let path = dir.join(format!("{}.jsonl", split.name()));
            let records: Vec<QaRecord> = read_jsonl(&path)?;
            let features = read_features(&dir.join(format!("{}.vqaf", split.name())))?;
            if features.len() != records.len() {
                return Err(Error::format(&path, "record count differs from feature count"));
            }
            let mut examples = Vec::with_capacity(records.len());
            for (r, features) in records.into_iter().zip(features) {
                let mut scores = vec![0.0; answers.len()];
                for (a, s) in &r.answers {
                    scores[answer_index(&path, a)?] = *s;
                }
                examples.push(Example {
                    image_id: r.image_id,
                    category: r.category,
                    question: r.question,
                    scene: Scene {
                        image_id: r.image_id,
                        objects: r.objects,
                    },
                    answer: answer_index(&path, &r.answer)?,
                    instance: VqaInstance {
                        question: vocab.encode_tokens(&r.tokens)?,
                        features,
                        answer_scores: scores,
                    },
                });
            }
            splits.push(examples);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        let mut ds = SyntheticDataset {
            world,
            shift,
            vocab,
            answers,
            train,
            val,
            test,
            captions: Vec::new(),
        };
        let cap_path = dir.join(format!("{CAPTIONS}.jsonl"));
        if cap_path.exists() {
            ds.captions = load_captions(dir, &ds.vocab)?;
        }
        Ok(ds)
    }
}

fn load_captions(dir: &Path, vocab: &Vocabulary) -> Result<Vec<CaptionExample>> {
    let path = dir.join(format!("{CAPTIONS}.jsonl"));
    let records: Vec<CaptionRecord> = read_jsonl(&path)?;
    let features = read_features(&dir.join(format!("{CAPTIONS}.vqaf")))?;
    if features.len() != records.len() {
        return Err(Error::format(&path, "record count differs from feature count"));
    }
    records
        .into_iter()
        .zip(features)
        .map(|(r, features)| {
            Ok(CaptionExample {
                image_id: r.image_id,
                instance: CaptionInstance {
                    caption: vocab.encode_tokens(&r.tokens)?,
                    features,
                },
            })
        })
        .collect()
}
