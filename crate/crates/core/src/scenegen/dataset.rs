//! On-disk dataset layout:
//!
//! ```text
//! <root>/dataset.json
//! <root>/{train,test}/samples.jsonl
//! <root>/{train,test}/img/<id>_x.png, <id>_y.png
//! ```

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_scene, sample_edit_op, EditOp, Image, Instruction, SceneDescription, DEFAULT_CANVAS};
use crate::error::{Error, Result};
use crate::image_io::{read_png, write_png};

fn default_canvas() -> usize {
    DEFAULT_CANVAS
}

fn default_edits_per_scene() -> usize {
    5
}

fn default_min_objects() -> usize {
    1
}

fn default_max_objects() -> usize {
    8
}

/// Dataset generation parameters, read from JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    #[serde(default = "default_canvas")]
    pub canvas: usize,
    /// Distinct edits generated from each base scene. Siblings of a test
    /// target act as hard distractors during retrieval.
    #[serde(default = "default_edits_per_scene")]
    pub edits_per_scene: usize,
    #[serde(default = "default_min_objects")]
    pub min_objects: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
}

impl DatasetConfig {
    pub fn new(train: usize, test: usize, seed: u64) -> Self {
        DatasetConfig {
            train,
            test,
            seed,
            canvas: default_canvas(),
            edits_per_scene: default_edits_per_scene(),
            min_objects: default_min_objects(),
            max_objects: default_max_objects(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: DatasetConfig = serde_json::from_str(text).map_err(|e| Error::json("dataset config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.test == 0 {
            return Err(Error::Config("train and test sizes must be at least 1".into()));
        }
        if self.edits_per_scene == 0 {
            return Err(Error::Config("edits_per_scene must be at least 1".into()));
        }
        if self.canvas < 8 {
            return Err(Error::Config(format!("canvas {} is too small", self.canvas)));
        }
        if self.min_objects > self.max_objects || self.max_objects > super::MAX_OBJECTS {
            return Err(Error::Config(format!(
                "object range {}..={} is invalid",
                self.min_objects, self.max_objects
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::parse(s).ok_or_else(|| Error::Config(format!("unknown split {s:?}, expected train or test")))
    }
}

/// One line of `samples.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub input: String,
    pub output: String,
    pub instruction: String,
    pub op: String,
}

impl SampleRecord {
    /// Parses and validates one JSONL line: the instruction must follow the
    /// grammar, agree with `op`, and image paths must stay inside the split.
    pub fn parse_line(line: &str) -> Result<(SampleRecord, Instruction)> {
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| Error::json("sample record", e))?;
        let instruction = Instruction::parse(&record.instruction)?;
        let op = EditOp::parse(&record.op).ok_or_else(|| Error::Parse {
            text: record.op.clone(),
            reason: "op must be add, remove or modify".into(),
        })?;
        if op != instruction.op() {
            return Err(Error::Parse {
                text: record.instruction.clone(),
                reason: format!("instruction is a {} but the record says {op}", instruction.op()),
            });
        }
        for path in [&record.input, &record.output] {
            let p = Path::new(path);
            let inside = p.is_relative()
                && p.components().all(|c| matches!(c, std::path::Component::Normal(_)));
            if !inside {
                return Err(Error::Parse {
                    text: path.clone(),
                    reason: "image path must be relative to the split directory".into(),
                });
            }
        }
        Ok((record, instruction))
    }
}

/// One training/evaluation record with decoded images.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSample {
    pub id: String,
    pub x: Image,
    pub y: Image,
    pub instruction: Instruction,
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    config: &'a DatasetConfig,
    train_samples: usize,
    test_samples: usize,
}

fn generate_split(cfg: &DatasetConfig, split: Split) -> Result<Vec<(String, Instruction, Image, Image)>> {
    let count = match split {
        Split::Train => cfg.train,
        Split::Test => cfg.test,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let mut out = Vec::with_capacity(count);
    let mut scene_index = 0;
    while out.len() < count {
        let scene = SceneDescription::random(&mut rng, cfg.canvas, cfg.min_objects, cfg.max_objects)?;
        let x = render_scene(&scene);
        let mut seen: Vec<Instruction> = Vec::new();
        let mut attempts = 0;
        while seen.len() < cfg.edits_per_scene && out.len() < count && attempts < 64 * cfg.edits_per_scene {
            attempts += 1;
            // Illegal draws are redrawn, keeping ops uniform over what the scene allows.
            let op = *EditOp::ALL.choose(&mut rng).expect("non-empty");
            let Ok((instruction, edited)) = sample_edit_op(&scene, op, &mut rng) else {
                continue;
            };
            if seen.contains(&instruction) {
                continue;
            }
            let id = format!("{split}-{scene_index:05}-{}", seen.len());
            seen.push(instruction);
            out.push((id, instruction, x.clone(), render_scene(&edited)));
        }
        scene_index += 1;
    }
    Ok(out)
}

/// Generates one split in memory, exactly as [`build_dataset`] would write it.
pub fn generate_samples(cfg: &DatasetConfig, split: Split) -> Result<Vec<EditSample>> {
    cfg.validate()?;
    Ok(generate_split(cfg, split)?
        .into_iter()
        .map(|(id, instruction, x, y)| EditSample { id, x, y, instruction })
        .collect())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates both splits and writes them under `root`. Identical
/// configurations produce identical bytes.
pub fn build_dataset(cfg: &DatasetConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.as_str());
        create_dir(&dir.join("img"))?;
        let samples = generate_split(cfg, split)?;
        let jsonl = dir.join("samples.jsonl");
        let file = fs::File::create(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
        let mut w = BufWriter::new(file);
        for (id, instruction, x, y) in &samples {
            let record = SampleRecord {
                id: id.clone(),
                input: format!("img/{id}_x.png"),
                output: format!("img/{id}_y.png"),
                instruction: instruction.text(),
                op: instruction.op().as_str().to_string(),
            };
            write_png(&dir.join(&record.input), x)?;
            write_png(&dir.join(&record.output), y)?;
            let line = serde_json::to_string(&record).map_err(|e| Error::json("sample record", e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&jsonl, e))?;
        }
        w.flush().map_err(|e| Error::io(&jsonl, e))?;
        log::info!("wrote {} {split} samples to {}", samples.len(), dir.display());
    }
    let manifest = DatasetManifest {
        config: cfg,
        train_samples: cfg.train,
        test_samples: cfg.test,
    };
    let path = root.join("dataset.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("dataset manifest", e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads every record of one split, decoding both images.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<EditSample>> {
    let dir: PathBuf = root.join(split.as_str());
    let jsonl = dir.join("samples.jsonl");
    let text = fs::read_to_string(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (record, instruction) = SampleRecord::parse_line(line).map_err(|e| match e {
            Error::Json { source, .. } => Error::json(format!("{}:{}", jsonl.display(), lineno + 1), source),
            other => other,
        })?;
        let x = read_png(&dir.join(&record.input))?;
        let y = read_png(&dir.join(&record.output))?;
        if x.dim() != y.dim() {
            return Err(Error::Shape(format!("{}: input and output sizes differ", record.id)));
        }
        samples.push(EditSample {
            id: record.id,
            x,
            y,
            instruction,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_requires_positive_sizes() {
        assert!(DatasetConfig::from_json(r#"{"train": 0, "test": 1, "seed": 1, "canvas": 64}"#).is_err());
        let cfg = DatasetConfig::from_json(r#"{"train": 2, "test": 1, "seed": 1, "canvas": 64}"#).unwrap();
        assert_eq!(cfg.edits_per_scene, 5);
        assert!(DatasetConfig::from_json(r#"{"train": 2, "test": 1, "seed": 1, "bogus": 1}"#).is_err());
    }

    #[test]
    fn record_validation() {
        let ok = r#"{"id":"a","input":"img/a_x.png","output":"img/a_y.png","instruction":"remove the object at the top left","op":"remove"}"#;
        assert!(SampleRecord::parse_line(ok).is_ok());
        let wrong_op = ok.replace(r#""op":"remove""#, r#""op":"add""#);
        assert!(SampleRecord::parse_line(&wrong_op).is_err());
        let escape = ok.replace("img/a_x.png", "../../etc/passwd");
        assert!(SampleRecord::parse_line(&escape).is_err());
        let absolute = ok.replace("img/a_x.png", "/etc/passwd");
        assert!(SampleRecord::parse_line(&absolute).is_err());
    }

    #[test]
    fn edits_only_touch_the_target_cell() {
        let cfg = DatasetConfig::new(60, 6, 17);
        for (_, instruction, x, y) in generate_split(&cfg, Split::Train).unwrap() {
            let cell = instruction.target_cell();
            let (r0, r1) = super::super::cell_bounds(cell.row(), cfg.canvas);
            let (c0, c1) = super::super::cell_bounds(cell.col(), cfg.canvas);
            let mut differing = 0;
            for (((_, yy, xx), a), b) in x.indexed_iter().zip(y.iter()) {
                if a != b {
                    differing += 1;
                    assert!((r0..r1).contains(&yy) && (c0..c1).contains(&xx));
                }
            }
            assert!(differing > 0, "{instruction} changed nothing");
        }
    }
}
