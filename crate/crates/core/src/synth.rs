//! Synthetic datasets with pixel-decodable labels.
//!
//! Recognition clips encode their factored label in color: the red level
//! carries the verb, the green level the noun (blue is fixed). A moving
//! bright square adds temporal variation and per-pixel noise keeps the
//! frames from being constant. The rule-based decoder recovers labels at
//! 100% on generated data, so a small encoder can learn them.
//!
//! Answer-classification data encodes each frame block's answer as one
//! active block of the object feature vector: the block index selects the
//! question type, the offset inside it the answer id.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{ActionDictionary, LabelSpace};
use crate::error::{Error, Result};
use crate::mcan::{write_features, QaRecord, OBJECT_FEATURE_WIDTH};
use crate::seeding;

// ---------------------------------------------------------------------------
// recognition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticVideoSpec {
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub frame_size: u32,
    pub seed: u64,
}

impl Default for SyntheticVideoSpec {
    fn default() -> Self {
        SyntheticVideoSpec {
            num_verbs: 3,
            num_nouns: 3,
            videos_per_class: 10,
            frames_per_video: 8,
            frame_size: 48,
            seed: 0,
        }
    }
}

fn channel_level(id: usize, count: usize) -> u8 {
    ((id as f64 + 0.5) / count as f64 * 255.0).round() as u8
}

fn nearest_level(value: f64, count: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for id in 0..count {
        let d = (value - f64::from(channel_level(id, count))).abs();
        if d < best_d {
            best_d = d;
            best = id;
        }
    }
    best
}

/// One frame of a synthetic clip.
pub fn render_frame(
    verb: usize,
    noun: usize,
    spec: &SyntheticVideoSpec,
    frame_idx: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> RgbImage {
    let s = spec.frame_size;
    let r = channel_level(verb, spec.num_verbs);
    let g = channel_level(noun, spec.num_nouns);
    let square = (s / 6).max(1);
    let phase = frame_idx as u32 % spec.frames_per_video.max(1) as u32;
    let sx = (phase * (s - square)) / spec.frames_per_video.max(1) as u32;
    let sy = (phase * 7) % (s - square).max(1);
    let mut img = RgbImage::new(s, s);
    for y in 0..s {
        for x in 0..s {
            let noise = rng.random_range(-12i32..=12);
            let px = |base: u8| (i32::from(base) + noise).clamp(0, 255) as u8;
            let in_square = x >= sx && x < sx + square && y >= sy && y < sy + square;
            let p = if in_square {
                Rgb([255, 255, 255])
            } else {
                Rgb([px(r), px(g), px(128)])
            };
            img.put_pixel(x, y, p);
        }
    }
    img
}

/// Rule-based label decoder: mean color over the frame, snapped to the
/// nearest verb/noun levels.
pub fn decode_frame_label(img: &RgbImage, num_verbs: usize, num_nouns: usize) -> (usize, usize) {
    let mut sum_r = 0.0;
    let mut sum_g = 0.0;
    let mut count = 0.0;
    for p in img.pixels() {
        // skip marker pixels
        if p.0 == [255, 255, 255] {
            continue;
        }
        sum_r += f64::from(p.0[0]);
        sum_g += f64::from(p.0[1]);
        count += 1.0;
    }
    if count == 0.0 {
        return (0, 0);
    }
    (
        nearest_level(sum_r / count, num_verbs),
        nearest_level(sum_g / count, num_nouns),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipLabel {
    pub video_id: String,
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
}

/// Write a recognition dataset: dictionary.csv, labels.csv, and one PNG
/// directory per clip. Clip i carries action `i mod g`, so consecutive
/// clips form a varied stream for the anticipation pairing.
pub fn generate_recognition(root: impl AsRef<Path>, spec: &SyntheticVideoSpec) -> Result<Vec<ClipLabel>> {
    let root = root.as_ref();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let pairs: Vec<(usize, usize)> = (0..spec.num_verbs)
        .flat_map(|v| (0..spec.num_nouns).map(move |n| (v, n)))
        .collect();
    let dict = ActionDictionary::build(
        LabelSpace::numbered("verb", spec.num_verbs),
        LabelSpace::numbered("noun", spec.num_nouns),
        &pairs,
    )?;
    dict.save_csv(root.join("dictionary.csv"))?;

    let total = pairs.len() * spec.videos_per_class;
    let mut labels = Vec::with_capacity(total);
    let frames_dir = root.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for i in 0..total {
        let action = i % pairs.len();
        let (verb, noun) = pairs[action];
        let video_id = format!("clip{i:04}");
        let dir = frames_dir.join(&video_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = seeding::rng_for(spec.seed, "frames", &[i as u64]);
        for f in 0..spec.frames_per_video {
            let img = render_frame(verb, noun, spec, f, &mut rng);
            let path = dir.join(format!("{f:05}.png"));
            img.save(&path)
                .map_err(|e| Error::Pipeline(format!("{}: {e}", path.display())))?;
        }
        labels.push(ClipLabel {
            video_id,
            verb,
            noun,
            action,
        });
    }

    let mut writer = csv::Writer::from_path(root.join("labels.csv"))
        .map_err(|e| Error::Data(e.to_string()))?;
    writer
        .write_record(["video_id", "verb_id", "noun_id", "action_id"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for l in &labels {
        writer
            .write_record([
                l.video_id.clone(),
                l.verb.to_string(),
                l.noun.to_string(),
                l.action.to_string(),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(root.join("labels.csv"), e))?;
    Ok(labels)
}

pub fn load_labels(root: impl AsRef<Path>) -> Result<Vec<ClipLabel>> {
    let path = root.as_ref().join("labels.csv");
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let parse = |i: usize| -> Result<usize> {
            rec[i].trim().parse().map_err(|_| {
                Error::Data(format!("{}: bad field {:?}", path.display(), &rec[i]))
            })
        };
        out.push(ClipLabel {
            video_id: rec[0].to_string(),
            verb: parse(1)?,
            noun: parse(2)?,
            action: parse(3)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no clips", path.display())));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// answer classification
// ---------------------------------------------------------------------------

pub const SYNTH_ANSWERS: [&str; 16] = [
    "yes",
    "no",
    "red",
    "green",
    "blue",
    "left",
    "right",
    "scalpel",
    "syringe",
    "gauze",
    "tourniquet",
    "hand",
    "glove",
    "wound",
    "bandage",
    "clamp",
];

pub const SYNTH_QUESTIONS: [&str; 4] = [
    "what tool is in the hand",
    "what is on the table",
    "what covers the wound",
    "which side is the injury on",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticVqaSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub objects_per_frame: usize,
    pub num_question_types: usize,
    pub num_answers: usize,
    pub frame_block: usize,
    pub seed: u64,
}

impl Default for SyntheticVqaSpec {
    fn default() -> Self {
        SyntheticVqaSpec {
            num_videos: 4,
            frames_per_video: 60,
            objects_per_frame: 4,
            num_question_types: 4,
            num_answers: 16,
            frame_block: 15,
            seed: 0,
        }
    }
}

impl SyntheticVqaSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_question_types > SYNTH_QUESTIONS.len() {
            return Err(Error::Config(format!(
                "at most {} question types",
                SYNTH_QUESTIONS.len()
            )));
        }
        if self.num_answers < 2 || self.num_answers > SYNTH_ANSWERS.len() {
            return Err(Error::Config(format!(
                "answers must lie in 2..={}",
                SYNTH_ANSWERS.len()
            )));
        }
        if self.num_question_types * self.num_answers > OBJECT_FEATURE_WIDTH {
            return Err(Error::Config("signal blocks exceed feature width".into()));
        }
        Ok(())
    }
}

/// Feature rows for one frame whose block `qtype` encodes `answer`.
pub fn render_features(
    qtype: usize,
    answer: usize,
    spec: &SyntheticVqaSpec,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Array2<f32> {
    let mut m = Array2::<f32>::zeros((spec.objects_per_frame, OBJECT_FEATURE_WIDTH));
    for o in 0..spec.objects_per_frame {
        for j in 0..OBJECT_FEATURE_WIDTH {
            m[[o, j]] = rng.random_range(-0.1..0.1);
        }
        m[[o, qtype * spec.num_answers + answer]] = 5.0 + rng.random_range(-0.3..0.3);
    }
    m
}

/// Decode (question type, answer) from one frame's features: the location
/// of the strongest cell.
pub fn decode_features(frame: &Array2<f32>, spec: &SyntheticVqaSpec) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f32::NEG_INFINITY;
    let width = spec.num_question_types * spec.num_answers;
    for j in 0..width {
        let mut col = 0.0;
        for o in 0..frame.nrows() {
            col += frame[[o, j]];
        }
        if col > best_v {
            best_v = col;
            best = (j / spec.num_answers, j % spec.num_answers);
        }
    }
    best
}

/// Write an answer-classification dataset: one feature file per video and
/// a JSONL of per-frame questions. Each block of `frame_block` frames has
/// one focus question type and one answer, constant across the block.
pub fn generate_vqa(root: impl AsRef<Path>, spec: &SyntheticVqaSpec) -> Result<Vec<QaRecord>> {
    spec.validate()?;
    let root = root.as_ref();
    let videos_dir = root.join("videos");
    std::fs::create_dir_all(&videos_dir).map_err(|e| Error::io(&videos_dir, e))?;
    let mut records = Vec::new();
    for v in 0..spec.num_videos {
        let video_id = format!("video{v:03}");
        let mut rng = seeding::rng_for(spec.seed, "vqa", &[v as u64]);
        let mut frames = Vec::with_capacity(spec.frames_per_video);
        let blocks = crate::mcan::partition_blocks(spec.frames_per_video, spec.frame_block);
        for (b, (_, range)) in blocks.iter().enumerate() {
            let qtype = (v + b) % spec.num_question_types;
            let answer = rng.random_range(0..spec.num_answers);
            for f in range.clone() {
                frames.push(render_features(qtype, answer, spec, &mut rng));
                records.push(QaRecord {
                    video_id: video_id.clone(),
                    frame_idx: f,
                    question: SYNTH_QUESTIONS[qtype].to_string(),
                    answer: SYNTH_ANSWERS[answer].to_string(),
                });
            }
        }
        write_features(videos_dir.join(format!("{video_id}.feat")), &frames)?;
    }
    crate::mcan::write_jsonl(root.join("qa.jsonl"), &records)?;
    Ok(records)
}
