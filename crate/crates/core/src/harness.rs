//! Command implementations behind the CLI: dataset generation, training,
//! evaluation, prediction, and report rendering.
//!
//! Everything stochastic draws from streams derived from the run seed, so
//! identical (config, seed, dataset) triples produce identical logs,
//! checkpoints, predictions, and metrics.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;

use crate::checkpoint::{Checkpoint, OptimizerState, TensorData};
use crate::config::{RunConfig, TaskKind};
use crate::dictionary::ActionDictionary;
use crate::error::{Error, Result};
use crate::heads::{decode, ActionPrediction, ClassifierHead, HeadConfig, HeadMode, HeadScores, Target};
use crate::mcan::{
    partition_blocks, read_features, read_jsonl, representative_frames, AnswerVocab, McanModel,
    ObjectFeatureSet, PredictionRecord, QaRecord, Vocab,
};
use crate::metrics::{aggregate, bleu_scores, recognition_accuracy, softmax, ScoreReport};
use crate::moma::Distiller;
use crate::nn::{Adam, ConvEncoder, Module};
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, rng_for, tag};
use crate::stitch::{test_time_replicas, train_stitch, FrameSequence};
use crate::synth::ClipLabel;
use crate::tape::Tape;
use crate::text::tokenize;

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_total_loss: f64,
}

// ---------------------------------------------------------------------------
// recognition / anticipation data
// ---------------------------------------------------------------------------

pub struct RecognitionData {
    root: PathBuf,
    pub dict: ActionDictionary,
    pub clips: Vec<ClipLabel>,
    cache: HashMap<String, FrameSequence>,
}

impl RecognitionData {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let dict = ActionDictionary::load_csv(root.join("dictionary.csv"))?;
        let clips = crate::synth::load_labels(&root)?;
        for c in &clips {
            if dict.action_to_pair(c.action)? != (c.verb, c.noun) {
                return Err(Error::Data(format!(
                    "{}: label ({}, {}) disagrees with dictionary action {}",
                    c.video_id, c.verb, c.noun, c.action
                )));
            }
        }
        Ok(RecognitionData {
            root,
            dict,
            clips,
            cache: HashMap::new(),
        })
    }

    pub fn frames(&mut self, video_id: &str) -> Result<&FrameSequence> {
        if !self.cache.contains_key(video_id) {
            let seq =
                FrameSequence::load_dir(video_id, self.root.join("frames").join(video_id))?;
            self.cache.insert(video_id.to_string(), seq);
        }
        Ok(&self.cache[video_id])
    }
}

/// (clip index, target) instances for the task. Anticipation pairs each
/// clip with the following clip's label and drops the final clip.
pub fn task_instances(kind: TaskKind, clips: &[ClipLabel]) -> Vec<(usize, Target)> {
    let to_target = |c: &ClipLabel| Target {
        verb: c.verb,
        noun: c.noun,
        action: Some(c.action),
    };
    match kind {
        TaskKind::Recognition => clips
            .iter()
            .enumerate()
            .map(|(i, c)| (i, to_target(c)))
            .collect(),
        TaskKind::Anticipation => clips
            .windows(2)
            .enumerate()
            .map(|(i, w)| (i, to_target(&w[1])))
            .collect(),
        TaskKind::Vqa => Vec::new(),
    }
}

pub fn build_distiller<F: Scalar>(cfg: &RunConfig, dict: &ActionDictionary) -> Result<Distiller<F>> {
    let head_cfg = HeadConfig {
        mode: cfg.task.head_mode,
        input_dim: cfg.embed_dim(),
        num_verbs: dict.num_verbs(),
        num_nouns: dict.num_nouns(),
        num_actions: dict.num_actions(),
    };
    head_cfg.validate_against(dict)?;
    let seed = cfg.optim.seed;
    let mut rng_s = rng_for(seed, "student_init", &[]);
    let student = ConvEncoder::new("student", 3, &cfg.model.encoder_channels, &mut rng_s);
    let mut rng_t = rng_for(seed, "teacher_init", &[]);
    let teacher = ConvEncoder::new("teacher", 3, &cfg.model.encoder_channels, &mut rng_t);
    let mut rng_h = rng_for(seed, "head_init", &[]);
    let head = ClassifierHead::new("head", head_cfg, &mut rng_h);
    let mut rng_a = rng_for(seed, "attn_init", &[]);
    Ok(Distiller::new(
        student,
        teacher,
        head,
        cfg.model.distill(),
        cfg.model.attn_heads,
        &mut rng_a,
    ))
}

/// Initialize the teacher path from a previously trained student
/// checkpoint (the transfer setup).
fn restore_teacher_from(distiller: &mut Distiller<impl Scalar>, ckpt: &Checkpoint) -> Result<()> {
    let rename = |name: &str| -> String {
        name.replacen("teacher_attn.", "student_attn.", 1)
            .replacen("teacher.", "student.", 1)
    };
    let by_name: HashMap<&str, &TensorData> =
        ckpt.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut targets = distiller.teacher.params_mut();
    targets.extend(distiller.teacher_attn.params_mut());
    for p in targets {
        let source = rename(p.name());
        let t = by_name.get(source.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("teacher_init missing parameter {source}"))
        })?;
        if t.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "teacher_init parameter {source} has shape {:?}, expected {:?}",
                t.shape,
                p.value.shape()
            )));
        }
        p.value = t.to_array()?;
    }
    Ok(())
}

fn shuffled_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = rng_for(seed, "shuffle", &[epoch]);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn save_recognition_checkpoint<F: Scalar>(
    path: &Path,
    cfg: &RunConfig,
    distiller: &Distiller<F>,
    opt: &Adam<F>,
    step: u64,
) -> Result<()> {
    let mut params = distiller.student.params();
    params.extend(distiller.student_attn.params());
    params.extend(distiller.head.params());
    Checkpoint {
        config_hash: cfg.model_hash(),
        task: cfg.task.kind,
        head_mode: Some(cfg.task.head_mode),
        step,
        params: Checkpoint::capture_params(&params),
        queue: Some(TensorData::from_matrix(&distiller.queue.rows())),
        optimizer: OptimizerState::capture(opt),
        question_vocab: None,
        answer_vocab: None,
    }
    .save(path)
}

fn restore_recognition_checkpoint<F: Scalar>(
    ckpt: &Checkpoint,
    distiller: &mut Distiller<F>,
    opt: &mut Adam<F>,
) -> Result<()> {
    Checkpoint::restore_params(&ckpt.params, distiller.trainable_params_mut())?;
    if let Some(q) = &ckpt.queue {
        distiller.queue.assign_rows(&q.to_matrix()?)?;
    }
    ckpt.optimizer.restore(opt)
}

fn train_recognition<F: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut data = RecognitionData::load(&cfg.data.root)?;
    let instances = task_instances(cfg.task.kind, &data.clips);
    if instances.is_empty() {
        return Err(Error::Data("no training instances".into()));
    }
    let mut distiller = build_distiller::<F>(cfg, &data.dict)?;
    let mut opt = Adam::new(cfg.optim.lr);

    if let Some(teacher_path) = &cfg.model.teacher_init {
        let ckpt = Checkpoint::load(teacher_path)?;
        restore_teacher_from(&mut distiller, &ckpt)?;
    }
    let mut start_step = 0u64;
    if let Some(resume_path) = resume {
        let ckpt = Checkpoint::load(resume_path)?;
        ckpt.check_hash(&cfg.model_hash())?;
        restore_recognition_checkpoint(&ckpt, &mut distiller, &mut opt)?;
        start_step = ckpt.step;
    }

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("train_log.csv");
    let mut log = std::io::BufWriter::new(if start_step == 0 {
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?
    } else {
        std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?
    });
    if start_step == 0 {
        writeln!(log, "step,ce,infonce,total").map_err(|e| Error::io(&log_path, e))?;
    }

    let batch = cfg.optim.batch_size;
    let steps_per_epoch = (instances.len() / batch).max(1) as u64;
    let ckpt_path = out.join("checkpoint.json");
    let mut last_total = f64::NAN;
    for step in start_step..cfg.optim.steps as u64 {
        let order = shuffled_order(instances.len(), cfg.optim.seed, step / steps_per_epoch);
        let mut images = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        for b in 0..batch {
            let (clip_idx, target) =
                instances[order[(step as usize * batch + b) % instances.len()]];
            let video_id = data.clips[clip_idx].video_id.clone();
            let seq = data.frames(&video_id)?;
            let stitch_seed = derive_seed(cfg.optim.seed, &[tag("stitch"), step, b as u64]);
            let stitched = train_stitch(seq, &cfg.data.stitch, stitch_seed)?;
            images.push(stitched.stitched.pixels);
            targets.push(target);
        }
        let refs: Vec<&image::RgbImage> = images.iter().collect();
        let batch_tensor = crate::stitch::images_to_batch::<F>(&refs)?;
        let report = distiller.train_step(&mut opt, &batch_tensor, &targets)?;
        last_total = report.total_loss.to_f64_lossy();
        writeln!(
            log,
            "{},{},{},{}",
            step,
            report.ce_loss.to_f64_lossy(),
            report.infonce_loss.to_f64_lossy(),
            last_total
        )
        .map_err(|e| Error::io(&log_path, e))?;

        let done = step + 1 == cfg.optim.steps as u64;
        if done || (cfg.optim.checkpoint_every > 0 && (step + 1) % cfg.optim.checkpoint_every as u64 == 0)
        {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save_recognition_checkpoint(&ckpt_path, cfg, &distiller, &opt, step + 1)?;
        }
    }
    if start_step >= cfg.optim.steps as u64 {
        // resumed past the end: persist unchanged state
        save_recognition_checkpoint(&ckpt_path, cfg, &distiller, &opt, start_step)?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        final_total_loss: last_total,
    })
}

// ---------------------------------------------------------------------------
// recognition / anticipation prediction
// ---------------------------------------------------------------------------

struct LoadedRecognitionModel<F: Scalar> {
    head_mode: HeadMode,
    distiller: Distiller<F>,
}

fn load_recognition_models<F: Scalar>(
    cfg: &RunConfig,
    dict: &ActionDictionary,
    checkpoints: &[PathBuf],
) -> Result<Vec<LoadedRecognitionModel<F>>> {
    if checkpoints.is_empty() {
        return Err(Error::Checkpoint("no checkpoints given".into()));
    }
    let mut out = Vec::new();
    for path in checkpoints {
        let ckpt = Checkpoint::load(path)?;
        let head_mode = ckpt.head_mode.ok_or_else(|| {
            Error::Checkpoint(format!("{}: not a recognition checkpoint", path.display()))
        })?;
        let view = cfg.with_head_mode(head_mode);
        ckpt.check_hash(&view.model_hash())?;
        let mut distiller = build_distiller::<F>(&view, dict)?;
        Checkpoint::restore_params(&ckpt.params, distiller.trainable_params_mut())?;
        out.push(LoadedRecognitionModel {
            head_mode,
            distiller,
        });
    }
    Ok(out)
}

/// Aggregated (checkpoints × replicas) prediction for the listed clips.
/// Also returns the number of probability sets aggregated per clip.
fn predict_recognition_clips<F: Scalar>(
    cfg: &RunConfig,
    data: &mut RecognitionData,
    models: &[LoadedRecognitionModel<F>],
    clip_indices: &[usize],
) -> Result<Vec<(ActionPrediction, usize)>> {
    let dict = data.dict.clone();
    let mut out = Vec::with_capacity(clip_indices.len());
    for &idx in clip_indices {
        let video_id = data.clips[idx].video_id.clone();
        let seq = data.frames(&video_id)?;
        let replica_seed = derive_seed(cfg.optim.seed, &[tag("predict"), idx as u64]);
        let replicas = test_time_replicas(seq, &cfg.data.stitch, replica_seed)?;
        let imgs: Vec<&image::RgbImage> = replicas.iter().map(|r| &r.stitched.pixels).collect();
        let batch = crate::stitch::images_to_batch::<F>(&imgs)?;

        let mut action_sets: Vec<Vec<f64>> = Vec::new();
        let mut verb_sets: Vec<Vec<f64>> = Vec::new();
        let mut noun_sets: Vec<Vec<f64>> = Vec::new();
        for model in models {
            let logits = model.distiller.infer_logits(&batch)?;
            for row in logits.rows() {
                let row: Vec<f64> = row.iter().map(|x| x.to_f64_lossy()).collect();
                match model.head_mode {
                    HeadMode::Adg => action_sets.push(softmax(&row)),
                    HeadMode::SingleVerb => verb_sets.push(softmax(&row)),
                    HeadMode::SingleNoun => noun_sets.push(softmax(&row)),
                    HeadMode::Multi => {
                        let k = dict.num_verbs();
                        verb_sets.push(softmax(&row[..k]));
                        noun_sets.push(softmax(&row[k..]));
                    }
                }
            }
        }
        let count = action_sets.len() + verb_sets.len().max(noun_sets.len());
        let scores = if !action_sets.is_empty() {
            if !verb_sets.is_empty() || !noun_sets.is_empty() {
                return Err(Error::Checkpoint(
                    "cannot mix unified-action and factored checkpoints".into(),
                ));
            }
            HeadScores::Action(aggregate(&action_sets)?)
        } else if !verb_sets.is_empty() && !noun_sets.is_empty() {
            HeadScores::Factored {
                verb: aggregate(&verb_sets)?,
                noun: aggregate(&noun_sets)?,
            }
        } else {
            return Err(Error::Checkpoint(
                "single-task prediction needs one verb and one noun checkpoint".into(),
            ));
        };
        out.push((decode(&scores, &dict)?, count));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// vqa data and training
// ---------------------------------------------------------------------------

pub struct VqaData {
    pub records: Vec<QaRecord>,
    pub features: BTreeMap<String, Vec<Array2<f32>>>,
}

impl VqaData {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let records: Vec<QaRecord> = read_jsonl(root.join("qa.jsonl"))?;
        if records.is_empty() {
            return Err(Error::Data("no question annotations".into()));
        }
        let mut features = BTreeMap::new();
        for r in &records {
            if !features.contains_key(&r.video_id) {
                let path = root.join("videos").join(format!("{}.feat", r.video_id));
                features.insert(r.video_id.clone(), read_features(&path)?);
            }
        }
        for r in &records {
            let n = features[&r.video_id].len();
            if r.frame_idx >= n {
                return Err(Error::Data(format!(
                    "{} frame {} outside feature file of {n} frames",
                    r.video_id, r.frame_idx
                )));
            }
        }
        Ok(VqaData { records, features })
    }

    /// Records grouped per video and frame, in annotation order.
    pub fn by_frame(&self) -> BTreeMap<&str, BTreeMap<usize, Vec<&QaRecord>>> {
        let mut out: BTreeMap<&str, BTreeMap<usize, Vec<&QaRecord>>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.video_id.as_str())
                .or_default()
                .entry(r.frame_idx)
                .or_default()
                .push(r);
        }
        out
    }
}

fn feature_set<F: Scalar>(frame: &Array2<f32>, n_obj_max: usize) -> Result<ObjectFeatureSet<F>> {
    let converted = frame.mapv(|x| F::from_f64(f64::from(x)));
    ObjectFeatureSet::from_raw(&converted, n_obj_max)
}

fn build_vocabs(records: &[QaRecord]) -> Result<(Vocab, AnswerVocab)> {
    let questions = Vocab::build(records.iter().map(|r| r.question.as_str()));
    let answers = AnswerVocab::build(records.iter().map(|r| r.answer.as_str()))?;
    Ok((questions, answers))
}

fn train_vqa<F: Scalar>(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let data = VqaData::load(&cfg.data.root)?;
    let (question_vocab, answer_vocab) = build_vocabs(&data.records)?;

    // training instances: questions attached to each block's representative
    let mut instances: Vec<(&str, usize, &str, usize)> = Vec::new();
    let by_frame = data.by_frame();
    for (video_id, frames) in &by_frame {
        let n = data.features[*video_id].len();
        for rep in representative_frames(n, cfg.data.frame_block) {
            if let Some(records) = frames.get(&rep) {
                for r in records {
                    let answer_id = answer_vocab.id_of(&r.answer).expect("answer in vocab");
                    instances.push((video_id, rep, r.question.as_str(), answer_id));
                }
            }
        }
    }
    if instances.is_empty() {
        return Err(Error::Data("no training instances after subsampling".into()));
    }

    let mut rng = rng_for(cfg.optim.seed, "mcan_init", &[]);
    let mcan_cfg = cfg.model.mcan(answer_vocab.len());
    let mut model = McanModel::<F>::new(mcan_cfg, question_vocab, answer_vocab, &mut rng)?;
    let mut opt = Adam::new(cfg.optim.lr);
    let mut start_step = 0u64;
    if let Some(resume_path) = resume {
        let ckpt = Checkpoint::load(resume_path)?;
        ckpt.check_hash(&cfg.model_hash())?;
        Checkpoint::restore_params(&ckpt.params, model.params_mut())?;
        ckpt.optimizer.restore(&mut opt)?;
        start_step = ckpt.step;
    }

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("train_log.csv");
    let mut log = std::io::BufWriter::new(if start_step == 0 {
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?
    } else {
        std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?
    });
    if start_step == 0 {
        writeln!(log, "step,ce,infonce,total").map_err(|e| Error::io(&log_path, e))?;
    }

    let save = |model: &McanModel<F>, opt: &Adam<F>, step: u64, path: &Path| -> Result<()> {
        Checkpoint {
            config_hash: cfg.model_hash(),
            task: cfg.task.kind,
            head_mode: None,
            step,
            params: Checkpoint::capture_params(&model.params()),
            queue: None,
            optimizer: OptimizerState::capture(opt),
            question_vocab: Some(model.question_vocab.clone()),
            answer_vocab: Some(model.answer_vocab.clone()),
        }
        .save(path)
    };

    let batch = cfg.optim.batch_size;
    let steps_per_epoch = (instances.len() / batch).max(1) as u64;
    let ckpt_path = out.join("checkpoint.json");
    let mut last_total = f64::NAN;
    for step in start_step..cfg.optim.steps as u64 {
        let order = shuffled_order(instances.len(), cfg.optim.seed, step / steps_per_epoch);
        let mut tape = Tape::<F>::new();
        let mut losses = Vec::with_capacity(batch);
        for b in 0..batch {
            let (video_id, frame, question, answer_id) =
                instances[order[(step as usize * batch + b) % instances.len()]];
            let feats = feature_set::<F>(
                &data.features[video_id][frame],
                cfg.model.n_obj_max,
            )?;
            let ids = model.question_vocab.encode(question)?;
            losses.push(model.loss(&mut tape, &feats, &ids, answer_id)?);
        }
        let total = tape.mean_of(&losses);
        let grads = tape.backward(total);
        opt.step(model.params_mut(), &grads);
        last_total = tape.scalar(total).to_f64_lossy();
        writeln!(log, "{step},{last_total},0,{last_total}").map_err(|e| Error::io(&log_path, e))?;

        let done = step + 1 == cfg.optim.steps as u64;
        if done || (cfg.optim.checkpoint_every > 0 && (step + 1) % cfg.optim.checkpoint_every as u64 == 0)
        {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save(&model, &opt, step + 1, &ckpt_path)?;
        }
    }
    if start_step >= cfg.optim.steps as u64 {
        save(&model, &opt, start_step, &ckpt_path)?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        final_total_loss: last_total,
    })
}

fn load_vqa_models<F: Scalar>(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
) -> Result<Vec<McanModel<F>>> {
    if checkpoints.is_empty() {
        return Err(Error::Checkpoint("no checkpoints given".into()));
    }
    let mut out = Vec::new();
    for path in checkpoints {
        let ckpt = Checkpoint::load(path)?;
        ckpt.check_hash(&cfg.model_hash())?;
        let (qv, av) = match (&ckpt.question_vocab, &ckpt.answer_vocab) {
            (Some(q), Some(a)) => (q.clone(), a.clone()),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "{}: not an answer-classification checkpoint",
                    path.display()
                )))
            }
        };
        let mut rng = rng_for(cfg.optim.seed, "mcan_init", &[]);
        let mut model = McanModel::<F>::new(cfg.model.mcan(av.len()), qv, av, &mut rng)?;
        Checkpoint::restore_params(&ckpt.params, model.params_mut())?;
        out.push(model);
    }
    Ok(out)
}

/// Answers for every frame of every video: the representative frame of
/// each block answers each covered frame's questions.
fn predict_vqa_records<F: Scalar>(
    cfg: &RunConfig,
    data: &VqaData,
    models: &[McanModel<F>],
) -> Result<Vec<PredictionRecord>> {
    let by_frame = data.by_frame();
    let mut out = Vec::new();
    for (video_id, frames) in &by_frame {
        let n = data.features[*video_id].len();
        for (rep, range) in partition_blocks(n, cfg.data.frame_block) {
            let feats = feature_set::<F>(&data.features[*video_id][rep], cfg.model.n_obj_max)?;
            for f in range {
                let Some(records) = frames.get(&f) else {
                    continue;
                };
                for (question_id, r) in records.iter().enumerate() {
                    let score_sets: Vec<Vec<f64>> = models
                        .iter()
                        .map(|m| m.answer_scores(&feats, &r.question))
                        .collect::<Result<_>>()?;
                    let mean = aggregate(&score_sets)?;
                    let answer_id = crate::heads::argmax(&mean);
                    let answer_text = models[0]
                        .answer_vocab
                        .text_of(answer_id)
                        .unwrap_or("")
                        .to_string();
                    out.push(PredictionRecord {
                        video_id: (*video_id).to_string(),
                        frame_idx: f,
                        question_id,
                        answer_text,
                    });
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    match cfg.task.kind {
        TaskKind::Recognition | TaskKind::Anticipation => {
            let spec = cfg.synth.recognition.clone().ok_or_else(|| {
                Error::Config("config has no [synth.recognition] section".into())
            })?;
            crate::synth::generate_recognition(&cfg.data.root, &spec)?;
        }
        TaskKind::Vqa => {
            let spec = cfg
                .synth
                .vqa
                .clone()
                .ok_or_else(|| Error::Config("config has no [synth.vqa] section".into()))?;
            crate::synth::generate_vqa(&cfg.data.root, &spec)?;
        }
    }
    Ok(())
}

pub fn cmd_train<F: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.validate_paths()?;
    match cfg.task.kind {
        TaskKind::Recognition | TaskKind::Anticipation => train_recognition::<F>(cfg, out, resume),
        TaskKind::Vqa => train_vqa::<F>(cfg, out, resume),
    }
}

pub fn cmd_predict<F: Scalar>(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    out: &Path,
) -> Result<PathBuf> {
    cfg.validate()?;
    cfg.validate_paths()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match cfg.task.kind {
        TaskKind::Recognition | TaskKind::Anticipation => {
            let mut data = RecognitionData::load(&cfg.data.root)?;
            let models = load_recognition_models::<F>(cfg, &data.dict, checkpoints)?;
            let instances = task_instances(cfg.task.kind, &data.clips);
            let indices: Vec<usize> = instances.iter().map(|(i, _)| *i).collect();
            let preds = predict_recognition_clips(cfg, &mut data, &models, &indices)?;

            let path = out.join("predictions.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(e.to_string()))?;
            w.write_record(["video_id", "verb_id", "noun_id", "action_id"])
                .map_err(|e| Error::Data(e.to_string()))?;
            let agg_path = out.join("predict_log.csv");
            let mut agg =
                csv::Writer::from_path(&agg_path).map_err(|e| Error::Data(e.to_string()))?;
            agg.write_record(["video_id", "prob_sets"])
                .map_err(|e| Error::Data(e.to_string()))?;
            for (&idx, (pred, count)) in indices.iter().zip(&preds) {
                let video_id = &data.clips[idx].video_id;
                w.write_record([
                    video_id.clone(),
                    pred.verb.to_string(),
                    pred.noun.to_string(),
                    pred.action.map(|a| a.to_string()).unwrap_or_default(),
                ])
                .map_err(|e| Error::Data(e.to_string()))?;
                agg.write_record([video_id.clone(), count.to_string()])
                    .map_err(|e| Error::Data(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            agg.flush().map_err(|e| Error::io(&agg_path, e))?;
            Ok(path)
        }
        TaskKind::Vqa => {
            let data = VqaData::load(&cfg.data.root)?;
            let models = load_vqa_models::<F>(cfg, checkpoints)?;
            let preds = predict_vqa_records(cfg, &data, &models)?;
            let path = out.join("predictions.jsonl");
            crate::mcan::write_jsonl(&path, &preds)?;
            Ok(path)
        }
    }
}

pub fn cmd_eval<F: Scalar>(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    out: &Path,
) -> Result<ScoreReport> {
    cfg.validate()?;
    cfg.validate_paths()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = match cfg.task.kind {
        TaskKind::Recognition | TaskKind::Anticipation => {
            let mut data = RecognitionData::load(&cfg.data.root)?;
            let models = load_recognition_models::<F>(cfg, &data.dict, checkpoints)?;
            let instances = task_instances(cfg.task.kind, &data.clips);
            let indices: Vec<usize> = instances.iter().map(|(i, _)| *i).collect();
            let preds = predict_recognition_clips(cfg, &mut data, &models, &indices)?;
            let targets: Vec<(usize, usize)> =
                instances.iter().map(|(_, t)| (t.verb, t.noun)).collect();
            let only_preds: Vec<ActionPrediction> =
                preds.into_iter().map(|(p, _)| p).collect();
            ScoreReport::from_recognition(recognition_accuracy(&only_preds, &targets)?)
        }
        TaskKind::Vqa => {
            let data = VqaData::load(&cfg.data.root)?;
            let models = load_vqa_models::<F>(cfg, checkpoints)?;
            let preds = predict_vqa_records(cfg, &data, &models)?;
            score_vqa(&data, &preds)?
        }
    };
    let json_path = out.join("metrics.json");
    std::fs::write(&json_path, report.to_json()).map_err(|e| Error::io(&json_path, e))?;
    let txt_path = out.join("metrics.txt");
    std::fs::write(&txt_path, report.to_table()).map_err(|e| Error::io(&txt_path, e))?;
    Ok(report)
}

/// Accuracy plus n-gram overlap between predicted and reference answers.
pub fn score_vqa(data: &VqaData, preds: &[PredictionRecord]) -> Result<ScoreReport> {
    let by_frame = data.by_frame();
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for p in preds {
        let records = by_frame
            .get(p.video_id.as_str())
            .and_then(|frames| frames.get(&p.frame_idx))
            .ok_or_else(|| {
                Error::Data(format!(
                    "prediction for unannotated frame {}/{}",
                    p.video_id, p.frame_idx
                ))
            })?;
        let truth = records.get(p.question_id).ok_or_else(|| {
            Error::Data(format!(
                "prediction for unknown question {} of {}/{}",
                p.question_id, p.video_id, p.frame_idx
            ))
        })?;
        total += 1;
        if truth.answer.trim().to_lowercase() == p.answer_text.trim().to_lowercase() {
            correct += 1;
        }
        cands.push(tokenize(&p.answer_text));
        refs.push(tokenize(&truth.answer));
    }
    if total == 0 {
        return Err(Error::Data("no predictions to score".into()));
    }
    let b = bleu_scores(&cands, &refs)?;
    Ok(ScoreReport {
        b1: Some(b.b1),
        b4: Some(b.b4),
        answer_accuracy: Some(correct as f64 / total as f64),
        ..ScoreReport::default()
    })
}

/// Render loss curves from the training log and metric bars from the
/// evaluation report, when present in `out`.
pub fn cmd_report(out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let log_path = out.join("train_log.csv");
    if log_path.exists() {
        let mut reader =
            csv::Reader::from_path(&log_path).map_err(|e| Error::Data(e.to_string()))?;
        let mut ce = Vec::new();
        let mut infonce = Vec::new();
        let mut total = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
            let get = |i: usize| rec[i].parse::<f64>().unwrap_or(f64::NAN);
            ce.push(get(1));
            infonce.push(get(2));
            total.push(get(3));
        }
        let path = out.join("loss_curve.png");
        crate::plot::line_chart(
            &[
                ("ce".to_string(), ce),
                ("infonce".to_string(), infonce),
                ("total".to_string(), total),
            ],
            &path,
        )?;
        written.push(path);
    }
    let metrics_path = out.join("metrics.json");
    if metrics_path.exists() {
        let text =
            std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let report: ScoreReport =
            serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
        let mut bars = Vec::new();
        for (name, v) in [
            ("acc_action", report.acc_action),
            ("acc_verb", report.acc_verb),
            ("acc_noun", report.acc_noun),
            ("b1", report.b1),
            ("b4", report.b4),
            ("answer_accuracy", report.answer_accuracy),
        ] {
            if let Some(v) = v {
                bars.push((name.to_string(), v));
            }
        }
        let path = out.join("metrics_bars.png");
        crate::plot::bar_chart(&bars, &path)?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(Error::Data(format!(
            "nothing to report in {}",
            out.display()
        )));
    }
    Ok(written)
}
