//! Training loop: normal-pattern steps on cached encoder features and
//! residual-learning steps on freshly synthesized anomalies.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig, Schedule};
use crate::dataset::DatasetIndex;
use crate::encoder::FeatureExtractor;
use crate::error::{Error, IoContext, Result};
use crate::fewshot::{augment, select_shots};
use crate::imaging::{ImageTensor, Mask};
use crate::model::{Encoded, Model};
use crate::objectives::{npm_loss, soft_mining_loss, LossBundle};
use crate::optim::StableAdamW;
use crate::params::Gradients;
use crate::residual::dice_loss_graph;
use crate::synthesis::{embed_real_anomaly, PseudoAnomalySample, TextureSource};

const BATCH_STREAM: u64 = 1;
const SYNTH_STREAM: u64 = 2;

/// One row of the training log. Empty fields belong to the step kind that
/// did not run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_sm_cos")]
    pub sm_cos: Option<f64>,
    #[serde(rename = "L_sm_mse")]
    pub sm_mse: Option<f64>,
    #[serde(rename = "L_sc")]
    pub sc: Option<f64>,
    #[serde(rename = "L_npm")]
    pub npm: Option<f64>,
    #[serde(rename = "L_seg")]
    pub seg: Option<f64>,
}

pub fn write_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in log {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().at(path)
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

/// Images the model trains on, after mode-specific selection.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub categories: Vec<String>,
    pub images: Vec<ImageTensor>,
    /// Real anomalies with masks, embedded into normals during residual
    /// learning.
    pub pool: Vec<(ImageTensor, Mask)>,
}

/// Categories and splits a run trains on. Semi-supervised runs move their
/// anomaly pool out of the test split here; evaluation repeats the split.
pub fn training_index(cfg: &RunConfig, index: &DatasetIndex) -> Result<DatasetIndex> {
    let idx = index.select(&cfg.categories)?;
    if cfg.mode == Mode::SemiSupervised {
        idx.with_anomaly_pool(cfg.semi_supervised.anomalies, cfg.seed)
    } else {
        Ok(idx)
    }
}

impl TrainingSet {
    pub fn build(cfg: &RunConfig, index: &DatasetIndex) -> Result<Self> {
        let (resize, crop) = (cfg.resize, cfg.crop);
        let mut images = Vec::new();
        let mut pool = Vec::new();
        for (ci, cat) in index.categories.iter().enumerate() {
            if cfg.mode == Mode::FewShot {
                let seed = cfg.seed.wrapping_add(ci as u64);
                let shots = select_shots(&cat.train, cfg.few_shot.shots, seed)?;
                let loaded = shots.iter().map(|s| s.load_image(resize, crop)).collect::<Result<Vec<_>>>()?;
                let views = augment(&loaded, cfg.few_shot.expansion, cfg.few_shot.max_shift, seed);
                images.extend(views.into_iter().map(|(img, _)| img));
            } else {
                for s in &cat.train {
                    images.push(s.load_image(resize, crop)?);
                }
            }
            for s in &cat.pool {
                pool.push((s.load_image(resize, crop)?, s.load_mask(resize, crop)?));
            }
        }
        if images.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        Ok(Self { categories: index.categories.iter().map(|c| c.name.clone()).collect(), images, pool })
    }
}

/// Learning rate at `step` under linear warmup.
pub fn learning_rate(cfg: &RunConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        cfg.optimizer.lr * (step + 1) as f64 / cfg.warmup_steps as f64
    } else {
        cfg.optimizer.lr
    }
}

pub struct Trainer<'a> {
    pub cfg: RunConfig,
    pub model: Model,
    pub log: Vec<StepRecord>,
    extractor: &'a dyn FeatureExtractor,
    set: TrainingSet,
    encoded: Vec<Encoded>,
    optimizer: StableAdamW,
    textures: TextureSource,
    batch_rng: ChaCha8Rng,
    synth_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &RunConfig, set: TrainingSet, extractor: &'a dyn FeatureExtractor) -> Result<Self> {
        cfg.validate()?;
        if cfg.residual.enabled && !extractor.supports_synthetic() {
            return Err(Error::Config(format!(
                "residual learning needs features of synthesized images, which `{}` cannot produce",
                extractor.tag()
            )));
        }
        let encoded = set
            .images
            .iter()
            .map(|img| Encoded::from_stack(&extractor.extract(img)?, &cfg.groups))
            .collect::<Result<Vec<_>>>()?;
        let model = Model::init(cfg, extractor.dim(), extractor.num_layers())?;
        let textures = match &cfg.residual.texture_dir {
            Some(dir) => TextureSource::from_dir(dir)?,
            None => TextureSource::Procedural,
        };
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(s);
            r
        };
        Ok(Self {
            cfg: cfg.clone(),
            model,
            log: Vec::new(),
            extractor,
            order: Vec::new(),
            cursor: 0,
            set,
            encoded,
            optimizer: StableAdamW::new(cfg.optimizer.clone()),
            textures,
            batch_rng: stream(BATCH_STREAM),
            synth_rng: stream(SYNTH_STREAM),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.total_steps(self.set.images.len())
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size.min(self.encoded.len()) {
            if self.cursor == self.order.len() {
                self.order = (0..self.encoded.len()).collect();
                self.order.shuffle(&mut self.batch_rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    fn apply(&mut self, step: usize, loss: f64, grads: &Gradients, ids: &[crate::params::ParamId]) -> Result<()> {
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}, gradients finite: {}", grads.all_finite()),
            });
        }
        let lr = learning_rate(&self.cfg, step);
        self.optimizer.step(&mut self.model.store, grads, ids, lr);
        Ok(())
    }

    /// One update of everything except the head on a batch of normals.
    pub fn npm_step(&mut self, step: usize) -> Result<LossBundle> {
        let batch = self.next_batch();
        let mut g = Graph::new();
        let mut enc = Vec::with_capacity(batch.len());
        let mut dec = Vec::with_capacity(batch.len());
        let mut sc: Option<Var> = None;
        for &i in &batch {
            let fw = self.model.forward(&mut g, &self.encoded[i])?;
            enc.push(self.encoded[i].groups.clone());
            dec.push(fw.decoded);
            sc = Some(match sc {
                Some(acc) => g.add(acc, fw.coherence.loss),
                None => fw.coherence.loss,
            });
        }
        let sc = sc.expect("nonempty batch");
        let sc = g.scale(sc, 1.0 / batch.len() as f64);
        let sm = soft_mining_loss(&mut g, &enc, &dec, self.cfg.gamma)?;
        let npm = npm_loss(&mut g, sm.total, sc, self.cfg.lambda);
        let bundle = LossBundle::from_graph(&g, &sm, sc, npm, self.cfg.lambda);
        let grads = g.backward(npm).params(self.model.store.len());
        let ids = self.model.normal_ids();
        self.apply(step, bundle.npm, &grads, &ids)?;
        Ok(bundle)
    }

    /// A seeded anomalous training image built from `normal`.
    fn anomaly(&mut self, normal: &ImageTensor) -> Result<PseudoAnomalySample> {
        let seed: u64 = self.synth_rng.random();
        if !self.set.pool.is_empty() && self.synth_rng.random::<bool>() {
            let (donor, mask) = &self.set.pool[self.synth_rng.random_range(0..self.set.pool.len())];
            embed_real_anomaly(normal, donor, mask, seed)
        } else {
            self.cfg.residual.synthesis.generate(normal, &self.textures, seed)
        }
    }

    /// A residual-learning batch: `anomaly_fraction` of it anomalous, the
    /// rest unchanged normals with empty masks.
    pub fn seg_batch(&mut self) -> Result<Vec<(Encoded, Mask)>> {
        let b = self.cfg.batch_size;
        let anomalous = (b as f64 * self.cfg.residual.anomaly_fraction).round() as usize;
        let mut batch = Vec::with_capacity(b);
        for k in 0..b {
            let i = self.synth_rng.random_range(0..self.set.images.len());
            if k < anomalous {
                let normal = self.set.images[i].clone();
                let s = self.anomaly(&normal)?;
                batch.push((Encoded::from_stack(&self.extractor.extract(&s.image)?, &self.cfg.groups)?, s.mask));
            } else {
                batch.push((self.encoded[i].clone(), Mask::empty(self.cfg.crop, self.cfg.crop)));
            }
        }
        Ok(batch)
    }

    /// One Dice update of the head, or of every parameter when the
    /// stop-gradient is disabled.
    pub fn seg_update(&mut self, step: usize, batch: &[(Encoded, Mask)]) -> Result<f64> {
        let out = (self.cfg.crop, self.cfg.crop);
        let mut g = Graph::new();
        let mut preds = Vec::with_capacity(batch.len());
        for (enc, _) in batch {
            let fw = self.model.forward(&mut g, enc)?;
            preds.push(self.model.segment(&mut g, enc, &fw.decoded, self.cfg.residual.stop_gradient, out)?);
        }
        let masks: Vec<Mask> = batch.iter().map(|(_, m)| m.clone()).collect();
        let loss = dice_loss_graph(&mut g, &preds, &masks)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss).params(self.model.store.len());
        let ids = if self.cfg.residual.stop_gradient { self.model.head_ids() } else { self.model.all_ids() };
        self.apply(step, value, &grads, &ids)?;
        Ok(value)
    }

    pub fn seg_step(&mut self, step: usize) -> Result<f64> {
        let batch = self.seg_batch()?;
        self.seg_update(step, &batch)
    }

    /// Runs the whole schedule, reporting each logged step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        let total = self.total_steps();
        let rl = self.cfg.residual.enabled;
        let mut record = |t: &mut Self, r: StepRecord| {
            on_step(&r);
            t.log.push(r);
        };
        let npm_record = |step, l: LossBundle| StepRecord {
            step,
            sm_cos: Some(l.sm_cos),
            sm_mse: Some(l.sm_mse),
            sc: Some(l.sc),
            npm: Some(l.npm),
            seg: None,
        };
        match self.cfg.residual.schedule {
            Schedule::Interleaved => {
                for step in 0..total {
                    let l = self.npm_step(step)?;
                    let mut r = npm_record(step, l);
                    if rl {
                        r.seg = Some(self.seg_step(step)?);
                    }
                    record(self, r);
                }
            }
            Schedule::TwoPhase => {
                for step in 0..total {
                    let l = self.npm_step(step)?;
                    record(self, npm_record(step, l));
                }
                if rl {
                    for step in 0..total {
                        let seg = self.seg_step(step)?;
                        record(self, StepRecord { step: total + step, seg: Some(seg), ..Default::default() });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.cfg, &self.model, self.extractor, &self.set.categories, self.log.len(), self.log.clone())
    }
}

/// Trains on `index` (already narrowed by [`training_index`]) and returns
/// the final checkpoint.
pub fn train(
    cfg: &RunConfig,
    index: &DatasetIndex,
    extractor: &dyn FeatureExtractor,
    on_step: impl FnMut(&StepRecord),
) -> Result<Checkpoint> {
    let set = TrainingSet::build(cfg, index)?;
    let mut trainer = Trainer::new(cfg, set, extractor)?;
    trainer.run(on_step)?;
    Ok(trainer.checkpoint())
}

/// Writes `checkpoint.json`, `train_log.csv` and `config.toml` under `out`.
pub fn write_run(out: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::create_dir_all(out).at(out)?;
    checkpoint.save(&out.join("checkpoint.json"))?;
    write_log(&out.join("train_log.csv"), &checkpoint.losses)?;
    checkpoint.config.save(&out.join("config.toml"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SynthSpec};

    fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::desk();
        c.resize = 28;
        c.crop = 28;
        c.batch_size = 2;
        c.steps = Some(3);
        c
    }

    fn tiny_data() -> (tempfile::TempDir, DatasetIndex) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { size: 28, train: 4, test_good: 2, test_defect: 2, categories: vec!["tiles".into()], ..SynthSpec::default() };
        generate(dir.path(), &spec).unwrap();
        let idx = crate::dataset::ingest_dataset(dir.path()).unwrap();
        (dir, idx)
    }

    #[test]
    fn log_csv_round_trip_with_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let log = vec![
            StepRecord { step: 0, sm_cos: Some(0.5), sm_mse: Some(0.25), sc: Some(0.1), npm: Some(0.77), seg: None },
            StepRecord { step: 1, seg: Some(0.9), ..Default::default() },
        ];
        write_log(&p, &log).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,L_sm_cos,L_sm_mse,L_sc,L_npm,L_seg\n"), "{text}");
        assert!(text.contains("0,0.5,0.25,0.1,0.77,\n"));
        assert_eq!(read_log(&p).unwrap(), log);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let c = RunConfig { warmup_steps: 4, ..RunConfig::desk() };
        let lr = c.optimizer.lr;
        assert_eq!(learning_rate(&c, 0), lr / 4.0);
        assert_eq!(learning_rate(&c, 3), lr);
        assert_eq!(learning_rate(&c, 100), lr);
    }

    #[test]
    fn disabled_residual_learning_leaves_head_untouched() {
        let (_d, idx) = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.residual.enabled = false;
        let ex = cfg.extractor.build().unwrap();
        let set = TrainingSet::build(&cfg, &idx).unwrap();
        let mut t = Trainer::new(&cfg, set, ex.as_ref()).unwrap();
        let head = t.model.store.checksum_of(&t.model.head_ids());
        let normal = t.model.store.checksum_of(&t.model.normal_ids());
        t.run(|_| {}).unwrap();
        assert_eq!(t.model.store.checksum_of(&t.model.head_ids()), head);
        assert_ne!(t.model.store.checksum_of(&t.model.normal_ids()), normal);
        assert!(t.log.iter().all(|r| r.seg.is_none() && r.npm.is_some()));
    }

    #[test]
    fn seg_step_with_stop_gradient_moves_only_the_head() {
        let (_d, idx) = tiny_data();
        let cfg = tiny_cfg();
        let ex = cfg.extractor.build().unwrap();
        let set = TrainingSet::build(&cfg, &idx).unwrap();
        let mut t = Trainer::new(&cfg, set, ex.as_ref()).unwrap();
        let head = t.model.store.checksum_of(&t.model.head_ids());
        let normal = t.model.store.checksum_of(&t.model.normal_ids());
        t.seg_step(0).unwrap();
        assert_eq!(t.model.store.checksum_of(&t.model.normal_ids()), normal);
        assert_ne!(t.model.store.checksum_of(&t.model.head_ids()), head);
    }

    #[test]
    fn two_phase_logs_both_phases() {
        let (_d, idx) = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.residual.schedule = Schedule::TwoPhase;
        cfg.steps = Some(2);
        let ex = cfg.extractor.build().unwrap();
        let ck = train(&cfg, &idx, ex.as_ref(), |_| {}).unwrap();
        let kinds: Vec<_> = ck.losses.iter().map(|r| (r.step, r.npm.is_some(), r.seg.is_some())).collect();
        assert_eq!(kinds, vec![(0, true, false), (1, true, false), (2, false, true), (3, false, true)]);
    }

    #[test]
    fn few_shot_set_size() {
        let (_d, idx) = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::FewShot;
        cfg.few_shot.shots = 2;
        cfg.few_shot.expansion = 3;
        assert_eq!(TrainingSet::build(&cfg, &idx).unwrap().images.len(), 6);
        cfg.few_shot.shots = 5;
        assert!(TrainingSet::build(&cfg, &idx).is_err());
    }

    #[test]
    fn semi_supervised_pool_is_loaded() {
        let (_d, idx) = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::SemiSupervised;
        cfg.semi_supervised.anomalies = 1;
        let tidx = training_index(&cfg, &idx).unwrap();
        let set = TrainingSet::build(&cfg, &tidx).unwrap();
        assert_eq!(set.pool.len(), 1);
        assert!(!set.pool[0].1.is_empty());
        let ex = cfg.extractor.build().unwrap();
        let mut t = Trainer::new(&cfg, set, ex.as_ref()).unwrap();
        t.seg_step(0).unwrap();
    }
}
