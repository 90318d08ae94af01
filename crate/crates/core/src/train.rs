//! The two training stages, the model bundle they operate on, checkpoints,
//! and the per-step metrics log.
//!
//! Stage 1 optimizes only the prompt bank against frozen encoders. Stage 2
//! optimizes only the image encoder and the classifier head against frozen
//! per-identity text features. Both stages check the freezing contract on
//! exit by comparing parameter digests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::autodiff::{Tape, Var};
use crate::config::{PairMode, RunConfig, Stage1Config, Stage2Config};
use crate::data::{pk_batches, stage1_batches, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, RankingProblem, SideLabels};
use crate::image::{erase, Image, ImageEncoder};
use crate::losses;
use crate::nn::normal_tensor;
use crate::optim::{adam_step, AdamState};
use crate::param::{hex_digest, ParamId, ParamStore};
use crate::rng::substream;
use crate::schedule::cosine_lr;
use crate::tensor::{read_blob, write_blob, Tensor};
use crate::text::{assemble_prompt, mask_prompt, EmbeddedPrompt, PromptBank, TextEncoder};

pub const HEAD_TAG: u16 = 4;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVLL";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_CONFIG_BYTES: u64 = 1 << 24;
const MAX_BLOBS: u64 = 1 << 20;

/// Linear identity classifier over image embeddings, without bias.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub store: ParamStore<f32>,
    weight: ParamId,
}

impl ClassifierHead {
    pub fn new(dim: usize, classes: usize, rng: &mut crate::rng::Rng) -> Self {
        let mut store = ParamStore::new(HEAD_TAG);
        let weight = store.add("head.weight", normal_tensor(&[dim, classes], 0.01, rng), true);
        Self { store, weight }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let w = tape.param(&self.store, self.weight)?;
        tape.matmul(x, w)
    }
}

/// Everything a run trains or freezes.
#[derive(Clone, Debug)]
pub struct Model {
    pub bank: PromptBank<f32>,
    pub text: TextEncoder<f32>,
    pub image: ImageEncoder<f32>,
    pub head: ClassifierHead,
    /// Frozen text feature per identity, computed when stage 1 finishes.
    pub id_text: Option<Tensor<f32>>,
}

impl Model {
    pub fn new(cfg: &RunConfig, identities: usize) -> Result<Self> {
        let m = &cfg.model;
        let text = TextEncoder::new(m.text.clone(), &mut substream(cfg.seed, "init.text", &[]))?;
        let image = ImageEncoder::new(m.image.clone(), &mut substream(cfg.seed, "init.image", &[]))?;
        let bank = PromptBank::new(
            identities,
            m.text.prompt_tokens,
            m.text.word_dim,
            &mut substream(cfg.seed, "init.bank", &[]),
        )?;
        let head = ClassifierHead::new(m.image.embed_dim, identities, &mut substream(cfg.seed, "init.head", &[]));
        Ok(Self { bank, text, image, head, id_text: None })
    }

    pub fn identities(&self) -> usize {
        self.bank.identities()
    }

    pub fn digests(&self) -> Digests {
        Digests {
            bank: hex_digest(&self.bank.store.digest()),
            text: hex_digest(&self.text.store.digest()),
            image: hex_digest(&self.image.store.digest()),
            head: hex_digest(&self.head.store.digest()),
        }
    }

    fn stores(&self) -> [&ParamStore<f32>; 4] {
        [&self.bank.store, &self.text.store, &self.image.store, &self.head.store]
    }

    fn stores_mut(&mut self) -> [&mut ParamStore<f32>; 4] {
        [&mut self.bank.store, &mut self.text.store, &mut self.image.store, &mut self.head.store]
    }

    /// Text feature of every identity from the current bank.
    pub fn compute_id_text_features(&self) -> Result<Tensor<f32>> {
        self.text.identity_features(&self.bank)
    }

    /// Unit image embeddings of `images`, as 64-bit rows.
    pub fn embed_images(&self, images: &[&Image], chunk: usize) -> Result<Tensor<f64>> {
        Ok(self.image.embed_all(images, chunk)?.cast())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Digests {
    pub bank: String,
    pub text: String,
    pub image: String,
    pub head: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Init = 0,
    One = 1,
    Two = 2,
}

impl Stage {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Stage::Init),
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Format(format!("unknown stage tag {v}"))),
        }
    }
}

/// Progress and optimizer state. Random draws are keyed by (seed, epoch,
/// batch), so the completed-epoch count is the whole rng state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    /// Epochs completed within `stage`.
    pub epoch: usize,
    /// Optimizer steps taken across both stages.
    pub step: u64,
    pub adam_bank: AdamState<f32>,
    pub adam_image: AdamState<f32>,
    pub adam_head: AdamState<f32>,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        Self {
            stage: Stage::Init,
            epoch: 0,
            step: 0,
            adam_bank: AdamState::for_store(&model.bank.store),
            adam_image: AdamState::for_store(&model.image.store),
            adam_head: AdamState::for_store(&model.head.store),
        }
    }
}

/// A model, its training state, and the config that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: RunConfig, identities: usize) -> Result<Self> {
        let model = Model::new(&config, identities)?;
        let state = TrainState::new(&model);
        Ok(Self { config, model, state })
    }

    /// Layout: magic, version (u32), config digest (32 bytes), config JSON
    /// (u64 length + bytes), stage (u8), epoch and step (u64), the three
    /// optimizer step counts (u64), identity count (u64), blob count (u64),
    /// then the named tensor blobs.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let json = self.config.canonical_json();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.config.digest())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(json.as_bytes())?;
        let s = &self.state;
        w.write_all(&[s.stage as u8])?;
        for v in [
            s.epoch as u64,
            s.step,
            s.adam_bank.step,
            s.adam_image.step,
            s.adam_head.step,
            self.model.identities() as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let blobs = self.blobs();
        w.write_all(&(blobs.len() as u64).to_le_bytes())?;
        for (name, t) in blobs {
            write_blob(w, &name, t)?;
        }
        Ok(())
    }

    fn blobs(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for store in self.model.stores() {
            out.extend(store.iter().map(|p| (p.name.clone(), &p.value)));
        }
        if let Some(t) = &self.model.id_text {
            out.push(("id_text".into(), t));
        }
        let s = &self.state;
        for (store, adam) in [
            (&self.model.bank.store, &s.adam_bank),
            (&self.model.image.store, &s.adam_image),
            (&self.model.head.store, &s.adam_head),
        ] {
            for ((p, m), v) in store.iter().zip(&adam.first).zip(&adam.second) {
                out.push((format!("adam.{}.m", p.name), m));
                out.push((format!("adam.{}.v", p.name), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let digest: [u8; 32] = read_array(r)?;
        let len = u64::from_le_bytes(read_array(r)?);
        if len > MAX_CONFIG_BYTES {
            return Err(Error::Format(format!("config section of {len} bytes")));
        }
        let mut json = vec![0u8; len as usize];
        read_exact(r, &mut json)?;
        let json = String::from_utf8(json).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config: RunConfig = serde_json::from_str(&json)?;
        if config.digest() != digest {
            return Err(Error::DigestMismatch { found: hex_digest(&digest), expected: config.digest_hex() });
        }
        let stage = Stage::from_u8(read_array::<_, 1>(r)?[0])?;
        let mut nums = [0u64; 6];
        for n in &mut nums {
            *n = u64::from_le_bytes(read_array(r)?);
        }
        let [epoch, step, bank_steps, image_steps, head_steps, identities] = nums;
        let count = u64::from_le_bytes(read_array(r)?);
        if count > MAX_BLOBS {
            return Err(Error::Format(format!("{count} tensors")));
        }
        let mut blobs = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = read_blob::<_, f32>(r)?;
            blobs.insert(name, t);
        }
        let mut model = Model::new(&config, identities as usize)?;
        for store in model.stores_mut() {
            store.load_values(&blobs)?;
        }
        model.id_text = blobs.get("id_text").cloned();
        let load_adam = |store: &ParamStore<f32>, steps: u64| -> Result<AdamState<f32>> {
            let mut st = AdamState::for_store(store);
            st.step = steps;
            for (i, p) in store.iter().enumerate() {
                for (suffix, slot) in [("m", &mut st.first[i]), ("v", &mut st.second[i])] {
                    let key = format!("adam.{}.{suffix}", p.name);
                    let t = blobs.get(&key).ok_or(Error::MissingTensor(key))?;
                    if t.shape() != p.value.shape() {
                        return Err(Error::Shape(format!("optimizer moment for {} has shape {:?}", p.name, t.shape())));
                    }
                    *slot = t.clone();
                }
            }
            Ok(st)
        };
        let state = TrainState {
            stage,
            epoch: epoch as usize,
            step,
            adam_bank: load_adam(&model.bank.store, bank_steps)?,
            adam_image: load_adam(&model.image.store, image_steps)?,
            adam_head: load_adam(&model.head.store, head_steps)?,
        };
        Ok(Self { config, model, state })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let ck = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

/// Plain-text metrics log: `#` header lines echoing the config, then one
/// `step<TAB>name<TAB>value` line per recorded value.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricsLog {
    text: String,
}

impl MetricsLog {
    pub fn new(config: &RunConfig, stage: Stage) -> Self {
        let mut text = String::new();
        writeln!(text, "# stage\t{}", stage as u8).unwrap();
        writeln!(text, "# config\t{}", config.canonical_json()).unwrap();
        writeln!(text, "# config_digest\t{}", config.digest_hex()).unwrap();
        Self { text }
    }

    /// Continues an existing log, e.g. when resuming.
    pub fn resume(text: String) -> Self {
        Self { text }
    }

    pub fn record(&mut self, step: u64, name: &str, value: f64) {
        writeln!(self.text, "{step}\t{name}\t{value}").unwrap();
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn into_string(self) -> String {
        self.text
    }

    /// Every recorded value under `name`, in order.
    pub fn values(&self, name: &str) -> Vec<f64> {
        self.text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .filter_map(|l| {
                let mut it = l.split('\t');
                let (_, n, v) = (it.next()?, it.next()?, it.next()?);
                (n == name).then(|| v.parse().ok()).flatten()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub epochs_run: usize,
    pub entry: Digests,
    pub exit: Digests,
    pub last_total: f64,
}

fn loss_value(tape: &Tape<f32>, v: Var, name: &str, step: u64) -> Result<f64> {
    let x = tape.value(v).item() as f64;
    if !x.is_finite() {
        return Err(Error::Training(format!("{name} is {x} at step {step}")));
    }
    Ok(x)
}

fn check_frozen(what: &str, before: &str, after: &str) -> Result<()> {
    if before != after {
        return Err(Error::FrozenChanged(format!("{what} digest {before} became {after}")));
    }
    Ok(())
}

/// Text-image agreement on the train split: the mean similarity of each
/// image to its own identity's text feature, the mean margin of that over
/// the average similarity to other identities, and the fraction of images
/// whose most similar text feature is their own.
pub fn text_alignment(image: &Tensor<f32>, labels: &[usize], text: &Tensor<f32>) -> (f64, f64, f64) {
    let n = text.rows();
    let (mut pos, mut gap, mut top1) = (0.0, 0.0, 0usize);
    for (r, &y) in labels.iter().enumerate() {
        let sims: Vec<f64> = (0..n)
            .map(|k| image.row(r).iter().zip(text.row(k)).map(|(a, b)| (a * b) as f64).sum())
            .collect();
        pos += sims[y];
        if n > 1 {
            gap += sims[y] - (sims.iter().sum::<f64>() - sims[y]) / (n - 1) as f64;
        }
        let best = (0..n).fold(0, |b, k| if sims[k] > sims[b] { k } else { b });
        top1 += usize::from(best == y);
    }
    let m = labels.len() as f64;
    (pos / m, gap / m, top1 as f64 / m)
}

/// Runs stage-1 epochs `ck.state.epoch..` (up to `stop_after` total epochs
/// when given). Only the prompt bank changes; when the last epoch finishes
/// the per-identity text features are computed and stored.
pub fn run_stage1(ck: &mut Checkpoint, data: &Dataset, log: &mut MetricsLog, stop_after: Option<usize>) -> Result<StageReport> {
    let cfg: Stage1Config = ck.config.stage1.clone();
    let seed = ck.config.seed;
    let chunk = ck.config.eval.chunk;
    match ck.state.stage {
        Stage::Init => {
            ck.state.stage = Stage::One;
            ck.state.epoch = 0;
        }
        Stage::One => {}
        Stage::Two => return Err(Error::Training("checkpoint is already past stage 1".into())),
    }
    let model = &mut ck.model;
    if model.identities() != data.manifest.identities {
        return Err(Error::Dataset(format!(
            "model has {} identities, dataset {}",
            model.identities(),
            data.manifest.identities
        )));
    }
    model.image.set_trainable(false);
    model.text.set_trainable(false);
    model.bank.set_trainable(true);
    let entry = model.digests();

    let train = data.manifest.indices(Split::Train);
    let train_pos: BTreeMap<usize, usize> = train.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let labels: Vec<usize> = train.iter().map(|&i| data.manifest.samples[i].id as usize).collect();
    let train_images: Vec<&Image> = train.iter().map(|&i| &data.images[i]).collect();
    let feats = model.image.embed_all(&train_images, chunk)?;
    let prompts: Vec<EmbeddedPrompt> = (0..model.identities())
        .map(|i| assemble_prompt(i, &model.bank, &model.text.vocab, model.text.cfg.template))
        .collect::<Result<_>>()?;

    let end = stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut last_total = f64::NAN;
    let mut epochs_run = 0;
    while ck.state.epoch < end {
        let epoch = ck.state.epoch;
        let lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)?;
        log.record(ck.state.step, "stage1.lr", lr);
        for (b, batch) in stage1_batches(&data.manifest, cfg.batch_size, seed, epoch as u64)?.iter().enumerate() {
            let rows: Vec<usize> = batch.iter().map(|i| train_pos[i]).collect();
            let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let mut ids = y.clone();
            ids.sort_unstable();
            ids.dedup();
            let slot_of: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(s, &id)| (id, s)).collect();

            let mut tape = Tape::new();
            let img = tape.constant(feats.select_rows(&rows))?;
            let id_prompts: Vec<EmbeddedPrompt> = ids.iter().map(|&i| prompts[i].clone()).collect();
            let text_ids = model.text.encode_batch(&mut tape, &model.bank, &id_prompts)?;
            let gather: Vec<usize> = y.iter().map(|id| slot_of[id]).collect();
            let text = tape.gather_rows(text_ids, &gather)?;
            let t2i = losses::t2i(&mut tape, img, text, &y)?;
            let i2t = losses::i2t(&mut tape, img, text, &y)?;
            let mut total = tape.add(t2i, i2t)?;
            let mut lss = None;
            if cfg.lambda_lss > 0.0 {
                let mut rng = substream(seed, "stage1.mask", &[epoch as u64, b as u64]);
                let mut views = Vec::with_capacity(2 * ids.len());
                for &i in &ids {
                    views.push(mask_prompt(&prompts[i], cfg.alpha, &mut rng)?);
                    views.push(mask_prompt(&prompts[i], cfg.alpha, &mut rng)?);
                }
                let z = model.text.encode_batch(&mut tape, &model.bank, &views)?;
                let l = losses::ntxent(&mut tape, z, cfg.tau)?;
                let weighted = tape.scale(l, cfg.lambda_lss)?;
                total = tape.add(total, weighted)?;
                lss = Some(l);
            }
            let step = ck.state.step;
            log.record(step, "stage1.t2i", loss_value(&tape, t2i, "t2i", step)?);
            log.record(step, "stage1.i2t", loss_value(&tape, i2t, "i2t", step)?);
            if let Some(l) = lss {
                log.record(step, "stage1.lss", loss_value(&tape, l, "lss", step)?);
            }
            last_total = loss_value(&tape, total, "stage-1 total", step)?;
            log.record(step, "stage1.total", last_total);

            let grads = tape.backward(total)?;
            model.bank.store.zero_grad();
            tape.accumulate(&grads, &mut model.bank.store);
            adam_step(&mut model.bank.store, &mut ck.state.adam_bank, lr, &cfg.adam)?;
            ck.state.step += 1;
        }
        let text = model.compute_id_text_features()?;
        let (pos, gap, top1) = text_alignment(&feats, &labels, &text);
        log::info!("stage 1 epoch {}/{}: loss {last_total:.4}, text top-1 {top1:.3}", epoch + 1, cfg.epochs);
        log.record(ck.state.step, "stage1.pos_sim", pos);
        log.record(ck.state.step, "stage1.sim_gap", gap);
        log.record(ck.state.step, "stage1.text_top1", top1);
        ck.state.epoch += 1;
        epochs_run += 1;
    }
    if ck.state.epoch == cfg.epochs {
        model.id_text = Some(model.compute_id_text_features()?);
    }
    let exit = model.digests();
    check_frozen("image encoder", &entry.image, &exit.image)?;
    check_frozen("text encoder", &entry.text, &exit.text)?;
    Ok(StageReport { epochs_run, entry, exit, last_total })
}

/// Requires `ck` to have been produced under exactly `config`.
pub fn check_resume(ck: &Checkpoint, config: &RunConfig) -> Result<()> {
    if ck.config.digest() != config.digest() {
        return Err(Error::DigestMismatch { found: ck.config.digest_hex(), expected: config.digest_hex() });
    }
    Ok(())
}

/// Hands a stage-1 checkpoint to a stage-2 run under `config`. Everything
/// stage 1 depended on must match; the stage-2 section may differ.
pub fn adopt_config(ck: &mut Checkpoint, config: &RunConfig) -> Result<()> {
    if ck.config.stage1_digest() != config.stage1_digest() {
        return Err(Error::DigestMismatch {
            found: hex_digest(&ck.config.stage1_digest()),
            expected: hex_digest(&config.stage1_digest()),
        });
    }
    ck.config = config.clone();
    Ok(())
}

/// Moves a finished stage-1 checkpoint into stage 2.
fn enter_stage2(ck: &mut Checkpoint) -> Result<()> {
    match ck.state.stage {
        Stage::Init => Err(Error::Training("stage 2 needs a stage-1 checkpoint".into())),
        Stage::One if ck.state.epoch < ck.config.stage1.epochs || ck.model.id_text.is_none() => Err(Error::Training(format!(
            "stage 1 finished only {} of {} epochs",
            ck.state.epoch, ck.config.stage1.epochs
        ))),
        Stage::One => {
            ck.state.stage = Stage::Two;
            ck.state.epoch = 0;
            Ok(())
        }
        Stage::Two => Ok(()),
    }
}

/// Runs stage-2 epochs `ck.state.epoch..` (up to `stop_after` total epochs
/// when given). Only the image encoder and classifier head change.
pub fn run_stage2(ck: &mut Checkpoint, data: &Dataset, log: &mut MetricsLog, stop_after: Option<usize>) -> Result<StageReport> {
    enter_stage2(ck)?;
    let cfg: Stage2Config = ck.config.stage2.clone();
    let seed = ck.config.seed;
    let model = &mut ck.model;
    let id_text = model.id_text.clone().ok_or_else(|| Error::Training("identity text features missing".into()))?;
    if id_text.rows() != data.manifest.identities {
        return Err(Error::Dataset(format!(
            "{} identity text features for {} identities",
            id_text.rows(),
            data.manifest.identities
        )));
    }
    model.bank.set_trainable(false);
    model.text.set_trainable(false);
    model.image.set_trainable(true);
    model.head.store.set_trainable(true);
    let entry = model.digests();
    let fill = data.train_mean_pixel();

    let end = stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut last_total = f64::NAN;
    let mut epochs_run = 0;
    while ck.state.epoch < end {
        let epoch = ck.state.epoch;
        let lr = cfg.schedule.rate(epoch)?;
        log.record(ck.state.step, "stage2.lr", lr);
        for (b, batch) in pk_batches(&data.manifest, cfg.p, cfg.k, seed, epoch as u64)?.iter().enumerate() {
            let y: Vec<usize> = batch.iter().map(|&i| data.manifest.samples[i].id as usize).collect();
            let mut images: Vec<Image> = Vec::new();
            if cfg.lambda_vss > 0.0 {
                let mut rng = substream(seed, "stage2.views", &[epoch as u64, b as u64]);
                for group in batch.chunks(cfg.k) {
                    let (first, second) = match (cfg.pairs, group.len()) {
                        (PairMode::Identity, n) if n >= 2 => {
                            let pick = rand::seq::index::sample(&mut rng, n, 2);
                            (group[pick.index(0)], group[pick.index(1)])
                        }
                        _ => {
                            let i = group[rand::Rng::gen_range(&mut rng, 0..group.len())];
                            (i, i)
                        }
                    };
                    images.push(erase(&data.images[first], cfg.beta, fill, &mut rng)?.image);
                    images.push(erase(&data.images[second], cfg.beta, fill, &mut rng)?.image);
                }
            }
            let mut all: Vec<&Image> = batch.iter().map(|&i| &data.images[i]).collect();
            all.extend(images.iter());

            let mut tape = Tape::new();
            let emb = model.image.encode_batch(&mut tape, &all)?;
            let n = batch.len();
            let feats = if images.is_empty() {
                emb
            } else {
                tape.gather_rows(emb, &(0..n).collect::<Vec<_>>())?
            };
            let text = tape.constant(id_text.clone())?;
            let i2tce = losses::i2tce(&mut tape, feats, text, &y, cfg.smoothing)?;
            let logits = model.head.forward(&mut tape, feats)?;
            let id = losses::smoothed_ce(&mut tape, logits, &y, cfg.smoothing)?;
            let tri = losses::triplet(&mut tape, feats, &y, cfg.margin)?;
            let mut total = tape.add(i2tce, id)?;
            total = tape.add(total, tri)?;
            let mut vss = None;
            if !images.is_empty() {
                let z = tape.gather_rows(emb, &(n..n + images.len()).collect::<Vec<_>>())?;
                let l = losses::ntxent(&mut tape, z, cfg.tau)?;
                let weighted = tape.scale(l, cfg.lambda_vss)?;
                total = tape.add(total, weighted)?;
                vss = Some(l);
            }
            let step = ck.state.step;
            log.record(step, "stage2.i2tce", loss_value(&tape, i2tce, "i2tce", step)?);
            log.record(step, "stage2.id", loss_value(&tape, id, "id", step)?);
            log.record(step, "stage2.tri", loss_value(&tape, tri, "tri", step)?);
            if let Some(l) = vss {
                log.record(step, "stage2.vss", loss_value(&tape, l, "vss", step)?);
            }
            last_total = loss_value(&tape, total, "stage-2 total", step)?;
            log.record(step, "stage2.total", last_total);

            let grads = tape.backward(total)?;
            model.image.store.zero_grad();
            model.head.store.zero_grad();
            tape.accumulate(&grads, &mut model.image.store);
            tape.accumulate(&grads, &mut model.head.store);
            adam_step(&mut model.image.store, &mut ck.state.adam_image, lr, &cfg.adam)?;
            adam_step(&mut model.head.store, &mut ck.state.adam_head, lr, &cfg.adam)?;
            ck.state.step += 1;
        }
        log::info!("stage 2 epoch {}/{}: loss {last_total:.4}", epoch + 1, cfg.epochs);
        ck.state.epoch += 1;
        epochs_run += 1;
    }
    let exit = model.digests();
    check_frozen("prompt bank", &entry.bank, &exit.bank)?;
    check_frozen("text encoder", &entry.text, &exit.text)?;
    Ok(StageReport { epochs_run, entry, exit, last_total })
}

/// Embeds one split with its evaluation labels.
pub fn embed_split(model: &Model, data: &Dataset, split: Split, chunk: usize) -> Result<(Tensor<f64>, SideLabels)> {
    let picked: Vec<usize> = data.manifest.indices(split);
    let images: Vec<&Image> = picked.iter().map(|&i| &data.images[i]).collect();
    if images.is_empty() {
        return Err(Error::Dataset(format!("{split:?} split is empty")));
    }
    let emb = model.embed_images(&images, chunk)?;
    let ids = picked.iter().map(|&i| data.manifest.samples[i].id as i64).collect();
    let cams = picked.iter().map(|&i| data.manifest.samples[i].cam).collect();
    Ok((emb, SideLabels::new(ids, cams)?))
}

/// Query-vs-gallery retrieval metrics for the current image encoder.
pub fn evaluate_model(model: &Model, data: &Dataset, chunk: usize) -> Result<EvalReport> {
    let (q, ql) = embed_split(model, data, Split::Query, chunk)?;
    let (g, gl) = embed_split(model, data, Split::Gallery, chunk)?;
    evaluate(&RankingProblem::new(q, ql, g, gl)?)
}

/// Result of a full two-stage run.
#[derive(Debug)]
pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    pub stage1_log: MetricsLog,
    pub stage2_log: MetricsLog,
    pub stage1: StageReport,
    pub stage2: StageReport,
}

/// Fresh model, stage 1, then stage 2.
pub fn run_both_stages(config: &RunConfig, data: &Dataset) -> Result<RunOutcome> {
    let mut ck = Checkpoint::new(config.clone(), data.manifest.identities)?;
    let mut stage1_log = MetricsLog::new(config, Stage::One);
    let stage1 = run_stage1(&mut ck, data, &mut stage1_log, None)?;
    let mut stage2_log = MetricsLog::new(config, Stage::Two);
    let stage2 = run_stage2(&mut ck, data, &mut stage2_log, None)?;
    Ok(RunOutcome { checkpoint: ck, stage1_log, stage2_log, stage1, stage2 })
}

/// Generates the synthetic dataset named by `config`, or opens its directory.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match (config.synthetic_spec(), &config.dataset.dir) {
        (Some(spec), _) => crate::data::generate_synthetic(&spec),
        (None, Some(dir)) => Dataset::open(dir, config.model.image.height, config.model.image.width),
        (None, None) => Err(Error::Config("no dataset source".into())),
    }
}
