//! Optimization loop, periodic checkpoints and checkpoint averaging.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::datamodel::{Dataset, Split, Vocabulary};
use crate::decoder::{example_loss, PreparedExample};
use crate::error::{io_err, Error, Result};
use crate::model::Model;
use crate::tensor::{
    adam_step, clip_grad_norm, read_checkpoint, write_checkpoint, AdamConfig, Checkpoint, Graph, Tensor,
};

/// Examples pooled together before sorting by size into batches.
const BUCKET_POOL_BATCHES: usize = 50;

/// Stream ids for the random sources of a run; weight init uses stream 0.
const STREAM_ORDER: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initial weights for a run; depends only on the config and seed.
pub fn init_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Model> {
    Model::new(&cfg.model, vocab, cfg.train.seed)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Periodic checkpoints in update order, starting with the initial weights.
    pub checkpoints: Vec<PathBuf>,
    pub loss_curve: PathBuf,
    pub losses: Vec<f64>,
}

/// Batches of one epoch: shuffled, then sorted by record count inside pools
/// of several batches so batch members have similar sizes, then the batch
/// order is shuffled again.
pub fn epoch_batches(sizes: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks(batch_size * BUCKET_POOL_BATCHES) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| sizes[i]);
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn checkpoint_path(dir: &Path, update: usize) -> PathBuf {
    dir.join(format!("ckpt_{update}.bin"))
}

/// Runs `cfg.train.total_updates` Adam updates, writing `ckpt_<u>.bin` every
/// `checkpoint_every` updates (and for the initial weights), the per-update
/// `loss.csv`, and `final.bin` holding the average of the last `average_last_k`
/// checkpoints. `progress` sees `(update, lr, loss)` after each update.
pub fn train(
    data: &Dataset,
    vocab: &Vocabulary,
    cfg: &RunConfig,
    out_dir: &Path,
    mut progress: Option<&mut dyn FnMut(usize, f64, f64)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.split != Split::Train {
        return Err(Error::InvalidData(format!("training needs the train split, got {}", data.split)));
    }
    if data.examples.is_empty() {
        return Err(Error::InvalidData("training split is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let tc = &cfg.train;
    let digest = cfg.model_digest();
    let prepared = data.examples.iter().map(|e| PreparedExample::new(e, vocab)).collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = prepared.iter().map(|p| p.structure.layout.num_records()).collect();

    let mut model = init_model(cfg, vocab)?;
    let mut order_rng = rng_stream(tc.seed, STREAM_ORDER);
    let mut dropout_rng = rng_stream(tc.seed, STREAM_DROPOUT);

    let curve_path = out_dir.join("loss.csv");
    let mut curve = BufWriter::new(fs::File::create(&curve_path).map_err(io_err(&curve_path))?);
    writeln!(curve, "update,lr,loss").map_err(io_err(&curve_path))?;

    let mut checkpoints = vec![checkpoint_path(out_dir, 0)];
    write_checkpoint(&checkpoints[0], &model.params, digest, true)?;

    let mut losses = Vec::with_capacity(tc.total_updates);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for u in 0..tc.total_updates {
        if queue.is_empty() {
            queue = epoch_batches(&sizes, tc.batch_size, &mut order_rng);
            queue.reverse();
        }
        let batch = queue.pop().expect("refilled above");
        let lr = tc.lr_at(u);
        let mut batch_loss = 0.0;
        model.params.zero_grads();
        for &i in &batch {
            let grads = {
                let mut g = Graph::training(&model.params, &mut dropout_rng);
                let loss = example_loss(&mut g, &model, &prepared[i])?;
                let loss = g.scale(loss, 1.0 / batch.len() as f64);
                batch_loss += g.value(loss).data()[0];
                g.backward(loss)?
            };
            model.params.accumulate(&grads);
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at update {u} is {batch_loss}")));
        }
        if tc.grad_clip > 0.0 {
            clip_grad_norm(&mut model.params, tc.grad_clip);
        }
        adam_step(&mut model.params, lr, AdamConfig::default())?;
        writeln!(curve, "{u},{lr},{batch_loss}").map_err(io_err(&curve_path))?;
        losses.push(batch_loss);
        if let Some(cb) = progress.as_mut() {
            cb(u, lr, batch_loss);
        }
        if (u + 1) % tc.checkpoint_every == 0 {
            let path = checkpoint_path(out_dir, u + 1);
            write_checkpoint(&path, &model.params, digest, true)?;
            checkpoints.push(path);
        }
    }
    curve.flush().map_err(io_err(&curve_path))?;

    let k = tc.average_last_k.min(checkpoints.len());
    let averaged = average_checkpoints(&checkpoints[checkpoints.len() - k..])?;
    let final_checkpoint = out_dir.join("final.bin");
    write_checkpoint(&final_checkpoint, &averaged.params, digest, false)?;
    Ok(TrainOutcome { final_checkpoint, checkpoints, loss_curve: curve_path, losses })
}

/// Per-parameter arithmetic mean of the given checkpoints; Adam state is
/// dropped. Each coordinate is computed as `min + Σ (x - min) / k` over the
/// sorted values, so the result does not depend on the order of `paths` and
/// identical inputs average to themselves exactly.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Checkpoint> {
    let first = paths.first().ok_or_else(|| Error::Config("no checkpoints to average".into()))?;
    let base = read_checkpoint(first)?;
    let others = paths[1..].iter().map(|p| read_checkpoint(p).map(|c| (p, c))).collect::<Result<Vec<_>>>()?;
    for (path, c) in &others {
        if c.config_digest != base.config_digest {
            return Err(Error::CheckpointMismatch(format!(
                "{} was written for a different model config",
                path.display()
            )));
        }
        if c.params.len() != base.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} has {} parameters, {} has {}",
                path.display(),
                c.params.len(),
                first.display(),
                base.params.len()
            )));
        }
        for ((_, a), (_, b)) in base.params.iter().zip(c.params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: parameter `{}` {:?} does not match `{}` {:?}",
                    path.display(),
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
    }
    let mut params = base.params.clone();
    params.clear_grads();
    params.reset_adam();
    let k = paths.len() as f64;
    let mut column = Vec::with_capacity(paths.len());
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.value(id).len();
        let mut mean = Vec::with_capacity(n);
        for j in 0..n {
            column.clear();
            column.push(base.params.value(id).data()[j]);
            column.extend(others.iter().map(|(_, c)| c.params.value(id).data()[j]));
            column.sort_by(f64::total_cmp);
            let lo = column[0];
            mean.push(lo + column.iter().map(|x| x - lo).sum::<f64>() / k);
        }
        let shape = params.value(id).shape().to_vec();
        *params.value_mut(id) = Tensor::new(shape, mean)?;
    }
    Ok(Checkpoint { config_digest: base.config_digest, params, has_adam: false })
}

/// Loads a checkpoint whose config digest must match `cfg`.
pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<Model> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.config_digest != cfg.model_digest() {
        return Err(Error::CheckpointMismatch(format!("{} was trained with a different model config", path.display())));
    }
    Model::from_params(&cfg.model, ckpt.params)
}

/// Mean per-token NLL over a dataset with dropout off.
pub fn evaluate_loss(model: &Model, data: &Dataset, vocab: &Vocabulary) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for ex in &data.examples {
        let prep = PreparedExample::new(ex, vocab)?;
        let mut g = Graph::new(&model.params);
        let loss = example_loss(&mut g, model, &prep)?;
        total += g.value(loss).data()[0] * prep.len() as f64;
        tokens += prep.len();
    }
    if tokens == 0 {
        return Err(Error::Evaluation("no tokens to score".into()));
    }
    Ok(total / tokens as f64)
}
