//! Optimization loop, evaluation and the loss-variant ablation.

mod ablation;
mod adam;
mod config;
mod eval;

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{attach_loss, save_model, Mode, R2PModel};
use crate::pointcloud::{write_cloud, CloudFormat, Dataset, PointCloud};

pub use ablation::{ablate_losses, AblationRow, AblationTable};
pub use adam::Adam;
pub use config::{lr_at, TrainConfig};
pub use eval::{evaluate, EvalReport, EvalRow};

pub const STATE_MAGIC: &[u8; 4] = b"R2PS";
const STATE_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.r2pm";
pub const STATE_FILE: &str = "state.r2ps";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldOutRecord {
    pub epoch: usize,
    pub mean_cd: f64,
    pub mean_emd: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub held_out: Vec<HeldOutRecord>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,lr,seconds\n");
        for r in &self.epochs {
            writeln!(s, "{},{:.10e},{:e},{:.3}", r.epoch, r.loss, r.lr, r.seconds).unwrap();
        }
        s
    }

    pub fn held_out_csv(&self) -> String {
        let mut s = String::from("epoch,cd,emd\n");
        for r in &self.held_out {
            writeln!(s, "{},{:.10e},{:.10e}", r.epoch, r.mean_cd, r.mean_emd).unwrap();
        }
        s
    }
}

/// Optimizer position saved next to a model checkpoint so a run can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub next_epoch: usize,
    pub step: u64,
    pub adam: Adam,
}

impl TrainState {
    pub fn fresh(model: &R2PModel) -> Self {
        Self {
            next_epoch: 0,
            step: 0,
            adam: Adam::new(&param_sizes(model)),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(STATE_MAGIC)?;
        w.write_u32::<LittleEndian>(STATE_VERSION)?;
        w.write_u64::<LittleEndian>(self.next_epoch as u64)?;
        w.write_u64::<LittleEndian>(self.step)?;
        self.adam.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R, model: &R2PModel) -> Result<Self> {
        let inner = |r: &mut R| -> Result<Self> {
            let mut magic = [0u8; 4];
            r.read_exact(&mut magic)?;
            if &magic != STATE_MAGIC {
                return Err(Error::Checkpoint(format!("expected magic R2PS, got {magic:?}")));
            }
            let version = r.read_u32::<LittleEndian>()?;
            if version != STATE_VERSION {
                return Err(Error::Checkpoint(format!("unsupported state version {version}")));
            }
            let next_epoch = r.read_u64::<LittleEndian>()? as usize;
            let step = r.read_u64::<LittleEndian>()?;
            let adam = Adam::read_from(r, &param_sizes(model))?;
            Ok(Self { next_epoch, step, adam })
        };
        inner(r).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                Error::Checkpoint("optimizer state is truncated".into())
            }
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, model: &R2PModel) -> Result<Self> {
        Self::read_from(&mut Cursor::new(fs::read(path)?), model)
    }
}

fn param_sizes(model: &R2PModel) -> Vec<usize> {
    model.params().iter().map(|t| t.len()).collect()
}

/// Everything about a run that is not a hyper-parameter.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Checkpoints and abort snapshots go here; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub held_out: Option<&'a Dataset>,
    /// Continue from a saved optimizer state instead of starting at epoch 0.
    pub resume: Option<TrainState>,
    /// Stop (with a checkpoint) once this epoch has completed.
    pub stop_after_epoch: Option<usize>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

/// Trains in memory with default options.
pub fn train(model: &mut R2PModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    Ok(train_run(model, data, cfg, RunOptions::default())?.0)
}

/// Epoch-local shuffle order, derived only from the run seed and the epoch.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

pub fn train_run(
    model: &mut R2PModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut opts: RunOptions<'_>,
) -> Result<(TrainReport, TrainState)> {
    cfg.validate()?;
    if cfg.model != model.config {
        return Err(Error::usage("training config and model architecture disagree"));
    }
    let mut state = opts.resume.take().unwrap_or_else(|| TrainState::fresh(model));
    let mut report = TrainReport::default();
    if cfg.epochs == 0 || state.next_epoch >= cfg.epochs {
        return Ok((report, state));
    }
    let (n, m) = data.dims()?;
    if n != model.config.n || m != model.config.m {
        return Err(Error::Contract(format!(
            "dataset has n={n}, m={m} but the model expects n={}, m={}",
            model.config.n, model.config.m
        )));
    }
    model.loss_spec = cfg.loss;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }

    for epoch in state.next_epoch..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(cfg, epoch)?;
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = train_step(model, data, batch, cfg, lr, &mut state.adam).map_err(|e| match e {
                Error::NonFinite(what) => abort(opts.out_dir.as_deref(), data, batch, epoch, state.step, lr, what),
                other => other,
            })?;
            state.step += 1;
            report.step_losses.push(loss);
            total += loss;
            steps += 1;
        }
        state.next_epoch = epoch + 1;
        let record = EpochRecord {
            epoch,
            loss: total / steps as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        report.epochs.push(record);
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        if let Some(held) = opts.held_out {
            if cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0 {
                let r = evaluate(&*model, held)?;
                report.held_out.push(HeldOutRecord {
                    epoch,
                    mean_cd: r.mean_cd,
                    mean_emd: r.mean_emd,
                });
            }
        }
        let last = epoch + 1 == cfg.epochs || opts.stop_after_epoch == Some(epoch);
        let periodic = cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0;
        if let Some(dir) = &opts.out_dir {
            if last || periodic {
                save_model(&dir.join(MODEL_FILE), model)?;
                state.save(&dir.join(STATE_FILE))?;
            }
        }
        if last {
            break;
        }
    }
    Ok((report, state))
}

fn train_step(
    model: &mut R2PModel,
    data: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    adam: &mut Adam,
) -> Result<f64> {
    let inputs: Vec<&PointCloud> = batch.iter().map(|&i| &data.samples[i].input).collect();
    let targets: Vec<PointCloud> = batch.iter().map(|&i| data.samples[i].target.clone()).collect();
    let x = PointCloud::batch_tensor(&inputs)?;
    let mut fwd = model.forward_pass(&x, Mode::Train)?;
    let (loss, parts) = attach_loss(&mut fwd.pass.graph, fwd.p_m, fwd.p_o, &targets, &cfg.loss, &cfg.metrics)?;
    let grads = fwd.pass.graph.backward(loss)?;
    let grad_slices: Vec<&[f64]> = fwd
        .pass
        .param_vars()
        .iter()
        .map(|v| grads.get(*v).expect("parameter leaves always receive a gradient"))
        .collect();
    if grad_slices.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("parameter gradient"));
    }
    adam.step(model.params_mut(), &grad_slices, lr)?;
    let stats = fwd.pass.batch_stats().to_vec();
    model.update_running_stats(&stats)?;
    Ok(parts.total)
}

/// Writes the offending batch and a short description, then builds the abort error.
fn abort(out_dir: Option<&Path>, data: &Dataset, batch: &[usize], epoch: usize, step: u64, lr: f64, what: &str) -> Error {
    let reason = format!("non-finite value in {what}");
    let snapshot = out_dir.and_then(|dir| {
        let snap = dir.join(format!("abort_epoch{epoch}_step{step}"));
        let write = || -> Result<()> {
            fs::create_dir_all(&snap)?;
            for &i in batch {
                let s = &data.samples[i];
                write_cloud(&snap.join(format!("sample{i}_input.xyz")), &s.input, CloudFormat::Xyz)?;
                write_cloud(&snap.join(format!("sample{i}_target.xyz")), &s.target, CloudFormat::Xyz)?;
            }
            let info = format!("epoch={epoch}\nstep={step}\nlr={lr:e}\nsamples={batch:?}\nreason={reason}\n");
            fs::write(snap.join("abort.txt"), info)?;
            Ok(())
        };
        write().ok().map(|_| snap)
    });
    Error::NumericalAbort {
        epoch,
        step: step as usize,
        lr,
        reason,
        snapshot,
    }
}
