//! Single-file binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!   magic "AWMCKPT\0", format version u32,
//!   resolved experiment config (len-prefixed UTF-8 key=value text),
//!   normalization stats (6 f64), epoch u64,
//!   two RNG states (32-byte seed + u128 word position each),
//!   named parameter tensors, named BN running buffers,
//!   optimizer velocities in parameter order.
//!
//! Tensor payloads are raw f64 bit patterns, so save/load is bit-exact.
//! Writes go to a temp file in the target directory and are renamed into
//! place.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;
use crate::train::Trainer;

const MAGIC: &[u8; 8] = b"AWMCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub norm: NormStats,
    pub epoch: u64,
    pub data_rng: RngState,
    pub augment_rng: RngState,
    pub params: Vec<(String, Tensor)>,
    pub bn_buffers: Vec<(String, Tensor)>,
    pub velocities: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config: &ExperimentConfig, norm: &NormStats) -> Checkpoint {
        let params = trainer
            .optimizer
            .params()
            .iter()
            .map(|p| (p.name(), p.value().clone()))
            .collect();
        let mut bn_buffers = Vec::new();
        for (name, stats) in trainer.net.bn_buffers() {
            bn_buffers.push((format!("{name}.running_mean"), stats.mean()));
            bn_buffers.push((format!("{name}.running_var"), stats.var()));
        }
        Checkpoint {
            config: config.clone(),
            norm: *norm,
            epoch: trainer.epoch as u64,
            data_rng: RngState::capture(&trainer.data_rng),
            augment_rng: RngState::capture(&trainer.augment_rng),
            params,
            bn_buffers,
            velocities: trainer.optimizer.velocities().to_vec(),
        }
    }

    /// Rebuild a trainer that continues exactly where the checkpoint left
    /// off: parameters, BN buffers, velocities, epoch, and RNG positions.
    pub fn into_trainer(&self) -> Result<Trainer> {
        let net = Network::build(&self.config.network, self.config.train.seed)?;
        load_named_tensors(&net, &self.params, &self.bn_buffers)?;
        let mut trainer = Trainer::new(net, self.config.train.clone())?;
        trainer.optimizer.set_velocities(self.velocities.clone())?;
        trainer.epoch = self.epoch as usize;
        trainer.data_rng = self.data_rng.restore();
        trainer.augment_rng = self.augment_rng.restore();
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let cfg_text = self.config.serialize();
        write_bytes(&mut buf, cfg_text.as_bytes());
        for c in 0..3 {
            buf.extend_from_slice(&self.norm.mean[c].to_le_bytes());
        }
        for c in 0..3 {
            buf.extend_from_slice(&self.norm.std[c].to_le_bytes());
        }
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        for rng in [&self.data_rng, &self.augment_rng] {
            buf.extend_from_slice(&rng.seed);
            buf.extend_from_slice(&rng.word_pos.to_le_bytes());
        }
        write_tensor_section(&mut buf, &self.params);
        write_tensor_section(&mut buf, &self.bn_buffers);
        buf.extend_from_slice(&(self.velocities.len() as u64).to_le_bytes());
        for v in &self.velocities {
            buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }

        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        ));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let cfg_bytes = r.take_prefixed()?;
        let cfg_text = std::str::from_utf8(cfg_bytes)
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let config = ExperimentConfig::parse(cfg_text)?;
        let mut norm = NormStats { mean: [0.0; 3], std: [0.0; 3] };
        for c in 0..3 {
            norm.mean[c] = r.f64()?;
        }
        for c in 0..3 {
            norm.std[c] = r.f64()?;
        }
        let epoch = r.u64()?;
        let mut rngs = Vec::with_capacity(2);
        for _ in 0..2 {
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            rngs.push(RngState { seed, word_pos });
        }
        let params = read_tensor_section(&mut r)?;
        let bn_buffers = read_tensor_section(&mut r)?;
        let nv = r.u64()? as usize;
        let mut velocities = Vec::with_capacity(nv);
        for _ in 0..nv {
            let len = r.u64()? as usize;
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                v.push(r.f64()?);
            }
            velocities.push(v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        let augment_rng = rngs.pop().unwrap();
        let data_rng = rngs.pop().unwrap();
        Ok(Checkpoint { config, norm, epoch, data_rng, augment_rng, params, bn_buffers, velocities })
    }
}

/// Copy named tensors into an existing network; every name must match and
/// every parameter must be covered.
pub fn load_named_tensors(
    net: &Network,
    params: &[(String, Tensor)],
    bn_buffers: &[(String, Tensor)],
) -> Result<()> {
    let live = net.params();
    if live.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: network has {}, checkpoint has {}",
            live.len(),
            params.len()
        )));
    }
    for (p, (name, value)) in live.iter().zip(params) {
        if &p.name() != name {
            return Err(Error::Checkpoint(format!(
                "parameter name mismatch: network '{}' vs checkpoint '{name}'",
                p.name()
            )));
        }
        if p.value().shape() != value.shape() {
            return Err(Error::Checkpoint(format!("parameter shape mismatch for '{name}'")));
        }
        p.set_value(value.clone());
    }
    let stats = net.bn_buffers();
    if bn_buffers.len() != stats.len() * 2 {
        return Err(Error::Checkpoint(format!(
            "BN buffer count mismatch: network has {}, checkpoint has {}",
            stats.len() * 2,
            bn_buffers.len()
        )));
    }
    for (i, (name, st)) in stats.iter().enumerate() {
        let (mname, mean) = &bn_buffers[2 * i];
        let (vname, var) = &bn_buffers[2 * i + 1];
        if mname != &format!("{name}.running_mean") || vname != &format!("{name}.running_var") {
            return Err(Error::Checkpoint(format!("BN buffer name mismatch at '{name}'")));
        }
        st.set(mean.clone(), var.clone());
    }
    Ok(())
}

fn write_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u64).to_le_bytes());
    buf.extend_from_slice(b);
}

fn write_tensor_section(buf: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        write_bytes(buf, name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_prefixed(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_tensor_section(r: &mut Reader) -> Result<Vec<(String, Tensor)>> {
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = std::str::from_utf8(r.take_prefixed()?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}
