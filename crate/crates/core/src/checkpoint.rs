//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order
//! (per network: parameters, running means and variances, optimizer
//! velocity).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Architecture, Network, RunningStats};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::sampling::{RandomStream, StreamState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MMIXCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    /// Next epoch to run.
    epoch: usize,
    config: ExperimentConfig,
    streams: Vec<StreamState>,
    networks: Vec<NetworkHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NetworkHeader {
    architecture: Architecture,
    input_shape: [usize; 3],
    num_classes: usize,
    params: Vec<(String, Vec<usize>)>,
    stats: Vec<(String, usize)>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<usize>,
}

/// Network and optimizer state of a cohort plus everything needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config: ExperimentConfig,
    pub streams: Vec<StreamState>,
    pub networks: Vec<Network>,
    pub optimizers: Vec<Sgd>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.networks.len() != self.optimizers.len() {
            return Err(Error::Checkpoint(format!(
                "{} networks but {} optimizers",
                self.networks.len(),
                self.optimizers.len()
            )));
        }
        let networks = self
            .networks
            .iter()
            .zip(&self.optimizers)
            .map(|(net, opt)| NetworkHeader {
                architecture: net.architecture(),
                input_shape: net.input_shape(),
                num_classes: net.num_classes(),
                params: net
                    .param_names()
                    .iter()
                    .cloned()
                    .zip(net.params().iter().map(|p| p.shape().to_vec()))
                    .collect(),
                stats: net
                    .stat_names()
                    .iter()
                    .cloned()
                    .zip(net.running_stats().iter().map(|s| s.mean.len()))
                    .collect(),
                lr: opt.lr,
                momentum: opt.momentum,
                weight_decay: opt.weight_decay,
                velocity: opt.velocity().iter().map(Vec::len).collect(),
            })
            .collect();
        let header = Header {
            epoch: self.epoch,
            config: self.config.clone(),
            streams: self.streams.clone(),
            networks,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |values: &[f64]| values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for (net, opt) in self.networks.iter().zip(&self.optimizers) {
            net.params().iter().for_each(|p| put(p.data()));
            for s in net.running_stats() {
                put(&s.mean);
                put(&s.var);
            }
            opt.velocity().iter().for_each(|v| put(v));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(cur.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut networks = Vec::new();
        let mut optimizers = Vec::new();
        for nh in &header.networks {
            // Initialization is overwritten below; any stream will do.
            let mut scratch = RandomStream::new(0, "checkpoint");
            let mut net = Network::new(nh.architecture, nh.input_shape, nh.num_classes, &mut scratch)?;
            let params = nh
                .params
                .iter()
                .map(|(name, shape)| {
                    let n = shape.iter().product();
                    Ok((name.clone(), Tensor::new(shape.clone(), cur.f64s(n)?)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let stats = nh
                .stats
                .iter()
                .map(|(name, n)| {
                    let mean = cur.f64s(*n)?;
                    let var = cur.f64s(*n)?;
                    Ok((name.clone(), RunningStats { mean, var }))
                })
                .collect::<Result<Vec<_>>>()?;
            net.load_state(&params, &stats)?;
            let mut opt = Sgd::new(nh.lr, nh.momentum, nh.weight_decay);
            opt.set_velocity(nh.velocity.iter().map(|&n| cur.f64s(n)).collect::<Result<_>>()?);
            networks.push(net);
            optimizers.push(opt);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self {
            epoch: header.epoch,
            config: header.config,
            streams: header.streams,
            networks,
            optimizers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn stream(&self, id: &str) -> Result<RandomStream> {
        let state = self
            .streams
            .iter()
            .find(|s| s.stream_id == id)
            .ok_or_else(|| Error::Checkpoint(format!("missing stream {id}")))?;
        RandomStream::restore(state)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
