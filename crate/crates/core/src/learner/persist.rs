//! Parameter checkpoint files.
//!
//! Layout (little endian): magic `PCPR`, `u32` version, `u32` record count,
//! then per record: `u16` name length, UTF-8 name, `u8` rank, `u64` per
//! dimension, row-major `f64` payload. Scalars (log temperature, optimizer
//! step counters, update count) are rank-1 tensors of length one.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{LearnerError, Mlp, SacLearner, PARAMS_MAGIC, PARAMS_VERSION};

type Record = (Vec<usize>, Vec<f64>);

impl SacLearner {
    fn networks(&self) -> Vec<(&'static str, &Mlp)> {
        let o = &self.opt;
        vec![
            ("actor", &self.actor),
            ("critic0", &self.critics[0]),
            ("critic1", &self.critics[1]),
            ("target0", &self.targets[0]),
            ("target1", &self.targets[1]),
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("embedder", &self.embedder),
            ("opt.actor.m", &o.actor.m),
            ("opt.actor.v", &o.actor.v),
            ("opt.critic0.m", &o.critics[0].m),
            ("opt.critic0.v", &o.critics[0].v),
            ("opt.critic1.m", &o.critics[1].m),
            ("opt.critic1.v", &o.critics[1].v),
            ("opt.embedder.m", &o.embedder.m),
            ("opt.embedder.v", &o.embedder.v),
            ("opt.encoder.m", &o.encoder.m),
            ("opt.encoder.v", &o.encoder.v),
            ("opt.decoder.m", &o.decoder.m),
            ("opt.decoder.v", &o.decoder.v),
        ]
    }

    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Mlp)> {
        let o = &mut self.opt;
        let [c0, c1] = &mut self.critics;
        let [t0, t1] = &mut self.targets;
        let [oc0, oc1] = &mut o.critics;
        vec![
            ("actor", &mut self.actor),
            ("critic0", c0),
            ("critic1", c1),
            ("target0", t0),
            ("target1", t1),
            ("encoder", &mut self.encoder),
            ("decoder", &mut self.decoder),
            ("embedder", &mut self.embedder),
            ("opt.actor.m", &mut o.actor.m),
            ("opt.actor.v", &mut o.actor.v),
            ("opt.critic0.m", &mut oc0.m),
            ("opt.critic0.v", &mut oc0.v),
            ("opt.critic1.m", &mut oc1.m),
            ("opt.critic1.v", &mut oc1.v),
            ("opt.embedder.m", &mut o.embedder.m),
            ("opt.embedder.v", &mut o.embedder.v),
            ("opt.encoder.m", &mut o.encoder.m),
            ("opt.encoder.v", &mut o.encoder.v),
            ("opt.decoder.m", &mut o.decoder.m),
            ("opt.decoder.v", &mut o.decoder.v),
        ]
    }

    fn scalars(&self) -> Vec<(&'static str, f64)> {
        let o = &self.opt;
        vec![
            ("log_alpha", self.log_alpha),
            ("updates", self.updates as f64),
            ("opt.actor.t", o.actor.t as f64),
            ("opt.critic0.t", o.critics[0].t as f64),
            ("opt.critic1.t", o.critics[1].t as f64),
            ("opt.embedder.t", o.embedder.t as f64),
            ("opt.encoder.t", o.encoder.t as f64),
            ("opt.decoder.t", o.decoder.t as f64),
            ("opt.alpha.t", o.alpha.t as f64),
            ("opt.alpha.m", o.alpha.m),
            ("opt.alpha.v", o.alpha.v),
        ]
    }

    fn set_scalar(&mut self, name: &str, v: f64) {
        let o = &mut self.opt;
        let count = v as u64;
        match name {
            "log_alpha" => self.log_alpha = v,
            "updates" => self.updates = count,
            "opt.actor.t" => o.actor.t = count,
            "opt.critic0.t" => o.critics[0].t = count,
            "opt.critic1.t" => o.critics[1].t = count,
            "opt.embedder.t" => o.embedder.t = count,
            "opt.encoder.t" => o.encoder.t = count,
            "opt.decoder.t" => o.decoder.t = count,
            "opt.alpha.t" => o.alpha.t = count,
            "opt.alpha.m" => o.alpha.m = v,
            "opt.alpha.v" => o.alpha.v = v,
            _ => unreachable!("scalar names come from scalars()"),
        }
    }

    /// Serializes every learnable tensor and the optimizer state.
    pub fn params_to_bytes(&self) -> Vec<u8> {
        let mut records: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (prefix, net) in self.networks() {
            for (name, shape, data) in net.tensors() {
                records.push((format!("{prefix}.{name}"), shape, data));
            }
        }
        let scalars = self.scalars();
        for (name, v) in &scalars {
            records.push((name.to_string(), vec![1], std::slice::from_ref(v)));
        }
        let mut w = Vec::new();
        w.extend_from_slice(PARAMS_MAGIC);
        w.write_u32::<LittleEndian>(PARAMS_VERSION).unwrap();
        w.write_u32::<LittleEndian>(records.len() as u32).unwrap();
        for (name, shape, data) in records {
            w.write_u16::<LittleEndian>(name.len() as u16).unwrap();
            w.extend_from_slice(name.as_bytes());
            w.write_u8(shape.len() as u8).unwrap();
            for d in &shape {
                w.write_u64::<LittleEndian>(*d as u64).unwrap();
            }
            for v in data {
                w.write_f64::<LittleEndian>(*v).unwrap();
            }
        }
        w
    }

    /// Replaces all parameters from `bytes`. The file must match this
    /// learner's architecture exactly; on any error `self` is untouched.
    pub fn load_params_bytes(&mut self, bytes: &[u8]) -> Result<(), LearnerError> {
        let mut records = parse(bytes)?;
        let mut next = self.clone();
        for (prefix, net) in next.networks_mut() {
            let specs: Vec<(String, Vec<usize>)> = net
                .tensors()
                .into_iter()
                .map(|(n, shape, _)| (format!("{prefix}.{n}"), shape))
                .collect();
            for (slot, (name, shape)) in net.tensors_mut().into_iter().zip(specs) {
                let (_, data) = take(&mut records, &name, &shape)?;
                slot.copy_from_slice(&data);
            }
        }
        for (name, _) in self.scalars() {
            let (_, data) = take(&mut records, name, &[1])?;
            next.set_scalar(name, data[0]);
        }
        if let Some(extra) = records.keys().next() {
            return Err(LearnerError::UnexpectedTensor(extra.clone()));
        }
        *self = next;
        Ok(())
    }

    pub fn save_params(&self, path: &Path) -> Result<(), LearnerError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.params_to_bytes())?;
        Ok(())
    }

    pub fn load_params(&mut self, path: &Path) -> Result<(), LearnerError> {
        let bytes = std::fs::read(path)?;
        self.load_params_bytes(&bytes)
    }
}

fn take(records: &mut BTreeMap<String, Record>, name: &str, shape: &[usize]) -> Result<Record, LearnerError> {
    let rec = records
        .remove(name)
        .ok_or_else(|| LearnerError::MissingTensor(name.to_string()))?;
    if rec.0 != shape {
        return Err(LearnerError::Shape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: rec.0,
        });
    }
    Ok(rec)
}

fn truncated(_: std::io::Error) -> LearnerError {
    LearnerError::Corrupt("truncated".into())
}

fn parse(bytes: &[u8]) -> Result<BTreeMap<String, Record>, LearnerError> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != PARAMS_MAGIC {
        return Err(LearnerError::Corrupt("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != PARAMS_VERSION {
        return Err(LearnerError::Version { found: version });
    }
    let count = r.read_u32::<LittleEndian>().map_err(truncated)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| LearnerError::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.read_u8().map_err(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()
            .map_err(truncated)?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
            .ok_or_else(|| LearnerError::Corrupt(format!("tensor {name} exceeds file size")))?;
        let mut data = vec![0.0; numel];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(truncated)?;
        if out.insert(name.clone(), (shape, data)).is_some() {
            return Err(LearnerError::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if !r.is_empty() {
        return Err(LearnerError::Corrupt(format!("{} trailing bytes", r.len())));
    }
    Ok(out)
}
