//! Replay memory organized as a mistake notebook.
//!
//! Two bounded FIFO buffers hold ordinary autonomous and human transitions.
//! Every accepted correction adds an immutable region pairing the failed
//! autonomous segment with the transitions that repaired it. Sampling picks a
//! region with probability proportional to its size and draws one pair from
//! it: `(rl, human)` from the normal region, `(fail, fix)` from a correction
//! region.

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Mode, Observation, RewardBreakdown, TerminationStatus, Transition};
use crate::vehicle::Action;

pub const NOTEBOOK_MAGIC: &[u8; 4] = b"PCNB";
pub const NOTEBOOK_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("transition with mode {mode} cannot enter the {buffer} buffer")]
    ModeMismatch { mode: &'static str, buffer: &'static str },
    #[error("invalid correction region: {0}")]
    InvalidRegion(&'static str),
    #[error("region for episode {0} already committed")]
    DuplicateRegion(u64),
    #[error("batch size must be a positive even number, got {0}")]
    OddBatch(usize),
    #[error("not enough data to sample")]
    NotEnoughData,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt notebook: {0}")]
    Corrupt(String),
    #[error("unsupported notebook version {0}")]
    Version(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalKind {
    Rl,
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub rl_capacity: usize,
    pub human_capacity: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            rl_capacity: 100_000,
            human_capacity: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionRegion {
    pub episode: u64,
    pub fail_rl: Vec<Transition>,
    pub fix_rl: Vec<Transition>,
    pub fix_human: Vec<Transition>,
}

impl CorrectionRegion {
    pub fn weight(&self) -> usize {
        self.fail_rl.len() + self.fix_rl.len() + self.fix_human.len()
    }

    /// Region may be sampled: nonempty failure and nonempty fix.
    pub fn is_valid(&self) -> bool {
        !self.fail_rl.is_empty() && self.fix_rl.len() + self.fix_human.len() > 0
    }

    fn fix(&self, j: usize) -> &Transition {
        if j < self.fix_rl.len() {
            &self.fix_rl[j]
        } else {
            &self.fix_human[j - self.fix_rl.len()]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingRegion {
    Normal,
    /// Index into [`Notebook::regions`].
    Correction(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionWeights {
    pub normal: usize,
    pub regions: BTreeMap<u64, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Notebook {
    config: ReplayConfig,
    rl: VecDeque<Transition>,
    human: VecDeque<Transition>,
    regions: Vec<CorrectionRegion>,
}

impl Notebook {
    pub fn new(config: ReplayConfig) -> Self {
        Self {
            config,
            rl: VecDeque::new(),
            human: VecDeque::new(),
            regions: Vec::new(),
        }
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn rl(&self) -> &VecDeque<Transition> {
        &self.rl
    }

    pub fn human(&self) -> &VecDeque<Transition> {
        &self.human
    }

    pub fn regions(&self) -> &[CorrectionRegion] {
        &self.regions
    }

    pub fn total_len(&self) -> usize {
        self.rl.len() + self.human.len() + self.regions.iter().map(|r| r.weight()).sum::<usize>()
    }

    pub fn push_normal(&mut self, t: Transition, which: NormalKind) -> Result<(), ReplayError> {
        let (buf, cap, expected, name) = match which {
            NormalKind::Rl => (&mut self.rl, self.config.rl_capacity, Mode::Rl, "rl"),
            NormalKind::Human => (&mut self.human, self.config.human_capacity, Mode::Human, "human"),
        };
        if t.mode != expected {
            return Err(ReplayError::ModeMismatch {
                mode: t.mode.as_str(),
                buffer: name,
            });
        }
        if cap == 0 {
            return Ok(());
        }
        while buf.len() >= cap {
            buf.pop_front();
        }
        buf.push_back(t);
        Ok(())
    }

    pub fn extend_normal(
        &mut self,
        ts: impl IntoIterator<Item = Transition>,
        which: NormalKind,
    ) -> Result<(), ReplayError> {
        for t in ts {
            self.push_normal(t, which)?;
        }
        Ok(())
    }

    /// Adds the region for episode `episode`. Fails if the region would not
    /// be sampleable or if any transition carries the wrong mode.
    pub fn commit_region(
        &mut self,
        episode: u64,
        fail_rl: Vec<Transition>,
        fix_human: Vec<Transition>,
        fix_rl: Vec<Transition>,
    ) -> Result<(), ReplayError> {
        if fail_rl.is_empty() {
            return Err(ReplayError::InvalidRegion("failed segment is empty"));
        }
        if fix_human.is_empty() && fix_rl.is_empty() {
            return Err(ReplayError::InvalidRegion("correction segment is empty"));
        }
        if fail_rl.iter().any(|t| t.mode != Mode::Rl) {
            return Err(ReplayError::InvalidRegion("failed segment must hold rl transitions"));
        }
        if fix_rl.iter().any(|t| t.mode != Mode::RlCorr) {
            return Err(ReplayError::InvalidRegion("rl fix must hold rl_corr transitions"));
        }
        if fix_human.iter().any(|t| t.mode != Mode::HumanCorr) {
            return Err(ReplayError::InvalidRegion("human fix must hold human_corr transitions"));
        }
        if self.regions.iter().any(|r| r.episode == episode) {
            return Err(ReplayError::DuplicateRegion(episode));
        }
        self.regions.push(CorrectionRegion {
            episode,
            fail_rl,
            fix_rl,
            fix_human,
        });
        Ok(())
    }

    pub fn region_weights(&self) -> RegionWeights {
        RegionWeights {
            normal: self.rl.len() + self.human.len(),
            regions: self.regions.iter().map(|r| (r.episode, r.weight())).collect(),
        }
    }

    fn normal_valid(&self) -> bool {
        !self.rl.is_empty() && !self.human.is_empty()
    }

    /// Sampleable regions with their weights. The normal region needs both
    /// normal buffers populated.
    pub fn valid_regions(&self) -> Vec<(SamplingRegion, usize)> {
        let mut out = Vec::with_capacity(self.regions.len() + 1);
        if self.normal_valid() {
            out.push((SamplingRegion::Normal, self.rl.len() + self.human.len()));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.is_valid() {
                out.push((SamplingRegion::Correction(i), r.weight()));
            }
        }
        out
    }

    /// Selection probability of every valid region.
    pub fn region_probabilities(&self) -> Vec<(SamplingRegion, f64)> {
        let valid = self.valid_regions();
        let total: usize = valid.iter().map(|(_, w)| w).sum();
        valid
            .into_iter()
            .map(|(r, w)| (r, w as f64 / total as f64))
            .collect()
    }

    /// Probability of drawing from the normal region (0 when it is not valid).
    pub fn p_normal(&self) -> f64 {
        self.region_probabilities()
            .into_iter()
            .find(|(r, _)| *r == SamplingRegion::Normal)
            .map_or(0.0, |(_, p)| p)
    }

    fn draw_from<'a, R: Rng + ?Sized>(
        &'a self,
        region: SamplingRegion,
        rng: &mut R,
    ) -> (&'a Transition, &'a Transition) {
        match region {
            SamplingRegion::Normal => {
                let a = &self.rl[rng.random_range(0..self.rl.len())];
                let b = &self.human[rng.random_range(0..self.human.len())];
                (a, b)
            }
            SamplingRegion::Correction(i) => {
                let r = &self.regions[i];
                let a = &r.fail_rl[rng.random_range(0..r.fail_rl.len())];
                let b = r.fix(rng.random_range(0..r.fix_rl.len() + r.fix_human.len()));
                (a, b)
            }
        }
    }

    /// Draws one region by weight, then one pair from it.
    pub fn sample_pair<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<(SamplingRegion, &Transition, &Transition), ReplayError> {
        let valid = self.valid_regions();
        if valid.is_empty() {
            return Err(ReplayError::NotEnoughData);
        }
        let dist = WeightedIndex::new(valid.iter().map(|(_, w)| *w))
            .map_err(|_| ReplayError::NotEnoughData)?;
        let region = valid[dist.sample(rng)].0;
        let (a, b) = self.draw_from(region, rng);
        Ok((region, a, b))
    }

    /// Assembles `batch_size / 2` independent pairs. With no valid region,
    /// falls back to uniform draws over the normal buffers.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&Transition>, ReplayError> {
        if batch_size == 0 || !batch_size.is_multiple_of(2) {
            return Err(ReplayError::OddBatch(batch_size));
        }
        let valid = self.valid_regions();
        let mut out = Vec::with_capacity(batch_size);
        if valid.is_empty() {
            let n = self.rl.len() + self.human.len();
            if n == 0 {
                return Err(ReplayError::NotEnoughData);
            }
            for _ in 0..batch_size {
                let i = rng.random_range(0..n);
                out.push(if i < self.rl.len() {
                    &self.rl[i]
                } else {
                    &self.human[i - self.rl.len()]
                });
            }
            return Ok(out);
        }
        let dist = WeightedIndex::new(valid.iter().map(|(_, w)| *w))
            .map_err(|_| ReplayError::NotEnoughData)?;
        for _ in 0..batch_size / 2 {
            let region = valid[dist.sample(rng)].0;
            let (a, b) = self.draw_from(region, rng);
            out.push(a);
            out.push(b);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let obs_dim = self
            .rl
            .iter()
            .chain(self.human.iter())
            .chain(self.regions.iter().flat_map(|r| r.fail_rl.iter()))
            .map(|t| t.obs.0.len())
            .next()
            .unwrap_or(0);
        let mut w = Vec::new();
        w.extend_from_slice(NOTEBOOK_MAGIC);
        w.write_u32::<LittleEndian>(NOTEBOOK_VERSION).unwrap();
        w.write_u64::<LittleEndian>(self.config.rl_capacity as u64).unwrap();
        w.write_u64::<LittleEndian>(self.config.human_capacity as u64).unwrap();
        w.write_u32::<LittleEndian>(obs_dim as u32).unwrap();
        w.write_u64::<LittleEndian>(self.rl.len() as u64).unwrap();
        w.write_u64::<LittleEndian>(self.human.len() as u64).unwrap();
        w.write_u64::<LittleEndian>(self.regions.len() as u64).unwrap();
        for t in self.rl.iter().chain(self.human.iter()) {
            write_record(&mut w, t);
        }
        for r in &self.regions {
            w.write_u64::<LittleEndian>(r.episode).unwrap();
            w.write_u64::<LittleEndian>(r.fail_rl.len() as u64).unwrap();
            w.write_u64::<LittleEndian>(r.fix_rl.len() as u64).unwrap();
            w.write_u64::<LittleEndian>(r.fix_human.len() as u64).unwrap();
            for t in r.fail_rl.iter().chain(&r.fix_rl).chain(&r.fix_human) {
                write_record(&mut w, t);
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ReplayError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != NOTEBOOK_MAGIC {
            return Err(ReplayError::Corrupt("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != NOTEBOOK_VERSION {
            return Err(ReplayError::Version(version));
        }
        let rl_capacity = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let human_capacity = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let obs_dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let n_rl = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let n_h = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let n_regions = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        if n_rl > rl_capacity || n_h > human_capacity {
            return Err(ReplayError::Corrupt("buffer larger than its capacity".into()));
        }
        let mut nb = Notebook::new(ReplayConfig {
            rl_capacity,
            human_capacity,
        });
        for _ in 0..n_rl {
            nb.rl.push_back(read_record(&mut r, obs_dim)?);
        }
        for _ in 0..n_h {
            nb.human.push_back(read_record(&mut r, obs_dim)?);
        }
        for _ in 0..n_regions {
            let episode = r.read_u64::<LittleEndian>().map_err(truncated)?;
            let nf = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            let nfr = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            let nfh = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            let mut read_n = |n: usize| -> Result<Vec<Transition>, ReplayError> {
                (0..n).map(|_| read_record(&mut r, obs_dim)).collect()
            };
            let fail = read_n(nf)?;
            let fix_rl = read_n(nfr)?;
            let fix_h = read_n(nfh)?;
            nb.commit_region(episode, fail, fix_h, fix_rl)
                .map_err(|e| ReplayError::Corrupt(format!("region {episode}: {e}")))?;
        }
        if !r.is_empty() {
            return Err(ReplayError::Corrupt(format!("{} trailing bytes", r.len())));
        }
        Ok(nb)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReplayError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn truncated(_: std::io::Error) -> ReplayError {
    ReplayError::Corrupt("truncated".into())
}

fn record_len(obs_dim: usize) -> usize {
    3 + 8 * (3 + 8 + 2 * obs_dim)
}

fn write_record(w: &mut Vec<u8>, t: &Transition) {
    let obs_dim = t.obs.0.len();
    w.write_u32::<LittleEndian>(record_len(obs_dim) as u32).unwrap();
    w.write_u8(t.mode.code()).unwrap();
    w.write_u8(t.status.map_or(0, |s| s.code())).unwrap();
    w.write_u8(t.done as u8).unwrap();
    for v in [t.action.delta, t.action.v, t.reward]
        .into_iter()
        .chain(t.breakdown.as_array())
        .chain(t.obs.0.iter().copied())
        .chain(t.next_obs.0.iter().copied())
    {
        w.write_f64::<LittleEndian>(v).unwrap();
    }
}

fn read_record(r: &mut &[u8], obs_dim: usize) -> Result<Transition, ReplayError> {
    let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if len != record_len(obs_dim) {
        return Err(ReplayError::Corrupt(format!(
            "record length {len}, expected {}",
            record_len(obs_dim)
        )));
    }
    if r.len() < len {
        return Err(ReplayError::Corrupt("truncated".into()));
    }
    let mode = Mode::from_code(r.read_u8().map_err(truncated)?)
        .ok_or_else(|| ReplayError::Corrupt("unknown mode".into()))?;
    let status_code = r.read_u8().map_err(truncated)?;
    let status = match status_code {
        0 => None,
        c => Some(
            TerminationStatus::from_code(c).ok_or_else(|| ReplayError::Corrupt("unknown status".into()))?,
        ),
    };
    let done = match r.read_u8().map_err(truncated)? {
        0 => false,
        1 => true,
        _ => return Err(ReplayError::Corrupt("bad done flag".into())),
    };
    let mut f = || r.read_f64::<LittleEndian>().map_err(truncated);
    let action = Action::new(f()?, f()?);
    let reward = f()?;
    let mut bd = [0.0; 8];
    for b in bd.iter_mut() {
        *b = f()?;
    }
    let obs = (0..obs_dim).map(|_| f()).collect::<Result<Vec<_>, _>>()?;
    let next_obs = (0..obs_dim).map(|_| f()).collect::<Result<Vec<_>, _>>()?;
    Ok(Transition {
        obs: Observation(obs),
        action,
        reward,
        done,
        next_obs: Observation(next_obs),
        mode,
        status,
        breakdown: RewardBreakdown::from_array(bd),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Transition tagged with `id` in its reward so draws can be identified.
    pub(crate) fn tr(mode: Mode, id: f64) -> Transition {
        Transition {
            obs: Observation(vec![id, 0.5, -0.5]),
            action: Action::new(0.1, -0.2),
            reward: id,
            done: false,
            next_obs: Observation(vec![id, 0.25, 0.75]),
            mode,
            status: None,
            breakdown: RewardBreakdown::default(),
        }
    }

    fn many(mode: Mode, n: usize, base: f64) -> Vec<Transition> {
        (0..n).map(|i| tr(mode, base + i as f64)).collect()
    }

    #[test]
    fn push_and_evict() {
        let mut nb = Notebook::new(ReplayConfig {
            rl_capacity: 3,
            human_capacity: 2,
        });
        nb.push_normal(tr(Mode::Rl, 0.0), NormalKind::Rl).unwrap();
        assert_eq!(nb.rl().len(), 1);
        for i in 1..5 {
            nb.push_normal(tr(Mode::Rl, i as f64), NormalKind::Rl).unwrap();
        }
        assert_eq!(nb.rl().len(), 3);
        assert_eq!(nb.rl()[0].reward, 2.0);
        assert!(matches!(
            nb.push_normal(tr(Mode::Human, 0.0), NormalKind::Rl),
            Err(ReplayError::ModeMismatch { .. })
        ));
        assert!(nb.push_normal(tr(Mode::Rl, 0.0), NormalKind::Human).is_err());
    }

    #[test]
    fn commit_validation_and_weights() {
        let mut nb = Notebook::new(ReplayConfig::default());
        assert!(nb.region_weights().regions.is_empty());
        assert_eq!(nb.region_weights().normal, 0);
        nb.commit_region(1, many(Mode::Rl, 12, 0.0), many(Mode::HumanCorr, 20, 100.0), vec![])
            .unwrap();
        assert_eq!(nb.region_weights().regions[&1], 32);
        assert!(matches!(
            nb.commit_region(2, many(Mode::Rl, 3, 0.0), vec![], vec![]),
            Err(ReplayError::InvalidRegion(_))
        ));
        assert!(matches!(
            nb.commit_region(2, vec![], many(Mode::HumanCorr, 3, 0.0), vec![]),
            Err(ReplayError::InvalidRegion(_))
        ));
        assert!(nb
            .commit_region(2, many(Mode::Rl, 3, 0.0), many(Mode::Human, 3, 0.0), vec![])
            .is_err());
        assert!(matches!(
            nb.commit_region(1, many(Mode::Rl, 3, 0.0), many(Mode::HumanCorr, 3, 0.0), vec![]),
            Err(ReplayError::DuplicateRegion(1))
        ));
        nb.extend_normal(many(Mode::Rl, 100, 0.0), NormalKind::Rl).unwrap();
        nb.extend_normal(many(Mode::Human, 50, 0.0), NormalKind::Human).unwrap();
        assert_eq!(nb.region_weights().normal, 150);
    }

    #[test]
    fn batch_shapes_and_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut nb = Notebook::new(ReplayConfig::default());
        assert!(matches!(nb.sample_batch(32, &mut rng), Err(ReplayError::NotEnoughData)));
        assert!(matches!(nb.sample_batch(31, &mut rng), Err(ReplayError::OddBatch(31))));
        nb.extend_normal(many(Mode::Rl, 10, 0.0), NormalKind::Rl).unwrap();
        let b = nb.sample_batch(32, &mut rng).unwrap();
        assert_eq!(b.len(), 32);
        assert!(b.iter().all(|t| t.mode == Mode::Rl));

        let mut only_region = Notebook::new(ReplayConfig::default());
        only_region
            .commit_region(4, many(Mode::Rl, 2, 0.0), vec![], many(Mode::RlCorr, 2, 10.0))
            .unwrap();
        let b = only_region.sample_batch(2, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].mode, b[1].mode), (Mode::Rl, Mode::RlCorr));
    }

    #[test]
    fn normal_pairs_are_rl_then_human() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut nb = Notebook::new(ReplayConfig::default());
        nb.extend_normal(many(Mode::Rl, 5, 0.0), NormalKind::Rl).unwrap();
        nb.extend_normal(many(Mode::Human, 5, 0.0), NormalKind::Human).unwrap();
        let b = nb.sample_batch(64, &mut rng).unwrap();
        for pair in b.chunks(2) {
            assert_eq!((pair[0].mode, pair[1].mode), (Mode::Rl, Mode::Human));
        }
    }

    #[test]
    fn fix_pool_is_uniform_over_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut nb = Notebook::new(ReplayConfig::default());
        nb.commit_region(
            1,
            many(Mode::Rl, 4, 0.0),
            many(Mode::HumanCorr, 1, 1000.0),
            many(Mode::RlCorr, 3, 500.0),
        )
        .unwrap();
        let mut counts = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            let (_, fail, fix) = nb.sample_pair(&mut rng).unwrap();
            assert_eq!(fail.mode, Mode::Rl);
            *counts.entry(fix.reward as i64).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 4);
        for (_, c) in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() <= 0.02);
        }
    }

    #[test]
    fn bytes_roundtrip_and_truncation() {
        let mut nb = Notebook::new(ReplayConfig {
            rl_capacity: 7,
            human_capacity: 5,
        });
        nb.extend_normal(many(Mode::Rl, 4, 0.0), NormalKind::Rl).unwrap();
        nb.extend_normal(many(Mode::Human, 2, 0.0), NormalKind::Human).unwrap();
        let mut fail = many(Mode::Rl, 3, 0.0);
        fail[2].done = true;
        fail[2].status = Some(TerminationStatus::Collision);
        nb.commit_region(9, fail, many(Mode::HumanCorr, 2, 7.0), many(Mode::RlCorr, 1, 3.0))
            .unwrap();
        let bytes = nb.to_bytes();
        let back = Notebook::from_bytes(&bytes).unwrap();
        assert_eq!(back, nb);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Notebook::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 99;
        assert!(matches!(Notebook::from_bytes(&bad), Err(ReplayError::Version(_))));
    }
}
