use std::collections::VecDeque;

use super::Minibatch;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::ttt::{muon_step, FastWeights, TttConfig};

/// Backing store that minibatches are loaded from and parked back into.
pub trait MinibatchSource<T: Real> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Moves minibatch `index` out of the store.
    fn load(&mut self, index: usize) -> Result<Minibatch<T>>;

    /// Parks minibatch `index` back in the store.
    fn store(&mut self, index: usize, mb: Minibatch<T>) -> Result<()>;
}

/// In-process parking area standing in for host memory or disk.
#[derive(Clone, Debug, Default)]
pub struct HostStore<T: Real = f64> {
    slots: Vec<Option<Minibatch<T>>>,
}

impl<T: Real> HostStore<T> {
    pub fn new(minibatches: Vec<Minibatch<T>>) -> Self {
        Self {
            slots: minibatches.into_iter().map(Some).collect(),
        }
    }

    /// Number of minibatches currently parked.
    pub fn parked(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn into_minibatches(self) -> Vec<Option<Minibatch<T>>> {
        self.slots
    }
}

impl<T: Real> MinibatchSource<T> for HostStore<T> {
    fn len(&self) -> usize {
        self.slots.len()
    }

    fn load(&mut self, index: usize) -> Result<Minibatch<T>> {
        let expected = self.slots.len();
        self.slots
            .get_mut(index)
            .and_then(Option::take)
            .ok_or(Error::StreamExhausted { index, expected })
    }

    fn store(&mut self, index: usize, mb: Minibatch<T>) -> Result<()> {
        let len = self.slots.len();
        let slot = self
            .slots
            .get_mut(index)
            .ok_or_else(|| Error::Contract(format!("store index {index} outside 0..{len}")))?;
        *slot = Some(mb);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidencyReport {
    pub minibatches: usize,
    pub resident_limit: usize,
    pub peak_resident_minibatches: usize,
    pub loads: usize,
    pub stores: usize,
}

struct Residency<'a, T: Real, S: MinibatchSource<T> + ?Sized> {
    source: &'a mut S,
    limit: usize,
    // least recently used at the front
    resident: VecDeque<(usize, Minibatch<T>)>,
    report: ResidencyReport,
}

impl<T: Real, S: MinibatchSource<T> + ?Sized> Residency<'_, T, S> {
    fn position(&self, index: usize) -> Option<usize> {
        self.resident.iter().position(|(i, _)| *i == index)
    }

    /// Makes every index in `chunk` resident, evicting least recently used
    /// minibatches outside the chunk only when the limit would be exceeded.
    fn acquire(&mut self, chunk: &[usize]) -> Result<()> {
        for &idx in chunk {
            if let Some(pos) = self.position(idx) {
                let entry = self.resident.remove(pos).expect("position is in range");
                self.resident.push_back(entry);
                continue;
            }
            if self.resident.len() == self.limit {
                let victim = self
                    .resident
                    .iter()
                    .position(|(i, _)| !chunk.contains(i))
                    .ok_or_else(|| Error::Contract("no evictable minibatch".into()))?;
                let (i, mb) = self.resident.remove(victim).expect("victim is in range");
                self.source.store(i, mb)?;
                self.report.stores += 1;
            }
            let mb = self.source.load(idx)?;
            self.report.loads += 1;
            self.resident.push_back((idx, mb));
            assert!(self.resident.len() <= self.limit, "residency limit exceeded");
            self.report.peak_resident_minibatches =
                self.report.peak_resident_minibatches.max(self.resident.len());
        }
        Ok(())
    }

    fn get(&self, index: usize) -> &Minibatch<T> {
        let pos = self.position(index).expect("minibatch acquired before use");
        &self.resident[pos].1
    }

    fn release_all(&mut self) -> Result<()> {
        while let Some((i, mb)) = self.resident.pop_front() {
            self.source.store(i, mb)?;
            self.report.stores += 1;
        }
        Ok(())
    }
}

/// Runs the fast-weight update while holding at most `resident_limit`
/// minibatches at a time. Each step walks the minibatches in order in
/// chunks of `resident_limit`, takes the gradient of each chunk and sums
/// the chunk gradients. When everything fits, the result is bitwise equal
/// to the in-memory update. All minibatches are parked back on return.
pub fn run_offload_update<T: Real, S: MinibatchSource<T> + ?Sized>(
    theta0: &FastWeights<T>,
    source: &mut S,
    resident_limit: usize,
    cfg: &TttConfig,
) -> Result<(FastWeights<T>, ResidencyReport)> {
    cfg.validate()?;
    let n = source.len();
    if n == 0 {
        return Err(Error::Contract("offloaded update needs at least one minibatch".into()));
    }
    if resident_limit == 0 {
        return Err(Error::Contract("resident limit must be at least 1".into()));
    }
    let lr = if cfg.scale_lr_by_minibatches {
        cfg.lr / n as f64
    } else {
        cfg.lr
    };
    let d = theta0.dim();
    let mut res = Residency {
        source,
        limit: resident_limit,
        resident: VecDeque::new(),
        report: ResidencyReport {
            minibatches: n,
            resident_limit,
            peak_resident_minibatches: 0,
            loads: 0,
            stores: 0,
        },
    };

    let mut theta = theta0.clone();
    let outcome: Result<()> = (|| {
        for _ in 0..cfg.steps {
            let mut total = None;
            for start in (0..n).step_by(resident_limit) {
                let chunk: Vec<usize> = (start..(start + resident_limit).min(n)).collect();
                res.acquire(&chunk)?;
                let g = if chunk.len() == 1 {
                    let mb = res.get(chunk[0]);
                    cfg.loss.grad(&theta, &mb.k, &mb.vp)?
                } else {
                    let ks: Vec<&Matrix<T>> = chunk.iter().map(|&i| &res.get(i).k).collect();
                    let vs: Vec<&Matrix<T>> = chunk.iter().map(|&i| &res.get(i).vp).collect();
                    let k = Matrix::vstack(&ks, d)?;
                    let vp = Matrix::vstack(&vs, d)?;
                    cfg.loss.grad(&theta, &k, &vp)?
                };
                match total.as_mut() {
                    None => total = Some(g),
                    Some(acc) => FastWeights::add_assign(acc, &g)?,
                }
            }
            let g = total.expect("at least one chunk");
            theta = muon_step(&theta, &g, T::lit(lr), cfg.ns_iters, T::lit(cfg.eps))?;
        }
        Ok(())
    })();
    // park everything even when a step failed
    let released = res.release_all();
    outcome?;
    released?;
    Ok((theta, res.report))
}
