//! Tabular-context softmax policies.
//!
//! A context is a task id plus the last `window` generated tokens. Each
//! context owns a row of logits; all rows live in one flat parameter vector
//! so gradients and updates are plain `Vec<f64>` operations.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::stable_sum;

/// End-of-sequence token, index 0 in every vocabulary.
pub const EOS: usize = 0;

/// Default number of previous tokens visible to the policy.
pub const DEFAULT_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey {
    pub task: u32,
    pub prefix: Vec<u32>,
}

impl ContextKey {
    pub fn new(task: u32, prefix: impl Into<Vec<u32>>) -> Self {
        Self {
            task,
            prefix: prefix.into(),
        }
    }
}

impl fmt::Display for ContextKey {
    /// `task|t1.t2`, with an empty prefix written as `task|`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|", self.task)?;
        for (i, t) in self.prefix.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for ContextKey {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (task, prefix) = s
            .split_once('|')
            .ok_or_else(|| format!("context key `{s}` lacks `|`"))?;
        let task = task.parse().map_err(|e| format!("bad task id `{task}`: {e}"))?;
        let prefix = if prefix.is_empty() {
            Vec::new()
        } else {
            prefix
                .split('.')
                .map(|t| t.parse().map_err(|e| format!("bad token `{t}`: {e}")))
                .collect::<std::result::Result<_, _>>()?
        };
        Ok(ContextKey { task, prefix })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    offset: usize,
    size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    window: usize,
    index: BTreeMap<ContextKey, usize>,
    slots: Vec<Slot>,
    keys: Vec<ContextKey>,
    params: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            index: BTreeMap::new(),
            slots: Vec::new(),
            keys: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_contexts(&self) -> usize {
        self.keys.len()
    }

    /// Largest action count over all contexts.
    pub fn vocab_size(&self) -> usize {
        self.slots.iter().map(|s| s.size).max().unwrap_or(0)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn contexts(&self) -> impl Iterator<Item = &ContextKey> {
        self.keys.iter()
    }

    /// Registers a context with zero logits; no-op if already present.
    pub fn add_context(&mut self, key: ContextKey, vocab: usize) -> Result<()> {
        if vocab == 0 {
            return Err(Error::domain(format!("context {key} needs at least one action")));
        }
        if let Some(&slot) = self.index.get(&key) {
            if self.slots[slot].size != vocab {
                return Err(Error::domain(format!(
                    "context {key} already registered with {} actions",
                    self.slots[slot].size
                )));
            }
            return Ok(());
        }
        let offset = self.params.len();
        self.params.resize(offset + vocab, 0.0);
        self.index.insert(key.clone(), self.slots.len());
        self.slots.push(Slot { offset, size: vocab });
        self.keys.push(key);
        Ok(())
    }

    /// Registers every context a task can reach: all prefixes of non-EOS
    /// tokens up to the window (and up to `max_length - 1`).
    pub fn ensure_task(&mut self, task: u32, vocab: usize, max_length: usize) -> Result<()> {
        let depth = self.window.min(max_length.saturating_sub(1));
        let mut frontier: Vec<Vec<u32>> = vec![Vec::new()];
        for level in 0..=depth {
            let mut next = Vec::new();
            for prefix in &frontier {
                self.add_context(ContextKey::new(task, prefix.clone()), vocab)?;
                if level < depth {
                    for t in 1..vocab as u32 {
                        let mut p = prefix.clone();
                        p.push(t);
                        next.push(p);
                    }
                }
            }
            frontier = next;
        }
        Ok(())
    }

    /// Context seen after emitting `emitted` on `task`.
    pub fn context_for(&self, task: u32, emitted: &[usize]) -> ContextKey {
        let start = emitted.len().saturating_sub(self.window);
        ContextKey::new(
            task,
            emitted[start..].iter().map(|&t| t as u32).collect::<Vec<_>>(),
        )
    }

    /// Parameter range `(offset, size)` of a context.
    pub fn slot(&self, key: &ContextKey) -> Result<(usize, usize)> {
        self.index
            .get(key)
            .map(|&i| (self.slots[i].offset, self.slots[i].size))
            .ok_or_else(|| Error::domain(format!("unknown context {key}")))
    }

    pub fn logits(&self, key: &ContextKey) -> Result<&[f64]> {
        let (o, n) = self.slot(key)?;
        Ok(&self.params[o..o + n])
    }

    pub fn logits_mut(&mut self, key: &ContextKey) -> Result<&mut [f64]> {
        let (o, n) = self.slot(key)?;
        Ok(&mut self.params[o..o + n])
    }

    pub fn log_probs(&self, key: &ContextKey) -> Result<Vec<f64>> {
        Ok(log_softmax(self.logits(key)?))
    }

    pub fn probs(&self, key: &ContextKey) -> Result<Vec<f64>> {
        Ok(self.log_probs(key)?.into_iter().map(f64::exp).collect())
    }

    pub fn log_prob(&self, key: &ContextKey, action: usize) -> Result<f64> {
        let logits = self.logits(key)?;
        if action >= logits.len() {
            return Err(Error::domain(format!(
                "action {action} out of range for context {key} ({} actions)",
                logits.len()
            )));
        }
        Ok(log_softmax(logits)[action])
    }

    /// Draws an action by inverting the CDF with one uniform variate.
    pub fn sample_action<R: Rng + ?Sized>(&self, key: &ContextKey, rng: &mut R) -> Result<usize> {
        let probs = self.probs(key)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(a);
            }
        }
        // u landed in the rounding gap above the last cumulative value
        Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
    }

    /// Highest-probability action, lowest index on ties.
    pub fn greedy_action(&self, key: &ContextKey) -> Result<usize> {
        let logits = self.logits(key)?;
        let mut best = 0;
        for (a, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = a;
            }
        }
        Ok(best)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self, key: &ContextKey) -> Result<f64> {
        let lp = self.log_probs(key)?;
        let h = -stable_sum(lp.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }));
        Ok(h.max(0.0))
    }

    /// `d log pi(action | key) / d logits[key]` = one-hot(action) - probs.
    pub fn score(&self, key: &ContextKey, action: usize) -> Result<Vec<f64>> {
        let mut g = self.probs(key)?;
        if action >= g.len() {
            return Err(Error::domain(format!("action {action} out of range for {key}")));
        }
        for p in g.iter_mut() {
            *p = -*p;
        }
        g[action] += 1.0;
        Ok(g)
    }

    /// Fills every logit with an independent `N(0, scale^2)` draw.
    pub fn randomize<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) -> Result<()> {
        if scale == 0.0 {
            self.params.iter_mut().for_each(|p| *p = 0.0);
            return Ok(());
        }
        let normal = Normal::new(0.0, scale)
            .map_err(|e| Error::domain(format!("bad logit scale {scale}: {e}")))?;
        for p in self.params.iter_mut() {
            *p = normal.sample(rng);
        }
        Ok(())
    }

    /// `params += step * direction`.
    pub fn apply_update(&mut self, direction: &[f64], step: f64) -> Result<()> {
        if direction.len() != self.params.len() {
            return Err(Error::domain(format!(
                "update has {} entries, policy has {}",
                direction.len(),
                self.params.len()
            )));
        }
        for (p, d) in self.params.iter_mut().zip(direction) {
            *p += step * d;
        }
        Ok(())
    }

    /// Writes the flat checkpoint: one `context action logit` line per entry.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "# fiberlab policy checkpoint v1")?;
            writeln!(w, "# window {}", self.window)?;
            for (key, slot) in self.keys.iter().zip(&self.slots) {
                for a in 0..slot.size {
                    // `{:?}` on f64 is shortest round-trip
                    writeln!(w, "{key} {a} {:?}", self.params[slot.offset + a])?;
                }
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            what: "policy checkpoint",
            line,
            message,
        };
        let mut window = None;
        let mut rows: Vec<(ContextKey, Vec<f64>)> = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = n + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(w) = rest.trim().strip_prefix("window ") {
                    window = Some(
                        w.trim()
                            .parse::<usize>()
                            .map_err(|e| parse_err(lineno, e.to_string()))?,
                    );
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [key, action, logit] = fields[..] else {
                return Err(parse_err(lineno, format!("expected 3 fields, got {}", fields.len())));
            };
            let key: ContextKey = key.parse().map_err(|e| parse_err(lineno, e))?;
            let action: usize = action.parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
            let logit: f64 = logit.parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
            if !logit.is_finite() {
                return Err(parse_err(lineno, "non-finite logit".into()));
            }
            match rows.last_mut() {
                Some((k, v)) if *k == key => {
                    if action != v.len() {
                        return Err(parse_err(lineno, format!("expected action {}, got {action}", v.len())));
                    }
                    v.push(logit);
                }
                _ => {
                    if action != 0 {
                        return Err(parse_err(lineno, format!("context {key} must start at action 0")));
                    }
                    rows.push((key, vec![logit]));
                }
            }
        }
        let window = window.ok_or_else(|| parse_err(0, "missing `# window` header".into()))?;
        let mut policy = SoftmaxPolicy::new(window);
        for (key, logits) in rows {
            if policy.index.contains_key(&key) {
                return Err(parse_err(0, format!("context {key} listed twice")));
            }
            policy.add_context(key.clone(), logits.len())?;
            policy.logits_mut(&key)?.copy_from_slice(&logits);
        }
        Ok(policy)
    }
}

/// Numerically stable log-softmax (max-subtracted).
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + stable_sum(logits.iter().map(|&z| (z - max).exp())).ln();
    logits.iter().map(|&z| z - lse).collect()
}
