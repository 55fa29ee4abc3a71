//! Named parameter storage, the per-tape binding graph and the checkpoint format.

use std::io::{BufRead, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::substrate::{Gradients, Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "heurvid-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Once frozen, nothing can write to them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.frozen {
            return Err(Error::State(format!("cannot add {name:?} to frozen parameters")));
        }
        if self.names.contains(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::State(format!(
                "parameter {:?} is frozen",
                self.names[id.0]
            )));
        }
        Ok(&mut self.values[id.0])
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// SHA-256 over names, shapes and parameter bytes, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update([0]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, kind: &str, config: &serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            kind: kind.to_string(),
            frozen: self.frozen,
            config: config.clone(),
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut buf = serde_json::to_vec(&header)?;
        buf.push(b'\n');
        for t in &self.values {
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<(CheckpointHeader, ParamStore)> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::format(line.len() as u64, "checkpoint header is not newline-terminated"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&line[..line.len() - 1])
            .map_err(|e| Error::format(0, format!("checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format(0, format!("unknown checkpoint format {:?}", header.format)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut offset = 0usize;
        let base = line.len() as u64;
        let mut store = ParamStore::new();
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let end = offset + 8 * n;
            if end > payload.len() {
                return Err(Error::format(
                    base + payload.len() as u64,
                    format!("truncated payload for {:?}", p.name),
                ));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            store.add(p.name.clone(), Tensor::new(p.shape.clone(), data)?)?;
            offset = end;
        }
        if offset != payload.len() {
            return Err(Error::format(base + offset as u64, "trailing bytes after parameters"));
        }
        store.frozen = header.frozen;
        Ok((header, store))
    }

    pub fn save(&self, path: &Path, kind: &str, config: &serde_json::Value) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w, kind, config)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub kind: String,
    pub frozen: bool,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

/// Xavier-uniform `[rows, cols]` matrix.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, &[rows, cols], a)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// A tape plus the parameter store it reads; each parameter becomes one leaf per tape,
/// so its gradient accumulates over every use.
pub struct Graph<'a> {
    tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Graph<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Graph {
            tape,
            store,
            bound: vec![None; store.len()],
            dropout_rng: None,
        }
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn training(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Leaf for `id`; frozen stores yield constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.store.is_frozen() {
            self.tape.constant(t)
        } else {
            self.tape.var(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses an existing tape node in place of parameter `id`.
    pub fn bind(&mut self, id: ParamId, var: Var) -> Result<()> {
        if self.tape.shape(var) != self.store.get(id).shape() {
            return Err(Error::shape(format!(
                "binding {:?} with shape {:?} to a {:?} node",
                self.store.name(id),
                self.store.get(id).shape(),
                self.tape.shape(var)
            )));
        }
        self.bound[id.0] = Some(var);
        Ok(())
    }

    /// Gradients of every trainable parameter used on this tape.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|&v| self.tape.requires_grad(v)).map(|v| (ParamId(i), grads.get(v))))
            .collect()
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x).to_vec();
        let keep = 1.0 / (1.0 - rate);
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        self.tape.mul(x, m)
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add("a.w", xavier(&mut rng, 3, 4)).unwrap();
        s.add("a.b", uniform(&mut rng, &[1, 4], 0.1)).unwrap();
        s.add("tau", Tensor::scalar(0.07f64.ln())).unwrap();
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut s = store();
        s.freeze();
        let cfg = serde_json::json!({"dim": 4});
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf, "test", &cfg).unwrap();
        let (header, back) = ParamStore::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(header.kind, "test");
        assert_eq!(header.config, cfg);
        assert!(back.is_frozen());
        assert_eq!(back.checksum(), s.checksum());
        for id in s.ids() {
            let a: Vec<u64> = s.get(id).data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = back.get(id).data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let s = store();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf, "test", &serde_json::Value::Null).unwrap();
        buf.truncate(buf.len() - 3);
        let err = ParamStore::read_checkpoint(buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset as usize == buf.len()), "{err}");
    }

    #[test]
    fn frozen_store_refuses_writes_and_binds_constants() {
        let mut s = store();
        s.freeze();
        let id = s.id("a.w").unwrap();
        assert!(matches!(s.get_mut(id), Err(Error::State(_))));
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &s);
        let v = g.param(id);
        assert!(!g.requires_grad(v));
        assert_eq!(g.param(id), v);
    }

    #[test]
    fn checksum_tracks_bytes() {
        let mut s = store();
        let before = s.checksum();
        let id = s.id("a.b").unwrap();
        s.get_mut(id).unwrap().data_mut()[0] += 1e-12;
        assert_ne!(before, s.checksum());
    }

    #[test]
    fn dropout_only_in_training() {
        let s = ParamStore::new();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &s);
        let x = g.constant(Tensor::full(&[4, 8], 1.0));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        let mut g = g.training(ChaCha8Rng::seed_from_u64(0));
        let y = g.dropout(x, 0.5).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(vals.contains(&0.0));
    }
}
