//! Binary checkpoints.
//!
//! Layout (little-endian): magic `EEPN`, version `u16`, config text, step
//! counter, head-attachment flag, parameter records (name, rank, dims, raw
//! `f64`), mask records (name, rank, dims, packed bits, LSB first), the
//! prunable set and the run history.

use std::fs;
use std::path::Path;

use super::history::{EvalRecord, Phase, RoundLog, RunHistory};
use crate::error::{Error, Result};
use crate::flopsmeter::OperatingPoint;
use crate::pruner::{MaskSet, PruneScope};
use crate::tensorcore::{ParamRef, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"EEPN";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Pipeline steps completed (pretraining counts as step one).
    pub steps_done: u32,
    pub internal_attached: bool,
    pub params: ParamStore,
    pub masks: MaskSet,
    pub history: RunHistory,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn opt(&mut self, v: Option<f64>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.f64(x);
            }
            None => self.u8(0),
        }
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn dims(&mut self, dims: &[usize]) {
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u32(d as u32);
        }
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn opts(&mut self, v: &[Option<f64>]) {
        self.u32(v.len() as u32);
        v.iter().for_each(|&x| self.opt(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.file, self.pos as u64, msg)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: needed {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn opt(&mut self) -> Result<Option<f64>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.f64()?)),
            t => Err(self.err(format!("bad option tag {t}"))),
        }
    }
    fn string(&mut self, len: usize) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format(self.file, at as u64, "invalid UTF-8"))
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        self.string(n)
    }
    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.string(n)
    }
    fn param_ref(&mut self) -> Result<ParamRef> {
        let at = self.pos;
        let name = self.name()?;
        name.parse()
            .map_err(|_| Error::format(self.file, at as u64, format!("bad tensor name '{name}'")))
    }
    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if rank == 0 || dims.contains(&0) {
            return Err(self.err(format!("bad tensor dims {dims:?}")));
        }
        Ok(dims)
    }
    fn count(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_size) > self.buf.len() - self.pos {
            return Err(self.err(format!("truncated: {n} entries announced")));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn opts(&mut self) -> Result<Vec<Option<f64>>> {
        let n = self.count(1)?;
        (0..n).map(|_| self.opt()).collect()
    }
    fn phase(&mut self) -> Result<Phase> {
        let code = self.u8()?;
        Phase::from_code(code).ok_or_else(|| self.err(format!("bad phase code {code}")))
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.text(&ck.config_text);
    w.u32(ck.steps_done);
    w.u8(ck.internal_attached as u8);

    w.u32(ck.params.len() as u32);
    for (r, t) in ck.params.iter() {
        w.name(&r.to_string());
        w.dims(t.shape());
        t.data().iter().for_each(|&x| w.f64(x));
    }

    w.u32(ck.masks.len() as u32);
    for (r, m) in ck.masks.iter() {
        w.name(&r.to_string());
        w.dims(&[m.len()]);
        for chunk in m.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |b, (i, &keep)| b | ((keep as u8) << i));
            w.u8(byte);
        }
    }
    w.u32(ck.masks.prunable().len() as u32);
    for r in ck.masks.prunable() {
        w.name(&r.to_string());
    }

    w.u32(ck.history.rounds.len() as u32);
    for r in &ck.history.rounds {
        w.u32(r.round);
        w.u8(r.phase.code());
        w.f64(r.global_sparsity);
        w.f64(r.scope_sparsity);
        w.u64(r.newly_masked);
        w.opt(r.loss_first);
        w.opt(r.loss_last);
        w.opt(r.loss_mean);
        w.opts(&r.pre_accuracy);
        w.opts(&r.post_accuracy);
    }
    w.u32(ck.history.evaluations.len() as u32);
    for e in &ck.history.evaluations {
        w.u32(e.round);
        w.u8(e.phase.code());
        w.opts(&e.forced_accuracy);
        w.f64s(&e.cumulative_cost);
        w.u32(e.points.len() as u32);
        for p in &e.points {
            w.f64(p.threshold);
            w.f64(p.accuracy);
            w.f64(p.expected_flops);
            w.f64s(&p.exit_fractions);
        }
        w.u32(e.hull.len() as u32);
        for &(f, a) in &e.hull {
            w.f64(f);
            w.f64(a);
        }
    }
    w.buf
}

pub fn decode(bytes: &[u8], file: &str) -> Result<Checkpoint> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        file,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(file, 0, "bad magic, expected EEPN"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let config_text = r.text()?;
    let steps_done = r.u32()?;
    let internal_attached = match r.u8()? {
        0 => false,
        1 => true,
        t => return Err(r.err(format!("bad flag {t}"))),
    };

    let mut params = ParamStore::new();
    let n = r.count(4)?;
    for _ in 0..n {
        let at = r.pos;
        let name = r.param_ref()?;
        let dims = r.dims()?;
        let numel: usize = dims.iter().product();
        if numel.saturating_mul(8) > bytes.len() - r.pos {
            return Err(r.err(format!("truncated tensor {name}")));
        }
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params
            .insert(name, Tensor::new(dims, data)?)
            .map_err(|e| Error::format(file, at as u64, e.to_string()))?;
    }

    let mut masks = MaskSet::default();
    let n = r.count(4)?;
    for _ in 0..n {
        let name = r.param_ref()?;
        let dims = r.dims()?;
        let len: usize = dims.iter().product();
        let packed = r.take(len.div_ceil(8))?;
        let bits = (0..len).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        masks.insert(name, bits);
    }
    let n = r.count(2)?;
    let prunable = (0..n).map(|_| r.param_ref()).collect::<Result<Vec<_>>>()?;
    if !prunable.is_empty() {
        let scope = PruneScope::new(prunable).map_err(|e| r.err(e.to_string()))?;
        masks.set_prunable(&scope);
    }

    let mut history = RunHistory::default();
    let n = r.count(4)?;
    for _ in 0..n {
        history.rounds.push(RoundLog {
            round: r.u32()?,
            phase: r.phase()?,
            global_sparsity: r.f64()?,
            scope_sparsity: r.f64()?,
            newly_masked: r.u64()?,
            loss_first: r.opt()?,
            loss_last: r.opt()?,
            loss_mean: r.opt()?,
            pre_accuracy: r.opts()?,
            post_accuracy: r.opts()?,
        });
    }
    let n = r.count(4)?;
    for _ in 0..n {
        let round = r.u32()?;
        let phase = r.phase()?;
        let forced_accuracy = r.opts()?;
        let cumulative_cost = r.f64s()?;
        let np = r.count(28)?;
        let mut points = Vec::with_capacity(np);
        for _ in 0..np {
            points.push(OperatingPoint {
                threshold: r.f64()?,
                accuracy: r.f64()?,
                expected_flops: r.f64()?,
                exit_fractions: r.f64s()?,
            });
        }
        let nh = r.count(16)?;
        let hull = (0..nh)
            .map(|_| Ok((r.f64()?, r.f64()?)))
            .collect::<Result<Vec<_>>>()?;
        history.evaluations.push(EvalRecord {
            round,
            phase,
            forced_accuracy,
            cumulative_cost,
            points,
            hull,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        config_text,
        steps_done,
        internal_attached,
        params,
        masks,
        history,
    })
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params
            .insert(
                ParamRef::weight("conv1"),
                Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64).sin() * 1e-3),
            )
            .unwrap();
        params
            .insert(ParamRef::bias("conv1"), Tensor::new(vec![2], vec![-0.0, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        let mut masks = MaskSet::default();
        masks.insert(ParamRef::weight("conv1"), (0..18).map(|i| i % 3 != 0).collect());
        masks.set_prunable(&PruneScope::new(vec![ParamRef::weight("conv1")]).unwrap());
        let history = RunHistory {
            rounds: vec![RoundLog {
                round: 1,
                phase: Phase::Joint,
                global_sparsity: 0.1,
                scope_sparsity: 0.1,
                newly_masked: 2,
                loss_first: Some(0.5),
                loss_last: None,
                loss_mean: Some(0.25),
                pre_accuracy: vec![Some(0.5), None],
                post_accuracy: vec![Some(0.75), None],
            }],
            evaluations: vec![EvalRecord {
                round: 0,
                phase: Phase::Baseline,
                forced_accuracy: vec![Some(0.1), Some(0.2)],
                cumulative_cost: vec![10.0, 20.0],
                points: vec![OperatingPoint {
                    threshold: 0.5,
                    accuracy: 0.2,
                    expected_flops: 15.0,
                    exit_fractions: vec![0.5, 0.5],
                }],
                hull: vec![(15.0, 0.2)],
            }],
        };
        Checkpoint {
            config_text: "seed = 1\n".into(),
            steps_done: 3,
            internal_attached: true,
            params,
            masks,
            history,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = decode(&encode(&ck), "ck").unwrap();
        assert_eq!(back, ck);
        let bits = |c: &Checkpoint| -> Vec<u64> {
            c.params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&ck));
    }

    #[test]
    fn rejects_magic_version_and_truncation() {
        let mut bytes = encode(&sample());
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bad, "ck"), Err(Error::Format { offset: 0, .. })));
        let mut v = bytes.clone();
        v[4..6].copy_from_slice(&9999u16.to_le_bytes());
        assert!(matches!(
            decode(&v, "ck"),
            Err(Error::UnsupportedVersion { found: 9999, .. })
        ));
        let full = bytes.len();
        bytes.truncate(full - 5);
        assert!(matches!(decode(&bytes, "ck"), Err(Error::Format { .. })));
        for cut in [3, 5, 11, 40] {
            assert!(decode(&encode(&sample())[..cut], "ck").is_err());
        }
    }
}
