//! Versioned plain-text checkpoints.
//!
//! ```text
//! spiketrain-checkpoint 1
//! seed 7
//! neuron tau_m tau_s refractory reset_voltage synaptic_delay sim_step
//! thresholds ν_1 … ν_{L−1}
//! layer <kind> <size> <density>        (one line per layer)
//! ff <k> <rows> <cols>                 (then one line per row)
//! rec <k> <n>                          (then n mask lines of 0/1, then n rows)
//! end
//! ```
//!
//! Numbers are written as `{:.16e}`, which round-trips every `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use spiketrain_core::topology::RecurrentWeights;
use spiketrain_core::{LayerKind, LayerSpec, Matrix, NeuronParams, SynapseMask, Topology};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "spiketrain-checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: String },

    #[error("corrupt checkpoint at line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub params: NeuronParams,
    pub topology: Topology,
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn kind_name(k: LayerKind) -> &'static str {
    match k {
        LayerKind::Input => "input",
        LayerKind::Feedforward => "feedforward",
        LayerKind::Recurrent => "recurrent",
    }
}

fn write_rows(out: &mut String, m: &Matrix) {
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| num(v)).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        writeln!(out, "{MAGIC} {FORMAT_VERSION}").unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(
            out,
            "neuron {} {} {} {} {} {}",
            num(p.tau_m),
            num(p.tau_s),
            num(p.refractory),
            num(p.reset_voltage),
            num(p.synaptic_delay),
            num(p.sim_step)
        )
        .unwrap();
        let th: Vec<String> = p.thresholds.iter().map(|&v| num(v)).collect();
        writeln!(out, "thresholds {}", th.join(" ")).unwrap();
        for l in &self.topology.layers {
            writeln!(out, "layer {} {} {}", kind_name(l.kind), l.size, num(l.recurrent_density)).unwrap();
        }
        for k in 1..self.topology.num_layers() {
            let w = self.topology.ff(k);
            writeln!(out, "ff {k} {} {}", w.rows(), w.cols()).unwrap();
            write_rows(&mut out, w);
            if let Some(rec) = self.topology.rec(k) {
                let n = rec.mask.size();
                writeln!(out, "rec {k} {n}").unwrap();
                for i in 0..n {
                    let bits: String = (0..n).map(|j| if rec.mask.contains(i, j) { '1' } else { '0' }).collect();
                    writeln!(out, "{bits}").unwrap();
                }
                write_rows(&mut out, &rec.weights);
            }
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut r = Reader {
            lines: text.lines().collect(),
            pos: 0,
        };
        let head = r.words()?;
        if head.first() != Some(&MAGIC) || head.len() != 2 {
            return Err(r.corrupt("missing checkpoint header"));
        }
        if head[1] != FORMAT_VERSION.to_string() {
            return Err(CheckpointError::Version {
                found: head[1].to_string(),
            });
        }
        let seed = r.keyed("seed", 1)?[0].parse().map_err(|_| r.corrupt("bad seed"))?;
        let n = r.floats("neuron", 6)?;
        let thresholds = r.floats("thresholds", usize::MAX)?;
        let params = NeuronParams {
            tau_m: n[0],
            tau_s: n[1],
            thresholds,
            refractory: n[2],
            reset_voltage: n[3],
            synaptic_delay: n[4],
            sim_step: n[5],
        };

        let mut layers = Vec::new();
        while r.peek_word() == Some("layer") {
            let w = r.keyed("layer", 3)?;
            let size: usize = w[1].parse().map_err(|_| r.corrupt("bad layer size"))?;
            let density: f64 = w[2].parse().map_err(|_| r.corrupt("bad density"))?;
            layers.push(match w[0] {
                "input" => LayerSpec::input(size),
                "feedforward" => LayerSpec::feedforward(size),
                "recurrent" => LayerSpec::recurrent(size, density),
                other => return Err(r.corrupt(&format!("unknown layer kind {other:?}"))),
            });
        }
        let mut topology = Topology::new(layers).map_err(|e| r.corrupt(&e.to_string()))?;

        for k in 1..topology.num_layers() {
            let w = r.keyed("ff", 3)?;
            let dims: Vec<usize> = w.iter().map(|s| s.parse().unwrap_or(usize::MAX)).collect();
            let expected = [k, topology.size(k), topology.size(k - 1)];
            if dims != expected {
                return Err(r.corrupt(&format!("expected ff {} {} {}", expected[0], expected[1], expected[2])));
            }
            *topology.ff_mut(k) = r.matrix(expected[1], expected[2])?;
            if topology.is_recurrent(k) {
                let w = r.keyed("rec", 2)?;
                let n = topology.size(k);
                if w != [k.to_string(), n.to_string()] {
                    return Err(r.corrupt(&format!("expected rec {k} {n}")));
                }
                let mut bits = Vec::with_capacity(n * n);
                for _ in 0..n {
                    let line = r.next()?;
                    if line.len() != n || !line.bytes().all(|b| b == b'0' || b == b'1') {
                        return Err(r.corrupt("bad mask row"));
                    }
                    bits.extend(line.bytes().map(|b| b == b'1'));
                }
                let mask = SynapseMask::from_bits(n, bits);
                let weights = r.matrix(n, n)?;
                topology.recurrent[k] = Some(RecurrentWeights { weights, mask });
            }
        }
        if r.next()? != "end" {
            return Err(r.corrupt("expected end"));
        }
        Ok(Self { seed, params, topology })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_text()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }
}

struct Reader<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, message: &str) -> CheckpointError {
        CheckpointError::Corrupt {
            line: self.pos.max(1),
            message: message.to_string(),
        }
    }

    fn next(&mut self) -> Result<&'a str, CheckpointError> {
        let line = self.lines.get(self.pos).copied();
        self.pos += 1;
        line.ok_or_else(|| self.corrupt("unexpected end of file"))
    }

    fn peek_word(&self) -> Option<&'a str> {
        self.lines.get(self.pos).and_then(|l| l.split_whitespace().next())
    }

    fn words(&mut self) -> Result<Vec<&'a str>, CheckpointError> {
        Ok(self.next()?.split_whitespace().collect())
    }

    /// Words after `key`; `count = usize::MAX` accepts any number.
    fn keyed(&mut self, key: &str, count: usize) -> Result<Vec<&'a str>, CheckpointError> {
        let w = self.words()?;
        if w.first() != Some(&key) || (count != usize::MAX && w.len() != count + 1) {
            return Err(self.corrupt(&format!("expected {key:?} line")));
        }
        Ok(w[1..].to_vec())
    }

    fn floats(&mut self, key: &str, count: usize) -> Result<Vec<f64>, CheckpointError> {
        let w = self.keyed(key, count)?;
        w.iter()
            .map(|s| s.parse().map_err(|_| self.corrupt(&format!("bad number {s:?}"))))
            .collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix, CheckpointError> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let w = self.words()?;
            if w.len() != cols {
                return Err(self.corrupt(&format!("expected {cols} values")));
            }
            for s in w {
                data.push(s.parse().map_err(|_| self.corrupt(&format!("bad number {s:?}")))?);
            }
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }
}
