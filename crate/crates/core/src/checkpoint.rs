//! Versioned text checkpoints.
//!
//! Values are stored as the hex of their IEEE-754 bits, so save/load is
//! bit-exact. An `oracle` checkpoint carries no weights and ranks by the
//! ground-truth ratings; it exists for evaluation fixtures.
//!
//! ```text
//! listrank-checkpoint 1
//! kind model
//! seed 7
//! m 10
//! history_len 10
//! emb 32
//! features 64
//! position_embeddings true
//! tensor item_w 64 32
//! 3fb99999999999a ...
//! end
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelDims, ModelError, ModelParams, OracleRanker, Ranker};
use crate::ranking::TargetRanking;
use crate::tape::Tensor;
use crate::template::{CandidateSlate, HistorySequence, TieBreak};

const MAGIC: &str = "listrank-checkpoint";
const VERSION: u32 = 1;
const VALUES_PER_LINE: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointKind {
    Model(ModelParams),
    Oracle(TieBreak),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub m: usize,
    pub history_len: usize,
    pub kind: CheckpointKind,
}

impl Checkpoint {
    pub fn model(seed: u64, params: ModelParams) -> Self {
        Checkpoint {
            seed,
            m: params.dims.m,
            history_len: params.dims.history_len,
            kind: CheckpointKind::Model(params),
        }
    }

    pub fn oracle(m: usize, history_len: usize, tie_break: TieBreak) -> Self {
        Checkpoint {
            seed: 0,
            m,
            history_len,
            kind: CheckpointKind::Oracle(tie_break),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        let kind = match self.kind {
            CheckpointKind::Model(_) => "model",
            CheckpointKind::Oracle(_) => "oracle",
        };
        let _ = writeln!(out, "kind {kind}\nseed {}\nm {}\nhistory_len {}", self.seed, self.m, self.history_len);
        match &self.kind {
            CheckpointKind::Oracle(tb) => {
                let name = match tb {
                    TieBreak::Title => "title",
                    TieBreak::Label => "label",
                };
                let _ = writeln!(out, "tie_break {name}");
            }
            CheckpointKind::Model(p) => {
                let _ = writeln!(out, "emb {}\nfeatures {}\nposition_embeddings {}", p.dims.emb, p.dims.features, p.dims.position_embeddings);
                for ((name, rows, cols), t) in p.dims.layout().into_iter().zip(&p.tensors) {
                    let _ = writeln!(out, "tensor {name} {rows} {cols}");
                    for chunk in t.data().chunks(VALUES_PER_LINE) {
                        let line: Vec<String> = chunk.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
                        out.push_str(&line.join(" "));
                        out.push('\n');
                    }
                }
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let err = |line: usize, message: String| CheckpointError::Format { line, message };
        let mut next = |what: &str| lines.next().ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")));

        let (ln, header) = next("header")?;
        if header != format!("{MAGIC} {VERSION}") {
            return Err(err(ln, format!("unsupported header '{header}'")));
        }
        let mut field = |key: &str| -> Result<(usize, String), CheckpointError> {
            let (ln, line) = next(key)?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok((ln, v.trim().to_string())),
                _ => Err(err(ln, format!("expected '{key} <value>', found '{line}'"))),
            }
        };
        fn num<T: std::str::FromStr>((ln, v): (usize, String)) -> Result<T, CheckpointError> {
            v.parse().map_err(|_| CheckpointError::Format {
                line: ln,
                message: format!("bad number '{v}'"),
            })
        }
        let (kind_ln, kind) = field("kind")?;
        let seed: u64 = num(field("seed")?)?;
        let m: usize = num(field("m")?)?;
        let history_len: usize = num(field("history_len")?)?;
        let kind = match kind.as_str() {
            "oracle" => {
                let (ln, tb) = field("tie_break")?;
                CheckpointKind::Oracle(tb.parse().map_err(|e: String| err(ln, e))?)
            }
            "model" => {
                let emb: usize = num(field("emb")?)?;
                let features: usize = num(field("features")?)?;
                let (ln, pe) = field("position_embeddings")?;
                let position_embeddings = pe.parse().map_err(|_| err(ln, format!("bad boolean '{pe}'")))?;
                let dims = ModelDims {
                    m,
                    history_len,
                    emb,
                    features,
                    position_embeddings,
                };
                dims.validate()?;
                let mut tensors = Vec::new();
                for (name, rows, cols) in dims.layout() {
                    let (ln, line) = next("tensor")?;
                    if line != format!("tensor {name} {rows} {cols}") {
                        return Err(err(ln, format!("expected tensor {name} {rows}x{cols}, found '{line}'")));
                    }
                    let mut data = Vec::with_capacity(rows * cols);
                    while data.len() < rows * cols {
                        let (ln, line) = next("tensor values")?;
                        for word in line.split_whitespace() {
                            let bits = u64::from_str_radix(word, 16).map_err(|_| err(ln, format!("bad value '{word}'")))?;
                            data.push(f64::from_bits(bits));
                        }
                        if data.len() > rows * cols {
                            return Err(err(ln, format!("too many values for {name}")));
                        }
                    }
                    tensors.push(Tensor::from_vec(rows, cols, data).expect("length checked"));
                }
                let params = ModelParams { dims, tensors };
                if !params.all_finite() {
                    return Err(err(0, "non-finite parameter values".into()));
                }
                CheckpointKind::Model(params)
            }
            other => return Err(err(kind_ln, format!("unknown kind '{other}'"))),
        };
        let (ln, end) = next("end")?;
        if end != "end" {
            return Err(err(ln, format!("expected 'end', found '{end}'")));
        }
        Ok(Checkpoint {
            seed,
            m,
            history_len,
            kind,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_text()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

impl Ranker for Checkpoint {
    fn rank(&self, history: &HistorySequence, slate: &CandidateSlate) -> Result<TargetRanking, ModelError> {
        match &self.kind {
            CheckpointKind::Model(p) => p.rank(history, slate),
            CheckpointKind::Oracle(tb) => OracleRanker { tie_break: *tb }.rank(history, slate),
        }
    }
}
